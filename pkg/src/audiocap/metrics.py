"""Caption quality metrics: CIDEr (consensus TF-IDF n-gram cosine), the
fluency-penalized SPIDEr-FL composition, and split-level evaluation reports.

SPICE and METEOR are external plugin slots (executable taking a JSONL of
candidate/references rows and emitting JSONL scores); when no SPICE plugin is
configured the fluency penalty is applied to CIDEr and the report says so.
"""

from __future__ import annotations

import json
import math
import subprocess
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .data import CaptionText, DatasetSplit, normalize_caption

CIDER_MAX_N = 4
CIDER_SIGMA = 6.0
FLUENCY_PENALTY = 0.1


def _words(caption: CaptionText | str) -> list[str]:
    text = caption.text if isinstance(caption, CaptionText) else normalize_caption(caption)
    return text.split()


def ngram_counts(words: list[str], max_n: int = CIDER_MAX_N) -> Counter:
    counts: Counter = Counter()
    for n in range(1, max_n + 1):
        for i in range(len(words) - n + 1):
            counts[tuple(words[i : i + n])] += 1
    return counts


@dataclass
class NgramProfile:
    """Document frequencies over reference sets; one document per item."""

    doc_freq: dict[tuple, int]
    num_docs: int


def build_corpus_df(
    reference_sets: list[list[CaptionText | str]], max_n: int = CIDER_MAX_N
) -> NgramProfile:
    doc_freq: Counter = Counter()
    for references in reference_sets:
        seen: set[tuple] = set()
        for ref in references:
            seen.update(ngram_counts(_words(ref), max_n).keys())
        doc_freq.update(seen)
    return NgramProfile(doc_freq=dict(doc_freq), num_docs=len(reference_sets))


def _tfidf_vector(counts: Counter, profile: NgramProfile, max_n: int):
    log_num_docs = math.log(max(profile.num_docs, 1))
    vec = [defaultdict(float) for _ in range(max_n)]
    norm = [0.0] * max_n
    for ngram, term_freq in counts.items():
        idf = log_num_docs - math.log(max(1.0, profile.doc_freq.get(ngram, 0)))
        k = len(ngram) - 1
        vec[k][ngram] = term_freq * idf
        norm[k] += vec[k][ngram] ** 2
    return vec, [math.sqrt(x) for x in norm]


def cider(
    candidate: CaptionText | str,
    references: list[CaptionText | str],
    corpus_df: NgramProfile,
    sigma: float = CIDER_SIGMA,
    max_n: int = CIDER_MAX_N,
) -> float:
    """Consensus score: per-n cosine of clipped TF-IDF n-gram vectors with a
    Gaussian length penalty, averaged over n and references, scaled by 10.

    An empty candidate scores 0 rather than erroring.
    """
    if not references:
        raise ValueError("cider needs at least one reference")
    cand_words = _words(candidate)
    if not cand_words:
        return 0.0
    cand_vec, cand_norm = _tfidf_vector(ngram_counts(cand_words, max_n), corpus_df, max_n)
    per_n = [0.0] * max_n
    for ref in references:
        ref_words = _words(ref)
        ref_vec, ref_norm = _tfidf_vector(ngram_counts(ref_words, max_n), corpus_df, max_n)
        delta = len(cand_words) - len(ref_words)
        penalty = math.exp(-(delta**2) / (2 * sigma**2))
        for k in range(max_n):
            dot = sum(
                min(weight, ref_vec[k][ngram]) * ref_vec[k][ngram]
                for ngram, weight in cand_vec[k].items()
                if ngram in ref_vec[k]
            )
            if cand_norm[k] > 0 and ref_norm[k] > 0:
                per_n[k] += penalty * dot / (cand_norm[k] * ref_norm[k])
    return 10.0 * sum(per_n) / (max_n * len(references))


def spider_fl(spider: float, fluent: bool) -> float:
    """Penalize the score of a disfluent generation by 90%."""
    if spider < 0:
        raise ValueError("spider score must be nonnegative")
    return spider if fluent else FLUENCY_PENALTY * spider


class MetricPlugin:
    """External metric executable: JSONL of {id, candidate, references} rows in
    on stdin, JSONL of {id, score} rows out on stdout."""

    def __init__(self, name: str, executable: str | Path):
        self.name = name
        self.executable = Path(executable)

    def scores(self, rows: list[dict]) -> dict[str, float]:
        if not self.executable.exists():
            raise FileNotFoundError(f"metric plugin {self.name!r} not found at {self.executable}")
        payload = "\n".join(json.dumps(r, sort_keys=True) for r in rows)
        result = subprocess.run(
            [str(self.executable)], input=payload, capture_output=True, text=True, check=True
        )
        out = {}
        for line in result.stdout.splitlines():
            if line.strip():
                row = json.loads(line)
                out[row["id"]] = float(row["score"])
        return out


@dataclass
class MetricReport:
    corpus: dict[str, float]
    per_item: list[dict]
    config: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "corpus": self.corpus,
            "notes": self.notes,
            "per_item": self.per_item,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def score_generations(
    items: list[dict],
    fluency_flags: dict[str, bool],
    plugins: dict[str, MetricPlugin] | None = None,
    requested: tuple[str, ...] = ("cider",),
    config_echo: dict | None = None,
) -> MetricReport:
    """Compute metrics for generated captions.

    ``items`` rows carry {id, candidate, references}. CIDEr is built in; spice
    and meteor require plugins and error by name when missing. SPIDEr is the
    mean of CIDEr and SPICE when SPICE is available; the fluency penalty falls
    back to CIDEr otherwise (and the report notes it).
    """
    plugins = plugins or {}
    for metric in requested:
        if metric in ("spice", "meteor") and metric not in plugins:
            raise ValueError(f"metric {metric!r} requested but no plugin named {metric!r} configured")

    df = build_corpus_df([row["references"] for row in items])
    plugin_scores = {name: plugins[name].scores(items) for name in plugins}

    per_item = []
    for row in items:
        item_id = row["id"]
        entry = {"id": item_id, "candidate": row["candidate"]}
        entry["cider"] = cider(row["candidate"], row["references"], df)
        for name in plugin_scores:
            entry[name] = plugin_scores[name].get(item_id)
        fluent = fluency_flags[item_id]
        entry["fluent"] = fluent
        if "spice" in plugin_scores and entry.get("spice") is not None:
            entry["spider"] = 0.5 * (entry["cider"] + entry["spice"])
            entry["spider_fl"] = spider_fl(entry["spider"], fluent)
        else:
            entry["spider_fl"] = spider_fl(entry["cider"], fluent)
        per_item.append(entry)

    metric_names = sorted({k for e in per_item for k, v in e.items() if isinstance(v, (int, float)) and not isinstance(v, bool)})
    corpus = {
        name: sum(e[name] for e in per_item if e.get(name) is not None) / len(per_item)
        for name in metric_names
    }
    notes = {"corpus_aggregation": "mean over items"}
    if "spice" not in plugin_scores:
        notes["spider_fl"] = "computed from CIDEr only; no SPICE plugin configured"
    return MetricReport(corpus=corpus, per_item=per_item, config=config_echo or {}, notes=notes)


def references_of(split: DatasetSplit) -> dict[str, list[str]]:
    return {pair.id: [c.text for c in pair.captions] for pair in split}


def evaluate_split(
    captioner,
    split: DatasetSplit,
    decode_config,
    fluency_detector=None,
    plugins: dict[str, MetricPlugin] | None = None,
    requested: tuple[str, ...] = ("cider",),
    report_path: str | Path | None = None,
    dump_path: str | Path | None = None,
) -> MetricReport:
    """Generate one caption per item via the configured decoding path and score
    the split; per-item rows and the config echo go into the report."""
    import numpy as np

    from .decoding import dump_candidates, encoder_score, rerank
    from .fluency import RuleBasedFluencyDetector
    from .model import beam_search, greedy_caption, sample_candidates

    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    detector = fluency_detector or RuleBasedFluencyDetector()
    rng = np.random.default_rng(decode_config.sampling.seed)
    items = []
    fluency_flags = {}
    dumps: dict[str, list] = {}
    for pair in sorted(split, key=lambda p: p.id):
        encoded = captioner.encode(pair.waveform)
        if decode_config.mode == "sample":
            candidates = sample_candidates(captioner, encoded, decode_config.sampling, rng=rng)
            for cand in candidates:
                cand.encoder_sim = encoder_score(
                    encoded.embedding, cand.caption, captioner.text_embedder
                )
                cand.fluent = detector.is_fluent(cand.caption)
            best = rerank(candidates, decode_config.weights, detector)
            dumps[pair.id] = candidates
        elif decode_config.mode == "beam":
            best = beam_search(
                captioner, encoded, decode_config.beam_size, decode_config.sampling.max_len
            )
        else:
            best = greedy_caption(captioner, encoded, decode_config.sampling.max_len)
        items.append(
            {
                "id": pair.id,
                "candidate": best.caption.text,
                "references": [c.text for c in pair.captions],
            }
        )
        fluency_flags[pair.id] = detector.is_fluent(best.caption)

    report = score_generations(
        items,
        fluency_flags,
        plugins=plugins,
        requested=requested,
        config_echo=decode_config.to_json(),
    )
    if dump_path is not None and dumps:
        dump_candidates(dump_path, dumps)
    if report_path is not None:
        report.save(report_path)
    return report
