"""Client boundary for LLM-produced caption mix-ups.

Online mode POSTs a JSON ``{"prompt": ...}`` request and expects ``{"text":
...}`` back, with retries, a simple request-rate cap, and a prompt-hash keyed
response cache so any collected corpus can be replayed without the network.
Offline mode is a deterministic template join for fully self-contained runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .data import MIXUP_WORD_LIMIT, CaptionText, normalize_caption

logger = logging.getLogger(__name__)

DEFAULT_PROMPT_TEMPLATE = (
    "Generate a mix of the following two audio captions, and keep the "
    "generation under 25 words:\n1. {caption_1}\n2. {caption_2}"
)

API_KEY_ENV = "AUDIOCAP_LLM_API_KEY"


class LlmClientError(RuntimeError):
    pass


class OverLengthMixupError(LlmClientError):
    """The provider's output exceeded the word limit even after a retry."""


@dataclass
class LlmClientConfig:
    endpoint: str = "offline"
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    timeout: float = 30.0
    max_retries: int = 3
    rate_limit: float = 2.0  # requests per second
    cache_path: str | None = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.rate_limit <= 0:
            raise ValueError("rate_limit must be positive")

    @classmethod
    def from_file(cls, path: str | Path) -> "LlmClientConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**data)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def _word_count(text: str) -> int:
    return len(normalize_caption(text).split())


class CaptionMixClient:
    """Produces a single merged caption for a pair of source captions.

    ``transport`` maps a prompt string to a response text; the default online
    transport speaks the JSON HTTP contract. Responses are cached by prompt
    hash; ``replay_only`` forbids transport use so runs are reproducible from
    the cache alone.
    """

    def __init__(
        self,
        config: LlmClientConfig,
        transport: Callable[[str], str] | None = None,
        replay_only: bool = False,
    ):
        self.config = config
        self.replay_only = replay_only
        self._last_request_time = 0.0
        self._cache: dict[str, str] = {}
        if config.cache_path and Path(config.cache_path).is_file():
            self._cache = json.loads(Path(config.cache_path).read_text(encoding="utf-8"))
        if transport is not None:
            self._transport = transport
        elif self.offline or replay_only:
            self._transport = None
        else:
            self._transport = self._build_http_transport()

    @property
    def offline(self) -> bool:
        return self.config.endpoint == "offline"

    @property
    def provider(self) -> str:
        if self.offline:
            return "offline"
        return self.config.endpoint

    def _build_http_transport(self) -> Callable[[str], str]:
        api_key = os.environ.get(API_KEY_ENV)
        if not api_key:
            raise LlmClientError(
                f"online endpoint {self.config.endpoint!r} configured but "
                f"{API_KEY_ENV} is not set"
            )
        import requests

        def transport(prompt: str) -> str:
            response = requests.post(
                self.config.endpoint,
                json={"prompt": prompt},
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self.config.timeout,
            )
            response.raise_for_status()
            return response.json()["text"]

        return transport

    def fill_prompt(self, caption_1: CaptionText, caption_2: CaptionText) -> str:
        return self.config.prompt_template.format(
            caption_1=caption_1.text, caption_2=caption_2.text
        )

    def mix(self, caption_1: CaptionText, caption_2: CaptionText) -> CaptionText:
        """Merge two captions; raises OverLengthMixupError on persistent overflow."""
        if self.offline:
            text = offline_caption_mix(caption_1, caption_2)
            return CaptionText(text, source="mixup")
        prompt = self.fill_prompt(caption_1, caption_2)
        text = self._request(prompt)
        if _word_count(text) > MIXUP_WORD_LIMIT:
            logger.warning("over-length mix-up (%d words), retrying once", _word_count(text))
            text = self._request(prompt, bypass_cache=True)
            if _word_count(text) > MIXUP_WORD_LIMIT:
                raise OverLengthMixupError(
                    f"mix-up exceeds {MIXUP_WORD_LIMIT} words after retry: {text!r}"
                )
        return CaptionText(text.splitlines()[0].strip(), source="mixup")

    def _request(self, prompt: str, bypass_cache: bool = False) -> str:
        key = prompt_hash(prompt)
        if not bypass_cache and key in self._cache:
            return self._cache[key]
        if self.replay_only or self._transport is None:
            raise LlmClientError(f"no cached response for prompt hash {key} in replay mode")
        text = self._call_with_retries(prompt)
        self._cache[key] = text
        self._persist_cache()
        return text

    def _call_with_retries(self, prompt: str) -> str:
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            self._respect_rate_limit()
            try:
                return self._transport(prompt)
            except Exception as exc:  # transport failures are retried uniformly
                last_error = exc
                if attempt < self.config.max_retries:
                    delay = 0.5 * (2**attempt)
                    logger.warning("request failed (%s), retry %d in %.1fs", exc, attempt + 1, delay)
                    time.sleep(delay)
        raise LlmClientError(
            f"endpoint failed after {self.config.max_retries} retries: {last_error}"
        ) from last_error

    def _respect_rate_limit(self) -> None:
        min_interval = 1.0 / self.config.rate_limit
        elapsed = time.monotonic() - self._last_request_time
        if elapsed < min_interval:
            time.sleep(min_interval - elapsed)
        self._last_request_time = time.monotonic()

    def _persist_cache(self) -> None:
        if self.config.cache_path:
            Path(self.config.cache_path).write_text(
                json.dumps(self._cache, sort_keys=True, indent=1), encoding="utf-8"
            )


def offline_caption_mix(caption_1: CaptionText, caption_2: CaptionText) -> str:
    """Deterministic fallback: join the captions, truncated to the word limit."""
    words = f"{caption_1.text} while {caption_2.text}".split()
    return " ".join(words[:MIXUP_WORD_LIMIT])


def request_caption_mixup(
    caption_1: CaptionText, caption_2: CaptionText, client: CaptionMixClient
) -> CaptionText:
    return client.mix(caption_1, caption_2)
