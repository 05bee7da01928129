"""Deterministic stand-in for model inference.

The gateway needs something to serve so constraint enforcement, streaming,
callbacks, and traffic accounting can be exercised end to end. Output is a
pure function of (seed, model, concatenated message contents): same inputs,
same chunks, on every run and platform.
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Iterator, Optional, Sequence


class UnknownModel(Exception):
    code = "unknown_model"

    def __init__(self, model: str):
        super().__init__(f"model {model!r} is not served here")
        self.model = model


_WORDS = (
    "alder", "basalt", "cobalt", "dune", "ember", "fjord", "garnet", "heron",
    "indigo", "juniper", "krill", "lumen", "maple", "nadir", "ochre", "pylon",
    "quartz", "rook", "sable", "tundra", "umber", "vortex", "willow", "xenon",
    "yarrow", "zephyr", "brook", "cinder", "delta", "eddy", "flint", "grove",
)


def join_contents(messages: Sequence[dict]) -> str:
    return "\n".join(m.get("content", "") for m in messages)


def count_prompt_tokens(messages: Sequence[dict]) -> int:
    """Prompt size as a whitespace token count over all message contents."""
    return len(join_contents(messages).split())


class MockEngine:
    """Deterministic token-stream generator for a fixed set of served models.

    natural_min/natural_max bound the untruncated generation length; the
    per-request length is hash-derived within those bounds. `calls` counts
    every generation start, so harnesses can assert that rejected requests
    never reached the engine.
    """

    def __init__(
        self,
        served_models: Iterable[str],
        seed: int = 0,
        natural_min: int = 4,
        natural_max: int = 48,
    ):
        if natural_min < 1 or natural_max < natural_min:
            raise ValueError("need 1 <= natural_min <= natural_max")
        self.served_models = frozenset(served_models)
        self.seed = seed
        self.natural_min = natural_min
        self.natural_max = natural_max
        self.calls = 0

    def _digest(self, model: str, messages: Sequence[dict]) -> bytes:
        material = f"{self.seed}\x00{model}\x00".encode() + join_contents(messages).encode()
        return hashlib.sha256(material).digest()

    def check_model(self, model: str) -> None:
        if model not in self.served_models:
            raise UnknownModel(model)

    def natural_length(self, model: str, messages: Sequence[dict]) -> int:
        """Untruncated generation length for this input."""
        self.check_model(model)
        span = self.natural_max - self.natural_min + 1
        return self.natural_min + int.from_bytes(self._digest(model, messages)[:4], "big") % span

    def generate(self, model: str, messages: Sequence[dict], effective_max: Optional[int] = None) -> Iterator[str]:
        """Yield generated chunks, one word per chunk, capped at effective_max.

        effective_max=None means uncapped (the natural length is emitted).
        """
        self.check_model(model)
        if effective_max is not None and effective_max < 1:
            raise ValueError("effective_max must be >= 1")
        self.calls += 1
        digest = self._digest(model, messages)
        n = self.natural_length(model, messages)
        if effective_max is not None:
            n = min(n, effective_max)
        for i in range(n):
            h = hashlib.sha256(digest + i.to_bytes(4, "big")).digest()
            word = _WORDS[int.from_bytes(h[:4], "big") % len(_WORDS)]
            yield word + " "
