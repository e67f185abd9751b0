"""Backend-neutral request/response types and label-confidence extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np


class BackendError(RuntimeError):
    """Base class for provider failures."""

    retryable: bool = False


class CredentialError(BackendError):
    pass


class TransportError(BackendError):
    retryable = True


class StatusError(BackendError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"provider returned HTTP {status}: {body[:200]}")
        self.status = status
        self.retryable = status == 408 or status == 409 or status >= 500


class RateLimitError(StatusError):
    def __init__(self, body: str = ""):
        super().__init__(429, body)
        self.retryable = True


class MalformedResponseError(BackendError):
    pass


class DegenerateDistributionError(BackendError):
    """None of the requested labels appear among the returned log-probabilities."""


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_tokens: int = 256
    temperature: float = 0.0
    logprob_top_k: int = 0
    stop: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.logprob_top_k < 0:
            raise ValueError("logprob_top_k must be non-negative")

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "logprob_top_k": self.logprob_top_k,
            "stop": list(self.stop),
        }


@dataclass(frozen=True)
class Completion:
    text: str
    # one {token: logprob} mapping per generated position
    top_logprobs: tuple[Mapping[str, float], ...] = ()

    def to_dict(self) -> dict:
        return {"text": self.text, "top_logprobs": [dict(p) for p in self.top_logprobs]}

    @classmethod
    def from_dict(cls, data: dict) -> Completion:
        return cls(text=data["text"], top_logprobs=tuple(data.get("top_logprobs", [])))


@dataclass(frozen=True)
class LabelConfidences:
    entries: Mapping[str, float]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", dict(self.entries))
        for label, p in self.entries.items():
            if not (0.0 <= p <= 1.0) or math.isnan(p):
                raise ValueError(f"confidence for {label} out of [0, 1]: {p}")

    def __getitem__(self, label: str) -> float:
        return self.entries[label]

    def __contains__(self, label: object) -> bool:
        return label in self.entries

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.entries)

    def to_dict(self) -> dict[str, float]:
        return dict(self.entries)

    @classmethod
    def normalized(cls, weights: Mapping[str, float]) -> LabelConfidences:
        total = math.fsum(weights.values())
        if total <= 0 or not math.isfinite(total):
            raise DegenerateDistributionError("confidence weights do not sum to a positive value")
        return cls({k: v / total for k, v in weights.items()})


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    dim: int = field(init=False)

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.values)
        if not values:
            raise ValueError("embedding must have at least one component")
        if not all(math.isfinite(v) for v in values):
            raise ValueError("embedding has non-finite components")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dim", len(values))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@runtime_checkable
class TextBackend(Protocol):
    name: str

    def complete(self, req: CompletionRequest) -> Completion: ...


@runtime_checkable
class EmbeddingBackend(Protocol):
    name: str
    dim: int

    def embed(self, text: str) -> EmbeddingVector: ...


def confidences_from_logprobs(top_logprobs: Mapping[str, float], labels: Sequence[str]) -> LabelConfidences:
    """Restrict next-token log-probabilities to ``labels`` and renormalize.

    Tokens are matched after stripping whitespace, so " A" and "A" both count
    for label A; when several variants appear the largest log-probability wins.
    Labels that do not appear get zero mass.
    """
    if not labels:
        raise ValueError("labels must be non-empty")
    if len(set(labels)) != len(labels):
        raise ValueError("labels must be unique")
    best: dict[str, float] = {}
    for token, lp in top_logprobs.items():
        key = token.strip()
        if key in labels and (key not in best or lp > best[key]):
            best[key] = lp
    if not best:
        raise DegenerateDistributionError(
            f"none of {list(labels)} among returned tokens {sorted(top_logprobs)}"
        )
    shift = max(best.values())
    weights = {label: (math.exp(best[label] - shift) if label in best else 0.0) for label in labels}
    return LabelConfidences.normalized(weights)


def score_labels(
    backend: TextBackend, prompt: str, labels: Sequence[str], top_k: int = 20
) -> LabelConfidences:
    req = CompletionRequest(prompt=prompt, max_tokens=1, temperature=0.0, logprob_top_k=top_k)
    completion = backend.complete(req)
    if not completion.top_logprobs:
        raise MalformedResponseError("completion carries no log-probabilities")
    return confidences_from_logprobs(completion.top_logprobs[0], labels)


def cosine_similarity(u: Iterable[float], v: Iterable[float]) -> float:
    a = np.asarray(list(u), dtype=np.float64)
    b = np.asarray(list(v), dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
