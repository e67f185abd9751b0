"""Run configuration loaded from YAML, plus backend construction."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import yaml

from introplan.backends.base import EmbeddingBackend, TextBackend
from introplan.backends.cassette import CassetteBackend
from introplan.backends.openai_compat import (
    EndpointConfig,
    OpenAICompatibleClient,
    OpenAIEmbedder,
    SentenceTransformerEmbedder,
)
from introplan.backends.synthetic import HashEmbedder, SyntheticLLM, SyntheticModelParams
from introplan.domain import PredictionMode, Scenario

BACKEND_KINDS = ("synthetic", "cassette", "openai")
EMBEDDER_KINDS = ("hash", "openai", "sentence-transformers")
OFFLINE_KINDS = ("synthetic", "cassette")
DEFAULT_SWEEP = tuple(round(0.6 + 0.05 * i, 2) for i in range(8))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendSettings:
    kind: str = "synthetic"
    base_url: str = ""
    model: str = ""
    api_key: str | None = None
    api_style: str = "chat"
    embedder: str = "hash"
    embedding_model: str = ""
    embed_dim: int = 64
    cassette: str = ""
    record: bool = False
    max_retries: int = 3
    max_in_flight: int = 4
    timeout: float = 60.0
    valid_concentration: float = 4.0
    invalid_concentration: float = 0.5
    escape_mass: float = 0.0
    noise_scale: float = 0.0
    direct_ratio: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if self.embedder not in EMBEDDER_KINDS:
            raise ConfigError(f"embedder must be one of {EMBEDDER_KINDS}, got {self.embedder!r}")
        if self.kind == "cassette" and not self.cassette:
            raise ConfigError("cassette backend needs a cassette path")
        if self.kind == "openai" or self.record or self.embedder == "openai":
            if not self.base_url or not self.model:
                raise ConfigError("an OpenAI-compatible endpoint needs base_url and model")


@dataclass(frozen=True)
class RunConfig:
    backend: BackendSettings = field(default_factory=BackendSettings)
    train: Path | None = None
    calibration_set: Path | None = None
    test: Path | None = None
    kb: Path | None = None
    calibration: Path | None = None
    mode: PredictionMode = PredictionMode.CONFORMAL_SINGLE
    m: int = 3
    safety_mode: bool = False
    target_success: tuple[float, ...] = (0.85,)
    delta: float = 0.01
    delta_adjust: bool = False
    seed: int = 0
    output_dir: Path = Path("out")
    max_workers: int = 1
    max_failures: int = 0
    kb_sizes: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", PredictionMode(self.mode))
        if self.m < 1:
            raise ConfigError("m must be at least 1")
        if not all(0.0 < t < 1.0 for t in self.target_success):
            raise ConfigError("target_success values must lie in (0, 1)")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.max_workers < 1 or self.max_failures < 0:
            raise ConfigError("max_workers must be >= 1 and max_failures >= 0")
        if any(k < 1 for k in self.kb_sizes):
            raise ConfigError("kb_sizes must be positive")
        for name in ("train", "calibration_set", "test"):
            path = getattr(self, name)
            if path is not None and not path.exists():
                raise ConfigError(f"{name} file {str(path)!r} does not exist")

    @property
    def synthetic_params(self) -> SyntheticModelParams:
        b = self.backend
        return SyntheticModelParams(
            seed=self.seed,
            valid_concentration=b.valid_concentration,
            invalid_concentration=b.invalid_concentration,
            escape_mass=b.escape_mass,
            noise_scale=b.noise_scale,
        )

    def kb_path(self) -> Path:
        return self.kb if self.kb is not None else self.output_dir / "kb.jsonl"

    def calibration_path(self) -> Path:
        return self.calibration if self.calibration is not None else self.output_dir / "calibration.json"

    def with_overrides(self, **changes: Any) -> RunConfig:
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes) if changes else self


_PATH_FIELDS = ("train", "calibration_set", "test", "kb", "calibration", "output_dir")


def config_from_dict(data: dict[str, Any], base_dir: Path | None = None) -> RunConfig:
    data = dict(data or {})
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    backend = data.pop("backend", None) or {}
    try:
        data["backend"] = BackendSettings(**backend)
    except TypeError as exc:
        raise ConfigError(f"bad backend settings: {exc}") from None
    for key in _PATH_FIELDS:
        if data.get(key) is not None:
            p = Path(data[key])
            data[key] = p if p.is_absolute() or base_dir is None else base_dir / p
    for key in ("target_success", "kb_sizes"):
        if key in data:
            value = data[key]
            data[key] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
    try:
        return RunConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return config_from_dict({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return config_from_dict(data, base_dir=path.parent)


def _endpoint(b: BackendSettings) -> EndpointConfig:
    return EndpointConfig(
        base_url=b.base_url,
        model=b.model,
        api_key=b.api_key,
        api_style=b.api_style,
        embedding_model=b.embedding_model or None,
        timeout=b.timeout,
        max_retries=b.max_retries,
        max_in_flight=b.max_in_flight,
    )


def make_backends(cfg: RunConfig, scenarios: Iterable[Scenario] = (), *, offline: bool = False) -> tuple[TextBackend, EmbeddingBackend]:
    """Text and embedding backends described by ``cfg``.

    The synthetic model answers from the ground truth of ``scenarios``.
    """
    b = cfg.backend
    if offline and (b.kind not in OFFLINE_KINDS or b.record or b.embedder == "openai"):
        raise ConfigError("--offline allows only synthetic or replay-only cassette backends with a local embedder")
    client = None
    if b.kind == "openai" or b.record or b.embedder == "openai":
        client = OpenAICompatibleClient(_endpoint(b))
    if b.kind == "synthetic":
        llm: TextBackend = SyntheticLLM(scenarios, cfg.synthetic_params, direct_ratio=b.direct_ratio)
    elif b.kind == "cassette":
        llm = CassetteBackend(b.cassette, inner=client if b.record else None, record=b.record)
    else:
        llm = client
    if b.embedder == "hash":
        embedder: EmbeddingBackend = HashEmbedder(dim=b.embed_dim)
    elif b.embedder == "openai":
        embedder = OpenAIEmbedder(client, b.embedding_model or b.model)
    else:
        embedder = SentenceTransformerEmbedder(b.embedding_model or "all-MiniLM-L6-v2")
    return llm, embedder
