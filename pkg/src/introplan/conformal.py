"""Split conformal calibration and prediction, single-label and powerset."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from introplan.backends.base import LabelConfidences

# slack for rank arithmetic so 401 * 0.85 style products snap to the intended integer
_RANK_SLACK = 1e-9
EPSILON_GRID = 10_000


class InfeasibleTargetError(ValueError):
    """No calibration level reaches the requested coverage bound."""


class TemplateVersionMismatch(RuntimeError):
    def __init__(self, artifact_version: str, live_version: str):
        super().__init__(
            f"calibration artifact was built with templates {artifact_version!r} "
            f"but the live templates are {live_version!r}; recalibrate"
        )
        self.artifact_version = artifact_version
        self.live_version = live_version


def quantile_rank(n: int, epsilon: float) -> int:
    """1-indexed rank ceil((n+1)(1-eps)) of the calibration quantile."""
    return math.ceil((n + 1) * (1.0 - epsilon) - _RANK_SLACK)


def beta_l(n: int, epsilon: float) -> int:
    return math.floor((n + 1) * epsilon + _RANK_SLACK)


def _check_epsilon(epsilon: float) -> None:
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")


def nonconformity(confidences: LabelConfidences | Mapping[str, float], true_label: str) -> float:
    entries = confidences.entries if isinstance(confidences, LabelConfidences) else confidences
    if true_label not in entries:
        raise KeyError(f"label {true_label!r} not among {sorted(entries)}")
    return 1.0 - entries[true_label]


def calibrate(scores: Sequence[float], epsilon_hat: float) -> float:
    """q_hat: the ceil((N+1)(1-eps))-th smallest score, or 1.0 past the end."""
    if len(scores) == 0:
        raise ValueError("cannot calibrate on an empty score set")
    _check_epsilon(epsilon_hat)
    arr = np.asarray(scores, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
        raise ValueError("nonconformity scores must lie in [0, 1]")
    k = quantile_rank(len(arr), epsilon_hat)
    if k > len(arr):
        return 1.0
    return float(np.sort(arr, kind="stable")[k - 1])


multilabel_calibrate = calibrate


def meets_threshold(p: float, q_hat: float) -> bool:
    """p >= 1 - q_hat, evaluated as p + q_hat >= 1.

    The sum form keeps decimal inputs such as p=0.3, q_hat=0.7 on the
    boundary, where ``1 - 0.7`` would round up past 0.3.
    """
    return p + q_hat >= 1.0


def predict_set(confidences: LabelConfidences | Mapping[str, float], q_hat: float) -> frozenset[str]:
    """All labels whose confidence meets or exceeds 1 - q_hat (may be empty)."""
    if not 0.0 <= q_hat <= 1.0:
        raise ValueError("q_hat must lie in [0, 1]")
    entries = confidences.entries if isinstance(confidences, LabelConfidences) else confidences
    return frozenset(label for label, p in entries.items() if meets_threshold(p, q_hat))


def covered(true_confidences: np.ndarray, q_hat: float) -> np.ndarray:
    """Vectorised membership test of the true label in :func:`predict_set`."""
    return np.asarray(true_confidences) + q_hat >= 1.0


def multilabel_predict(
    set_confidences: Mapping[Iterable[str], float], q_hat: float, labels: Iterable[str] | None = None
) -> tuple[frozenset[str], ...]:
    """Family of label subsets whose set-level confidence is at least 1 - q_hat."""
    if not 0.0 <= q_hat <= 1.0:
        raise ValueError("q_hat must lie in [0, 1]")
    conf = {frozenset(k): float(v) for k, v in set_confidences.items()}
    universe = frozenset(labels) if labels is not None else frozenset().union(*conf) if conf else frozenset()
    expected = 2 ** len(universe) - 1
    if not universe or len(conf) != expected or any(not g or not g <= universe for g in conf):
        raise ValueError(
            f"set confidences must cover exactly the {expected} non-empty subsets of {sorted(universe)}"
        )
    family = [g for g, h in conf.items() if meets_threshold(h, q_hat)]
    return tuple(sorted(family, key=lambda g: (len(g), sorted(g))))


def coverage_lower_bound(n: int, epsilon_hat: float, delta: float) -> float:
    """delta-quantile of Beta(n+1-l, l), l = floor((n+1) eps); 1.0 when l = 0."""
    if n < 1:
        raise ValueError("n must be at least 1")
    _check_epsilon(epsilon_hat)
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    l = beta_l(n, epsilon_hat)
    if l == 0:
        return 1.0
    return float(stats.beta.ppf(delta, n + 1 - l, l))


def choose_epsilon_hat(target_success: float, n: int, delta: float, grid: int = EPSILON_GRID) -> float:
    """Largest eps on the 1/grid lattice whose coverage bound reaches the target.

    Only non-vacuous levels (l >= 1, so q_hat is an actual calibration score)
    are considered; smaller levels always return every candidate.
    """
    if not 0.0 < target_success < 1.0:
        raise ValueError("target_success must lie in (0, 1)")
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    # l on the lattice is ((n+1) * j) // grid for j = 1 .. grid-1
    l_max = ((n + 1) * (grid - 1)) // grid
    if l_max < 1:
        raise InfeasibleTargetError(f"n={n} is too small for any non-vacuous calibration level")
    ls = np.arange(1, l_max + 1)
    bounds = stats.beta.ppf(delta, n + 1 - ls, ls)
    ok = np.nonzero(bounds >= target_success)[0]
    if len(ok) == 0:
        raise InfeasibleTargetError(
            f"coverage {target_success} is unreachable with n={n} at confidence {1 - delta}"
        )
    # bounds decrease in l, so the feasible l form a prefix
    l_star = int(ls[ok[-1]])
    j = min(((l_star + 1) * grid - 1) // (n + 1), grid - 1)
    return j / grid


@dataclass(frozen=True)
class CalibrationResult:
    q_hat: float
    epsilon_hat: float
    n: int
    delta: float | None
    sorted_scores: tuple[float, ...]
    template_version: str
    target_success: float | None = None
    kind: str = "single"  # "single" (label-level) or "multi" (set-level)
    delta_adjusted: bool = False
    backend: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_scores(
        cls,
        scores: Sequence[float],
        target_success: float,
        *,
        template_version: str,
        delta: float | None = None,
        delta_adjust: bool = False,
        kind: str = "single",
        backend: str = "",
    ) -> CalibrationResult:
        if len(scores) == 0:
            raise ValueError("cannot calibrate on an empty score set")
        if delta_adjust:
            if delta is None:
                raise ValueError("delta adjustment needs delta")
            eps = choose_epsilon_hat(target_success, len(scores), delta)
        else:
            eps = round(1.0 - target_success, 12)
        q_hat = calibrate(scores, eps)
        return cls(
            q_hat=q_hat,
            epsilon_hat=eps,
            n=len(scores),
            delta=delta,
            sorted_scores=tuple(sorted(float(s) for s in scores)),
            template_version=template_version,
            target_success=target_success,
            kind=kind,
            delta_adjusted=delta_adjust,
            backend=backend,
        )

    @property
    def coverage_bound(self) -> float | None:
        if self.delta is None:
            return None
        return coverage_lower_bound(self.n, self.epsilon_hat, self.delta)

    def check_template(self, live_version: str) -> None:
        if self.template_version != live_version:
            raise TemplateVersionMismatch(self.template_version, live_version)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sorted_scores"] = list(self.sorted_scores)
        out["coverage_bound"] = self.coverage_bound
        return out

    @classmethod
    def from_dict(cls, data: dict) -> CalibrationResult:
        data = dict(data)
        data.pop("coverage_bound", None)
        data["sorted_scores"] = tuple(data["sorted_scores"])
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> CalibrationResult:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
