"""Monte Carlo check of marginal and per-draw conformal coverage."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from introplan.backends.synthetic import (
    SyntheticModelParams,
    sample_true_label_confidences,
    sample_true_set_confidences,
)
from introplan.conformal import calibrate, coverage_lower_bound, covered, quantile_rank

MIN_TRIALS = 100


@dataclass(frozen=True)
class CoverageReport:
    n: int
    epsilon_hat: float
    trials: int
    tests_per_trial: int
    delta: float
    seed: int
    multilabel: bool
    expected_coverage: float
    mean_coverage: float
    delta_quantile: float
    analytic_bound: float
    tolerance: float
    coverages: tuple[float, ...]

    @property
    def mean_ok(self) -> bool:
        return abs(self.mean_coverage - self.expected_coverage) <= self.tolerance

    @property
    def quantile_ok(self) -> bool:
        return self.delta_quantile >= self.analytic_bound - self.tolerance

    @property
    def passed(self) -> bool:
        return self.mean_ok and self.quantile_ok

    def summary(self) -> dict:
        out = asdict(self)
        del out["coverages"]
        out.update(mean_ok=self.mean_ok, quantile_ok=self.quantile_ok, passed=self.passed)
        return out


def expected_coverage(n: int, epsilon_hat: float) -> float:
    """Marginal coverage k/(n+1) of split conformal with continuous scores."""
    k = quantile_rank(n, epsilon_hat)
    return 1.0 if k > n else k / (n + 1)


def verify_coverage(
    n: int,
    epsilon_hat: float,
    trials: int = 500,
    tests_per_trial: int = 2000,
    delta: float = 0.01,
    seed: int = 0,
    *,
    multilabel: bool = False,
    params: SyntheticModelParams | None = None,
    tolerance: float = 0.01,
) -> CoverageReport:
    if trials < MIN_TRIALS:
        raise ValueError(f"trials must be at least {MIN_TRIALS}")
    if n < 1 or tests_per_trial < 1:
        raise ValueError("n and tests_per_trial must be positive")
    params = params or SyntheticModelParams(seed=seed)
    if multilabel:
        def draw(rng, size):
            return sample_true_set_confidences(rng, size, params, n_options=3)
    else:
        def draw(rng, size):
            return sample_true_label_confidences(rng, size, params)

    coverages = np.empty(trials)
    for t, child in enumerate(np.random.SeedSequence(seed).spawn(trials)):
        rng = np.random.Generator(np.random.Philox(child))
        q_hat = calibrate(1.0 - draw(rng, n), epsilon_hat)
        coverages[t] = covered(draw(rng, tests_per_trial), q_hat).mean()
    return CoverageReport(
        n=n,
        epsilon_hat=epsilon_hat,
        trials=trials,
        tests_per_trial=tests_per_trial,
        delta=delta,
        seed=seed,
        multilabel=multilabel,
        expected_coverage=expected_coverage(n, epsilon_hat),
        mean_coverage=float(coverages.mean()),
        delta_quantile=float(np.quantile(coverages, delta)),
        analytic_bound=coverage_lower_bound(n, epsilon_hat, delta),
        tolerance=tolerance,
        coverages=tuple(float(c) for c in coverages),
    )
