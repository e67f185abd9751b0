"""Batch execution behind the CLI commands.

Introspections are cached per (scenario, template version, backend,
retrieval setup), so sweeps over target success recalibrate q_hat without
asking the model again.
"""
from __future__ import annotations

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from introplan.conformal import CalibrationResult
from introplan.domain import PredictionMode, PredictionOutcome, Scenario
from introplan.knowledge import KnowledgeBase
from introplan.metrics import METRIC_NAMES, MetricsReport, ScenarioFlags, aggregate, scenario_flags
from introplan.planner import Backends, Introspection, PlanningError, calibration_score, decide, introspect
from introplan.prompting import template_version

logger = logging.getLogger(__name__)


class TooManyFailures(RuntimeError):
    def __init__(self, failures: Sequence[PlanningError], budget: int):
        ids = ", ".join(f.scenario_id for f in failures[:5])
        super().__init__(f"{len(failures)} scenarios failed (budget {budget}); first: {ids}. {failures[0]}")
        self.failures = list(failures)


def kb_fingerprint(kb: KnowledgeBase) -> str:
    h = hashlib.sha256()
    h.update(str(kb.embedding_dim).encode())
    for e in kb.entries:
        h.update(b"\0" + e.scenario.id.encode() + b"\0" + e.rationale.encode())
    return h.hexdigest()[:16]


class IntrospectionCache:
    """In-memory cache, optionally mirrored to an append-only JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._store: dict[str, Introspection] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        self._store[row["key"]] = Introspection.from_dict(row["introspection"])

    @staticmethod
    def key(s: Scenario, backends: Backends, kb: KnowledgeBase, mode: PredictionMode, m: int, safety_mode: bool) -> str:
        parts = [
            s.id,
            s.scene,
            s.instruction,
            template_version(),
            getattr(backends.llm, "name", type(backends.llm).__name__),
            getattr(backends.embedder, "name", type(backends.embedder).__name__),
            kb_fingerprint(kb),
            PredictionMode(mode).value,
            str(m),
            str(bool(safety_mode)),
        ]
        return hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()

    def get(self, key: str) -> Introspection | None:
        return self._store.get(key)

    def put(self, key: str, intro: Introspection) -> None:
        with self._lock:
            self._store[key] = intro
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "introspection": intro.to_dict()}, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self._store)


@dataclass(frozen=True)
class BatchResult:
    intros: dict[str, Introspection]
    failures: list[PlanningError]


def introspect_all(
    scenarios: Sequence[Scenario],
    kb: KnowledgeBase,
    backends: Backends,
    *,
    mode: PredictionMode,
    m: int,
    safety_mode: bool,
    cache: IntrospectionCache | None = None,
    max_workers: int = 1,
    max_failures: int = 0,
) -> BatchResult:
    cache = cache if cache is not None else IntrospectionCache()

    def one(s: Scenario) -> Introspection | PlanningError:
        key = cache.key(s, backends, kb, mode, m, safety_mode)
        hit = cache.get(key)
        if hit is not None:
            return hit
        try:
            intro = introspect(s, kb, backends, mode=mode, m=m, safety_mode=safety_mode)
        except PlanningError as exc:
            logger.warning("%s", exc)
            return exc
        cache.put(key, intro)
        return intro

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(one, scenarios))
    else:
        results = [one(s) for s in scenarios]
    intros = {}
    failures = []
    for s, r in zip(scenarios, results):
        if isinstance(r, PlanningError):
            failures.append(r)
        else:
            intros[s.id] = r
    if len(failures) > max_failures:
        raise TooManyFailures(failures, max_failures)
    return BatchResult(intros, failures)


def calibration_scores(scenarios: Sequence[Scenario], batch: BatchResult, kind: str) -> list[float]:
    return [calibration_score(batch.intros[s.id], s, kind) for s in scenarios if s.id in batch.intros]


def calibrate_from_batch(
    scenarios: Sequence[Scenario],
    batch: BatchResult,
    *,
    mode: PredictionMode,
    target: float,
    delta: float,
    delta_adjust: bool,
    backend_name: str,
) -> CalibrationResult:
    kind = "multi" if mode is PredictionMode.CONFORMAL_MULTI else "single"
    scores = calibration_scores(scenarios, batch, kind)
    if not scores:
        raise ValueError("calibration set is empty")
    return CalibrationResult.from_scores(
        scores,
        target,
        template_version=template_version(),
        delta=delta,
        delta_adjust=delta_adjust,
        kind=kind,
        backend=backend_name,
    )


@dataclass(frozen=True)
class Evaluation:
    outcomes: list[PredictionOutcome]
    flags: list[ScenarioFlags]
    report: MetricsReport


def evaluate_batch(
    scenarios: Sequence[Scenario], batch: BatchResult, mode: PredictionMode, q_hat: float | None
) -> Evaluation:
    outcomes, flags = [], []
    for s in scenarios:
        intro = batch.intros.get(s.id)
        if intro is None:
            continue
        outcome = decide(intro, mode, q_hat)
        outcomes.append(outcome)
        flags.append(scenario_flags(outcome, s))
    return Evaluation(outcomes, flags, aggregate(flags))


def run_log_records(scenarios: Sequence[Scenario], batch: BatchResult, evaluation: Evaluation) -> list[dict]:
    by_id = {o.scenario_id: (o, f) for o, f in zip(evaluation.outcomes, evaluation.flags)}
    failed = {f.scenario_id: str(f) for f in batch.failures}
    rows = []
    for s in scenarios:
        if s.id in failed:
            rows.append({"scenario_id": s.id, "error": failed[s.id]})
            continue
        outcome, flags = by_id[s.id]
        rows.append(
            {
                "scenario_id": s.id,
                "introspection": batch.intros[s.id].to_dict(),
                "outcome": outcome.to_dict(),
                "errors": sorted(flags.errors),
            }
        )
    return rows


def write_jsonl(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


SWEEP_COLUMNS = ("kb_size", "target_success", "epsilon_hat", "q_hat", *METRIC_NAMES, "avg_set_size")


@dataclass(frozen=True)
class SweepRow:
    kb_size: int
    target_success: float
    epsilon_hat: float
    q_hat: float
    report: MetricsReport

    @property
    def avg_set_size(self) -> float:
        return self.report.avg_set_size or 0.0

    def cells(self) -> list[str]:
        rates = [str(r) for r in self.report.rates().values()]
        return [
            str(self.kb_size),
            f"{self.target_success:g}",
            f"{self.epsilon_hat:g}",
            repr(self.q_hat),
            *rates,
            f"{self.avg_set_size:.4f}",
        ]


def sweep(
    cal_set: Sequence[Scenario],
    test_set: Sequence[Scenario],
    kb: KnowledgeBase,
    backends: Backends,
    *,
    mode: PredictionMode,
    targets: Sequence[float],
    m: int,
    safety_mode: bool,
    delta: float,
    delta_adjust: bool,
    kb_sizes: Sequence[int] = (),
    cache: IntrospectionCache | None = None,
    max_workers: int = 1,
    max_failures: int = 0,
) -> list[SweepRow]:
    if len(targets) < 2:
        raise ValueError("a sweep needs at least two target points")
    if mode is PredictionMode.DIRECT:
        raise ValueError("direct mode has no target success to sweep")
    cache = cache if cache is not None else IntrospectionCache()
    rows = []
    for size in kb_sizes or (len(kb),):
        sub = kb if size >= len(kb) else kb.subset(size)
        common = dict(mode=mode, m=m, safety_mode=safety_mode, cache=cache, max_workers=max_workers, max_failures=max_failures)
        cal_batch = introspect_all(cal_set, sub, backends, **common)
        test_batch = introspect_all(test_set, sub, backends, **common)
        for target in sorted(targets):
            result = calibrate_from_batch(
                cal_set,
                cal_batch,
                mode=mode,
                target=target,
                delta=delta,
                delta_adjust=delta_adjust,
                backend_name=getattr(backends.llm, "name", ""),
            )
            ev = evaluate_batch(test_set, test_batch, mode, result.q_hat)
            rows.append(SweepRow(len(sub), target, result.epsilon_hat, result.q_hat, ev.report))
    return rows


def write_sweep(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(row.cells()) + "\n")
