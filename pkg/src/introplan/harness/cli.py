"""``introplan`` command line."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence, TextIO

from introplan.backends.base import BackendError
from introplan.backends.synthetic import synth_dataset
from introplan.conformal import CalibrationResult, InfeasibleTargetError, TemplateVersionMismatch
from introplan.domain import (
    DatasetError,
    PlanOption,
    PredictionMode,
    Scenario,
    ScenarioKind,
    assign_labels,
    dump_scenarios,
    load_scenarios,
)
from introplan.harness.config import DEFAULT_SWEEP, ConfigError, RunConfig, load_config, make_backends
from introplan.harness.coverage import verify_coverage
from introplan.harness.runner import (
    IntrospectionCache,
    TooManyFailures,
    calibrate_from_batch,
    evaluate_batch,
    introspect_all,
    run_log_records,
    sweep,
    write_jsonl,
    write_sweep,
)
from introplan.knowledge import EmptyBuildError, KnowledgeBase, KnowledgeBaseFileError, build_knowledge_base, load_kb, save_kb
from introplan.metrics import write_classifications, write_report
from introplan.planner import Backends, PlannerConfig, PlanningError, plan_with_trace, resolve_help
from introplan.prompting import template_version

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_VALIDATION = 2
EXIT_NEEDS_CLARIFICATION = 3
EXIT_BACKEND = 4

logger = logging.getLogger("introplan")


class ValidationFailure(Exception):
    pass


def _load(path: Path | None, what: str) -> list[Scenario]:
    if path is None:
        raise ValidationFailure(f"no {what} dataset configured")
    scenarios, _ = load_scenarios(path, strict=True)
    return scenarios


def _load_kb(cfg: RunConfig) -> KnowledgeBase:
    path = cfg.kb_path()
    if not path.exists():
        raise ValidationFailure(f"knowledge base {str(path)!r} does not exist; run build-kb first")
    return load_kb(path)


def _backends(cfg: RunConfig, args: argparse.Namespace, *datasets: Sequence[Scenario]) -> Backends:
    scenarios = [s for ds in datasets for s in ds]
    llm, embedder = make_backends(cfg, scenarios, offline=args.offline)
    return Backends(llm, embedder)


def _cache(cfg: RunConfig, args: argparse.Namespace) -> IntrospectionCache:
    return IntrospectionCache(None if args.no_cache else cfg.output_dir / "introspection_cache.jsonl")


def _out(cfg: RunConfig) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


# ---------------------------------------------------------------- commands


def cmd_build_kb(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.train is None:
        raise ValidationFailure("no train dataset configured")
    train, skipped = load_scenarios(cfg.train, strict=False)
    backends = _backends(cfg, args, train)
    kb, report = build_knowledge_base(
        train, backends.llm, backends.embedder, safety_mode=cfg.safety_mode, max_workers=cfg.max_workers
    )
    kb_path = cfg.kb_path()
    kb_path.parent.mkdir(parents=True, exist_ok=True)
    save_kb(kb, kb_path)
    warnings = [{"scenario_id": sid, "warning": w} for sid, w in report.warnings]
    if not train:
        warnings.append({"scenario_id": None, "warning": "training file holds no scenarios; the knowledge base is empty"})
    out = {
        "kb": str(kb_path),
        "entries": len(kb),
        "skipped_lines": [{"line": e.line, "error": str(e)} for e in skipped],
        "records": [r.to_dict() for r in report.records],
        "warnings": warnings,
    }
    (_out(cfg) / "build_report.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"knowledge base: {len(kb)} entries -> {kb_path}")
    print(f"skipped lines: {len(skipped)}, failed instances: {len(report.failures)}, warnings: {len(warnings)}")
    for w in warnings:
        print(f"warning: {w['scenario_id']}: {w['warning']}")
    return EXIT_OK


def cmd_calibrate(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.mode is PredictionMode.DIRECT:
        raise ValidationFailure("direct mode needs no calibration")
    cal = _load(cfg.calibration_set, "calibration")
    if not cal:
        raise ValidationFailure("calibration set is empty")
    kb = _load_kb(cfg)
    backends = _backends(cfg, args, cal)
    batch = introspect_all(
        cal,
        kb,
        backends,
        mode=cfg.mode,
        m=cfg.m,
        safety_mode=cfg.safety_mode,
        cache=_cache(cfg, args),
        max_workers=cfg.max_workers,
        max_failures=cfg.max_failures,
    )
    target = args.target if args.target is not None else cfg.target_success[0]
    result = calibrate_from_batch(
        cal,
        batch,
        mode=cfg.mode,
        target=target,
        delta=cfg.delta,
        delta_adjust=cfg.delta_adjust,
        backend_name=backends.llm.name,
    )
    path = cfg.calibration_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    result.save(path)
    print(f"calibrated on {result.n} instances: epsilon_hat={result.epsilon_hat:g} q_hat={result.q_hat!r}")
    print(f"coverage bound at delta={cfg.delta:g}: {result.coverage_bound:.6f} -> {path}")
    return EXIT_OK


def _calibration_for(cfg: RunConfig) -> CalibrationResult | None:
    if cfg.mode is PredictionMode.DIRECT:
        return None
    path = cfg.calibration_path()
    if not path.exists():
        raise ValidationFailure(f"calibration artifact {str(path)!r} does not exist; run calibrate first")
    result = CalibrationResult.load(path)
    result.check_template(template_version())
    return result


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    calibration = _calibration_for(cfg)
    PlannerConfig(mode=cfg.mode, m=cfg.m, safety_mode=cfg.safety_mode, calibration=calibration)
    test = _load(cfg.test, "test")
    kb = _load_kb(cfg)
    backends = _backends(cfg, args, test)
    batch = introspect_all(
        test,
        kb,
        backends,
        mode=cfg.mode,
        m=cfg.m,
        safety_mode=cfg.safety_mode,
        cache=_cache(cfg, args),
        max_workers=cfg.max_workers,
        max_failures=cfg.max_failures,
    )
    ev = evaluate_batch(test, batch, cfg.mode, calibration.q_hat if calibration else None)
    out = _out(cfg)
    write_jsonl(run_log_records(test, batch, ev), out / "run_log.jsonl")
    write_report(ev.report, out / "metrics.tsv")
    (out / "metrics.json").write_text(json.dumps(ev.report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_classifications(ev.flags, out / "classifications.jsonl")
    print(f"evaluated {ev.report.n} scenarios ({len(batch.failures)} failed) in {cfg.mode.value} mode")
    for name, num, den, rate in ev.report.rows():
        print(f"{name:>18} {num:>5}/{den:<5} {rate}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    if args.targets:
        targets = tuple(args.targets)
    else:
        targets = DEFAULT_SWEEP if args.default_grid else cfg.target_success
    if len(targets) < 2:
        raise ValidationFailure("a sweep needs at least two target points (or --default-grid)")
    cal = _load(cfg.calibration_set, "calibration")
    test = _load(cfg.test, "test")
    kb = _load_kb(cfg)
    backends = _backends(cfg, args, cal, test)
    rows = sweep(
        cal,
        test,
        kb,
        backends,
        mode=cfg.mode,
        targets=targets,
        m=cfg.m,
        safety_mode=cfg.safety_mode,
        delta=cfg.delta,
        delta_adjust=cfg.delta_adjust,
        kb_sizes=tuple(args.kb_sizes) if args.kb_sizes else cfg.kb_sizes,
        cache=_cache(cfg, args),
        max_workers=cfg.max_workers,
        max_failures=cfg.max_failures,
    )
    path = _out(cfg) / "sweep.tsv"
    write_sweep(rows, path)
    print(path.read_text(encoding="utf-8"), end="")
    return EXIT_OK


def cmd_verify_coverage(cfg: RunConfig, args: argparse.Namespace) -> int:
    report = verify_coverage(
        args.n,
        args.epsilon,
        trials=args.trials,
        tests_per_trial=args.tests,
        delta=args.delta if args.delta is not None else cfg.delta,
        seed=cfg.seed,
        multilabel=args.multilabel,
        params=cfg.synthetic_params,
    )
    summary = report.summary()
    for key in ("expected_coverage", "mean_coverage", "delta_quantile", "analytic_bound"):
        print(f"{key:>18} {summary[key]:.6f}")
    print(f"{'mean_ok':>18} {report.mean_ok}")
    print(f"{'quantile_ok':>18} {report.quantile_ok}")
    if args.out:
        Path(args.out).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def _scenario_from_args(args: argparse.Namespace) -> Scenario:
    if args.scenario_file:
        scenarios, _ = load_scenarios(args.scenario_file, strict=True)
        if args.id is None:
            if len(scenarios) != 1:
                raise ValidationFailure("the scenario file holds several scenarios; pick one with --id")
            return scenarios[0]
        for s in scenarios:
            if s.id == args.id:
                return s
        raise ValidationFailure(f"scenario {args.id!r} not found")
    if not args.scene or not args.task:
        raise ValidationFailure("give --scenario-file or both --scene and --task")
    options: tuple[PlanOption, ...] = ()
    if args.option:
        valid = set(args.valid or [])
        options = tuple(
            PlanOption(o.label, o.text, is_valid=o.label in valid, is_intent=o.label == args.intent)
            for o in assign_labels(args.option)
        )
    return Scenario(
        id=args.id or "cli",
        scene=args.scene,
        instruction=args.task,
        kind=ScenarioKind(args.kind),
        options=options,
    )


def _describe(labels, options) -> list[str]:
    text = {o.label: o.text for o in options}
    return [f"  {l}) {text.get(l, '?')}" for l in sorted(labels)]


def cmd_plan(cfg: RunConfig, args: argparse.Namespace, stdin: TextIO | None = None) -> int:
    s = _scenario_from_args(args)
    calibration = _calibration_for(cfg)
    pcfg = PlannerConfig(mode=cfg.mode, m=cfg.m, safety_mode=cfg.safety_mode, calibration=calibration)
    kb = _load_kb(cfg)
    backends = _backends(cfg, args, [s])
    outcome, intro = plan_with_trace(s, kb, pcfg, backends)
    print("Options:")
    print("\n".join(_describe([o.label for o in intro.options], intro.options)))
    print(f"Explain: {intro.rationale}")
    print("Prediction set: {" + ", ".join(sorted(outcome.prediction_set)) + "}")
    if args.log:
        write_jsonl([{"scenario_id": s.id, "introspection": intro.to_dict(), "outcome": outcome.to_dict()}], args.log)
    if outcome.certain:
        print("Action:")
        print("\n".join(_describe(outcome.prediction_set, intro.options)))
        return EXIT_OK
    # an empty set shows every candidate
    offered = outcome.prediction_set or frozenset(o.label for o in intro.options)
    print("Clarification: which of these did you mean?")
    print("\n".join(_describe(offered, intro.options)))
    if not args.interactive:
        return EXIT_NEEDS_CLARIFICATION
    stream = stdin or sys.stdin
    answer = stream.readline().strip().upper()
    chosen = resolve_help(outcome, answer) if outcome.prediction_set else (answer if answer in offered else None)
    if chosen is None:
        print("Cannot resolve: the answer is not among the offered options.")
        return EXIT_NEEDS_CLARIFICATION
    print("Action:")
    print("\n".join(_describe([chosen], intro.options)))
    return EXIT_OK


def cmd_synth_data(cfg: RunConfig, args: argparse.Namespace) -> int:
    scenarios = synth_dataset(args.n, seed=args.dataset_seed, prefix=args.prefix)
    dump_scenarios(scenarios, args.out)
    print(f"wrote {len(scenarios)} scenarios -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--backend", choices=("synthetic", "cassette", "openai"), help="override the backend kind")
    common.add_argument("--offline", action="store_true", help="refuse network backends")
    common.add_argument("--mode", choices=[m.value for m in PredictionMode], help="override the prediction mode")
    common.add_argument("--output-dir", help="override the output directory")
    common.add_argument("--no-cache", action="store_true", help="do not persist introspections")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="introplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("build-kb", parents=[common], help="build the exemplar knowledge base")

    p = sub.add_parser("calibrate", parents=[common], help="calibrate q_hat on the calibration set")
    p.add_argument("--target", type=float, help="target success rate (default: first configured)")

    sub.add_parser("evaluate", parents=[common], help="run the planner over the test set and report metrics")

    p = sub.add_parser("sweep", parents=[common], help="metrics across target success rates")
    p.add_argument("--targets", type=float, nargs="+")
    p.add_argument("--kb-sizes", type=int, nargs="+")
    p.add_argument("--default-grid", action="store_true", help="use 0.60..0.95 in steps of 0.05")

    p = sub.add_parser("verify-coverage", parents=[common], help="Monte Carlo coverage check")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--epsilon", type=float, default=0.15)
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--tests", type=int, default=2000)
    p.add_argument("--delta", type=float)
    p.add_argument("--multilabel", action="store_true")
    p.add_argument("--out", help="write the summary as JSON")

    p = sub.add_parser("plan", parents=[common], help="plan for one scenario")
    p.add_argument("--scenario-file")
    p.add_argument("--id")
    p.add_argument("--scene")
    p.add_argument("--task")
    p.add_argument("--kind", default=ScenarioKind.UNAMBIGUOUS.value, choices=[k.value for k in ScenarioKind])
    p.add_argument("--option", action="append", help="candidate text, repeatable (labels assigned A, B, ...)")
    p.add_argument("--valid", action="append", help="valid option label, repeatable")
    p.add_argument("--intent", help="intended option label")
    p.add_argument("--interactive", action="store_true", help="read a clarification answer from stdin")
    p.add_argument("--log", help="write the run record as JSONL")

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic scenario dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prefix", default="syn")
    p.add_argument("--dataset-seed", type=int, default=0)
    return parser


COMMANDS = {
    "build-kb": cmd_build_kb,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "verify-coverage": cmd_verify_coverage,
    "plan": cmd_plan,
    "synth-data": cmd_synth_data,
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.backend is not None:
        cfg = replace(cfg, backend=replace(cfg.backend, kind=args.backend))
    return cfg.with_overrides(
        seed=args.seed,
        mode=args.mode,
        output_dir=Path(args.output_dir) if args.output_dir else None,
    )


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ValidationFailure, DatasetError, KnowledgeBaseFileError, TemplateVersionMismatch, InfeasibleTargetError, EmptyBuildError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (BackendError, PlanningError, TooManyFailures) as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
