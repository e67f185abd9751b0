"""Deployment pipeline: retrieve exemplars, plan with rationale, then decide.

The expensive model calls live in :func:`introspect`; :func:`decide` turns a
cached :class:`Introspection` into a :class:`PredictionOutcome` for any q_hat,
which is what target-success sweeps rely on.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Mapping

from introplan.backends.base import (
    CompletionRequest,
    EmbeddingBackend,
    LabelConfidences,
    TextBackend,
    score_labels,
)
from introplan.backends.synthetic import nonempty_subsets
from introplan.conformal import CalibrationResult, multilabel_predict, predict_set
from introplan.domain import PlanOption, PredictionMode, PredictionOutcome, Scenario, is_escape_text, normalize_text
from introplan.knowledge import KnowledgeBase, options_from_texts, retrieve_scored
from introplan.prompting import (
    TemplateName,
    get_template,
    parse_inference_output,
    render_inference_prompt,
    render_multilabel_query,
    render_next_token_prompt,
)

MAX_MULTILABEL_OPTIONS = 10


class PlanningError(RuntimeError):
    def __init__(self, scenario_id: str, cause: BaseException):
        super().__init__(f"planning failed for {scenario_id!r}: {type(cause).__name__}: {cause}")
        self.scenario_id = scenario_id
        self.cause = cause


@dataclass(frozen=True)
class PlannerConfig:
    mode: PredictionMode = PredictionMode.CONFORMAL_SINGLE
    m: int = 3
    safety_mode: bool = False
    calibration: CalibrationResult | None = None
    score_top_k: int = 20
    max_tokens: int = 512

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", PredictionMode(self.mode))
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.mode is PredictionMode.DIRECT and self.calibration is not None:
            raise ValueError("direct mode takes no calibration")
        if self.mode is not PredictionMode.DIRECT and self.calibration is None:
            raise ValueError(f"{self.mode.value} mode requires a calibration result")
        if self.mode is PredictionMode.CONFORMAL_MULTI and self.calibration.kind != "multi":
            raise ValueError("multi-label mode needs a set-level calibration")
        if self.mode is PredictionMode.CONFORMAL_SINGLE and self.calibration.kind != "single":
            raise ValueError("single-label mode needs a label-level calibration")


@dataclass(frozen=True)
class Backends:
    llm: TextBackend
    embedder: EmbeddingBackend


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _set_key(labels: frozenset[str]) -> str:
    return ",".join(sorted(labels))


@dataclass(frozen=True)
class Introspection:
    """Every intermediate of one pipeline run, enough to replay the decision."""

    scenario_id: str
    retrieved: tuple[tuple[str, float], ...]
    options: tuple[PlanOption, ...]
    rationale: str
    direct_labels: frozenset[str]
    confidences: LabelConfidences | None = None
    set_confidences: Mapping[frozenset[str], float] | None = None
    prompt_hashes: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "scenario_id": self.scenario_id,
            "retrieved": [{"id": i, "similarity": s} for i, s in self.retrieved],
            "options": [{"label": o.label, "text": o.text} for o in self.options],
            "rationale": self.rationale,
            "direct_labels": sorted(self.direct_labels),
            "prompt_hashes": dict(sorted(self.prompt_hashes.items())),
        }
        if self.confidences is not None:
            out["confidences"] = self.confidences.to_dict()
        if self.set_confidences is not None:
            out["set_confidences"] = {
                _set_key(k): v for k, v in sorted(self.set_confidences.items(), key=lambda kv: (len(kv[0]), sorted(kv[0])))
            }
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Introspection:
        set_conf = data.get("set_confidences")
        return cls(
            scenario_id=data["scenario_id"],
            retrieved=tuple((r["id"], r["similarity"]) for r in data["retrieved"]),
            options=tuple(PlanOption(label=o["label"], text=o["text"], is_escape=is_escape_text(o["text"])) for o in data["options"]),
            rationale=data["rationale"],
            direct_labels=frozenset(data["direct_labels"]),
            confidences=LabelConfidences(data["confidences"]) if "confidences" in data else None,
            set_confidences={frozenset(k.split(",")): v for k, v in set_conf.items()} if set_conf is not None else None,
            prompt_hashes=data.get("prompt_hashes", {}),
        )


def _relabel_direct(parsed_options, direct_labels, options) -> frozenset[str]:
    by_text = {normalize_text(o.text): o.label for o in options}
    old = {o.label: o.text for o in parsed_options}
    return frozenset(by_text[normalize_text(old[l])] for l in direct_labels if normalize_text(old[l]) in by_text)


def introspect(
    s: Scenario,
    kb: KnowledgeBase,
    backends: Backends,
    *,
    mode: PredictionMode | str,
    m: int = 3,
    safety_mode: bool = False,
    score_top_k: int = 20,
    max_tokens: int = 512,
) -> Introspection:
    mode = PredictionMode(mode)
    try:
        retrieved = retrieve_scored(s.instruction, kb, m, backends.embedder)
        inference = render_inference_prompt(
            s, [r.entry for r in retrieved], get_template(TemplateName.INFERENCE, safety_mode=safety_mode)
        )
        hashes = {"inference": _sha(inference)}
        raw = backends.llm.complete(CompletionRequest(prompt=inference, max_tokens=max_tokens)).text
        parsed = parse_inference_output(raw)
        if not parsed.options:
            raise ValueError("model listed no options")
        options = options_from_texts([o.text for o in parsed.options])
        direct = _relabel_direct(parsed.options, parsed.direct_labels, options)
        confidences = None
        set_confidences = None
        scoring = get_template(TemplateName.NEXT_TOKEN, safety_mode=safety_mode)
        if mode is PredictionMode.CONFORMAL_SINGLE:
            prompt = render_next_token_prompt(s, options, parsed.rationale, scoring)
            hashes["next_token"] = _sha(prompt)
            confidences = score_labels(backends.llm, prompt, [o.label for o in options], score_top_k)
        elif mode is PredictionMode.CONFORMAL_MULTI:
            if len(options) > MAX_MULTILABEL_OPTIONS:
                raise ValueError(f"powerset scoring is capped at {MAX_MULTILABEL_OPTIONS} options")
            set_confidences = {}
            query_tmpl = get_template(TemplateName.MULTILABEL_QUERY, safety_mode=safety_mode)
            for subset in nonempty_subsets([o.label for o in options]):
                prompt = render_multilabel_query(subset, s, options, parsed.rationale, query_tmpl)
                hashes[f"set:{_set_key(subset)}"] = _sha(prompt)
                set_confidences[subset] = score_labels(backends.llm, prompt, ["Y", "N"], score_top_k)["Y"]
    except Exception as exc:
        raise PlanningError(s.id, exc) from exc
    return Introspection(
        scenario_id=s.id,
        retrieved=tuple((r.entry.scenario.id, r.similarity) for r in retrieved),
        options=options,
        rationale=parsed.rationale,
        direct_labels=direct,
        confidences=confidences,
        set_confidences=set_confidences,
        prompt_hashes=hashes,
    )


def decide(intro: Introspection, mode: PredictionMode | str, q_hat: float | None = None) -> PredictionOutcome:
    mode = PredictionMode(mode)
    if mode is PredictionMode.DIRECT:
        return PredictionOutcome.from_set(intro.scenario_id, mode, intro.direct_labels, intro.options)
    if q_hat is None:
        raise ValueError(f"{mode.value} needs q_hat")
    if mode is PredictionMode.CONFORMAL_SINGLE:
        if intro.confidences is None:
            raise ValueError("introspection carries no label confidences")
        return PredictionOutcome.from_set(intro.scenario_id, mode, predict_set(intro.confidences, q_hat), intro.options)
    if intro.set_confidences is None:
        raise ValueError("introspection carries no set confidences")
    family = multilabel_predict(intro.set_confidences, q_hat, [o.label for o in intro.options])
    return PredictionOutcome.from_family(intro.scenario_id, family, intro.options)


def plan_with_trace(s: Scenario, kb: KnowledgeBase, cfg: PlannerConfig, backends: Backends) -> tuple[PredictionOutcome, Introspection]:
    intro = introspect(
        s,
        kb,
        backends,
        mode=cfg.mode,
        m=cfg.m,
        safety_mode=cfg.safety_mode,
        score_top_k=cfg.score_top_k,
        max_tokens=cfg.max_tokens,
    )
    q_hat = cfg.calibration.q_hat if cfg.calibration is not None else None
    return decide(intro, cfg.mode, q_hat), intro


def plan(s: Scenario, kb: KnowledgeBase, cfg: PlannerConfig, backends: Backends) -> PredictionOutcome:
    return plan_with_trace(s, kb, cfg, backends)[0]


def resolve_help(outcome: PredictionOutcome, true_intent: str) -> str | None:
    """Simulated clarification: the user picks their intent if it was offered.

    Returns the intent label, or ``None`` when the question did not include it.
    """
    if not outcome.asked_for_help:
        raise ValueError("the planner did not ask for help")
    return true_intent if true_intent in outcome.prediction_set else None


# ---------------------------------------------------------------- calibration scores


def _aligned(truth: Scenario, options: tuple[PlanOption, ...], labels) -> frozenset[str]:
    by_text = {normalize_text(o.text): o.label for o in options}
    out = set()
    for label in labels:
        hit = by_text.get(normalize_text(truth.option(label).text))
        if hit is not None:
            out.add(hit)
    return frozenset(out)


def calibration_score(intro: Introspection, truth: Scenario, kind: str = "single") -> float:
    """Nonconformity of the ground truth; 1.0 when it was not among the options."""
    if kind == "single":
        if truth.intent is None:
            raise ValueError(f"scenario {truth.id!r} has no recorded intent")
        hit = _aligned(truth, intro.options, [truth.intent])
        if intro.confidences is None:
            raise ValueError("introspection carries no label confidences")
        return 1.0 - intro.confidences[next(iter(hit))] if hit else 1.0
    valid = _aligned(truth, intro.options, truth.valid_labels)
    if intro.set_confidences is None:
        raise ValueError("introspection carries no set confidences")
    return 1.0 - intro.set_confidences[valid] if valid else 1.0
