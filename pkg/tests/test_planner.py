from __future__ import annotations

import json

import pytest

from helpers import IPAD_OUTPUT, make_scenario
from introplan.backends.synthetic import ScriptedLLM
from introplan.conformal import CalibrationResult, predict_set
from introplan.domain import PredictionMode, PredictionOutcome
from introplan.knowledge import build_knowledge_base
from introplan.planner import (
    Backends,
    Introspection,
    PlannerConfig,
    PlanningError,
    calibration_score,
    decide,
    introspect,
    plan,
    plan_with_trace,
    resolve_help,
)
from introplan.prompting import safety_sentence


def _calibration(q_hat: float, kind: str = "single") -> CalibrationResult:
    return CalibrationResult(
        q_hat=q_hat, epsilon_hat=0.15, n=10, delta=None, sorted_scores=(), template_version="v", kind=kind
    )


@pytest.fixture
def setup(train3, showcase, embedder, synthetic_factory):
    def make(**params):
        llm = synthetic_factory(list(train3) + list(showcase.values()), **params)
        kb, _ = build_knowledge_base(train3, llm, embedder)
        return kb, Backends(llm, embedder)

    return make


def test_concentrated_backend_is_certain(setup, showcase):
    kb, backends = setup(valid_concentration=1e6, invalid_concentration=0.01)
    s = showcase["bowl-microwave"]
    out = plan(s, kb, PlannerConfig(calibration=_calibration(0.15)), backends)
    assert out.certain and not out.asked_for_help
    (label,) = out.prediction_set
    assert out.options[ord(label) - 65].text == s.option(s.intent).text


def test_q_hat_one_asks_with_every_option(setup, showcase):
    kb, backends = setup()
    out = plan(showcase["plates-microwave"], kb, PlannerConfig(calibration=_calibration(1.0)), backends)
    assert out.asked_for_help
    assert out.prediction_set == {o.label for o in out.options}


def test_logged_confidences_replay_the_decision(setup, showcase):
    kb, backends = setup()
    cfg = PlannerConfig(calibration=_calibration(0.6))
    for s in showcase.values():
        out, intro = plan_with_trace(s, kb, cfg, backends)
        assert out.prediction_set == predict_set(intro.confidences, 0.6)
        replayed = Introspection.from_dict(json.loads(json.dumps(intro.to_dict())))
        assert decide(replayed, cfg.mode, 0.6) == out


def test_plan_is_deterministic(setup, showcase):
    kb, backends = setup(noise_scale=0.3)
    cfg = PlannerConfig(calibration=_calibration(0.5))
    s = showcase["apple-next-to-can"]
    assert plan_with_trace(s, kb, cfg, backends) == plan_with_trace(s, kb, cfg, backends)


def test_direct_mode_unsafe_request(train3, showcase, embedder, synthetic_factory):
    kb, _ = build_knowledge_base(train3, synthetic_factory(train3), embedder)
    llm = ScriptedLLM([IPAD_OUTPUT])
    cfg = PlannerConfig(mode=PredictionMode.DIRECT, safety_mode=True)
    out = plan(showcase["ipad-microwave"], kb, cfg, Backends(llm, embedder))
    assert out.prediction_set == {"E"} and out.certain
    assert out.options[-1].is_escape
    assert llm.requests[0].prompt.count(safety_sentence().rstrip(".")) == 1


def test_multilabel_mode_scores_the_powerset(setup, showcase):
    kb, backends = setup()
    s = showcase["plates-microwave"]
    out, intro = plan_with_trace(
        s, kb, PlannerConfig(mode=PredictionMode.CONFORMAL_MULTI, calibration=_calibration(0.5, "multi")), backends
    )
    assert len(intro.set_confidences) == 2 ** len(intro.options) - 1
    assert out.mode is PredictionMode.CONFORMAL_MULTI


def test_backend_failures_are_wrapped(train3, showcase, embedder, synthetic_factory):
    kb, _ = build_knowledge_base(train3, synthetic_factory(train3), embedder)
    cfg = PlannerConfig(mode=PredictionMode.DIRECT)
    with pytest.raises(PlanningError) as info:
        plan(showcase["ipad-microwave"], kb, cfg, Backends(ScriptedLLM(["no structure"]), embedder))
    assert info.value.scenario_id == "ipad-microwave"


def test_resolve_help():
    asked = PredictionOutcome.from_set("x", PredictionMode.CONFORMAL_SINGLE, {"A", "B"})
    assert resolve_help(asked, "A") == "A"
    assert resolve_help(asked, "C") is None
    empty = PredictionOutcome.from_set("x", PredictionMode.CONFORMAL_SINGLE, set())
    assert resolve_help(empty, "A") is None
    with pytest.raises(ValueError):
        resolve_help(PredictionOutcome.from_set("x", PredictionMode.CONFORMAL_SINGLE, {"A"}), "A")


def test_planner_config_validation():
    with pytest.raises(ValueError):
        PlannerConfig()  # conformal without calibration
    with pytest.raises(ValueError):
        PlannerConfig(mode=PredictionMode.DIRECT, calibration=_calibration(0.5))
    with pytest.raises(ValueError):
        PlannerConfig(mode=PredictionMode.CONFORMAL_MULTI, calibration=_calibration(0.5))
    with pytest.raises(ValueError):
        PlannerConfig(mode="direct", m=0)
    assert PlannerConfig(mode="direct").mode is PredictionMode.DIRECT


def test_calibration_score_aligns_by_text(setup, showcase):
    kb, backends = setup()
    s = showcase["bowl-microwave"]
    intro = introspect(s, kb, backends, mode=PredictionMode.CONFORMAL_SINGLE)
    label = next(o.label for o in intro.options if o.text == s.option(s.intent).text)
    assert calibration_score(intro, s) == pytest.approx(1.0 - intro.confidences[label])
    other = make_scenario("other", ["nothing in common", "still nothing"], "A", "A", scene=s.scene, task=s.instruction)
    assert calibration_score(intro, other) == 1.0
