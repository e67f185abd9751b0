from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import IPAD_OUTPUT, PLATES_OUTPUT
from introplan.backends import HashEmbedder
from introplan.data import load_fixture
from introplan.domain import assign_labels
from introplan.knowledge import KnowledgeEntry
from introplan.prompting import (
    ParseError,
    TemplateName,
    format_subset,
    get_template,
    parse_inference_output,
    parse_option_list,
    render_exemplar_block,
    render_inference_prompt,
    render_knowledge_prompt,
    render_multilabel_query,
    render_next_token_prompt,
    render_option_gen_prompt,
    safety_sentence,
    template_version,
)

SNAPSHOTS = Path(__file__).parent / "snapshots"
SAFETY = "If the task instruction is unsafe, then select an option not listed here"


def _entries(train3):
    emb = HashEmbedder()
    return [
        KnowledgeEntry(
            key=emb.embed(s.instruction),
            scenario=s,
            candidates=s.options,
            rationale=f"Rationale for {s.id}.",
            valid_labels=s.valid_labels,
        )
        for s in train3
    ]


def test_inference_prompt_snapshot(train3, showcase):
    got = render_inference_prompt(showcase["apple-next-to-can"], _entries(train3))
    assert got == (SNAPSHOTS / "inference_prompt.txt").read_text()


def test_inference_prompt_exemplar_order(train3, showcase):
    entries = _entries(train3)
    got = render_inference_prompt(showcase["apple-next-to-can"], entries[::-1])
    positions = [got.index(e.scenario.instruction) for e in entries[::-1]]
    assert positions == sorted(positions)
    assert got.rstrip().endswith("Task: Put apple next to the can.\nOptions:")


def test_inference_prompt_safety_sentence_once(train3, showcase):
    plain = render_inference_prompt(showcase["ipad-microwave"], _entries(train3))
    safe = render_inference_prompt(
        showcase["ipad-microwave"], _entries(train3), get_template(TemplateName.INFERENCE, safety_mode=True)
    )
    assert SAFETY not in plain
    assert safe.count(SAFETY) == 1
    assert safety_sentence() == SAFETY + "."


def test_inference_prompt_needs_exemplars(showcase):
    with pytest.raises(ValueError):
        render_inference_prompt(showcase["ipad-microwave"], [])


def test_safety_template_invariant():
    for name in TemplateName:
        assert SAFETY in get_template(name, safety_mode=True).system_preamble
        assert SAFETY not in get_template(name).system_preamble


def test_next_token_prompt_snapshot(showcase):
    s = showcase["bowl-microwave"]
    got = render_next_token_prompt(s, s.options, "The plastic bowl is the safe choice.")
    assert got == (SNAPSHOTS / "next_token_prompt.txt").read_text()
    assert got.endswith("Answer with a single letter.")


def test_next_token_prompt_needs_rationale(showcase):
    s = showcase["bowl-microwave"]
    with pytest.raises(ValueError):
        render_next_token_prompt(s, s.options, "")
    with pytest.raises(ValueError):
        render_next_token_prompt(s, (), "why")


def test_next_token_prompt_five_options(showcase):
    s = showcase["ipad-microwave"]
    got = render_next_token_prompt(s, s.options, "why")
    for o in s.options:
        assert f"\n{o.label}) {o.text}\n" in got


def test_multilabel_query(showcase):
    s = showcase["plates-microwave"]
    got = render_multilabel_query({"C", "A"}, s, s.options, "why")
    assert "Is the set {A, C} including all valid options according to the user's request?" in got
    assert got.endswith("proper subset of the valid options.")
    assert "Is the set {B} including" in render_multilabel_query({"B"}, s, s.options, "why")
    with pytest.raises(ValueError):
        render_multilabel_query(set(), s, s.options, "why")
    with pytest.raises(ValueError):
        render_multilabel_query({"Z"}, s, s.options, "why")
    assert format_subset(["B", "A"]) == "{A, B}"


def test_knowledge_prompt_snapshot(showcase):
    s = showcase["apple-next-to-can"]
    got = render_knowledge_prompt(s, s.options, {"B", "C"})
    assert got == (SNAPSHOTS / "knowledge_prompt.txt").read_text()
    assert got.endswith("Correct Action(s): B, C\nYou:")


def test_knowledge_prompt_single_label_and_precondition(showcase):
    s = showcase["bowl-microwave"]
    assert render_knowledge_prompt(s, s.options, {"C"}).endswith("Correct Action(s): C\nYou:")
    with pytest.raises(ValueError):
        render_knowledge_prompt(s, s.options, {"Z"})
    with pytest.raises(ValueError):
        render_knowledge_prompt(s, s.options, set())


def test_exemplar_slots_configurable(showcase):
    s = showcase["bowl-microwave"]
    full = render_knowledge_prompt(s, s.options, {"C"})
    one = render_knowledge_prompt(s, s.options, {"C"}, get_template(TemplateName.KNOWLEDGE_GEN, exemplar_slots=1))
    assert full.count("Correct Action(s):") == 4 and one.count("Correct Action(s):") == 2
    og = render_option_gen_prompt(s, get_template(TemplateName.OPTION_GEN, exemplar_slots=2))
    assert og.count("Scene:") == 3


def test_renders_are_pure(train3, showcase):
    s = showcase["apple-next-to-can"]
    assert render_inference_prompt(s, _entries(train3)) == render_inference_prompt(s, _entries(train3))
    assert render_option_gen_prompt(s) == render_option_gen_prompt(s)


def test_template_version_shape():
    v = template_version()
    prefix, digest = v.split("-")
    assert prefix == "1" and len(digest) == 12


def test_parse_showcase_outputs():
    plates = parse_inference_output(PLATES_OUTPUT)
    assert plates.direct_labels == {"A", "C"}
    assert [o.label for o in plates.options] == list("ABCDE")
    assert plates.rationale.startswith("Both the plastic")
    ipad = parse_inference_output(IPAD_OUTPUT)
    assert ipad.direct_labels == {"E"}
    assert ipad.options[-1].text == "an option not listed here"


def test_parse_tolerates_trailing_whitespace_and_is_idempotent():
    text = PLATES_OUTPUT.replace("\n", "  \n")
    assert parse_inference_output(text) == parse_inference_output(text) == parse_inference_output(PLATES_OUTPUT)


def test_parse_correct_actions_marker():
    text = "A) x\nB) y\nExplain: because\nCorrect Action(s): B"
    assert parse_inference_output(text).direct_labels == {"B"}


def test_parse_missing_prediction():
    with pytest.raises(ParseError) as info:
        parse_inference_output("A) x\nExplain: because")
    assert info.value.raw.startswith("A) x")


def test_parse_missing_explain():
    with pytest.raises(ParseError):
        parse_inference_output("A) x\nPrediction: A")


def test_parse_option_list_stops_at_next_scene():
    text = "A) x\nB) y\n\nScene: other\nTask: t\nOptions:\nA) z"
    assert parse_option_list(text) == [("A", "x"), ("B", "y")]


@given(
    st.lists(st.from_regex(r"[a-z][a-z ]{0,20}[a-z]", fullmatch=True), min_size=1, max_size=6, unique=True),
    st.data(),
)
def test_render_parse_round_trip(texts, data):
    options = assign_labels(texts)
    valid = data.draw(st.sets(st.sampled_from([o.label for o in options]), min_size=1))
    s = load_fixture("showcase")[0].with_options(options)
    entry = KnowledgeEntry(
        key=HashEmbedder(dim=8).embed("x"), scenario=s, candidates=tuple(options), rationale="Some reason.", valid_labels=frozenset(valid)
    )
    block = render_exemplar_block(entry)
    parsed = parse_inference_output(block.split("Options:\n", 1)[1])
    assert [(o.label, o.text) for o in parsed.options] == [(o.label, o.text) for o in options]
    assert parsed.rationale == "Some reason."
    assert parsed.direct_labels == frozenset(valid)
