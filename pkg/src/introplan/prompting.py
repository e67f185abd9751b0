"""Prompt rendering for option generation, rationale generation, inference,
next-token scoring and set-level queries, plus parsing of model output."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from string import Template
from typing import TYPE_CHECKING, Any, Iterable, Sequence

import yaml

from introplan.domain import PlanOption, Scenario

if TYPE_CHECKING:
    from introplan.knowledge import KnowledgeEntry

TEMPLATE_FILE = "prompts.yaml"


class ParseError(ValueError):
    """Model output did not follow the expected format."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class TemplateName(str, Enum):
    OPTION_GEN = "option_gen"
    KNOWLEDGE_GEN = "knowledge_gen"
    INFERENCE = "inference"
    NEXT_TOKEN = "next_token"
    MULTILABEL_QUERY = "multilabel_query"


@lru_cache(maxsize=1)
def _raw_template_bytes() -> bytes:
    return resources.files("introplan.templates").joinpath(TEMPLATE_FILE).read_bytes()


@lru_cache(maxsize=1)
def _catalog() -> dict[str, Any]:
    return yaml.safe_load(_raw_template_bytes().decode("utf-8"))


def template_version() -> str:
    """Declared version plus a content hash of the template file."""
    digest = hashlib.sha256(_raw_template_bytes()).hexdigest()[:12]
    return f"{_catalog()['version']}-{digest}"


def safety_sentence() -> str:
    return _catalog()["safety_sentence"]


@dataclass(frozen=True)
class PromptTemplate:
    name: TemplateName
    system_preamble: str
    exemplar_slots: int
    safety_mode: bool = False


def get_template(name: TemplateName | str, *, safety_mode: bool = False, exemplar_slots: int | None = None) -> PromptTemplate:
    name = TemplateName(name)
    cat = _catalog()
    env = cat["environment"].strip()
    if name is TemplateName.KNOWLEDGE_GEN:
        preamble = env + "\n" + cat["knowledge_gen"]["goal"]
        available = len(cat["knowledge_gen"]["exemplars"])
    else:
        preamble = env + " " + cat["follow_template"]
        available = len(cat["option_gen"]["exemplars"]) if name is TemplateName.OPTION_GEN else 0
    if safety_mode:
        preamble += "\n" + cat["safety_sentence"]
    slots = available if exemplar_slots is None else min(exemplar_slots, available)
    return PromptTemplate(name=name, system_preamble=preamble, exemplar_slots=slots, safety_mode=safety_mode)


def _block(key: str, **values: str) -> str:
    return Template(_catalog()["blocks"][key]).substitute(**values)


def format_labels(labels: Iterable[str]) -> str:
    return ", ".join(sorted(labels))


def format_options(options: Sequence[PlanOption] | Sequence[tuple[str, str]]) -> str:
    lines = []
    for opt in options:
        label, text = (opt.label, opt.text) if isinstance(opt, PlanOption) else opt
        lines.append(_block("option", label=label, text=text))
    return "\n".join(lines)


def _scenario_head(scene: str, task: str) -> str:
    return _block("scenario", scene=scene, task=task)


def _lettered(texts: Sequence[str]) -> list[tuple[str, str]]:
    return [(chr(ord("A") + i), t) for i, t in enumerate(texts)]


def render_option_gen_prompt(s: Scenario, tmpl: PromptTemplate | None = None) -> str:
    tmpl = tmpl or get_template(TemplateName.OPTION_GEN)
    parts = [tmpl.system_preamble]
    for ex in _catalog()["option_gen"]["exemplars"][: tmpl.exemplar_slots]:
        parts.append(_scenario_head(ex["scene"], ex["task"]) + "\n" + format_options(_lettered(ex["options"])))
    parts.append(_scenario_head(s.scene, s.instruction))
    return "\n\n".join(parts)


def render_knowledge_prompt(
    s: Scenario,
    candidates: Sequence[PlanOption],
    valid_labels: Iterable[str],
    tmpl: PromptTemplate | None = None,
) -> str:
    valid_labels = set(valid_labels)
    if not valid_labels:
        raise ValueError("at least one valid label is required")
    known = {o.label for o in candidates}
    if not valid_labels <= known:
        raise ValueError(f"valid labels {sorted(valid_labels - known)} are not among the candidates")
    tmpl = tmpl or get_template(TemplateName.KNOWLEDGE_GEN)
    parts = [tmpl.system_preamble]
    for ex in _catalog()["knowledge_gen"]["exemplars"][: tmpl.exemplar_slots]:
        parts.append(
            "\n".join(
                [
                    _scenario_head(ex["scene"], ex["task"]),
                    format_options(_lettered(ex["options"])),
                    _block("correct", labels=format_labels(ex["correct"])),
                    _block("you", rationale=ex["rationale"].strip()),
                ]
            )
        )
    parts.append(
        "\n".join(
            [
                _scenario_head(s.scene, s.instruction),
                format_options(candidates),
                _block("correct", labels=format_labels(valid_labels)),
                "You:",
            ]
        )
    )
    return "\n\n".join(parts)


def render_exemplar_block(entry: KnowledgeEntry) -> str:
    return "\n".join(
        [
            _scenario_head(entry.scenario.scene, entry.scenario.instruction),
            format_options(entry.candidates),
            _block("explain", rationale=entry.rationale.strip()),
            _block("prediction", labels=format_labels(entry.valid_labels)),
        ]
    )


def render_inference_prompt(
    s: Scenario, exemplars: Sequence[KnowledgeEntry], tmpl: PromptTemplate | None = None
) -> str:
    if not exemplars:
        raise ValueError("the inference prompt needs at least one retrieved exemplar")
    tmpl = tmpl or get_template(TemplateName.INFERENCE)
    parts = [tmpl.system_preamble]
    parts.extend(render_exemplar_block(e) for e in exemplars)
    parts.append(_scenario_head(s.scene, s.instruction))
    return "\n\n".join(parts) + "\n"


def _scored_context(s: Scenario, options: Sequence[PlanOption], rationale: str, tmpl: PromptTemplate) -> str:
    if not options:
        raise ValueError("options must be non-empty")
    if not rationale or not rationale.strip():
        raise ValueError("a rationale is required for introspective scoring")
    return "\n\n".join(
        [
            tmpl.system_preamble,
            _scenario_head(s.scene, s.instruction) + "\n" + format_options(options),
            _block("explain", rationale=rationale.strip()),
        ]
    )


def render_next_token_prompt(
    s: Scenario, options: Sequence[PlanOption], rationale: str, tmpl: PromptTemplate | None = None
) -> str:
    tmpl = tmpl or get_template(TemplateName.NEXT_TOKEN)
    return _scored_context(s, options, rationale, tmpl) + "\n" + _catalog()["next_token"]["question"]


def format_subset(subset: Iterable[str]) -> str:
    return "{" + ", ".join(sorted(subset)) + "}"


def render_multilabel_query(
    subset: Iterable[str],
    s: Scenario,
    options: Sequence[PlanOption],
    rationale: str,
    tmpl: PromptTemplate | None = None,
) -> str:
    subset = set(subset)
    if not subset:
        raise ValueError("the queried subset must be non-empty")
    known = {o.label for o in options}
    if not subset <= known:
        raise ValueError(f"subset labels {sorted(subset - known)} are not among the options")
    tmpl = tmpl or get_template(TemplateName.MULTILABEL_QUERY)
    question = Template(_catalog()["multilabel_query"]["question"].strip()).substitute(subset=format_subset(subset))
    return _scored_context(s, options, rationale, tmpl) + "\n" + question


# ---------------------------------------------------------------- parsing

_OPTION_RE = re.compile(r"^\s*([A-Z])\s*[\).:]\s*(.+?)\s*$")
_EXPLAIN_RE = re.compile(r"^\s*(?:Explain|You)\s*:\s*(.*)$")
_ANSWER_RE = re.compile(r"^\s*(?:Prediction|Correct\s+Actions?\s*\(s\)|Correct\s+Actions?)\s*:\s*(.*)$", re.IGNORECASE)
_LETTER_RE = re.compile(r"\b([A-Z])\b")
_HEADER_RE = re.compile(r"^\s*(?:Scene|Task|Options)\s*:", re.IGNORECASE)


def parse_option_list(text: str) -> list[tuple[str, str]]:
    """Lettered ``X) text`` lines, stopping at the first explanation/answer marker."""
    found = []
    for line in text.splitlines():
        if _EXPLAIN_RE.match(line) or _ANSWER_RE.match(line):
            break
        if _HEADER_RE.match(line) and found:
            # the model started writing another scenario
            break
        m = _OPTION_RE.match(line)
        if m:
            found.append((m.group(1), m.group(2)))
    return found


@dataclass(frozen=True)
class InferenceOutput:
    options: tuple[PlanOption, ...]
    rationale: str
    direct_labels: frozenset[str]


def parse_answer_labels(line_value: str) -> frozenset[str]:
    return frozenset(_LETTER_RE.findall(line_value))


def parse_inference_output(text: str) -> InferenceOutput:
    lines = text.splitlines()
    raw_options = parse_option_list(text)
    explain: list[str] = []
    answer: str | None = None
    in_explain = False
    for line in lines:
        m = _ANSWER_RE.match(line)
        if m:
            answer = m.group(1)
            break
        m = _EXPLAIN_RE.match(line)
        if m:
            in_explain = True
            explain.append(m.group(1).strip())
            continue
        if in_explain:
            explain.append(line.strip())
    if answer is None:
        raise ParseError("model output has no 'Prediction:' line", raw=text)
    rationale = " ".join(part for part in explain if part).strip()
    if not rationale:
        raise ParseError("model output has no explanation", raw=text)
    labels = parse_answer_labels(answer)
    options = tuple(PlanOption(label=lbl, text=t) for lbl, t in raw_options)
    if options:
        known = {o.label for o in options}
        labels = labels & known
    if not labels:
        raise ParseError(f"no usable option letters in prediction {answer!r}", raw=text)
    return InferenceOutput(options=options, rationale=rationale, direct_labels=labels)
