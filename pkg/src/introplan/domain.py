"""Core data types: scenarios, lettered plan options and prediction outcomes."""
from __future__ import annotations

import json
import string
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

ESCAPE_TEXT = "an option not listed here"
LETTERS = string.ascii_uppercase
MAX_OPTIONS = len(LETTERS)

# Option labels are plain single-letter strings ("A", "B", ...).
OptionLabel = str


class ScenarioKind(str, Enum):
    UNAMBIGUOUS = "unambiguous"
    SINGLE_LABEL = "single_label"
    MULTI_LABEL = "multi_label"
    SPATIALLY_AMBIGUOUS = "spatially_ambiguous"
    UNSAFE = "unsafe"
    WINOGRAD = "winograd"
    CREATIVE = "creative"
    UNSAFE_AMBIGUOUS = "unsafe_ambiguous"
    SERIOUS_UNSAFE = "serious_unsafe"


class PredictionMode(str, Enum):
    DIRECT = "direct"
    CONFORMAL_SINGLE = "conformal_single"
    CONFORMAL_MULTI = "conformal_multi"


class CapacityError(ValueError):
    """More plan options than there are letters."""


class DatasetError(ValueError):
    """A dataset file could not be read or failed validation."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def is_label(value: str) -> bool:
    return isinstance(value, str) and len(value) == 1 and value in LETTERS


def normalize_text(text: str) -> str:
    """Case/whitespace/punctuation-insensitive key used to match option texts."""
    cleaned = "".join(ch if ch.isalnum() else " " for ch in text.lower())
    return " ".join(cleaned.split())


def is_escape_text(text: str) -> bool:
    return normalize_text(text) == normalize_text(ESCAPE_TEXT)


@dataclass(frozen=True)
class PlanOption:
    label: OptionLabel
    text: str
    is_valid: bool = False
    is_unsafe: bool = False
    is_intent: bool = False
    is_escape: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "text": self.text,
            "is_valid": self.is_valid,
            "is_unsafe": self.is_unsafe,
            "is_intent": self.is_intent,
            "is_escape": self.is_escape,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PlanOption:
        return cls(
            label=data["label"],
            text=data["text"],
            is_valid=bool(data.get("is_valid", False)),
            is_unsafe=bool(data.get("is_unsafe", False)),
            is_intent=bool(data.get("is_intent", False)),
            is_escape=bool(data.get("is_escape", False)),
        )


@dataclass(frozen=True)
class Scenario:
    id: str
    scene: str
    instruction: str
    kind: ScenarioKind = ScenarioKind.UNAMBIGUOUS
    options: tuple[PlanOption, ...] = ()
    observation: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        object.__setattr__(self, "options", tuple(self.options))
        if not self.observation:
            object.__setattr__(self, "observation", self.scene)

    @property
    def labels(self) -> tuple[OptionLabel, ...]:
        return tuple(o.label for o in self.options)

    @property
    def has_ground_truth(self) -> bool:
        return bool(self.options) and any(o.is_valid for o in self.options)

    @property
    def valid_labels(self) -> frozenset[OptionLabel]:
        return frozenset(o.label for o in self.options if o.is_valid)

    @property
    def unsafe_labels(self) -> frozenset[OptionLabel]:
        return frozenset(o.label for o in self.options if o.is_unsafe)

    @property
    def intent(self) -> OptionLabel | None:
        for o in self.options:
            if o.is_intent:
                return o.label
        return None

    def option(self, label: OptionLabel) -> PlanOption:
        for o in self.options:
            if o.label == label:
                return o
        raise KeyError(label)

    def with_options(self, options: Iterable[PlanOption]) -> Scenario:
        return replace(self, options=tuple(options))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "scene": self.scene,
            "instruction": self.instruction,
            "observation": self.observation,
            "kind": self.kind.value,
            "options": [o.to_dict() for o in self.options],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Scenario:
        try:
            return cls(
                id=str(data["id"]),
                scene=data["scene"],
                instruction=data["instruction"],
                observation=data.get("observation", ""),
                kind=ScenarioKind(data.get("kind", "unambiguous")),
                options=tuple(PlanOption.from_dict(o) for o in data.get("options", [])),
            )
        except KeyError as exc:
            raise DatasetError(f"missing field {exc.args[0]!r}") from None
        except ValueError as exc:
            raise DatasetError(str(exc)) from None


@dataclass(frozen=True)
class PredictionOutcome:
    """Decision for one scenario.

    ``prediction_set`` is the label set for single-label modes. In multi-label
    mode ``family`` holds the conformal family of label sets and
    ``prediction_set`` is their union.
    """

    scenario_id: str
    mode: PredictionMode
    prediction_set: frozenset[OptionLabel]
    certain: bool
    asked_for_help: bool
    family: tuple[frozenset[OptionLabel], ...] | None = None
    options: tuple[PlanOption, ...] = field(default=(), compare=False)

    @classmethod
    def from_set(
        cls,
        scenario_id: str,
        mode: PredictionMode,
        labels: Iterable[OptionLabel],
        options: Sequence[PlanOption] = (),
    ) -> PredictionOutcome:
        labels = frozenset(labels)
        return cls(
            scenario_id=scenario_id,
            mode=PredictionMode(mode),
            prediction_set=labels,
            certain=len(labels) == 1,
            # an empty set also means the planner cannot act on its own
            asked_for_help=len(labels) != 1,
            options=tuple(options),
        )

    @classmethod
    def from_family(
        cls,
        scenario_id: str,
        family: Iterable[Iterable[OptionLabel]],
        options: Sequence[PlanOption] = (),
    ) -> PredictionOutcome:
        fam = tuple(sorted((frozenset(g) for g in family), key=_set_sort_key))
        union = frozenset().union(*fam) if fam else frozenset()
        certain = family_is_certain(fam)
        return cls(
            scenario_id=scenario_id,
            mode=PredictionMode.CONFORMAL_MULTI,
            prediction_set=union,
            certain=certain,
            asked_for_help=not certain,
            family=fam,
            options=tuple(options),
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "scenario_id": self.scenario_id,
            "mode": self.mode.value,
            "prediction_set": sorted(self.prediction_set),
            "certain": self.certain,
            "asked_for_help": self.asked_for_help,
        }
        if self.family is not None:
            out["family"] = [sorted(g) for g in self.family]
        if self.options:
            out["options"] = [o.to_dict() for o in self.options]
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PredictionOutcome:
        options = tuple(PlanOption.from_dict(o) for o in data.get("options", []))
        if data.get("family") is not None:
            return cls.from_family(data["scenario_id"], data["family"], options)
        return cls.from_set(data["scenario_id"], data["mode"], data["prediction_set"], options)


def _set_sort_key(labels: frozenset[str]) -> tuple[int, tuple[str, ...]]:
    return (len(labels), tuple(sorted(labels)))


def family_is_certain(family: Iterable[frozenset[OptionLabel]]) -> bool:
    """Certain iff the union of every set in the family is a single label."""
    union: set[str] = set()
    for g in family:
        union |= g
    return len(union) == 1


def assign_labels(texts: Sequence[str]) -> list[PlanOption]:
    if not texts:
        raise ValueError("at least one plan text is required")
    if len(texts) > MAX_OPTIONS:
        raise CapacityError(f"{len(texts)} options exceed the {MAX_OPTIONS}-letter alphabet")
    return [
        PlanOption(label=LETTERS[i], text=t, is_escape=is_escape_text(t))
        for i, t in enumerate(texts)
    ]


def validate_scenario(s: Scenario) -> list[str]:
    """Return human-readable invariant violations; empty means well-formed."""
    problems: list[str] = []
    labels = [o.label for o in s.options]
    if len(labels) > MAX_OPTIONS:
        problems.append(f"capacity: {len(labels)} options exceed {MAX_OPTIONS}")
    for i, label in enumerate(labels):
        if not is_label(label):
            problems.append(f"label: {label!r} is not an uppercase letter")
        elif i < MAX_OPTIONS and label != LETTERS[i]:
            problems.append(f"label-order: option {i} has label {label!r}, expected {LETTERS[i]!r}")
    if len(set(labels)) != len(labels):
        problems.append("label-duplicate: option labels are not unique")

    intents = [o for o in s.options if o.is_intent]
    if len(intents) > 1:
        problems.append(
            "duplicate-intent: options " + ", ".join(o.label for o in intents) + " are all marked as intent"
        )
    for o in s.options:
        if o.is_intent and not o.is_valid:
            problems.append(f"intent-invalid: intent option {o.label} is not valid")
        if o.is_escape and not is_escape_text(o.text):
            problems.append(f"escape-text: option {o.label} is flagged escape but reads {o.text!r}")

    if s.options and s.has_ground_truth:
        valid = [o for o in s.options if o.is_valid]
        if s.kind is ScenarioKind.UNAMBIGUOUS and len(valid) != 1:
            problems.append(f"unambiguous-valid-count: expected 1 valid option, found {len(valid)}")
        if s.kind is ScenarioKind.SERIOUS_UNSAFE and not (len(valid) == 1 and valid[0].is_escape):
            problems.append("safety-invariant: serious_unsafe scenario must have the escape option as its only valid option")
    return problems


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line


def load_scenarios(path: str | Path, *, strict: bool = True) -> tuple[list[Scenario], list[DatasetError]]:
    """Read a JSONL dataset.

    With ``strict`` any malformed or invalid line raises. Otherwise bad lines
    are returned as errors alongside the scenarios that loaded.
    """
    scenarios: list[Scenario] = []
    errors: list[DatasetError] = []
    seen: set[str] = set()
    for lineno, line in iter_jsonl(path):
        try:
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"corrupt JSON ({exc.msg})", lineno) from None
            try:
                s = Scenario.from_dict(data)
            except DatasetError as exc:
                raise DatasetError(str(exc), lineno) from None
            problems = validate_scenario(s)
            if problems:
                raise DatasetError("; ".join(problems), lineno)
            if s.id in seen:
                raise DatasetError(f"duplicate scenario id {s.id!r}", lineno)
        except DatasetError as exc:
            if strict:
                raise
            errors.append(exc)
            continue
        seen.add(s.id)
        scenarios.append(s)
    return scenarios, errors


def dump_scenarios(scenarios: Iterable[Scenario], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
