"""Introspective knowledge base: construction, persistence and retrieval."""
from __future__ import annotations

import datetime as _dt
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from introplan.backends.base import (
    CompletionRequest,
    EmbeddingBackend,
    EmbeddingVector,
    TextBackend,
)
from introplan.domain import (
    ESCAPE_TEXT,
    LETTERS,
    MAX_OPTIONS,
    PlanOption,
    Scenario,
    is_escape_text,
    normalize_text,
    validate_scenario,
)
from introplan.prompting import (
    PromptTemplate,
    TemplateName,
    get_template,
    parse_option_list,
    render_knowledge_prompt,
    render_option_gen_prompt,
    template_version,
)

logger = logging.getLogger(__name__)

KB_SCHEMA = "introplan-kb"
KB_SCHEMA_VERSION = 1


class GenerationFormatError(ValueError):
    """The model did not produce a parseable lettered option list."""


class EmptyRationaleError(ValueError):
    pass


class EmptyBuildError(RuntimeError):
    """Every training instance failed during knowledge-base construction."""


class KnowledgeBaseFileError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class KnowledgeEntry:
    key: EmbeddingVector
    scenario: Scenario
    candidates: tuple[PlanOption, ...]
    rationale: str
    valid_labels: frozenset[str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "valid_labels", frozenset(self.valid_labels))
        problems = self.problems()
        if problems:
            raise ValueError(f"invalid knowledge entry {self.scenario.id!r}: {'; '.join(problems)}")

    def problems(self) -> list[str]:
        out = []
        labels = {o.label for o in self.candidates}
        if not self.valid_labels <= labels:
            out.append(f"valid labels {sorted(self.valid_labels - labels)} not among candidates")
        if not self.rationale.strip():
            out.append("empty rationale")
        return out

    def to_dict(self) -> dict:
        return {
            "key": list(self.key.values),
            "scenario": self.scenario.to_dict(),
            "candidates": [o.to_dict() for o in self.candidates],
            "rationale": self.rationale,
            "valid_labels": sorted(self.valid_labels),
        }

    @classmethod
    def from_dict(cls, data: dict) -> KnowledgeEntry:
        return cls(
            key=EmbeddingVector(tuple(data["key"])),
            scenario=Scenario.from_dict(data["scenario"]),
            candidates=tuple(PlanOption.from_dict(o) for o in data["candidates"]),
            rationale=data["rationale"],
            valid_labels=frozenset(data["valid_labels"]),
        )


def _build_timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp for reproducible outputs
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch else _dt.datetime.now(_dt.timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class KnowledgeBase:
    entries: list[KnowledgeEntry]
    embedding_dim: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids: set[str] = set()
        for e in self.entries:
            if e.key.dim != self.embedding_dim:
                raise KnowledgeBaseFileError(
                    f"entry {e.scenario.id!r} has dimension {e.key.dim}, expected {self.embedding_dim}"
                )
            if e.scenario.id in ids:
                raise KnowledgeBaseFileError(f"duplicate scenario id {e.scenario.id!r}")
            ids.add(e.scenario.id)
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeBase):
            return NotImplemented
        return (
            self.entries == other.entries
            and self.embedding_dim == other.embedding_dim
            and self.provenance == other.provenance
        )

    def normalized_keys(self) -> np.ndarray:
        if self._matrix is None:
            mat = np.array([e.key.values for e in self.entries], dtype=np.float64).reshape(len(self.entries), self.embedding_dim)
            norms = np.linalg.norm(mat, axis=1)
            if np.any(norms == 0):
                bad = self.entries[int(np.argmin(norms))].scenario.id
                raise ValueError(f"entry {bad!r} has a zero embedding")
            self._matrix = mat / norms[:, None]
        return self._matrix

    def subset(self, size: int) -> KnowledgeBase:
        """The first ``size`` entries, in insertion order."""
        return KnowledgeBase(self.entries[:size], self.embedding_dim, {**self.provenance, "subset_of": len(self.entries)})


# ---------------------------------------------------------------- construction


def ensure_escape(texts: Sequence[str]) -> list[str]:
    """Keep exactly one escape option, appending it when the model left it out."""
    out: list[str] = []
    has_escape = False
    for t in texts:
        if is_escape_text(t):
            if has_escape:
                continue
            has_escape = True
            out.append(ESCAPE_TEXT)
        else:
            out.append(t)
    if not has_escape:
        out.append(ESCAPE_TEXT)
    return out


def options_from_texts(texts: Sequence[str]) -> tuple[PlanOption, ...]:
    texts = ensure_escape(texts)
    if len(texts) > MAX_OPTIONS:
        # the escape option is last when appended; never drop it
        texts = texts[: MAX_OPTIONS - 1] + [ESCAPE_TEXT]
    return tuple(
        PlanOption(label=LETTERS[i], text=t, is_escape=is_escape_text(t)) for i, t in enumerate(texts)
    )


def generate_choices(
    s: Scenario, backend: TextBackend, tmpl: PromptTemplate | None = None, max_tokens: int = 256
) -> tuple[PlanOption, ...]:
    if not s.instruction.strip() or not s.scene.strip():
        raise ValueError(f"scenario {s.id!r} needs both a scene and an instruction")
    prompt = render_option_gen_prompt(s, tmpl)
    for _attempt in range(2):
        text = backend.complete(CompletionRequest(prompt=prompt, max_tokens=max_tokens)).text
        parsed = parse_option_list(text)
        if parsed:
            return options_from_texts([t for _, t in parsed])
    raise GenerationFormatError(f"no lettered options in model output for {s.id!r}: {text[:200]!r}")


def generate_rationale(
    s: Scenario,
    candidates: Sequence[PlanOption],
    valid_labels: Iterable[str],
    backend: TextBackend,
    tmpl: PromptTemplate | None = None,
    max_tokens: int = 256,
) -> str:
    prompt = render_knowledge_prompt(s, candidates, valid_labels, tmpl)
    for _attempt in range(2):
        text = backend.complete(CompletionRequest(prompt=prompt, max_tokens=max_tokens)).text.strip()
        if text:
            # a continuing model may start the next exemplar; keep the first paragraph
            return text.split("\n\nScene:")[0].strip()
    raise EmptyRationaleError(f"model returned an empty rationale for {s.id!r}")


def align_labels(truth: Scenario, candidates: Sequence[PlanOption], labels: Iterable[str]) -> tuple[frozenset[str], list[str]]:
    """Map ground-truth labels of ``truth`` onto generated candidates by option text.

    Returns the mapped labels and the texts that had no matching candidate.
    """
    by_text = {normalize_text(o.text): o.label for o in candidates}
    mapped, missing = set(), []
    for label in labels:
        text = truth.option(label).text
        hit = by_text.get(normalize_text(text))
        if hit is None:
            missing.append(text)
        else:
            mapped.add(hit)
    return frozenset(mapped), missing


@dataclass
class BuildRecord:
    scenario_id: str
    status: str  # "ok" or "failed"
    warnings: list[str] = field(default_factory=list)
    error: str = ""

    def to_dict(self) -> dict:
        return {"scenario_id": self.scenario_id, "status": self.status, "warnings": self.warnings, "error": self.error}


@dataclass
class BuildReport:
    records: list[BuildRecord] = field(default_factory=list)

    @property
    def failures(self) -> list[BuildRecord]:
        return [r for r in self.records if r.status != "ok"]

    @property
    def warnings(self) -> list[tuple[str, str]]:
        return [(r.scenario_id, w) for r in self.records for w in r.warnings]


TrainItem = Scenario | tuple[Scenario, Iterable[str]]


def _build_one(
    item: TrainItem, backend: TextBackend, embedder: EmbeddingBackend, og: PromptTemplate, kg: PromptTemplate
) -> tuple[KnowledgeEntry | None, BuildRecord]:
    s, labels = (item, None) if isinstance(item, Scenario) else item
    labels = frozenset(labels) if labels is not None else s.valid_labels
    record = BuildRecord(scenario_id=s.id, status="ok")
    try:
        problems = validate_scenario(s)
        if problems:
            raise ValueError("; ".join(problems))
        if not labels:
            raise ValueError("no ground-truth valid labels")
        candidates = generate_choices(s, backend, og)
        valid, missing = align_labels(s, candidates, labels)
        for text in missing:
            record.warnings.append(f"valid option {text!r} not among generated candidates")
        if not valid:
            raise ValueError("none of the valid options were generated")
        rationale = generate_rationale(s, candidates, valid, backend, kg)
        key = embedder.embed(s.instruction)
        entry = KnowledgeEntry(key=key, scenario=s, candidates=candidates, rationale=rationale, valid_labels=valid)
    except Exception as exc:  # one bad instance must not abort a long build
        logger.warning("skipping %s: %s", s.id, exc)
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        return None, record
    return entry, record


def build_knowledge_base(
    train: Sequence[TrainItem],
    backend: TextBackend,
    embedder: EmbeddingBackend,
    *,
    safety_mode: bool = False,
    n_exemplars: int | None = None,
    max_workers: int = 1,
) -> tuple[KnowledgeBase, BuildReport]:
    og = get_template(TemplateName.OPTION_GEN, safety_mode=safety_mode, exemplar_slots=n_exemplars)
    kg = get_template(TemplateName.KNOWLEDGE_GEN, safety_mode=safety_mode, exemplar_slots=n_exemplars)
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(lambda it: _build_one(it, backend, embedder, og, kg), train))
    else:
        results = [_build_one(it, backend, embedder, og, kg) for it in train]
    report = BuildReport([r for _, r in results])
    entries = [e for e, _ in results if e is not None]
    if train and not entries:
        raise EmptyBuildError(f"all {len(train)} training instances failed")
    dim = entries[0].key.dim if entries else getattr(embedder, "dim", 0) or 1
    provenance = {
        "llm": getattr(backend, "name", type(backend).__name__),
        "embedder": getattr(embedder, "name", type(embedder).__name__),
        "template_version": template_version(),
        "safety_mode": safety_mode,
        "built_at": _build_timestamp(),
    }
    return KnowledgeBase(entries, dim, provenance), report


# ---------------------------------------------------------------- retrieval


@dataclass(frozen=True)
class Retrieved:
    entry: KnowledgeEntry
    similarity: float
    index: int


def retrieve_scored(query: str, kb: KnowledgeBase, m: int, embedder: EmbeddingBackend) -> list[Retrieved]:
    if len(kb) == 0:
        raise ValueError("knowledge base is empty")
    if m < 1:
        raise ValueError("m must be at least 1")
    q = embedder.embed(query).as_array()
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ValueError("query embedding is the zero vector")
    if q.shape[0] != kb.embedding_dim:
        raise ValueError(f"query dimension {q.shape[0]} != knowledge base dimension {kb.embedding_dim}")
    sims = np.clip(kb.normalized_keys() @ (q / norm), -1.0, 1.0)
    # stable sort on -similarity keeps insertion order among exact ties
    order = np.argsort(-sims, kind="stable")[: min(m, len(kb))]
    return [Retrieved(kb.entries[i], float(sims[i]), int(i)) for i in order]


def retrieve_similar(query: str, kb: KnowledgeBase, m: int, embedder: EmbeddingBackend) -> list[KnowledgeEntry]:
    return [r.entry for r in retrieve_scored(query, kb, m, embedder)]


# ---------------------------------------------------------------- persistence


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    header = {
        "schema": KB_SCHEMA,
        "schema_version": KB_SCHEMA_VERSION,
        "embedding_dim": kb.embedding_dim,
        "provenance": kb.provenance,
        "count": len(kb),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for e in kb.entries:
            # json writes floats with repr, the shortest string that round-trips exactly
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def load_kb(path: str | Path) -> KnowledgeBase:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise KnowledgeBaseFileError("empty knowledge-base file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise KnowledgeBaseFileError("corrupt header", 1) from None
    if header.get("schema") != KB_SCHEMA or header.get("schema_version") != KB_SCHEMA_VERSION:
        raise KnowledgeBaseFileError(
            f"schema mismatch: expected {KB_SCHEMA} v{KB_SCHEMA_VERSION}, "
            f"found {header.get('schema')} v{header.get('schema_version')}",
            1,
        )
    dim = header.get("embedding_dim")
    if not isinstance(dim, int) or dim < 1:
        raise KnowledgeBaseFileError("header lacks a positive embedding_dim", 1)
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise KnowledgeBaseFileError(f"corrupt line ({exc.msg})", lineno) from None
        try:
            entry = KnowledgeEntry.from_dict(data)
        except (KeyError, TypeError, ValueError) as exc:
            raise KnowledgeBaseFileError(f"invalid entry: {exc}", lineno) from None
        if entry.key.dim != dim:
            raise KnowledgeBaseFileError(
                f"dimension mismatch in entry {entry.scenario.id!r}: {entry.key.dim} != {dim}", lineno
            )
        entries.append(entry)
    if "count" in header and header["count"] != len(entries):
        raise KnowledgeBaseFileError(f"header declares {header['count']} entries, found {len(entries)}", len(lines) + 1)
    return KnowledgeBase(entries, dim, header.get("provenance", {}))
