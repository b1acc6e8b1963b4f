"""Triplet knowledge bases: ingestion, fact rendering, lookup, persistence.

A knowledge base is built once from a stream of (subject, relation, object)
triplets plus an optional alias table, rendered into natural-language fact
sentences at ingestion time, and then treated as read-only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .errors import DataError, InvalidArgumentError, NotFoundError

KB_SPLITS = ("business", "book", "movie")


@dataclass(frozen=True)
class Triplet:
    """One raw knowledge record before rendering."""

    subject_id: str
    subject_name: str
    relation: str
    object: str


@dataclass(frozen=True)
class FactSentence:
    """A rendered fact kept alongside its source relation and object."""

    relation: str
    object: str
    sentence: str


@dataclass(frozen=True)
class Entity:
    """A linkable entity: canonical name, surface aliases, rendered facts."""

    id: str
    name: str
    aliases: tuple[str, ...] = ()
    facts: tuple[FactSentence, ...] = ()

    def surfaces(self) -> tuple[str, ...]:
        return (self.name, *self.aliases)


@dataclass
class KnowledgeBase:
    """Read-only entity store for one split, in ingestion order."""

    split_name: str
    entities: dict[str, Entity] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entities)

    def entity(self, entity_id: str) -> Entity:
        try:
            return self.entities[entity_id]
        except KeyError:
            raise NotFoundError(f"unknown entity id: {entity_id!r}") from None


@dataclass(frozen=True)
class SkippedRecord:
    location: str
    reason: str


@dataclass
class IngestionReport:
    records_total: int = 0
    records_used: int = 0
    duplicates: int = 0
    skipped: list[SkippedRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "records_total": self.records_total,
            "records_used": self.records_used,
            "duplicates": self.duplicates,
            "skipped": [{"location": s.location, "reason": s.reason} for s in self.skipped],
            "warnings": list(self.warnings),
        }


def load_templates(path: str | Path | None = None) -> dict[str, str]:
    """Load the relation → sentence-pattern table.

    Without a path the packaged defaults are used. Every pattern must be a
    string; ``{subject}`` and ``{object}`` are the only placeholders honored.
    """
    if path is None:
        raw = resources.files("textkvqa").joinpath("templates.json").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    try:
        table = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"template table is not valid JSON: {exc}") from exc
    if not isinstance(table, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in table.items()
    ):
        raise DataError("template table must map relation tags to pattern strings")
    return table


def render_fact(
    subject_name: str,
    relation: str,
    object: str,
    templates: Mapping[str, str] | None = None,
) -> FactSentence:
    """Render one triplet into a sentence via the template table.

    Unknown relations fall back to the generic pattern
    ``"<subject> <relation with underscores replaced by spaces> <object>."``.
    Pure: equal inputs give byte-equal sentences.
    """
    if not subject_name or not relation or not object:
        raise InvalidArgumentError("render_fact requires non-empty subject, relation, object")
    if templates is None:
        templates = _default_templates()
    pattern = templates.get(relation)
    if pattern is not None:
        sentence = pattern.format(subject=subject_name, object=object)
    else:
        sentence = f"{subject_name} {relation.replace('_', ' ')} {object}."
    return FactSentence(relation=relation, object=object, sentence=sentence)


_TEMPLATE_CACHE: dict[str, str] | None = None


def _default_templates() -> dict[str, str]:
    global _TEMPLATE_CACHE
    if _TEMPLATE_CACHE is None:
        _TEMPLATE_CACHE = load_templates()
    return _TEMPLATE_CACHE


def ingest_triplets(
    records: Iterable[Triplet],
    split_name: str,
    *,
    aliases: Mapping[str, Iterable[str]] | None = None,
    templates: Mapping[str, str] | None = None,
) -> tuple[KnowledgeBase, IngestionReport]:
    """Build a KnowledgeBase from a triplet stream.

    One Entity per distinct subject_id, facts rendered in input order,
    duplicate (subject_id, relation, object) triplets dropped. Record-level
    problems are collected into the report instead of aborting the stream;
    an entirely unusable stream raises DataError.
    """
    if split_name not in KB_SPLITS:
        raise InvalidArgumentError(f"unknown split {split_name!r}; expected one of {KB_SPLITS}")
    if templates is None:
        templates = _default_templates()

    report = IngestionReport()
    names: dict[str, str] = {}
    facts: dict[str, list[FactSentence]] = {}
    seen: set[tuple[str, str, str]] = set()

    for i, rec in enumerate(records):
        report.records_total += 1
        location = f"record {i + 1}"
        problem = _triplet_problem(rec)
        if problem:
            report.skipped.append(SkippedRecord(location, problem))
            continue
        key = (rec.subject_id, rec.relation, rec.object)
        if key in seen:
            report.duplicates += 1
            continue
        seen.add(key)
        known = names.get(rec.subject_id)
        if known is None:
            names[rec.subject_id] = rec.subject_name
            facts[rec.subject_id] = []
        elif known != rec.subject_name:
            report.warnings.append(
                f"{location}: subject {rec.subject_id!r} renamed {rec.subject_name!r}"
                f" vs {known!r}; keeping first"
            )
        facts[rec.subject_id].append(
            render_fact(names[rec.subject_id], rec.relation, rec.object, templates)
        )
        report.records_used += 1

    if not names:
        raise DataError("triplet stream produced no usable entities")

    alias_table = {k: _clean_aliases(v) for k, v in (aliases or {}).items()}
    for entity_id in alias_table:
        if entity_id not in names:
            report.warnings.append(f"alias table references unknown entity {entity_id!r}")

    kb = KnowledgeBase(split_name=split_name)
    for entity_id, name in names.items():
        kb.entities[entity_id] = Entity(
            id=entity_id,
            name=name,
            aliases=alias_table.get(entity_id, ()),
            facts=tuple(facts[entity_id]),
        )
    return kb, report


def _triplet_problem(rec: Triplet) -> str | None:
    for field_name in ("subject_id", "subject_name", "relation", "object"):
        value = getattr(rec, field_name, None)
        if not isinstance(value, str) or not value.strip():
            return f"missing or empty {field_name}"
    return None


def _clean_aliases(values: Iterable[str]) -> tuple[str, ...]:
    out: list[str] = []
    for v in values:
        if isinstance(v, str) and v.strip() and v not in out:
            out.append(v)
    return tuple(out)


def knowledge_for(kb: KnowledgeBase, entity_id: str) -> tuple[FactSentence, ...]:
    """All rendered facts of one entity, in ingestion order."""
    return kb.entity(entity_id).facts


def read_triplets_jsonl(path: str | Path) -> Iterator[tuple[str, Triplet | None, str | None]]:
    """Yield (location, triplet, problem) rows from a triplets JSONL file.

    Exactly one of triplet/problem is set per row, so callers can route
    malformed lines into an ingestion report.
    """
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"triplets file not found: {p}")
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            location = f"{p.name}:{lineno}"
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                yield location, None, f"invalid JSON: {exc.msg}"
                continue
            if not isinstance(obj, dict):
                yield location, None, "record is not an object"
                continue
            yield location, Triplet(
                subject_id=_as_str(obj.get("subject_id")),
                subject_name=_as_str(obj.get("subject_name")),
                relation=_as_str(obj.get("relation")),
                object=_as_str(obj.get("object")),
            ), None


def _as_str(value: object) -> str:
    return value if isinstance(value, str) else ""


def load_aliases_jsonl(path: str | Path) -> dict[str, tuple[str, ...]]:
    """Load an alias sidecar: one {"id": ..., "aliases": [...]} object per line."""
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"alias file not found: {p}")
    table: dict[str, tuple[str, ...]] = {}
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{p.name}:{lineno}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict) or not isinstance(obj.get("id"), str):
                raise DataError(f"{p.name}:{lineno}: alias record needs a string 'id'")
            aliases = obj.get("aliases", [])
            if not isinstance(aliases, list):
                raise DataError(f"{p.name}:{lineno}: 'aliases' must be a list")
            merged = list(table.get(obj["id"], ())) + aliases
            table[obj["id"]] = _clean_aliases(merged)
    return table


def ingest_jsonl(
    triplets_path: str | Path,
    split_name: str,
    *,
    alias_path: str | Path | None = None,
    template_path: str | Path | None = None,
) -> tuple[KnowledgeBase, IngestionReport]:
    """File-level ingestion: triplets JSONL plus optional alias/template files."""
    templates = load_templates(template_path)
    aliases = load_aliases_jsonl(alias_path) if alias_path is not None else None

    parse_skips: list[SkippedRecord] = []
    parsed_total = 0

    def _stream() -> Iterator[Triplet]:
        nonlocal parsed_total
        for location, trip, problem in read_triplets_jsonl(triplets_path):
            parsed_total += 1
            if problem is not None:
                parse_skips.append(SkippedRecord(location, problem))
                continue
            yield trip

    kb, report = ingest_triplets(_stream(), split_name, aliases=aliases, templates=templates)
    report.records_total = parsed_total
    report.skipped = parse_skips + report.skipped
    return kb, report


def kb_to_jsonl_lines(kb: KnowledgeBase) -> Iterator[str]:
    """Canonical one-entity-per-line serialization; key order is fixed."""
    for entity in kb.entities.values():
        yield json.dumps(
            {
                "id": entity.id,
                "name": entity.name,
                "aliases": list(entity.aliases),
                "facts": [
                    {"relation": f.relation, "object": f.object, "sentence": f.sentence}
                    for f in entity.facts
                ],
            },
            ensure_ascii=False,
            separators=(",", ":"),
        )


def save_kb_jsonl(kb: KnowledgeBase, path: str | Path) -> None:
    Path(path).write_text("".join(line + "\n" for line in kb_to_jsonl_lines(kb)), "utf-8")


def load_kb_jsonl(path: str | Path, split_name: str) -> KnowledgeBase:
    """Load a serialized KB; stored sentences are kept verbatim."""
    if split_name not in KB_SPLITS:
        raise InvalidArgumentError(f"unknown split {split_name!r}; expected one of {KB_SPLITS}")
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"knowledge base file not found: {p}")
    kb = KnowledgeBase(split_name=split_name)
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{p.name}:{lineno}: invalid JSON: {exc.msg}") from exc
            try:
                entity = Entity(
                    id=obj["id"],
                    name=obj["name"],
                    aliases=_clean_aliases(obj.get("aliases", [])),
                    facts=tuple(
                        FactSentence(f["relation"], f["object"], f["sentence"])
                        for f in obj.get("facts", [])
                    ),
                )
            except (KeyError, TypeError) as exc:
                raise DataError(f"{p.name}:{lineno}: malformed entity record ({exc})") from exc
            if not entity.id or not entity.name.strip():
                raise DataError(f"{p.name}:{lineno}: entity needs non-empty id and name")
            if entity.id in kb.entities:
                raise DataError(f"{p.name}:{lineno}: duplicate entity id {entity.id!r}")
            kb.entities[entity.id] = entity
    if not kb.entities:
        raise DataError(f"{p.name}: no entities")
    return kb


def kb_content_hash(kb: KnowledgeBase) -> str:
    """SHA-256 over the canonical serialization; used to pin index caches."""
    h = hashlib.sha256()
    for line in kb_to_jsonl_lines(kb):
        h.update(line.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()
