"""Scoring and reporting for linking and question answering.

Runs a dataset split through linking (vistel, ned_top1, or oracle) and QA,
then aggregates accuracy, Recall@1, candidate containment, attribution
precision, and per-category accuracies into a schema-stable report.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import DataError, EngineError, InvalidArgumentError, NotFoundError
from .fuzzy import CandidateSet, EntityIndex, fold
from .kb import KnowledgeBase
from .linking import LinkResult, fallback_candidates, link
from .lmm import LmmBackend
from .ocr import DEFAULT_MIN_CONFIDENCE, visual_text
from .qa import KNOWLEDGE_WORD_BUDGET, PROMPT_VARIANTS, QaOutput, answer

SCHEMA_VERSION = 1

CATEGORIES = ("binary", "date", "people", "location", "genre", "open_ended")
CATEGORY_LABELS = {
    "binary": "B",
    "date": "D",
    "people": "P",
    "location": "L",
    "genre": "G",
    "open_ended": "OE",
}
DATASET_SPLITS = ("scene", "book", "movie")
LINKING_MODES = ("vistel", "ned_top1", "oracle")

_ARTICLES = ("a", "an", "the")
_TERMINAL_PUNCT = ".,!?"


@dataclass(frozen=True)
class DatasetRecord:
    question_id: str
    image: str
    question: str
    gold_answer: str
    gold_entity_id: str
    category: str
    split: str
    gold_supporting_fact: str | None = None


def load_dataset_jsonl(path: str | Path) -> list[DatasetRecord]:
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"dataset file not found: {p}")
    records: list[DatasetRecord] = []
    seen_ids: set[str] = set()
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{p.name}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{where}: record is not an object")
            for key in ("question_id", "image", "question", "gold_answer", "gold_entity_id"):
                if not isinstance(obj.get(key), str) or not obj[key]:
                    raise DataError(f"{where}: missing or empty {key!r}")
            if obj.get("category") not in CATEGORIES:
                raise DataError(f"{where}: category must be one of {CATEGORIES}")
            if obj.get("split") not in DATASET_SPLITS:
                raise DataError(f"{where}: split must be one of {DATASET_SPLITS}")
            fact = obj.get("gold_supporting_fact")
            if fact is not None and not isinstance(fact, str):
                raise DataError(f"{where}: gold_supporting_fact must be a string when present")
            if obj["question_id"] in seen_ids:
                raise DataError(f"{where}: duplicate question_id {obj['question_id']!r}")
            seen_ids.add(obj["question_id"])
            records.append(
                DatasetRecord(
                    question_id=obj["question_id"],
                    image=obj["image"],
                    question=obj["question"],
                    gold_answer=obj["gold_answer"],
                    gold_entity_id=obj["gold_entity_id"],
                    category=obj["category"],
                    split=obj["split"],
                    gold_supporting_fact=fact,
                )
            )
    if not records:
        raise DataError(f"{p.name}: no dataset records")
    return records


def normalize_answer(s: str) -> str:
    """Comparison form: lowercase, trim, drop terminal punctuation, strip one
    leading article, collapse whitespace."""
    s = s.lower().strip()
    s = s.rstrip(_TERMINAL_PUNCT)
    words = s.split()
    if words and words[0] in _ARTICLES:
        words = words[1:]
    return " ".join(words)


def score_qa(pred: QaOutput, gold: DatasetRecord) -> int:
    return int(normalize_answer(pred.answer) == normalize_answer(gold.gold_answer))


def recall_at_1(links: Sequence[LinkResult], gold: Sequence[DatasetRecord]) -> float:
    """Fraction of links whose entity equals the gold entity for that image."""
    if not links:
        raise InvalidArgumentError("recall_at_1 is undefined on empty input")
    gold_by_image = {rec.image: rec.gold_entity_id for rec in gold}
    hits = 0
    for item in links:
        if item.image_id not in gold_by_image:
            raise InvalidArgumentError(f"no gold record for image {item.image_id!r}")
        hits += int(item.entity_id == gold_by_image[item.image_id])
    return hits / len(links)


@dataclass(frozen=True)
class EvalConfig:
    variant: str
    linking_mode: str
    k: int = 5
    min_token_confidence: float = DEFAULT_MIN_CONFIDENCE
    word_budget: int = KNOWLEDGE_WORD_BUDGET
    include_support_instruction: bool = True
    max_workers: int = 4

    def __post_init__(self):
        if self.variant not in PROMPT_VARIANTS:
            raise InvalidArgumentError(
                f"unknown variant {self.variant!r}; expected one of {PROMPT_VARIANTS}"
            )
        if self.linking_mode not in LINKING_MODES:
            raise InvalidArgumentError(
                f"unknown linking mode {self.linking_mode!r}; expected one of {LINKING_MODES}"
            )
        if self.k < 1:
            raise InvalidArgumentError(f"k must be >= 1, got {self.k}")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "linking_mode": self.linking_mode,
            "k": self.k,
            "min_token_confidence": self.min_token_confidence,
            "word_budget": self.word_budget,
            "include_support_instruction": self.include_support_instruction,
            "max_workers": self.max_workers,
        }


@dataclass
class EvalItem:
    record: DatasetRecord
    entity_id: str | None = None
    resolution: str | None = None
    candidate_ids: tuple[str, ...] | None = None
    qa: QaOutput | None = None
    score: int | None = None
    error_kind: str | None = None
    error_message: str | None = None

    @property
    def failed(self) -> bool:
        return self.error_kind is not None


@dataclass
class EvalReport:
    split: str
    variant: str
    linking_mode: str
    k: int
    n_items: int
    n_scored: int
    accuracy: float
    recall_at_1: float
    gold_in_candidates_at_k: float
    attribution_precision: float
    per_category: dict[str, float]
    per_category_counts: dict[str, int]
    attribution_counts: dict[str, int]
    failures: int
    failure_details: list[dict] = field(default_factory=list)
    valid: bool = True

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "split": self.split,
            "variant": self.variant,
            "linking_mode": self.linking_mode,
            "k": self.k,
            "n_items": self.n_items,
            "n_scored": self.n_scored,
            "accuracy": self.accuracy,
            "recall_at_1": self.recall_at_1,
            "gold_in_candidates_at_k": self.gold_in_candidates_at_k,
            "attribution_precision": self.attribution_precision,
            "per_category": dict(sorted(self.per_category.items())),
            "per_category_counts": dict(sorted(self.per_category_counts.items())),
            "attribution_counts": dict(sorted(self.attribution_counts.items())),
            "failures": self.failures,
            "failure_details": list(self.failure_details),
            "valid": self.valid,
        }


def evaluate_split(
    records: Sequence[DatasetRecord],
    kb: KnowledgeBase,
    index: EntityIndex,
    ocr_gateway,
    backend: LmmBackend,
    config: EvalConfig,
) -> tuple[EvalReport, list[EvalItem]]:
    """Run one split end to end and aggregate an EvalReport.

    Item-level engine errors are recorded and skipped; a run with more than
    10% failures is marked invalid. Deterministic under mock backends.
    """
    if not records:
        raise DataError("evaluate_split requires a non-empty dataset")
    splits = {rec.split for rec in records}
    if len(splits) != 1:
        raise DataError(f"dataset mixes splits {sorted(splits)}; evaluate one split at a time")

    frequencies: dict[str, int] = {}
    for rec in records:
        frequencies[rec.gold_entity_id] = frequencies.get(rec.gold_entity_id, 0) + 1
    no_text_set = fallback_candidates(index, config.k, entity_frequencies=frequencies)

    def _one(rec: DatasetRecord) -> EvalItem:
        item = EvalItem(record=rec)
        try:
            ocr = ocr_gateway.recognize(rec.image)
            text = visual_text(ocr, config.min_token_confidence)
            if config.linking_mode == "oracle":
                link_result = LinkResult(
                    image_id=rec.image,
                    entity_id=rec.gold_entity_id,
                    resolution="oracle",
                    candidates=CandidateSet(query_text=text, k=config.k, items=()),
                    raw_completion="",
                )
                item.candidate_ids = None
            elif config.linking_mode == "ned_top1":
                if fold(text):
                    cs = index.candidates(text, config.k)
                    resolution = "ned_top1"
                else:
                    cs = no_text_set
                    resolution = "no_text_fallback"
                link_result = LinkResult(
                    image_id=rec.image,
                    entity_id=cs.items[0].entity_id,
                    resolution=resolution,
                    candidates=cs,
                    raw_completion="",
                )
                item.candidate_ids = cs.ids()
            else:
                link_result = link(
                    rec.image,
                    ocr,
                    index,
                    config.k,
                    backend,
                    min_token_confidence=config.min_token_confidence,
                    no_text_candidates=no_text_set,
                )
                item.candidate_ids = link_result.candidates.ids()
            item.entity_id = link_result.entity_id
            item.resolution = link_result.resolution
            item.qa = answer(
                rec.image,
                rec.question,
                link_result,
                kb,
                config.variant,
                backend,
                ocr_text=text,
                word_budget=config.word_budget,
                include_support_instruction=config.include_support_instruction,
            )
            item.score = score_qa(item.qa, rec)
        except EngineError as exc:
            item.error_kind = type(exc).__name__
            item.error_message = str(exc)
        return item

    with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
        items = list(pool.map(_one, records))

    return _aggregate(items, kb, config), items


def _aggregate(items: list[EvalItem], kb: KnowledgeBase, config: EvalConfig) -> EvalReport:
    scored = [it for it in items if not it.failed]
    failures = [it for it in items if it.failed]
    n = len(items)

    def _mean(values: list[float]) -> float:
        return sum(values) / len(values) if values else 0.0

    accuracy = _mean([float(it.score) for it in scored])
    recall = _mean([float(it.entity_id == it.record.gold_entity_id) for it in scored])
    contained = _mean(
        [
            1.0
            if it.candidate_ids is None
            else float(it.record.gold_entity_id in it.candidate_ids)
            for it in scored
        ]
    )

    attributable = [
        it
        for it in scored
        if it.qa is not None
        and it.qa.supporting_fact is not None
        and it.entity_id == it.record.gold_entity_id
    ]
    matched = 0
    for it in attributable:
        entity = kb.entities.get(it.entity_id)
        sentences = {fold(f.sentence) for f in entity.facts} if entity else set()
        matched += int(fold(it.qa.supporting_fact) in sentences)
    attribution = matched / len(attributable) if attributable else 0.0

    per_category: dict[str, float] = {}
    per_counts: dict[str, int] = {}
    for category in CATEGORIES:
        in_cat = [it for it in scored if it.record.category == category]
        if in_cat:
            per_category[category] = _mean([float(it.score) for it in in_cat])
            per_counts[category] = len(in_cat)

    return EvalReport(
        split=items[0].record.split,
        variant=config.variant,
        linking_mode=config.linking_mode,
        k=config.k,
        n_items=n,
        n_scored=len(scored),
        accuracy=accuracy,
        recall_at_1=recall,
        gold_in_candidates_at_k=contained,
        attribution_precision=attribution,
        per_category=per_category,
        per_category_counts=per_counts,
        attribution_counts={"matched": matched, "attributable": len(attributable)},
        failures=len(failures),
        failure_details=[
            {
                "question_id": it.record.question_id,
                "error_kind": it.error_kind,
                "message": it.error_message,
            }
            for it in failures
        ],
        valid=(len(failures) <= 0.10 * n),
    )


def items_to_jsonl_lines(items: Sequence[EvalItem], variant: str) -> list[str]:
    """Per-item QA results, one JSON object per scored item."""
    lines = []
    for it in items:
        if it.failed or it.qa is None:
            continue
        lines.append(
            json.dumps(
                {
                    "question_id": it.record.question_id,
                    "answer": it.qa.answer,
                    "supporting_fact": it.qa.supporting_fact,
                    "raw": it.qa.raw_completion,
                    "variant": variant,
                    "entity_id": it.entity_id,
                    "resolution": it.resolution,
                },
                ensure_ascii=False,
            )
        )
    return lines


def emit_report(report: EvalReport, format: str = "json") -> str:
    """Render a report; pure, so equal reports give identical bytes."""
    if format == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if format != "markdown_table":
        raise InvalidArgumentError(f"unknown report format {format!r}")
    present = [c for c in CATEGORIES if c in report.per_category]
    header = (
        ["split", "variant", "linking", "n", "accuracy", "recall@1", "gold@k", "attribution"]
        + [CATEGORY_LABELS[c] for c in present]
        + ["failures"]
    )
    row = (
        [
            report.split,
            report.variant,
            report.linking_mode,
            str(report.n_scored),
            f"{report.accuracy:.4f}",
            f"{report.recall_at_1:.4f}",
            f"{report.gold_in_candidates_at_k:.4f}",
            f"{report.attribution_precision:.4f}",
        ]
        + [f"{report.per_category[c]:.4f}" for c in present]
        + [str(report.failures)]
    )
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join(" --- " for _ in header) + "|",
        "| " + " | ".join(row) + " |",
    ]
    if not report.valid:
        lines.append("")
        lines.append(f"Run invalid: {report.failures} of {report.n_items} items failed.")
    return "\n".join(lines) + "\n"


def make_gold_answer_script(
    records: Sequence[DatasetRecord], kb: KnowledgeBase
) -> dict[str, str]:
    """Question → completion map for the gold_answer mock.

    Each completion carries the gold answer and, when available, a
    supporting fact that fold-matches a KB sentence of the gold entity.
    """
    script: dict[str, str] = {}
    for rec in records:
        fact = rec.gold_supporting_fact
        if fact is None:
            entity = kb.entities.get(rec.gold_entity_id)
            if entity is not None and entity.facts:
                fact = entity.facts[0].sentence
        if fact:
            script[rec.question] = f"{rec.gold_answer} Supporting fact: {fact}"
        else:
            script[rec.question] = rec.gold_answer
    return script
