"""Visual-text entity linking: prompt construction, generation, resolution.

The stage retrieves candidates by normalized edit distance, shows them to
the multimodal backend inside a fixed prompt, and maps the completion back
onto a candidate entity. Images without usable text still produce a link,
tagged no_text_fallback, over a caller-supplied fallback candidate set.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import EngineError, InvalidArgumentError
from .fuzzy import CandidateSet, EntityIndex, ScoredCandidate, fold, ned
from .lmm import GenerationRequest, LmmBackend
from .ocr import DEFAULT_MIN_CONFIDENCE, OcrResult, visual_text

RESOLUTIONS = ("lmm_exact", "lmm_fuzzy", "ned_fallback", "no_text_fallback")

IMAGE_PLACEHOLDER = "<image>"
FUZZY_RESOLVE_THRESHOLD = 0.5
LINK_MAX_NEW_TOKENS = 32

_LINK_TEMPLATE = (
    IMAGE_PLACEHOLDER
    + "\nUSER:Given an image. The task is to link the visual text {text}"
    + " to one of the following entities: {entities}\nASSISTANT:"
)


@dataclass(frozen=True)
class LinkResult:
    image_id: str
    entity_id: str
    resolution: str
    candidates: CandidateSet
    raw_completion: str


@dataclass(frozen=True)
class LinkFailure:
    image_id: str
    error_kind: str
    message: str


def build_link_prompt(ocr_text: str, candidate_names: Sequence[str]) -> str:
    """Render the linking prompt; candidates joined by ", " in given order."""
    if not candidate_names:
        raise InvalidArgumentError("candidate_names must be non-empty")
    return _LINK_TEMPLATE.format(text=ocr_text, entities=", ".join(candidate_names))


def resolve_output(raw: str, candidates: CandidateSet) -> tuple[str, str]:
    """Map a raw completion onto a candidate entity.

    Fold-equal name match wins (lmm_exact); otherwise the candidate nearest
    to the completion by normalized edit distance wins when within 0.5
    (lmm_fuzzy); otherwise the retrieval top-1 stands (ned_fallback). Total
    over non-empty candidate sets; ties keep prompt order.
    """
    if not candidates.items:
        raise InvalidArgumentError("resolve_output requires a non-empty candidate set")
    folded_raw = fold(raw)
    for c in candidates.items:
        if fold(c.name) == folded_raw:
            return c.entity_id, "lmm_exact"
    best = candidates.items[0]
    best_d = ned(raw, best.name)
    for c in candidates.items[1:]:
        d = ned(raw, c.name)
        if d < best_d:
            best, best_d = c, d
    if best_d <= FUZZY_RESOLVE_THRESHOLD:
        return best.entity_id, "lmm_fuzzy"
    return candidates.items[0].entity_id, "ned_fallback"


def fallback_candidates(
    index: EntityIndex,
    k: int,
    *,
    entity_frequencies: Mapping[str, int] | None = None,
) -> CandidateSet:
    """Candidate set for images without visual text.

    Entities ordered by descending frequency (ties by entity id) when
    frequencies are known, else by knowledge-base order; every candidate
    carries the uninformative score 1.0.
    """
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    ids = list(index.entity_ids_in_order())
    if entity_frequencies:
        ids.sort(key=lambda eid: (-entity_frequencies.get(eid, 0), eid))
    chosen = ids[:k]
    items = tuple(
        ScoredCandidate(
            entity_id=eid, name=index.name_of(eid), matched_surface=index.name_of(eid), ned=1.0
        )
        for eid in chosen
    )
    return CandidateSet(query_text="", k=k, items=items)


def link(
    image_ref: str,
    ocr: OcrResult,
    index: EntityIndex,
    k: int,
    backend: LmmBackend,
    *,
    min_token_confidence: float = DEFAULT_MIN_CONFIDENCE,
    no_text_candidates: CandidateSet | None = None,
    max_new_tokens: int = LINK_MAX_NEW_TOKENS,
) -> LinkResult:
    """Link one image's visual text to an entity.

    With empty OCR text the backend still sees the image plus fallback
    candidates, and the result is tagged no_text_fallback regardless of how
    the completion resolves.
    """
    text = visual_text(ocr, min_token_confidence)
    no_text = not fold(text)
    if no_text:
        candidates = no_text_candidates or fallback_candidates(index, k)
    else:
        candidates = index.candidates(text, k)
    prompt = build_link_prompt(text, candidates.names())
    result = backend.generate(
        GenerationRequest(
            prompt_text=prompt,
            image_ref=image_ref,
            max_new_tokens=max_new_tokens,
            stop_sequences=("\n",),
        )
    )
    entity_id, resolution = resolve_output(result.text, candidates)
    if no_text:
        resolution = "no_text_fallback"
    return LinkResult(
        image_id=ocr.image_id,
        entity_id=entity_id,
        resolution=resolution,
        candidates=candidates,
        raw_completion=result.text,
    )


def link_split(
    images: Sequence[tuple[str, OcrResult]],
    index: EntityIndex,
    k: int,
    backend: LmmBackend,
    *,
    min_token_confidence: float = DEFAULT_MIN_CONFIDENCE,
    no_text_candidates: CandidateSet | None = None,
    max_workers: int = 4,
) -> tuple[list[LinkResult], list[LinkFailure]]:
    """Link every (image_ref, OcrResult) pair; per-item errors are recorded
    and the run continues. Output order follows input order."""

    def _one(item: tuple[str, OcrResult]) -> LinkResult | LinkFailure:
        image_ref, ocr = item
        try:
            return link(
                image_ref,
                ocr,
                index,
                k,
                backend,
                min_token_confidence=min_token_confidence,
                no_text_candidates=no_text_candidates,
            )
        except EngineError as exc:
            return LinkFailure(
                image_id=ocr.image_id, error_kind=type(exc).__name__, message=str(exc)
            )

    results: list[LinkResult] = []
    failures: list[LinkFailure] = []
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for outcome in pool.map(_one, images):
            if isinstance(outcome, LinkFailure):
                failures.append(outcome)
            else:
                results.append(outcome)
    return results, failures


def link_result_to_dict(result: LinkResult) -> dict:
    return {
        "image": result.image_id,
        "entity_id": result.entity_id,
        "resolution": result.resolution,
        "raw": result.raw_completion,
        "candidates": [{"id": c.entity_id, "ned": c.ned} for c in result.candidates.items],
    }


def write_link_results(results: Sequence[LinkResult], path: str | Path) -> None:
    lines = [json.dumps(link_result_to_dict(r), ensure_ascii=False) for r in results]
    Path(path).write_text("".join(line + "\n" for line in lines), "utf-8")
