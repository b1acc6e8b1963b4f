"""Knowledge-augmented question answering with supporting-fact attribution.

Builds the QA prompt in one of four ablation variants, queries the backend,
and splits the completion into an answer and an optional supporting fact.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import EmptyOutputError, InvalidArgumentError
from .kb import FactSentence, KnowledgeBase, knowledge_for
from .linking import IMAGE_PLACEHOLDER, LinkResult
from .lmm import GenerationRequest, LmmBackend

PROMPT_VARIANTS = ("no_knowledge", "ocr_only", "entity_name_only", "knowledge_facts")

QA_MAX_NEW_TOKENS = 128
KNOWLEDGE_WORD_BUDGET = 512
TRUNCATION_MARKER = "[...]"
SUPPORT_INSTRUCTION = "Answer the question and then state the supporting fact."

_MARKER_RE = re.compile(r"supporting\s+fact:", re.IGNORECASE)


@dataclass(frozen=True)
class QaRequest:
    image_ref: str
    question: str
    variant: str
    knowledge: tuple[FactSentence, ...] = ()
    entity_name: str | None = None
    ocr_text: str | None = None

    def __post_init__(self):
        if not self.question.strip():
            raise InvalidArgumentError("question must be non-empty")
        if self.variant not in PROMPT_VARIANTS:
            raise InvalidArgumentError(
                f"unknown variant {self.variant!r}; expected one of {PROMPT_VARIANTS}"
            )
        if self.variant == "knowledge_facts" and not self.knowledge:
            raise InvalidArgumentError("variant knowledge_facts requires non-empty knowledge")
        if self.variant == "entity_name_only" and not self.entity_name:
            raise InvalidArgumentError("variant entity_name_only requires entity_name")
        if self.variant == "ocr_only" and self.ocr_text is None:
            raise InvalidArgumentError("variant ocr_only requires ocr_text")


@dataclass(frozen=True)
class QaOutput:
    answer: str
    supporting_fact: str | None
    raw_completion: str


def join_knowledge(
    knowledge: tuple[FactSentence, ...] | list[FactSentence],
    word_budget: int = KNOWLEDGE_WORD_BUDGET,
) -> str:
    """Join fact sentences with single spaces up to a word budget.

    Whole sentences are kept in stored order; once the budget would be
    exceeded the rest is dropped and the marker appended. A first sentence
    longer than the budget is cut at the word boundary instead.
    """
    if word_budget < 1:
        raise InvalidArgumentError("word_budget must be positive")
    kept: list[str] = []
    used = 0
    truncated = False
    for fact in knowledge:
        words = fact.sentence.split()
        if used + len(words) > word_budget:
            if not kept:
                kept.append(" ".join(words[:word_budget]))
            truncated = True
            break
        kept.append(fact.sentence)
        used += len(words)
    joined = " ".join(kept)
    if truncated:
        joined = f"{joined} {TRUNCATION_MARKER}"
    return joined


def build_qa_prompt(
    request: QaRequest,
    *,
    word_budget: int = KNOWLEDGE_WORD_BUDGET,
    include_support_instruction: bool = True,
) -> str:
    """Render the QA prompt for the request's variant.

    The supporting-fact instruction belongs to the knowledge_facts variant
    and can be toggled off to ablate supporting-fact generation.
    """
    lines = [IMAGE_PLACEHOLDER, f"USER: {request.question}"]
    if request.variant == "ocr_only":
        lines.append(f"The image contains the text: {request.ocr_text}")
    elif request.variant == "entity_name_only":
        lines.append(f"The visual text refers to: {request.entity_name}")
    elif request.variant == "knowledge_facts":
        lines.append(f"Use the following knowledge: {join_knowledge(request.knowledge, word_budget)}")
        if include_support_instruction:
            lines.append(SUPPORT_INSTRUCTION)
    lines.append("ASSISTANT:")
    return "\n".join(lines)


def parse_answer(raw: str) -> QaOutput:
    """Split a completion at the first "Supporting fact:" marker.

    The marker match is fold-insensitive (any case, any whitespace run). A
    marker with nothing before it does not split: the whole completion stays
    the answer, keeping the answer non-empty for non-empty input.
    """
    if not raw.strip():
        raise EmptyOutputError("completion is empty")
    m = _MARKER_RE.search(raw)
    if m and raw[: m.start()].strip():
        return QaOutput(
            answer=raw[: m.start()].strip(),
            supporting_fact=raw[m.end() :].strip(),
            raw_completion=raw,
        )
    return QaOutput(answer=raw.strip(), supporting_fact=None, raw_completion=raw)


def answer(
    image_ref: str,
    question: str,
    link: LinkResult,
    kb: KnowledgeBase,
    variant: str,
    backend: LmmBackend,
    *,
    ocr_text: str | None = None,
    entity_override: str | None = None,
    max_new_tokens: int = QA_MAX_NEW_TOKENS,
    word_budget: int = KNOWLEDGE_WORD_BUDGET,
    include_support_instruction: bool = True,
) -> QaOutput:
    """Answer one question given a link result.

    entity_override substitutes the linked entity (oracle evaluation); the
    override must resolve in the knowledge base for variants that read it.
    """
    entity_id = entity_override if entity_override is not None else link.entity_id
    knowledge: tuple[FactSentence, ...] = ()
    entity_name: str | None = None
    if variant == "knowledge_facts":
        knowledge = knowledge_for(kb, entity_id)
    elif variant == "entity_name_only":
        entity_name = kb.entity(entity_id).name
    request = QaRequest(
        image_ref=image_ref,
        question=question,
        variant=variant,
        knowledge=knowledge,
        entity_name=entity_name,
        ocr_text=ocr_text,
    )
    prompt = build_qa_prompt(
        request,
        word_budget=word_budget,
        include_support_instruction=include_support_instruction,
    )
    result = backend.generate(
        GenerationRequest(
            prompt_text=prompt, image_ref=image_ref, max_new_tokens=max_new_tokens
        )
    )
    return parse_answer(result.text)
