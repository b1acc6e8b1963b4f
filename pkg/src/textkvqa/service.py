"""HTTP service for the interactive query path.

Wraps a loaded knowledge base, entity index, OCR gateway, and generation
backend behind /healthz, /v1/link, /v1/ask, and /v1/entities/{id}. Batch
operations (ingest, index, eval) stay in the CLI; this service answers
single-image queries.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .errors import (
    EmptyOutputError,
    EngineError,
    InvalidArgumentError,
    NoVisualTextError,
    NotFoundError,
    ProtocolError,
    TransportError,
)
from .fuzzy import EntityIndex, build_index
from .kb import KnowledgeBase, load_kb_jsonl
from .linking import link
from .lmm import HttpLmm, HttpLmmConfig, LmmBackend, MockLmm, MockPolicy
from .ocr import DEFAULT_MIN_CONFIDENCE, FixtureOcrGateway, HttpOcrGateway, visual_text
from .qa import PROMPT_VARIANTS, answer


class ServiceConfig(BaseModel):
    kb_path: str
    split_name: str = "business"
    ocr_fixtures_path: str | None = None
    ocr_base_url: str | None = None
    backend: str = "mock"
    mock_policy: str = "echo_first_candidate"
    mock_script_path: str | None = None
    k: int = Field(default=5, ge=1)
    variant: str = "knowledge_facts"
    min_token_confidence: float = DEFAULT_MIN_CONFIDENCE


class HealthResponse(BaseModel):
    status: str
    version: str
    split: str
    entities: int
    backend: str


class CandidateModel(BaseModel):
    id: str
    name: str
    ned: float


class LinkRequest(BaseModel):
    image: str
    k: int | None = Field(default=None, ge=1)


class LinkResponse(BaseModel):
    image: str
    entity_id: str
    entity_name: str
    resolution: str
    raw: str
    candidates: list[CandidateModel]


class AskRequest(BaseModel):
    image: str
    question: str
    variant: str | None = None
    k: int | None = Field(default=None, ge=1)


class AskResponse(BaseModel):
    image: str
    question: str
    answer: str
    supporting_fact: str | None
    entity_id: str
    entity_name: str
    resolution: str


class FactModel(BaseModel):
    relation: str
    object: str
    sentence: str


class EntityResponse(BaseModel):
    id: str
    name: str
    aliases: list[str]
    facts: list[FactModel]


_STATUS_BY_ERROR: list[tuple[type[EngineError], int]] = [
    (NotFoundError, 404),
    (InvalidArgumentError, 400),
    (NoVisualTextError, 422),
    (TransportError, 502),
    (ProtocolError, 502),
    (EmptyOutputError, 502),
]


def _error_status(exc: EngineError) -> int:
    for etype, status in _STATUS_BY_ERROR:
        if isinstance(exc, etype):
            return status
    return 400


def _make_backend(config: ServiceConfig) -> LmmBackend:
    if config.backend == "http":
        return HttpLmm(HttpLmmConfig.from_env())
    if config.backend != "mock":
        raise InvalidArgumentError(f"unknown backend {config.backend!r}; expected mock or http")
    script = None
    if config.mock_script_path:
        script = json.loads(Path(config.mock_script_path).read_text("utf-8"))
    return MockLmm(MockPolicy(mode=config.mock_policy, script=script))


def _make_ocr_gateway(config: ServiceConfig):
    if config.ocr_fixtures_path:
        return FixtureOcrGateway.from_file(config.ocr_fixtures_path)
    if config.ocr_base_url:
        return HttpOcrGateway(config.ocr_base_url)
    raise InvalidArgumentError("service needs ocr_fixtures_path or ocr_base_url")


def create_app(
    config: ServiceConfig,
    *,
    kb: KnowledgeBase | None = None,
    index: EntityIndex | None = None,
    backend: LmmBackend | None = None,
    ocr_gateway=None,
) -> FastAPI:
    """Build the service; heavyweight state loads once, at creation."""
    if config.variant not in PROMPT_VARIANTS:
        raise InvalidArgumentError(f"unknown variant {config.variant!r}")
    kb = kb or load_kb_jsonl(config.kb_path, config.split_name)
    index = index or build_index(kb)
    backend = backend or _make_backend(config)
    ocr_gateway = ocr_gateway or _make_ocr_gateway(config)

    app = FastAPI(title="textkvqa", version=__version__)

    @app.exception_handler(EngineError)
    async def _engine_error(request: Request, exc: EngineError) -> JSONResponse:
        return JSONResponse(
            status_code=_error_status(exc),
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    def _link_once(image: str, k: int):
        ocr = ocr_gateway.recognize(image)
        return ocr, link(
            image,
            ocr,
            index,
            k,
            backend,
            min_token_confidence=config.min_token_confidence,
        )

    @app.get("/healthz", response_model=HealthResponse)
    def healthz() -> HealthResponse:
        return HealthResponse(
            status="ok",
            version=__version__,
            split=kb.split_name,
            entities=len(kb),
            backend=backend.backend_tag,
        )

    @app.post("/v1/link", response_model=LinkResponse)
    def link_endpoint(request: LinkRequest) -> LinkResponse:
        _, result = _link_once(request.image, request.k or config.k)
        return LinkResponse(
            image=result.image_id,
            entity_id=result.entity_id,
            entity_name=index.name_of(result.entity_id),
            resolution=result.resolution,
            raw=result.raw_completion,
            candidates=[
                CandidateModel(id=c.entity_id, name=c.name, ned=c.ned)
                for c in result.candidates.items
            ],
        )

    @app.post("/v1/ask", response_model=AskResponse)
    def ask_endpoint(request: AskRequest) -> AskResponse:
        variant = request.variant or config.variant
        if variant not in PROMPT_VARIANTS:
            raise InvalidArgumentError(f"unknown variant {variant!r}")
        ocr, result = _link_once(request.image, request.k or config.k)
        qa = answer(
            request.image,
            request.question,
            result,
            kb,
            variant,
            backend,
            ocr_text=visual_text(ocr, config.min_token_confidence),
        )
        return AskResponse(
            image=request.image,
            question=request.question,
            answer=qa.answer,
            supporting_fact=qa.supporting_fact,
            entity_id=result.entity_id,
            entity_name=index.name_of(result.entity_id),
            resolution=result.resolution,
        )

    @app.get("/v1/entities/{entity_id}", response_model=EntityResponse)
    def entity_endpoint(entity_id: str) -> EntityResponse:
        entity = kb.entity(entity_id)
        return EntityResponse(
            id=entity.id,
            name=entity.name,
            aliases=list(entity.aliases),
            facts=[
                FactModel(relation=f.relation, object=f.object, sentence=f.sentence)
                for f in entity.facts
            ],
        )

    return app


ENV_PREFIX = "TEXTKVQA_"


def app_factory() -> FastAPI:
    """Environment-driven factory for `uvicorn --factory textkvqa.service:app_factory`.

    Variables: TEXTKVQA_KB (required), TEXTKVQA_SPLIT, TEXTKVQA_OCR_FIXTURES,
    TEXTKVQA_OCR_URL, TEXTKVQA_BACKEND, TEXTKVQA_MOCK_POLICY,
    TEXTKVQA_MOCK_SCRIPT, TEXTKVQA_K, TEXTKVQA_VARIANT.
    """
    env = os.environ
    kb_path = env.get(f"{ENV_PREFIX}KB")
    if not kb_path:
        raise InvalidArgumentError(f"{ENV_PREFIX}KB is not set")
    config = ServiceConfig(
        kb_path=kb_path,
        split_name=env.get(f"{ENV_PREFIX}SPLIT", "business"),
        ocr_fixtures_path=env.get(f"{ENV_PREFIX}OCR_FIXTURES"),
        ocr_base_url=env.get(f"{ENV_PREFIX}OCR_URL"),
        backend=env.get(f"{ENV_PREFIX}BACKEND", "mock"),
        mock_policy=env.get(f"{ENV_PREFIX}MOCK_POLICY", "echo_first_candidate"),
        mock_script_path=env.get(f"{ENV_PREFIX}MOCK_SCRIPT"),
        k=int(env.get(f"{ENV_PREFIX}K", "5")),
        variant=env.get(f"{ENV_PREFIX}VARIANT", "knowledge_facts"),
    )
    return create_app(config)
