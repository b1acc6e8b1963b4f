"""OCR token types, fixture and HTTP gateways, and reading-order assembly.

The engine never runs OCR itself: tokens come either from a recorded fixture
file or from a sidecar service speaking the /ocr contract.
"""

from __future__ import annotations

import base64
import json
import math
import statistics
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import httpx

from .errors import DataError, InvalidArgumentError, NotFoundError, ProtocolError, TransportError

DEFAULT_MIN_CONFIDENCE = 0.3


@dataclass(frozen=True)
class TextToken:
    """One recognized word with its axis-aligned box and confidence."""

    text: str
    bbox: tuple[float, float, float, float]
    confidence: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if not self.text:
            raise InvalidArgumentError("token text must be non-empty")
        if not (x1 < x2 and y1 < y2):
            raise InvalidArgumentError(f"degenerate bbox: {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidArgumentError(f"confidence outside [0, 1]: {self.confidence}")


@dataclass(frozen=True)
class OcrResult:
    image_id: str
    tokens: tuple[TextToken, ...]
    backend_tag: str


def parse_token(obj: Mapping) -> TextToken:
    """Build a TextToken from one {"text", "bbox", "conf"} mapping."""
    try:
        bbox = obj["bbox"]
        return TextToken(
            text=obj["text"],
            bbox=(float(bbox[0]), float(bbox[1]), float(bbox[2]), float(bbox[3])),
            confidence=float(obj["conf"]),
        )
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise DataError(f"malformed OCR token {obj!r}: {exc}") from exc


def filter_tokens(tokens: Iterable[TextToken], min_confidence: float) -> tuple[TextToken, ...]:
    return tuple(t for t in tokens if t.confidence >= min_confidence)


def concat_tokens(tokens: Sequence[TextToken]) -> str:
    """Assemble tokens into one reading-order string.

    Tokens are sorted by (line band, left x, top y, text) with the band
    computed from the y-center quantized to half the median token height,
    then joined with single spaces. Permutation-invariant by construction.
    """
    if not tokens:
        return ""
    heights = [t.bbox[3] - t.bbox[1] for t in tokens]
    band_height = statistics.median(heights) / 2.0
    keyed = []
    for t in tokens:
        y_center = (t.bbox[1] + t.bbox[3]) / 2.0
        band = math.floor(y_center / band_height)
        keyed.append((band, t.bbox[0], t.bbox[1], t.text))
    keyed.sort()
    return " ".join(k[3] for k in keyed)


def visual_text(result: OcrResult, min_confidence: float = DEFAULT_MIN_CONFIDENCE) -> str:
    """Reading-order text of the confident tokens; may be empty."""
    return concat_tokens(filter_tokens(result.tokens, min_confidence))


def load_ocr_fixtures(path: str | Path) -> dict[str, OcrResult]:
    """Load recorded OCR outputs, one {"image", "tokens", ...} object per line."""
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"OCR fixture file not found: {p}")
    fixtures: dict[str, OcrResult] = {}
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{p.name}:{lineno}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict) or not isinstance(obj.get("image"), str):
                raise DataError(f"{p.name}:{lineno}: fixture record needs a string 'image'")
            image_id = obj["image"]
            if image_id in fixtures:
                raise DataError(f"{p.name}:{lineno}: duplicate fixture for image {image_id!r}")
            try:
                tokens = tuple(parse_token(t) for t in obj.get("tokens", []))
            except (DataError, InvalidArgumentError) as exc:
                raise DataError(f"{p.name}:{lineno}: {exc}") from exc
            fixtures[image_id] = OcrResult(
                image_id=image_id,
                tokens=tokens,
                backend_tag=str(obj.get("backend", "fixture")),
            )
    return fixtures


class FixtureOcrGateway:
    """Replays recorded OCR results keyed by image id."""

    def __init__(self, fixtures: Mapping[str, OcrResult]):
        self._fixtures = dict(fixtures)

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureOcrGateway":
        return cls(load_ocr_fixtures(path))

    def recognize(self, image_ref: str) -> OcrResult:
        result = self._fixtures.get(image_ref)
        if result is None:
            raise NotFoundError(f"no OCR fixture for image {image_ref!r}")
        return result


class HttpOcrGateway:
    """Client for a sidecar exposing POST /ocr.

    Sends the image as base64, retries transient failures with exponential
    backoff, and caps in-flight requests with a semaphore so batch callers
    cannot stampede the sidecar.
    """

    def __init__(
        self,
        base_url: str,
        *,
        backend: str | None = None,
        timeout: float = 30.0,
        max_retries: int = 2,
        backoff_s: float = 0.2,
        max_inflight: int = 4,
        client: httpx.Client | None = None,
    ):
        self._base_url = base_url.rstrip("/")
        self._backend = backend
        self._max_retries = max_retries
        self._backoff_s = backoff_s
        self._semaphore = threading.Semaphore(max_inflight)
        self._client = client or httpx.Client(timeout=timeout)

    def recognize(self, image_ref: str) -> OcrResult:
        path = Path(image_ref)
        if not path.exists():
            raise NotFoundError(f"image file not found: {image_ref}")
        payload: dict = {"image_b64": base64.b64encode(path.read_bytes()).decode("ascii")}
        if self._backend is not None:
            payload["backend"] = self._backend
        body = self._post_with_retries(payload)
        try:
            tokens = tuple(parse_token(t) for t in body["tokens"])
            backend_tag = str(body.get("backend", "ocr-http"))
        except (KeyError, TypeError, DataError, InvalidArgumentError) as exc:
            raise ProtocolError(f"sidecar returned a malformed OCR body: {exc}") from exc
        return OcrResult(image_id=image_ref, tokens=tokens, backend_tag=backend_tag)

    def _post_with_retries(self, payload: dict) -> dict:
        url = f"{self._base_url}/ocr"
        attempts = 0
        last_status: int | None = None
        while True:
            attempts += 1
            try:
                with self._semaphore:
                    response = self._client.post(url, json=payload)
            except httpx.HTTPError as exc:
                if attempts <= self._max_retries:
                    time.sleep(self._backoff_s * (2 ** (attempts - 1)))
                    continue
                raise TransportError(
                    f"OCR sidecar unreachable at {url}: {exc}", attempts=attempts
                ) from exc
            last_status = response.status_code
            if response.status_code >= 500:
                if attempts <= self._max_retries:
                    time.sleep(self._backoff_s * (2 ** (attempts - 1)))
                    continue
                raise TransportError(
                    f"OCR sidecar failed with HTTP {last_status}",
                    attempts=attempts,
                    last_status=last_status,
                )
            if response.status_code >= 400:
                raise ProtocolError(
                    f"OCR sidecar rejected the request: HTTP {last_status} {response.text[:200]}"
                )
            try:
                return response.json()
            except ValueError as exc:
                raise ProtocolError("OCR sidecar returned non-JSON body") from exc
