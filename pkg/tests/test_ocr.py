"""OCR tokens, reading order, fixtures, and the sidecar client."""

import base64
import json

import httpx
import pytest
from hypothesis import given, strategies as st

from textkvqa.errors import (
    DataError,
    InvalidArgumentError,
    NotFoundError,
    ProtocolError,
    TransportError,
)
from textkvqa.ocr import (
    FixtureOcrGateway,
    HttpOcrGateway,
    OcrResult,
    TextToken,
    concat_tokens,
    filter_tokens,
    load_ocr_fixtures,
    parse_token,
    visual_text,
)


def _token(text, x1, y1, x2, y2, conf=0.9):
    return TextToken(text=text, bbox=(x1, y1, x2, y2), confidence=conf)


class TestTextToken:
    def test_validates_geometry_confidence_text(self):
        with pytest.raises(InvalidArgumentError):
            _token("", 0, 0, 1, 1)
        with pytest.raises(InvalidArgumentError):
            _token("x", 5, 0, 1, 1)
        with pytest.raises(InvalidArgumentError):
            _token("x", 0, 5, 1, 1)
        with pytest.raises(InvalidArgumentError):
            _token("x", 0, 0, 1, 1, conf=1.5)

    def test_parse_token_reads_conf_key(self):
        token = parse_token({"text": "Hi", "bbox": [1, 2, 3, 4], "conf": 0.5})
        assert token == _token("Hi", 1.0, 2.0, 3.0, 4.0, 0.5)

    def test_parse_token_malformed(self):
        for obj in [{}, {"text": "x"}, {"text": "x", "bbox": [1, 2], "conf": 0.5}]:
            with pytest.raises(DataError):
                parse_token(obj)


class TestConcatTokens:
    def test_single_line_left_to_right(self):
        tokens = [_token("Pizza", 70, 10, 100, 22), _token("Domino's", 10, 10, 60, 22)]
        assert concat_tokens(tokens) == "Domino's Pizza"

    def test_stacked_lines_top_to_bottom(self):
        tokens = [_token("COFFEE", 10, 40, 60, 52), _token("HOT", 12, 10, 40, 22)]
        assert concat_tokens(tokens) == "HOT COFFEE"

    def test_empty(self):
        assert concat_tokens([]) == ""

    @given(st.permutations(list(range(6))))
    def test_permutation_invariant(self, order):
        base = [
            _token("a", 10, 10, 30, 20),
            _token("b", 35, 11, 50, 21),
            _token("c", 10, 40, 30, 50),
            _token("d", 35, 40, 50, 52),
            _token("e", 60, 9, 80, 19),
            _token("f", 60, 41, 82, 51),
        ]
        shuffled = [base[i] for i in order]
        assert concat_tokens(shuffled) == concat_tokens(base)


class TestFilterAndVisualText:
    def test_confidence_floor(self):
        tokens = (_token("keep", 0, 0, 5, 5, 0.31), _token("drop", 6, 0, 9, 5, 0.29))
        assert [t.text for t in filter_tokens(tokens, 0.3)] == ["keep"]

    def test_visual_text_empty_when_all_filtered(self):
        result = OcrResult("img", (_token("x", 0, 0, 4, 4, 0.1),), "fixture")
        assert visual_text(result) == ""

    def test_visual_text_default_threshold(self):
        result = OcrResult("img", (_token("A", 0, 0, 4, 4), _token("B", 6, 0, 9, 4)), "fixture")
        assert visual_text(result) == "A B"


class TestFixtures:
    def test_load_and_replay(self, tmp_path):
        p = tmp_path / "ocr.jsonl"
        p.write_text(
            json.dumps(
                {
                    "image": "img_1",
                    "tokens": [{"text": "Hi", "bbox": [0, 0, 5, 5], "conf": 0.8}],
                    "backend": "recorded",
                }
            )
            + "\n"
            + json.dumps({"image": "img_2", "tokens": []})
            + "\n",
            "utf-8",
        )
        gateway = FixtureOcrGateway.from_file(p)
        result = gateway.recognize("img_1")
        assert result.tokens[0].text == "Hi"
        assert result.backend_tag == "recorded"
        assert gateway.recognize("img_2").tokens == ()

    def test_empty_token_image_is_not_an_error(self):
        gateway = FixtureOcrGateway({"img": OcrResult("img", (), "fixture")})
        assert gateway.recognize("img").tokens == ()

    def test_missing_image(self):
        gateway = FixtureOcrGateway({})
        with pytest.raises(NotFoundError):
            gateway.recognize("img_x")

    def test_duplicate_image_rejected(self, tmp_path):
        p = tmp_path / "ocr.jsonl"
        line = json.dumps({"image": "img", "tokens": []})
        p.write_text(line + "\n" + line + "\n", "utf-8")
        with pytest.raises(DataError):
            load_ocr_fixtures(p)

    def test_bad_token_rejected(self, tmp_path):
        p = tmp_path / "ocr.jsonl"
        p.write_text(
            json.dumps({"image": "img", "tokens": [{"text": "x", "bbox": [0, 0, 1, 1]}]}) + "\n",
            "utf-8",
        )
        with pytest.raises(DataError):
            load_ocr_fixtures(p)


def _gateway_with(handler, **kwargs) -> HttpOcrGateway:
    transport = httpx.MockTransport(handler)
    client = httpx.Client(transport=transport)
    return HttpOcrGateway("http://sidecar", client=client, backoff_s=0.0, **kwargs)


class TestHttpGateway:
    def test_round_trip(self, tmp_path):
        image = tmp_path / "sign.png"
        image.write_bytes(b"fake-image-bytes")
        seen = {}

        def handler(request: httpx.Request) -> httpx.Response:
            seen["payload"] = json.loads(request.content)
            return httpx.Response(
                200,
                json={
                    "tokens": [{"text": "HI", "bbox": [0, 0, 9, 9], "conf": 0.7}],
                    "backend": "det+rec",
                },
            )

        result = _gateway_with(handler, backend="det+rec").recognize(str(image))
        assert base64.b64decode(seen["payload"]["image_b64"]) == b"fake-image-bytes"
        assert seen["payload"]["backend"] == "det+rec"
        assert result.tokens[0].text == "HI"
        assert result.backend_tag == "det+rec"

    def test_missing_image_file(self):
        gateway = _gateway_with(lambda request: httpx.Response(200, json={"tokens": []}))
        with pytest.raises(NotFoundError):
            gateway.recognize("/nonexistent/img.png")

    def test_retries_then_succeeds(self, tmp_path):
        image = tmp_path / "a.png"
        image.write_bytes(b"x")
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] < 3:
                return httpx.Response(503)
            return httpx.Response(200, json={"tokens": [], "backend": "b"})

        result = _gateway_with(handler, max_retries=2).recognize(str(image))
        assert calls["n"] == 3
        assert result.tokens == ()

    def test_transport_error_carries_attempts(self, tmp_path):
        image = tmp_path / "a.png"
        image.write_bytes(b"x")

        def handler(request):
            raise httpx.ConnectError("down")

        with pytest.raises(TransportError) as info:
            _gateway_with(handler, max_retries=2).recognize(str(image))
        assert info.value.attempts == 3

    def test_client_error_is_protocol_error(self, tmp_path):
        image = tmp_path / "a.png"
        image.write_bytes(b"x")
        gateway = _gateway_with(lambda request: httpx.Response(400, text="unknown backend"))
        with pytest.raises(ProtocolError):
            gateway.recognize(str(image))

    def test_malformed_body_is_protocol_error(self, tmp_path):
        image = tmp_path / "a.png"
        image.write_bytes(b"x")
        gateway = _gateway_with(lambda request: httpx.Response(200, json={"nope": 1}))
        with pytest.raises(ProtocolError):
            gateway.recognize(str(image))
