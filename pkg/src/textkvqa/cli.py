"""Operator command line: ingest, index, link, ask, eval, report.

Batch operations run in-process against the core package; `ask` can also act
as a thin client for a running service via --server. Exit codes: 0 success,
1 usage error, 2 data/input error, 3 backend or transport error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import httpx

from . import __version__
from .errors import (
    DataError,
    EmptyOutputError,
    EngineError,
    InvalidArgumentError,
    NoVisualTextError,
    NotFoundError,
    ProtocolError,
    TransportError,
)
from .evaluation import (
    EvalConfig,
    EvalReport,
    emit_report,
    evaluate_split,
    items_to_jsonl_lines,
    load_dataset_jsonl,
    make_gold_answer_script,
    recall_at_1,
)
from .fuzzy import EntityIndex, build_index
from .kb import (
    KnowledgeBase,
    ingest_jsonl,
    kb_content_hash,
    load_kb_jsonl,
    save_kb_jsonl,
)
from .linking import link_result_to_dict, link_split
from .lmm import HttpLmm, HttpLmmConfig, MockLmm, MockPolicy
from .ocr import DEFAULT_MIN_CONFIDENCE, FixtureOcrGateway, HttpOcrGateway, visual_text
from .qa import PROMPT_VARIANTS, answer as qa_answer
from .linking import link as link_one

logger = logging.getLogger("textkvqa")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # keep argparse failures inside our exit-code scheme
        raise UsageError(f"{message}\n{self.format_usage()}")


_CONFIG_KEYS = (
    "kb_path",
    "split_name",
    "dataset_path",
    "ocr_mode",
    "fixture_path",
    "ocr_url",
    "backend",
    "mock_policy",
    "mock_script",
    "k",
    "variant",
    "linking_mode",
    "output_dir",
    "max_inflight",
    "min_token_confidence",
    "index_cache",
)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"config file not found: {p}")
    try:
        config = json.loads(p.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise DataError("config file must hold a JSON object")
    unknown = sorted(set(config) - set(_CONFIG_KEYS))
    if unknown:
        raise DataError(f"config file has unknown keys: {', '.join(unknown)}")
    return config


def _resolve(args: argparse.Namespace, config: dict, key: str, default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return default


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"missing required option {flag}")
    return value


def _sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _build_tag() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"v{__version__}"


def _load_kb_and_index(
    kb_path: str, split_name: str, index_cache: str | None
) -> tuple[KnowledgeBase, EntityIndex]:
    kb = load_kb_jsonl(kb_path, split_name)
    kb_hash = kb_content_hash(kb)
    if index_cache and Path(index_cache).exists():
        try:
            return kb, EntityIndex.load(index_cache, expect_kb_hash=kb_hash)
        except DataError as exc:
            logger.warning("index cache rejected (%s); rebuilding", exc)
    index = build_index(kb)
    if index_cache:
        index.save(index_cache)
        logger.info("index cache written to %s", index_cache)
    return kb, index


def _make_mock_script(policy: str, script_path: str | None, dataset_path: str | None, kb):
    if policy == "gold_answer":
        if dataset_path is None:
            raise UsageError("--mock-policy gold_answer needs a dataset to script from")
        records = load_dataset_jsonl(dataset_path)
        return make_gold_answer_script(records, kb)
    if script_path is not None:
        p = Path(script_path)
        if not p.exists():
            raise NotFoundError(f"mock script not found: {p}")
        script = json.loads(p.read_text("utf-8"))
        if not isinstance(script, dict):
            raise DataError("mock script must be a JSON object")
        return script
    return None


def _make_backend(args: argparse.Namespace, config: dict, kb, dataset_path: str | None):
    backend = _resolve(args, config, "backend", "mock")
    if backend == "http":
        return HttpLmm(HttpLmmConfig.from_env())
    if backend != "mock":
        raise UsageError(f"unknown backend {backend!r}; expected mock or http")
    policy = _resolve(args, config, "mock_policy", "echo_first_candidate")
    script = _make_mock_script(policy, _resolve(args, config, "mock_script"), dataset_path, kb)
    return MockLmm(MockPolicy(mode=policy, script=script))


def _make_ocr_gateway(args: argparse.Namespace, config: dict):
    fixtures = _resolve(args, config, "fixture_path")
    url = _resolve(args, config, "ocr_url")
    mode = _resolve(args, config, "ocr_mode", "fixture" if fixtures else "live" if url else None)
    if mode == "fixture":
        return FixtureOcrGateway.from_file(_require(fixtures, "--ocr-fixtures"))
    if mode == "live":
        return HttpOcrGateway(_require(url, "--ocr-url"))
    raise UsageError("OCR source missing: pass --ocr-fixtures or --ocr-url")


def _cmd_ingest(args: argparse.Namespace) -> int:
    kb, report = ingest_jsonl(
        args.triplets,
        args.split,
        alias_path=args.aliases,
        template_path=args.templates,
    )
    save_kb_jsonl(kb, args.out)
    summary = {
        "entities": len(kb),
        "kb_hash": kb_content_hash(kb),
        "out": str(args.out),
        **report.to_dict(),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_index(args: argparse.Namespace) -> int:
    kb = load_kb_jsonl(args.kb, args.split)
    index = build_index(kb)
    index.save(args.out)
    print(
        json.dumps(
            {
                "entities": index.n_entities,
                "surfaces": index.n_surfaces,
                "kb_hash": index.kb_hash,
                "out": str(args.out),
            },
            indent=2,
            sort_keys=True,
        )
    )
    return EXIT_OK


def _cmd_link(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    kb_path = _require(_resolve(args, config, "kb_path"), "--kb")
    split_name = _resolve(args, config, "split_name", "business")
    dataset_path = _require(_resolve(args, config, "dataset_path"), "--dataset")
    kb, index = _load_kb_and_index(kb_path, split_name, _resolve(args, config, "index_cache"))
    records = load_dataset_jsonl(dataset_path)
    gateway = _make_ocr_gateway(args, config)
    backend = _make_backend(args, config, kb, dataset_path)
    k = int(_resolve(args, config, "k", 5))
    min_conf = float(_resolve(args, config, "min_token_confidence", DEFAULT_MIN_CONFIDENCE))

    images = []
    ocr_failures = []
    for rec in records:
        try:
            images.append((rec.image, gateway.recognize(rec.image)))
        except EngineError as exc:
            ocr_failures.append(
                {"image": rec.image, "error_kind": type(exc).__name__, "message": str(exc)}
            )
    results, failures = link_split(
        images,
        index,
        k,
        backend,
        min_token_confidence=min_conf,
        max_workers=int(_resolve(args, config, "max_inflight", 4)),
    )
    out_value = args.out if args.out is not None else config.get("output_dir")
    out = Path(_require(out_value, "--out"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        "".join(json.dumps(link_result_to_dict(r), ensure_ascii=False) + "\n" for r in results),
        "utf-8",
    )
    summary = {
        "linked": len(results),
        "failures": ocr_failures
        + [
            {"image": f.image_id, "error_kind": f.error_kind, "message": f.message}
            for f in failures
        ],
        "out": str(out),
    }
    if results:
        summary["recall_at_1"] = recall_at_1(results, records)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_ask(args: argparse.Namespace) -> int:
    if args.server:
        try:
            response = httpx.post(
                f"{args.server.rstrip('/')}/v1/ask",
                json={
                    "image": args.image,
                    "question": args.question,
                    "variant": args.variant,
                    "k": args.k,
                },
                timeout=120.0,
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"service unreachable at {args.server}: {exc}") from exc
        if response.status_code >= 400:
            raise TransportError(
                f"service answered HTTP {response.status_code}: {response.text[:200]}",
                last_status=response.status_code,
            )
        print(json.dumps(response.json(), indent=2, sort_keys=True))
        return EXIT_OK

    config = _load_config_file(args.config)
    kb_path = _require(_resolve(args, config, "kb_path"), "--kb")
    split_name = _resolve(args, config, "split_name", "business")
    kb, index = _load_kb_and_index(kb_path, split_name, _resolve(args, config, "index_cache"))
    gateway = _make_ocr_gateway(args, config)
    backend = _make_backend(args, config, kb, _resolve(args, config, "dataset_path"))
    k = int(_resolve(args, config, "k", 5))
    variant = _resolve(args, config, "variant", "knowledge_facts")
    if variant not in PROMPT_VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; expected one of {PROMPT_VARIANTS}")
    min_conf = float(_resolve(args, config, "min_token_confidence", DEFAULT_MIN_CONFIDENCE))

    ocr = gateway.recognize(args.image)
    result = link_one(args.image, ocr, index, k, backend, min_token_confidence=min_conf)
    qa = qa_answer(
        args.image,
        args.question,
        result,
        kb,
        variant,
        backend,
        ocr_text=visual_text(ocr, min_conf),
    )
    print(
        json.dumps(
            {
                "image": args.image,
                "question": args.question,
                "answer": qa.answer,
                "supporting_fact": qa.supporting_fact,
                "entity_id": result.entity_id,
                "entity_name": index.name_of(result.entity_id),
                "resolution": result.resolution,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config_file(args.config)
    kb_path = _require(_resolve(args, config, "kb_path"), "--kb")
    split_name = _resolve(args, config, "split_name", "business")
    dataset_path = _require(_resolve(args, config, "dataset_path"), "--dataset")
    output_dir = Path(_require(_resolve(args, config, "output_dir"), "--output-dir"))
    kb, index = _load_kb_and_index(kb_path, split_name, _resolve(args, config, "index_cache"))
    records = load_dataset_jsonl(dataset_path)
    gateway = _make_ocr_gateway(args, config)
    backend = _make_backend(args, config, kb, dataset_path)

    eval_config = EvalConfig(
        variant=_resolve(args, config, "variant", "knowledge_facts"),
        linking_mode=_resolve(args, config, "linking_mode", "vistel"),
        k=int(_resolve(args, config, "k", 5)),
        min_token_confidence=float(
            _resolve(args, config, "min_token_confidence", DEFAULT_MIN_CONFIDENCE)
        ),
        include_support_instruction=not args.no_support_instruction,
        max_workers=int(_resolve(args, config, "max_inflight", 4)),
    )
    if eval_config.variant not in PROMPT_VARIANTS:
        raise UsageError(f"unknown variant {eval_config.variant!r}")

    report, items = evaluate_split(records, kb, index, gateway, backend, eval_config)

    input_hashes = {"kb": kb_content_hash(kb), "dataset": _sha256_file(dataset_path)}
    fixture_path = _resolve(args, config, "fixture_path")
    if fixture_path:
        input_hashes["ocr_fixtures"] = _sha256_file(fixture_path)
    document = {
        "schema_version": 1,
        "report": report.to_dict(),
        "config": {
            **eval_config.to_dict(),
            "kb_path": str(kb_path),
            "dataset_path": str(dataset_path),
            "backend": backend.backend_tag,
        },
        "build": _build_tag(),
        "input_hashes": input_hashes,
    }

    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "report.json").write_text(
        json.dumps(document, indent=2, sort_keys=True, ensure_ascii=False) + "\n", "utf-8"
    )
    (output_dir / "report.md").write_text(emit_report(report, "markdown_table"), "utf-8")
    (output_dir / "items.jsonl").write_text(
        "".join(line + "\n" for line in items_to_jsonl_lines(items, eval_config.variant)), "utf-8"
    )
    print(emit_report(report, "markdown_table"), end="")
    if not report.valid:
        logger.error(
            "run invalid: %d of %d items failed (threshold 10%%)", report.failures, report.n_items
        )
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    p = Path(args.report)
    if not p.exists():
        raise NotFoundError(f"report file not found: {p}")
    try:
        document = json.loads(p.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"report file is not valid JSON: {exc}") from exc
    if document.get("schema_version") != 1:
        raise DataError(f"unsupported report schema_version: {document.get('schema_version')!r}")
    body = document.get("report")
    if not isinstance(body, dict):
        raise DataError("report document lacks a 'report' object")
    body = {k: v for k, v in body.items() if k != "schema_version"}
    try:
        report = EvalReport(**body)
    except TypeError as exc:
        raise DataError(f"report body does not match the schema: {exc}") from exc
    print(emit_report(report, args.format), end="")
    return EXIT_OK


def _add_common_run_flags(parser: argparse.ArgumentParser, *, dataset: bool) -> None:
    parser.add_argument("--config", help="JSON config file; explicit flags override it")
    parser.add_argument("--kb", dest="kb_path", help="serialized knowledge base JSONL")
    parser.add_argument("--split", dest="split_name", help="knowledge-base split name")
    if dataset:
        parser.add_argument("--dataset", dest="dataset_path", help="dataset JSONL")
    parser.add_argument("--ocr-fixtures", dest="fixture_path", help="recorded OCR JSONL")
    parser.add_argument("--ocr-url", dest="ocr_url", help="live OCR sidecar base URL")
    parser.add_argument("--backend", choices=("mock", "http"), help="generation backend")
    parser.add_argument("--mock-policy", dest="mock_policy", help="mock completion policy")
    parser.add_argument("--mock-script", dest="mock_script", help="JSON script for scripted_map")
    parser.add_argument("--k", type=int, help="candidate count (default 5)")
    parser.add_argument("--index-cache", dest="index_cache", help="on-disk index cache path")
    parser.add_argument(
        "--min-conf",
        dest="min_token_confidence",
        type=float,
        help="OCR token confidence floor (default 0.3)",
    )
    parser.add_argument("--max-inflight", dest="max_inflight", type=int, help="concurrency cap")


def build_parser() -> _Parser:
    parser = _Parser(prog="textkvqa", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p_ingest = sub.add_parser("ingest", help="build a knowledge base from triplets")
    p_ingest.add_argument("--triplets", required=True)
    p_ingest.add_argument("--split", required=True)
    p_ingest.add_argument("--out", required=True)
    p_ingest.add_argument("--aliases")
    p_ingest.add_argument("--templates")
    p_ingest.set_defaults(func=_cmd_ingest)

    p_index = sub.add_parser("index", help="build and save an entity index")
    p_index.add_argument("--kb", required=True)
    p_index.add_argument("--split", required=True)
    p_index.add_argument("--out", required=True)
    p_index.set_defaults(func=_cmd_index)

    p_link = sub.add_parser("link", help="link every dataset image to an entity")
    _add_common_run_flags(p_link, dataset=True)
    p_link.add_argument("--out", help="link-results JSONL path")
    p_link.set_defaults(func=_cmd_link)

    p_ask = sub.add_parser("ask", help="answer one question about one image")
    _add_common_run_flags(p_ask, dataset=False)
    p_ask.add_argument("--image", required=True)
    p_ask.add_argument("--question", required=True)
    p_ask.add_argument("--variant", help="prompt variant (default knowledge_facts)")
    p_ask.add_argument("--server", help="running service base URL; acts as a thin client")
    p_ask.set_defaults(func=_cmd_ask)

    p_eval = sub.add_parser("eval", help="evaluate a dataset split")
    _add_common_run_flags(p_eval, dataset=True)
    p_eval.add_argument("--variant", help="prompt variant")
    p_eval.add_argument("--linking-mode", dest="linking_mode", choices=("vistel", "ned_top1", "oracle"))
    p_eval.add_argument("--output-dir", dest="output_dir", help="directory for report files")
    p_eval.add_argument(
        "--no-support-instruction",
        action="store_true",
        help="drop the supporting-fact instruction line",
    )
    p_eval.set_defaults(func=_cmd_eval)

    p_report = sub.add_parser("report", help="re-emit a stored report")
    p_report.add_argument("--report", required=True)
    p_report.add_argument("--format", choices=("json", "markdown_table"), default="markdown_table")
    p_report.set_defaults(func=_cmd_report)

    return parser


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if getattr(args, "func", None) is None:
        print(parser.format_usage(), file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        logger.error("usage error: %s", exc)
        return EXIT_USAGE
    except InvalidArgumentError as exc:
        logger.error("invalid argument: %s", exc)
        return EXIT_USAGE
    except (DataError, NotFoundError, NoVisualTextError, FileNotFoundError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except (TransportError, ProtocolError, EmptyOutputError) as exc:
        logger.error("backend error: %s", exc)
        return EXIT_BACKEND
    except EngineError as exc:
        logger.error("error: %s", exc)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
