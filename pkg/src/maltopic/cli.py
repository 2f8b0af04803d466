"""Command-line entry point: ``maltopic run|eval|report|prep-baseline``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .baseline import write_baseline_corpus
from .errors import ConfigError, DatasetError, MALTopicError, RunLockedError, SchemaError, TopicsFileError
from .metrics import CoherenceConfig, CoverageConfig
from .pipeline import (
    METRICS_FILE,
    REPORT_FILE,
    PipelineConfig,
    build_embedder,
    load_run,
    render_metrics_table,
    render_report,
    run_eval_only,
    run_pipeline,
)
from .survey import ID_COLUMN, FieldKind, FieldSchema, load_dataset
from .text import resolve_stopwords

EXIT_OK, EXIT_USAGE, EXIT_STAGE = 0, 1, 2

logger = logging.getLogger("maltopic")


def _read_json(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def cmd_run(args) -> int:
    config = PipelineConfig.from_file(args.config, input_path=args.input)
    artifacts = run_pipeline(config, args.out, fresh=args.fresh)
    run = artifacts.manifest["run"]
    print(f"{len(artifacts.enriched)} responses, {len(artifacts.batch_results)} batches, "
          f"{len(artifacts.topics)} topics ({artifacts.dedup.method.value} dedup)")
    print(f"live calls: {run['live_calls']}, cache hits: {run['cache_hits']}, "
          f"total cost: USD {artifacts.cost['total_usd']:.6f}")
    for w in artifacts.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"artifacts written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    data = _read_json(args.config)
    try:
        coh = CoherenceConfig(**data.get("coherence", {}))
        cov = CoverageConfig(**data.get("coverage", {}))
        if args.theta is not None:
            cov = CoverageConfig(args.theta)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid metric settings: {exc}") from exc
    embedder = build_embedder(data.get("embedder", {"kind": "hashing"}))
    stopwords = resolve_stopwords(data.get("stopwords", "english"))
    report = run_eval_only(args.topics, args.corpus, embedder, coh, cov, stopwords)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / METRICS_FILE).write_text(json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n",
                                    encoding="utf-8")
    print("\n".join(render_metrics_table(report)))
    return EXIT_OK


def cmd_report(args) -> int:
    text = render_report(load_run(args.run))
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        (Path(args.run) / REPORT_FILE).write_text(text, encoding="utf-8")
        sys.stdout.write(text)
    return EXIT_OK


def _header_schema(path: str, delimiter: str) -> list[FieldSchema]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh, delimiter=delimiter), [])
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return [FieldSchema(name, FieldKind.STRUCTURED) for name in header if name and name != ID_COLUMN]


def cmd_prep_baseline(args) -> int:
    data = _read_json(args.config)
    delimiter = data.get("delimiter", ",")
    if "schema" in data:
        try:
            schema = [FieldSchema.from_dict(f) for f in data["schema"]]
        except (SchemaError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
    else:
        schema = _header_schema(args.input, delimiter)
    dataset = load_dataset(args.input, schema, delimiter)
    stopwords = resolve_stopwords(data.get("stopwords", "english"))
    text_path, meta_path = write_baseline_corpus(dataset, args.out, stopwords)
    print(f"wrote {len(dataset)} documents to {text_path} (index: {meta_path})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maltopic", description="LLM-agent topic modeling and topic metrics for survey free text.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="enrich, extract, deduplicate and score one free-text field")
    p.add_argument("--input", required=True, help="survey CSV file")
    p.add_argument("--config", required=True, help="pipeline JSON config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fresh", action="store_true", help="ignore stage files from earlier runs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score an existing topic set against a corpus")
    p.add_argument("--topics", required=True, help="JSON array of topics")
    p.add_argument("--corpus", required=True, help="corpus file (.txt, .json or .jsonl)")
    p.add_argument("--out", required=True, help="output directory for metrics.json")
    p.add_argument("--config", help="JSON with coherence/coverage/embedder/stopwords settings")
    p.add_argument("--theta", type=float, help="coverage threshold (default 0.1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render the Markdown report of a finished run")
    p.add_argument("--run", required=True, help="run output directory")
    p.add_argument("--output", help="write the report here instead of <run>/report.md and stdout")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("prep-baseline", help="write cleaned, concatenated text for LDA/BERTopic")
    p.add_argument("--input", required=True, help="survey CSV file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON with schema/stopwords/delimiter (default: all columns)")
    p.set_defaults(func=cmd_prep_baseline)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, RunLockedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, TopicsFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if args.command in ("eval", "prep-baseline") else EXIT_STAGE
    except MALTopicError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
