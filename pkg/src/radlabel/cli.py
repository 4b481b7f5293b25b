"""``radlabel`` command line: label, eval, ensemble, select-shots."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from radlabel.client import ClientError, HttpBackend, MockBackend, load_endpoint
from radlabel.evaluation import evaluate_runs
from radlabel.parsing import NormalizationPolicy
from radlabel.pipeline import LabelOptions, load_shots, run_ensemble, run_labeling, select_shots
from radlabel.prompts import TemplateError, UncoverableFindingError, load_template
from radlabel.runs import (
    BackendExhaustedError,
    ConfigError,
    DataValidationError,
    load_run,
)
from radlabel.schema import FindingSchema, SchemaError, load_dataset, load_schema, validate_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3

log = logging.getLogger("radlabel")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load_dataset_checked(path: str, schema: FindingSchema):
    ds = load_dataset(path, schema)
    problems = validate_dataset(ds)
    if problems:
        raise DataValidationError(f"{path}: " + "; ".join(problems[:10]))
    return ds


def cmd_label(args: argparse.Namespace) -> int:
    schema = load_schema(args.schema)
    dataset = _load_dataset_checked(args.dataset, schema)
    try:
        endpoint = load_endpoint(args.endpoint)
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"{args.endpoint}: {exc}") from exc
    shots = load_shots(args.few_shot, schema, args.seed) if args.few_shot else None
    template = load_template(args.template, "few_shot" if shots is not None else "zero_shot")
    if args.backend == "mock":
        backend = MockBackend.from_config(endpoint.mock, base_dir=Path(args.endpoint).parent)
    else:
        backend = HttpBackend(endpoint)
    opts = LabelOptions(
        concurrency=args.concurrency,
        resume=args.resume,
        policy=NormalizationPolicy(args.normalization),
        max_failures=args.max_failures,
        seed=args.seed,
        propagate=not args.no_propagate,
        name=args.name,
        backend_kind=args.backend,
    )
    out = args.out or f"runs/{endpoint.model_name.replace('/', '_')}"
    try:
        run_dir = run_labeling(dataset, template, endpoint, backend, out, shots=shots, options=opts)
    finally:
        backend.close()
    print(run_dir)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    runs = [load_run(p) for p in args.runs]
    reference = load_run(args.reference) if args.reference else None
    if reference is not None:
        ref_path = Path(args.reference).resolve()
        runs = [r for r in runs if r.path is None or r.path.resolve() != ref_path]
    if args.schema:
        schema = load_schema(args.schema)
    else:
        schema = next((r.schema for r in [*runs, reference] if r is not None and r.schema is not None), None)
        if schema is None:
            raise ConfigError("no schema.json found in the runs; pass --schema")
    gold = _load_dataset_checked(args.gold, schema)
    report = evaluate_runs(
        runs, gold, args.mode, reference=reference, bonferroni_m=args.bonferroni_m,
        per_finding_tests=args.per_finding,
    )
    for path in report.write(args.out, args.name):
        print(path)
    return EXIT_OK


def cmd_ensemble(args: argparse.Namespace) -> int:
    run_dir = run_ensemble(
        args.members, args.out, tie_break=args.tie_break,
        collapse_mode=None if args.collapse == "none" else args.collapse, name=args.name,
    )
    print(run_dir)
    return EXIT_OK


def cmd_select_shots(args: argparse.Namespace) -> int:
    schema = load_schema(args.schema)
    pool = load_dataset(args.pool, schema)
    template = load_template(args.template, "few_shot")
    shots, residual = select_shots(pool, args.seed, args.out, template, holdout=args.holdout)
    print(json.dumps({"example_ids": shots.ids, "evaluation_reports": len(residual.reports)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radlabel", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    lab = sub.add_parser("label", help="label a dataset with one model")
    lab.add_argument("--dataset", required=True)
    lab.add_argument("--schema", required=True)
    lab.add_argument("--template", default=None, help="template file (default: bundled template)")
    lab.add_argument("--endpoint", required=True)
    lab.add_argument("--backend", choices=("http", "mock"), default="http")
    lab.add_argument("--few-shot", default=None, help="few-shot file from select-shots, or a JSONL pool")
    lab.add_argument("--seed", type=int, default=0)
    lab.add_argument("--concurrency", type=int, default=4)
    lab.add_argument("--resume", action="store_true")
    lab.add_argument("--normalization", choices=("strict", "lenient"), default="strict")
    lab.add_argument("--max-failures", type=int, default=10)
    lab.add_argument("--no-propagate", action="store_true", help="skip hierarchy propagation")
    lab.add_argument("--name", default=None, help="model name shown in tables")
    lab.add_argument("--out", default=None)
    lab.set_defaults(func=cmd_label)

    ev = sub.add_parser("eval", help="score runs against gold labels")
    ev.add_argument("--runs", nargs="+", required=True)
    ev.add_argument("--gold", required=True)
    ev.add_argument("--mode", choices=("binary", "multiclass3"), default="binary")
    ev.add_argument("--reference", default=None)
    ev.add_argument("--bonferroni-m", type=int, default=None)
    ev.add_argument("--per-finding", action="store_true", help="also run McNemar per finding")
    ev.add_argument("--schema", default=None)
    ev.add_argument("--name", default=None, help="output file stem (default: the mode)")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    en = sub.add_parser("ensemble", help="majority-vote several runs")
    en.add_argument("--members", nargs="+", required=True)
    en.add_argument("--tie-break", choices=("first", "no"), default="first")
    en.add_argument("--collapse", choices=("binary", "multiclass3", "none"), default="binary")
    en.add_argument("--name", default="Ensemble")
    en.add_argument("--out", required=True)
    en.set_defaults(func=cmd_ensemble)

    ss = sub.add_parser("select-shots", help="choose few-shot examples from a gold pool")
    ss.add_argument("--pool", required=True)
    ss.add_argument("--schema", required=True)
    ss.add_argument("--seed", type=int, required=True)
    ss.add_argument("--holdout", type=int, default=None, help="size of the random example subset")
    ss.add_argument("--template", default=None)
    ss.add_argument("--out", required=True)
    ss.set_defaults(func=cmd_select_shots)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, TemplateError, ClientError, OSError) as exc:
        print(f"radlabel: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataValidationError, SchemaError, UncoverableFindingError) as exc:
        print(f"radlabel: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BackendExhaustedError as exc:
        print(f"radlabel: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
