"""End-to-end orchestration: labeling runs, ensembles, few-shot selection."""
from __future__ import annotations

import json
import logging
import random
from collections.abc import Callable
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Protocol

from radlabel import __version__
from radlabel.client import BackendResponse, ClientError, EndpointConfig, GenerationParams
from radlabel.ensemble import EnsembleConfig, TieBreak, vote
from radlabel.parsing import NormalizationPolicy, ParseDiagnostics, parse_labels
from radlabel.postprocess import PIPELINE_STAGES, CollapsePolicy, evaluation_view, postprocess_prediction
from radlabel.prompts import (
    FewShotSet,
    PromptTemplate,
    render_examples_block,
    render_few_shot,
    render_zero_shot,
    select_few_shot,
    template_digest,
)
from radlabel.runs import (
    MANIFEST,
    PREDICTIONS,
    SCHEMA,
    BackendExhaustedError,
    ConfigError,
    DataValidationError,
    RecordWriter,
    load_run,
    read_records,
    write_json_atomic,
    write_predictions,
)
from radlabel.schema import Dataset, FindingSchema, LabelVector, content_digest, validate_dataset, write_dataset

log = logging.getLogger(__name__)


class Backend(Protocol):
    def generate(self, prompt: Any, params: GenerationParams | None = None) -> BackendResponse: ...


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class LabelOptions:
    concurrency: int = 4
    resume: bool = False
    policy: NormalizationPolicy = field(default_factory=NormalizationPolicy.strict)
    max_failures: int = 10
    seed: int = 0
    propagate: bool = True
    name: str | None = None
    backend_kind: str = "http"


def _identity(dataset: Dataset, template: PromptTemplate, endpoint: EndpointConfig,
              shots: FewShotSet | None, opts: LabelOptions) -> dict[str, Any]:
    """The manifest fields that must match for a resume to be valid."""
    return {
        "dataset_digest": dataset.digest(),
        "schema_digest": dataset.schema.digest(),
        "template_digest": template_digest(template, dataset.schema, shots),
        "endpoint": endpoint.to_dict(),
        "generation": endpoint.params.to_dict(),
        "normalization": opts.policy.to_dict(),
        "collapse": {"stored": "multiclass3", "evaluation": "chosen at eval time, propagation re-applied after it"},
        "hierarchy_propagation": "predictions" if opts.propagate else "off",
        "stages": list(PIPELINE_STAGES),
        "seed": opts.seed,
        "few_shot": (
            {"example_ids": shots.ids, "covered": sorted(shots.covered)} if shots is not None else None
        ),
        "backend": opts.backend_kind,
    }


def _process(
    report_id: str,
    prompt_fn: Callable[[], Any],
    backend: Backend,
    schema: FindingSchema,
    opts: LabelOptions,
) -> dict[str, Any]:
    prompt = prompt_fn()
    failed = False
    error = None
    try:
        resp = backend.generate(prompt)
    except ClientError as exc:
        failed = True
        error = str(exc)
        attempts = getattr(exc, "attempts", None)
        resp = BackendResponse(None, None, 0.0, attempts or 1, error)
    if resp.raw_text is None:
        failed = True
        parsed, diag = LabelVector.uniform(schema), ParseDiagnostics("failed", missing_findings=list(schema.findings))
    else:
        parsed, diag = parse_labels(resp.raw_text, schema, opts.policy, finish_reason=resp.finish_reason)
    final = postprocess_prediction(parsed, schema, propagate=opts.propagate)
    return {
        "report_id": report_id,
        "raw_text": resp.raw_text,
        "finish_reason": resp.finish_reason,
        "parsed_labels": parsed.to_strings(),
        "labels": final.to_strings(),
        "diagnostics": diag.to_dict(),
        "attempt_count": resp.attempt_count,
        "latency_ms": round(resp.latency_ms, 3),
        "failed": failed,
        "error": error,
    }


def run_labeling(
    dataset: Dataset,
    template: PromptTemplate,
    endpoint: EndpointConfig,
    backend: Backend,
    out_dir: str | Path,
    *,
    shots: FewShotSet | None = None,
    options: LabelOptions | None = None,
) -> Path:
    """Label every report in ``dataset`` once, caching per-report records in ``out_dir``.

    The manifest is written before any request; the predictions CSV is
    written last, so its presence marks a complete run.
    """
    opts = options or LabelOptions()
    schema = dataset.schema
    problems = validate_dataset(dataset)
    if problems:
        raise DataValidationError("; ".join(problems[:10]))
    if shots is not None and template.mode != "few_shot":
        template = template.with_mode("few_shot")
    if shots is not None:
        overlap = set(shots.ids) & set(dataset.ids)
        if overlap:
            raise DataValidationError(f"few-shot examples also in the labeled dataset: {sorted(overlap)[:5]}")

    run_dir = Path(out_dir)
    identity = _identity(dataset, template, endpoint, shots, opts)
    manifest_path = run_dir / MANIFEST
    if manifest_path.exists():
        if not opts.resume:
            raise ConfigError(f"{run_dir} already holds a run; pass --resume to continue it")
        previous = json.loads(manifest_path.read_text(encoding="utf-8"))
        changed = [k for k, v in identity.items() if previous.get(k) != json.loads(json.dumps(v))]
        if changed:
            raise ConfigError(f"cannot resume: {', '.join(changed)} differ from the existing manifest")
        manifest = previous
    else:
        run_dir.mkdir(parents=True, exist_ok=True)
        started = _now()
        manifest = {
            "run_id": f"{endpoint.model_name.replace('/', '_')}-{started.replace(':', '')}-{identity['template_digest'][7:15]}",
            "name": opts.name or endpoint.model_name,
            "tool_version": __version__,
            **identity,
            "started_at": started,
        }
        write_json_atomic(run_dir / SCHEMA, schema.to_dict())
        write_json_atomic(manifest_path, manifest)
    (run_dir / PREDICTIONS).unlink(missing_ok=True)

    done = read_records(run_dir)
    unknown = set(done) - set(dataset.ids)
    if unknown:
        raise DataValidationError(f"cached records for ids not in dataset: {sorted(unknown)[:5]}")
    todo = [r for r in dataset.reports if r.id not in done]
    failures = sum(1 for rec in done.values() if rec.get("failed"))
    log.info("run %s: %d cached, %d to label", manifest["run_id"], len(done), len(todo))

    mode = endpoint.wire_mode

    def prompt_for(report):
        if shots is not None:
            return lambda: render_few_shot(template, schema, shots, report, mode)
        return lambda: render_zero_shot(template, schema, report, mode)

    writer = RecordWriter(run_dir)
    aborted: Exception | None = None
    with ThreadPoolExecutor(max_workers=max(1, opts.concurrency)) as pool:
        pending: set[Future] = set()
        queue = iter(todo)
        limit = max(1, opts.concurrency) * 2

        def refill() -> None:
            while len(pending) < limit:
                report = next(queue, None)
                if report is None:
                    return
                pending.add(pool.submit(_process, report.id, prompt_for(report), backend, schema, opts))

        refill()
        try:
            while pending:
                finished, _ = wait(pending, return_when=FIRST_COMPLETED)
                for fut in finished:
                    pending.discard(fut)
                    record = fut.result()
                    writer.write(record)
                    done[record["report_id"]] = record
                    if record["failed"]:
                        failures += 1
                        log.warning("report=%s failed: %s", record["report_id"], record["error"])
                if failures > opts.max_failures:
                    aborted = BackendExhaustedError(
                        f"{failures} report(s) failed at the backend (max {opts.max_failures})"
                    )
                    break
                refill()
        finally:
            for fut in pending:
                fut.cancel()
    if aborted is not None:
        raise aborted

    predictions = {rid: LabelVector.from_strings(schema, rec["labels"]) for rid, rec in done.items()}
    manifest["completed_at"] = _now()
    manifest["summary"] = _summarize(done)
    write_json_atomic(manifest_path, manifest)
    write_predictions(run_dir / PREDICTIONS, schema, predictions, sorted(predictions))
    return run_dir


def _summarize(records: dict[str, dict[str, Any]]) -> dict[str, Any]:
    methods: dict[str, int] = {}
    off = 0
    missing = 0
    for rec in records.values():
        d = rec["diagnostics"]
        methods[d["extraction_method"]] = methods.get(d["extraction_method"], 0) + 1
        off += len(d["off_template_tokens"])
        missing += len(d["missing_findings"])
    return {
        "reports": len(records),
        "failed": sum(1 for r in records.values() if r.get("failed")),
        "truncated": sum(1 for r in records.values() if r["diagnostics"]["truncated"]),
        "extraction_methods": dict(sorted(methods.items())),
        "off_template_tokens": off,
        "missing_findings": missing,
    }


def run_ensemble(
    member_dirs: list[str | Path],
    out_dir: str | Path,
    *,
    tie_break: TieBreak = "first",
    collapse_mode: str | None = "binary",
    name: str = "Ensemble",
) -> Path:
    """Majority-vote several completed runs into a new run directory."""
    members = [load_run(p) for p in member_dirs]
    for m in members:
        if m.manifest is None or m.schema is None:
            raise ConfigError(f"{m.path}: ensemble members must be run directories")
    first = members[0]
    for m in members[1:]:
        for key in ("dataset_digest", "schema_digest"):
            if m.manifest[key] != first.manifest[key]:  # type: ignore[index]
                raise DataValidationError(f"{key} differs between {first.path} and {m.path}")
    ids = [m.manifest["run_id"] for m in members]  # type: ignore[index]
    config = EnsembleConfig(tuple(ids), tie_break)
    schema = first.schema
    assert schema is not None
    policy = CollapsePolicy(collapse_mode) if collapse_mode else None  # type: ignore[arg-type]
    propagated = all(m.manifest.get("hierarchy_propagation") == "predictions" for m in members)  # type: ignore[union-attr]

    run_dir = Path(out_dir)
    if (run_dir / MANIFEST).exists():
        raise ConfigError(f"{run_dir} already holds a run")
    run_dir.mkdir(parents=True, exist_ok=True)
    few_shot_ids = sorted({i for m in members for i in m.few_shot_ids})
    manifest = {
        "run_id": f"ensemble-{content_digest(ids)[7:19]}",
        "name": name,
        "tool_version": __version__,
        "dataset_digest": first.manifest["dataset_digest"],  # type: ignore[index]
        "schema_digest": first.manifest["schema_digest"],  # type: ignore[index]
        "ensemble": {
            "members": ids,
            "member_names": [m.name for m in members],
            "tie_break": "first_priority_member" if tie_break == "first" else "fixed_label(no)",
            "collapse_before_vote": collapse_mode or "none",
        },
        "hierarchy_propagation": "predictions" if propagated else "off",
        "few_shot": {"example_ids": few_shot_ids} if few_shot_ids else None,
        "started_at": _now(),
    }
    write_json_atomic(run_dir / SCHEMA, schema.to_dict())
    write_json_atomic(run_dir / MANIFEST, manifest)

    report_ids = sorted(first.predictions)
    for m in members[1:]:
        if set(m.predictions) != set(report_ids):
            raise DataValidationError(f"{m.path}: report ids differ from {first.path}")
    writer = RecordWriter(run_dir)
    predictions: dict[str, LabelVector] = {}
    tie_count = 0
    for rid in report_ids:
        votes = [m.predictions[rid] for m in members]
        if policy is not None:
            votes = [evaluation_view(v, schema, policy.mode, propagate=propagated) for v in votes]
        result, ties = vote(votes, config)
        tie_count += len(ties)
        predictions[rid] = result
        writer.write(
            {
                "report_id": rid,
                "member_labels": {mid: v.to_strings() for mid, v in zip(ids, votes)},
                "labels": result.to_strings(),
                "ties": ties,
                "failed": False,
            }
        )
    manifest["summary"] = {"reports": len(report_ids), "tie_breaks": tie_count}
    manifest["completed_at"] = _now()
    write_json_atomic(run_dir / MANIFEST, manifest)
    write_predictions(run_dir / PREDICTIONS, schema, predictions, report_ids)
    return run_dir


def select_shots(
    pool: Dataset,
    seed: int,
    out_path: str | Path,
    template: PromptTemplate,
    *,
    holdout: int | None = None,
) -> tuple[FewShotSet, Dataset]:
    """Choose few-shot examples and write them plus the residual evaluation split.

    With ``holdout`` a random subset of that many reports is set aside as the
    example source and the whole subset is excluded from evaluation;
    otherwise only the chosen examples are excluded.
    """
    problems = validate_dataset(pool)
    if problems:
        raise DataValidationError("; ".join(problems[:10]))
    if pool.gold is None:
        raise DataValidationError("few-shot pool needs gold labels")
    if holdout is not None:
        if not 0 < holdout <= len(pool.reports):
            raise ConfigError(f"holdout must be between 1 and {len(pool.reports)}")
        rng = random.Random(seed)
        held = set(rng.sample(pool.ids, holdout))
        source = pool.subset(held)
    else:
        source = pool
    shots = select_few_shot(source, pool.schema, seed)
    excluded = set(source.ids) if holdout is not None else set(shots.ids)
    residual = pool.subset(excluded, exclude=True)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    eval_path = out_path.with_name(out_path.stem + ".eval.jsonl")
    payload = {
        "seed": seed,
        "schema": pool.schema.name,
        "schema_digest": pool.schema.digest(),
        "holdout_ids": sorted(excluded) if holdout is not None else None,
        **shots.to_dict(),
        "rendered_block": render_examples_block(pool.schema, shots, template),
        "evaluation_split": eval_path.name,
    }
    write_json_atomic(out_path, payload)
    write_dataset(eval_path, residual)
    return shots, residual


def load_shots(path: str | Path, schema: FindingSchema, seed: int) -> FewShotSet:
    """Load a few-shot file, or select shots from a JSONL pool with ``seed``."""
    from radlabel.schema import load_dataset

    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = None
    if isinstance(data, dict) and "examples" in data:
        if data.get("schema_digest") not in (None, schema.digest()):
            raise DataValidationError(f"{path}: few-shot file was built for a different schema")
        return FewShotSet.from_dict(data, schema)
    pool = load_dataset(path, schema)
    problems = validate_dataset(pool)
    if problems:
        raise DataValidationError("; ".join(problems[:10]))
    return select_few_shot(pool, schema, seed)
