"""Run directories: manifests, per-report raw records, predictions CSVs."""
from __future__ import annotations

import csv
import io
import json
import os
import threading
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any
from urllib.parse import quote, unquote

from radlabel.schema import FindingSchema, LabelVector, SchemaError

MANIFEST = "manifest.json"
SCHEMA = "schema.json"
PREDICTIONS = "predictions.csv"
RAW_DIR = "raw"


class ConfigError(Exception):
    """Bad invocation or configuration (exit code 1)."""


class DataValidationError(Exception):
    """Inputs violate a data contract (exit code 2)."""


class BackendExhaustedError(Exception):
    """Too many reports failed at the backend (exit code 3)."""


def write_json_atomic(path: Path, payload: Any) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=False) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def raw_path(run_dir: Path, report_id: str) -> Path:
    return run_dir / RAW_DIR / f"{quote(report_id, safe='')}.json"


class RecordWriter:
    """Single serialized writer for immutable per-report records."""

    def __init__(self, run_dir: Path):
        self.dir = run_dir / RAW_DIR
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def write(self, record: Mapping[str, Any]) -> None:
        path = raw_path(self.dir.parent, record["report_id"])
        with self._lock:
            if path.exists():
                raise FileExistsError(f"record for {record['report_id']!r} already written")
            write_json_atomic(path, dict(record))


def read_records(run_dir: Path) -> dict[str, dict[str, Any]]:
    records: dict[str, dict[str, Any]] = {}
    raw = run_dir / RAW_DIR
    if not raw.is_dir():
        return records
    for path in raw.glob("*.json"):
        rec = json.loads(path.read_text(encoding="utf-8"))
        if unquote(path.stem) != rec.get("report_id"):
            raise DataValidationError(f"{path}: record id does not match file name")
        records[rec["report_id"]] = rec
    return records


def predictions_csv_text(schema: FindingSchema, predictions: Mapping[str, LabelVector], order: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["report_id", *schema.findings])
    for rid in order:
        vec = predictions[rid]
        writer.writerow([rid, *(vec[f].value for f in schema.findings)])
    return buf.getvalue()


def write_predictions(path: Path, schema: FindingSchema, predictions: Mapping[str, LabelVector], order: list[str]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(predictions_csv_text(schema, predictions, order), encoding="utf-8")
    os.replace(tmp, path)


def read_predictions(path: Path, schema: FindingSchema | None = None) -> tuple[list[str], dict[str, LabelVector]]:
    """Read a predictions CSV; returns (finding columns, id -> vector)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty predictions file") from None
        if not header or header[0] != "report_id":
            raise DataValidationError(f"{path}: first column must be report_id")
        findings = header[1:]
        if schema is not None and tuple(findings) != schema.findings:
            raise DataValidationError(f"{path}: columns {findings} do not match schema {list(schema.findings)}")
        out: dict[str, LabelVector] = {}
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataValidationError(f"{path}: row for {row[0]!r} has {len(row)} cells, expected {len(header)}")
            if row[0] in out:
                raise DataValidationError(f"{path}: duplicate report id {row[0]!r}")
            try:
                out[row[0]] = LabelVector.from_strings_ordered(findings, row[1:])
            except SchemaError as exc:
                raise DataValidationError(f"{path}: {exc}") from exc
    return findings, out


@dataclass
class RunPredictions:
    name: str
    predictions: dict[str, LabelVector]
    findings: list[str]
    schema: FindingSchema | None = None
    manifest: dict[str, Any] | None = None
    path: Path | None = None

    @property
    def few_shot_ids(self) -> list[str]:
        if not self.manifest:
            return []
        return list((self.manifest.get("few_shot") or {}).get("example_ids") or [])


def load_run(path: str | Path) -> RunPredictions:
    """Load a run directory (needs a complete predictions CSV) or a bare predictions CSV."""
    path = Path(path)
    if path.is_dir():
        manifest_path = path / MANIFEST
        pred_path = path / PREDICTIONS
        if not pred_path.exists():
            raise DataValidationError(f"{path}: run is incomplete (no {PREDICTIONS})")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8")) if manifest_path.exists() else None
        schema = None
        if (path / SCHEMA).exists():
            schema = FindingSchema.from_dict(json.loads((path / SCHEMA).read_text(encoding="utf-8")))
        findings, preds = read_predictions(pred_path, schema)
        name = (manifest or {}).get("name") or path.name
        return RunPredictions(name, preds, findings, schema, manifest, path)
    if path.is_file():
        findings, preds = read_predictions(path)
        return RunPredictions(path.stem, preds, findings, None, None, path)
    raise ConfigError(f"no such run directory or predictions file: {path}")
