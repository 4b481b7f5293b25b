"""Evaluation reports laid out with findings as rows and models as columns."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

from radlabel.postprocess import CollapsePolicy, collapse, evaluation_view
from radlabel.runs import DataValidationError, RunPredictions
from radlabel.schema import Dataset, FindingSchema, LabelVector
from radlabel.stats import (
    CONVENTIONS,
    SignificanceResult,
    cohens_kappa,
    compare_to_reference,
    confusion_counts,
    f1,
    micro_macro,
)

log = logging.getLogger(__name__)

EvalMode = Literal["binary", "multiclass3"]


@dataclass
class ModelMetrics:
    name: str
    per_finding: dict[str, float]
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    micro_f1: float | None = None
    macro_f1: float | None = None
    average_kappa: float | None = None
    significance: SignificanceResult | None = None
    per_finding_significance: dict[str, SignificanceResult] | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"name": self.name, "per_finding": self.per_finding}
        if self.counts:
            out["confusion"] = self.counts
        for key in ("micro_f1", "macro_f1", "average_kappa"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        if self.significance is not None:
            out["significance"] = self.significance.to_dict()
        if self.per_finding_significance is not None:
            out["per_finding_significance"] = {k: v.to_dict() for k, v in self.per_finding_significance.items()}
        return out


@dataclass
class EvaluationReport:
    mode: EvalMode
    schema: FindingSchema
    models: list[ModelMetrics]
    reference: str | None = None
    bonferroni_m: int | None = None
    n_reports: int = 0

    @property
    def metric_name(self) -> str:
        return "f1" if self.mode == "binary" else "cohens_kappa"

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "metric": self.metric_name,
            "schema": self.schema.name,
            "findings": list(self.schema.findings),
            "n_reports": self.n_reports,
            "reference": self.reference,
            "bonferroni_m": self.bonferroni_m,
            "conventions": CONVENTIONS,
            "models": [m.to_dict() for m in self.models],
        }

    def _rows(self, fmt) -> tuple[list[str], list[list[str]]]:
        header = ["Finding"]
        for m in self.models:
            mark = m.significance.stars if m.significance is not None else ""
            header.append(m.name + mark)
        rows = [
            [self.schema.display_name(f), *(fmt(m.per_finding[f]) for m in self.models)]
            for f in self.schema.findings
        ]
        if self.mode == "binary":
            rows.append(["Micro F1", *(fmt(m.micro_f1) for m in self.models)])
            rows.append(["Macro F1", *(fmt(m.macro_f1) for m in self.models)])
        else:
            rows.append(["Average", *(fmt(m.average_kappa) for m in self.models)])
        return header, rows

    def notes(self) -> list[str]:
        if self.reference is None or self.mode != "binary":
            return []
        return [
            f"* differs from {self.reference} at adjusted p<0.05 (McNemar, Bonferroni m={self.bonferroni_m})",
            f"** differs from {self.reference} at adjusted p<0.01 (McNemar, Bonferroni m={self.bonferroni_m})",
        ]

    def to_markdown(self, digits: int = 3) -> str:
        def fmt(x: float | None) -> str:
            return "" if x is None else f"{x:.{digits}f}"

        def esc(text: str) -> str:
            return text.replace("|", "\\|").replace("*", "\\*")

        header, rows = self._rows(fmt)
        title = "F1-scores" if self.mode == "binary" else "Cohen's kappa scores"
        lines = [f"{title} ({self.schema.name}, {self.n_reports} reports)", ""]
        lines.append("| " + " | ".join(esc(h) for h in header) + " |")
        lines.append("|" + "|".join([":---"] + [":---:"] * (len(header) - 1)) + "|")
        footer_start = len(self.schema.findings)
        for i, row in enumerate(rows):
            cells = [esc(c) for c in row]
            if i >= footer_start:
                cells[0] = f"**{cells[0]}**"
            lines.append("| " + " | ".join(cells) + " |")
        notes = self.notes()
        if notes:
            lines.append("")
            lines.extend(esc(n) + "  " for n in notes)
        return "\n".join(lines) + "\n"

    def to_csv(self, digits: int = 3) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header, rows = self._rows(lambda x: "" if x is None else f"{x:.{digits}f}")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()

    def write(self, out_dir: str | Path, name: str | None = None) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = name or self.mode
        paths = [out / f"{stem}.json", out / f"{stem}.md", out / f"{stem}.csv"]
        paths[0].write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        paths[1].write_text(self.to_markdown(), encoding="utf-8")
        paths[2].write_text(self.to_csv(), encoding="utf-8")
        return paths


def _unique_names(runs: Sequence[RunPredictions]) -> list[str]:
    names = [r.name for r in runs]
    if len(set(names)) == len(names):
        return names
    return [
        f"{r.name} ({r.path.name})" if names.count(r.name) > 1 and r.path is not None else r.name
        for r in runs
    ]


def evaluate_runs(
    runs: Sequence[RunPredictions],
    gold: Dataset,
    mode: EvalMode = "binary",
    *,
    reference: RunPredictions | None = None,
    bonferroni_m: int | None = None,
    per_finding_tests: bool = False,
) -> EvaluationReport:
    """Score every run against gold; optionally test each against a reference run."""
    schema = gold.schema
    if gold.gold is None:
        raise DataValidationError("gold dataset carries no labels")
    if mode == "multiclass3" and schema.arity != 3:
        raise DataValidationError(f"multiclass3 evaluation needs a 3-class schema; {schema.name} has {schema.arity}")
    gold_ids = set(gold.ids)
    all_runs = list(runs)
    if reference is not None and all(r is not reference for r in all_runs):
        all_runs.append(reference)
    for run in all_runs:
        if tuple(run.findings) != schema.findings:
            raise DataValidationError(f"{run.name}: findings {run.findings} do not match {list(schema.findings)}")
        if set(run.predictions) != gold_ids:
            missing = sorted(gold_ids - set(run.predictions))[:5]
            extra = sorted(set(run.predictions) - gold_ids)[:5]
            raise DataValidationError(f"{run.name}: report ids do not match gold (missing {missing}, extra {extra})")
        leaked = gold_ids & set(run.few_shot_ids)
        if leaked:
            raise DataValidationError(f"{run.name}: few-shot examples present in evaluation split: {sorted(leaked)[:5]}")

    policy = CollapsePolicy(mode)
    gold_vecs = {rid: collapse(gold.gold_vector(rid), policy) for rid in gold.ids}

    def prepared(run: RunPredictions) -> dict[str, LabelVector]:
        # propagated runs are re-propagated after the binary collapse so that a
        # MAYBE child counted as positive also counts its parent
        propagated = bool(run.manifest) and run.manifest.get("hierarchy_propagation") == "predictions"
        return {rid: evaluation_view(vec, schema, mode, propagate=propagated) for rid, vec in run.predictions.items()}

    names = _unique_names(all_runs)
    ref_preds = prepared(reference) if reference is not None else None
    ref_name = names[all_runs.index(reference)] if reference is not None else None
    comparators = [r for r in all_runs if r is not reference]
    m = bonferroni_m if bonferroni_m is not None else max(1, len(comparators))
    if reference is not None and mode != "binary":
        log.warning("significance tests are computed on binary labels only; skipped in %s mode", mode)

    models: list[ModelMetrics] = []
    for run, name in zip(all_runs, names):
        preds = prepared(run)
        if mode == "binary":
            counts = {f: confusion_counts(preds, gold_vecs, f) for f in schema.findings}
            micro, macro = micro_macro(list(counts.values()))
            metrics = ModelMetrics(
                name,
                {f: f1(c) for f, c in counts.items()},
                {f: {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn} for f, c in counts.items()},
                micro_f1=micro,
                macro_f1=macro,
            )
            if ref_preds is not None and run is not reference:
                metrics.significance = compare_to_reference(name, ref_preds, preds, gold_vecs, m)
                if per_finding_tests:
                    metrics.per_finding_significance = {
                        f: compare_to_reference(name, ref_preds, preds, gold_vecs, m, [f]) for f in schema.findings
                    }
        else:
            kappas = {
                f: cohens_kappa(preds, gold_vecs, policy.target, finding=f) for f in schema.findings
            }
            metrics = ModelMetrics(name, kappas, average_kappa=math.fsum(kappas.values()) / len(kappas))
        models.append(metrics)

    # reference column goes last
    if reference is not None:
        idx = next(i for i, r in enumerate(all_runs) if r is reference)
        models.append(models.pop(idx))
    return EvaluationReport(mode, schema, models, ref_name if mode == "binary" else None,
                            m if reference is not None and mode == "binary" else None, len(gold_ids))
