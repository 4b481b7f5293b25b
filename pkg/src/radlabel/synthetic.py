"""Synthetic reports and scripted mock answers with known error patterns.

Used by the test suite and for dry runs of the pipeline without an endpoint.
"""
from __future__ import annotations

import json
import random
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

from radlabel.prompts import serialize_answer
from radlabel.schema import Dataset, FindingLabel, FindingSchema, LabelVector, Report
from radlabel.stats import ConfusionCounts

_PHRASES = {
    FindingLabel.YES: "There is {name}.",
    FindingLabel.MAYBE: "Possible {name} cannot be excluded.",
    FindingLabel.NO: "No {name}.",
}

_WRAPPERS = (
    "{json}",
    "Sure! Here is the JSON:\n{json}",
    "```json\n{json}\n```",
    "{json}\nLet me know if you need anything else.",
)


def make_dataset(
    schema: FindingSchema,
    n_reports: int,
    seed: int = 0,
    prevalence: float | Mapping[str, float] = 0.2,
    maybe_rate: float = 0.05,
    id_prefix: str = "R",
) -> Dataset:
    """Random gold-labeled reports. Gold obeys the schema hierarchy in both label spaces."""
    rng = random.Random(seed)
    reports = []
    gold = {}
    width = len(str(n_reports))
    for i in range(n_reports):
        labels = {}
        for f in schema.findings:
            p = prevalence[f] if isinstance(prevalence, Mapping) else prevalence
            r = rng.random()
            if r < p:
                labels[f] = FindingLabel.YES
            elif schema.arity == 3 and r < p + maybe_rate:
                labels[f] = FindingLabel.MAYBE
            else:
                labels[f] = FindingLabel.NO
        for rule in schema.hierarchy:
            if any(labels[c] is FindingLabel.YES for c in rule.children):
                labels[rule.parent] = FindingLabel.YES
            elif any(labels[c] is FindingLabel.MAYBE for c in rule.children) and labels[rule.parent] is FindingLabel.NO:
                # keeps gold consistent once MAYBE is read as positive
                labels[rule.parent] = FindingLabel.MAYBE
        rid = f"{id_prefix}{i:0{width}d}"
        text = " ".join(_PHRASES[labels[f]].format(name=schema.display_name(f).lower()) for f in schema.findings)
        reports.append(Report(rid, f"FINDINGS: {text}\nIMPRESSION: see above."))
        gold[rid] = {f: v.value for f, v in labels.items()}
    return Dataset(schema, tuple(reports), gold)


@dataclass
class ScriptedErrors:
    script: dict[str, str]
    predicted: dict[str, LabelVector]
    counts: dict[str, ConfusionCounts]


def script_with_errors(
    dataset: Dataset,
    fn_rate: float | Mapping[str, float] = 0.0,
    fp_rate: float | Mapping[str, float] = 0.0,
    seed: int = 0,
    wrap: bool = True,
) -> ScriptedErrors:
    """Mock answers that flip an exact, seeded share of gold labels per finding.

    ``round(rate * n)`` positives become NO (false negatives) and ``round(rate * n)``
    negatives become YES (false positives). Findings that are hierarchy parents
    or children are left untouched so post-processing cannot alter the counts.
    Gold MAYBE is answered verbatim; counts are for the binary collapse
    (MAYBE counts as positive).
    """
    schema = dataset.schema
    rng = random.Random(seed)
    linked = {r.parent for r in schema.hierarchy} | {c for r in schema.hierarchy for c in r.children}
    predicted = {rid: dict(dataset.gold_vector(rid)) for rid in dataset.ids}
    counts: dict[str, ConfusionCounts] = {}
    for f in schema.findings:
        pos = [rid for rid in dataset.ids if predicted[rid][f] is not FindingLabel.NO]
        neg = [rid for rid in dataset.ids if predicted[rid][f] is FindingLabel.NO]
        if f in linked:
            n_fn = n_fp = 0
        else:
            r_fn = fn_rate[f] if isinstance(fn_rate, Mapping) else fn_rate
            r_fp = fp_rate[f] if isinstance(fp_rate, Mapping) else fp_rate
            n_fn, n_fp = round(r_fn * len(pos)), round(r_fp * len(neg))
        for rid in rng.sample(pos, n_fn):
            predicted[rid][f] = FindingLabel.NO
        for rid in rng.sample(neg, n_fp):
            predicted[rid][f] = FindingLabel.YES
        counts[f] = ConfusionCounts(len(pos) - n_fn, n_fp, n_fn, len(neg) - n_fp)
    script = {}
    vectors = {}
    for rid in dataset.ids:
        vec = LabelVector(predicted[rid])
        vectors[rid] = vec
        body = serialize_answer(vec, schema)
        script[rid] = rng.choice(_WRAPPERS).format(json=body) if wrap else body
    return ScriptedErrors(script, vectors, counts)


def write_script(path: str | Path, script: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rid in sorted(script):
            fh.write(json.dumps({"id": rid, "text": script[rid]}, ensure_ascii=False) + "\n")
