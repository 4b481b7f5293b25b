from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from radlabel.schema import FindingLabel, FindingSchema, LabelVector, builtin_schema

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def imagenome() -> FindingSchema:
    return builtin_schema("imagenome")


@pytest.fixture
def chexpert() -> FindingSchema:
    return builtin_schema("chexpert13")


def random_vector(schema: FindingSchema, rng: random.Random, labels=None) -> LabelVector:
    labels = labels or schema.classes
    return LabelVector({f: rng.choice(labels) for f in schema.findings})


def binary(v: str) -> FindingLabel:
    return FindingLabel.YES if v in ("y", "Y", 1, True) else FindingLabel.NO


def load_parser_cases():
    with open(FIXTURES / "parser_cases.jsonl", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_mock_workspace(root: Path, dataset, script, *, name: str = "mock-model", default: str = "{}"):
    """Dataset, schema, script and endpoint files for a mock-backend run."""
    from radlabel.schema import write_dataset
    from radlabel.synthetic import write_script

    root.mkdir(parents=True, exist_ok=True)
    write_dataset(root / "dataset.jsonl", dataset)
    (root / "schema.json").write_text(json.dumps(dataset.schema.to_dict()))
    write_script(root / f"{name}.script.jsonl", script)
    endpoint = {
        "base_url": "mock://local",
        "model_name": name,
        "mock": {"script": f"{name}.script.jsonl", "default": default},
    }
    (root / f"{name}.endpoint.json").write_text(json.dumps(endpoint))
    return {
        "dataset": str(root / "dataset.jsonl"),
        "schema": str(root / "schema.json"),
        "endpoint": str(root / f"{name}.endpoint.json"),
    }


def label_args(ws, out, *extra):
    return ["label", "--dataset", ws["dataset"], "--schema", ws["schema"], "--endpoint", ws["endpoint"],
            "--backend", "mock", "--out", str(out), *extra]
