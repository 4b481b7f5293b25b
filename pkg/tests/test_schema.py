import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from radlabel.schema import (
    Dataset,
    FindingLabel,
    FindingSchema,
    LabelVector,
    Report,
    SchemaError,
    label_rank,
    load_dataset,
    load_schema,
    validate_dataset,
)

RANKED = [FindingLabel.NO, FindingLabel.MAYBE, FindingLabel.YES]


def test_builtin_schema_sizes(imagenome, chexpert):
    assert len(imagenome.findings) == 4 and imagenome.arity == 2
    assert len(chexpert.findings) == 13 and chexpert.arity == 3
    assert imagenome.findings == ("atelectasis", "pleural_effusion", "pneumonia", "pneumothorax")


def test_chexpert_hierarchy_edges(chexpert):
    edges = {r.parent: set(r.children) for r in chexpert.hierarchy}
    assert edges == {
        "enlarged_cardiomediastinum": {"cardiomegaly"},
        "lung_opacity": {"edema", "consolidation", "pneumonia", "lung_lesion", "atelectasis"},
    }


@pytest.mark.parametrize("label, rank", [(FindingLabel.YES, 2), (FindingLabel.MAYBE, 1), (FindingLabel.NO, 0)])
def test_label_rank(label, rank):
    assert label_rank(label) == rank


def test_label_rank_rejects_no_information():
    with pytest.raises(ValueError, match="unranked"):
        label_rank(FindingLabel.NO_INFORMATION)


@given(st.sampled_from(RANKED), st.sampled_from(RANKED))
def test_rank_is_injective(a, b):
    assert (label_rank(a) == label_rank(b)) == (a == b)


def _ds(schema, gold):
    reports = tuple(Report(rid, f"report {rid}") for rid in gold)
    return Dataset(schema, reports, gold)


def test_valid_dataset_is_ok(imagenome):
    gold = {"r1": {f: "no" for f in imagenome.findings}, "r2": {f: "yes" for f in imagenome.findings}}
    assert validate_dataset(_ds(imagenome, gold)) == []


def test_unknown_finding_is_reported(imagenome):
    gold = {"r1": {**{f: "no" for f in imagenome.findings}, "edema": "yes"}}
    problems = validate_dataset(_ds(imagenome, gold))
    assert any("unknown finding 'edema'" in p for p in problems)


def test_maybe_outside_two_class_schema(imagenome):
    gold = {"r1": {**{f: "no" for f in imagenome.findings}, "pneumonia": "maybe"}}
    problems = validate_dataset(_ds(imagenome, gold))
    assert problems == ["r1: label 'maybe' for pneumonia outside schema classes"]


def test_duplicate_ids_and_purity(imagenome):
    reports = (Report("a", "x"), Report("a", "y"))
    ds = Dataset(imagenome, reports, None)
    first = validate_dataset(ds)
    assert first == ["duplicate report id 'a'"]
    assert validate_dataset(ds) == first


def test_no_information_is_never_gold(chexpert):
    gold = {"r1": {**{f: "no" for f in chexpert.findings}, "edema": "no_information"}}
    assert validate_dataset(_ds(chexpert, gold))


def test_empty_report_text_rejected():
    with pytest.raises(SchemaError):
        Report("r1", "   ")


def test_schema_rejects_cycles_and_unknown_members():
    with pytest.raises(SchemaError, match="cycle"):
        FindingSchema("x", ("a", "b"), (FindingLabel.YES, FindingLabel.NO),
                      hierarchy=(_rule("a", "b"), _rule("b", "a")))
    with pytest.raises(SchemaError, match="unknown finding"):
        FindingSchema("x", ("a",), (FindingLabel.YES, FindingLabel.NO), hierarchy=(_rule("a", "zzz"),))
    with pytest.raises(SchemaError, match="unique"):
        FindingSchema("x", ("a", "a"), (FindingLabel.YES, FindingLabel.NO))


def _rule(parent, *children):
    from radlabel.schema import HierarchyRule

    return HierarchyRule(parent, tuple(children))


def test_schema_and_dataset_files_round_trip(tmp_path, chexpert):
    path = tmp_path / "schema.json"
    path.write_text(json.dumps(chexpert.to_dict()))
    loaded = load_schema(path)
    assert loaded == chexpert and loaded.digest() == chexpert.digest()

    data = tmp_path / "d.jsonl"
    data.write_text(
        json.dumps({"id": "1", "text": "No acute disease.", "labels": {f: "No" for f in chexpert.findings}})
        + "\n\n"
        + json.dumps({"id": "2", "text": "Unlabeled."})
        + "\n"
    )
    ds = load_dataset(data, loaded)
    assert ds.ids == ["1", "2"]
    assert ds.gold_vector("1") == LabelVector.uniform(chexpert)


def test_label_vector_is_an_immutable_value(imagenome):
    v = LabelVector.uniform(imagenome)
    w = v.replace(pneumonia=FindingLabel.YES)
    assert v["pneumonia"] is FindingLabel.NO and w["pneumonia"] is FindingLabel.YES
    assert hash(v) == hash(LabelVector.uniform(imagenome))
    with pytest.raises(KeyError):
        v.replace(edema=FindingLabel.YES)
