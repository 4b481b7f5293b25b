import json
import random

import pytest
from conftest import load_parser_cases, random_vector
from hypothesis import given, settings
from hypothesis import strategies as st

from radlabel.parsing import (
    ExtractionError,
    NormalizationPolicy,
    extract_json,
    normalize_label,
    parse_labels,
)
from radlabel.prompts import serialize_answer
from radlabel.schema import FindingLabel, LabelVector, builtin_schema

Y, M, N, NI = FindingLabel.YES, FindingLabel.MAYBE, FindingLabel.NO, FindingLabel.NO_INFORMATION
CASES = load_parser_cases()


def test_extract_direct():
    assert extract_json('{"pneumonia": "No"}') == ({"pneumonia": "No"}, "direct", False)


def test_extract_embedded():
    obj, method, _ = extract_json('Sure! Here is the JSON: {"pneumonia": "No"}')
    assert obj == {"pneumonia": "No"} and method == "embedded"


def test_extract_truncated_is_repaired():
    obj, method, truncated = extract_json('{"atelectasis": "Yes", "pleural_eff')
    assert obj == {"atelectasis": "Yes"} and method == "repaired" and truncated
    # repaired text re-serializes to something that parses to the same object
    assert json.loads(json.dumps(obj)) == obj


def test_extract_failure():
    with pytest.raises(ExtractionError):
        extract_json("no json here")


@pytest.mark.parametrize(
    "token, classes, policy, expected",
    [
        ("Yes", "imagenome", "strict", (Y, False)),
        ("  yes ", "imagenome", "strict", (Y, False)),
        ("Possible", "imagenome", "strict", (N, True)),
        ("Possible", "chexpert13", "lenient", (M, True)),
        ("Uncertain", "chexpert13", "lenient", (M, True)),
        ("Suspect", "chexpert13", "lenient", (M, True)),
        ("Possibly", "chexpert13", "lenient", (M, True)),
        ("present", "chexpert13", "lenient", (Y, True)),
        ("Negative", "chexpert13", "lenient", (N, True)),
        ("No Information", "chexpert13", "lenient", (NI, True)),
        ("not   mentioned", "chexpert13", "lenient", (NI, True)),
        ("gibberish", "chexpert13", "lenient", (N, True)),
        ("Maybe", "chexpert13", "strict", (M, False)),
        ("Maybe", "imagenome", "strict", (N, True)),
    ],
)
def test_normalize_label(token, classes, policy, expected):
    schema = builtin_schema(classes)
    assert normalize_label(token, schema.classes, NormalizationPolicy(policy)) == expected


@pytest.mark.parametrize("case", CASES, ids=[c["note"] for c in CASES])
def test_fixture_corpus(case):
    schema = builtin_schema(case["schema"])
    labels, diag = parse_labels(case["raw_text"], schema, finish_reason=case["finish_reason"])
    assert labels.to_strings() == case["expected"]
    assert diag.to_dict() == case["expected_diagnostics"]


def test_fixture_corpus_size():
    assert len(CASES) == 50
    notes = " ".join(c["note"] for c in CASES)
    for token in ("Possible", "Uncertain", "Suspect", "Possibly"):
        assert token in notes


def test_missing_finding_defaults_to_no(imagenome):
    raw = '{"Atelectasis": "Yes", "Pleural Effusion": "No", "Pneumonia": "No"}'
    labels, diag = parse_labels(raw, imagenome)
    assert labels["pneumothorax"] is N
    assert diag.missing_findings == ["pneumothorax"]


def test_qwen_style_possible(imagenome):
    raw = '{"Atelectasis": "No", "Pleural Effusion": "No", "Pneumonia": "Possible", "Pneumothorax": "No"}'
    labels, diag = parse_labels(raw, imagenome, NormalizationPolicy.strict())
    assert labels["pneumonia"] is N
    assert diag.off_template_tokens == [("pneumonia", "Possible", N)]
    lenient, _ = parse_labels(raw, imagenome, NormalizationPolicy.lenient())
    assert lenient["pneumonia"] is M


def test_failed_extraction_defaults_all_no(chexpert):
    labels, diag = parse_labels("```", chexpert)
    assert labels == LabelVector.uniform(chexpert)
    assert diag.extraction_method == "failed" and diag.missing_findings == list(chexpert.findings)


@pytest.mark.parametrize("name", ["imagenome", "chexpert13"])
def test_round_trip(name):
    schema = builtin_schema(name)
    rng = random.Random(11)
    for _ in range(200):
        vec = random_vector(schema, rng)
        labels, diag = parse_labels(serialize_answer(vec, schema), schema)
        assert labels == vec and diag.clean


@settings(max_examples=300, deadline=None)
@given(st.one_of(st.text(), st.binary().map(lambda b: b.decode("latin-1"))))
def test_parse_is_total(raw):
    for name in ("imagenome", "chexpert13"):
        schema = builtin_schema(name)
        labels, diag = parse_labels(raw, schema)
        assert labels.conforms_to(schema)
        assert set(labels.values()) <= set(schema.classes)


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.sampled_from(["Atelectasis", "Pneumonia", "x", "Pleural Effusion"]),
                       st.one_of(st.text(max_size=12), st.integers(), st.booleans(), st.none()), max_size=5),
       st.integers(0, 60))
def test_truncated_json_never_breaks_strict_mode(obj, cut):
    schema = builtin_schema("imagenome")
    text = json.dumps(obj)[:cut]
    labels, _ = parse_labels(text, schema)
    assert M not in labels.values()
