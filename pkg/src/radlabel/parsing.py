"""Extract a JSON answer from free-form model output and map it onto a schema."""
from __future__ import annotations

import json
import logging
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Literal

from radlabel.schema import FindingLabel, FindingSchema, LabelVector, fold_key

log = logging.getLogger(__name__)

ExtractionMethod = Literal["direct", "embedded", "repaired", "failed"]

DEFAULT_SYNONYMS: dict[str, FindingLabel] = {
    "maybe": FindingLabel.MAYBE,
    "possible": FindingLabel.MAYBE,
    "possibly": FindingLabel.MAYBE,
    "uncertain": FindingLabel.MAYBE,
    "suspect": FindingLabel.MAYBE,
    "suspected": FindingLabel.MAYBE,
    "probable": FindingLabel.MAYBE,
    "likely": FindingLabel.MAYBE,
    "questionable": FindingLabel.MAYBE,
    "present": FindingLabel.YES,
    "positive": FindingLabel.YES,
    "absent": FindingLabel.NO,
    "negative": FindingLabel.NO,
    "none": FindingLabel.NO,
    "no information": FindingLabel.NO_INFORMATION,
    "undefined": FindingLabel.NO_INFORMATION,
    "not mentioned": FindingLabel.NO_INFORMATION,
}


@dataclass(frozen=True)
class NormalizationPolicy:
    mode: Literal["strict", "lenient"] = "strict"
    synonym_map: Mapping[str, FindingLabel] = field(default_factory=lambda: dict(DEFAULT_SYNONYMS))

    @classmethod
    def strict(cls) -> NormalizationPolicy:
        return cls("strict")

    @classmethod
    def lenient(cls, synonym_map: Mapping[str, FindingLabel] | None = None) -> NormalizationPolicy:
        return cls("lenient", dict(synonym_map) if synonym_map is not None else dict(DEFAULT_SYNONYMS))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"mode": self.mode}
        if self.mode == "lenient":
            out["synonym_map"] = {k: v.value for k, v in sorted(self.synonym_map.items())}
        return out


@dataclass
class ParseDiagnostics:
    extraction_method: ExtractionMethod = "direct"
    off_template_tokens: list[tuple[str, str, FindingLabel]] = field(default_factory=list)
    missing_findings: list[str] = field(default_factory=list)
    extra_keys: list[str] = field(default_factory=list)
    truncated: bool = False

    @property
    def clean(self) -> bool:
        return (
            self.extraction_method == "direct"
            and not self.off_template_tokens
            and not self.missing_findings
            and not self.extra_keys
            and not self.truncated
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "extraction_method": self.extraction_method,
            "off_template_tokens": [[f, tok, lab.value] for f, tok, lab in self.off_template_tokens],
            "missing_findings": list(self.missing_findings),
            "extra_keys": list(self.extra_keys),
            "truncated": self.truncated,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ParseDiagnostics:
        return cls(
            extraction_method=data["extraction_method"],
            off_template_tokens=[(f, tok, FindingLabel(lab)) for f, tok, lab in data["off_template_tokens"]],
            missing_findings=list(data["missing_findings"]),
            extra_keys=list(data.get("extra_keys", [])),
            truncated=bool(data["truncated"]),
        )


class ExtractionError(ValueError):
    pass


def _loads_object(text: str) -> dict | None:
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, RecursionError):
        return None
    return obj if isinstance(obj, dict) else None


def _balanced_regions(text: str):
    """Yield every top-level ``{...}`` region, honouring JSON string quoting."""
    i = 0
    n = len(text)
    while True:
        start = text.find("{", i)
        if start < 0:
            return
        depth = 0
        in_str = False
        esc = False
        end = None
        for j in range(start, n):
            ch = text[j]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    end = j
                    break
        if end is None:
            return
        yield text[start : end + 1]
        i = start + 1


_FENCE = re.compile(r"```[a-zA-Z]*")
_TRAILING_COMMA = re.compile(r",(\s*[}\]])")


def _scan(text: str) -> tuple[list[str], bool, list[int]]:
    """Return the open-bracket stack, whether we end inside a string, and comma cut points."""
    stack: list[str] = []
    in_str = False
    esc = False
    cuts: list[int] = []
    for j, ch in enumerate(text):
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch in "{[":
            stack.append(ch)
        elif ch in "}]":
            if stack:
                stack.pop()
        elif ch == "," and stack:
            cuts.append(j)
    return stack, in_str, cuts


def _close(prefix: str) -> str:
    stack, _, _ = _scan(prefix)
    return prefix + "".join("}" if c == "{" else "]" for c in reversed(stack))


def _repair(text: str) -> tuple[dict | None, bool]:
    """Conservative repair: fences, trailing commas, truncation closure.

    Returns the object (or None) and whether truncation closure was needed.
    """
    cleaned = _FENCE.sub("", text)
    start = cleaned.find("{")
    if start < 0:
        return None, False
    cleaned = _TRAILING_COMMA.sub(r"\1", cleaned[start:]).rstrip()

    for region in _balanced_regions(cleaned):
        obj = _loads_object(_TRAILING_COMMA.sub(r"\1", region))
        if obj is not None:
            return obj, False

    stack, in_str, cuts = _scan(cleaned)
    if not stack and not in_str:
        return None, False
    # truncated: never invent content; drop the incomplete tail member
    candidates: list[str] = []
    if not in_str:
        candidates.append(cleaned.rstrip().rstrip(","))
    candidates.extend(cleaned[:c] for c in reversed(cuts))
    candidates.append(cleaned[:1])
    for cand in candidates:
        obj = _loads_object(_TRAILING_COMMA.sub(r"\1", _close(cand)))
        if obj is not None:
            return obj, True
    return None, True


def extract_json(raw_text: str) -> tuple[dict, ExtractionMethod, bool]:
    """Find a JSON object in ``raw_text``.

    Tries the whole string, then each balanced ``{...}`` region in order,
    then a repair pass. Returns ``(object, method, truncated)``; raises
    ``ExtractionError`` if nothing yields an object.
    """
    obj = _loads_object(raw_text.strip())
    if obj is not None:
        return obj, "direct", False
    for region in _balanced_regions(raw_text):
        obj = _loads_object(region)
        if obj is not None:
            return obj, "embedded", False
    obj, truncated = _repair(raw_text)
    if obj is not None:
        return obj, "repaired", truncated
    raise ExtractionError("no JSON object found in model output")


def normalize_label(
    token: Any,
    classes: tuple[FindingLabel, ...] | FindingSchema,
    policy: NormalizationPolicy | None = None,
) -> tuple[FindingLabel, bool]:
    """Map one answer token to a label; returns ``(label, was_off_template)``."""
    if isinstance(classes, FindingSchema):
        classes = classes.classes
    policy = policy or NormalizationPolicy.strict()
    text = token if isinstance(token, str) else json.dumps(token)
    key = " ".join(text.strip().lower().split())
    for cls in classes:
        if key == cls.value:
            return cls, False
    if policy.mode == "lenient":
        label = policy.synonym_map.get(key) or policy.synonym_map.get(key.replace("_", " "))
        if label is not None:
            return label, True
    return FindingLabel.NO, True


def parse_labels(
    raw_text: str,
    schema: FindingSchema,
    policy: NormalizationPolicy | None = None,
    *,
    finish_reason: str | None = None,
) -> tuple[LabelVector, ParseDiagnostics]:
    """Turn raw model output into a schema-complete LabelVector plus diagnostics.

    Never raises for bad model output: unparseable text yields an all-NO
    vector with ``extraction_method="failed"``.
    """
    policy = policy or NormalizationPolicy.strict()
    diag = ParseDiagnostics(truncated=finish_reason == "length")
    if not isinstance(raw_text, str):
        raw_text = "" if raw_text is None else str(raw_text)
    try:
        obj, method, truncated = extract_json(raw_text)
    except ExtractionError:
        diag.extraction_method = "failed"
        diag.missing_findings = list(schema.findings)
        return LabelVector.uniform(schema), diag
    diag.extraction_method = method
    diag.truncated = diag.truncated or truncated

    lookup: dict[str, str] = {}
    for f in schema.findings:
        lookup[fold_key(f)] = f
        lookup.setdefault(fold_key(schema.display_name(f)), f)

    values: dict[str, FindingLabel] = {}
    for key, token in obj.items():
        finding = lookup.get(fold_key(str(key)))
        if finding is None or finding in values:
            diag.extra_keys.append(str(key))
            continue
        label, off = normalize_label(token, schema.classes, policy)
        if off:
            diag.off_template_tokens.append((finding, token if isinstance(token, str) else json.dumps(token), label))
        values[finding] = label
    if diag.extra_keys:
        log.debug("ignored %d extra key(s) in model answer", len(diag.extra_keys))
    for f in schema.findings:
        if f not in values:
            diag.missing_findings.append(f)
            values[f] = FindingLabel.NO
    return LabelVector({f: values[f] for f in schema.findings}), diag
