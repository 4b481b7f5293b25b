"""Domain types shared across the pipeline: findings, labels, schemas, datasets."""
from __future__ import annotations

import enum
import hashlib
import json
import re
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any


class SchemaError(ValueError):
    """Raised when a schema or dataset file is malformed."""


class FindingLabel(enum.Enum):
    NO = "no"
    MAYBE = "maybe"
    YES = "yes"
    NO_INFORMATION = "no_information"

    @classmethod
    def from_str(cls, value: str) -> FindingLabel:
        try:
            return cls(value.strip().lower())
        except ValueError:
            raise SchemaError(f"unknown label {value!r}") from None

    @property
    def display(self) -> str:
        return "No Information" if self is FindingLabel.NO_INFORMATION else self.value.capitalize()


_RANKS = {FindingLabel.NO: 0, FindingLabel.MAYBE: 1, FindingLabel.YES: 2}


def label_rank(label: FindingLabel) -> int:
    """Severity rank NO < MAYBE < YES. NO_INFORMATION has no rank."""
    try:
        return _RANKS[label]
    except KeyError:
        raise ValueError(f"unranked label: {label.name}") from None


def fold_key(text: str) -> str:
    """Lowercase and collapse punctuation/whitespace runs to single underscores."""
    return re.sub(r"[^0-9a-z]+", "_", text.lower()).strip("_")


@dataclass(frozen=True)
class HierarchyRule:
    parent: str
    children: tuple[str, ...]


@dataclass(frozen=True)
class FindingSchema:
    name: str
    findings: tuple[str, ...]
    classes: tuple[FindingLabel, ...]
    hierarchy: tuple[HierarchyRule, ...] = ()
    display_names: Mapping[str, str] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self) -> None:
        if len(set(self.findings)) != len(self.findings):
            raise SchemaError("finding identifiers must be unique")
        if not self.findings:
            raise SchemaError("schema needs at least one finding")
        allowed = ({FindingLabel.YES, FindingLabel.NO}, {FindingLabel.YES, FindingLabel.MAYBE, FindingLabel.NO})
        if set(self.classes) not in allowed or len(self.classes) != len(set(self.classes)):
            raise SchemaError(f"classes must be yes/no or yes/maybe/no, got {[c.value for c in self.classes]}")
        known = set(self.findings)
        for rule in self.hierarchy:
            for name in (rule.parent, *rule.children):
                if name not in known:
                    raise SchemaError(f"hierarchy references unknown finding {name!r}")
            if rule.parent in rule.children:
                raise SchemaError(f"finding {rule.parent!r} cannot be its own child")
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        edges: dict[str, set[str]] = {}
        for rule in self.hierarchy:
            for child in rule.children:
                edges.setdefault(child, set()).add(rule.parent)
        state: dict[str, int] = {}

        def visit(node: str) -> None:
            state[node] = 1
            for nxt in edges.get(node, ()):
                if state.get(nxt) == 1:
                    raise SchemaError("hierarchy contains a cycle")
                if nxt not in state:
                    visit(nxt)
            state[node] = 2

        for node in edges:
            if node not in state:
                visit(node)

    @property
    def arity(self) -> int:
        return len(self.classes)

    def display_name(self, finding: str) -> str:
        return self.display_names.get(finding) or finding.replace("_", " ").title()

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "name": self.name,
            "classes": [c.value for c in self.classes],
            "findings": list(self.findings),
            "hierarchy": [{"parent": r.parent, "children": list(r.children)} for r in self.hierarchy],
        }
        if self.display_names:
            out["display_names"] = {f: self.display_names[f] for f in self.findings if f in self.display_names}
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> FindingSchema:
        try:
            classes = tuple(FindingLabel.from_str(c) for c in data["classes"])
            hierarchy = tuple(
                HierarchyRule(parent=h["parent"], children=tuple(h["children"]))
                for h in data.get("hierarchy", ())
            )
            return cls(
                name=str(data["name"]),
                findings=tuple(data["findings"]),
                classes=classes,
                hierarchy=hierarchy,
                display_names=dict(data.get("display_names", {})),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from exc

    def digest(self) -> str:
        return content_digest(self.to_dict())


def content_digest(payload: Any) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return "sha256:" + hashlib.sha256(blob.encode("utf-8")).hexdigest()


def load_schema(path: str | Path) -> FindingSchema:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    return FindingSchema.from_dict(data)


def builtin_schema(name: str) -> FindingSchema:
    """Load one of the bundled schemas: ``imagenome`` or ``chexpert13``."""
    text = resources.files("radlabel.data").joinpath(f"schema_{name}.json").read_text(encoding="utf-8")
    return FindingSchema.from_dict(json.loads(text))


class LabelVector(Mapping[str, FindingLabel]):
    """Immutable finding -> label assignment, ordered like the schema it was built for."""

    __slots__ = ("_items",)

    def __init__(self, assignments: Mapping[str, FindingLabel] | Iterator[tuple[str, FindingLabel]]):
        items = dict(assignments)
        for key, value in items.items():
            if not isinstance(value, FindingLabel):
                raise TypeError(f"label for {key!r} must be a FindingLabel, got {value!r}")
        self._items = items

    @classmethod
    def uniform(cls, schema: FindingSchema, label: FindingLabel = FindingLabel.NO) -> LabelVector:
        return cls({f: label for f in schema.findings})

    @classmethod
    def from_strings(cls, schema: FindingSchema, labels: Mapping[str, str]) -> LabelVector:
        return cls({f: FindingLabel.from_str(labels[f]) for f in schema.findings})

    @classmethod
    def from_strings_ordered(cls, findings: list[str] | tuple[str, ...], values: list[str]) -> LabelVector:
        return cls({f: FindingLabel.from_str(v) for f, v in zip(findings, values, strict=True)})

    def __getitem__(self, key: str) -> FindingLabel:
        return self._items[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, LabelVector):
            return self._items == other._items
        return NotImplemented

    def __hash__(self) -> int:
        return hash(frozenset(self._items.items()))

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v.value}" for k, v in self._items.items())
        return f"LabelVector({inner})"

    def replace(self, **changes: FindingLabel) -> LabelVector:
        items = dict(self._items)
        for key, value in changes.items():
            if key not in items:
                raise KeyError(key)
            items[key] = value
        return LabelVector(items)

    def conforms_to(self, schema: FindingSchema) -> bool:
        return set(self._items) == set(schema.findings)

    def to_strings(self) -> dict[str, str]:
        return {k: v.value for k, v in self._items.items()}


@dataclass(frozen=True)
class Report:
    id: str
    text: str

    def __post_init__(self) -> None:
        if not self.id:
            raise SchemaError("report id must be non-empty")
        if not self.text or not self.text.strip():
            raise SchemaError(f"report {self.id!r} has empty text")


@dataclass(frozen=True)
class Dataset:
    schema: FindingSchema
    reports: tuple[Report, ...]
    gold: Mapping[str, Mapping[str, Any]] | None = None

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.reports]

    def gold_vector(self, report_id: str) -> LabelVector:
        if self.gold is None or report_id not in self.gold:
            raise KeyError(f"no gold labels for report {report_id!r}")
        return LabelVector.from_strings(self.schema, self.gold[report_id])

    def subset(self, ids: set[str], *, exclude: bool = False) -> Dataset:
        keep = tuple(r for r in self.reports if (r.id in ids) != exclude)
        gold = None
        if self.gold is not None:
            kept = {r.id for r in keep}
            gold = {k: v for k, v in self.gold.items() if k in kept}
        return Dataset(self.schema, keep, gold)

    def digest(self) -> str:
        return content_digest([_record(r, self.gold) for r in self.reports])


def _record(report: Report, gold: Mapping[str, Mapping[str, Any]] | None) -> dict[str, Any]:
    rec: dict[str, Any] = {"id": report.id, "text": report.text}
    if gold is not None and report.id in gold:
        rec["labels"] = dict(gold[report.id])
    return rec


def validate_dataset(dataset: Dataset) -> list[str]:
    """Return every invariant violation found in ``dataset``; empty means valid."""
    problems: list[str] = []
    seen: set[str] = set()
    for report in dataset.reports:
        if report.id in seen:
            problems.append(f"duplicate report id {report.id!r}")
        seen.add(report.id)
    if dataset.gold is None:
        return problems
    findings = set(dataset.schema.findings)
    allowed = {c.value for c in dataset.schema.classes}
    for report_id, labels in dataset.gold.items():
        if report_id not in seen:
            problems.append(f"gold labels for unknown report id {report_id!r}")
        if not isinstance(labels, Mapping):
            problems.append(f"{report_id}: gold labels must be an object")
            continue
        for finding, value in labels.items():
            if finding not in findings:
                problems.append(f"{report_id}: unknown finding {finding!r}")
            elif not isinstance(value, str) or value.strip().lower() not in allowed:
                problems.append(f"{report_id}: label {value!r} for {finding} outside schema classes")
        for finding in dataset.schema.findings:
            if finding not in labels:
                problems.append(f"{report_id}: missing gold label for {finding}")
    return problems


def load_dataset(path: str | Path, schema: FindingSchema) -> Dataset:
    """Read a JSON Lines dataset. Blank lines are skipped."""
    reports: list[Report] = []
    gold: dict[str, dict[str, str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                report = Report(id=str(obj["id"]), text=obj["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad record: {exc}") from exc
            reports.append(report)
            if "labels" in obj and obj["labels"] is not None:
                gold[report.id] = {k: (v.lower() if isinstance(v, str) else v) for k, v in obj["labels"].items()}
    return Dataset(schema, tuple(reports), gold if gold else None)


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for report in dataset.reports:
            fh.write(json.dumps(_record(report, dataset.gold), ensure_ascii=False) + "\n")
