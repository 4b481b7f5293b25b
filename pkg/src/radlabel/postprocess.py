"""Label collapse and CheXpert-style hierarchy propagation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

from radlabel.schema import FindingLabel, FindingSchema, LabelVector

# canonical order applied to model predictions
PIPELINE_STAGES = ("normalize", "collapse_no_information", "propagate_hierarchy", "binary_collapse_at_eval", "evaluate")


class UncollapsedLabelsError(ValueError):
    pass


@dataclass(frozen=True)
class CollapsePolicy:
    mode: Literal["binary", "multiclass3"] = "multiclass3"

    @property
    def target(self) -> frozenset[FindingLabel]:
        if self.mode == "binary":
            return frozenset({FindingLabel.YES, FindingLabel.NO})
        return frozenset({FindingLabel.YES, FindingLabel.MAYBE, FindingLabel.NO})


_BINARY = {
    FindingLabel.YES: FindingLabel.YES,
    FindingLabel.MAYBE: FindingLabel.YES,
    FindingLabel.NO: FindingLabel.NO,
    FindingLabel.NO_INFORMATION: FindingLabel.NO,
}
_MULTI = {
    FindingLabel.YES: FindingLabel.YES,
    FindingLabel.MAYBE: FindingLabel.MAYBE,
    FindingLabel.NO: FindingLabel.NO,
    FindingLabel.NO_INFORMATION: FindingLabel.NO,
}


def collapse(labels: LabelVector, policy: CollapsePolicy) -> LabelVector:
    table = _BINARY if policy.mode == "binary" else _MULTI
    return LabelVector({f: table[v] for f, v in labels.items()})


def _rule_order(schema: FindingSchema):
    """Rules ordered so that a parent which is also a child is settled first."""
    rules = list(schema.hierarchy)
    parents = {r.parent for r in rules}
    ordered = []
    done: set[str] = set()
    while rules:
        progressed = False
        for rule in list(rules):
            pending = [c for c in rule.children if c in parents and c not in done]
            if not pending:
                ordered.append(rule)
                done.add(rule.parent)
                rules.remove(rule)
                progressed = True
        if not progressed:  # pragma: no cover - schema validation rejects cycles
            raise ValueError("cyclic hierarchy")
    return ordered


def propagate_hierarchy(labels: LabelVector, schema: FindingSchema) -> LabelVector:
    """A YES child forces its parent to YES. MAYBE children never promote."""
    if FindingLabel.NO_INFORMATION in labels.values():
        raise UncollapsedLabelsError("uncollapsed labels: run collapse() before propagation")
    items = dict(labels)
    for rule in _rule_order(schema):
        if any(items[c] is FindingLabel.YES for c in rule.children):
            items[rule.parent] = FindingLabel.YES
    return LabelVector(items)


def postprocess_prediction(labels: LabelVector, schema: FindingSchema, *, propagate: bool = True) -> LabelVector:
    """NO_INFORMATION -> NO, then hierarchy propagation; MAYBE is kept."""
    out = collapse(labels, CollapsePolicy("multiclass3"))
    return propagate_hierarchy(out, schema) if propagate else out


def evaluation_view(
    labels: LabelVector, schema: FindingSchema, mode: Literal["binary", "multiclass3"], *, propagate: bool = True
) -> LabelVector:
    """Labels as scored: collapse to the evaluation classes, then propagate.

    In binary mode a MAYBE child becomes YES here, so its parent is promoted
    only at this point.
    """
    out = collapse(labels, CollapsePolicy(mode))
    return propagate_hierarchy(out, schema) if propagate else out
