"""Majority-vote ensembling of per-model predictions."""
from __future__ import annotations

from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

from radlabel.schema import FindingLabel, LabelVector

TieBreak = Literal["first", "no"]


@dataclass(frozen=True)
class EnsembleConfig:
    """Members in priority order. ``tie_break="first"`` lets the highest-priority
    member among the tied labels decide; ``"no"`` resolves ties to NO."""

    member_model_ids: tuple[str, ...]
    tie_break: TieBreak = "first"

    def __post_init__(self) -> None:
        if len(self.member_model_ids) < 2:
            raise ValueError("an ensemble needs at least two members")
        if len(set(self.member_model_ids)) != len(self.member_model_ids):
            raise ValueError("ensemble member ids must be unique")
        if self.tie_break not in ("first", "no"):
            raise ValueError(f"unknown tie-break rule {self.tie_break!r}")


def vote(per_model: Sequence[LabelVector], config: EnsembleConfig) -> tuple[LabelVector, list[str]]:
    """Vote each finding; returns the result and the findings that needed a tie-break."""
    if len(per_model) != len(config.member_model_ids):
        raise ValueError(f"expected {len(config.member_model_ids)} member vectors, got {len(per_model)}")
    keys = list(per_model[0])
    for vec in per_model[1:]:
        if list(vec) != keys:
            raise ValueError("schema mismatch between ensemble members")
    out: dict[str, FindingLabel] = {}
    ties: list[str] = []
    for f in keys:
        column = [vec[f] for vec in per_model]
        counts = Counter(column)
        top = max(counts.values())
        leaders = {lab for lab, n in counts.items() if n == top}
        if len(leaders) == 1:
            out[f] = leaders.pop()
            continue
        ties.append(f)
        if config.tie_break == "no":
            out[f] = FindingLabel.NO
        else:
            out[f] = next(lab for lab in column if lab in leaders)
    return LabelVector(out), ties


def majority_vote(per_model: Sequence[LabelVector], config: EnsembleConfig) -> LabelVector:
    return vote(per_model, config)[0]
