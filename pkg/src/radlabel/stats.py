"""Evaluation statistics: F1, Cohen's kappa, McNemar's test, Bonferroni."""
from __future__ import annotations

import math
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from fractions import Fraction

from radlabel.schema import FindingLabel, LabelVector

Labeled = Mapping[str, LabelVector]

# discordant-pair count at which McNemar switches from exact to chi-square
EXACT_MCNEMAR_LIMIT = 25

CONVENTIONS = {
    "f1_zero_denominator": 1.0,
    "kappa_degenerate": "1.0 if observed agreement is 1 else 0.0",
    "mcnemar": f"exact binomial when b+c < {EXACT_MCNEMAR_LIMIT}, else chi-square with continuity correction",
}


class DomainMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_ids(pred: Labeled, gold: Labeled) -> list[str]:
    if set(pred) != set(gold):
        only_p = sorted(set(pred) - set(gold))[:5]
        only_g = sorted(set(gold) - set(pred))[:5]
        raise DomainMismatchError(f"report ids differ (pred only: {only_p}, gold only: {only_g})")
    return sorted(gold)


def _binary(label: FindingLabel) -> bool:
    if label is FindingLabel.YES:
        return True
    if label is FindingLabel.NO:
        return False
    raise ValueError(f"binary metrics need YES/NO labels, got {label.name}")


def confusion_counts(pred: Labeled, gold: Labeled, finding: str) -> ConfusionCounts:
    tp = fp = fn = tn = 0
    for rid in _check_ids(pred, gold):
        p = _binary(pred[rid][finding])
        g = _binary(gold[rid][finding])
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def f1(counts: ConfusionCounts) -> float:
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2 * counts.tp / denom


def micro_macro(per_finding: Sequence[ConfusionCounts]) -> tuple[float, float]:
    if not per_finding:
        raise ValueError("need at least one finding")
    pooled = sum(per_finding, ConfusionCounts())
    macro = math.fsum(f1(c) for c in per_finding) / len(per_finding)
    return f1(pooled), macro


def cohens_kappa(
    pred: Sequence[FindingLabel] | Labeled,
    gold: Sequence[FindingLabel] | Labeled,
    classes: Sequence[FindingLabel] | None = None,
    finding: str | None = None,
) -> float:
    """Chance-corrected agreement. Accepts label sequences, or labeled sets plus a finding."""
    if isinstance(pred, Mapping) or isinstance(gold, Mapping):
        if finding is None:
            raise ValueError("finding is required when passing labeled sets")
        ids = _check_ids(pred, gold)  # type: ignore[arg-type]
        a = [pred[i][finding] for i in ids]  # type: ignore[index]
        b = [gold[i][finding] for i in ids]  # type: ignore[index]
    else:
        a, b = list(pred), list(gold)
        if len(a) != len(b):
            raise DomainMismatchError("label sequences differ in length")
    n = len(a)
    if n == 0:
        raise ValueError("kappa of an empty sample")
    if classes is not None:
        allowed = set(classes)
        bad = {x for x in a + b if x not in allowed}
        if bad:
            raise ValueError(f"labels outside classes: {sorted(x.value for x in bad)}")
    p_o = sum(x == y for x, y in zip(a, b)) / n
    ca, cb = Counter(a), Counter(b)
    p_e = math.fsum(ca[k] * cb[k] for k in ca) / (n * n)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def paired_contingency(
    pred_a: Labeled, pred_b: Labeled, gold: Labeled, findings: Sequence[str] | None = None
) -> tuple[int, int, int, int]:
    """(n11, n10, n01, n00) over (report, finding) pairs; n10 = A right, B wrong."""
    ids = _check_ids(pred_a, gold)
    _check_ids(pred_b, gold)
    if findings is None:
        findings = list(next(iter(gold.values()))) if gold else []
    n11 = n10 = n01 = n00 = 0
    for rid in ids:
        for f in findings:
            g = _binary(gold[rid][f])
            ok_a = _binary(pred_a[rid][f]) == g
            ok_b = _binary(pred_b[rid][f]) == g
            if ok_a and ok_b:
                n11 += 1
            elif ok_a:
                n10 += 1
            elif ok_b:
                n01 += 1
            else:
                n00 += 1
    return n11, n10, n01, n00


def chi2_sf_1df(x: float) -> float:
    """Upper tail of the 1-df chi-square distribution."""
    if x <= 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2.0))


def mcnemar_exact_p(b: int, c: int) -> float:
    n = b + c
    if n == 0:
        return 1.0
    tail = sum(math.comb(n, k) for k in range(min(b, c) + 1))
    return float(min(Fraction(1), Fraction(2 * tail, 2**n)))


def mcnemar_chi2_p(b: int, c: int) -> float:
    n = b + c
    if n == 0:
        return 1.0
    stat = max(0, abs(b - c) - 1) ** 2 / n
    return chi2_sf_1df(stat)


def mcnemar_p(b: int, c: int) -> float:
    """Two-sided McNemar p-value from the discordant counts."""
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    if b + c < EXACT_MCNEMAR_LIMIT:
        return mcnemar_exact_p(b, c)
    return mcnemar_chi2_p(b, c)


def bonferroni(raw_p: float, m: int) -> float:
    if m < 1:
        raise ValueError("number of comparisons must be positive")
    if not 0.0 <= raw_p <= 1.0:
        raise ValueError(f"p-value out of range: {raw_p}")
    return min(1.0, m * raw_p)


def stars(adjusted_p: float) -> str:
    if adjusted_p < 0.01:
        return "**"
    if adjusted_p < 0.05:
        return "*"
    return ""


@dataclass(frozen=True)
class SignificanceResult:
    comparator_model: str
    b: int
    c: int
    raw_p: float
    adjusted_p: float
    stars: str

    def to_dict(self) -> dict:
        return {
            "comparator_model": self.comparator_model,
            "b": self.b,
            "c": self.c,
            "raw_p": self.raw_p,
            "adjusted_p": self.adjusted_p,
            "stars": self.stars,
        }


def compare_to_reference(
    name: str,
    reference: Labeled,
    comparator: Labeled,
    gold: Labeled,
    m: int,
    findings: Sequence[str] | None = None,
) -> SignificanceResult:
    _, b, c, _ = paired_contingency(reference, comparator, gold, findings)
    raw = mcnemar_p(b, c)
    adj = bonferroni(raw, m)
    return SignificanceResult(name, b, c, raw, adj, stars(adj))
