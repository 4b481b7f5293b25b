import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import chi2_survival_1df, chi2_survival_erfc, exact_binomial_p, flat_f1, kappa_by_hand, tally_pairs

from radlabel.schema import FindingLabel
from radlabel.stats import (
    EXACT_MCNEMAR_LIMIT,
    ConfusionCounts,
    DomainMismatchError,
    bonferroni,
    cohens_kappa,
    compare_to_reference,
    confusion_counts,
    f1,
    mcnemar_chi2_p,
    mcnemar_exact_p,
    mcnemar_p,
    micro_macro,
    paired_contingency,
    stars,
)

Y, M, N = FindingLabel.YES, FindingLabel.MAYBE, FindingLabel.NO


def labeled(matrix, findings):
    return {f"r{i:03d}": {f: (Y if v else N) for f, v in zip(findings, row)} for i, row in enumerate(matrix)}


def random_matrix(rng, rows, cols, p=0.3):
    return [[int(rng.random() < p) for _ in range(cols)] for _ in range(rows)]


# F1 and confusion counts

def test_confusion_counts_trivial():
    gold = labeled([[1]] * 4 + [[0]] * 6, ["f"])
    assert confusion_counts(gold, gold, "f") == ConfusionCounts(tp=4, fp=0, fn=0, tn=6)
    gold3 = labeled([[1]] * 3 + [[0]] * 7, ["f"])
    all_no = labeled([[0]] * 10, ["f"])
    assert confusion_counts(all_no, gold3, "f") == ConfusionCounts(tp=0, fp=0, fn=3, tn=7)


def test_confusion_counts_match_tally():
    rng = random.Random(1)
    p, g = random_matrix(rng, 20, 1, 0.5), random_matrix(rng, 20, 1, 0.5)
    c = confusion_counts(labeled(p, ["f"]), labeled(g, ["f"]), "f")
    pairs = list(zip((r[0] for r in p), (r[0] for r in g)))
    assert (c.tp, c.fp, c.fn, c.tn) == (pairs.count((1, 1)), pairs.count((1, 0)), pairs.count((0, 1)), pairs.count((0, 0)))


def test_id_mismatch_is_an_error():
    with pytest.raises(DomainMismatchError):
        confusion_counts(labeled([[1]], ["f"]), labeled([[1], [0]], ["f"]), "f")


def test_maybe_is_rejected_by_binary_metrics():
    with pytest.raises(ValueError):
        confusion_counts({"r": {"f": M}}, {"r": {"f": Y}}, "f")


@pytest.mark.parametrize(
    "counts, expected",
    [((4, 0, 0), 1.0), ((2, 1, 1), 2 / 3), ((0, 0, 0), 1.0), ((0, 3, 2), 0.0)],
)
def test_f1_examples(counts, expected):
    assert f1(ConfusionCounts(*counts)) == pytest.approx(expected, abs=1e-9)


def test_micro_macro_worked_example():
    micro, macro = micro_macro([ConfusionCounts(9, 1, 1), ConfusionCounts(1, 3, 3)])
    assert micro == pytest.approx(0.7143, abs=5e-5)
    assert micro == pytest.approx(20 / 28, abs=1e-9)
    assert macro == pytest.approx(0.5750, abs=1e-9)


def test_identical_findings_micro_equals_macro():
    c = ConfusionCounts(3, 2, 1, 10)
    micro, macro = micro_macro([c, c, c])
    assert micro == pytest.approx(f1(c)) and macro == pytest.approx(f1(c))


@pytest.mark.parametrize("seed", range(25))
def test_micro_f1_matches_flattened_oracle(seed):
    rng = random.Random(seed)
    cols = rng.randint(1, 13)
    findings = [f"f{j}" for j in range(cols)]
    p, g = random_matrix(rng, 40, cols), random_matrix(rng, 40, cols)
    per = [confusion_counts(labeled(p, findings), labeled(g, findings), f) for f in findings]
    micro, macro = micro_macro(per)
    assert micro == pytest.approx(flat_f1(p, g), abs=1e-12)
    by_hand = [flat_f1([[r[j]] for r in p], [[r[j]] for r in g]) for j in range(cols)]
    assert macro == pytest.approx(sum(by_hand) / cols, abs=1e-12)


def test_reordering_invariance():
    rng = random.Random(9)
    findings = [f"f{j}" for j in range(6)]
    p, g = random_matrix(rng, 30, 6), random_matrix(rng, 30, 6)
    per = [confusion_counts(labeled(p, findings), labeled(g, findings), f) for f in findings]
    shuffled = per[:]
    rng.shuffle(shuffled)
    assert micro_macro(per)[1] == pytest.approx(micro_macro(shuffled)[1], abs=1e-15)
    order = list(range(30))
    rng.shuffle(order)
    p2, g2 = [p[i] for i in order], [g[i] for i in order]
    per2 = [confusion_counts(labeled(p2, findings), labeled(g2, findings), f) for f in findings]
    assert micro_macro(per)[0] == micro_macro(per2)[0]


# kappa

def test_kappa_worked_example():
    assert cohens_kappa([Y, N, N, N], [Y, Y, N, N]) == pytest.approx(0.5, abs=1e-12)


def test_kappa_perfect_and_degenerate():
    x = [Y, M, N, N, M]
    assert cohens_kappa(x, x) == 1.0
    assert cohens_kappa([N] * 5, [N] * 5) == 1.0


def test_kappa_on_labeled_sets():
    gold = {"a": {"f": Y}, "b": {"f": Y}, "c": {"f": N}, "d": {"f": N}}
    pred = {"a": {"f": Y}, "b": {"f": N}, "c": {"f": N}, "d": {"f": N}}
    assert cohens_kappa(pred, gold, finding="f") == pytest.approx(0.5)
    with pytest.raises(DomainMismatchError):
        cohens_kappa({"a": {"f": Y}}, gold, finding="f")


LAB3 = st.sampled_from([Y, M, N])


@given(st.lists(st.tuples(LAB3, LAB3), min_size=1, max_size=60))
def test_kappa_properties(pairs):
    a = [p for p, _ in pairs]
    b = [q for _, q in pairs]
    k = cohens_kappa(a, b)
    assert -1.0 - 1e-12 <= k <= 1.0 + 1e-12
    assert k == pytest.approx(cohens_kappa(b, a), abs=1e-12)
    assert k == pytest.approx(kappa_by_hand(a, b, [Y, M, N]), abs=1e-12)


# McNemar

def test_mcnemar_worked_examples():
    assert mcnemar_p(10, 2) == pytest.approx(float(Fraction(158, 4096)), abs=1e-12)
    assert mcnemar_p(10, 2) == pytest.approx(0.038574, abs=1e-6)
    assert (29 ** 2) / 50 == pytest.approx(16.82)
    assert mcnemar_p(40, 10) == pytest.approx(chi2_survival_erfc(16.82), rel=1e-9)
    assert mcnemar_p(40, 10) == pytest.approx(4.11e-5, abs=5e-8)


@pytest.mark.parametrize("n", [0, 1, 6, 24, 25, 60])
def test_mcnemar_equal_counts_is_one(n):
    assert mcnemar_p(n, n) == 1.0


def test_exact_branch_matches_oracle_exhaustively():
    for n in range(EXACT_MCNEMAR_LIMIT):
        for b in range(n + 1):
            assert mcnemar_p(b, n - b) == pytest.approx(exact_binomial_p(b, n - b), abs=1e-9)


def test_asymptotic_branch_matches_oracle():
    rng = random.Random(4)
    for _ in range(100):
        b, c = rng.randint(0, 400), rng.randint(0, 400)
        if b + c < EXACT_MCNEMAR_LIMIT:
            continue
        stat = max(0, abs(b - c) - 1) ** 2 / (b + c)
        assert mcnemar_p(b, c) == pytest.approx(chi2_survival_1df(stat), abs=1e-9)


def test_branches_agree_near_switchover():
    for n in range(20, 31):
        for b in range(n + 1):
            assert abs(mcnemar_exact_p(b, n - b) - mcnemar_chi2_p(b, n - b)) < 0.005


@given(st.integers(0, 300), st.integers(0, 300))
def test_mcnemar_symmetric_and_in_range(b, c):
    p = mcnemar_p(b, c)
    assert p == mcnemar_p(c, b)
    assert 0.0 < p <= 1.0


def test_paired_contingency():
    rng = random.Random(2)
    findings = ["f1", "f2", "f3", "f4"]
    g = random_matrix(rng, 10, 4, 0.5)
    gold = labeled(g, findings)
    assert paired_contingency(gold, gold, gold) == (40, 0, 0, 0)
    wrong = [row[:] for row in g]
    for i in range(5):
        wrong[i][0] = 1 - wrong[i][0]
    assert paired_contingency(gold, labeled(wrong, findings), gold) == (35, 5, 0, 0)
    a, b = random_matrix(rng, 10, 4, 0.5), random_matrix(rng, 10, 4, 0.5)
    flat = lambda m: [v for row in m for v in row]  # noqa: E731
    assert paired_contingency(labeled(a, findings), labeled(b, findings), gold) == tally_pairs(flat(a), flat(b), flat(g))


# Bonferroni and stars

def test_bonferroni_examples():
    assert bonferroni(0.01, 9) == pytest.approx(0.09)
    assert bonferroni(0.3, 9) == 1.0
    assert bonferroni(0.0421, 1) == 0.0421


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 50), st.integers(1, 50))
def test_bonferroni_monotone(p1, p2, m1, m2):
    lo, hi = sorted((p1, p2))
    assert bonferroni(lo, m1) <= bonferroni(hi, m1)
    ma, mb = sorted((m1, m2))
    assert bonferroni(lo, ma) <= bonferroni(lo, mb)


@pytest.mark.parametrize("p, mark", [(0.003, "**"), (0.03, "*"), (0.2, ""), (0.01, "*"), (0.05, ""), (0.0099, "**")])
def test_stars(p, mark):
    assert stars(p) == mark


def test_compare_to_reference():
    findings = ["f"]
    gold = labeled([[1]] * 12 + [[0]] * 8, findings)
    comp = labeled([[0]] * 12 + [[0]] * 8, findings)
    res = compare_to_reference("cmp", gold, comp, gold, m=9)
    assert (res.b, res.c) == (12, 0)
    assert res.raw_p == pytest.approx(exact_binomial_p(12, 0), abs=1e-12)
    assert res.adjusted_p == pytest.approx(min(1.0, 9 * exact_binomial_p(12, 0)))
    adjusted = min(1.0, 9 * exact_binomial_p(12, 0))
    assert res.stars == ("**" if adjusted < 0.01 else "*" if adjusted < 0.05 else "")
    assert res.stars == "**"
