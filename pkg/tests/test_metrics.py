from __future__ import annotations

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from vlamia import metrics as M
from vlamia.core import DegenerateEvaluation, ScoredExample, substream


def scored(members, nonmembers, name="NLL"):
    return ([ScoredExample(f"m{i}", name, float(s), True) for i, s in enumerate(members)]
            + [ScoredExample(f"n{i}", name, float(s), False) for i, s in enumerate(nonmembers)])


def brute_auc(pos, neg):
    """O(M N) pairwise oracle."""
    pos, neg = np.asarray(pos)[:, None], np.asarray(neg)[None, :]
    return float(((pos > neg).sum() + 0.5 * (pos == neg).sum()) / (pos.size * neg.size))


# AUC --------------------------------------------------------------------------

@pytest.mark.parametrize("members, nonmembers, expected", [
    ([2, 3], [0, 1], 1.0),
    ([4, 4, 4], [4, 4], 0.5),
    ([1, 3], [0, 2], 0.75),
])
def test_auc_examples(members, nonmembers, expected):
    assert M.auc(scored(members, nonmembers)) == expected


def test_auc_degenerate():
    with pytest.raises(DegenerateEvaluation):
        M.auc(scored([1, 2], []))
    with pytest.raises(DegenerateEvaluation):
        M.auc(scored([], [1]))
    with pytest.raises(DegenerateEvaluation):
        M.auc(scored([float("nan")], [1]))


def test_rank_sum_auc_matches_brute_force_on_1000_instances():
    for i in range(1000):
        rng = substream(0, "test/auc", i)
        m, n = rng.integers(1, 201, size=2)
        if i % 2:  # coarse integer scores force many ties
            pos, neg = rng.integers(0, 6, m).astype(float), rng.integers(0, 6, n).astype(float)
        else:
            pos, neg = rng.normal(0.3, 1, m), rng.normal(0, 1, n)
        assert abs(M.auc_from_scores(pos, neg) - brute_auc(pos, neg)) <= 1e-12


# TPR at FPR -----------------------------------------------------------------------

def test_tpr_examples():
    perfect = scored([2, 3], [0, 1])
    for target in M.FPR_GRID + (0.5,):
        assert M.tpr_at_fpr(perfect, target) == 1.0
    assert M.tpr_at_fpr(scored([5], [1, 2, 3, 4]), 0.01) == 1.0


def test_tpr_step_rule_never_interpolates():
    # 4 non-members: any target below 0.25 must use the FPR = 0 point.
    s = scored([10, 3.5, 2.5], [4, 3, 2, 1])
    assert M.tpr_at_fpr(s, 0.2) == pytest.approx(1 / 3)
    assert M.tpr_at_fpr(s, 0.25) == pytest.approx(2 / 3)
    assert M.tpr_at_fpr(s, 0.49) == pytest.approx(2 / 3)
    assert M.tpr_at_fpr(s, 0.5) == 1.0
    assert M.tpr_at_fpr(scored([0], [1, 2]), 0.4) == 0.0


def test_tpr_ties_are_not_split():
    # Tied member and non-member share one operating point.
    s = scored([5, 3], [3, 1])
    assert M.tpr_at_fpr(s, 0.49) == 0.5
    assert M.tpr_at_fpr(s, 0.5) == 1.0


def test_tpr_target_range():
    with pytest.raises(ValueError):
        M.tpr_at_fpr(scored([1], [0]), 0.0)
    with pytest.raises(ValueError):
        M.tpr_at_fpr(scored([1], [0]), 1.0)


def test_random_scores_rarely_exceed_tpr_bound():
    # 1000/1000 identically distributed scores: TPR@5% <= 0.12 in >= 99% of seeds.
    ok = 0
    trials = 300
    for seed in range(trials):
        rng = substream(seed, "test/null-tpr")
        pos, neg = rng.standard_normal(1000), rng.standard_normal(1000)
        ok += M.tpr_at_fpr_from_scores(pos, neg, 0.05) <= 0.12
    assert ok / trials >= 0.99


# ROC --------------------------------------------------------------------------

def test_roc_examples():
    assert (0.0, 1.0) in M.roc_curve(scored([2, 3], [0, 1]))
    ties = M.roc_curve(scored([1, 1], [1, 1, 1]))
    assert ties == [(0.0, 0.0), (1.0, 1.0)]
    assert M.trapezoid_area(ties) == 0.5


@settings(max_examples=300)
@given(st.lists(st.integers(-5, 5), min_size=1, max_size=40),
       st.lists(st.integers(-5, 5), min_size=1, max_size=40))
def test_roc_properties(pos, neg):
    s = scored(pos, neg)
    pts = M.roc_curve(s)
    fpr, tpr = zip(*pts)
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    assert list(fpr) == sorted(fpr) and list(tpr) == sorted(tpr)
    assert abs(M.trapezoid_area(pts) - M.auc(s)) <= 1e-12
    tprs = [M.tpr_at_fpr(s, f) for f in (0.001, 0.01, 0.05, 0.2, 0.5, 0.9)]
    assert tprs == sorted(tprs)


finite = st.floats(-1e3, 1e3)


TRANSFORMS = (lambda x: 2.0 * x + 7.0, lambda x: np.exp(x / 100.0), lambda x: x ** 3 + x)


@settings(max_examples=500)
@given(st.lists(finite, min_size=1, max_size=30), st.lists(finite, min_size=1, max_size=30),
       st.sampled_from(range(len(TRANSFORMS))))
def test_monotone_transform_invariance(pos, neg, which):
    f = TRANSFORMS[which]
    values = sorted(set(pos + neg))
    mapped = [float(f(v)) for v in values]
    # Float rounding may merge neighbours; the property concerns strictly increasing maps.
    assume(all(a < b for a, b in zip(mapped, mapped[1:])))
    s = scored(pos, neg)
    t = scored([f(x) for x in pos], [f(x) for x in neg])
    assert M.auc(t) == M.auc(s)
    assert M.roc_curve(t) == M.roc_curve(s)
    for target in M.FPR_GRID + (0.3,):
        assert M.tpr_at_fpr(t, target) == M.tpr_at_fpr(s, target)


@settings(max_examples=200)
@given(st.lists(finite, min_size=1, max_size=30), st.lists(finite, min_size=1, max_size=30))
def test_label_flip_symmetry(pos, neg):
    flipped = scored([-x for x in pos], [-x for x in neg])
    assert M.auc(flipped) == pytest.approx(1 - M.auc(scored(pos, neg)), abs=1e-12)


# summaries and reports ---------------------------------------------------------

def test_summarize_fields():
    s = M.summarize(scored([1, 2, 3], [0, 1]), dataset="desk")
    assert s.attack_name == "NLL" and (s.n_members, s.n_nonmembers) == (3, 2)
    assert s.digests["member"] == {"min": 1.0, "max": 3.0, "mean": 2.0}
    assert list(s.tpr_at) == list(M.FPR_GRID)
    assert 0 <= s.auc <= 1


def _rows():
    rng = np.random.default_rng(0)
    out = []
    for ds in ("bench-b", "bench-a"):
        for name in ("ActionL1", "NLL", "Conf", "AggNLL"):
            out.append(M.ReportRow(ds, name, 100, 100, float(rng.random()),
                                   tuple(sorted(rng.random(3).tolist()))))
    return out


def test_report_empty_is_header_only():
    text = M.build_report([], "csv")
    assert text.strip().splitlines() == [",".join(M.CSV_COLUMNS)]
    plain = M.build_report([], "text").splitlines()
    assert plain[0].split() == ["Dataset", "Attack", "M", "N", "AUC", "TPR@0.1%", "TPR@1%",
                                "TPR@5%"]


def test_report_csv_round_trip_and_order():
    rows = _rows()
    parsed = M.parse_report_csv(M.build_report(rows, "csv"))
    assert sorted(parsed, key=lambda r: (r.dataset, r.attack)) == \
        sorted(rows, key=lambda r: (r.dataset, r.attack))
    assert [r.dataset for r in parsed] == sorted(r.dataset for r in parsed)
    assert [r.attack for r in parsed[:4]] == ["NLL", "Conf", "ActionL1", "AggNLL"]
    assert M.build_report(list(reversed(rows)), "csv") == M.build_report(rows, "csv")


def test_report_marks_block_maxima():
    rows = _rows()
    md = M.build_report(rows, "markdown").splitlines()
    ordered = M.parse_report_csv(M.build_report(rows, "csv"))
    body = [line for line in md[2:] if line.startswith("|")]
    for i, r in enumerate(ordered):
        cells = [c.strip() for c in body[i].strip("|").split("|")][4:]
        block = [o for o in ordered if o.dataset == r.dataset]
        for col, cell in enumerate(cells):
            best = max(o.values[col] for o in block)
            assert cell.startswith("**") == (r.values[col] == best)


def test_report_footnote_for_small_negative_sets():
    text = M.build_report(M.parse_report_csv(M.build_report(_rows(), "csv")), "text")
    assert "FPR=0 operating point" in text
    with pytest.raises(ValueError):
        M.build_report(_rows(), "html")
