import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from cranisynth.errors import ConfigError, InsufficientDataError
from cranisynth.stats import (
    PairedSample,
    format_panel,
    run_region_panel,
    signed_rank_null_counts,
    tost_equivalence,
    wilcoxon_signed_rank,
)

from oracles import signed_rank_enumeration


def test_fixture_one_to_five():
    r = wilcoxon_signed_rank(PairedSample([1, 2, 3, 4, 5], [0, 0, 0, 0, 0]))
    assert r.p_value == pytest.approx(0.0625, abs=1e-12)
    assert r.method == "exact" and r.statistic == 0.0
    assert r.decision == "fail_to_reject"


@pytest.mark.parametrize("n", range(5, 13))
def test_exact_matches_enumeration(n):
    rng = np.random.default_rng(n)
    a = rng.normal(size=n)
    b = a + rng.normal(0.3, 1.0, size=n)
    # introduce ties in |d|
    b[1] = a[1] + (a[0] - b[0])
    s = PairedSample(a, b)
    assert wilcoxon_signed_rank(s).p_value == pytest.approx(signed_rank_enumeration(s.differences), abs=1e-12)


def test_exact_matches_scipy_without_ties(rng):
    a, b = rng.normal(size=15), rng.normal(size=15)
    ref = sps.wilcoxon(a, b, method="exact").pvalue
    assert wilcoxon_signed_rank(PairedSample(a, b)).p_value == pytest.approx(ref, rel=1e-10)


def test_normal_approximation_above_25(rng):
    a, b = rng.normal(size=40), rng.normal(0.2, 1, size=40)
    r = wilcoxon_signed_rank(PairedSample(a, b))
    assert r.method == "normal_approx"
    ref = sps.wilcoxon(a, b, method="approx", correction=True).pvalue
    assert r.p_value == pytest.approx(ref, rel=1e-6)


def test_null_counts_sum():
    counts = signed_rank_null_counts(2 * np.arange(1, 21))
    assert int(counts.sum()) == 2 ** 20


def test_zero_differences_dropped():
    a = [1, 2, 3, 4, 5, 6, 7]
    b = [1, 2, 0, 0, 0, 0, 0]
    r = wilcoxon_signed_rank(PairedSample(a, b))
    assert r.n_effective == 5 and r.p_value == pytest.approx(0.0625)
    with pytest.raises(InsufficientDataError):
        wilcoxon_signed_rank(PairedSample([1, 2, 3, 4, 5, 6], [1, 2, 0, 0, 0, 0]))


def test_paired_sample_validation():
    with pytest.raises(InsufficientDataError):
        PairedSample([1, 2, 3, 4], [1, 2, 3, 4])
    with pytest.raises(InsufficientDataError):
        PairedSample([1, 2, 3, 4, 5], [1, 2, 3, 4])
    with pytest.raises(InsufficientDataError):
        PairedSample([1, 2, 3, 4, np.nan], [1, 2, 3, 4, 5])


def test_tost_matches_two_one_sided_t(rng):
    a = rng.normal(0.8, 0.01, 20)
    b = a + rng.normal(0.002, 0.01, 20)
    r = tost_equivalence(PairedSample(a, b), 0.02)
    d = a - b
    lo = sps.ttest_1samp(d, -0.02, alternative="greater").pvalue
    hi = sps.ttest_1samp(d, 0.02, alternative="less").pvalue
    assert r.p_value == pytest.approx(max(lo, hi), rel=1e-10)
    assert r.method == "paired_t"


def test_tost_degenerate():
    a = np.ones(6)
    assert tost_equivalence(PairedSample(a, a), 0.02).decision == "reject"
    assert tost_equivalence(PairedSample(a, a - 0.5), 0.02).p_value == 1.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=30), st.floats(0.01, 2.0))
def test_tost_p_in_unit_interval_and_monotone_in_bound(diffs, bound):
    d = np.asarray(diffs)
    s = PairedSample(d, np.zeros_like(d))
    p1 = tost_equivalence(s, bound).p_value
    p2 = tost_equivalence(s, 2 * bound).p_value
    assert 0.0 <= p1 <= 1.0 and p2 <= p1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3), min_size=5, max_size=12))
def test_wilcoxon_sign_flip_invariant(diffs):
    d = np.asarray(diffs)
    z = np.zeros_like(d)
    assert wilcoxon_signed_rank(PairedSample(d, z)).p_value == pytest.approx(
        wilcoxon_signed_rank(PairedSample(-d, z)).p_value, abs=1e-12)


def _panel_table(rng):
    table = {}
    for i in range(8):
        biased = i >= 6
        gt = rng.uniform(0.7, 0.9, 12)
        dice = gt + (0.08 if biased else 0.0) + rng.normal(0, 0.005, 12)
        hd_a = rng.uniform(2, 6, 12)
        hd_b = hd_a + (6.0 if biased else 0.0) + rng.normal(0, 0.5, 12)
        table[f"region_{i}"] = {"dice": PairedSample(dice, gt), "hd95_mm": PairedSample(hd_a, hd_b)}
    return table


def test_region_panel_equivalence():
    panel = run_region_panel(_panel_table(np.random.default_rng(7)))
    assert panel["summary"]["equivalent_all_metrics"] == [f"region_{i}" for i in range(6)]
    assert "region_6" in panel["summary"]["significant"]["dice"]
    assert "equivalent on every metric: 6/8" in format_panel(panel)


def test_region_panel_missing_bound():
    with pytest.raises(ConfigError):
        run_region_panel(_panel_table(np.random.default_rng(0)), bounds={"dice": 0.02})


def test_region_panel_records_failures():
    table = {"a": {"dice": InsufficientDataError("too few")}}
    panel = run_region_panel(table)
    assert "error" in panel["regions"]["a"]["dice"]["tost"]
    assert panel["summary"]["equivalent_all_metrics"] == []
