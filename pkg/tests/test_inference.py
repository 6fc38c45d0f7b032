from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import random_three_level, random_two_level, random_weights
from rankicc import (
    ClusteredDataset,
    ThreeLevelDataset,
    asymptotic_se,
    asymptotic_se_three_level,
    ci_fisher_z,
    ci_wald,
    cluster_bootstrap,
    equal_cluster_weights,
    one_stage_bootstrap_3level,
    rank_icc,
    rank_icc_three_level,
    three_level_weights,
    two_stage_bootstrap,
)
from rankicc import inference
from rankicc.errors import BoundaryEstimate, DegenerateData, InvalidSpec
from rankicc.simulation import ScenarioSpec, generate_scenario, stream

TWO_KEYS = ("g", "h", "I", "II", "III", "IV", "C")
THREE_KEYS = ("g2", "g3", "h", "I", "II", "III", "IV", "V", "VI", "VII", "VIII", "C")


def _rel(fast, slow, scale):
    return float(np.max(np.abs(np.asarray(fast) - np.asarray(slow)))) / scale


@given(st.integers(0, 2**32 - 1))
def test_two_level_influence_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    d = random_two_level(rng, n_max=30, k_max=8)
    w = random_weights(rng, d.N)
    try:
        e = rank_icc(d, w)
    except DegenerateData:
        return
    se, tab = asymptotic_se(d, w, e)
    t, comps = oracles.influence_two_level(d.values, d.sizes, w.w)
    scale = max(np.abs(t).max(), max(np.abs(comps[k]).max() for k in TWO_KEYS))
    assert _rel(tab.t, t, scale) <= 1e-10
    for k in TWO_KEYS:
        assert _rel(tab.components[k], comps[k], scale) <= 1e-10, k
    assert math.isclose(se, math.sqrt(np.var(t, ddof=1) / d.n), rel_tol=1e-9, abs_tol=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_three_level_influence_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    d = random_three_level(rng, n_max=20, ni_max=4, m_max=3)
    w = random_weights(rng, d.N)
    try:
        e = rank_icc_three_level(d, w)
    except DegenerateData:
        return
    se2, se3, tab = asymptotic_se_three_level(d, w, e)
    t2, t3, comps = oracles.influence_three_level(d.values, d.sub_sizes, d.unit_sizes, w.w)
    scale = max(np.abs(t2).max(), np.abs(t3).max(), max(np.abs(comps[k]).max() for k in THREE_KEYS))
    assert _rel(tab.t, t2, scale) <= 1e-10
    assert _rel(tab.t3, t3, scale) <= 1e-10
    for k in THREE_KEYS:
        assert _rel(tab.components[k], comps[k], scale) <= 1e-10, k
    assert tab.n == d.n and tab.sigma2 >= 0 and tab.sigma2_3 >= 0


def test_se_halves_when_clusters_quadrupled():
    d = generate_scenario(ScenarioSpec("normal", 0.5, n=100, sizes=10), stream(1))
    big = ClusteredDataset.from_clusters(d.clusters() * 4)
    se1, _ = asymptotic_se(d, equal_cluster_weights(d), rank_icc(d, equal_cluster_weights(d)))
    se4, _ = asymptotic_se(big, equal_cluster_weights(big), rank_icc(big, equal_cluster_weights(big)))
    assert 0.45 <= se4 / se1 <= 0.55


def test_asymptotic_close_to_bootstrap_se():
    d = generate_scenario(ScenarioSpec("normal", 0.5, n=500, sizes=10), stream(21))
    w = equal_cluster_weights(d)
    se, _ = asymptotic_se(d, w, rank_icc(d, w))
    boot = cluster_bootstrap(d, "equal-clusters", 1000, 5)
    assert 0.9 <= se / boot.se() <= 1.1


@given(st.integers(0, 2**32 - 1))
def test_se_rank_invariant(seed):
    rng = np.random.default_rng(seed)
    d = random_two_level(rng, levels=300)
    d = d.with_values(d.values / 50.0)
    w = equal_cluster_weights(d)
    try:
        se, _ = asymptotic_se(d, w, rank_icc(d, w))
    except DegenerateData:
        return
    e2 = d.with_values(np.exp(d.values))
    se2, _ = asymptotic_se(e2, w, rank_icc(e2, w))
    assert se == se2


def test_z_critical():
    assert abs(inference.z_critical(0.95) - 1.959963984540054) <= 1e-9
    with pytest.raises(InvalidSpec):
        inference.z_critical(1.0)


def test_wald_examples():
    ci = ci_wald(0.5, 0.1, 0.95)
    assert abs(ci.lower - 0.304) < 1e-3 and abs(ci.upper - 0.696) < 1e-3
    assert abs(ci.lower - (0.5 - 0.1959963984540054)) <= 1e-12
    assert ci_wald(0.99, 0.1).upper == 1.0
    z = ci_wald(0.5, 0.0)
    assert (z.lower, z.upper) == (0.5, 0.5)


def test_fisher_examples():
    ci = ci_fisher_z(0.0, 0.1)
    half = inference.z_critical(0.95) * 0.1
    assert abs(ci.lower + ci.upper) <= 1e-15
    assert abs(ci.upper - math.tanh(half)) <= 1e-15
    ci = ci_fisher_z(0.9, 0.05)
    assert -1 < ci.lower < 0.9 < ci.upper < 1
    assert 0.9 - ci.lower > ci.upper - 0.9
    with pytest.raises(BoundaryEstimate):
        ci_fisher_z(1.0, 0.05)


@given(st.floats(-0.999, 0.999), st.floats(0, 50))
def test_interval_bounds(g, se):
    f = ci_fisher_z(g, se)
    assert -1 < f.lower <= f.upper < 1
    w = ci_wald(g, se)
    assert -1 <= w.lower <= g <= w.upper <= 1


PERFECT = ClusteredDataset.from_clusters([[1, 1], [2, 2], [3, 3]])


def test_bootstrap_perfect_agreement():
    b = cluster_bootstrap(PERFECT, "equal-clusters", 50, 1)
    assert b.n_success + b.failures == 50
    assert np.all(np.abs(b.replicates - 1) <= 1e-12)
    assert b.se() <= 1e-12


def test_bootstrap_failures_are_recorded(monkeypatch):
    monkeypatch.setattr(inference, "MAX_REDRAWS", 0)
    b = cluster_bootstrap(PERFECT, "equal-clusters", 200, 3)
    assert b.failures > 0
    assert b.n_success == 200 - b.failures
    assert len(b.failure_reasons) == b.failures
    assert all("DEGENERATE_DATA" in r for r in b.failure_reasons)


def test_bootstrap_deterministic_and_parallel_identical():
    d = generate_scenario(ScenarioSpec("normal", 0.4, n=40, sizes="2-8"), stream(3))
    a = cluster_bootstrap(d, "equal-clusters", 40, 17)
    b = cluster_bootstrap(d, "equal-clusters", 40, 17)
    c = cluster_bootstrap(d, "equal-clusters", 40, 17, workers=2)
    assert a.replicates.tobytes() == b.replicates.tobytes() == c.replicates.tobytes()
    assert cluster_bootstrap(d, "equal-clusters", 40, 18).replicates.tobytes() != a.replicates.tobytes()


def test_bootstrap_iterative_scheme_runs():
    d = generate_scenario(ScenarioSpec("normal", 0.4, n=40, sizes="2/10"), stream(3))
    b = cluster_bootstrap(d, "ess", 10, 1)
    assert b.n_success == 10


def test_percentile_ci_type7():
    b = inference.BootstrapResult(np.array([0.1, 0.4, 0.2, 0.3]), "cluster", 4, 0)
    ci = b.percentile_ci(0.5)
    assert abs(ci.lower - 0.175) <= 1e-15 and abs(ci.upper - 0.325) <= 1e-15
    assert ci.method == "boot-percentile"
    se_ci = b.se_ci(0.25, 0.95)
    assert se_ci.method == "boot-se"


def test_two_stage_inflates_estimates():
    d = generate_scenario(ScenarioSpec("normal", 0.5, n=200, sizes=2), stream(6))
    g = rank_icc(d, equal_cluster_weights(d)).gamma_hat
    b = two_stage_bootstrap(d, "equal-clusters", 200, 2)
    assert b.replicates.mean() > g
    assert b.warning and "upward" in b.warning
    b2 = two_stage_bootstrap(d, "equal-clusters", 200, 2)
    assert np.array_equal(b.replicates, b2.replicates)


def test_one_stage_paired_and_deterministic():
    d = generate_scenario(
        ScenarioSpec("three-level", n=30, sizes="2-5", sub_sizes="1-3", rho2=0.55, rho3=0.2), stream(2)
    )
    a = one_stage_bootstrap_3level(d, "level3", 30, 4)
    b = one_stage_bootstrap_3level(d, "level3", 30, 4)
    assert a.replicates.size == a.replicates3.size == a.n_success
    assert np.array_equal(a.replicates, b.replicates) and np.array_equal(a.replicates3, b.replicates3)
    assert a.se("gamma3") > 0


def test_one_stage_single_unit_degenerate(monkeypatch):
    monkeypatch.setattr(inference, "MAX_REDRAWS", 0)
    d = ThreeLevelDataset.from_nested([[[1, 1], [1]], [[2, 2], [2]]])
    b = one_stage_bootstrap_3level(d, three_level_weights(d, "level1").scheme, 100, 0)
    assert b.failures > 0
    assert b.n_success + b.failures == 100


def test_bootstrap_rejects_small_B():
    with pytest.raises(InvalidSpec):
        cluster_bootstrap(PERFECT, "equal-clusters", 1, 0)
