import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from homophily_lab.estimator import (
    DYAD_FE, CollinearityWarning, ConvergenceError, DemeanedDesign, EstimationError, FixedEffects,
    build_dyads, build_nodes, cluster_robust_se, cluster_robust_vcov, fe_regression, first_stage_regression,
    heterogeneity_regression, homophily_regression, ols, proximity_regression, within_transform,
)
from homophily_lab.model import ModelParams
from homophily_lab.population import (
    NetworkSpec, SimConfig, allocate_population, expected_link_prob, generate_population, simulate_network,
)

from conftest import dummy_ols, small_networks, toy_dyadic


@pytest.fixture(scope="module")
def sim_tables():
    cfg = SimConfig(networks=small_networks(6, 3, 30), seed=5)
    pop = generate_population(cfg)
    alloc = allocate_population(pop, 5)
    out = simulate_network(pop, alloc, ModelParams(), cfg)
    prox = alloc.indicators(out["i"], out["j"])
    combos = np.array([alloc.assignments[k].combination for k in range(len(pop))])
    dyads = build_dyads(pop, prox, out, combos)
    nodes = build_nodes(pop, dyads, alloc.assignments)
    return pop, alloc, out, dyads, nodes


# --- table construction -------------------------------------------------------------

def test_ten_student_cell_has_45_rows():
    cfg = SimConfig(networks=(NetworkSpec(1, 2, 10, 0.0),), seed=1)
    pop = generate_population(cfg)
    alloc = allocate_population(pop, 1)
    i, j = pop.dyad_pairs()
    dyads = build_dyads(pop, alloc.indicators(i, j))
    assert len(dyads) == 45
    assert (dyads["ego"] < dyads["alter"]).all()


def test_dyad_definitions(sim_tables):
    pop, _, out, dyads, _ = sim_tables
    nodes = pop.nodes
    poor = nodes["poor"].to_numpy()
    assert np.array_equal(dyads["D_p"].to_numpy() == 1, poor[dyads["ego"]] != poor[dyads["alter"]])
    first_year = (nodes["cohort"] == "FirstYear").to_numpy()
    assert np.array_equal(dyads["first"].to_numpy() == 1, first_year[dyads["ego"]] & first_year[dyads["alter"]])
    # no baseline information whenever a first-year student is involved
    avail = dyads["baseline_available"].to_numpy() == 1
    assert not avail[first_year[dyads["ego"]] | first_year[dyads["alter"]]].any()
    assert not dyads.loc[~avail, "baseline_link"].any()
    assert not dyads.loc[dyads["first"] == 1, "D_s"].any()
    assert np.array_equal(dyads["y"].to_numpy() == 1, out["linked_endline"].to_numpy())


def test_build_dyads_errors(sim_tables):
    pop, alloc, out, _, _ = sim_tables
    prox = alloc.indicators(out["i"], out["j"])
    bad = prox.copy()
    bad.loc[0, "j"] = 10 ** 6
    with pytest.raises(EstimationError, match="orphan"):
        build_dyads(pop, bad)
    with pytest.raises(EstimationError, match="different dyads"):
        build_dyads(pop, prox, out.iloc[1:])
    cross = prox.iloc[:1].copy()
    cross.loc[:, "j"] = len(pop) - 1
    with pytest.raises(EstimationError, match="within one network"):
        build_dyads(pop, cross)


def test_node_counts_match_dyads(sim_tables):
    _, _, _, dyads, nodes = sim_tables
    assert nodes["connections"].sum() == 2 * dyads["y"].sum()
    assert (nodes["connections_poor"] + nodes["connections_nonpoor"] == nodes["connections"]).all()
    assert (nodes["connections_lower"] + nodes["connections_higher"] == nodes["connections"]).all()
    for c in ("connections", "connections_baseline"):
        assert (nodes[c] >= 0).all()
    assert nodes.loc[nodes["cohort"] == "FirstYear", "less_central"].isna().all()


# --- within transform ---------------------------------------------------------------

def _two_way_toy(seed=0, n_nodes=6):
    rng = np.random.default_rng(seed)
    a, b = np.triu_indices(n_nodes, 1)
    X = rng.normal(size=(len(a), 3))
    return X, a, b


def test_single_dimension_one_pass():
    X = np.arange(12.0).reshape(6, 2) ** 2
    g = np.array([0, 0, 1, 1, 1, 2])
    fe = FixedEffects([g])
    out, it, delta = fe.demean(X)
    assert it == 1 and delta < 1e-12
    want = X - pd.DataFrame(X).groupby(g).transform("mean").to_numpy()
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_two_way_matches_dummy_projection():
    X, a, b = _two_way_toy()
    got = within_transform(X, [a, b], tol=1e-13)
    for k in range(X.shape[1]):
        _, resid = dummy_ols(X[:, k], np.zeros((len(a), 0)), [a, b])
        np.testing.assert_allclose(got[:, k], resid, atol=1e-10)


def test_constant_column_vanishes_and_idempotent():
    X, a, b = _two_way_toy(1)
    X[:, 0] = 3.5
    got = within_transform(X, [a, b])
    assert np.abs(got[:, 0]).max() < 1e-8
    again = within_transform(got, [a, b])
    np.testing.assert_allclose(again, got, atol=1e-8)


def test_within_transform_frame_input():
    X, a, b = _two_way_toy(2)
    df = pd.DataFrame({"x0": X[:, 0], "x1": X[:, 1], "ego": a, "alter": b})
    out = within_transform(df, ["ego", "alter"])
    assert list(out.columns) == ["x0", "x1"]
    np.testing.assert_allclose(out.to_numpy(), within_transform(X[:, :2], [a, b]), atol=1e-9)


def test_convergence_error_reports_delta():
    X, a, b = _two_way_toy(3, 10)
    with pytest.raises(ConvergenceError) as info:
        within_transform(X, [a, b], tol=1e-14, max_iter=2)
    assert info.value.iterations == 2 and info.value.delta > 1e-14
    assert "did not converge" in str(info.value)


@given(st.integers(0, 10 ** 6), st.integers(4, 9), st.integers(1, 4))
def test_group_means_below_tolerance(seed, n_nodes, n_cols):
    rng = np.random.default_rng(seed)
    a, b = np.triu_indices(n_nodes, 1)
    third = rng.integers(0, 3, len(a))
    X = rng.normal(size=(len(a), n_cols)) * rng.uniform(0.1, 10)
    out = within_transform(X, [a, b, third])
    for g in (a, b, third):
        means = pd.DataFrame(out).groupby(g).mean().to_numpy()
        assert np.abs(means).max() < 1e-8


# --- OLS -------------------------------------------------------------------------------

def test_exact_line():
    x = np.arange(1.0, 8.0)
    fit = ols(2 * x, x[:, None])
    assert fit.coef[0] == pytest.approx(2.0, abs=1e-14)


def test_hand_solved_normal_equations():
    # x = 1..5, y = (2,4,5,4,5): Sxy = 6, Sxx = 10 -> slope 0.6, intercept 2.2
    x = np.arange(1.0, 6.0)
    y = np.array([2.0, 4.0, 5.0, 4.0, 5.0])
    fit = ols(y, np.column_stack([np.ones(5), x]))
    np.testing.assert_allclose(fit.coef, [2.2, 0.6], atol=1e-12)
    X = np.column_stack([np.ones(5), x])
    assert np.abs(X.T @ fit.resid).max() < 1e-8 * np.abs(X).max()


def test_duplicate_column_first_kept():
    rng = np.random.default_rng(0)
    x = rng.normal(size=50)
    z = rng.normal(size=50)
    X = np.column_stack([x, z, x.copy()])
    with pytest.warns(CollinearityWarning, match="x_dup"):
        fit = ols(x + z, X, ["x", "z", "x_dup"])
    assert fit.kept == [0, 1] and fit.dropped == [2]
    assert np.isnan(fit.coef[2]) and fit.coef[0] == pytest.approx(1.0)


def test_zero_variance_dropped_in_regression():
    rng = np.random.default_rng(1)
    df = toy_dyadic(10, 5, 0.3, rng)
    df["const"] = 1.0
    with pytest.warns(CollinearityWarning, match="const"):
        res = fe_regression(df, "y", ["l", "const"], ["ego", "alter"], "network")
    assert "const" not in res.coefficients and res.dropped == ("const",)


def test_missing_column_raises():
    df = toy_dyadic(3, 4, 0.1, np.random.default_rng(0))
    with pytest.raises(KeyError, match="nope"):
        fe_regression(df, "y", ["nope"], ["ego"], "network")


@given(st.integers(0, 10 ** 6))
def test_fwl_matches_dummy_ols(seed):
    rng = np.random.default_rng(seed)
    df = toy_dyadic(int(rng.integers(3, 8)), int(rng.integers(4, 7)), 0.5, rng)
    df = df.iloc[:200]
    df["x2"] = rng.normal(size=len(df))
    df["combo"] = rng.integers(0, 3, len(df))
    # only compare when both slopes are identified beyond the dummies
    dummies = np.column_stack([np.eye(df[g].max() + 1)[df[g]] for g in ("ego", "alter", "combo")])
    full = np.column_stack([dummies, df[["l", "x2"]].to_numpy()])
    assume(np.linalg.matrix_rank(full) == np.linalg.matrix_rank(dummies) + 2
           and np.linalg.matrix_rank(full) < len(df) - 2)
    res = fe_regression(df, "y", ["l", "x2"], ["ego", "alter", "combo"], "network", tol=1e-12)
    want, _ = dummy_ols(df["y"].to_numpy(), df[["l", "x2"]].to_numpy(), [df["ego"], df["alter"], df["combo"]])
    assert res.estimate("l") == pytest.approx(want[0], abs=1e-6)
    assert res.estimate("x2") == pytest.approx(want[1], abs=1e-6)


# --- sandwich ------------------------------------------------------------------------------

def test_two_cluster_hand_sandwich():
    # beta = 33/30, scores +-1.5, meat 4.5, bread 1/30, factor 2 -> V = 0.01
    x = np.array([1.0, 2.0, 3.0, 4.0])
    y = np.array([1.0, 3.0, 2.0, 5.0])
    fit = ols(y, x[:, None])
    assert fit.coef[0] == pytest.approx(1.1)
    V = cluster_robust_vcov(x[:, None], fit.resid, ["a", "a", "b", "b"])
    assert V[0, 0] == pytest.approx(0.01, rel=1e-12)
    assert cluster_robust_se(x[:, None], fit.resid, ["a", "a", "b", "b"])[0] == pytest.approx(0.1, rel=1e-12)


def test_singleton_clusters_equal_hc1():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(40), rng.normal(size=(40, 2))])
    y = X @ [1.0, 0.5, -0.2] + rng.normal(size=40) * (1 + np.abs(X[:, 1]))
    fit = ols(y, X)
    N, K = X.shape
    bread = np.linalg.inv(X.T @ X)
    hc1 = N / (N - K) * bread @ (X.T * fit.resid ** 2) @ X @ bread
    got = cluster_robust_vcov(X, fit.resid, np.arange(N))
    np.testing.assert_allclose(got, hc1, rtol=1e-10, atol=1e-14)


def test_cluster_se_matches_statsmodels():
    sm = pytest.importorskip("statsmodels.api")
    rng = np.random.default_rng(4)
    g = np.repeat(np.arange(25), 8)
    X = np.column_stack([np.ones(200), rng.normal(size=200)])
    y = X @ [0.3, 1.0] + rng.normal(size=25)[g] + rng.normal(size=200)
    fit = ols(y, X)
    ref = sm.OLS(y, X).fit(cov_type="cluster", cov_kwds={"groups": g})
    np.testing.assert_allclose(cluster_robust_se(X, fit.resid, g), ref.bse, rtol=1e-10)


def test_single_cluster_rejected():
    with pytest.raises(EstimationError, match="at least 2 clusters"):
        cluster_robust_vcov(np.ones((5, 1)), np.arange(5.0), np.zeros(5))


def test_result_frame_and_ci():
    df = toy_dyadic(30, 5, 0.4, np.random.default_rng(5))
    res = fe_regression(df, "y", ["l"], ["ego", "alter"], "network")
    frame = res.to_frame()
    assert list(frame.columns) == ["term", "estimate", "cluster_se", "n", "n_clusters"]
    assert res.n_clusters == 30 and res.n_obs == len(df) and res.se("l") > 0
    lo, hi = res.ci("l")
    assert lo < res.estimate("l") < hi
    assert res.convergence[1] < 1e-8


def test_coverage_small():
    rng = np.random.default_rng(6)
    hits = 0
    for _ in range(100):
        res = fe_regression(toy_dyadic(60, 5, 0.25, rng), "y", ["l"], ["ego", "alter"], "network")
        lo, hi = res.ci("l")
        hits += lo <= 0.25 <= hi
    assert 85 <= hits <= 100


def test_consistency_improves_with_size():
    errs = {}
    for size in (20, 200):
        e = []
        for seed in range(50):
            rng = np.random.default_rng([seed, size])
            res = fe_regression(toy_dyadic(size, 5, 0.3, rng), "y", ["l"], ["ego", "alter"], "network")
            e.append(abs(res.estimate("l") - 0.3))
        errs[size] = np.median(e)
    assert errs[200] < errs[20]


def test_swap_ego_alter_invariance(sim_tables):
    _, _, _, dyads, _ = sim_tables
    swapped = dyads.rename(columns={"ego": "alter", "alter": "ego"})
    a = proximity_regression(dyads, 2)
    b = proximity_regression(swapped, 2)
    for term in a.coefficients:
        assert b.estimate(term) == pytest.approx(a.estimate(term), abs=1e-9)
        assert b.se(term) == pytest.approx(a.se(term), rel=1e-6)


# --- specifications ---------------------------------------------------------------------------

def test_specification_terms(sim_tables):
    _, _, _, dyads, nodes = sim_tables
    prox = proximity_regression(dyads, 3)
    assert list(prox.coefficients) == ["l_3", "l_3_x_first", "baseline_link"]
    het = heterogeneity_regression(dyads, 3)
    assert list(het.coefficients) == ["D_p", "D_a", "D_s", "l_3", "l_3_x_D_p", "l_3_x_D_a", "l_3_x_D_s",
                                      "l_3_x_first", "baseline_link"]
    placebo = proximity_regression(dyads, 3, outcome="baseline_link")
    assert list(placebo.coefficients) == ["l_3"]
    assert placebo.n_obs == int(dyads["baseline_available"].sum())
    fs = first_stage_regression(dyads, 1)
    assert fs.estimate("l_1") > 0 and fs.t_stat("l_1") > 1.96
    hom = homophily_regression(nodes)
    assert set(hom.coefficients) == {"poor", "lower_achieving", "less_central", "connections_baseline"}
    with pytest.raises(ValueError):
        proximity_regression(dyads, 0)
    with pytest.raises(KeyError):
        proximity_regression(dyads, 12)


def test_design_cache_matches_direct(sim_tables):
    _, _, _, dyads, _ = sim_tables
    design = DemeanedDesign(dyads, DYAD_FE, "network")
    for d in (1, 5):
        a = proximity_regression(dyads, d, design=design)
        b = proximity_regression(dyads, d)
        for t in a.coefficients:
            assert a.estimate(t) == pytest.approx(b.estimate(t), abs=1e-10)


def test_endline_gamma_covers_noise_free_estimand():
    covered = 0
    for seed in range(10):
        cfg = SimConfig(networks=small_networks(8, 3, 40), seed=seed)
        pop = generate_population(cfg)
        alloc = allocate_population(pop, seed)
        out = simulate_network(pop, alloc, ModelParams(), cfg)
        prox = alloc.indicators(out["i"], out["j"])
        dyads = build_dyads(pop, prox, out)
        dyads["p"] = expected_link_prob(ModelParams(), out["s"], out["near"], out["first"])
        design = DemeanedDesign(dyads, DYAD_FE, "network")
        est = proximity_regression(dyads, 1, design=design)
        truth = proximity_regression(dyads, 1, outcome="p", design=design)
        lo, hi = est.ci("l_1")
        assert truth.estimate("l_1") > 0
        covered += lo <= truth.estimate("l_1") <= hi
    assert covered >= 8


def test_zero_link_network_gives_zero_coefficients(sim_tables):
    pop, _, _, dyads, _ = sim_tables
    empty = dyads.assign(y=0, baseline_link=0)
    nodes = build_nodes(pop, empty, allocate_population(pop, 5).assignments)
    with pytest.warns(CollinearityWarning):
        res = homophily_regression(nodes)
    for t in ("poor", "lower_achieving", "less_central"):
        assert res.estimate(t) == 0.0
    assert "connections_baseline" in res.dropped


def test_permuted_traits_placebo():
    within = {t: 0 for t in ("poor", "lower_achieving", "less_central")}
    n_seeds = 40
    for seed in range(n_seeds):
        cfg = SimConfig(networks=small_networks(10, 3, 40), seed=seed)
        pop = generate_population(cfg)
        alloc = allocate_population(pop, seed)
        out = simulate_network(pop, alloc, ModelParams(), cfg)
        dyads = build_dyads(pop, alloc.indicators(out["i"], out["j"]), out)
        nodes = build_nodes(pop, dyads, alloc.assignments)
        rng = np.random.default_rng(seed)
        perm = nodes.copy()
        ret = perm["less_central"].notna().to_numpy()
        for cell, idx in perm[ret].groupby("cell").groups.items():
            shuffled = rng.permutation(idx)
            for t in within:
                perm.loc[idx, t] = perm.loc[shuffled, t].to_numpy()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CollinearityWarning)
            res = homophily_regression(perm)
        for t in within:
            within[t] += abs(res.t_stat(t)) <= 2
    for t, n in within.items():
        assert n >= 0.9 * n_seeds, (t, n)
