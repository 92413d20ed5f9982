"""Least squares with absorbed fixed effects and one-way cluster-robust SEs.

Fixed effects are absorbed by alternating projections (repeated group
demeaning) and the slope coefficients come from OLS on the demeaned data.
Three specifications are provided on top of the generic machinery:

* ``homophily_regression`` -- node-level link counts on the student's own
  poverty / achievement / centrality flags with cell fixed effects.
* ``proximity_regression`` -- dyad link on the list-neighbourhood dummy
  ``l_d`` and its first-year interaction, with ego, alter, gender-pair and
  type-pair fixed effects.
* ``heterogeneity_regression`` -- adds the dissimilarity dummies and their
  interactions with ``l_d``.
"""
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from . import kernels

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000
DYAD_FE = ("ego", "alter", "gender_combo", "type_combo")
DISSIMILARITY = ("D_p", "D_a", "D_s")
COUNT_OUTCOMES = ("connections", "connections_poor", "connections_nonpoor", "connections_lower",
                  "connections_higher", "connections_less_central", "connections_more_central")


class EstimationError(RuntimeError):
    pass


class ConvergenceError(EstimationError):
    def __init__(self, iterations, delta, tol):
        super().__init__(f"within transform did not converge after {iterations} sweeps: "
                         f"max group mean {delta:.3e} > tol {tol:.1e}")
        self.iterations = iterations
        self.delta = delta


class CollinearityWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# fixed effects
# --------------------------------------------------------------------------

class FixedEffects:
    """Factorised fixed-effect dimensions over a fixed set of rows."""

    def __init__(self, groups, names=None):
        groups = list(groups)
        if not groups:
            raise ValueError("at least one fixed-effect dimension is required")
        codes, counts = [], []
        n = None
        for g in groups:
            if isinstance(getattr(g, "dtype", None), pd.CategoricalDtype):
                g = np.asarray(g.codes if isinstance(g, pd.Categorical) else g.cat.codes)
            c, uniq = pd.factorize(np.asarray(g), use_na_sentinel=False)
            if n is None:
                n = len(c)
            elif len(c) != n:
                raise ValueError("fixed-effect columns differ in length")
            codes.append(c.astype(np.int64))
            counts.append(np.bincount(c, minlength=len(uniq)).astype(np.float64))
        self.n = n
        self.names = list(names) if names is not None else [f"fe{k}" for k in range(len(groups))]
        self.codes = np.ascontiguousarray(np.vstack(codes)) if n else np.zeros((len(groups), 0), np.int64)
        self.counts = counts

    @property
    def n_groups(self):
        return {name: int(c.shape[0]) for name, c in zip(self.names, self.counts)}

    def demean(self, X, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        """Demean the columns of ``X`` (copied). Returns ``(X, iterations, delta)``."""
        X = np.array(X, dtype=np.float64, order="C", copy=True)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got {X.shape[0]}")
        if self.n == 0 or X.shape[1] == 0:
            return X, 0, 0.0
        delta = np.inf
        for it in range(1, max_iter + 1):
            swept = kernels.demean_sweep(X, self.codes, self.counts)
            if len(self.counts) == 1:
                return X, it, kernels.max_group_mean(X, self.codes, self.counts)
            if swept < tol:
                delta = kernels.max_group_mean(X, self.codes, self.counts)
                if delta < tol:
                    return X, it, delta
            else:
                delta = swept
        raise ConvergenceError(max_iter, delta, tol)


def within_transform(data, fe_groups, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Remove every fixed effect in ``fe_groups`` from ``data``.

    ``data`` is an array (rows x columns) or a DataFrame; ``fe_groups`` a
    sequence of group-label arrays, or column names when ``data`` is a
    DataFrame. Output has the same type and shape as the input.
    """
    if isinstance(data, pd.DataFrame):
        groups = [data[g].to_numpy() if isinstance(g, str) else g for g in fe_groups]
        value_cols = [c for c in data.columns if not any(isinstance(g, str) and g == c for g in fe_groups)]
        fe = FixedEffects(groups)
        X, _, _ = fe.demean(data[value_cols].to_numpy(dtype=np.float64), tol, max_iter)
        return pd.DataFrame(X, columns=value_cols, index=data.index)
    arr = np.asarray(data, dtype=np.float64)
    X, _, _ = FixedEffects(fe_groups).demean(arr, tol, max_iter)
    return X.reshape(arr.shape)


# --------------------------------------------------------------------------
# OLS and sandwich
# --------------------------------------------------------------------------

@dataclass
class OLSFit:
    coef: np.ndarray
    resid: np.ndarray
    kept: List[int]
    dropped: List[int]


def select_columns(X, rel_tol=1e-9, abs_tol=1e-7):
    """Indices of a full-rank column subset, scanning left to right.

    A column is dropped when its root mean square is below ``abs_tol`` or
    when its residual on the already kept columns retains less than
    ``rel_tol`` of its sum of squares.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    kept, dropped = [], []
    for k in range(X.shape[1]):
        col = X[:, k]
        ss = float(col @ col)
        if n == 0 or np.sqrt(ss / n) < abs_tol:
            dropped.append(k)
            continue
        if kept:
            B = X[:, kept]
            beta = np.linalg.lstsq(B, col, rcond=None)[0]
            res = col - B @ beta
            if float(res @ res) < rel_tol * ss:
                dropped.append(k)
                continue
        kept.append(k)
    return kept, dropped


def ols(y, X, names=None):
    """Least squares with deterministic first-kept collinearity dropping.

    Returns an :class:`OLSFit`; dropped columns get coefficient NaN and a
    :class:`CollinearityWarning` names them.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.shape[0]:
        raise ValueError("y and X differ in length")
    kept, dropped = select_columns(X)
    if dropped:
        labels = [names[k] if names is not None else str(k) for k in dropped]
        warnings.warn(f"dropped collinear or zero-variance regressors: {', '.join(labels)}",
                      CollinearityWarning, stacklevel=2)
    coef = np.full(X.shape[1], np.nan)
    if kept:
        Xk = X[:, kept]
        beta = np.linalg.solve(Xk.T @ Xk, Xk.T @ y)
        coef[kept] = beta
        resid = y - Xk @ beta
    else:
        resid = y.copy()
    return OLSFit(coef, resid, kept, dropped)


def cluster_robust_vcov(X, resid, clusters, n_params=None):
    """CR1 sandwich ``G/(G-1) (N-1)/(N-K) (X'X)^-1 B (X'X)^-1``.

    ``n_params`` overrides ``K`` in the small-sample factor (the absorbed
    fixed effects are not counted by default).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    resid = np.asarray(resid, dtype=np.float64).ravel()
    codes, uniq = pd.factorize(np.asarray(clusters))
    G = len(uniq)
    if G < 2:
        raise EstimationError(f"cluster-robust SEs need at least 2 clusters, got {G}")
    N, K = X.shape
    K = K if n_params is None else n_params
    if N <= K:
        raise EstimationError(f"too few observations ({N}) for {K} parameters")
    bread = np.linalg.inv(X.T @ X)
    scores = np.zeros((G, X.shape[1]))
    np.add.at(scores, codes, X * resid[:, None])
    meat = scores.T @ scores
    factor = G / (G - 1) * (N - 1) / (N - K)
    return factor * bread @ meat @ bread


def cluster_robust_se(X, residuals, clusters, n_params=None):
    return np.sqrt(np.diag(cluster_robust_vcov(X, residuals, clusters, n_params)))


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RegressionResult:
    coefficients: Dict[str, float]
    cluster_se: Dict[str, float]
    n_obs: int
    n_clusters: int
    fe_groups: Dict[str, int] = field(default_factory=dict)
    residual_summary: Dict[str, float] = field(default_factory=dict)
    convergence: Tuple[int, float] = (0, 0.0)
    dropped: Tuple[str, ...] = ()

    def estimate(self, term):
        return self.coefficients[term]

    def se(self, term):
        return self.cluster_se[term]

    def t_stat(self, term):
        se = self.cluster_se[term]
        return self.coefficients[term] / se if se > 0 else np.nan

    def ci(self, term, z=1.959963984540054):
        b, se = self.coefficients[term], self.cluster_se[term]
        return b - z * se, b + z * se

    def to_frame(self):
        terms = list(self.coefficients)
        return pd.DataFrame({
            "term": terms,
            "estimate": [self.coefficients[t] for t in terms],
            "cluster_se": [self.cluster_se[t] for t in terms],
            "n": self.n_obs,
            "n_clusters": self.n_clusters,
        })


def _fit_demeaned(y, X, names, clusters, fe_groups=None, convergence=(0, 0.0)):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CollinearityWarning)
        fit = ols(y, X, names)
    coefs, ses = {}, {}
    n_clusters = int(pd.unique(np.asarray(clusters)).shape[0])
    if fit.kept:
        se = cluster_robust_se(X[:, fit.kept], fit.resid, clusters)
        for k, s in zip(fit.kept, se):
            coefs[names[k]] = float(fit.coef[k])
            ses[names[k]] = float(s)
    dropped = tuple(names[k] for k in fit.dropped)
    if dropped:
        warnings.warn(f"dropped collinear or zero-variance regressors: {', '.join(dropped)}",
                      CollinearityWarning, stacklevel=3)
    r = fit.resid
    summary = {"rss": float(r @ r), "mean": float(r.mean()) if r.size else 0.0,
               "sd": float(r.std()) if r.size else 0.0}
    return RegressionResult(coefs, ses, int(len(y)), n_clusters, dict(fe_groups or {}), summary,
                            (int(convergence[0]), float(convergence[1])), dropped)


def fe_regression(data, outcome, regressors, fe, cluster, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """OLS of ``outcome`` on ``regressors`` absorbing the ``fe`` columns."""
    missing = [c for c in [outcome, *regressors, *fe, cluster] if c not in data.columns]
    if missing:
        raise KeyError(f"missing columns: {', '.join(missing)}")
    design = DemeanedDesign(data, fe, cluster, tol=tol, max_iter=max_iter)
    return design.regress(outcome, list(regressors))


class DemeanedDesign:
    """Cache of fixed-effect-demeaned columns over one estimation sample.

    Columns are demeaned in batches and kept, so the many specifications of
    an experiment (every ``d``, every outcome) share one set of sweeps per
    column.
    """

    def __init__(self, data, fe, cluster, mask=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        self._mask = None
        if mask is not None:
            self._mask = np.asarray(mask, dtype=bool)
            data = data.loc[self._mask]
        self.data = data
        self.fe_names = list(fe)
        self.fe = FixedEffects([data[c] for c in fe], names=fe)
        self.clusters = data[cluster].to_numpy()
        self.tol = tol
        self.max_iter = max_iter
        self._cols = {}
        self.iterations = 0
        self.delta = 0.0

    def __len__(self):
        return len(self.data)

    def _raw(self, name):
        if name in self.data.columns:
            return self.data[name].to_numpy(dtype=np.float64)
        if "_x_" in name:
            a, b = name.split("_x_", 1)
            return self._raw(a) * self._raw(b)
        raise KeyError(f"missing column: {name}")

    def prepare(self, names):
        todo = [n for n in dict.fromkeys(names) if n not in self._cols]
        if not todo:
            return
        raw = np.column_stack([self._raw(n) for n in todo]) if len(self.data) else np.zeros((0, len(todo)))
        X, it, delta = self.fe.demean(raw, self.tol, self.max_iter)
        self.iterations = max(self.iterations, it)
        self.delta = max(self.delta, delta)
        for k, n in enumerate(todo):
            self._cols[n] = X[:, k]

    def add_column(self, name, values):
        """Demean and cache an external column (e.g. a simulated outcome)."""
        values = np.asarray(values, dtype=np.float64)
        if self._mask is not None:
            values = values[self._mask]
        X, it, delta = self.fe.demean(values[:, None], self.tol, self.max_iter)
        self.iterations = max(self.iterations, it)
        self.delta = max(self.delta, delta)
        self._cols[name] = X[:, 0]

    def column(self, name):
        self.prepare([name])
        return self._cols[name]

    def regress(self, outcome, regressors):
        self.prepare([outcome, *regressors])
        y = self._cols[outcome]
        X = np.column_stack([self._cols[r] for r in regressors]) if regressors else np.zeros((len(y), 0))
        return _fit_demeaned(y, X, list(regressors), self.clusters, self.fe.n_groups,
                             (self.iterations, self.delta))


# --------------------------------------------------------------------------
# table construction
# --------------------------------------------------------------------------

def _pair_label(node_labels, ego, alter):
    """Unordered ``"a|b"`` label per dyad from per-node labels (as a Categorical)."""
    codes, uniq = pd.factorize(np.asarray(node_labels).astype(str), sort=True)
    a, b = codes[ego], codes[alter]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    pair, seen = pd.factorize(lo * len(uniq) + hi, sort=True)
    labels = [f"{uniq[k // len(uniq)]}|{uniq[k % len(uniq)]}" for k in seen]
    return pd.Categorical.from_codes(pair, categories=labels)


def build_dyads(population, proximity, outcomes=None, combinations=None):
    """One row per unordered within-network dyad, ready for the dyadic regressions.

    ``proximity`` holds ``i, j, l_1..l_D, physical_neighbor`` and the
    optional ``outcomes`` holds ``i, j, linked_baseline, linked_endline`` for
    the same pairs. ``combinations`` maps student id to the assigned list block and
    defines the type-pair fixed effect; defaults to the design type.
    """
    nodes = population.nodes
    n = len(nodes)
    i = proximity["i"].to_numpy(np.int64)
    j = proximity["j"].to_numpy(np.int64)
    bad = (i < 0) | (j < 0) | (i >= n) | (j >= n)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise EstimationError(f"orphan student id in dyad ({i[k]}, {j[k]})")
    if np.any(i == j):
        raise EstimationError("dyad with identical ego and alter")
    if outcomes is not None and (len(proximity) != len(outcomes) or not (
            np.array_equal(outcomes["i"].to_numpy(), i) and np.array_equal(outcomes["j"].to_numpy(), j))):
        raise EstimationError("proximity and outcome tables cover different dyads")

    ego, alter = np.minimum(i, j), np.maximum(i, j)
    poor = nodes["poor"].to_numpy(bool)
    high = nodes["high_achiever"].to_numpy(bool)
    central = nodes["central"].to_numpy(float)
    returning = (nodes["cohort"] == "Returning").to_numpy()
    gender = nodes["gender"].to_numpy()
    network = nodes["network"].to_numpy()
    if combinations is None:
        combinations = np.where(high, "H", "L")
    combinations = np.asarray(combinations).astype(str)

    both_central = ~np.isnan(central[ego]) & ~np.isnan(central[alter])
    df = pd.DataFrame({
        "ego": ego,
        "alter": alter,
        "network": network[ego],
        "baseline_available": (returning[ego] & returning[alter]).astype(np.int8),
        "first": (~returning[ego] & ~returning[alter]).astype(np.int8),
        "D_p": (poor[ego] != poor[alter]).astype(np.int8),
        "D_a": (high[ego] != high[alter]).astype(np.int8),
        "D_s": (both_central & (np.nan_to_num(central[ego]) != np.nan_to_num(central[alter]))).astype(np.int8),
        "gender_combo": _pair_label(gender, ego, alter),
        "type_combo": _pair_label(combinations, ego, alter),
    })
    if outcomes is not None:
        df.insert(3, "y", outcomes["linked_endline"].to_numpy(bool).astype(np.int8))
        df.insert(4, "baseline_link", outcomes["linked_baseline"].to_numpy(bool).astype(np.int8))
    if np.any(network[ego] != network[alter]):
        raise EstimationError("dyads must lie within one network")
    for col in proximity.columns:
        if col.startswith("l_") or col in ("list_distance", "physical_neighbor"):
            df[col] = proximity[col].to_numpy().astype(np.int8) if col != "list_distance" else proximity[col].to_numpy()
    return df


def build_nodes(population, dyads, assignments=None, outcome=None):
    """Per-student link counts by partner type plus the student's own flags.

    ``outcome`` replaces the dyad table's ``y`` (e.g. a link frequency
    averaged over replications, giving fractional counts).
    """
    nodes = population.nodes
    n = len(nodes)
    ego = dyads["ego"].to_numpy(np.int64)
    alter = dyads["alter"].to_numpy(np.int64)
    integral = outcome is None
    y = dyads["y"].to_numpy(np.float64) if integral else np.asarray(outcome, dtype=np.float64)
    base = dyads["baseline_link"].to_numpy(np.float64)
    poor = nodes["poor"].to_numpy(bool)
    high = nodes["high_achiever"].to_numpy(bool)
    central = nodes["central"].to_numpy(float)

    def counts(mask_partner, weight=y, as_int=integral):
        out = (np.bincount(ego, weights=weight * mask_partner[alter], minlength=n)
               + np.bincount(alter, weights=weight * mask_partner[ego], minlength=n))
        return np.rint(out).astype(np.int64) if as_int else out

    everyone = np.ones(n, bool)
    returning = (nodes["cohort"] == "Returning").to_numpy()
    table = pd.DataFrame({
        "id": nodes["id"].to_numpy(),
        "cell": nodes["cell"].to_numpy(),
        "network": nodes["network"].to_numpy(),
        "cohort": nodes["cohort"].to_numpy(),
        "poor": poor.astype(np.int8),
        "lower_achieving": (~high).astype(np.int8),
        "less_central": np.where(returning, 1.0 - np.nan_to_num(central), np.nan),
        "connections": counts(everyone),
        "connections_poor": counts(poor),
        "connections_nonpoor": counts(~poor),
        "connections_lower": counts(~high),
        "connections_higher": counts(high),
        "connections_less_central": counts(central == 0.0),
        "connections_more_central": counts(central == 1.0),
        "connections_baseline": counts(everyone, base, True),
    })
    if assignments is not None:
        table["student_type"] = [assignments[k].student_type for k in table["id"]]
        table["peer_type"] = [assignments[k].peer_type for k in table["id"]]
        table["homophily_cluster"] = (table["cohort"] + ":" + table["student_type"] + ":" + table["peer_type"])
    return table


# --------------------------------------------------------------------------
# specifications
# --------------------------------------------------------------------------

def proximity_terms(d, first=True):
    terms = [f"l_{d}"]
    if first:
        terms.append(f"l_{d}_x_first")
    return terms


def heterogeneity_terms(d, first=True):
    return [*DISSIMILARITY, f"l_{d}", *(f"l_{d}_x_{v}" for v in DISSIMILARITY)] + (
        [f"l_{d}_x_first"] if first else [])


def _check_d(d, dyads):
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise ValueError(f"neighbourhood size must be a positive integer, got {d}")
    if f"l_{d}" not in dyads.columns:
        raise KeyError(f"missing column: l_{d}")


def proximity_regression(dyads, d, outcome="y", design=None, baseline_control=True):
    """Link on ``l_d`` and ``l_d x first`` with ego/alter/gender-pair/type-pair FEs.

    With ``outcome="baseline_link"`` the sample is restricted to dyads with
    baseline data and the baseline control is dropped (placebo).
    """
    _check_d(d, dyads)
    placebo = outcome == "baseline_link"
    if design is None:
        mask = dyads["baseline_available"].to_numpy(bool) if placebo else None
        design = DemeanedDesign(dyads, DYAD_FE, "network", mask=mask)
    regs = proximity_terms(d, first=not placebo)
    if baseline_control and not placebo:
        regs.append("baseline_link")
    return design.regress(outcome, regs)


def heterogeneity_regression(dyads, d, outcome="y", design=None):
    _check_d(d, dyads)
    if design is None:
        design = DemeanedDesign(dyads, DYAD_FE, "network")
    return design.regress(outcome, heterogeneity_terms(d) + ["baseline_link"])


def first_stage_regression(dyads, d, design=None):
    """``physical_neighbor`` on ``l_d`` with the dyadic fixed effects."""
    _check_d(d, dyads)
    if design is None:
        design = DemeanedDesign(dyads, DYAD_FE, "network")
    return design.regress("physical_neighbor", [f"l_{d}"])


def homophily_regression(nodes, outcome="connections", cluster="homophily_cluster", fe=("cell",)):
    """Link counts on own poverty, achievement and centrality flags.

    Students without an observed centrality classification are dropped.
    Controls for baseline connections; absorbs cell fixed effects.
    """
    sample = nodes[nodes["less_central"].notna()]
    if cluster not in sample.columns:
        raise KeyError(f"missing column: {cluster}")
    design = DemeanedDesign(sample, list(fe), cluster)
    regs = ["poor", "lower_achieving", "less_central", "connections_baseline"]
    return design.regress(outcome, regs)
