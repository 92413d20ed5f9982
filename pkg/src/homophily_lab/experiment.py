"""End-to-end pipeline: randomize, simulate, estimate and summarise.

Each seed is one independent unit (population, allocation, baseline network
and ``replications`` endline draws per homophily mode). Seeds run on a
thread pool capped by ``HOMOPHILY_LAB_THREADS``; the result of a seed does
not depend on which thread ran it, so reports are byte-identical across
thread counts.
"""
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd

from ._accel import thread_cap
from ._version import __version__
from .estimator import (
    COUNT_OUTCOMES,
    DYAD_FE,
    CollinearityWarning,
    DemeanedDesign,
    build_dyads,
    build_nodes,
    first_stage_regression,
    heterogeneity_regression,
    heterogeneity_terms,
    homophily_regression,
    proximity_regression,
)
from .model import Distance, DyadModelInputs, HomophilyMode, extended_dyad_link_prob, link_rates
from .population import (
    allocate_population,
    expected_link_prob,
    frequency_oracle,
    generate_population,
    link_buckets,
    monte_carlo_link_prob,
    simulate_network,
)

# (outcome column, coefficient on the student's own flag) pairs whose
# negative sign is the homophily pattern
HOMOPHILY_CHECKS = (
    ("connections_nonpoor", "poor"),
    ("connections_higher", "lower_achieving"),
    ("connections_more_central", "less_central"),
)
# expected sign of the proximity-by-dissimilarity interactions per mode
DELTA_SIGNS = {
    HomophilyMode.LEARNING.value: 1.0,
    HomophilyMode.PREFERENCE.value: -1.0,
}

CURVE_COLUMNS = ["mode", "spec", "d", "term", "seed", "estimate", "cluster_se", "n", "n_clusters"]


class StageError(RuntimeError):
    def __init__(self, stage, seed, cause):
        where = f" (seed {seed})" if seed is not None else ""
        super().__init__(f"stage '{stage}' failed{where}: {cause}")
        self.stage = stage
        self.seed = seed


@contextmanager
def _stage(name, seed=None):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, seed, exc) from exc


@dataclass
class SeedData:
    seed: int
    sim: object
    population: object
    allocation: object
    proximity: pd.DataFrame
    dyads: pd.DataFrame
    combinations: np.ndarray


def prepare_seed(config, seed):
    """Population, allocation and the outcome-free dyad table for one seed."""
    with _stage("population", seed):
        sim = config.sim_config(seed)
        population = generate_population(sim)
    with _stage("randomize", seed):
        allocation = allocate_population(population, seed, config.dorm_pattern)
        combos = np.array([allocation.assignments[k].combination for k in range(len(population))])
    with _stage("dyads", seed):
        pairs = population.dyad_pairs()
        proximity = allocation.indicators(*pairs, d_max=max(config.d_range))
        dyads = build_dyads(population, proximity, None, combos)
    return SeedData(seed, sim, population, allocation, proximity, dyads, combos)


def _rows(out, seed, mode, spec, d, result):
    for term, est in result.coefficients.items():
        out.append({"mode": mode, "spec": spec, "d": d, "term": term, "seed": seed, "estimate": est,
                    "cluster_se": result.cluster_se[term], "n": result.n_obs,
                    "n_clusters": result.n_clusters})


@dataclass
class SeedResult:
    seed: int
    rows: List[dict]
    buckets: pd.DataFrame


def run_seed(config, seed, modes):
    params = config.model_params()
    data = prepare_seed(config, seed)
    dyads = data.dyads
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CollinearityWarning)
        with _stage("first_stage", seed):
            design = DemeanedDesign(dyads, DYAD_FE, "network")
            design.prepare(["physical_neighbor"] + [f"l_{d}" for d in config.d_range])
            for d in config.d_range:
                _rows(rows, seed, "design", "first_stage", d, first_stage_regression(dyads, d, design))
        if config.replications == 0 or not modes:
            return SeedResult(seed, rows, pd.DataFrame(columns=["mode", "s", "distance", "n", "links"]))

        buckets = []
        sims = {}
        with _stage("simulate", seed):
            for mode in modes:
                draws = [simulate_network(data.population, data.allocation, params, data.sim, mode,
                                          config.preference_lambda, replication=r,
                                          pairs=(data.proximity["i"].to_numpy(), data.proximity["j"].to_numpy()))
                         for r in range(config.replications)]
                sims[mode] = draws
                for r, out in enumerate(draws):
                    b = link_buckets(out, data.sim.first_year_near_multiplier)
                    if data.sim.persistence > 0:
                        b = link_buckets(out[~out["linked_baseline"]], data.sim.first_year_near_multiplier)
                    b.insert(0, "mode", mode)
                    buckets.append(b)
            first = sims[modes[0]][0]
            dyads["baseline_link"] = first["linked_baseline"].to_numpy(np.int8)

        with _stage("estimate", seed):
            design.prepare(["baseline_link"] + [t for d in config.d_range for t in heterogeneity_terms(d)])
            placebo = DemeanedDesign(dyads, DYAD_FE, "network",
                                     mask=dyads["baseline_available"].to_numpy(bool))
            placebo.prepare(["baseline_link"] + [f"l_{d}" for d in config.d_range])
            for d in config.d_range:
                _rows(rows, seed, "baseline", "placebo", d,
                      proximity_regression(dyads, d, outcome="baseline_link", design=placebo))
            for mode in modes:
                draws = sims[mode]
                ybar = np.mean([o["linked_endline"].to_numpy(np.float64) for o in draws], axis=0)
                prob = expected_link_prob(params, first["s"].to_numpy(), first["near"].to_numpy(),
                                          first["first"].to_numpy(), mode, config.preference_lambda,
                                          data.sim.first_year_near_multiplier)
                design.add_column(f"y:{mode}", ybar)
                design.add_column(f"p:{mode}", prob)
                for d in config.d_range:
                    _rows(rows, seed, mode, "proximity", d,
                          proximity_regression(dyads, d, outcome=f"y:{mode}", design=design))
                    _rows(rows, seed, mode, "heterogeneity", d,
                          heterogeneity_regression(dyads, d, outcome=f"y:{mode}", design=design))
                    _rows(rows, seed, mode, "heterogeneity_expected", d,
                          heterogeneity_regression(dyads, d, outcome=f"p:{mode}", design=design))
                nodes = build_nodes(data.population, dyads, data.allocation.assignments, outcome=ybar)
                for outcome in COUNT_OUTCOMES:
                    _rows(rows, seed, mode, f"homophily:{outcome}", 0, homophily_regression(nodes, outcome))
    return SeedResult(seed, rows, pd.concat(buckets, ignore_index=True))


def closed_form_oracle(params, mode, n_reps, seed, preference_lambda=1.0, z=3.0):
    """Monte Carlo link frequency against the closed form for every
    (similarity, distance) bucket."""
    lam, mu = link_rates(params, mode, preference_lambda)
    rows = []
    for s in range(params.K + 1):
        for dist in (Distance.NEAR, Distance.FAR):
            inputs = DyadModelInputs((1,) * s + (0,) * (params.K - s), dist)
            est, se = monte_carlo_link_prob(params, inputs, n_reps, seed, mode, preference_lambda)
            c = params.c_near if dist is Distance.NEAR else params.c_far
            pred = float(extended_dyad_link_prob(mu[s], params.p0, params.r, lam[s], c))
            sd = float(np.sqrt(pred * (1 - pred) / n_reps))
            rows.append({"mode": HomophilyMode.parse(mode).value, "s": s, "distance": dist.value,
                         "n": n_reps, "monte_carlo": est, "closed_form": pred, "se": sd,
                         "pass": bool(abs(est - pred) <= z * sd + 1e-12)})
    return pd.DataFrame(rows)


def summarise(curves):
    """Across-seed mean, spread and significance shares per (mode, spec, d, term)."""
    if curves.empty:
        return pd.DataFrame(columns=["mode", "spec", "d", "term", "n_seeds", "mean", "sd", "se_mean",
                                     "mean_cluster_se", "share_pos_sig", "share_neg_sig"])
    c = curves.assign(t=curves["estimate"] / curves["cluster_se"].where(curves["cluster_se"] > 0))
    g = c.groupby(["mode", "spec", "d", "term"], sort=True)
    out = g.agg(n_seeds=("estimate", "size"), mean=("estimate", "mean"), sd=("estimate", "std"),
                mean_cluster_se=("cluster_se", "mean"),
                share_pos_sig=("t", lambda t: float(np.mean(t > 1.959963984540054))),
                share_neg_sig=("t", lambda t: float(np.mean(t < -1.959963984540054)))).reset_index()
    out["sd"] = out["sd"].fillna(0.0)
    out.insert(out.columns.get_loc("sd") + 1, "se_mean", out["sd"] / np.sqrt(out["n_seeds"]))
    return out


def _lookup(summary, mode, spec, term, d=None):
    m = (summary["mode"] == mode) & (summary["spec"] == spec) & (summary["term"] == term)
    if d is not None:
        m &= summary["d"] == d
    return summary[m].sort_values("d")


def _check(name, passed, detail):
    return {"name": name, "passed": bool(passed), "detail": detail}


def evaluate_invariants(summary, curves, frequency, closed_form, d_range, modes):
    """Pass/fail ledger for the registered qualitative patterns."""
    out = []
    d_range = sorted(d_range)
    fs = curves[curves["spec"] == "first_stage"]
    if not fs.empty:
        sig = fs["estimate"] / fs["cluster_se"] > 1.959963984540054
        per_seed = sig.groupby(fs["seed"]).all()
        out.append(_check("first_stage_positive_significant", per_seed.mean() >= 0.95,
                          f"share of seeds significant at every d: {per_seed.mean():.3f}"))
    pl = curves[curves["spec"] == "placebo"]
    if not pl.empty:
        t = pl["estimate"] / pl["cluster_se"]
        rate = float(np.mean(np.abs(t) > 1.959963984540054))
        out.append(_check("placebo_rejection_rate", rate <= 0.10, f"|t|>1.96 in {rate:.3f} of regressions"))
    for mode in modes:
        gam = pd.concat([_lookup(summary, mode, "proximity", f"l_{d}", d) for d in d_range])
        if not gam.empty:
            means = gam["mean"].to_numpy()
            out.append(_check(f"{mode}:gamma_positive", np.all(means > 0),
                              "mean gamma by d: " + ", ".join(f"{v:.4f}" for v in means)))
            slope = np.polyfit(gam["d"].to_numpy(float), means, 1)[0] if len(means) > 1 else 0.0
            ok = len(means) < 2 or (means[0] > means[-1] and slope < 0)
            out.append(_check(f"{mode}:gamma_declining", ok,
                              f"gamma(d_min)={means[0]:.4f}, gamma(d_max)={means[-1]:.4f}, slope={slope:.5f}"))
        sign = DELTA_SIGNS.get(mode)
        for var in ("D_p", "D_a"):
            rows = pd.concat([_lookup(summary, mode, "heterogeneity", f"l_{d}_x_{var}", d) for d in d_range])
            if rows.empty or sign is None:
                continue
            avg = float(rows["mean"].mean())
            exp_rows = pd.concat([_lookup(summary, mode, "heterogeneity_expected", f"l_{d}_x_{var}", d)
                                  for d in d_range])
            target = float(exp_rows["mean"].mean()) if not exp_rows.empty else float("nan")
            out.append(_check(f"{mode}:delta_{var[-1]}_sign", sign * avg > 0,
                              f"mean over seeds and d: {avg:.5f} (expected sign {'+' if sign > 0 else '-'}; "
                              f"noise-free estimand {target:.5f})"))
        for outcome, term in HOMOPHILY_CHECKS:
            rows = _lookup(summary, mode, f"homophily:{outcome}", term)
            if not rows.empty:
                v = float(rows["mean"].iloc[0])
                out.append(_check(f"{mode}:homophily_{term}_on_{outcome}", v < 0, f"mean beta {v:.4f}"))
    if frequency is not None and not frequency.empty:
        bad = frequency[~frequency["pass"]]
        out.append(_check("frequency_oracle", bad.empty, f"{len(frequency) - len(bad)}/{len(frequency)} buckets within 3 sigma"))
    if closed_form is not None and not closed_form.empty:
        bad = closed_form[~closed_form["pass"]]
        out.append(_check("closed_form_oracle", bad.empty,
                          f"{len(closed_form) - len(bad)}/{len(closed_form)} buckets within 3 SE"))
    return out


def _jsonable(frame):
    recs = frame.to_dict(orient="records")
    return [{k: (v.item() if isinstance(v, np.generic) else v) for k, v in r.items()} for r in recs]


@dataclass
class ExperimentReport:
    provenance: dict
    config: dict
    curves: pd.DataFrame
    summary: pd.DataFrame
    frequency_oracle: pd.DataFrame
    closed_form_oracle: pd.DataFrame
    invariants: List[dict]

    @property
    def passed(self):
        return all(c["passed"] for c in self.invariants)

    def invariant(self, name):
        for c in self.invariants:
            if c["name"] == name:
                return c
        raise KeyError(name)

    def gamma_curve(self, mode, spec="proximity"):
        s = self.summary
        if spec == "placebo":
            s = s[(s["spec"] == "placebo") & (s["mode"] == "baseline")]
        else:
            s = s[(s["spec"] == spec) & (s["mode"] == mode)]
        s = s[s["term"] == "l_" + s["d"].astype(str)]
        return s[["d", "mean", "se_mean", "share_pos_sig", "share_neg_sig"]].reset_index(drop=True)

    def delta_curves(self, mode):
        s = self.summary[(self.summary["spec"] == "heterogeneity") & (self.summary["mode"] == mode)]
        s = s[s["term"].str.contains("_x_D_")]
        s = s.assign(variable=s["term"].str.rsplit("_x_", n=1).str[1])
        return s[["d", "variable", "mean", "se_mean"]].reset_index(drop=True)

    def payload(self):
        return {
            "provenance": self.provenance,
            "config": self.config,
            "invariants": self.invariants,
            "summary": _jsonable(self.summary),
            "frequency_oracle": _jsonable(self.frequency_oracle),
            "closed_form_oracle": _jsonable(self.closed_form_oracle),
        }

    def to_json(self):
        return json.dumps(self.payload(), indent=2, sort_keys=True, allow_nan=True) + "\n"

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        self.curves.to_csv(out / "curves.csv", index=False)
        self.summary.to_csv(out / "summary.csv", index=False)
        self.frequency_oracle.to_csv(out / "oracle_frequency.csv", index=False)
        self.closed_form_oracle.to_csv(out / "oracle_closed_form.csv", index=False)
        fig1 = []
        for mode in sorted(set(self.curves["mode"]) - {"design", "baseline"}):
            fig1.append(self.gamma_curve(mode).assign(mode=mode, outcome="endline"))
        if (self.summary["spec"] == "placebo").any():
            fig1.append(self.gamma_curve(None, "placebo").assign(mode="baseline", outcome="baseline"))
        cols = ["mode", "outcome", "d", "mean", "se_mean", "share_pos_sig", "share_neg_sig"]
        (pd.concat(fig1, ignore_index=True)[cols] if fig1 else pd.DataFrame(columns=cols)).to_csv(
            out / "figure_proximity.csv", index=False)
        fig2 = [self.delta_curves(m).assign(mode=m) for m in sorted(set(self.curves["mode"]) - {"design", "baseline"})]
        cols = ["mode", "variable", "d", "mean", "se_mean"]
        (pd.concat(fig2, ignore_index=True)[cols] if fig2 else pd.DataFrame(columns=cols)).to_csv(
            out / "figure_heterogeneity.csv", index=False)
        return out


def run_experiment(config, modes=None, threads=None, oracle=True):
    """Run every seed of ``config`` and assemble the report.

    ``modes`` defaults to the config's single homophily mode.
    """
    modes = [HomophilyMode.parse(m).value for m in (modes or [config.mode])]
    with _stage("validate"):
        params = config.model_params()
    workers = min(threads or thread_cap(), max(1, len(config.seeds)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: run_seed(config, s, modes), config.seeds))
    else:
        results = [run_seed(config, s, modes) for s in config.seeds]

    with _stage("report"):
        curves = pd.DataFrame([r for res in results for r in res.rows], columns=CURVE_COLUMNS)
        curves = curves.sort_values(["mode", "spec", "d", "term", "seed"], kind="mergesort").reset_index(drop=True)
        summary = summarise(curves)
        freq = []
        for mode in modes:
            b = [res.buckets[res.buckets["mode"] == mode] for res in results if not res.buckets.empty]
            b = pd.concat(b, ignore_index=True) if b else pd.DataFrame()
            if not b.empty:
                f = frequency_oracle(params, mode=mode, preference_lambda=config.preference_lambda,
                                     buckets=b.drop(columns="mode"))
                f.insert(0, "mode", mode)
                freq.append(f)
        freq = pd.concat(freq, ignore_index=True) if freq else pd.DataFrame(
            columns=["mode", "s", "distance", "n", "empirical", "predicted", "se", "z", "pass"])
    with _stage("oracle"):
        if oracle and config.oracle_reps > 0:
            cf = pd.concat([closed_form_oracle(params, m, config.oracle_reps, config.seed,
                                               config.preference_lambda) for m in modes], ignore_index=True)
        else:
            cf = pd.DataFrame(columns=["mode", "s", "distance", "n", "monte_carlo", "closed_form", "se", "pass"])
    invariants = evaluate_invariants(summary, curves, freq, cf, config.d_range, modes)
    provenance = {
        "package": "homophily_lab",
        "version": __version__,
        "config_hash": config.config_hash(),
        "seeds": list(config.seeds),
        "replications": config.replications,
        "modes": modes,
    }
    return ExperimentReport(provenance, config.to_dict(), curves, summary, freq, cf, invariants)
