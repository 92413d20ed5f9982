"""Synthetic student populations and the per-dyad breakthrough simulation.

Networks are school-by-grade groups; randomization cells split a network by
gender. The first grade holds first-year students, who have no baseline
network and therefore no observed centrality classification. Every dyad's
random draws come from its own counter-based stream keyed by
``(seed, replication, i, j)`` (see :mod:`homophily_lab.kernels`).
"""
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import ndtr

from . import kernels
from .model import (
    Distance,
    HomophilyMode,
    arrival_threshold,
    cost_of_distance,
    cutoff_belief,
    extended_dyad_link_prob,
    link_rates,
)
from .randomization import allocate

_POPULATION_STREAM = 0x90901
_SPLIT_STREAM = 0x5B117

TRAITS = ("poor", "high_achiever", "latent_central")


class ConfigError(ValueError):
    pass


class Cohort(str, Enum):
    FIRST_YEAR = "FirstYear"
    RETURNING = "Returning"


@dataclass(frozen=True)
class NetworkSpec:
    """One school-by-grade network; genders split by ``male_share``."""

    school: int
    grade: int
    n_students: int
    male_share: float = 0.43


def default_networks(n_schools=19, n_grades=3, n_students=88, male_share=0.43):
    return tuple(NetworkSpec(s, g, n_students, male_share)
                 for s in range(1, n_schools + 1) for g in range(1, n_grades + 1))


@dataclass(frozen=True)
class SimConfig:
    networks: Tuple[NetworkSpec, ...] = field(default_factory=default_networks)
    poor_share: float = 0.41
    achievement_mean: float = 0.0
    achievement_sd: float = 1.0
    centrality_mean: float = 0.0
    centrality_sd: float = 1.0
    # equicorrelation of the latent normals behind poverty, achievement, centrality
    trait_correlation: float = 0.0
    baseline_density: float = 0.1
    # probability that a baseline link survives regardless of the endline draw
    persistence: float = 0.0
    # extra cost factor for near first-year pairs (1 = off)
    first_year_near_multiplier: float = 1.0
    first_year_grade: int = 1
    seed: int = 0
    replication_id: int = 0

    def __post_init__(self):
        nets = tuple(n if isinstance(n, NetworkSpec) else NetworkSpec(**n) for n in self.networks)
        object.__setattr__(self, "networks", nets)
        self.validate()

    def validate(self):
        if not self.networks:
            raise ConfigError("no networks configured")
        for n in self.networks:
            if n.n_students < 1:
                raise ConfigError(f"network school={n.school} grade={n.grade} is empty")
            if not 0.0 <= n.male_share <= 1.0:
                raise ConfigError(f"male_share must lie in [0, 1], got {n.male_share}")
        keys = [(n.school, n.grade) for n in self.networks]
        if len(set(keys)) != len(keys):
            raise ConfigError("duplicate (school, grade) networks")
        for name in ("poor_share", "baseline_density", "persistence"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not -0.5 < self.trait_correlation < 1.0:
            raise ConfigError("trait_correlation must lie in (-0.5, 1) for a valid 3x3 equicorrelation")
        if self.achievement_sd <= 0 or self.centrality_sd <= 0:
            raise ConfigError("score standard deviations must be positive")
        if self.first_year_near_multiplier <= 0:
            raise ConfigError("first_year_near_multiplier must be positive")

    def to_dict(self):
        d = asdict(self)
        d["networks"] = [asdict(n) for n in self.networks]
        return d

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class Student:
    id: int
    cell: Tuple[int, int, str]
    cohort: Cohort
    poor: bool
    achievement_score: float
    centrality_score: Optional[float]
    traits: Tuple[bool, ...]


class Population:
    """Node table plus the index helpers the simulator needs.

    ``nodes`` has one row per student, ids ``0..n-1`` in network order, so
    every network occupies a contiguous id range.
    """

    def __init__(self, nodes, flagged_cells=()):
        self.nodes = nodes.reset_index(drop=True)
        if not np.array_equal(self.nodes["id"].to_numpy(), np.arange(len(self.nodes))):
            raise ValueError("student ids must be 0..n-1 in row order")
        self.flagged_cells = tuple(flagged_cells)

    def __len__(self):
        return len(self.nodes)

    @property
    def traits(self):
        return self.nodes[list(TRAITS)].to_numpy(dtype=bool)

    def students(self):
        for row in self.nodes.itertuples(index=False):
            returning = row.cohort == Cohort.RETURNING.value
            yield Student(int(row.id), (int(row.school), int(row.grade), row.gender), Cohort(row.cohort),
                          bool(row.poor), float(row.achievement_score),
                          float(row.centrality_score) if returning else None,
                          (bool(row.poor), bool(row.high_achiever), bool(row.latent_central)))

    def dyad_pairs(self):
        """All unordered within-network pairs ``(i, j)``, ``i < j``, sorted."""
        ii, jj = [], []
        for _, grp in self.nodes.groupby("network", sort=True):
            ids = grp["id"].to_numpy(np.int64)
            a, b = np.triu_indices(len(ids), 1)
            ii.append(ids[a])
            jj.append(ids[b])
        if not ii:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        i, j = np.concatenate(ii), np.concatenate(jj)
        order = np.lexsort((j, i))
        return i[order], j[order]

    def roster(self):
        """Cells mapped to ``(id, design type)`` pairs for the randomizer.

        Returning students are typed on achievement and centrality, first
        years on achievement only.
        """
        cells = {}
        for row in self.nodes.itertuples(index=False):
            t = "H" if row.high_achiever else "L"
            if row.cohort == Cohort.RETURNING.value:
                t += "H" if row.central == 1.0 else "L"
            cells.setdefault((int(row.school), int(row.grade), row.gender), []).append((int(row.id), t))
        return cells


def classify_median_split(scores, cells, rng):
    """Cell-wise median split: 1.0 above, 0.0 below, NaN for singleton cells.

    Ties are ordered by a seeded random key; in odd cells a coin decides which
    side takes the extra student. Returns ``(types, flagged_cells)``.
    """
    scores = np.asarray(scores, dtype=float)
    cells = np.asarray(cells)
    out = np.full(scores.shape, np.nan)
    flagged = []
    for cell in pd.unique(cells):
        idx = np.flatnonzero(cells == cell)
        if len(idx) < 2:
            flagged.append(cell)
            continue
        order = idx[np.lexsort((rng.random(len(idx)), scores[idx]))]
        n_low = len(idx) // 2 + (int(rng.random() < 0.5) if len(idx) % 2 else 0)
        out[order[:n_low]] = 0.0
        out[order[n_low:]] = 1.0
    return out, flagged


def generate_population(config):
    rng = np.random.default_rng([int(config.seed) & 0xFFFFFFFFFFFFFFFF, _POPULATION_STREAM])
    rho = config.trait_correlation
    chol = np.linalg.cholesky(np.full((3, 3), rho) + (1 - rho) * np.eye(3))
    cols = {k: [] for k in ("school", "grade", "gender", "network")}
    z = []
    for net_id, spec in enumerate(config.networks):
        n_male = int(round(spec.n_students * spec.male_share))
        cols["school"].append(np.full(spec.n_students, spec.school))
        cols["grade"].append(np.full(spec.n_students, spec.grade))
        cols["gender"].append(np.array(["F"] * (spec.n_students - n_male) + ["M"] * n_male))
        cols["network"].append(np.full(spec.n_students, net_id))
        z.append(rng.standard_normal((spec.n_students, 3)) @ chol.T)
    z = np.vstack(z)
    nodes = pd.DataFrame({k: np.concatenate(v) for k, v in cols.items()})
    nodes.insert(0, "id", np.arange(len(nodes)))
    first = nodes["grade"].to_numpy() == config.first_year_grade
    nodes["cohort"] = np.where(first, Cohort.FIRST_YEAR.value, Cohort.RETURNING.value)
    nodes["poor"] = ndtr(z[:, 0]) < config.poor_share
    nodes["achievement_score"] = config.achievement_mean + config.achievement_sd * z[:, 1]
    latent_centrality = config.centrality_mean + config.centrality_sd * z[:, 2]
    nodes["centrality_score"] = np.where(first, np.nan, latent_centrality)
    nodes["cell"] = (nodes["school"].astype(str) + "-" + nodes["grade"].astype(str) + "-" + nodes["gender"])

    split_rng = np.random.default_rng([int(config.seed) & 0xFFFFFFFFFFFFFFFF, _SPLIT_STREAM])
    high, flagged = classify_median_split(nodes["achievement_score"].to_numpy(), nodes["cell"].to_numpy(), split_rng)
    central, flagged_c = classify_median_split(latent_centrality, nodes["cell"].to_numpy(), split_rng)
    # singleton cells cannot be split; they fall back to the low type
    nodes["high_achiever"] = np.nan_to_num(high, nan=0.0).astype(bool)
    nodes["latent_central"] = np.nan_to_num(central, nan=0.0).astype(bool)
    nodes["central"] = np.where(first, np.nan, nodes["latent_central"].astype(float))
    return Population(nodes, flagged_cells=sorted(set(flagged) | set(flagged_c)))


def allocate_population(population, seed, dorm_pattern=(2, 4, 6, 8, 3)):
    return allocate(population.roster(), seed, dorm_pattern=dorm_pattern)


def similarity_counts(traits, i, j):
    return (traits[i] == traits[j]).sum(axis=1)


def _dyad_costs(params, near, first, multiplier):
    c = np.where(near, params.c_near, params.c_far)
    if multiplier != 1.0:
        c = np.where(near & first, params.c_near * multiplier, c)
    return c


def simulate_dyad(inputs, params, seed, replication=0, i=0, j=1, mode=HomophilyMode.LEARNING,
                  preference_lambda=1.0):
    """Both sides of one dyad, drawn exactly from the stopping rule.

    Each side is maintained iff the interaction is valuable and its
    breakthrough arrives before the exploration phase ends.
    """
    lam, mu = link_rates(params, mode, preference_lambda)
    c = cost_of_distance(params, inputs.distance)
    q = arrival_threshold(params.p0, params.r, lam[inputs.s], c)
    si, sj = kernels.draw_sides(seed, np.array([replication]), np.array([i]), np.array([j]),
                                params.p0, np.array([q]), np.array([mu[inputs.s]]))
    return bool(si[0]), bool(sj[0])


def simulate_network(population, allocation, params, config, mode=HomophilyMode.LEARNING,
                     preference_lambda=1.0, replication=None, pairs=None):
    """Baseline and endline outcomes for every within-network dyad.

    Distance is ``near`` for physical neighbours and ``far`` otherwise.
    Baseline links exist only between returning students and are drawn
    independently of the allocation and of ``replication``; replications
    redraw the endline process only.
    """
    if replication is None:
        replication = config.replication_id
    i, j = population.dyad_pairs() if pairs is None else pairs
    missing = np.setdiff1d(np.unique(np.concatenate([i, j])), np.fromiter(allocation.assignments, np.int64))
    if missing.size:
        raise ValueError(f"{missing.size} students missing from the allocation, e.g. id {int(missing[0])}")
    prox = allocation.indicators(i, j, d_max=0)
    near = prox["physical_neighbor"].to_numpy()
    nodes = population.nodes
    returning = (nodes["cohort"] == Cohort.RETURNING.value).to_numpy()
    first = ~returning[i] & ~returning[j]
    s = similarity_counts(population.traits, i, j)

    lam, mu = link_rates(params, mode, preference_lambda)
    c = _dyad_costs(params, near, first, config.first_year_near_multiplier)
    q = arrival_threshold(params.p0, params.r, np.asarray(lam)[s], c)
    rep = np.full(i.shape, replication, dtype=np.int64)
    side_i, side_j = kernels.draw_sides(config.seed, rep, i, j, params.p0, q, np.asarray(mu)[s])

    both_returning = returning[i] & returning[j]
    # the baseline network predates the intervention: fixed per seed, shared by replications
    baseline = both_returning & (kernels.keyed_uniform(config.seed, 0, i, j, kernels.SLOT_BASELINE)
                                 < config.baseline_density)
    endline = side_i | side_j
    if config.persistence > 0:
        keep = kernels.keyed_uniform(config.seed, rep, i, j, kernels.SLOT_PERSIST) < config.persistence
        endline = endline | (baseline & keep)
    return pd.DataFrame({
        "replication": rep,
        "i": i,
        "j": j,
        "network": nodes["network"].to_numpy()[i],
        "s": s,
        "near": near,
        "first": first,
        "linked_baseline": baseline,
        "linked_endline": endline,
        "side_i": side_i,
        "side_j": side_j,
    })


def monte_carlo_link_prob(params, inputs, n_reps, seed, mode=HomophilyMode.LEARNING,
                          preference_lambda=1.0, lam=None, mu=None, chunk=1_000_000):
    """Link frequency over ``n_reps`` independent dyad replications.

    ``lam`` and ``mu`` override the rates the mode implies for the dyad's
    similarity. Returns ``(estimate, standard_error)`` with the binomial SE.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    lam_s, mu_s = link_rates(params, mode, preference_lambda)
    lam = lam_s[inputs.s] if lam is None else float(lam)
    mu = mu_s[inputs.s] if mu is None else float(mu)
    c = cost_of_distance(params, inputs.distance)
    q = arrival_threshold(params.p0, params.r, lam, c)
    hits = 0
    for start in range(0, n_reps, chunk):
        rep = np.arange(start, min(start + chunk, n_reps), dtype=np.int64)
        si, sj = kernels.draw_sides(seed, rep, 0, 1, params.p0, q, mu)
        hits += int(np.count_nonzero(si | sj))
    p = hits / n_reps
    return p, float(np.sqrt(p * (1 - p) / n_reps))


def simulate_side_paths(p0, r, lam, c, n_paths, dt, rng):
    """Time-stepped cross-check of one side's decision.

    Runs the discrete Bayes filter with step ``dt`` until the belief falls
    to the cutoff, and draws signal arrivals step by step (geometric with
    success probability ``lam * dt``) for valuable interactions. Returns a
    boolean array of maintained sides. Independent of the closed-form
    stopping time, so it can audit the exact sampler.
    """
    pstar = cutoff_belief(r, lam, c)
    belief, steps = p0, 0
    keep = 1.0 - lam * dt
    while belief > pstar:
        belief = belief * keep / (belief * keep + 1.0 - belief)
        steps += 1
        if steps > 10 ** 9:
            raise RuntimeError("belief never reached the cutoff")
    valuable = rng.random(n_paths) < p0
    arrival_step = rng.geometric(lam * dt, size=n_paths)
    return valuable & (arrival_step <= steps)


def expected_link_prob(params, s, near, first=None, mode=HomophilyMode.LEARNING, preference_lambda=1.0,
                       multiplier=1.0):
    """Closed-form endline link probability for each dyad (no persistence)."""
    lam, mu = link_rates(params, mode, preference_lambda)
    s = np.asarray(s, dtype=np.int64)
    near = np.asarray(near, dtype=bool)
    first = np.zeros_like(near) if first is None else np.asarray(first, dtype=bool)
    c = _dyad_costs(params, near, first, multiplier)
    return extended_dyad_link_prob(mu[s], params.p0, params.r, lam[s], c)


def link_buckets(dyads, multiplier=1.0):
    """Endline link counts per (similarity, distance) bucket.

    Near first-year dyads are left out when the first-year cost multiplier
    is active, since their cost differs from ``c_near``.
    """
    df = dyads
    if multiplier != 1.0:
        df = df[~(df["near"] & df["first"])]
    g = df.groupby(["s", "near"], sort=True)["linked_endline"].agg(["size", "sum"]).reset_index()
    return pd.DataFrame({"s": g["s"].astype(int),
                         "distance": np.where(g["near"], Distance.NEAR.value, Distance.FAR.value),
                         "n": g["size"].astype(np.int64), "links": g["sum"].astype(np.int64)})


def frequency_oracle(params, dyads=None, mode=HomophilyMode.LEARNING, preference_lambda=1.0,
                     multiplier=1.0, z=3.0, buckets=None):
    """Empirical endline link rate per (similarity, distance) bucket against
    the closed-form prediction, with a ``z``-sigma binomial pass flag.

    Pass either a dyad outcome table or pre-aggregated ``buckets`` (as from
    :func:`link_buckets`, possibly summed over seeds and replications).
    Dyads with a persisting baseline link should not be pooled in.
    """
    if buckets is None:
        buckets = link_buckets(dyads, multiplier)
    buckets = buckets.groupby(["s", "distance"], sort=True)[["n", "links"]].sum().reset_index()
    lam, mu = link_rates(params, mode, preference_lambda)
    rows = []
    for b in buckets.itertuples(index=False):
        c = params.c_near if b.distance == Distance.NEAR.value else params.c_far
        pred = float(extended_dyad_link_prob(mu[b.s], params.p0, params.r, lam[b.s], c))
        rate = b.links / b.n
        se = float(np.sqrt(pred * (1 - pred) / b.n))
        zval = (rate - pred) / se if se > 0 else 0.0
        rows.append({"s": int(b.s), "distance": b.distance, "n": int(b.n), "empirical": rate,
                     "predicted": pred, "se": se, "z": zval,
                     "pass": bool(abs(rate - pred) <= z * se + 1e-12)})
    return pd.DataFrame(rows, columns=["s", "distance", "n", "empirical", "predicted", "se", "z", "pass"])
