"""Closed forms of the exponential-bandit friendship model.

A student keeps an unproven interaction alive while the posterior that it is
valuable stays above a cutoff; valuable interactions reveal themselves at
Poisson rate ``lambda`` which grows with the pair's similarity, and keeping an
interaction alive costs a flow ``c`` that is lower for physically close
pairs. A dyad is linked when at least one side ends up maintaining it.

Every scalar function here is vectorised: arrays broadcast like numpy
ufuncs, scalars come back as python floats.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence, Union

import numpy as np

ArrayLike = Union[float, np.ndarray]


class ModelInputError(ValueError):
    """Argument outside an operation's domain."""


class ModelRestrictionError(ModelInputError):
    """Parameters violate the model's maintained assumptions."""


class Distance(str, Enum):
    NEAR = "near"
    FAR = "far"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ModelInputError(f"distance must be 'near' or 'far', got {value!r}") from None


def _table(values, name):
    if isinstance(values, Mapping):
        keys = sorted(int(k) for k in values)
        if keys != list(range(len(keys))):
            raise ModelRestrictionError(f"{name} keys must be 0..K, got {keys}")
        values = [values[k] if k in values else values[str(k)] for k in keys]
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class ModelParams:
    """Primitives of the model, validated at construction.

    ``lambda_map[s]`` and ``mu_map[s]`` give the signal rate and the
    probability of a high maximum payoff for a pair sharing ``s`` of the
    ``K`` binary categories.
    """

    p0: float = 0.5
    r: float = 1.0
    c_near: float = 0.1
    c_far: float = 0.25
    lambda_map: Sequence[float] = (0.5, 1.0, 1.5, 2.0)
    mu_map: Sequence[float] = (0.6, 0.75, 0.9, 1.0)
    K: int = field(default=None)
    # c_near == c_far is the no-proximity benchmark; only admitted on request
    allow_equal_costs: bool = field(default=False, compare=False)

    def __post_init__(self):
        lam = _table(self.lambda_map, "lambda_map")
        mu = _table(self.mu_map, "mu_map")
        object.__setattr__(self, "lambda_map", lam)
        object.__setattr__(self, "mu_map", mu)
        if self.K is None:
            object.__setattr__(self, "K", len(lam) - 1)
        self.validate()

    def validate(self):
        K = self.K
        if not isinstance(K, (int, np.integer)) or K < 1:
            raise ModelRestrictionError(f"K must be a positive integer, got {K!r}")
        if len(self.lambda_map) != K + 1 or len(self.mu_map) != K + 1:
            raise ModelRestrictionError(
                f"lambda_map and mu_map need K+1={K + 1} entries "
                f"(got {len(self.lambda_map)} and {len(self.mu_map)})")
        if not 0.0 < self.p0 < 1.0:
            raise ModelRestrictionError(f"p0 must lie in (0, 1), got {self.p0}")
        if not self.r > 0.0:
            raise ModelRestrictionError(f"r must be positive, got {self.r}")
        for name, c in (("c_near", self.c_near), ("c_far", self.c_far)):
            if not 0.0 < c < 1.0:
                raise ModelRestrictionError(f"{name} must lie in (0, 1), got {c}")
        if self.c_near > self.c_far or (self.c_near == self.c_far and not self.allow_equal_costs):
            raise ModelRestrictionError(
                f"proximity must reduce cost: need c_near < c_far, got {self.c_near} >= {self.c_far}")
        if not self.p0 > self.c_far:
            raise ModelRestrictionError(
                f"model restriction violated: need p0 > c_far, got p0={self.p0}, c_far={self.c_far}")
        lam = np.asarray(self.lambda_map)
        if np.any(lam <= 0) or np.any(np.diff(lam) <= 0):
            raise ModelRestrictionError(f"lambda_map must be positive and strictly increasing, got {self.lambda_map}")
        mu = np.asarray(self.mu_map)
        if np.any(mu <= 0) or np.any(mu > 1) or np.any(np.diff(mu) <= 0):
            raise ModelRestrictionError(f"mu_map must lie in (0, 1] and increase strictly, got {self.mu_map}")

    def to_dict(self):
        return {
            "p0": self.p0,
            "r": self.r,
            "c_near": self.c_near,
            "c_far": self.c_far,
            "lambda_map": list(self.lambda_map),
            "mu_map": list(self.mu_map),
        }

    @classmethod
    def from_dict(cls, data, **kwargs):
        keys = ("p0", "r", "c_near", "c_far", "lambda_map", "mu_map")
        return cls(**{k: data[k] for k in keys if k in data}, **kwargs)


@dataclass(frozen=True)
class DyadModelInputs:
    similarity: tuple
    distance: Distance = Distance.FAR

    def __post_init__(self):
        object.__setattr__(self, "similarity", tuple(int(bool(t)) for t in self.similarity))
        object.__setattr__(self, "distance", Distance.parse(self.distance))

    @property
    def s(self):
        return sum(self.similarity)


@dataclass(frozen=True)
class ClosedFormOutputs:
    cutoff_belief: float
    exploration_time: float
    side_prob: float
    link_prob: float
    gamma: float

    def lines(self, digits=6):
        return [f"{name}: {getattr(self, name):.{digits}f}"
                for name in ("cutoff_belief", "exploration_time", "side_prob", "link_prob", "gamma")]


def _out(x):
    x = np.asarray(x, dtype=np.float64)
    return float(x) if x.ndim == 0 else x


def similarity(tau_i, tau_j):
    """Per-category agreement vector and its count ``s``."""
    tau_i = np.asarray(tau_i, dtype=bool).ravel()
    tau_j = np.asarray(tau_j, dtype=bool).ravel()
    if tau_i.shape != tau_j.shape:
        raise ModelInputError(f"type vectors differ in length: {tau_i.size} vs {tau_j.size}")
    theta = tuple(int(a == b) for a, b in zip(tau_i, tau_j))
    return theta, sum(theta)


def cost_of_distance(params, d):
    return params.c_near if Distance.parse(d) is Distance.NEAR else params.c_far


def lambda_of_similarity(params, s):
    return params.lambda_map[_check_s(params, s)]


def mu_of_similarity(params, s):
    return params.mu_map[_check_s(params, s)]


def _check_s(params, s):
    if int(s) != s or not 0 <= s <= params.K:
        raise ModelInputError(f"similarity count must be an integer in [0, {params.K}], got {s}")
    return int(s)


def posterior_no_signal(p0, lam, t):
    """Belief that the interaction is valuable after ``t`` units without a signal."""
    p0, lam, t = (np.asarray(a, dtype=np.float64) for a in (p0, lam, t))
    if np.any((p0 <= 0) | (p0 >= 1)) or np.any(lam <= 0) or np.any(t < 0):
        raise ModelInputError("posterior_no_signal needs p0 in (0,1), lambda > 0, t >= 0")
    w = p0 * np.exp(-lam * t)
    return _out(w / (w + 1.0 - p0))


def cutoff_belief(r, lam, c):
    """Belief below which maintaining the interaction stops being optimal."""
    r, lam, c = (np.asarray(a, dtype=np.float64) for a in (r, lam, c))
    if np.any(r <= 0) or np.any(lam <= 0):
        raise ModelInputError("cutoff_belief needs r > 0 and lambda > 0")
    if np.any((c < 0) | (c >= 1)):
        raise ModelInputError("cutoff_belief needs c in [0, 1)")
    return _out(r * c / (r + lam - lam * c))


def _check_explore(p0, r, lam, c):
    p0, r, lam, c = (np.asarray(a, dtype=np.float64) for a in (p0, r, lam, c))
    if np.any((p0 <= 0) | (p0 >= 1)) or np.any(r <= 0) or np.any(lam <= 0):
        raise ModelInputError("need p0 in (0,1), r > 0, lambda > 0")
    if np.any((c <= 0) | (c >= 1)):
        raise ModelInputError("need c in (0, 1)")
    # p0 == c still leaves a positive exploration phase; ModelParams applies
    # the strict p0 > c_far restriction
    if np.any(p0 < c):
        raise ModelRestrictionError("model restriction violated: need p0 >= c")
    return p0, r, lam, c


def _loss_term(p0, r, lam, c):
    # share of valuable interactions abandoned before their breakthrough
    return (1.0 - p0) / p0 * (r / (r + lam)) * (c / (1.0 - c))


def exploration_time(p0, r, lam, c):
    """Length of the exploration phase ``t*``."""
    p0, r, lam, c = _check_explore(p0, r, lam, c)
    return _out(np.log(p0 / (1.0 - p0) * ((r + lam) / r) * ((1.0 - c) / c)) / lam)


def side_maintain_prob(p0, r, lam, c):
    """Ex ante probability that one side keeps the interaction."""
    p0, r, lam, c = _check_explore(p0, r, lam, c)
    return _out(p0 * (1.0 - _loss_term(p0, r, lam, c)))


def arrival_threshold(p0, r, lam, c):
    """``1 - exp(-lambda t*)``: probability a breakthrough lands before ``t*``."""
    p0, r, lam, c = _check_explore(p0, r, lam, c)
    return _out(1.0 - _loss_term(p0, r, lam, c))


def dyad_link_prob(p0, r, lam, c):
    """Probability that at least one side maintains the interaction."""
    p0, r, lam, c = _check_explore(p0, r, lam, c)
    return _out(1.0 - (1.0 - p0) ** 2 * (1.0 + (r / (r + lam)) * (c / (1.0 - c))) ** 2)


def extended_dyad_link_prob(mu, p0, r, lam, c):
    """Link probability when only a share ``mu`` of pairs is worth exploring."""
    mu_arr = np.asarray(mu, dtype=np.float64)
    if np.any((mu_arr < 0) | (mu_arr > 1)):
        raise ModelInputError(f"mu must lie in [0, 1], got {mu}")
    return _out(mu_arr * np.asarray(dyad_link_prob(p0, r, lam, c)))


def proximity_effect(params, lam, mu=1.0):
    """Near-minus-far link probability at signal rate ``lam``.

    Expects validated params; ``c_near == c_far`` is only reachable through
    the raw closed forms and gives zero.
    """
    near = dyad_link_prob(params.p0, params.r, lam, params.c_near)
    far = dyad_link_prob(params.p0, params.r, lam, params.c_far)
    return _out(np.asarray(mu) * (np.asarray(near) - np.asarray(far)))


def closed_form(params, s, distance=Distance.FAR, lam=None):
    """All closed-form outputs for one dyad class."""
    if lam is None:
        lam = lambda_of_similarity(params, s)
    c = cost_of_distance(params, distance)
    return ClosedFormOutputs(
        cutoff_belief=cutoff_belief(params.r, lam, c),
        exploration_time=exploration_time(params.p0, params.r, lam, c),
        side_prob=side_maintain_prob(params.p0, params.r, lam, c),
        link_prob=dyad_link_prob(params.p0, params.r, lam, c),
        gamma=proximity_effect(params, lam),
    )


def raw_gamma(p0, r, lam, c_near, c_far):
    """Proximity effect straight from the link formula, without params validation."""
    return _out(np.asarray(dyad_link_prob(p0, r, lam, c_near)) - np.asarray(dyad_link_prob(p0, r, lam, c_far)))


class HomophilyMode(str, Enum):
    """Which channel similarity acts through.

    ``learning`` raises the signal rate with similarity and keeps every pair
    worth exploring; ``preference`` keeps the rate fixed and raises the share
    of pairs worth exploring; ``mixed`` does both.
    """

    LEARNING = "learning"
    PREFERENCE = "preference"
    MIXED = "mixed"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ModelInputError(f"mode must be learning, preference or mixed, got {value!r}") from None


def link_rates(params, mode=HomophilyMode.LEARNING, preference_lambda=1.0):
    """Per-similarity ``(lambda, mu)`` arrays of length ``K + 1`` for a mode."""
    mode = HomophilyMode.parse(mode)
    n = params.K + 1
    if mode is HomophilyMode.PREFERENCE:
        if not preference_lambda > 0:
            raise ModelInputError(f"preference_lambda must be positive, got {preference_lambda}")
        lam = np.full(n, float(preference_lambda))
    else:
        lam = np.asarray(params.lambda_map, dtype=np.float64)
    if mode is HomophilyMode.LEARNING:
        mu = np.ones(n)
    else:
        mu = np.asarray(params.mu_map, dtype=np.float64)
    return lam, mu
