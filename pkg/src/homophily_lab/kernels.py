"""Hot numeric kernels with interchangeable numba / numpy implementations.

Three kernels dominate runtime:

* ``keyed_uniform`` -- counter-based uniforms keyed by
  ``(seed, replication, i, j, slot)``. Every dyad owns its own stream, so any
  evaluation order (serial, threaded, chunked) produces the same bits.
* ``draw_sides`` -- the fused per-dyad breakthrough draw.
* ``demean_sweep`` / ``max_group_mean`` -- one alternating-projections sweep
  over several fixed-effect dimensions.

The public wrappers dispatch on :data:`homophily_lab._accel.USE_NUMBA`; the
``*_numpy`` and ``*_numba`` variants are importable for tests and benchmarks.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# splitmix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53

# Stream slots used by the simulator. Fixed forever: changing them changes
# every simulated table.
SLOT_BASELINE = 0
SLOT_VBAR = 1
SLOT_VALUE_I = 2
SLOT_ARRIVAL_I = 3
SLOT_VALUE_J = 4
SLOT_ARRIVAL_J = 5
SLOT_PERSIST = 6


def _as_u64(x):
    """Coerce integer keys to uint64 (negative values wrap two's-complement)."""
    arr = np.asarray(x)
    if arr.dtype == np.uint64:
        return arr
    if arr.dtype.kind == "i":
        return arr.astype(np.int64).view(np.uint64)
    if arr.dtype.kind in "ub":
        return arr.astype(np.uint64)
    raise TypeError(f"expected integer keys, got dtype {arr.dtype}")


def _seed_u64(seed):
    if isinstance(seed, (int, np.integer)):
        return np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    raise TypeError("seed must be an integer")


# --------------------------------------------------------------------------
# keyed uniforms
# --------------------------------------------------------------------------

def _mix_numpy(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def keyed_uniform_numpy(seed, rep, i, j, slot):
    seed = _seed_u64(seed)
    rep, i, j, slot = np.broadcast_arrays(_as_u64(rep), _as_u64(i), _as_u64(j), _as_u64(slot))
    with np.errstate(over="ignore"):
        h = _mix_numpy(np.full(rep.shape, seed, dtype=np.uint64) + _GOLDEN)
        for part in (rep, i, j, slot):
            h = _mix_numpy((h ^ part) + _GOLDEN)
    return (h >> _S11).astype(np.float64) * _INV53


@njit
def _mix_nb(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@njit
def _key_nb(seed, rep, i, j, slot):
    g = np.uint64(0x9E3779B97F4A7C15)
    h = _mix_nb(seed + g)
    h = _mix_nb((h ^ rep) + g)
    h = _mix_nb((h ^ i) + g)
    h = _mix_nb((h ^ j) + g)
    h = _mix_nb((h ^ slot) + g)
    return np.float64(h >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit
def _keyed_uniform_loop(seed, rep, i, j, slot, out):
    for k in range(out.shape[0]):
        out[k] = _key_nb(seed, rep[k], i[k], j[k], slot[k])


def keyed_uniform_numba(seed, rep, i, j, slot):
    seed = _seed_u64(seed)
    rep, i, j, slot = np.broadcast_arrays(_as_u64(rep), _as_u64(i), _as_u64(j), _as_u64(slot))
    shape = rep.shape
    flat = [np.ascontiguousarray(a).ravel() for a in (rep, i, j, slot)]
    out = np.empty(flat[0].shape[0], dtype=np.float64)
    _keyed_uniform_loop(seed, flat[0], flat[1], flat[2], flat[3], out)
    return out.reshape(shape)


def keyed_uniform(seed, rep, i, j, slot):
    """Uniform [0, 1) draws, one per broadcast key ``(rep, i, j, slot)``."""
    if USE_NUMBA:
        return keyed_uniform_numba(seed, rep, i, j, slot)
    return keyed_uniform_numpy(seed, rep, i, j, slot)


# --------------------------------------------------------------------------
# fused breakthrough draws
# --------------------------------------------------------------------------

def draw_sides_numpy(seed, rep, i, j, p0, q, mu):
    """Per-dyad side decisions.

    A side is maintained when the pair is worth exploring (``u_vbar < mu``),
    the interaction is valuable (``u_value < p0``) and the breakthrough lands
    inside the exploration phase (``u_arrival < q`` with
    ``q = 1 - exp(-lambda * t_star)``).
    """
    rep, i, j, q, mu = np.broadcast_arrays(_as_u64(rep), _as_u64(i), _as_u64(j),
                                           np.asarray(q, dtype=np.float64),
                                           np.asarray(mu, dtype=np.float64))
    explored = keyed_uniform_numpy(seed, rep, i, j, SLOT_VBAR) < mu
    side_i = (explored
              & (keyed_uniform_numpy(seed, rep, i, j, SLOT_VALUE_I) < p0)
              & (keyed_uniform_numpy(seed, rep, i, j, SLOT_ARRIVAL_I) < q))
    side_j = (explored
              & (keyed_uniform_numpy(seed, rep, i, j, SLOT_VALUE_J) < p0)
              & (keyed_uniform_numpy(seed, rep, i, j, SLOT_ARRIVAL_J) < q))
    return side_i, side_j


@njit
def _draw_sides_loop(seed, rep, i, j, p0, q, mu, side_i, side_j):
    for k in range(rep.shape[0]):
        if _key_nb(seed, rep[k], i[k], j[k], np.uint64(1)) >= mu[k]:
            side_i[k] = False
            side_j[k] = False
            continue
        side_i[k] = (_key_nb(seed, rep[k], i[k], j[k], np.uint64(2)) < p0
                     and _key_nb(seed, rep[k], i[k], j[k], np.uint64(3)) < q[k])
        side_j[k] = (_key_nb(seed, rep[k], i[k], j[k], np.uint64(4)) < p0
                     and _key_nb(seed, rep[k], i[k], j[k], np.uint64(5)) < q[k])


def draw_sides_numba(seed, rep, i, j, p0, q, mu):
    seed = _seed_u64(seed)
    rep, i, j, q, mu = np.broadcast_arrays(_as_u64(rep), _as_u64(i), _as_u64(j),
                                           np.asarray(q, dtype=np.float64),
                                           np.asarray(mu, dtype=np.float64))
    shape = rep.shape
    flat = [np.ascontiguousarray(a).ravel() for a in (rep, i, j, q, mu)]
    side_i = np.empty(flat[0].shape[0], dtype=np.bool_)
    side_j = np.empty_like(side_i)
    _draw_sides_loop(seed, flat[0], flat[1], flat[2], float(p0), flat[3], flat[4], side_i, side_j)
    return side_i.reshape(shape), side_j.reshape(shape)


def draw_sides(seed, rep, i, j, p0, q, mu):
    if USE_NUMBA:
        return draw_sides_numba(seed, rep, i, j, p0, q, mu)
    return draw_sides_numpy(seed, rep, i, j, p0, q, mu)


# --------------------------------------------------------------------------
# alternating projections
# --------------------------------------------------------------------------

def demean_sweep_numpy(X, codes, counts):
    """One in-place sweep over every fixed-effect dimension.

    ``X`` is (n, k) float64, ``codes`` (m, n) int64 group codes, ``counts``
    a list of per-dimension group sizes. Returns the largest absolute group
    mean removed during the sweep.
    """
    delta = 0.0
    k = X.shape[1]
    for d in range(codes.shape[0]):
        g = codes[d]
        cnt = counts[d]
        means = np.empty((cnt.shape[0], k))
        for c in range(k):
            means[:, c] = np.bincount(g, weights=X[:, c], minlength=cnt.shape[0]) / cnt
        if means.size:
            delta = max(delta, float(np.abs(means).max()))
        X -= means[g]
    return delta


def max_group_mean_numpy(X, codes, counts):
    worst = 0.0
    for d in range(codes.shape[0]):
        g = codes[d]
        cnt = counts[d]
        for c in range(X.shape[1]):
            m = np.bincount(g, weights=X[:, c], minlength=cnt.shape[0]) / cnt
            if m.size:
                worst = max(worst, float(np.abs(m).max()))
    return worst


@njit
def _demean_sweep_nb(X, codes, counts, n_groups, buf):
    n, k = X.shape
    delta = 0.0
    for d in range(codes.shape[0]):
        G = n_groups[d]
        for g in range(G):
            for c in range(k):
                buf[g, c] = 0.0
        for r in range(n):
            g = codes[d, r]
            for c in range(k):
                buf[g, c] += X[r, c]
        for g in range(G):
            cnt = counts[d, g]
            for c in range(k):
                v = buf[g, c] / cnt
                buf[g, c] = v
                if abs(v) > delta:
                    delta = abs(v)
        for r in range(n):
            g = codes[d, r]
            for c in range(k):
                X[r, c] -= buf[g, c]
    return delta


@njit
def _max_group_mean_nb(X, codes, counts, n_groups, buf):
    n, k = X.shape
    worst = 0.0
    for d in range(codes.shape[0]):
        G = n_groups[d]
        for g in range(G):
            for c in range(k):
                buf[g, c] = 0.0
        for r in range(n):
            g = codes[d, r]
            for c in range(k):
                buf[g, c] += X[r, c]
        for g in range(G):
            cnt = counts[d, g]
            for c in range(k):
                v = abs(buf[g, c] / cnt)
                if v > worst:
                    worst = v
    return worst


def _padded_counts(counts):
    n_groups = np.array([c.shape[0] for c in counts], dtype=np.int64)
    width = int(n_groups.max()) if n_groups.size else 0
    padded = np.ones((len(counts), max(width, 1)), dtype=np.float64)
    for d, c in enumerate(counts):
        padded[d, :c.shape[0]] = c
    return padded, n_groups


def demean_sweep_numba(X, codes, counts):
    padded, n_groups = _padded_counts(counts)
    buf = np.empty((padded.shape[1], X.shape[1]), dtype=np.float64)
    return _demean_sweep_nb(X, codes, padded, n_groups, buf)


def max_group_mean_numba(X, codes, counts):
    padded, n_groups = _padded_counts(counts)
    buf = np.empty((padded.shape[1], X.shape[1]), dtype=np.float64)
    return _max_group_mean_nb(X, codes, padded, n_groups, buf)


def demean_sweep(X, codes, counts):
    if USE_NUMBA:
        return demean_sweep_numba(X, codes, counts)
    return demean_sweep_numpy(X, codes, counts)


def max_group_mean(X, codes, counts):
    if USE_NUMBA:
        return max_group_mean_numba(X, codes, counts)
    return max_group_mean_numpy(X, codes, counts)
