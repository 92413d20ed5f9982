"""Randomization-list design for dorm allocation.

Students are typed by median splits (``"H"``/``"L"`` per treatment
dimension) and, conditional on type, assigned a peer type. A student's own
type and assigned peer type define a *combination*: pure combinations hold a
single type, mixed ones hold two types in equal numbers. Combinations are
laid out on a per-cell list in random order; mixed blocks strictly alternate
their two types so that a student's list neighbours carry the assigned peer
type. Dorms are filled by cutting the list into consecutive segments.

With one dimension the combinations are the familiar A (H with H peers),
B (mixed) and C (L with L peers). With two dimensions there are four types
and ten combinations; mixed blocks still contain exactly two types, so the
same alternation rule applies unchanged.
"""
import functools
import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# stream tags mixed into per-cell seeds
_ASSIGN_STREAM = 0x5A551
_ORDER_STREAM = 0x02DE2
_LIST_STREAM = 0x11575
_DORM_STREAM = 0xD02A1

BUNK_THRESHOLD = 5


class AlternationError(ValueError):
    """A mixed block cannot alternate its two types."""


class DormSizeError(ValueError):
    pass


class Arm(str, Enum):
    HIGH = "HighTypePeers"
    LOW = "LowTypePeers"


@functools.lru_cache(maxsize=None)
def design_types(n_dimensions):
    """All type labels for ``n_dimensions`` binary splits, ``H`` before ``L``."""
    return tuple("".join(t) for t in itertools.product("HL", repeat=n_dimensions))


def combination_catalog(n_dimensions):
    """Ordered ``(type, type)`` pairs with their labels."""
    types = design_types(n_dimensions)
    pairs = [(a, b) for k, a in enumerate(types) for b in types[k:]]
    if n_dimensions == 1:
        # A = (H, H), B = (H, L), C = (L, L)
        return dict(zip("ABC", pairs))
    return {f"{a}+{b}": (a, b) for a, b in pairs}


def _pair_label(catalog, a, b):
    types = design_types(len(a))
    key = (a, b) if types.index(a) <= types.index(b) else (b, a)
    for label, pair in catalog.items():
        if pair == key:
            return label
    raise KeyError(key)


def target_high_share(combination_pair, dim):
    """Share of high types in dimension ``dim`` the combination prescribes."""
    a, b = combination_pair
    return ((a[dim] == "H") + (b[dim] == "H")) / 2.0


@dataclass(frozen=True)
class TreatmentAssignment:
    student_id: int
    student_type: str
    peer_type: str
    combination: str

    @property
    def arms(self):
        return tuple(Arm.HIGH if c == "H" else Arm.LOW for c in self.peer_type)

    @property
    def mixed(self):
        return self.student_type != self.peer_type


@dataclass(frozen=True)
class ListRow:
    position: int
    student_id: int
    combination: str
    student_type: str
    peer_type: str


@dataclass(frozen=True)
class RandomizationList:
    cell: Tuple
    rows: Tuple[ListRow, ...]

    def __len__(self):
        return len(self.rows)

    @property
    def types(self):
        return [row.student_type for row in self.rows]

    @property
    def student_ids(self):
        return [row.student_id for row in self.rows]

    @property
    def combination_order(self):
        seen = []
        for row in self.rows:
            if not seen or seen[-1] != row.combination:
                seen.append(row.combination)
        return seen


@dataclass(frozen=True)
class DormAssignment:
    dorm_id: int
    cell: Tuple
    beds: Tuple[Tuple[int, int], ...]  # (student_id, bed index from 1)

    @property
    def size(self):
        return len(self.beds)

    @property
    def student_ids(self):
        return [sid for sid, _ in self.beds]


def _cell_rng(seed, stream, cell):
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, stream]
    key.extend(int(c) & 0xFFFFFFFF for c in _cell_key_ints(cell))
    return np.random.default_rng(key)


def _cell_key_ints(cell):
    if cell is None:
        return []
    if isinstance(cell, (tuple, list)):
        out = []
        for c in cell:
            out.extend(_cell_key_ints(c))
        return out
    if isinstance(cell, (int, np.integer)):
        return [int(cell)]
    return [sum((k + 1) * ord(ch) for k, ch in enumerate(str(cell)))]


def _largest_remainder(total, weights, rng):
    weights = np.asarray(weights, dtype=float)
    quotas = total * weights / weights.sum()
    base = np.floor(quotas).astype(int)
    left = total - base.sum()
    if left:
        frac = quotas - base
        tiebreak = rng.random(len(weights))
        order = np.lexsort((tiebreak, -frac))
        base[order[:left]] += 1
    return base


def assign_treatments(students, seed, cell=None):
    """Assign each student a peer type within one randomization cell.

    ``students`` is a sequence of ``(student_id, type_label)``. For ``T``
    types each type sends ``2/(T+1)`` of its students to its pure
    combination and ``1/(T+1)`` to each mixed one (two thirds / one third
    with a single dimension), rounding by largest remainder with seeded
    tie-breaks. Mixed blocks are then trimmed so their two types differ by at
    most one member; trimming is logged as best-effort rounding.
    """
    students = list(students)
    if not students:
        return []
    dims = {len(t) for _, t in students}
    if len(dims) != 1:
        raise ValueError(f"mixed type lengths in one cell: {sorted(dims)}")
    n_dim = dims.pop()
    types = design_types(n_dim)
    unknown = {t for _, t in students} - set(types)
    if unknown:
        raise ValueError(f"unknown type labels {sorted(unknown)}")
    catalog = combination_catalog(n_dim)
    rng = _cell_rng(seed, _ASSIGN_STREAM, cell)

    by_type = {t: [sid for sid, tt in students if tt == t] for t in types}
    # quota[t][u] = how many type-t students get peer type u
    quota = {}
    for t in types:
        weights = [2.0 if u == t else 1.0 for u in types]
        quota[t] = dict(zip(types, _largest_remainder(len(by_type[t]), weights, rng)))
    trimmed = False
    for a, b in itertools.combinations(types, 2):
        while quota[a][b] > quota[b][a] + 1:
            quota[a][b] -= 1
            quota[a][a] += 1
            trimmed = True
        while quota[b][a] > quota[a][b] + 1:
            quota[b][a] -= 1
            quota[b][b] += 1
            trimmed = True
    if trimmed or len(students) < len(types) + 1:
        logger.info("cell %s: best-effort rounding of peer-type proportions", cell)

    out = []
    for t in types:
        ids = list(rng.permutation(by_type[t])) if by_type[t] else []
        start = 0
        for u in types:
            for sid in ids[start:start + quota[t][u]]:
                out.append(TreatmentAssignment(int(sid), t, u, _pair_label(catalog, t, u)))
            start += quota[t][u]
    out.sort(key=lambda a: a.student_id)
    return out


def order_combinations(seed, n_dimensions=1, cell=None):
    """Uniformly random order of the combination labels."""
    labels = list(combination_catalog(n_dimensions))
    rng = _cell_rng(seed, _ORDER_STREAM, cell)
    return tuple(labels[k] for k in rng.permutation(len(labels)))


def build_list(cell, assignments, seed, order=None):
    """Lay out one cell's randomization list.

    Blocks follow ``order`` (drawn by :func:`order_combinations` when not
    given); pure blocks are shuffled, mixed blocks alternate their two types
    with a random leading type when the counts tie.
    """
    assignments = list(assignments)
    if not assignments:
        return RandomizationList(cell, ())
    n_dim = len(assignments[0].student_type)
    catalog = combination_catalog(n_dim)
    if order is None:
        order = order_combinations(seed, n_dim, cell)
    order = list(order)
    if sorted(order) != sorted(catalog):
        raise ValueError(f"order must be a permutation of {sorted(catalog)}")
    rng = _cell_rng(seed, _LIST_STREAM, cell)

    rows = []
    for label in order:
        members = [a for a in assignments if a.combination == label]
        if not members:
            continue
        a, b = catalog[label]
        if a == b:
            seq = [members[k] for k in rng.permutation(len(members))]
        else:
            first = [members[k] for k in rng.permutation(len(members)) if members[k].student_type == a]
            second = [members[k] for k in rng.permutation(len(members)) if members[k].student_type == b]
            if abs(len(first) - len(second)) > 1:
                raise AlternationError(
                    f"cell {cell}: mixed combination {label} has {len(first)} x {a} and "
                    f"{len(second)} x {b}; alternation needs counts within one")
            lead_first = len(first) > len(second) or (len(first) == len(second) and rng.random() < 0.5)
            lead, trail = (first, second) if lead_first else (second, first)
            seq = []
            for k in range(len(lead)):
                seq.append(lead[k])
                if k < len(trail):
                    seq.append(trail[k])
        rows.extend(seq)
    return RandomizationList(cell, tuple(
        ListRow(pos + 1, a.student_id, a.combination, a.student_type, a.peer_type)
        for pos, a in enumerate(rows)))


def _is_mixed_label(label):
    if label in ("A", "C"):
        return False
    if label == "B":
        return True
    a, _, b = label.partition("+")
    return a != b


def verify_alternation(rlist):
    """True when positions run 1..n, every combination occupies one
    contiguous block, and each mixed block strictly alternates types."""
    rows = rlist.rows
    if [r.position for r in rows] != list(range(1, len(rows) + 1)):
        return False
    blocks = []
    for r in rows:
        if blocks and blocks[-1][0] == r.combination:
            blocks[-1][1].append(r)
        else:
            blocks.append((r.combination, [r]))
    labels = [b[0] for b in blocks]
    if len(labels) != len(set(labels)):
        return False
    for label, members in blocks:
        if not _is_mixed_label(label):
            if len({m.student_type for m in members}) > 1:
                return False
            continue
        for prev, nxt in zip(members, members[1:]):
            if prev.student_type == nxt.student_type:
                return False
            # adjacency must deliver the assigned peer type
            if nxt.student_type != prev.peer_type or prev.student_type != nxt.peer_type:
                return False
    return True


def dorm_size_sequence(n_students, pattern, rng=None):
    """Dorm sizes covering ``n_students`` by cycling ``pattern``.

    The cycle starts at a random offset when ``rng`` is given; the last dorm
    takes whatever remains.
    """
    pattern = [int(p) for p in pattern]
    if not pattern or min(pattern) < 1:
        raise DormSizeError(f"dorm sizes must be positive, got {pattern}")
    offset = int(rng.integers(len(pattern))) if rng is not None else 0
    sizes, total, k = [], 0, offset
    while total < n_students:
        size = min(pattern[k % len(pattern)], n_students - total)
        sizes.append(size)
        total += size
        k += 1
    return sizes


def chunk_into_dorms(rlist, dorm_sizes, first_dorm_id=1):
    """Cut a list into consecutive dorms of the given sizes."""
    sizes = [int(s) for s in dorm_sizes]
    if any(s < 1 for s in sizes):
        raise DormSizeError(f"dorm sizes must be positive, got {sizes}")
    if sum(sizes) != len(rlist):
        raise DormSizeError(f"dorm sizes sum to {sum(sizes)} but the list has {len(rlist)} students")
    dorms, pos = [], 0
    for k, size in enumerate(sizes):
        segment = rlist.rows[pos:pos + size]
        dorms.append(DormAssignment(first_dorm_id + k, rlist.cell,
                                    tuple((row.student_id, b + 1) for b, row in enumerate(segment))))
        pos += size
    return dorms


def neighbor_mask(same_dorm, dorm_size, bed_i, bed_j):
    """Vectorised neighbour rule.

    Small dorms (fewer than five beds) make all roommates neighbours. Larger
    dorms pair beds into bunks ``(2k-1, 2k)`` laid out in a line; neighbours
    share a bunk or occupy adjacent bunks.
    """
    bunk_i = (np.asarray(bed_i) - 1) // 2
    bunk_j = (np.asarray(bed_j) - 1) // 2
    small = np.asarray(dorm_size) < BUNK_THRESHOLD
    return np.asarray(same_dorm) & (small | (np.abs(bunk_i - bunk_j) <= 1))


def physical_neighbors(dorms):
    """Set of neighbouring ``(a, b)`` student pairs with ``a < b``."""
    pairs = set()
    for dorm in dorms:
        beds = dorm.beds
        for (a, ba), (b, bb) in itertools.combinations(beds, 2):
            if neighbor_mask(True, dorm.size, ba, bb):
                pairs.add((min(a, b), max(a, b)))
    return pairs


def compliance(assignments, dorms):
    """Per-student compliance with the assigned combination.

    A student complies when, in every treatment dimension, the share of high
    types among the student and their physical neighbours equals the share
    the combination prescribes (100%, 50% or 0% with one dimension).
    """
    by_id = {a.student_id: a for a in assignments}
    n_dim = len(next(iter(by_id.values())).student_type) if by_id else 1
    catalog = combination_catalog(n_dim)
    neigh = {sid: {sid} for sid in by_id}
    for a, b in physical_neighbors(dorms):
        if a in neigh and b in neigh:
            neigh[a].add(b)
            neigh[b].add(a)
    out = {}
    for sid, group in neigh.items():
        pair = catalog[by_id[sid].combination]
        ok = True
        for dim in range(n_dim):
            share = np.mean([by_id[g].student_type[dim] == "H" for g in group])
            ok &= bool(np.isclose(share, target_high_share(pair, dim)))
        out[sid] = ok
    return out


def proximity_indicators(lists, dorms, d_max=9, pairs=None):
    """List distance, neighbourhood dummies ``l_1..l_{d_max}`` and the
    physical-neighbour flag per dyad.

    ``pairs`` (two id arrays) defaults to every within-list pair; pairs
    whose members sit on different lists get ``list_distance = 0`` (meaning
    "not on the same list") and all-false indicators.
    """
    lists = list(lists.values()) if isinstance(lists, Mapping) else list(lists)
    if isinstance(dorms, Mapping):
        dorms = [d for ds in dorms.values() for d in ds]
    loc = _location_table(lists, dorms)
    if pairs is None:
        ii, jj = [], []
        for rl in lists:
            ids = np.array(sorted(rl.student_ids), dtype=np.int64)
            a, b = np.triu_indices(len(ids), 1)
            ii.append(ids[a])
            jj.append(ids[b])
        i = np.concatenate(ii) if ii else np.empty(0, np.int64)
        j = np.concatenate(jj) if jj else np.empty(0, np.int64)
    else:
        i, j = (np.asarray(p, dtype=np.int64) for p in pairs)
    return _indicator_frame(loc, i, j, d_max)


def _location_table(lists, dorms):
    ids = [row.student_id for rl in lists for row in rl.rows]
    size = (max(ids) + 1) if ids else 0
    for d in dorms:
        if d.beds:
            size = max(size, max(d.student_ids) + 1)
    loc = {
        "list": np.full(size, -1, np.int64),
        "position": np.zeros(size, np.int64),
        "dorm": np.full(size, -1, np.int64),
        "bed": np.zeros(size, np.int64),
        "dorm_size": np.zeros(size, np.int64),
    }
    for k, rl in enumerate(lists):
        for row in rl.rows:
            loc["list"][row.student_id] = k
            loc["position"][row.student_id] = row.position
    for k, d in enumerate(dorms):
        for sid, bed in d.beds:
            loc["dorm"][sid] = k
            loc["bed"][sid] = bed
            loc["dorm_size"][sid] = d.size
    return loc


def _lookup(arr, idx, fill):
    out = np.full(idx.shape, fill, dtype=arr.dtype)
    ok = idx < arr.shape[0]
    out[ok] = arr[idx[ok]]
    return out


def _indicator_frame(loc, i, j, d_max):
    li, lj = _lookup(loc["list"], i, -1), _lookup(loc["list"], j, -1)
    same = (li >= 0) & (li == lj)
    dist = np.where(same, np.abs(_lookup(loc["position"], i, 0) - _lookup(loc["position"], j, 0)), 0)
    di, dj = _lookup(loc["dorm"], i, -1), _lookup(loc["dorm"], j, -1)
    same_dorm = (di >= 0) & (di == dj)
    neighbor = neighbor_mask(same_dorm, _lookup(loc["dorm_size"], i, 0),
                             _lookup(loc["bed"], i, 0), _lookup(loc["bed"], j, 0))
    frame = {"i": i, "j": j, "list_distance": dist}
    for d in range(1, d_max + 1):
        frame[f"l_{d}"] = same & (dist <= d)
    frame["physical_neighbor"] = neighbor
    return pd.DataFrame(frame)


@dataclass
class Allocation:
    """Lists, dorms and assignments for a whole population."""

    lists: Dict[Tuple, RandomizationList]
    dorms: Dict[Tuple, List[DormAssignment]]
    assignments: Dict[int, TreatmentAssignment]

    def location(self):
        return _location_table(list(self.lists.values()), [d for ds in self.dorms.values() for d in ds])

    def indicators(self, i, j, d_max=9):
        return _indicator_frame(self.location(), np.asarray(i, np.int64), np.asarray(j, np.int64), d_max)

    def table(self):
        """Rows ``(cell, position, student_id, combination, dorm_id, bed)``."""
        dorm_of = {}
        for ds in self.dorms.values():
            for d in ds:
                for sid, bed in d.beds:
                    dorm_of[sid] = (d.dorm_id, bed)
        recs = []
        for cell, rl in self.lists.items():
            for row in rl.rows:
                dorm_id, bed = dorm_of.get(row.student_id, (None, None))
                recs.append({"cell": format_cell(cell), "position": row.position,
                             "student_id": row.student_id, "combination": row.combination,
                             "student_type": row.student_type, "peer_type": row.peer_type,
                             "dorm_id": dorm_id, "bed": bed})
        cols = ["cell", "position", "student_id", "combination", "student_type", "peer_type", "dorm_id", "bed"]
        return pd.DataFrame(recs, columns=cols)


def format_cell(cell):
    if isinstance(cell, (tuple, list)):
        return "-".join(str(c) for c in cell)
    return str(cell)


def allocate(cells, seed, dorm_pattern=(2, 4, 6, 8, 3), orders=None):
    """Randomize every cell of a roster.

    ``cells`` maps a cell key to ``(student_id, type_label)`` pairs. Dorm ids
    are unique within a cell; each cell gets an independent seeded stream.
    """
    lists, dorms, assignments = {}, {}, {}
    for cell, students in cells.items():
        assigned = assign_treatments(students, seed, cell)
        assignments.update({a.student_id: a for a in assigned})
        order = None if orders is None else orders.get(cell)
        rl = build_list(cell, assigned, seed, order=order)
        lists[cell] = rl
        sizes = dorm_size_sequence(len(rl), dorm_pattern, _cell_rng(seed, _DORM_STREAM, cell))
        dorms[cell] = chunk_into_dorms(rl, sizes)
    return Allocation(lists, dorms, assignments)


def worked_example(seed=0, order=("A", "C", "B")):
    """The 12-student illustration: six H and six L students."""
    students = [(k, "H") for k in range(6)] + [(k, "L") for k in range(6, 12)]
    assigned = assign_treatments(students, seed, cell="example")
    return assigned, build_list("example", assigned, seed, order=order)
