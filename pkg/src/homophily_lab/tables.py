"""CSV readers and writers with column checks.

Required column lists for the tables the CLI reads back; readers raise
:class:`SchemaError` naming the first missing column. SCHEMAS.md documents
every file the CLI writes.
"""
import csv
from pathlib import Path

import pandas as pd


class SchemaError(ValueError):
    pass


class RosterParseError(SchemaError):
    pass


ROSTER_COLUMNS = ("student_id", "cell", "type")

DYAD_COLUMNS_REQUIRED = ("ego", "alter", "network", "y", "baseline_link", "baseline_available", "first",
                         "D_p", "D_a", "D_s", "gender_combo", "type_combo", "physical_neighbor")

NODE_COLUMNS_REQUIRED = ("id", "cell", "poor", "lower_achieving", "less_central", "connections",
                         "connections_poor", "connections_nonpoor", "connections_lower", "connections_higher",
                         "connections_less_central", "connections_more_central", "connections_baseline",
                         "homophily_cluster")

COEFFICIENT_COLUMNS = ("term", "estimate", "cluster_se", "n", "n_clusters")


def require_columns(frame, columns, what):
    for c in columns:
        if c not in frame.columns:
            raise SchemaError(f"{what}: missing column '{c}'")


def read_roster(path):
    """Parse a roster CSV into ``{cell: [(student_id, type), ...]}``.

    Types are ``H``/``L`` strings of one or two letters (achievement, then
    centrality) and must have the same length within a cell. Errors carry
    the 1-based line number.
    """
    cells = {}
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise RosterParseError(f"{path}: line 1: empty file, expected header "
                                   f"{','.join(ROSTER_COLUMNS)}") from None
        header = [h.strip() for h in header]
        for c in ROSTER_COLUMNS:
            if c not in header:
                raise RosterParseError(f"{path}: line 1: missing column '{c}'")
        idx = {c: header.index(c) for c in ROSTER_COLUMNS}
        for line, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise RosterParseError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
            raw_id, cell, typ = (row[idx[c]].strip() for c in ROSTER_COLUMNS)
            try:
                sid = int(raw_id)
            except ValueError:
                raise RosterParseError(f"{path}: line {line}: student_id {raw_id!r} is not an integer") from None
            if sid < 0:
                raise RosterParseError(f"{path}: line {line}: student_id must be non-negative")
            if sid in seen:
                raise RosterParseError(f"{path}: line {line}: duplicate student_id {sid}")
            typ = typ.upper()
            if not typ or len(typ) > 2 or set(typ) - {"H", "L"}:
                raise RosterParseError(f"{path}: line {line}: type {typ!r} must be H/L, HH/HL/LH/LL")
            if not cell:
                raise RosterParseError(f"{path}: line {line}: empty cell")
            members = cells.setdefault(cell, [])
            if members and len(members[0][1]) != len(typ):
                raise RosterParseError(f"{path}: line {line}: type {typ!r} mixes design dimensions in cell {cell!r}")
            seen.add(sid)
            members.append((sid, typ))
    return cells


def write_csv(frame, path, columns=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is not None:
        frame = frame.reindex(columns=list(columns))
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
    return path


def read_csv(path, required, what):
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{what}: {path} is empty") from None
    require_columns(frame, required, what)
    return frame


def read_dyads(path):
    frame = read_csv(path, DYAD_COLUMNS_REQUIRED, "dyad table")
    if not any(c.startswith("l_") and c[2:].isdigit() for c in frame.columns):
        raise SchemaError("dyad table: missing column 'l_1' (no neighbourhood indicators)")
    for c in ("gender_combo", "type_combo"):
        frame[c] = frame[c].astype(str)
    return frame


def read_nodes(path):
    frame = read_csv(path, NODE_COLUMNS_REQUIRED, "node table")
    frame["cell"] = frame["cell"].astype(str)
    frame["homophily_cluster"] = frame["homophily_cluster"].astype(str)
    return frame


def neighbourhood_sizes(dyads):
    return sorted(int(c[2:]) for c in dyads.columns if c.startswith("l_") and c[2:].isdigit())


def average_replications(frame, keys, value_cols):
    """Mean of ``value_cols`` over replications for each ``keys`` row."""
    if "replication" not in frame.columns or frame["replication"].nunique() <= 1:
        return frame.drop(columns=["replication"], errors="ignore").reset_index(drop=True)
    first = frame[frame["replication"] == frame["replication"].min()].drop(columns=["replication"])
    means = frame.groupby(list(keys), sort=False)[list(value_cols)].mean()
    first = first.set_index(list(keys))
    first[list(value_cols)] = means.loc[first.index, list(value_cols)].to_numpy()
    return first.reset_index()
