"""Binning of individual competing-risks records on a regular (u, s) grid.

u is the age at diagnosis (fixed per subject), s the time since diagnosis.
Each record occupies a single u-row; its event adds one count to the s-bin
containing the exit time, and its exposure is the exact overlap of
[s_entry, s_exit) with each s-bin.  Bins are half-open [lo, hi); an exit
time exactly on a bin edge belongs to the bin below the edge (the event
closes the elapsed interval), while a u exactly on an edge belongs to the
bin above it except at the top boundary.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

CAUSES = (1, 2)

# Absolute slack for edge comparisons on the time axes (units: years).
_EDGE_ATOL = 1e-12


@dataclass(frozen=True)
class IndividualRecord:
    """One subject: entry/exit on the s-scale and the terminating cause.

    ``cause`` is 0 for right-censoring, 1 for the cause of interest, 2 for
    the competing cause.
    """

    id: str
    u: float
    s_entry: float
    s_exit: float
    cause: int

    def validate(self):
        if not (self.u > 0 and math.isfinite(self.u)):
            raise DataError(f"record {self.id!r}: u must be positive and finite, got {self.u}")
        if not (0 <= self.s_entry < self.s_exit):
            raise DataError(
                f"record {self.id!r}: need 0 <= s_entry < s_exit, got ({self.s_entry}, {self.s_exit})"
            )
        if self.cause not in (0, 1, 2):
            raise DataError(f"record {self.id!r}: cause must be 0, 1 or 2, got {self.cause}")


@dataclass(frozen=True)
class LexisGrid:
    """Regular bin mesh: n_u x n_s bins with uniform spacing per axis."""

    u_edges: np.ndarray
    s_edges: np.ndarray

    def __post_init__(self):
        for name, edges in (("u", self.u_edges), ("s", self.s_edges)):
            if len(edges) < 2 or np.any(np.diff(edges) <= 0):
                raise ValueError(f"{name}_edges must be strictly increasing with >= 2 entries")
            widths = np.diff(edges)
            if np.max(np.abs(widths - widths[0])) > 1e-9 * max(widths[0], 1.0):
                raise ValueError(f"{name}_edges must be uniformly spaced")

    @property
    def n_u(self) -> int:
        return len(self.u_edges) - 1

    @property
    def n_s(self) -> int:
        return len(self.s_edges) - 1

    @property
    def h_u(self) -> float:
        return float(self.u_edges[1] - self.u_edges[0])

    @property
    def h_s(self) -> float:
        return float(self.s_edges[1] - self.s_edges[0])

    @property
    def u_mid(self) -> np.ndarray:
        return 0.5 * (self.u_edges[:-1] + self.u_edges[1:])

    @property
    def s_mid(self) -> np.ndarray:
        return 0.5 * (self.s_edges[:-1] + self.s_edges[1:])


@dataclass
class BinnedData:
    """Per-cause event-count matrices and the shared exposure matrix."""

    grid: LexisGrid
    Y: dict = field(default_factory=dict)  # cause -> n_u x n_s counts (real-valued)
    R: np.ndarray = None  # n_u x n_s person-years

    def __post_init__(self):
        shape = (self.grid.n_u, self.grid.n_s)
        if self.R is None:
            self.R = np.zeros(shape)
        if not self.Y:
            self.Y = {ell: np.zeros(shape) for ell in CAUSES}
        for ell, mat in self.Y.items():
            if mat.shape != shape:
                raise ValueError(f"Y[{ell}] has shape {mat.shape}, expected {shape}")
            if np.any(mat < 0):
                raise ValueError(f"Y[{ell}] has negative entries")
        if self.R.shape != shape:
            raise ValueError(f"R has shape {self.R.shape}, expected {shape}")
        if np.any(self.R < 0):
            raise ValueError("R has negative entries")


def build_grid(u_lo: float, u_hi: float, h_u: float, s_lo: float, s_hi: float, h_s: float) -> LexisGrid:
    """Build the bin mesh; upper edges are extended to the next bin multiple."""
    edges = []
    for lo, hi, h, name in ((u_lo, u_hi, h_u, "u"), (s_lo, s_hi, h_s, "s")):
        if h <= 0:
            raise ValueError(f"bin width h_{name} must be positive, got {h}")
        if hi <= lo:
            raise ValueError(f"{name} range must be positive, got ({lo}, {hi})")
        n = int(math.ceil((hi - lo) / h - 1e-9))
        edges.append(lo + h * np.arange(n + 1))
    return LexisGrid(u_edges=edges[0], s_edges=edges[1])


def _row_index(u: float, grid: LexisGrid) -> int:
    """u-row containing ``u``; an edge value belongs to the bin above, except the top edge."""
    lo, hi = grid.u_edges[0], grid.u_edges[-1]
    if u < lo - _EDGE_ATOL or u > hi + _EDGE_ATOL:
        return -1
    j = int(math.floor((u - lo) / grid.h_u + _EDGE_ATOL))
    return min(j, grid.n_u - 1)


def _exit_col(s_exit: float, grid: LexisGrid) -> int:
    """s-bin containing the exit time; an edge value belongs to the bin below."""
    lo = grid.s_edges[0]
    k = int(math.ceil((s_exit - lo) / grid.h_s - _EDGE_ATOL)) - 1
    return min(max(k, 0), grid.n_s - 1)


def bin_records(records, grid: LexisGrid) -> BinnedData:
    """Aggregate records into event-count and exposure matrices.

    Raises :class:`DataError` listing every offending record id if any
    record falls outside the grid (no silent clipping).
    """
    n_u, n_s = grid.n_u, grid.n_s
    Y = {ell: np.zeros((n_u, n_s)) for ell in CAUSES}
    R = np.zeros((n_u, n_s))
    s_lo_edge, s_hi_edge = grid.s_edges[0], grid.s_edges[-1]

    bad = []
    for rec in records:
        rec.validate()
        j = _row_index(rec.u, grid)
        if j < 0:
            bad.append((rec.id, f"u={rec.u} outside [{grid.u_edges[0]}, {grid.u_edges[-1]}]"))
            continue
        if rec.s_exit > s_hi_edge + _EDGE_ATOL or rec.s_entry < s_lo_edge - _EDGE_ATOL:
            bad.append((rec.id, f"[s_entry, s_exit]=[{rec.s_entry}, {rec.s_exit}] outside "
                                f"[{s_lo_edge}, {s_hi_edge}]"))
            continue
        if rec.cause in CAUSES:
            Y[rec.cause][j, _exit_col(rec.s_exit, grid)] += 1.0
        # exact overlap of [s_entry, s_exit) with every s-bin of row j
        overlap = np.minimum(rec.s_exit, grid.s_edges[1:]) - np.maximum(rec.s_entry, grid.s_edges[:-1])
        R[j, :] += np.maximum(overlap, 0.0)

    if bad:
        listing = "; ".join(f"{rid}: {why}" for rid, why in bad[:20])
        more = "" if len(bad) <= 20 else f" (+{len(bad) - 20} more)"
        raise DataError(f"{len(bad)} record(s) outside the grid: {listing}{more}",
                        details=[rid for rid, _ in bad])
    return BinnedData(grid=grid, Y=Y, R=R)


def read_records_csv(path) -> list:
    """Read records from a CSV with header ``id,u,s_entry,s_exit,cause``.

    A missing/empty s_entry is treated as 0.  Malformed rows raise
    :class:`DataError` with 1-based row numbers (header = row 1).
    """
    records = []
    problems = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "u", "s_exit", "cause"}
        if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
            raise DataError(
                f"{path}: header must contain id,u,s_entry,s_exit,cause "
                f"(got {reader.fieldnames})"
            )
        for rownum, row in enumerate(reader, start=2):
            try:
                s_entry_raw = (row.get("s_entry") or "").strip()
                rec = IndividualRecord(
                    id=row["id"],
                    u=float(row["u"]),
                    s_entry=float(s_entry_raw) if s_entry_raw else 0.0,
                    s_exit=float(row["s_exit"]),
                    cause=int(row["cause"]),
                )
                rec.validate()
                records.append(rec)
            except (DataError, KeyError, TypeError, ValueError) as exc:
                problems.append(f"row {rownum}: {exc}")
    if problems:
        listing = "; ".join(problems[:20])
        more = "" if len(problems) <= 20 else f" (+{len(problems) - 20} more)"
        raise DataError(f"{path}: {len(problems)} bad row(s): {listing}{more}", details=problems)
    return records


def write_records_csv(path, records):
    """Write records in the same CSV schema that :func:`read_records_csv` ingests."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "u", "s_entry", "s_exit", "cause"])
        for rec in records:
            writer.writerow([rec.id, f"{rec.u:.17g}", f"{rec.s_entry:.17g}",
                             f"{rec.s_exit:.17g}", rec.cause])
