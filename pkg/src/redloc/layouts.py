"""
Range tables, per-basis layouts, and transfer into the common frame.

A layout places every node using one anchor pair as the coordinate basis:
the first base node sits at the origin and the second on the +x axis.
With N nodes there are N(N-1)/2 such layouts per timestamp, which is the
redundancy the fusion and anomaly stages exploit.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateBasisError,
    DegenerateInputError,
    DegenerateReferenceError,
    TooFewNodesError,
)
from .geometry import EPSILON_BASIS, _mirror_sign, canonical_transform, trilaterate

logger = logging.getLogger(__name__)

RANGES_HEADER = ("timestamp_s", "node_i", "node_j", "range_m")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RangeTable:
    """Pairwise range measurements between ``n`` nodes at one timestamp.

    ``d`` is symmetric with a zero diagonal; ``valid`` marks which pairs were
    actually measured. Entries of invalid pairs are ignored.
    """

    d: np.ndarray
    timestamp: float = 0.0
    valid: np.ndarray | None = None

    def __post_init__(self):
        d = np.array(self.d, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError(f"range matrix must be square, got shape {d.shape}")
        n = d.shape[0]
        if self.valid is None:
            valid = np.ones((n, n), dtype=bool)
        else:
            valid = np.array(self.valid, dtype=bool)
            if valid.shape != d.shape:
                raise ValueError("validity mask shape does not match range matrix")
        np.fill_diagonal(valid, False)
        if not np.array_equal(valid, valid.T):
            raise ValueError("validity mask must be symmetric")
        d = np.where(valid, d, 0.0)
        if not np.all(np.isfinite(d)):
            raise ValueError("valid ranges must be finite")
        if np.any(d < 0):
            raise ValueError("ranges must be non-negative")
        if not np.array_equal(d, d.T):
            raise ValueError("range matrix must be symmetric")
        object.__setattr__(self, "d", _frozen(d))
        object.__setattr__(self, "valid", _frozen(valid))
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @property
    def n(self) -> int:
        return self.d.shape[0]

    @classmethod
    def from_points(cls, points, timestamp: float = 0.0) -> "RangeTable":
        """Exact ranges between the given ground-truth positions."""
        p = np.asarray(points, dtype=float)
        diff = p[:, None, :] - p[None, :, :]
        return cls(np.sqrt(np.sum(diff * diff, axis=-1)), timestamp)

    def without_nodes(self, nodes: Iterable[int]) -> "RangeTable":
        """Copy with every range touching ``nodes`` marked invalid."""
        valid = self.valid.copy()
        for k in nodes:
            valid[k, :] = False
            valid[:, k] = False
        return RangeTable(self.d, self.timestamp, valid)


@dataclass(frozen=True)
class Layout:
    """Positions of all nodes computed with ``base`` as the coordinate basis.

    Absent nodes (missing ranges to a base node) have NaN rows. ``flags``
    marks nodes whose placement used clamped or incomplete range data.
    """

    base: tuple[int, int]
    positions: np.ndarray
    flags: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "base", (int(self.base[0]), int(self.base[1])))
        object.__setattr__(self, "positions", _frozen(np.array(self.positions, dtype=float)))
        object.__setattr__(self, "flags", _frozen(np.array(self.flags, dtype=bool)))

    @property
    def present(self) -> np.ndarray:
        return np.all(np.isfinite(self.positions), axis=1)

    def contains(self, node: int) -> bool:
        return node in self.base

    def transformed(self, positions: np.ndarray) -> "Layout":
        return Layout(self.base, positions, self.flags)


@dataclass(frozen=True)
class AlignedLayoutSet:
    layouts: tuple[Layout, ...]
    ref_pair: tuple[int, int] = (0, 1)
    ref_disambiguator: int = 2
    _stack: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ordered = tuple(sorted(self.layouts, key=lambda lay: lay.base))
        object.__setattr__(self, "layouts", ordered)
        object.__setattr__(self, "ref_pair", tuple(self.ref_pair))
        if ordered:
            stack = np.stack([lay.positions for lay in ordered])
        else:
            stack = np.empty((0, 0, 2))
        object.__setattr__(self, "_stack", _frozen(stack))

    def __len__(self) -> int:
        return len(self.layouts)

    @property
    def bases(self) -> list[tuple[int, int]]:
        return [lay.base for lay in self.layouts]

    @property
    def n_nodes(self) -> int:
        return self._stack.shape[1]

    def stack(self) -> np.ndarray:
        """Positions of every layout as a read-only ``(L, n, 2)`` array."""
        return self._stack

    def excluding(self, nodes: Iterable[int]) -> "AlignedLayoutSet":
        """Layouts whose base pair avoids every node in ``nodes``."""
        drop = set(nodes)
        keep = [lay for lay in self.layouts if not drop.intersection(lay.base)]
        return self.replace(keep)

    def replace(self, layouts: Sequence[Layout]) -> "AlignedLayoutSet":
        return AlignedLayoutSet(tuple(layouts), self.ref_pair, self.ref_disambiguator)


def build_layout(ranges: RangeTable, base: tuple[int, int]) -> Layout:
    """Trilaterate every node against one anchor pair.

    Non-base nodes are placed in ascending index order; each takes the
    mirror branch that best fits its ranges to nodes placed before it.
    """
    n, m = base
    if n == m:
        raise DegenerateBasisError("base nodes must differ")
    if not ranges.valid[n, m]:
        raise DegenerateBasisError(f"no range measured between base nodes {n} and {m}")
    d, valid = ranges.d, ranges.valid
    d_nm = float(d[n, m])
    if d_nm <= EPSILON_BASIS:
        raise DegenerateBasisError(f"basis ({n}, {m}) length {d_nm} m is degenerate")

    size = ranges.n
    pos = np.full((size, 2), np.nan)
    flags = np.zeros(size, dtype=bool)
    pos[n] = (0.0, 0.0)
    pos[m] = (d_nm, 0.0)
    placed: list[int] = []
    for i in range(size):
        if i == n or i == m:
            continue
        if not (valid[n, i] and valid[i, m]):
            flags[i] = True
            continue
        x, y_abs, inconsistent = trilaterate(d_nm, float(d[n, i]), float(d[i, m]))
        others = [j for j in placed if valid[i, j]]
        sign = _mirror_sign(x, y_abs, pos[others], d[i, others])
        pos[i] = (x, sign * y_abs)
        flags[i] = inconsistent
        placed.append(i)
    # a node with a missing range to any non-base peer is flagged too
    missing = ~valid
    np.fill_diagonal(missing, False)
    flags |= missing.any(axis=1) & np.all(np.isfinite(pos), axis=1)
    flags[[n, m]] = False
    return Layout((n, m), pos, flags)


def enumerate_layouts(ranges: RangeTable) -> list[Layout]:
    """One layout per measured, non-degenerate anchor pair, ordered by pair."""
    if ranges.n < 3:
        raise TooFewNodesError(f"need at least 3 nodes, got {ranges.n}")
    out = []
    for n, m in combinations(range(ranges.n), 2):
        if not ranges.valid[n, m] or ranges.d[n, m] <= EPSILON_BASIS:
            continue
        out.append(build_layout(ranges, (n, m)))
    return out


def to_common_frame(layouts: Sequence[Layout], ref_pair=(0, 1), disambiguator: int = 2
                    ) -> AlignedLayoutSet:
    """Move each layout so ``ref_pair[0]`` is at the origin, ``ref_pair[1]`` on +x,
    and the disambiguator node on the non-negative y side (reflecting if needed).

    Layouts missing any of the three reference nodes cannot be placed in the
    common frame and are dropped.
    """
    a, b = ref_pair
    c = disambiguator
    if len({a, b, c}) != 3:
        raise ValueError(f"reference nodes must be distinct, got {a}, {b}, {c}")
    out = []
    for lay in layouts:
        pres = lay.present
        if not (pres[a] and pres[b] and pres[c]):
            logger.debug("dropping layout %s: reference node absent", lay.base)
            continue
        try:
            T = canonical_transform(lay.positions, a, b)
        except DegenerateInputError as exc:
            raise DegenerateReferenceError(f"layout {lay.base}: {exc}") from exc
        pos = T.apply(lay.positions)
        if pos[c, 1] < 0:
            pos[:, 1] = -pos[:, 1]
        out.append(lay.transformed(pos))
    return AlignedLayoutSet(tuple(out), (a, b), c)


def normalize_frame(points: np.ndarray, ref_pair=(0, 1), disambiguator: int = 2) -> np.ndarray:
    """Express a single point set in the common frame (reflection allowed)."""
    a, b = ref_pair
    pos = canonical_transform(points, a, b).apply(points)
    if pos[disambiguator, 1] < 0:
        pos[:, 1] = -pos[:, 1]
    return pos


def read_ranges_csv(path) -> list[RangeTable]:
    """Load ``timestamp_s,node_i,node_j,range_m`` rows into one table per timestamp.

    A pair may be listed once or in both directions; duplicate listings are
    averaged. Pairs never listed are marked invalid.
    """
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].strip().startswith("#"):
                continue
            if rec[0].strip() == RANGES_HEADER[0]:
                continue
            t, i, j, r = rec
            rows.append((float(t), int(i), int(j), float(r)))
    if not rows:
        return []
    n = 1 + max(max(i, j) for _, i, j, _ in rows)
    grouped: dict[float, list] = {}
    for t, i, j, r in rows:
        grouped.setdefault(t, []).append((i, j, r))
    tables = []
    for t in sorted(grouped):
        total = np.zeros((n, n))
        count = np.zeros((n, n))
        for i, j, r in grouped[t]:
            if i == j:
                continue
            total[i, j] += r
            total[j, i] += r
            count[i, j] += 1
            count[j, i] += 1
        valid = count > 0
        d = np.divide(total, count, out=np.zeros_like(total), where=valid)
        tables.append(RangeTable(d, t, valid))
    return tables


def write_ranges_csv(tables: Sequence[RangeTable], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RANGES_HEADER)
        for tab in tables:
            for i, j in combinations(range(tab.n), 2):
                if tab.valid[i, j]:
                    writer.writerow((repr(tab.timestamp), i, j, repr(float(tab.d[i, j]))))
