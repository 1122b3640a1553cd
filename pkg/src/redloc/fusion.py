"""
Cooperative fusion of basis layouts.

Every layout is rigidly shifted onto the per-node mean of all layouts, the
mean is recomputed, and the loop repeats until it settles. Layouts are then
ranked by their least-squares error against the mean and the best fraction
is averaged into the final estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import TooFewLayoutsError
from .geometry import RigidTransform2, best_rigid_align_batch, canonical_transform
from .layouts import AlignedLayoutSet


@dataclass(frozen=True)
class FusionParams:
    q: float = 0.5
    tol_fuse: float = 1e-6
    max_iter: int = 10
    tie_tol: float = 1e-12  # m^2; LSE values this close to the cut-off count as tied

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValueError(f"q must be in (0, 1], got {self.q}")
        if self.tol_fuse <= 0:
            raise ValueError("tol_fuse must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tie_tol < 0:
            raise ValueError("tie_tol must be non-negative")


@dataclass(frozen=True)
class FusedEstimate:
    """Fused node positions plus the per-layout scores they were selected by.

    ``aligned`` holds the layouts after the shift-to-mean step; statistics
    downstream (per-node error, dispersion) are computed on it.
    """

    positions: np.ndarray
    layout_lse: tuple[tuple[tuple[int, int], float], ...]
    retained: frozenset
    iterations_used: int
    aligned: AlignedLayoutSet

    @property
    def missing(self) -> np.ndarray:
        return ~np.all(np.isfinite(self.positions), axis=1)

    def to_dict(self) -> dict:
        return {
            "positions": [None if not np.all(np.isfinite(p)) else [float(p[0]), float(p[1])]
                          for p in self.positions],
            "layout_lse": [{"base": list(b), "lse": e} for b, e in self.layout_lse],
            "retained": sorted(list(b) for b in self.retained),
            "iterations_used": self.iterations_used,
        }


def _nanmean(stack: np.ndarray) -> np.ndarray:
    present = np.isfinite(stack[..., 0])
    count = present.sum(axis=0)
    total = np.where(present[..., None], stack, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = total / count[:, None]
    mean[count == 0] = np.nan
    return mean


def _renormalize(stack: np.ndarray, mean: np.ndarray, ref_pair) -> tuple[np.ndarray, np.ndarray]:
    """Apply the rigid motion that puts the mean back into the common frame to everything."""
    a, b = ref_pair
    if not (np.all(np.isfinite(mean[a])) and np.all(np.isfinite(mean[b]))):
        return stack, mean
    G: RigidTransform2 = canonical_transform(mean, a, b)
    return G.apply(stack), G.apply(mean)


def _layout_errors(stack: np.ndarray, reference: np.ndarray, rows=None) -> np.ndarray:
    sq = np.sum((stack - reference[None]) ** 2, axis=-1)
    ok = np.isfinite(sq) if rows is None else np.isfinite(sq) & rows[None]
    return np.where(ok, sq, 0.0).sum(axis=1)


def select_retained(bases, errors: np.ndarray, q: float, tie_tol: float = 0.0) -> list[int]:
    """Indices of the ``ceil(q * L)`` lowest-error layouts plus anything tied with the last one.

    Ordering ties are broken by base pair so the result does not depend on
    input order.
    """
    order = sorted(range(len(errors)), key=lambda i: (errors[i], bases[i]))
    k = max(1, math.ceil(q * len(errors) - 1e-12))
    cutoff = errors[order[k - 1]]
    return sorted(i for i in order if errors[i] <= cutoff + tie_tol)


def fuse(aligned: AlignedLayoutSet, params: FusionParams | None = None,
         passive: Iterable[int] = ()) -> FusedEstimate:
    """Align layouts to their mean, score them, and average the best ones.

    ``passive`` nodes are positioned (averaged like any other node) but take
    no part in the alignment or the LSE ranking; used after pruning, when a
    confirmed node's ranges are known to be corrupt.
    """
    params = params or FusionParams()
    if len(aligned) < 2:
        raise TooFewLayoutsError(f"need at least 2 layouts to fuse, got {len(aligned)}")
    rows = None
    passive = list(passive)
    if passive:
        rows = np.ones(aligned.n_nodes, dtype=bool)
        rows[passive] = False
    stack = np.array(aligned.stack())
    mean = _nanmean(stack)
    iterations = 0
    for iterations in range(1, params.max_iter + 1):
        stack = best_rigid_align_batch(stack, mean, rows)
        new_mean = _nanmean(stack)
        stack, new_mean = _renormalize(stack, new_mean, aligned.ref_pair)
        shift = np.nanmax(np.linalg.norm(new_mean - mean, axis=1))
        mean = new_mean
        if not shift >= params.tol_fuse:
            break

    errors = _layout_errors(stack, mean, rows)
    bases = aligned.bases
    keep = select_retained(bases, errors, params.q, params.tie_tol)
    positions = _nanmean(stack[keep])
    stack, positions = _renormalize(stack, positions, aligned.ref_pair)
    shifted = aligned.replace([lay.transformed(p) for lay, p in zip(aligned.layouts, stack)])
    return FusedEstimate(
        positions=positions,
        layout_lse=tuple((b, float(e)) for b, e in zip(bases, errors)),
        retained=frozenset(bases[i] for i in keep),
        iterations_used=iterations,
        aligned=shifted,
    )
