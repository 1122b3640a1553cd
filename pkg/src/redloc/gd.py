"""
Gradient-descent positioning baseline.

Minimizes the total squared range residual

    loss(P) = sum over measured pairs i<j of (d_ij - |p_i - p_j|)^2

starting from a multilateration estimate. Several starting points are
descended together as a batch; each batch member keeps its own step size,
loss trace and stopping state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoincidentPointsError, DivergenceError
from .layouts import AlignedLayoutSet, Layout, RangeTable, normalize_frame

COINCIDENT_RADIUS = 1e-9  # m
_NUDGE = 1e-6  # m
_MAX_BACKTRACKS = 20


@dataclass(frozen=True)
class GdParams:
    step: float = 0.05
    max_iter: int = 500
    tol_loss: float = 1e-9
    line_search: bool = True

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol_loss <= 0:
            raise ValueError("tol_loss must be positive")


@dataclass(frozen=True)
class GdResult:
    positions: np.ndarray
    loss_trace: tuple[float, ...]
    converged: bool

    def to_dict(self) -> dict:
        return {
            "positions": [[float(x), float(y)] if np.isfinite(x) and np.isfinite(y) else None
                          for x, y in self.positions],
            "loss_trace": [float(v) for v in self.loss_trace],
            "converged": self.converged,
        }


def _pair_mask(ranges: RangeTable, positions: np.ndarray) -> np.ndarray:
    finite = np.all(np.isfinite(positions), axis=-1)
    if finite.ndim == 2:
        finite = finite.all(axis=0)
    return ranges.valid & finite[:, None] & finite[None, :]


def _batch_loss(P: np.ndarray, D: np.ndarray, W: np.ndarray) -> np.ndarray:
    diff = P[:, :, None, :] - P[:, None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    r = np.where(W, D - dist, 0.0)
    # symmetric mask counts each pair twice
    return 0.5 * np.sum(r * r, axis=(1, 2))


def _batch_gradient(P: np.ndarray, D: np.ndarray, W: np.ndarray) -> np.ndarray:
    diff = P[:, :, None, :] - P[:, None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    if np.any(W & (dist < COINCIDENT_RADIUS)):
        raise CoincidentPointsError("two measured nodes coincide; gradient undefined")
    with np.errstate(invalid="ignore", divide="ignore"):
        coef = np.where(W, -2.0 * (D - dist) / dist, 0.0)
    return np.sum(coef[..., None] * diff, axis=2)


def gd_loss(positions, ranges: RangeTable) -> float:
    """Sum of squared range residuals over measured pairs, each counted once."""
    P = np.asarray(positions, dtype=float)
    W = _pair_mask(ranges, P)
    return float(_batch_loss(P[None], ranges.d, W)[0])


def gd_gradient(positions, ranges: RangeTable) -> np.ndarray:
    """Analytic gradient of ``gd_loss``, shape ``(n, 2)``."""
    P = np.asarray(positions, dtype=float)
    W = _pair_mask(ranges, P)
    return _batch_gradient(P[None], ranges.d, W)[0]


def _separate_coincident(P: np.ndarray, W: np.ndarray) -> np.ndarray:
    P = P.copy()
    n = P.shape[1]
    for b in range(P.shape[0]):
        for i in range(n):
            for j in range(i + 1, n):
                if W[i, j] and np.hypot(*(P[b, i] - P[b, j])) < COINCIDENT_RADIUS:
                    P[b, j, 0] += _NUDGE
    return P


def _descend(P0: np.ndarray, ranges: RangeTable, params: GdParams):
    """Run gradient descent on a batch ``(B, n, 2)`` of starting configurations."""
    W = _pair_mask(ranges, P0)
    D = ranges.d
    absent = ~np.isfinite(P0)
    P = _separate_coincident(np.where(absent, 0.0, P0), W)
    B = P.shape[0]
    loss = _batch_loss(P, D, W)
    traces = [[float(v)] for v in loss]
    converged = np.zeros(B, dtype=bool)
    active = np.ones(B, dtype=bool)

    for _ in range(params.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Pa, La = P[idx], loss[idx]
        g = _batch_gradient(Pa, D, W)
        if params.line_search:
            step = np.full(idx.size, params.step)
            accepted = np.zeros(idx.size, dtype=bool)
            newP, newL = Pa.copy(), La.copy()
            for _ in range(_MAX_BACKTRACKS + 1):
                todo = np.flatnonzero(~accepted)
                cand = Pa[todo] - step[todo, None, None] * g[todo]
                lc = _batch_loss(cand, D, W)
                ok = lc <= La[todo]
                hit = todo[ok]
                newP[hit], newL[hit] = cand[ok], lc[ok]
                accepted[hit] = True
                step[todo[~ok]] *= 0.5
                if accepted.all():
                    break
            stalled = idx[~accepted]
            converged[stalled] = True
            active[stalled] = False
            idx, newP, newL, La = idx[accepted], newP[accepted], newL[accepted], La[accepted]
        else:
            newP = Pa - params.step * g
            newL = _batch_loss(newP, D, W)
            if not np.all(np.isfinite(newL)):
                raise DivergenceError("loss became non-finite; enable line search or lower the step")
        improvement = La - newL
        P[idx], loss[idx] = newP, newL
        for b, v in zip(idx, newL):
            traces[b].append(float(v))
        done = idx[np.abs(improvement) < params.tol_loss]
        converged[done] = True
        active[done] = False
    P[absent] = np.nan
    return P, traces, converged


def _reanchor(P: np.ndarray, ref_pair, disambiguator) -> np.ndarray:
    a, b = ref_pair
    if not np.all(np.isfinite(P[[a, b, disambiguator]])):
        return P
    return normalize_frame(P, ref_pair, disambiguator)


def gd_optimize(init, ranges: RangeTable, params: GdParams | None = None,
                ref_pair=(0, 1), disambiguator: int = 2) -> GdResult:
    """Descend from ``init`` and return the result expressed in the common frame.

    Nodes with a NaN starting position take no part in the loss and stay NaN.
    """
    params = params or GdParams()
    P0 = np.asarray(init, dtype=float)
    P, traces, converged = _descend(P0[None], ranges, params)
    return GdResult(_reanchor(P[0], ref_pair, disambiguator), tuple(traces[0]),
                    bool(converged[0]))


def gd_configurations(aligned: AlignedLayoutSet, ranges: RangeTable,
                      params: GdParams | None = None) -> AlignedLayoutSet:
    """Descend once from every layout and return the converged configurations.

    Nodes absent from a layout start from their mean position over the set.
    """
    params = params or GdParams()
    stack = np.array(aligned.stack())
    if len(stack) == 0:
        return aligned
    with np.errstate(invalid="ignore"):
        fill = np.nanmean(stack, axis=0)
    missing = ~np.isfinite(stack)
    stack[missing] = np.broadcast_to(fill, stack.shape)[missing]
    P, _, _ = _descend(stack, ranges, params)
    ref, c = aligned.ref_pair, aligned.ref_disambiguator
    out = [Layout(lay.base, _reanchor(p, ref, c), lay.flags)
           for lay, p in zip(aligned.layouts, P)]
    return aligned.replace(out)


def configuration_spread(aligned: AlignedLayoutSet) -> list[float]:
    """Per-node norm of the per-axis (population) standard deviation across layouts."""
    stack = aligned.stack()
    with np.errstate(invalid="ignore"):
        sd = np.nanstd(stack, axis=0)
    return [float(v) for v in np.sqrt(np.sum(sd * sd, axis=1))]


def gd_configuration_dispersion(aligned: AlignedLayoutSet, ranges: RangeTable,
                                params: GdParams | None = None) -> list[float]:
    """Per-node positional spread after descending from every layout separately."""
    return configuration_spread(gd_configurations(aligned, ranges, params))
