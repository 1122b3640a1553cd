"""
Byzantine-node identification from layout redundancy.

A node's error is the mean LSE of the layouts it anchors. Nodes whose
error clears the threshold become candidates; a candidate is confirmed
only if dropping its layouts tightens the spread of the remaining layouts
(the summed per-node positional standard deviation, ``sd_bar``). Candidates
whose removal does not tighten the spread are treated as collateral from
sharing a basis with the real culprit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import TooFewLayoutsError
from .fusion import FusedEstimate, FusionParams, fuse
from .layouts import AlignedLayoutSet

MAD_SCALE = 1.4826


@dataclass(frozen=True)
class DetectorParams:
    threshold_mode: str = "robust-z"
    threshold_value: float = 3.0
    min_layouts_remaining: int = 3
    error_floor: float = 1e-9  # m^2; errors below this are numerical noise

    def __post_init__(self):
        if self.threshold_mode not in ("absolute", "robust-z"):
            raise ValueError(f"unknown threshold mode {self.threshold_mode!r}")
        if self.threshold_value <= 0:
            raise ValueError("threshold_value must be positive")
        if self.min_layouts_remaining < 1:
            raise ValueError("min_layouts_remaining must be >= 1")
        if self.error_floor < 0:
            raise ValueError("error_floor must be non-negative")


@dataclass(frozen=True)
class AnomalyReport:
    per_node_error: tuple[float, ...]
    candidates: frozenset
    sd_bar_baseline: float
    sd_bar_after_removal: dict = field(hash=False)
    confirmed: frozenset
    pruned_layout_count: int
    timestamp: float = 0.0

    def to_dict(self) -> dict:
        def num(v):
            return None if not math.isfinite(v) else v

        return {
            "timestamp": self.timestamp,
            "per_node_error": [num(v) for v in self.per_node_error],
            "candidates": sorted(self.candidates),
            "confirmed": sorted(self.confirmed),
            "sd_bar_baseline": num(self.sd_bar_baseline),
            "sd_bar_after_removal": {str(k): num(v)
                                     for k, v in sorted(self.sd_bar_after_removal.items())},
            "pruned_layout_count": self.pruned_layout_count,
        }


def per_node_error(aligned: AlignedLayoutSet, fused: FusedEstimate) -> list[float]:
    """Mean LSE (layout vs fused positions) over the layouts each node anchors.

    Nodes that anchor no layout get NaN.
    """
    stack = aligned.stack()
    ref = fused.positions
    sq = np.sum((stack - ref[None]) ** 2, axis=-1)
    errors = np.where(np.isfinite(sq), sq, 0.0).sum(axis=1)
    out = []
    for node in range(aligned.n_nodes):
        mine = [e for e, base in zip(errors, aligned.bases) if node in base]
        out.append(float(np.mean(mine)) if mine else math.nan)
    return out


def _sd_bar(stack: np.ndarray, exclude: Iterable[int] = ()) -> float:
    present = np.isfinite(stack[..., 0])
    count = present.sum(axis=0)
    vals = np.where(present[..., None], stack, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = vals.sum(axis=0) / count[:, None]
        dev = np.where(present[..., None], stack - mean[None], 0.0)
        var = (dev ** 2).sum(axis=0) / count[:, None]  # population variance per axis
    spread = np.sqrt(var.sum(axis=1))
    keep = (count > 0)
    for k in exclude:
        keep[k] = False
    return float(spread[keep].sum())


def dispersion(aligned: AlignedLayoutSet, exclude_nodes: Iterable[int] = ()) -> float:
    """``sd_bar`` over all layouts in the set."""
    if len(aligned) == 0:
        raise TooFewLayoutsError("no layouts")
    return _sd_bar(aligned.stack(), exclude_nodes)


def dispersion_after_removal(aligned: AlignedLayoutSet, suspect: int,
                             min_layouts_remaining: int = 1,
                             exclude_nodes: Iterable[int] = ()) -> float:
    """``sd_bar`` over the layouts whose base pair does not include ``suspect``.

    Each node contributes the norm of its per-axis standard deviation across
    the remaining layouts. The suspect itself and ``exclude_nodes`` are left
    out of the sum, so a node whose own position scatters widely scores low.
    """
    rest = aligned.excluding([suspect])
    if len(rest) < max(1, min_layouts_remaining):
        raise TooFewLayoutsError(
            f"removing node {suspect} leaves {len(rest)} layouts, "
            f"need {min_layouts_remaining}")
    return _sd_bar(rest.stack(), [suspect, *exclude_nodes])


def flag_candidates(errors, params: DetectorParams, skip: Iterable[int] = ()) -> list[int]:
    """Nodes whose error exceeds the threshold (and the numerical floor)."""
    err = np.asarray(errors, dtype=float)
    usable = np.isfinite(err)
    for k in skip:
        usable[k] = False
    if not usable.any():
        return []
    if params.threshold_mode == "absolute":
        limit = params.threshold_value
    else:
        vals = err[usable]
        med = float(np.median(vals))
        mad = float(np.median(np.abs(vals - med)))
        limit = med + params.threshold_value * MAD_SCALE * mad
    return [k for k in range(len(err))
            if usable[k] and err[k] > limit and err[k] > params.error_floor]


def _removal_scores(aligned: AlignedLayoutSet, skip: Iterable[int],
                    min_layouts_remaining: int) -> dict[int, float]:
    skip = list(skip)
    return {k: dispersion_after_removal(aligned, k, min_layouts_remaining, skip)
            for k in range(aligned.n_nodes) if k not in skip}


def removal_dispersions(aligned: AlignedLayoutSet,
                        min_layouts_remaining: int = 1) -> dict[int, float]:
    """``dispersion_after_removal`` for every node, keyed by node index."""
    return _removal_scores(aligned, (), min_layouts_remaining)


def _confirm(candidates, scores: dict[int, float], active: AlignedLayoutSet,
             skip: Iterable[int]) -> int | None:
    """The node whose removal tightens the layouts most, if it is a candidate and
    its removal actually lowers the spread of the other nodes."""
    if not scores:
        return None
    best = min(scores, key=lambda k: (scores[k], k))
    if best in candidates and scores[best] < dispersion(active, [best, *skip]):
        return best
    return None


def detect(aligned: AlignedLayoutSet, fused: FusedEstimate,
           params: DetectorParams | None = None,
           fusion_params: FusionParams | None = None,
           timestamp: float = 0.0) -> AnomalyReport:
    """Flag, then confirm, anomalous nodes.

    A candidate is confirmed only when removing its layouts yields the
    lowest ``sd_bar`` of every single-node removal and lowers it below the
    baseline; candidates that lose to another node are demoted. After a
    confirmation the remaining layouts are re-fused and the test repeats,
    so several anomalies can be confirmed one at a time.
    """
    params = params or DetectorParams()
    minimum = params.min_layouts_remaining
    errors = per_node_error(aligned, fused)
    candidates = flag_candidates(errors, params)
    baseline = dispersion(aligned)
    after = _removal_scores(aligned, (), minimum) if candidates else {}

    all_candidates = set(candidates)
    confirmed: list[int] = []
    active, cands, scores = aligned, candidates, after
    while True:
        best = _confirm(cands, scores, active, confirmed)
        if best is None:
            break
        confirmed.append(best)
        active = active.excluding([best])
        if len(active) < max(2, minimum + 1):
            break
        refused = fuse(active, fusion_params, passive=confirmed)
        cands = flag_candidates(per_node_error(active, refused), params, skip=confirmed)
        all_candidates.update(cands)
        if not cands:
            break
        scores = {k: v for k, v in _removal_scores(active, confirmed, 1).items()
                  if len(active.excluding([k])) >= minimum}

    return AnomalyReport(
        per_node_error=tuple(errors),
        candidates=frozenset(all_candidates),
        sd_bar_baseline=baseline,
        sd_bar_after_removal=after,
        confirmed=frozenset(confirmed),
        pruned_layout_count=len(aligned) - len(aligned.excluding(confirmed)),
        timestamp=timestamp,
    )


def prune(aligned: AlignedLayoutSet, confirmed: Iterable[int],
          min_layouts_remaining: int = 1) -> AlignedLayoutSet:
    """Drop every layout anchored by a confirmed node."""
    confirmed = list(confirmed)
    if not confirmed:
        return aligned
    rest = aligned.excluding(confirmed)
    if len(rest) < min_layouts_remaining:
        raise TooFewLayoutsError(
            f"pruning {sorted(confirmed)} leaves {len(rest)} layouts, "
            f"need {min_layouts_remaining}")
    return rest
