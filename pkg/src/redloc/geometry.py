"""
Planar primitives: ToF ranging, two-anchor trilateration, mirror
resolution, closed-form rigid alignment and least-squares scoring.

Point collections are handled as ``(n, 2)`` float arrays throughout; a row
of NaN marks a node that is absent from a layout. ``Point2`` and
``RigidTransform2`` are thin value types for the public surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (
    DegenerateBasisError,
    DegenerateInputError,
    InvalidTimingError,
    LengthMismatchError,
)

SPEED_OF_LIGHT = 299_792_458.0  # m/s
EPSILON_BASIS = 1e-6  # m


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Point2 coordinates must be finite, got ({self.x}, {self.y})")

    def __iter__(self):
        yield self.x
        yield self.y

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class TimingPair:
    """Round-trip time at the initiator and processing delay at the responder, in seconds."""

    t_init: float
    t_res: float

    def __post_init__(self):
        if self.t_res < 0:
            raise InvalidTimingError(f"t_res must be >= 0, got {self.t_res}")
        if self.t_init < self.t_res:
            raise InvalidTimingError(
                f"t_init ({self.t_init}) shorter than t_res ({self.t_res})"
            )


def _wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class RigidTransform2:
    """Rotation by ``theta`` followed by translation ``(tx, ty)``."""

    tx: float = 0.0
    ty: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", _wrap_angle(float(self.theta)))

    @property
    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform2") -> "RigidTransform2":
        """Return the transform equivalent to applying ``other`` first, then ``self``."""
        t = self.rotation @ other.translation + self.translation
        return RigidTransform2(t[0], t[1], self.theta + other.theta)

    def inverse(self) -> "RigidTransform2":
        t = -(self.rotation.T @ self.translation)
        return RigidTransform2(t[0], t[1], -self.theta)


class Trilateration(NamedTuple):
    x: float
    y_abs: float
    inconsistent: bool


def tof_distance(t: TimingPair, c: float = SPEED_OF_LIGHT) -> float:
    """Distance covered by a two-way ranging exchange: ``c * (t_init - t_res) / 2``."""
    if c <= 0:
        raise ValueError(f"propagation speed must be positive, got {c}")
    if t.t_init < t.t_res:
        raise InvalidTimingError(f"t_init ({t.t_init}) shorter than t_res ({t.t_res})")
    return c * (t.t_init - t.t_res) / 2.0


def trilaterate(d_nm: float, d_ni: float, d_im: float) -> Trilateration:
    """Place node i relative to the basis n=(0, 0), m=(d_nm, 0).

    Returns the x coordinate and the magnitude of y. When the three ranges
    cannot form a triangle the radicand is negative; y is then clamped to 0
    and ``inconsistent`` is set.
    """
    if d_nm <= EPSILON_BASIS:
        raise DegenerateBasisError(f"basis length {d_nm} m is below {EPSILON_BASIS} m")
    if d_ni < 0 or d_im < 0:
        raise ValueError("ranges must be non-negative")
    x = (d_nm * d_nm + d_ni * d_ni - d_im * d_im) / (2.0 * d_nm)
    radicand = d_ni * d_ni - x * x
    if radicand < 0:
        return Trilateration(x, 0.0, True)
    return Trilateration(x, math.sqrt(radicand), False)


def resolve_mirror(candidate, placed: Sequence[tuple]) -> Point2:
    """Pick the sign of y that best agrees with ranges to already-placed points.

    ``placed`` holds ``(point, measured_range)`` pairs. With nothing placed
    the positive branch is returned; ties also go to the positive branch.
    """
    x, y_abs = float(candidate[0]), float(candidate[1])
    if not placed:
        return Point2(x, y_abs)
    pts = np.array([[float(v) for v in p] for p, _ in placed])
    ranges = np.array([float(r) for _, r in placed])
    return Point2(x, _mirror_sign(x, y_abs, pts, ranges) * y_abs)


def _mirror_sign(x: float, y_abs: float, pts: np.ndarray, ranges: np.ndarray) -> float:
    if len(pts) == 0 or y_abs == 0.0:
        return 1.0
    dx = pts[:, 0] - x
    err_pos = np.sum((np.hypot(dx, pts[:, 1] - y_abs) - ranges) ** 2)
    err_neg = np.sum((np.hypot(dx, pts[:, 1] + y_abs) - ranges) ** 2)
    return -1.0 if err_neg < err_pos else 1.0


def _as_points(points) -> np.ndarray:
    if not isinstance(points, np.ndarray):
        points = [tuple(p) for p in points]
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[-1] != 2:
        raise ValueError(f"expected a sequence of 2D points, got shape {arr.shape}")
    return arr


def best_rigid_align(source, target) -> RigidTransform2:
    """Least-squares rotation + translation mapping ``source`` onto ``target``.

    Correspondence is by index. Reflections and scaling are excluded, so the
    result is always a proper rigid motion.
    """
    src = _as_points(source)
    dst = _as_points(target)
    if src.shape != dst.shape:
        raise LengthMismatchError(f"{len(src)} source points vs {len(dst)} target points")
    if len(src) < 2:
        raise DegenerateInputError("need at least two correspondences")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    a = src - cs
    b = dst - cd
    if not np.any(np.abs(a) > 1e-12):
        raise DegenerateInputError("source points are all coincident")
    # 2D Procrustes: the optimal angle maximizes sum(b . R a)
    cross = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    dot = np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    theta = math.atan2(cross, dot)
    c, s = math.cos(theta), math.sin(theta)
    t = cd - np.array([c * cs[0] - s * cs[1], s * cs[0] + c * cs[1]])
    return RigidTransform2(t[0], t[1], theta)


def best_rigid_align_batch(sources: np.ndarray, target: np.ndarray,
                           rows: np.ndarray | None = None) -> np.ndarray:
    """Align every point set in ``sources`` ``(B, n, 2)`` onto ``target`` ``(n, 2)``.

    Same closed form as ``best_rigid_align`` applied per set, using only rows
    finite in both (and selected by the boolean ``rows`` mask, if given);
    sets with fewer than two usable rows are returned as is. Returns the
    transformed sources.
    """
    src = np.asarray(sources, dtype=float)
    dst = np.asarray(target, dtype=float)
    use = np.all(np.isfinite(src), axis=-1) & np.all(np.isfinite(dst), axis=-1)[None]
    if rows is not None:
        use = use & np.asarray(rows, dtype=bool)[None]
    w = use.astype(float)
    count = w.sum(axis=1)
    ok = count >= 2
    denom = np.where(ok, count, 1.0)[:, None]
    s0 = np.where(use[..., None], src, 0.0)
    d0 = np.where(use[..., None], np.broadcast_to(dst, src.shape), 0.0)
    cs = s0.sum(axis=1) / denom
    cd = d0.sum(axis=1) / denom
    a = (s0 - cs[:, None]) * w[..., None]
    b = (d0 - cd[:, None]) * w[..., None]
    cross = np.sum(a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0], axis=1)
    dot = np.sum(a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1], axis=1)
    theta = np.arctan2(cross, dot)
    c, s = np.cos(theta), np.sin(theta)
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (B, 2, 2)
    t = cd - np.einsum("bij,bj->bi", R, cs)
    out = np.einsum("bij,bnj->bni", R, src) + t[:, None, :]
    out[~ok] = src[~ok]
    return out


def lse(a, b) -> float:
    """Sum of squared Euclidean distances between corresponding points.

    Rows that are NaN in either argument (absent nodes) contribute nothing.
    """
    pa = _as_points(a)
    pb = _as_points(b)
    if pa.shape != pb.shape:
        raise LengthMismatchError(f"{len(pa)} points vs {len(pb)} points")
    sq = np.sum((pa - pb) ** 2, axis=1)
    return float(np.sum(sq[np.isfinite(sq)]))


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def orientation_sign(points: np.ndarray, a: int, b: int, c: int) -> float:
    """Sign of the turn a -> b -> c (+1 counter-clockwise, -1 clockwise, 0 collinear)."""
    ab = points[b] - points[a]
    ac = points[c] - points[a]
    return float(np.sign(ab[0] * ac[1] - ab[1] * ac[0]))


def canonical_transform(points: np.ndarray, a: int, b: int) -> RigidTransform2:
    """Rigid motion putting node ``a`` at the origin and node ``b`` on the +x axis."""
    ab = points[b] - points[a]
    if not np.all(np.isfinite(ab)) or math.hypot(ab[0], ab[1]) <= EPSILON_BASIS:
        raise DegenerateInputError(f"reference nodes {a} and {b} coincide or are missing")
    theta = -math.atan2(ab[1], ab[0])
    c, s = math.cos(theta), math.sin(theta)
    pa = points[a]
    return RigidTransform2(-(c * pa[0] - s * pa[1]), -(s * pa[0] + c * pa[1]), theta)


def to_points(rows: Iterable) -> list[Point2]:
    return [Point2(float(x), float(y)) for x, y in rows]
