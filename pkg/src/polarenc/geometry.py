"""Relative polar geometry between token bounding boxes.

Coordinates are page-normalized thousandths in [0, 1000]. The x axis grows
rightward and the y axis grows downward (screen convention), so an angle of
-pi/2 points above and +pi/2 points below. Token-pair geometry is summarized
as (distance bin, angle bin) indices used to look up attention-bias
embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

COORD_MAX = 1000

_PI = math.pi
_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized page coordinates. Zero area is legal."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if not (0 <= self.x0 <= self.x1 <= COORD_MAX):
            raise ValueError(f"bbox x range invalid: x0={self.x0}, x1={self.x1}")
        if not (0 <= self.y0 <= self.y1 <= COORD_MAX):
            raise ValueError(f"bbox y range invalid: y0={self.y0}, y1={self.y1}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.int64)


class Center(NamedTuple):
    cx: float
    cy: float


@dataclass(frozen=True)
class BinningConfig:
    """Quantization grid for relative coordinates.

    rho_max is in the same units as the coordinates; distances at or beyond
    it saturate into the last distance bin.
    """

    rho_max: float = 500.0
    n_dist_bins: int = 4
    n_angle_bins: int = 8

    def __post_init__(self) -> None:
        if self.rho_max <= 0:
            raise ValueError(f"rho_max must be positive, got {self.rho_max}")
        if self.n_dist_bins < 1 or self.n_angle_bins < 1:
            raise ValueError("bin counts must be >= 1")


class PolarBinPair(NamedTuple):
    dist_bin: int
    angle_bin: int


class RelativeBins(NamedTuple):
    """Pairwise bin indices; entry (i, j) describes token j relative to token i."""

    dist: np.ndarray  # [n, n] int64
    angle: np.ndarray  # [n, n] int64


class CartesianBins(NamedTuple):
    """Signed top-left-corner offset bins, the Cartesian ablation baseline."""

    dx: np.ndarray  # [n, n] int64
    dy: np.ndarray  # [n, n] int64


def center(b: BBox) -> Center:
    """Midpoint of a box."""
    return Center((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0)


def rho(ci: Center, cj: Center) -> float:
    """Euclidean distance between two centers."""
    return math.hypot(cj.cx - ci.cx, cj.cy - ci.cy)


def theta(ci: Center, cj: Center) -> float:
    """Angle of the displacement cj - ci in (-pi, pi], measured from +x.

    Defined as exactly 0 when the centers coincide.
    """
    dx = cj.cx - ci.cx
    dy = cj.cy - ci.cy
    if dx == 0.0 and dy == 0.0:
        return 0.0
    t = math.atan2(dy, dx)
    # atan2 can return -pi for dy = -0.0; fold onto the (-pi, pi] convention
    return _PI if t <= -_PI else t


def quantize_distance(r: float, cfg: BinningConfig) -> int:
    """Uniform bin of r over [0, rho_max], saturating at the last bin."""
    if r < 0:
        raise ValueError(f"distance must be nonnegative, got {r}")
    b = math.floor(r * cfg.n_dist_bins / cfg.rho_max)
    return min(b, cfg.n_dist_bins - 1)


def quantize_angle(t: float, cfg: BinningConfig) -> int:
    """Uniform bin of t over the full circle (-pi, pi]; t = pi lands in the last bin."""
    b = math.floor((t + _PI) * cfg.n_angle_bins / _TWO_PI)
    return max(0, min(b, cfg.n_angle_bins - 1))


def angle_bin_of_zero(cfg: BinningConfig) -> int:
    """Bin that contains angle 0 (the diagonal of a relative-bin matrix)."""
    return quantize_angle(0.0, cfg)


def centers_of(bboxes: np.ndarray) -> np.ndarray:
    """Midpoints of an [n, 4] box array as an [n, 2] float array."""
    b = np.asarray(bboxes, dtype=np.float64)
    return np.stack([(b[:, 0] + b[:, 2]) / 2.0, (b[:, 1] + b[:, 3]) / 2.0], axis=1)


def _as_center_array(centers: Sequence[Center] | np.ndarray) -> np.ndarray:
    c = np.asarray(centers, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2:
        raise ValueError(f"expected an [n, 2] center array, got shape {c.shape}")
    return c


def relative_bins(centers: Sequence[Center] | np.ndarray, cfg: BinningConfig) -> RelativeBins:
    """Pairwise quantized polar coordinates.

    Entry (i, j) holds the bins of (rho(c_i, c_j), theta(c_i, c_j)); the
    diagonal is (0, bin of angle 0).
    """
    c = _as_center_array(centers)
    dx = c[None, :, 0] - c[:, None, 0]
    dy = c[None, :, 1] - c[:, None, 1]
    r = np.hypot(dx, dy)
    t = np.arctan2(dy, dx)
    t = np.where(t <= -_PI, _PI, t)
    t = np.where((dx == 0.0) & (dy == 0.0), 0.0, t)
    dist = np.minimum(
        np.floor(r * cfg.n_dist_bins / cfg.rho_max), cfg.n_dist_bins - 1
    ).astype(np.int64)
    ang = np.floor((t + _PI) * cfg.n_angle_bins / _TWO_PI)
    ang = np.clip(ang, 0, cfg.n_angle_bins - 1).astype(np.int64)
    return RelativeBins(dist=dist, angle=ang)


def cartesian_relative_bins(
    bboxes: Sequence[BBox] | np.ndarray, cfg: BinningConfig
) -> CartesianBins:
    """Signed top-left-corner offsets, clipped to [-rho_max, rho_max] and
    quantized into 2 * n_dist_bins bins per axis."""
    if len(bboxes) and isinstance(bboxes[0], BBox):
        arr = np.stack([b.as_array() for b in bboxes])
    else:
        arr = np.asarray(bboxes, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected an [n, 4] box array, got shape {arr.shape}")
    tlx = arr[:, 0].astype(np.float64)
    tly = arr[:, 1].astype(np.float64)
    dx = np.clip(tlx[None, :] - tlx[:, None], -cfg.rho_max, cfg.rho_max)
    dy = np.clip(tly[None, :] - tly[:, None], -cfg.rho_max, cfg.rho_max)
    n_signed = 2 * cfg.n_dist_bins

    def q(v: np.ndarray) -> np.ndarray:
        b = np.floor((v + cfg.rho_max) * cfg.n_dist_bins / cfg.rho_max)
        return np.clip(b, 0, n_signed - 1).astype(np.int64)

    return CartesianBins(dx=q(dx), dy=q(dy))


def pair_at(bins: RelativeBins, i: int, j: int) -> PolarBinPair:
    return PolarBinPair(int(bins.dist[i, j]), int(bins.angle[i, j]))
