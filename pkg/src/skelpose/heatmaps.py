"""Cross-heatmap pose representation.

A 3D joint set is encoded as two stacks of 2D Gaussian maps: one over
the xy plane and one over the zy plane (z on the horizontal axis, y on
the vertical, so the two stacks share the vertical axis). Joint
coordinates come back out through a temperature-sharpened spatial
soft-argmax, with the two y estimates averaged. Storing 2*m maps of
H*W instead of a m*H*W*depth volume is what makes the representation
cheap: at H = W = depth = 64 it is exactly 1/32 of the volumetric
footprint.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, ShapeMismatch

CHM_MAGIC = b"CHM1"
DEFAULT_GRID = 64
DEFAULT_SIGMA = 1.0
DEFAULT_TEMPERATURE = 0.1
UNIFORM_EPS = 1e-12


@dataclass
class VolumeBounds:
    lower: np.ndarray  # (3,) mm
    upper: np.ndarray  # (3,) mm

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != (3,) or self.upper.shape != (3,):
            raise ShapeMismatch("bounds must be 3-vectors")
        if np.any(self.upper <= self.lower):
            raise DegenerateInput("upper bound must exceed lower bound on every axis")

    @classmethod
    def cube(cls, center=(0.0, 0.0, 0.0), side: float = 2200.0) -> "VolumeBounds":
        """Default working volume: a cube centered on the root joint."""
        center = np.asarray(center, dtype=float)
        h = side / 2.0
        return cls(lower=center - h, upper=center + h)

    def contains(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return np.all((points >= self.lower) & (points <= self.upper), axis=-1)

    def to_px(self, values, axis: int, n_px: int):
        """Map mm along one axis onto [0, n_px] pixel coordinates."""
        lo, hi = self.lower[axis], self.upper[axis]
        return (np.asarray(values, dtype=float) - lo) / (hi - lo) * n_px

    def to_mm(self, px, axis: int, n_px: int):
        lo, hi = self.lower[axis], self.upper[axis]
        return np.asarray(px, dtype=float) / n_px * (hi - lo) + lo


@dataclass
class CrossHeatmap:
    xy: np.ndarray  # (m, H, W)
    zy: np.ndarray  # (m, H, W)
    out_of_bounds: np.ndarray = field(default=None)  # (m,) bool

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float)
        self.zy = np.asarray(self.zy, dtype=float)
        if self.xy.shape != self.zy.shape or self.xy.ndim != 3:
            raise ShapeMismatch("xy and zy stacks must share shape (m, H, W)")
        if self.out_of_bounds is None:
            self.out_of_bounds = np.zeros(self.xy.shape[0], dtype=bool)

    @property
    def num_joints(self) -> int:
        return self.xy.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.xy.shape[1], self.xy.shape[2]


def memory_ratio_vs_volumetric(m: int, h: int, w: int, depth: int) -> float:
    """Size of a cross heatmap relative to an m*h*w*depth volumetric map."""
    return (2.0 * m * h * w) / (m * h * w * depth)


def render_gaussian(center, h: int = DEFAULT_GRID, w: int = DEFAULT_GRID,
                    sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Unnormalized Gaussian bump exp(-((c-u)^2+(r-v)^2)/(2 sigma^2)).

    Off-grid centers are allowed; the map is simply near-zero then.
    """
    if sigma <= 0:
        raise DegenerateInput("sigma must be positive")
    u, v = float(center[0]), float(center[1])
    cols = np.arange(w, dtype=float)
    rows = np.arange(h, dtype=float)
    return np.exp(-((cols[None, :] - u) ** 2 + (rows[:, None] - v) ** 2) / (2.0 * sigma * sigma))


def render_gaussian_stack(centers, h: int, w: int, sigma: float) -> np.ndarray:
    """(m, 2) centers -> (m, h, w) Gaussian maps."""
    centers = np.asarray(centers, dtype=float)
    cols = np.arange(w, dtype=float)
    rows = np.arange(h, dtype=float)
    du = cols[None, None, :] - centers[:, 0, None, None]
    dv = rows[None, :, None] - centers[:, 1, None, None]
    return np.exp(-(du ** 2 + dv ** 2) / (2.0 * sigma * sigma))


def encode_cross(joints3d, bounds: VolumeBounds, grid: int = DEFAULT_GRID,
                 sigma: float = DEFAULT_SIGMA) -> CrossHeatmap:
    """Render xy and zy Gaussian stacks for a set of 3D joints.

    Joints outside the bounds are flagged in `out_of_bounds` and their
    map centers clamped onto the grid before rendering.
    """
    joints3d = np.asarray(joints3d, dtype=float)
    if joints3d.ndim != 2 or joints3d.shape[1] != 3:
        raise ShapeMismatch(f"joints3d must be (m, 3), got {joints3d.shape}")
    oob = ~bounds.contains(joints3d)

    ux = bounds.to_px(joints3d[:, 0], 0, grid)
    uz = bounds.to_px(joints3d[:, 2], 2, grid)
    vy = bounds.to_px(joints3d[:, 1], 1, grid)
    xy_centers = np.stack([ux, vy], axis=1)
    zy_centers = np.stack([uz, vy], axis=1)
    if np.any(oob):
        xy_centers[oob] = np.clip(xy_centers[oob], 0.0, grid - 1.0)
        zy_centers[oob] = np.clip(zy_centers[oob], 0.0, grid - 1.0)

    return CrossHeatmap(
        xy=render_gaussian_stack(xy_centers, grid, grid, sigma),
        zy=render_gaussian_stack(zy_centers, grid, grid, sigma),
        out_of_bounds=oob,
    )


def soft_argmax2d(heatmap, temperature: float = DEFAULT_TEMPERATURE):
    """Expected (u, v) under the temperature-sharpened heatmap.

    Sharpening is multiplicative, s = h^(1/tau) / sum h^(1/tau): a
    softmax with temperature over the log map. Sharpening exp(h/tau)
    directly would leave every near-zero background pixel with weight
    exp(0), and for a unit-peak Gaussian on a 64x64 grid that residual
    mass drags the expectation pixels toward the grid center, far
    beyond the 0.5 px accuracy this representation is built around.

    Returns (coords, uniform); `uniform` flags a map whose dynamic
    range is below UNIFORM_EPS, for which the expectation sits at the
    grid center ((W-1)/2, (H-1)/2) and carries no localization signal.
    """
    h = np.asarray(heatmap, dtype=float)
    if h.ndim != 2:
        raise ShapeMismatch("heatmap must be 2D")
    rows, cols = h.shape
    s, degenerate = _sharpened_weights(h, temperature)
    if degenerate:
        return np.array([(cols - 1) / 2.0, (rows - 1) / 2.0]), True
    u = float(np.sum(s * np.arange(cols)[None, :]))
    v = float(np.sum(s * np.arange(rows)[:, None]))
    return np.array([u, v]), False


def soft_argmax2d_backward(heatmap, temperature, upstream) -> np.ndarray:
    """d(loss)/d(heatmap) given d(loss)/d(u, v).

    For s = p^b / Z with p = max(h, 0) and b = 1/tau:
    dE[c]/dh = b * p^(b-1) * (c - E[c]) / Z, and zero in the clamp
    region or on a degenerate (uniform) map.
    """
    h = np.asarray(heatmap, dtype=float)
    rows, cols = h.shape
    s, degenerate = _sharpened_weights(h, temperature)
    if degenerate:
        return np.zeros_like(h)
    u = np.sum(s * np.arange(cols)[None, :])
    v = np.sum(s * np.arange(rows)[:, None])
    beta = 1.0 / temperature
    p = np.maximum(h, 0.0)
    pmax = p.max()
    r = p / pmax
    with np.errstate(divide="ignore"):
        coeff = np.where(r > 0.0, beta * r ** (beta - 1.0), 0.0)
    z = np.sum(r ** beta) * pmax
    gu, gv = float(upstream[0]), float(upstream[1])
    return coeff / z * (gu * (np.arange(cols)[None, :] - u)
                        + gv * (np.arange(rows)[:, None] - v))


def _sharpened_weights(h, temperature):
    """Normalized h^(1/tau) weights; flags degenerate (uniform) maps."""
    if temperature <= 0:
        raise DegenerateInput("temperature must be positive")
    p = np.maximum(h, 0.0)
    pmax = p.max()
    if h.max() - h.min() < UNIFORM_EPS or pmax <= 0.0:
        return np.full(h.shape, 1.0 / h.size), True
    w = (p / pmax) ** (1.0 / temperature)
    return w / w.sum(), False


def decode_cross(ch: CrossHeatmap, bounds: VolumeBounds,
                 temperature: float = DEFAULT_TEMPERATURE):
    """Soft-argmax both stacks back to 3D millimetre coordinates.

    x comes from the xy stack, z from the zy stack and y is the average
    of the two per-stack estimates. Returns (joints, uniform_flags).
    """
    h_grid, w_grid = ch.grid
    m = ch.num_joints
    joints = np.zeros((m, 3))
    uniform = np.zeros(m, dtype=bool)
    for i in range(m):
        (ux, vy1), f1 = soft_argmax2d(ch.xy[i], temperature)
        (uz, vy2), f2 = soft_argmax2d(ch.zy[i], temperature)
        uniform[i] = f1 or f2
        joints[i, 0] = bounds.to_mm(ux, 0, w_grid)
        joints[i, 2] = bounds.to_mm(uz, 2, w_grid)
        joints[i, 1] = bounds.to_mm(0.5 * (vy1 + vy2), 1, h_grid)
    return joints, uniform


def project_to_plane(joints3d, target_width: float = 16.0) -> np.ndarray:
    """Orthographic xy projection scaled into a small pixel frame.

    The projection is centered on the joints' xy bounding box and
    isotropically scaled so the larger bounding-box side spans 90% of
    target_width. No camera is estimated.
    """
    joints3d = np.asarray(joints3d, dtype=float)
    if joints3d.ndim != 2 or joints3d.shape[0] == 0:
        raise ShapeMismatch("joints3d must be a nonempty (m, k>=2) array")
    xy = joints3d[:, :2]
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent < 1e-12:
        raise DegenerateInput("all joints project to a single point")
    scale = 0.9 * target_width / extent
    return (xy - (lo + hi) / 2.0) * scale + target_width / 2.0


def save_cross(ch: CrossHeatmap, path):
    """Write the binary format: magic 'CHM1', u32 m/H/W, then float32
    row-major xy stack followed by the zy stack (little-endian)."""
    m = ch.num_joints
    h_grid, w_grid = ch.grid
    with open(path, "wb") as f:
        f.write(CHM_MAGIC)
        f.write(struct.pack("<III", m, h_grid, w_grid))
        f.write(ch.xy.astype("<f4").tobytes(order="C"))
        f.write(ch.zy.astype("<f4").tobytes(order="C"))


def load_cross(path) -> CrossHeatmap:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHM_MAGIC:
            raise ValueError(f"not a cross-heatmap file (magic {magic!r})")
        m, h_grid, w_grid = struct.unpack("<III", f.read(12))
        count = m * h_grid * w_grid
        xy = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(m, h_grid, w_grid)
        zy = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(m, h_grid, w_grid)
    return CrossHeatmap(xy=xy.astype(float), zy=zy.astype(float))
