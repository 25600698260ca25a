"""Discretized unit sphere for direction classification.

Movement directions are classified against a fixed Fibonacci grid of
`n` nearly-uniform unit vectors. Direction labels are sparse probability
vectors over the grid; responses coming back from a classifier are dense
probability vectors that get smoothed geodesically before peak detection.
"""

from __future__ import annotations

import numpy as np

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0
DEFAULT_GRID_SIZE = 1000

# hard floors for the constrained argmax in detect_peaks; with a grid of
# >= 100 directions every angular constraint region below is non-empty
_MIN_GRID_FOR_PEAKS = 100


class SphereGrid:
    """Fixed set of unit directions with cached smoothing kernels."""

    def __init__(self, directions: np.ndarray):
        directions = np.asarray(directions, dtype=float)
        if directions.ndim != 2 or directions.shape[1] != 3:
            raise ValueError("directions must be (n, 3)")
        norms = np.linalg.norm(directions, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("grid directions must be unit length")
        self.directions = directions
        self._smoothing: dict[float, np.ndarray] = {}

    def __len__(self) -> int:
        return self.directions.shape[0]

    def smoothing_matrix(self, sigma_deg: float) -> np.ndarray:
        """Row-normalized geodesic Gaussian kernel, truncated at 3 sigma."""
        if sigma_deg <= 0:
            raise ValueError("sigma_deg must be positive")
        cached = self._smoothing.get(sigma_deg)
        if cached is not None:
            return cached
        cosang = np.clip(self.directions @ self.directions.T, -1.0, 1.0)
        theta = np.degrees(np.arccos(cosang))
        w = np.exp(-0.5 * (theta / sigma_deg) ** 2)
        w[theta > 3.0 * sigma_deg] = 0.0
        w /= w.sum(axis=1, keepdims=True)
        self._smoothing[sigma_deg] = w
        return w


def build_fibonacci_grid(n: int = DEFAULT_GRID_SIZE) -> SphereGrid:
    """Spiral lattice: z_i = 1 - (2i+1)/n, azimuth_i = 2*pi*i/golden_ratio."""
    if n < 2:
        raise ValueError("grid needs at least 2 directions")
    i = np.arange(n, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / n
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    azimuth = 2.0 * np.pi * i / GOLDEN_RATIO
    dirs = np.stack([rho * np.cos(azimuth), rho * np.sin(azimuth), z], axis=1)
    return SphereGrid(dirs)


def nearest_grid_index(grid: SphereGrid, d: np.ndarray) -> int:
    """Index of the grid direction with the largest dot product with d.

    Ties resolve to the lowest index. Also accepts an (m, 3) stack,
    returning an (m,) index array.
    """
    d = np.asarray(d, dtype=float)
    if d.ndim == 1:
        return int(np.argmax(grid.directions @ d))
    return np.argmax(d @ grid.directions.T, axis=1)


def encode_directions(grid: SphereGrid, dirs: np.ndarray) -> np.ndarray:
    """Sparse direction label: unit mass per direction on its nearest grid
    point, then normalized to sum 1. Colliding directions accumulate."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    if dirs.shape[0] < 1 or dirs.shape[0] > 3:
        raise ValueError("expected 1-3 directions")
    label = np.zeros(len(grid))
    for d in dirs:
        label[nearest_grid_index(grid, d)] += 1.0
    return label / label.sum()


def entropy(probs: np.ndarray, base: float | None = None) -> float:
    """Shannon entropy with 0*log(0) = 0; natural log unless `base` given."""
    p = np.asarray(probs, dtype=float)
    nz = p[p > 0.0]
    h = float(-np.sum(nz * np.log(nz)))
    if base is not None:
        h /= np.log(base)
    return h


def normalized_entropy(probs: np.ndarray) -> float:
    """Entropy divided by log(n); 0 for one-hot, 1 for uniform."""
    p = np.asarray(probs, dtype=float)
    return entropy(p, base=len(p))


def smooth_response(grid: SphereGrid, probs: np.ndarray, sigma_deg: float) -> np.ndarray:
    """Geodesic Gaussian smoothing of a response, renormalized to sum 1."""
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (len(grid),):
        raise ValueError("response length must match grid size")
    out = grid.smoothing_matrix(sigma_deg) @ probs
    total = out.sum()
    if total <= 0:
        raise ValueError("response has no positive mass")
    return out / total


def _masked_argmax(response: np.ndarray, mask: np.ndarray) -> int:
    if not mask.any():
        raise RuntimeError("empty angular constraint region; grid too small")
    masked = np.where(mask, response, -np.inf)
    return int(np.argmax(masked))


def detect_peaks(
    grid: SphereGrid,
    response: np.ndarray,
    prev_dir: np.ndarray | None = None,
    bifurcation: bool = False,
    max_prev_angle_deg: float = 60.0,
    min_second_angle_deg: float = 110.0,
    min_third_angle_deg: float = 40.0,
) -> np.ndarray:
    """Constrained peaks of a smoothed response.

    D1 is the argmax within `max_prev_angle_deg` of the previous direction
    (global argmax when there is none). D2 is the argmax at least
    `min_second_angle_deg` away from D1. With `bifurcation`, D3 is the argmax
    at least `min_third_angle_deg` away from both. Returns the stacked grid
    unit vectors, 2 or 3 rows.
    """
    if len(grid) < _MIN_GRID_FOR_PEAKS:
        raise ValueError(f"detect_peaks requires a grid of >= {_MIN_GRID_FOR_PEAKS}")
    response = np.asarray(response, dtype=float)
    dirs = grid.directions

    if prev_dir is None:
        i1 = int(np.argmax(response))
    else:
        prev = np.asarray(prev_dir, dtype=float)
        cos_prev = dirs @ (prev / np.linalg.norm(prev))
        i1 = _masked_argmax(response, cos_prev >= np.cos(np.radians(max_prev_angle_deg)))
    d1 = dirs[i1]

    i2 = _masked_argmax(response, dirs @ d1 <= np.cos(np.radians(min_second_angle_deg)))
    d2 = dirs[i2]
    if not bifurcation:
        return np.stack([d1, d2])

    cos3 = np.cos(np.radians(min_third_angle_deg))
    i3 = _masked_argmax(response, (dirs @ d1 <= cos3) & (dirs @ d2 <= cos3))
    return np.stack([d1, d2, dirs[i3]])
