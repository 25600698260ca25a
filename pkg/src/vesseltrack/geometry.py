"""Points, rotations and polyline resampling.

World coordinates are millimeters in (x, y, z) order, stored as plain numpy
arrays of shape (3,). Rotations are Euler angles applied in the fixed axis
order X then Y then Z, i.e. the combined matrix is Rz @ Ry @ Rx.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-12


@dataclass(frozen=True)
class EulerRotation:
    """Euler angles in radians, each in [-pi, pi], axis order X -> Y -> Z."""

    phi_x: float = 0.0
    phi_y: float = 0.0
    phi_z: float = 0.0

    def __post_init__(self) -> None:
        for name in ("phi_x", "phi_y", "phi_z"):
            value = getattr(self, name)
            if not -np.pi <= value <= np.pi:
                raise ValueError(f"{name}={value} outside [-pi, pi]")


IDENTITY_ROTATION = EulerRotation()


def rotation_matrix(rot: EulerRotation) -> np.ndarray:
    """3x3 matrix for `rot`: rotate about X, then Y, then Z."""
    cx, sx = np.cos(rot.phi_x), np.sin(rot.phi_x)
    cy, sy = np.cos(rot.phi_y), np.sin(rot.phi_y)
    cz, sz = np.cos(rot.phi_z), np.sin(rot.phi_z)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def rotate_vector(v: np.ndarray, rot: EulerRotation) -> np.ndarray:
    """Apply `rot` to a vector (or an (n, 3) stack of vectors).

    Norm is preserved up to floating point; unit inputs stay unit.
    """
    m = rotation_matrix(rot)
    v = np.asarray(v, dtype=float)
    return v @ m.T


def angle_between(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between two vectors in degrees, via a clamped arccosine."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < EPS or nb < EPS:
        raise ValueError("angle_between requires nonzero vectors")
    c = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def normalize(v: np.ndarray) -> np.ndarray:
    """Unit vector along v; raises on (near-)zero input."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n < EPS:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def polyline_arc_length(points: np.ndarray) -> float:
    """Total length of the piecewise-linear curve through `points`."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 2:
        raise ValueError("polyline needs at least 2 points")
    return float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))


def resample_polyline(
    points: np.ndarray,
    spacing: float,
    radii: np.ndarray | None = None,
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Resample a polyline at uniform arc-length `spacing`.

    Output points sit on the input curve at arc positions 0, spacing,
    2*spacing, ...; the input endpoint is always kept, so the final interval
    may be shorter. The first point is preserved exactly. When `radii` is
    given it is interpolated linearly along the arc and returned alongside.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 2:
        raise ValueError("expected an (n, 3) polyline with n >= 2")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if radii is not None:
        radii = np.asarray(radii, dtype=float)
        if radii.shape != (points.shape[0],):
            raise ValueError("radii must match the number of points")

    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total < EPS:
        raise ValueError("degenerate polyline with zero length")

    targets = np.arange(0.0, total + 0.5 * spacing, spacing)
    targets = targets[targets <= total + EPS]
    if total - targets[-1] > 1e-9 * max(total, 1.0):
        targets = np.append(targets, total)
    else:
        targets[-1] = total

    out = np.stack([np.interp(targets, cum, points[:, k]) for k in range(3)], axis=1)
    out[0] = points[0]
    out[-1] = points[-1]
    if radii is None:
        return out
    out_r = np.interp(targets, cum, radii)
    return out, out_r
