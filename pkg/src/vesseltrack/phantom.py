"""Synthetic vascular phantoms: tree generation, rasterization, stenosis.

Phantoms provide ground truth at desk scale: a seeded binary tree of tapering,
gently wavy branches, an intensity volume with a soft tube profile plus
Gaussian noise, and a radius-dip operator for simulating stenoses.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .geometry import normalize, resample_polyline
from .tree import MAX_RADIUS, MIN_RADIUS, CenterlineTree
from .volume import Volume

# Spacing of emitted centerline points, mm.
RESAMPLE_SPACING = 0.5
# Lateral waviness wavelengths, mm.  Kept long relative to the amplitude so
# branch tangents stay within a few degrees of the nominal direction.
WAVELENGTH_RANGE = (15.0, 30.0)
# Parameter step of the dense curve before resampling, mm.
DENSE_STEP = 0.1
# Branches truncated below this length are dropped entirely, mm.
MIN_BRANCH_LENGTH = 0.5


@dataclass(frozen=True)
class TreeSpec:
    """Parameters of a seeded binary phantom tree.

    Children leave a bifurcation on opposite sides of the parent tangent,
    each deviating by an angle drawn from branch_angle_range (degrees), so
    sibling separation spans twice that range and must stay >= 45 degrees.
    Radii shrink by `taper` per generation; branches whose radius would fall
    below the anatomic floor are truncated without error.
    """

    depth: int = 2
    branch_angle_range: tuple = (25.0, 32.0)
    taper: float = 0.75
    segment_length_range: tuple = (15.0, 30.0)
    tortuosity: float = 0.3
    rng_seed: int = 0
    root_radius: float = 3.0

    def __post_init__(self):
        object.__setattr__(
            self, "branch_angle_range", tuple(float(v) for v in self.branch_angle_range)
        )
        object.__setattr__(
            self,
            "segment_length_range",
            tuple(float(v) for v in self.segment_length_range),
        )
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        lo, hi = self.branch_angle_range
        if not (0.0 < lo <= hi <= 90.0):
            raise ValueError("branch_angle_range must satisfy 0 < lo <= hi <= 90")
        if 2.0 * lo < 45.0:
            raise ValueError("sibling separation 2*lo must be >= 45 degrees")
        if not (0.5 < self.taper < 1.0):
            raise ValueError("taper must lie in (0.5, 1.0)")
        llo, lhi = self.segment_length_range
        if not (1.0 <= llo <= lhi):
            raise ValueError("segment_length_range must satisfy 1 <= lo <= hi")
        if self.tortuosity < 0.0:
            raise ValueError("tortuosity must be >= 0")
        if not (MIN_RADIUS <= self.root_radius <= MAX_RADIUS):
            raise ValueError(
                f"root_radius must lie in [{MIN_RADIUS}, {MAX_RADIUS}] mm"
            )


def _perpendicular(rng: np.random.Generator, direction: np.ndarray) -> np.ndarray:
    """Random unit vector orthogonal to `direction`."""
    while True:
        raw = rng.normal(size=3)
        lateral = raw - np.dot(raw, direction) * direction
        norm = np.linalg.norm(lateral)
        if norm > 1e-6:
            return lateral / norm


def _branch_curve(rng, start, direction, length, tortuosity):
    """Dense wavy curve leaving `start` exactly along `direction`.

    Lateral offsets have zero value and zero derivative at t = 0 so the
    initial tangent is exact; this anchors branch angles at bifurcations.
    """
    u = _perpendicular(rng, direction)
    v = np.cross(direction, u)
    ts = np.linspace(0.0, length, max(2, int(np.ceil(length / DENSE_STEP)) + 1))
    curve = start + ts[:, None] * direction
    for axis in (u, v):
        amp = tortuosity * rng.uniform(0.3, 1.0)
        omega = 2.0 * np.pi / rng.uniform(*WAVELENGTH_RANGE)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        offs = amp * (
            np.sin(omega * ts + phase)
            - np.sin(phase)
            - omega * ts * np.cos(phase)
        )
        curve = curve + offs[:, None] * axis
    return curve


def generate_tree(spec: TreeSpec) -> CenterlineTree:
    """Generate a seeded binary tree; bit-identical for a given spec."""
    rng = np.random.default_rng(spec.rng_seed)
    root_dir = normalize(rng.normal(size=3))
    # Queue entries: (start point, direction, start radius, generation,
    # global index of the attachment point, -1 for the root).
    queue = deque([(np.zeros(3), root_dir, spec.root_radius, 0, -1)])
    positions, radii, segment_ids, parent_ids = [], [], [], []
    total = 0
    next_segment = 0
    while queue:
        start, direction, r_start, generation, attach = queue.popleft()
        length = rng.uniform(*spec.segment_length_range)
        r_end = r_start * spec.taper
        truncated = False
        if r_end < MIN_RADIUS:
            # Cut the branch where the linear taper reaches the radius floor.
            length *= (r_start - MIN_RADIUS) / (r_start - r_end)
            r_end = MIN_RADIUS
            truncated = True
            if length < MIN_BRANCH_LENGTH:
                continue
        dense = _branch_curve(rng, start, direction, length, spec.tortuosity)
        arc = np.concatenate(
            [[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))]
        )
        dense_radii = r_start + (r_end - r_start) * arc / arc[-1]
        points, point_radii = resample_polyline(
            dense, RESAMPLE_SPACING, radii=dense_radii
        )
        # Child branches start at the parent apex; drop that duplicate point
        # and hang the first emitted point off the apex instead.
        offset = 1 if attach >= 0 else 0
        count = points.shape[0] - offset
        if count < 1:
            continue
        parent_column = np.arange(total - 1, total + count - 1, dtype=np.int64)
        parent_column[0] = attach
        positions.append(points[offset:])
        radii.append(point_radii[offset:])
        segment_ids.append(np.full(count, next_segment, dtype=np.int64))
        parent_ids.append(parent_column)
        next_segment += 1
        total += count
        if generation < spec.depth and not truncated:
            tangent = normalize(points[-1] - points[-2])
            lateral = _perpendicular(rng, tangent)
            lo, hi = spec.branch_angle_range
            theta1 = np.deg2rad(rng.uniform(lo, hi))
            theta2 = np.deg2rad(rng.uniform(lo, hi))
            apex = total - 1
            child1 = np.cos(theta1) * tangent + np.sin(theta1) * lateral
            child2 = np.cos(theta2) * tangent - np.sin(theta2) * lateral
            queue.append((points[-1], child1, r_end, generation + 1, apex))
            queue.append((points[-1], child2, r_end, generation + 1, apex))
    return CenterlineTree(
        positions=np.concatenate(positions),
        radii=np.concatenate(radii),
        segment_ids=np.concatenate(segment_ids),
        parent_ids=np.concatenate(parent_ids),
    )


def rasterize(
    tree: CenterlineTree,
    spacing=0.5,
    dims=None,
    origin=None,
    contrast: float = 1.0,
    noise_sigma: float = 0.1,
    blur_sigma: float = 0.4,
    rng_seed: int = 0,
) -> Volume:
    """Render a tree as an intensity volume.

    Voxel intensity is contrast times a soft tube indicator (an erf shoulder
    of width blur_sigma around the local radius) plus Gaussian noise.  When
    dims/origin are omitted the volume is auto-fitted around the tree.  The
    tree must keep a 2 mm margin to the volume bounds.
    """
    if blur_sigma <= 0.0:
        raise ValueError("blur_sigma must be > 0")
    if noise_sigma < 0.0:
        raise ValueError("noise_sigma must be >= 0")
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)).copy()
    margin = 2.0
    reach = float(tree.radii.max()) + 4.0 * blur_sigma
    if origin is None or dims is None:
        lo = tree.positions.min(axis=0)
        hi = tree.positions.max(axis=0)
        pad = margin + reach
        if origin is None:
            origin = lo - pad
        if dims is None:
            dims = np.ceil((hi + pad - origin) / spacing).astype(int) + 1
    origin = np.asarray(origin, dtype=np.float64)
    dims = tuple(int(d) for d in dims)
    world_hi = origin + (np.asarray(dims) - 1) * spacing
    if (
        np.any(tree.positions - origin < margin - 1e-9)
        or np.any(world_hi - tree.positions < margin - 1e-9)
    ):
        raise ValueError("tree must fit in the volume with a 2 mm margin")
    nx, ny, nz = dims
    xs = origin[0] + spacing[0] * np.arange(nx)
    ys = origin[1] + spacing[1] * np.arange(ny)
    zs = origin[2] + spacing[2] * np.arange(nz)
    values = np.zeros(dims, dtype=np.float32)
    # Work in z-slabs of a few million voxels to bound peak memory.
    slab = max(1, int(2_000_000 // max(1, nx * ny)))
    for z0 in range(0, nz, slab):
        z1 = min(nz, z0 + slab)
        gx, gy, gz = np.meshgrid(xs, ys, zs[z0:z1], indexing="ij")
        coords = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
        dist, nearest = tree.kdtree.query(coords, distance_upper_bound=reach)
        inside = nearest < tree.n_points
        vals = np.zeros(coords.shape[0])
        if inside.any():
            local_r = tree.radii[nearest[inside]]
            vals[inside] = 0.5 * (
                1.0 - erf((dist[inside] - local_r) / (np.sqrt(2.0) * blur_sigma))
            )
        values[:, :, z0:z1] = (contrast * vals).reshape(nx, ny, z1 - z0)
    if noise_sigma > 0.0:
        rng = np.random.default_rng(rng_seed)
        values += rng.normal(0.0, noise_sigma, size=values.shape)
    return Volume(values=values, spacing=spacing, origin=origin)


def apply_stenosis(
    tree: CenterlineTree, point_index: int, severity: float, extent: float
) -> CenterlineTree:
    """Return a copy of the tree with a smooth radius dip around one point.

    The dip follows the arc length of the point's own segment: the radius at
    the chosen point is scaled by (1 - severity), recovering smoothly to the
    original values at `extent` mm along the segment.  Topology is unchanged.
    """
    if not (0.0 <= severity < 1.0):
        raise ValueError("severity must lie in [0, 1)")
    if extent <= 0.0:
        raise ValueError("extent must be > 0")
    if not (0 <= point_index < tree.n_points):
        raise ValueError("point_index out of range")
    segment = int(tree.segment_ids[point_index])
    idx = tree.segments[segment]
    points = tree.positions[idx]
    arc = np.concatenate(
        [[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))]
    )
    where = int(np.flatnonzero(idx == point_index)[0])
    offsets = np.abs(arc - arc[where])
    scale = np.ones(idx.size)
    inside = offsets < extent
    scale[inside] = 1.0 - severity * np.cos(
        np.pi * offsets[inside] / (2.0 * extent)
    ) ** 2
    radii = tree.radii.copy()
    radii[idx] = radii[idx] * scale
    return CenterlineTree(
        positions=tree.positions.copy(),
        radii=radii,
        segment_ids=tree.segment_ids.copy(),
        parent_ids=tree.parent_ids.copy(),
    )
