"""Centerline trees: point-chain forests with radii, plus ACTL / xyzr files.

A tree is stored as flat per-point arrays.  Every point carries a segment id
and the index of its parent point (-1 for roots).  Within a segment the points
form a chain; the first point of a non-root segment hangs off a point of its
parent segment, so the parent links alone define the full tree topology.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, VersionError

ACTL_MAGIC = "ACTL"
ACTL_VERSION = 1

# Radius bounds for anatomically plausible ground truth, in mm.
MIN_RADIUS = 0.15
MAX_RADIUS = 4.0

# Maximum spacing between consecutive points of a segment, in mm.
MAX_POINT_SPACING = 1.0


@dataclass
class CenterlineTree:
    """Forest of centerline points with per-point radius and topology."""

    positions: np.ndarray  # (n, 3) world coordinates, mm
    radii: np.ndarray  # (n,) local lumen radius, mm
    segment_ids: np.ndarray  # (n,) int
    parent_ids: np.ndarray  # (n,) int, -1 for roots

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)
        self.parent_ids = np.asarray(self.parent_ids, dtype=np.int64)
        n = self.positions.shape[0]
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or n == 0:
            raise ValueError("positions must be a non-empty (n, 3) array")
        for name in ("radii", "segment_ids", "parent_ids"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if np.any(self.parent_ids >= n) or np.any(self.parent_ids < -1):
            raise ValueError("parent_ids must be -1 or a valid point index")

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @cached_property
    def segments(self) -> dict:
        """Segment id -> point indices, in the order stored."""
        out = {}
        for i, seg in enumerate(self.segment_ids):
            out.setdefault(int(seg), []).append(i)
        return {seg: np.asarray(idx, dtype=np.int64) for seg, idx in out.items()}

    @cached_property
    def ostia(self) -> np.ndarray:
        """Indices of root points (no parent)."""
        return np.flatnonzero(self.parent_ids < 0)

    @cached_property
    def adjacency(self) -> list:
        """Undirected neighbour lists over the parent links."""
        neighbours = [[] for _ in range(self.n_points)]
        for child, parent in enumerate(self.parent_ids):
            if parent >= 0:
                neighbours[int(parent)].append(child)
                neighbours[child].append(int(parent))
        return neighbours

    @cached_property
    def leaves(self) -> np.ndarray:
        """Indices of points that no other point hangs off."""
        counts = np.bincount(
            self.parent_ids[self.parent_ids >= 0], minlength=self.n_points
        )
        return np.flatnonzero(counts == 0)

    @cached_property
    def kdtree(self) -> cKDTree:
        return cKDTree(self.positions)

    def nearest_point(self, query):
        """Distance to and index of the nearest tree point for each query."""
        return self.kdtree.query(np.asarray(query, dtype=np.float64))

    def path_to_root(self, index: int) -> np.ndarray:
        """Point indices from `index` up through the parent links."""
        path = [int(index)]
        seen = {int(index)}
        while self.parent_ids[path[-1]] >= 0:
            parent = int(self.parent_ids[path[-1]])
            if parent in seen:
                raise ValueError("parent links contain a cycle")
            path.append(parent)
            seen.add(parent)
        return np.asarray(path, dtype=np.int64)

    def vessel_path(self, leaf_index: int) -> np.ndarray:
        """Ordered point indices of the root-to-leaf vessel through a leaf."""
        return self.path_to_root(leaf_index)[::-1].copy()

    def validate(self, check_radii: bool = True) -> None:
        """Raise ValueError if structural invariants are broken.

        Checks the forest property, per-segment chain structure and point
        spacing, and the attachment of child segments near their parents.
        Radius bounds apply to ground-truth trees; tracked trees without
        radius estimates are validated with check_radii=False.
        """
        if check_radii:
            if np.any(self.radii < MIN_RADIUS) or np.any(self.radii > MAX_RADIUS):
                raise ValueError(
                    f"radii must lie in [{MIN_RADIUS}, {MAX_RADIUS}] mm"
                )
        if np.any(self.parent_ids == np.arange(self.n_points)):
            raise ValueError("a point cannot be its own parent")
        # 0 = unvisited, 1 = on the current parent walk, 2 = known-good.
        state = np.zeros(self.n_points, dtype=np.int8)
        for i in range(self.n_points):
            if state[i]:
                continue
            walk = []
            j = i
            while j >= 0 and state[j] == 0:
                state[j] = 1
                walk.append(j)
                j = int(self.parent_ids[j])
            if j >= 0 and state[j] == 1:
                raise ValueError("parent links contain a cycle")
            state[walk] = 2
        for seg, idx in self.segments.items():
            first = idx[0]
            for prev, cur in zip(idx[:-1], idx[1:]):
                if self.parent_ids[cur] != prev:
                    raise ValueError(
                        f"segment {seg} is not a parent-linked chain"
                    )
            gaps = np.linalg.norm(np.diff(self.positions[idx], axis=0), axis=1)
            if gaps.size and gaps.max() > MAX_POINT_SPACING + 1e-9:
                raise ValueError(f"segment {seg} has point spacing > 1 mm")
            parent = self.parent_ids[first]
            if parent >= 0:
                if self.segment_ids[parent] == seg:
                    raise ValueError(
                        f"segment {seg} first point must attach to another segment"
                    )
                gap = np.linalg.norm(
                    self.positions[first] - self.positions[parent]
                )
                if gap > MAX_POINT_SPACING + 1e-9:
                    raise ValueError(
                        f"segment {seg} attaches {gap:.3f} mm from its parent"
                    )


def _format_float(value) -> str:
    return repr(float(value))


def write_actl(path: str, tree: CenterlineTree) -> None:
    """Write a tree in the ACTL v1 text format."""
    lines = [f"{ACTL_MAGIC} v{ACTL_VERSION} {tree.n_points}"]
    for i in range(tree.n_points):
        x, y, z = tree.positions[i]
        lines.append(
            f"{i} {int(tree.segment_ids[i])} {int(tree.parent_ids[i])} "
            f"{_format_float(x)} {_format_float(y)} {_format_float(z)} "
            f"{_format_float(tree.radii[i])}"
        )
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def read_actl(path: str) -> CenterlineTree:
    """Read an ACTL v1 file; raises FormatError/VersionError on bad input."""
    with open(path, "r", encoding="ascii") as f:
        text = f.read()
    lines = text.splitlines()
    if not lines:
        raise FormatError("ACTL: empty file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != ACTL_MAGIC:
        raise FormatError("ACTL: bad magic")
    if header[1] != f"v{ACTL_VERSION}":
        raise VersionError(f"ACTL: unsupported version {header[1]!r}")
    try:
        count = int(header[2])
    except ValueError as e:
        raise FormatError("ACTL: point count is not an integer") from e
    body = [line for line in lines[1:] if line.strip()]
    if len(body) != count:
        raise FormatError(
            f"ACTL: header promises {count} points, file has {len(body)}"
        )
    if count == 0:
        raise FormatError("ACTL: empty tree")
    positions = np.empty((count, 3), dtype=np.float64)
    radii = np.empty(count, dtype=np.float64)
    segment_ids = np.empty(count, dtype=np.int64)
    parent_ids = np.empty(count, dtype=np.int64)
    for row, line in enumerate(body):
        fields = line.split()
        if len(fields) != 7:
            raise FormatError(f"ACTL: line {row + 2} has {len(fields)} fields")
        try:
            point_id = int(fields[0])
            segment_ids[row] = int(fields[1])
            parent_ids[row] = int(fields[2])
            positions[row] = [float(v) for v in fields[3:6]]
            radii[row] = float(fields[6])
        except ValueError as e:
            raise FormatError(f"ACTL: malformed line {row + 2}: {line!r}") from e
        if point_id != row:
            raise FormatError(
                f"ACTL: point ids must be sequential, line {row + 2} has {point_id}"
            )
    if np.any(parent_ids >= count) or np.any(parent_ids < -1):
        raise FormatError("ACTL: parent id out of range")
    return CenterlineTree(positions, radii, segment_ids, parent_ids)


def write_xyzr(path: str, positions, radii=None) -> None:
    """Write one vessel in the bare `x y z radius` interchange format.

    Radius defaults to 0 when the caller has no estimate.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValueError("positions must be (n, 3)")
    if radii is None:
        radii = np.zeros(positions.shape[0])
    radii = np.asarray(radii, dtype=np.float64)
    lines = []
    for (x, y, z), r in zip(positions, radii):
        lines.append(
            f"{_format_float(x)} {_format_float(y)} "
            f"{_format_float(z)} {_format_float(r)}"
        )
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def read_xyzr(path: str) -> CenterlineTree:
    """Read a single-vessel `x y z radius` file as a one-segment tree."""
    positions = []
    radii = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 4:
                raise FormatError(
                    f"xyzr: line {lineno} has {len(fields)} fields, expected 4"
                )
            try:
                values = [float(v) for v in fields]
            except ValueError as e:
                raise FormatError(f"xyzr: malformed line {lineno}") from e
            positions.append(values[:3])
            radii.append(values[3])
    if not positions:
        raise FormatError("xyzr: empty file")
    n = len(positions)
    return CenterlineTree(
        positions=np.asarray(positions),
        radii=np.asarray(radii),
        segment_ids=np.zeros(n, dtype=np.int64),
        parent_ids=np.arange(-1, n - 1, dtype=np.int64),
    )
