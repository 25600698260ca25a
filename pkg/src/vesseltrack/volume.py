"""Scalar volumes, trilinear sampling, patch extraction and AVOL files.

A volume stores float32 intensities on an axis-aligned voxel grid:
``values[ix, iy, iz]`` sits at world position ``origin + spacing * (ix, iy, iz)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, VersionError
from .geometry import EulerRotation, rotation_matrix

AVOL_MAGIC = "AVOL"
AVOL_VERSION = 1

PATCH_SIZE = 19
PATCH_SPACING_FINE = 0.5
PATCH_SPACING_COARSE = 1.0

_OFFSET_CACHE: dict[int, np.ndarray] = {}


@dataclass
class Volume:
    """Axis-aligned scalar volume in world (mm) coordinates."""

    values: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    background: float = 0.0
    normalization: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError("values must be a 3D array")
        self.spacing = np.asarray(self.spacing, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.spacing.shape != (3,) or self.origin.shape != (3,):
            raise ValueError("spacing and origin must be length-3")
        if np.any(self.spacing <= 0):
            raise ValueError("spacing must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin.copy()
        hi = self.origin + self.spacing * (np.array(self.dims) - 1)
        return lo, hi


def trilinear_sample(volume: Volume, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at world points; outside points get background.

    `points` may be a single (3,) point or an (n, 3) stack; output matches.
    A point is outside once it leaves the lattice of voxel centers.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    g = (pts - volume.origin) / volume.spacing
    dims = np.array(volume.dims)
    inside = np.all((g >= 0.0) & (g <= dims - 1), axis=1)

    gc = np.clip(g, 0.0, dims - 1)
    i0 = np.minimum(gc.astype(np.int64), dims - 2)
    f = gc - i0
    v = volume.values
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    c000 = v[x0, y0, z0]
    c100 = v[x0 + 1, y0, z0]
    c010 = v[x0, y0 + 1, z0]
    c110 = v[x0 + 1, y0 + 1, z0]
    c001 = v[x0, y0, z0 + 1]
    c101 = v[x0 + 1, y0, z0 + 1]
    c011 = v[x0, y0 + 1, z0 + 1]
    c111 = v[x0 + 1, y0 + 1, z0 + 1]

    out = (
        c000 * (1 - fx) * (1 - fy) * (1 - fz)
        + c100 * fx * (1 - fy) * (1 - fz)
        + c010 * (1 - fx) * fy * (1 - fz)
        + c110 * fx * fy * (1 - fz)
        + c001 * (1 - fx) * (1 - fy) * fz
        + c101 * fx * (1 - fy) * fz
        + c011 * (1 - fx) * fy * fz
        + c111 * fx * fy * fz
    )
    out = np.where(inside, out, volume.background)
    if np.asarray(points).ndim == 1:
        return float(out[0])
    return out


@dataclass
class Patch:
    """Cubic resampled block cut from a volume around a center point."""

    values: np.ndarray
    spacing: float
    center: np.ndarray
    rotation: EulerRotation


@dataclass
class PatchPair:
    """Fine (0.5 mm) and coarse (1.0 mm) patches around one center."""

    p1: Patch
    p2: Patch


def _patch_offsets(size: int) -> np.ndarray:
    grid = _OFFSET_CACHE.get(size)
    if grid is None:
        half = size // 2
        r = np.arange(size) - half
        gx, gy, gz = np.meshgrid(r, r, r, indexing="ij")
        grid = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(float)
        _OFFSET_CACHE[size] = grid
    return grid


def extract_patch(
    volume: Volume,
    center: np.ndarray,
    spacing: float,
    rotation: EulerRotation = EulerRotation(),
    size: int = PATCH_SIZE,
) -> Patch:
    """Sample a size^3 patch around `center` at isotropic `spacing`.

    The sampling frame is rotated so that a world direction
    rotate_vector(d, rotation) appears along patch direction d; equivalently
    each patch voxel at integer offset o samples the volume at
    center + R^T @ (o * spacing). Labels rotated forward by `rotation`
    therefore stay aligned with the patch content.
    """
    center = np.asarray(center, dtype=float)
    offsets = _patch_offsets(size) * spacing
    world = center + offsets @ rotation_matrix(rotation)  # o @ R == R^T o rows
    values = trilinear_sample(volume, world).reshape(size, size, size)
    return Patch(values=values.astype(np.float32), spacing=spacing, center=center, rotation=rotation)


def extract_patch_pair(
    volume: Volume,
    center: np.ndarray,
    rotation: EulerRotation = EulerRotation(),
    size: int = PATCH_SIZE,
    spacings: tuple[float, float] = (PATCH_SPACING_FINE, PATCH_SPACING_COARSE),
) -> PatchPair:
    """Extract the two-resolution patch pair used by the classifiers."""
    p1 = extract_patch(volume, center, spacings[0], rotation, size)
    p2 = extract_patch(volume, center, spacings[1], rotation, size)
    return PatchPair(p1=p1, p2=p2)


def mip_project(volume: Volume, axis: str) -> np.ndarray:
    """Maximum-intensity projection along 'x', 'y' or 'z'.

    The result keeps the remaining two axes in (x, y, z) order, e.g.
    axis='z' gives out[ix, iy] = max_k values[ix, iy, k].
    """
    try:
        k = "xyz".index(axis)
    except ValueError:
        raise ValueError("axis must be one of 'x', 'y', 'z'") from None
    return volume.values.max(axis=k)


def write_pgm(path: str, image: np.ndarray) -> None:
    """8-bit binary PGM; input is min-max normalized."""
    img = np.asarray(image, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = ((img - lo) * scale).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_avol(path: str, volume: Volume) -> None:
    """Write a volume in the AVOL v1 container."""
    header = (
        f"{AVOL_MAGIC} v{AVOL_VERSION}\n"
        f"dims {volume.dims[0]} {volume.dims[1]} {volume.dims[2]}\n"
        f"spacing {_format_floats(volume.spacing)}\n"
        f"origin {_format_floats(volume.origin)}\n"
        "dtype f32le\n"
        f"normalization {_format_floats(volume.normalization)}\n"
        "\n"
    )
    blob = volume.values.astype("<f4").ravel(order="F").tobytes()
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(blob)


def read_avol(path: str) -> Volume:
    """Read an AVOL v1 file; raises FormatError/VersionError on bad input."""
    with open(path, "rb") as f:
        raw = f.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise FormatError("AVOL: missing blank line after header")
    try:
        lines = raw[:sep].decode("ascii").splitlines()
    except UnicodeDecodeError as e:
        raise FormatError("AVOL: non-ascii header") from e
    if not lines or not lines[0].startswith(AVOL_MAGIC + " "):
        raise FormatError("AVOL: bad magic")
    version = lines[0].split(" ", 1)[1]
    if version != f"v{AVOL_VERSION}":
        raise VersionError(f"AVOL: unsupported version {version!r}")

    fields: dict[str, list[str]] = {}
    for line in lines[1:]:
        parts = line.split()
        if len(parts) < 2:
            raise FormatError(f"AVOL: malformed header line {line!r}")
        fields[parts[0]] = parts[1:]
    try:
        dims = tuple(int(x) for x in fields["dims"])
        spacing = np.array([float(x) for x in fields["spacing"]])
        origin = np.array([float(x) for x in fields["origin"]])
        dtype = fields["dtype"][0]
        norm = tuple(float(x) for x in fields["normalization"])
    except (KeyError, ValueError, IndexError) as e:
        raise FormatError(f"AVOL: bad or missing header field: {e}") from e
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise FormatError("AVOL: dims must be three positive integers")
    if dtype != "f32le":
        raise FormatError(f"AVOL: unsupported dtype {dtype!r}")
    if len(norm) != 2:
        raise FormatError("AVOL: normalization must be offset and scale")

    blob = raw[sep + 2 :]
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(blob) != expected:
        raise FormatError(f"AVOL: payload is {len(blob)} bytes, expected {expected}")
    values = np.frombuffer(blob, dtype="<f4").reshape(dims, order="F")
    return Volume(values=values.copy(), spacing=spacing, origin=origin, normalization=norm)
