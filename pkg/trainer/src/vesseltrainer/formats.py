"""ADS and AWT file I/O implemented from the documented byte layouts.

Both formats share one container: an 8-byte little-endian length, a
canonical JSON manifest (sorted keys, no whitespace), then a raw payload.
ADS payloads are fixed-length float32le sample records; AWT payloads are
the model tensors concatenated in a fixed canonical order with a sha256
checksum in the manifest.  Nothing here imports vesseltrack.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

_PREFIX = struct.Struct("<Q")

ADS_FORMAT = "ADS"
ADS_VERSION = 1
AWT_FORMAT = "AWT"
AWT_VERSION = 1

# The only supported per-layer dilation pattern; kernel size 3 throughout.
DILATIONS = (1, 1, 2, 4, 1, 1, 1)


def write_container(path, manifest: dict, blob: bytes) -> None:
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(len(header)))
        f.write(header)
        f.write(blob)


def read_container(path) -> tuple[dict, int]:
    """Return (manifest, payload byte offset)."""
    with open(path, "rb") as f:
        raw = f.read(_PREFIX.size)
        if len(raw) != _PREFIX.size:
            raise ValueError(f"{path}: missing container length prefix")
        (length,) = _PREFIX.unpack(raw)
        header = f.read(length)
    if len(header) != length:
        raise ValueError(f"{path}: truncated manifest")
    manifest = json.loads(header.decode("utf-8"))
    if not isinstance(manifest, dict):
        raise ValueError(f"{path}: manifest must be a JSON object")
    return manifest, _PREFIX.size + length


@dataclass(frozen=True)
class ArchSpec:
    """Architecture block embedded in AWT manifests."""

    patch_size: int = 19
    channels: int = 32
    dilations: tuple = DILATIONS
    n_directions: int = 1000
    hidden: int = 64
    variant: str = "dbc"

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.dilations != DILATIONS:
            raise ValueError(f"dilations must be {DILATIONS}")
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and >= 3")
        if min(self.channels, self.hidden) < 1 or self.n_directions < 2:
            raise ValueError("channels, hidden and n_directions must be positive")
        if self.variant not in ("dbc", "stc"):
            raise ValueError("variant must be 'dbc' or 'stc'")

    def to_dict(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "channels": self.channels,
            "dilations": list(self.dilations),
            "n_directions": self.n_directions,
            "hidden": self.hidden,
            "variant": self.variant,
        }


def tensor_order(arch: ArchSpec) -> list:
    """Canonical (name, shape) sequence of an AWT payload."""
    order = []
    for branch in ("b1", "b2"):
        cin = 1
        for layer in range(1, 8):
            order.append((f"{branch}.conv{layer}.weight", (arch.channels, cin, 3, 3, 3)))
            order.append((f"{branch}.conv{layer}.bias", (arch.channels,)))
            for stat in ("scale", "shift", "mean", "var"):
                order.append((f"{branch}.norm{layer}.{stat}", (arch.channels,)))
            cin = arch.channels
    order.append(("head.direction.weight", (arch.n_directions, 2 * arch.channels)))
    order.append(("head.direction.bias", (arch.n_directions,)))
    order.append(("head.patch1.weight", (arch.hidden, arch.n_directions)))
    order.append(("head.patch1.bias", (arch.hidden,)))
    order.append(("head.patch2.weight", (1, arch.hidden)))
    order.append(("head.patch2.bias", (1,)))
    return order


def write_awt(path, arch: ArchSpec, tensors: dict) -> None:
    """Write weights in the AWT v1 layout; tensors keyed by canonical name."""
    order = tensor_order(arch)
    missing = [name for name, _ in order if name not in tensors]
    extra = set(tensors) - {name for name, _ in order}
    if missing or extra:
        raise ValueError(f"tensor set mismatch: missing {missing}, extra {sorted(extra)}")
    records = []
    parts = []
    offset = 0
    for name, shape in order:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if arr.shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}: non-finite values")
        data = arr.tobytes()
        records.append({"name": name, "shape": list(shape), "offset": offset,
                        "dtype": "f32le"})
        parts.append(data)
        offset += len(data)
    blob = b"".join(parts)
    manifest = {
        "format": AWT_FORMAT,
        "version": AWT_VERSION,
        "variant": arch.variant,
        "arch": arch.to_dict(),
        "tensors": records,
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    write_container(path, manifest, blob)


def read_awt(path) -> tuple[ArchSpec, dict]:
    """Read an AWT v1 file back into (arch, name -> float32 array)."""
    manifest, offset = read_container(path)
    if manifest.get("format") != AWT_FORMAT:
        raise ValueError(f"{path}: not an AWT file")
    if manifest.get("version") != AWT_VERSION:
        raise ValueError(f"{path}: unsupported AWT version {manifest.get('version')!r}")
    arch = ArchSpec(**manifest["arch"])
    with open(path, "rb") as f:
        f.seek(offset)
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != manifest["checksum"]:
        raise ValueError(f"{path}: checksum mismatch")
    tensors = {}
    expected = tensor_order(arch)
    records = manifest["tensors"]
    if [(r["name"], tuple(r["shape"])) for r in records] != expected:
        raise ValueError(f"{path}: tensor records are not in canonical order")
    for record in records:
        shape = tuple(record["shape"])
        count = int(np.prod(shape))
        start = record["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensors[record["name"]] = arr.reshape(shape).copy()
    return arch, tensors


@dataclass
class AdsFile:
    """Memory-mapped ADS v1 dataset."""

    kind: str
    patch_size: int
    patch_spacings: tuple
    n_directions: int
    flags: np.ndarray
    case_ids: list
    rng_seed: int
    records: np.ndarray = field(repr=False)

    @property
    def n_samples(self) -> int:
        return self.records.shape[0]

    @property
    def patch_values(self) -> int:
        return self.patch_size**3

    def patches(self, rows) -> tuple[np.ndarray, np.ndarray]:
        """Fine and coarse patch stacks for the given row indices."""
        rows = np.asarray(rows)
        count = self.patch_values
        side = (self.patch_size,) * 3
        block = np.asarray(self.records[rows])
        p1 = block[:, :count].reshape(len(rows), *side)
        p2 = block[:, count : 2 * count].reshape(len(rows), *side)
        return p1, p2

    def labels(self, rows) -> np.ndarray:
        """Direction label distributions (direction datasets only)."""
        if self.kind != "direction":
            raise ValueError("labels are only stored in direction datasets")
        rows = np.asarray(rows)
        return np.asarray(self.records[rows][:, 2 * self.patch_values : -1])

    def targets(self, rows) -> np.ndarray:
        """Final-column 0/1 targets: bifurcation flag or stop flag."""
        rows = np.asarray(rows)
        return np.asarray(self.records[rows][:, -1])


def read_ads(path) -> AdsFile:
    manifest, offset = read_container(path)
    if manifest.get("format") != ADS_FORMAT:
        raise ValueError(f"{path}: not an ADS file")
    if manifest.get("version") != ADS_VERSION:
        raise ValueError(f"{path}: unsupported ADS version {manifest.get('version')!r}")
    kind = manifest["kind"]
    if kind not in ("direction", "stop"):
        raise ValueError(f"{path}: unknown sample kind {kind!r}")
    n = int(manifest["n_samples"])
    patch_size = int(manifest["patch_size"])
    n_directions = int(manifest["n_directions"])
    width = 2 * patch_size**3 + 1
    if kind == "direction":
        width += n_directions
    records = np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=(n, width))
    flags = np.asarray(manifest["flags"], dtype=bool)
    if flags.shape != (n,):
        raise ValueError(f"{path}: flags length disagrees with n_samples")
    return AdsFile(
        kind=kind,
        patch_size=patch_size,
        patch_spacings=tuple(manifest["patch_spacings"]),
        n_directions=n_directions,
        flags=flags,
        case_ids=list(manifest["case_ids"]),
        rng_seed=int(manifest.get("rng_seed", 0)),
        records=records,
    )


def fibonacci_directions(n: int) -> np.ndarray:
    """The (n, 3) spherical lattice that direction labels index into.

    Point i has z = 1 - (2i + 1)/n and azimuth 2*pi*i/phi with the golden
    ratio phi; this is the mirror of the textbook golden-angle spiral, so
    the sign of the azimuth matters for interoperability.
    """
    if n < 2:
        raise ValueError("need at least 2 directions")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    i = np.arange(n, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / n
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    azimuth = 2.0 * np.pi * i / phi
    return np.stack([rho * np.cos(azimuth), rho * np.sin(azimuth), z], axis=1)
