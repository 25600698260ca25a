"""Dual-resolution patch networks: inference, combined loss, weight files.

Two identical convolutional branches (one per patch resolution) of seven
3x3x3 dilated layers feed a shared head: global average pooling, a linear
map to direction logits with softmax, then two more linear layers ending in
a sigmoid.  The direction-and-bifurcation variant ("dbc") exposes both head
outputs; the stop variant ("stc") exposes only the final sigmoid.  Inference
is numpy-only; training lives in a separate package that consumes the weight
file format defined here.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .container import read_manifest, write_container
from .errors import CompatibilityError, FormatError, ShapeError, VersionError
from .volume import PatchPair

AWT_MAGIC = "AWT"
AWT_VERSION = 1

# Per-layer dilation pattern of each branch; kernel size is 3 throughout.
DILATION_PATTERN = (1, 1, 2, 4, 1, 1, 1)
# Batch-normalization epsilon, fixed so training frameworks can match it.
BN_EPS = 1e-5
# Probability clamp for the binary cross entropy.
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters embedded in every weight file."""

    patch_size: int = 19
    channels: int = 32
    dilations: tuple = DILATION_PATTERN
    n_directions: int = 1000
    hidden: int = 64
    variant: str = "dbc"

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.dilations != DILATION_PATTERN:
            raise ValueError(f"dilations must be {DILATION_PATTERN}")
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and >= 3")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.n_directions < 2:
            raise ValueError("n_directions must be >= 2")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
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


def tensor_specs(arch: ArchConfig):
    """Canonical (name, shape) list; files store tensors in this order."""
    specs = []
    for branch in ("b1", "b2"):
        in_channels = 1
        for layer in range(1, 8):
            specs.append(
                (f"{branch}.conv{layer}.weight", (arch.channels, in_channels, 3, 3, 3))
            )
            specs.append((f"{branch}.conv{layer}.bias", (arch.channels,)))
            for stat in ("scale", "shift", "mean", "var"):
                specs.append((f"{branch}.norm{layer}.{stat}", (arch.channels,)))
            in_channels = arch.channels
    specs.append(("head.direction.weight", (arch.n_directions, 2 * arch.channels)))
    specs.append(("head.direction.bias", (arch.n_directions,)))
    specs.append(("head.patch1.weight", (arch.hidden, arch.n_directions)))
    specs.append(("head.patch1.bias", (arch.hidden,)))
    specs.append(("head.patch2.weight", (1, arch.hidden)))
    specs.append(("head.patch2.bias", (1,)))
    return specs


@dataclass
class Weights:
    """Named float32 tensors validated against an ArchConfig."""

    arch: ArchConfig
    tensors: dict

    def __post_init__(self):
        ordered = {}
        for name, shape in tensor_specs(self.arch):
            if name not in self.tensors:
                raise ShapeError(f"missing tensor {name!r}")
            arr = np.asarray(self.tensors[name], dtype=np.float32)
            if arr.shape != shape:
                raise ShapeError(
                    f"tensor {name!r} has shape {arr.shape}, expected {shape}"
                )
            if not np.isfinite(arr).all():
                raise ValueError(f"tensor {name!r} contains non-finite values")
            ordered[name] = arr
        if len(self.tensors) != len(ordered):
            extra = set(self.tensors) - set(ordered)
            raise ShapeError(f"unexpected tensors: {sorted(extra)}")
        self.tensors = ordered

    @classmethod
    def zeros(cls, arch: ArchConfig) -> "Weights":
        return cls(
            arch=arch,
            tensors={name: np.zeros(shape, np.float32) for name, shape in tensor_specs(arch)},
        )

    @classmethod
    def random(cls, arch: ArchConfig, rng: np.random.Generator, scale: float = 0.1):
        tensors = {}
        for name, shape in tensor_specs(arch):
            if name.endswith(".var"):
                tensors[name] = (0.5 + np.abs(rng.normal(size=shape))).astype(np.float32)
            elif name.endswith(".scale"):
                tensors[name] = (1.0 + scale * rng.normal(size=shape)).astype(np.float32)
            else:
                tensors[name] = (scale * rng.normal(size=shape)).astype(np.float32)
        return cls(arch=arch, tensors=tensors)


@dataclass
class DbcOutput:
    direction: np.ndarray  # (n_directions,) softmax weights
    bifurcation_prob: float


def conv3d(x, kernel, bias=None, dilation: int = 1):
    """Dilated 3x3x3 cross-correlation with size-preserving zero padding."""
    x = np.asarray(x, dtype=np.float32)
    kernel = np.asarray(kernel, dtype=np.float32)
    if x.ndim != 4:
        raise ShapeError("input must be (channels, d, h, w)")
    if kernel.ndim != 5 or kernel.shape[2:] != (3, 3, 3):
        raise ShapeError("kernel must be (out, in, 3, 3, 3)")
    if kernel.shape[1] != x.shape[0]:
        raise ShapeError(
            f"kernel expects {kernel.shape[1]} input channels, got {x.shape[0]}"
        )
    if dilation not in (1, 2, 4):
        raise ValueError("dilation must be 1, 2 or 4")
    cin, d0, d1, d2 = x.shape
    cout = kernel.shape[0]
    p = dilation
    padded = np.zeros((cin, d0 + 2 * p, d1 + 2 * p, d2 + 2 * p), dtype=np.float32)
    padded[:, p : p + d0, p : p + d1, p : p + d2] = x
    columns = np.empty((cin, 27, d0, d1, d2), dtype=np.float32)
    tap = 0
    for a in range(3):
        for b in range(3):
            for c in range(3):
                columns[:, tap] = padded[
                    :, a * p : a * p + d0, b * p : b * p + d1, c * p : c * p + d2
                ]
                tap += 1
    out = kernel.reshape(cout, cin * 27) @ columns.reshape(cin * 27, d0 * d1 * d2)
    out = out.reshape(cout, d0, d1, d2)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float32)
        if bias.shape != (cout,):
            raise ShapeError(f"bias must have shape ({cout},)")
        out += bias[:, None, None, None]
    return out


def bn_inference(x, scale, shift, mean, var, eps: float = BN_EPS):
    """Per-channel affine normalization with frozen statistics."""
    def col(v):
        return np.asarray(v, dtype=np.float32)[:, None, None, None]

    return (x - col(mean)) / np.sqrt(col(var) + eps) * col(scale) + col(shift)


def _check_pair(arch: ArchConfig, pair: PatchPair) -> None:
    expected = (arch.patch_size,) * 3
    if pair.p1.values.shape != expected or pair.p2.values.shape != expected:
        raise ShapeError(
            f"patch pair shape {pair.p1.values.shape}/{pair.p2.values.shape} "
            f"does not match arch patch_size {arch.patch_size}"
        )


def _trunk(weights: Weights, pair: PatchPair) -> np.ndarray:
    """Both branches then channel concatenation and global average pooling."""
    _check_pair(weights.arch, pair)
    t = weights.tensors
    features = []
    for prefix, patch in (("b1", pair.p1), ("b2", pair.p2)):
        x = np.asarray(patch.values, dtype=np.float32)[None]
        for layer, dilation in enumerate(weights.arch.dilations, start=1):
            x = conv3d(
                x,
                t[f"{prefix}.conv{layer}.weight"],
                t[f"{prefix}.conv{layer}.bias"],
                dilation=dilation,
            )
            x = bn_inference(
                x,
                t[f"{prefix}.norm{layer}.scale"],
                t[f"{prefix}.norm{layer}.shift"],
                t[f"{prefix}.norm{layer}.mean"],
                t[f"{prefix}.norm{layer}.var"],
            )
            x = np.maximum(x, 0.0)
        features.append(x)
    stacked = np.concatenate(features, axis=0)
    return stacked.reshape(stacked.shape[0], -1).mean(axis=1).astype(np.float64)


def _heads(weights: Weights, pooled: np.ndarray):
    t = weights.tensors
    logits = t["head.direction.weight"].astype(np.float64) @ pooled
    logits += t["head.direction.bias"]
    shifted = np.exp(logits - logits.max())
    direction = shifted / shifted.sum()
    hidden = t["head.patch1.weight"].astype(np.float64) @ direction
    hidden = np.maximum(hidden + t["head.patch1.bias"], 0.0)
    z = t["head.patch2.weight"].astype(np.float64) @ hidden + t["head.patch2.bias"]
    return direction, float(1.0 / (1.0 + np.exp(-z[0])))


def forward_dbc(weights: Weights, pair: PatchPair) -> DbcOutput:
    """Direction distribution over the grid plus bifurcation probability."""
    if weights.arch.variant != "dbc":
        raise CompatibilityError("weights are not a direction/bifurcation model")
    direction, prob = _heads(weights, _trunk(weights, pair))
    return DbcOutput(direction=direction, bifurcation_prob=prob)


def forward_stc(weights: Weights, pair: PatchPair) -> float:
    """Stop probability; same trunk and head chain, sigmoid output only."""
    if weights.arch.variant != "stc":
        raise CompatibilityError("weights are not a stop model")
    _, prob = _heads(weights, _trunk(weights, pair))
    return prob


def binary_cross_entropy(prob: float, positive: bool) -> float:
    """Binary cross entropy with the probability clamped away from 0 and 1."""
    p = min(max(float(prob), BCE_CLAMP), 1.0 - BCE_CLAMP)
    y = 1.0 if positive else 0.0
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def combined_loss(pred: DbcOutput, label, bif_label: bool, lambda_b: float = 5.0):
    """Direction cross entropy plus weighted bifurcation cross entropy."""
    label = np.asarray(label, dtype=np.float64)
    if label.shape != pred.direction.shape:
        raise ShapeError("label length does not match direction response")
    positive = label > 0.0
    with np.errstate(divide="ignore"):
        ce = float(-np.sum(label[positive] * np.log(pred.direction[positive])))
    return ce + lambda_b * binary_cross_entropy(pred.bifurcation_prob, bif_label)


def save_weights(path: str, weights: Weights) -> None:
    """Write an AWT v1 weight file (packed float32 blob, sha256 checksum)."""
    records = []
    parts = []
    offset = 0
    for name, arr in weights.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        records.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "f32le"}
        )
        parts.append(data)
        offset += len(data)
    blob = b"".join(parts)
    manifest = {
        "format": AWT_MAGIC,
        "version": AWT_VERSION,
        "variant": weights.arch.variant,
        "arch": weights.arch.to_dict(),
        "tensors": records,
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    write_container(path, manifest, [blob])


def load_weights(path: str) -> Weights:
    """Read an AWT v1 file, validating shapes, order and checksum."""
    manifest, offset = read_manifest(path)
    if manifest.get("format") != AWT_MAGIC:
        raise FormatError("AWT: bad format tag")
    if manifest.get("version") != AWT_VERSION:
        raise VersionError(f"AWT: unsupported version {manifest.get('version')!r}")
    try:
        arch = ArchConfig(**manifest["arch"])
        records = list(manifest["tensors"])
        checksum = manifest["checksum"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"AWT: bad or missing manifest field: {e}") from e
    except ValueError as e:
        raise FormatError(f"AWT: invalid architecture: {e}") from e
    if manifest.get("variant") != arch.variant:
        raise FormatError("AWT: variant disagrees with architecture")
    with open(path, "rb") as f:
        f.seek(offset)
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != checksum:
        raise FormatError("AWT: checksum mismatch")
    specs = tensor_specs(arch)
    names = [r.get("name") for r in records]
    if names != [name for name, _ in specs]:
        raise FormatError("AWT: tensor records do not match the canonical order")
    tensors = {}
    for record, (name, shape) in zip(records, specs):
        if record.get("dtype") != "f32le":
            raise FormatError(f"AWT: unsupported dtype for {name!r}")
        recorded = tuple(int(v) for v in record["shape"])
        if recorded != shape:
            raise ShapeError(
                f"AWT: tensor {name!r} has shape {recorded}, expected {shape}"
            )
        count = int(np.prod(shape))
        start = int(record["offset"])
        if start < 0 or start + 4 * count > len(blob):
            raise FormatError(f"AWT: tensor {name!r} exceeds the blob")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensors[name] = arr.reshape(shape).copy()
    return Weights(arch=arch, tensors=tensors)
