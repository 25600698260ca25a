"""Training-sample construction: sphere-exit labels, stop patches, datasets.

Direction labels follow the sphere-exit construction: intersect the local
centerline with a ball of radius R around a query center and encode the unit
directions of the outward crossings on the direction grid.  Stop samples sit
strictly beyond segment endpoints.  build_dataset assembles both kinds into
ADS v1 files with bifurcation oversampling left recorded per sample.
"""

from __future__ import annotations

import os
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .container import read_manifest, write_container
from .errors import FormatError, NoExitError, VersionError
from .geometry import (
    EulerRotation,
    IDENTITY_ROTATION,
    angle_between,
    normalize,
    rotate_vector,
)
from .sphere import SphereGrid, build_fibonacci_grid, encode_directions
from .tree import CenterlineTree
from .volume import (
    PATCH_SIZE,
    PATCH_SPACING_COARSE,
    PATCH_SPACING_FINE,
    Patch,
    PatchPair,
    Volume,
    extract_patch_pair,
)

ADS_MAGIC = "ADS"
ADS_VERSION = 1

# Ball radius for exit detection, mm.
SPHERE_RADIUS = 1.5
# Crossings of the same segment closer than this are one exit, degrees.
DEDUP_ANGLE_DEG = 5.0
# Weight of the translation offset in the pseudo center.
PSEUDO_CENTER_WEIGHT = 0.2
# Stop samples lie at most this far beyond an endpoint, mm.
STOP_MAX_BEYOND = 5.0

_PATCH_VALUES = PATCH_SIZE**3


@dataclass
class DirectionSample:
    pair: PatchPair
    label: np.ndarray  # (n_directions,) weights summing to 1
    bifurcation: bool
    point_index: int
    delta: np.ndarray  # applied translation, mm
    rotation: EulerRotation


@dataclass
class StopSample:
    pair: PatchPair
    stop: bool
    center: np.ndarray


def sphere_exits(tree: CenterlineTree, center, radius: float = SPHERE_RADIUS):
    """Unit directions where the local centerline leaves a ball around center.

    Only the chain-connected piece of the tree inside the ball contributes:
    starting from the tree point nearest the center, the walk expands over
    parent links restricted to in-ball points, and every edge from an in-ball
    point to an out-of-ball neighbour yields one interpolated boundary
    crossing.  Crossings of the same segment closer than 5 degrees collapse
    into one exit (a crossing sitting near a segment joint would otherwise be
    counted twice); crossings of different segments are always kept, since a
    bifurcation apex close to the boundary legitimately produces nearby exits.
    """
    center = np.asarray(center, dtype=np.float64)
    seed_dist, seed = tree.kdtree.query(center)
    if seed_dist > radius:
        raise NoExitError(
            f"center is {seed_dist:.3f} mm from the nearest centerline point, "
            f"beyond the {radius} mm ball"
        )
    in_ball = set(tree.kdtree.query_ball_point(center, radius))
    component = []
    seen = {int(seed)}
    queue = deque([int(seed)])
    while queue:
        i = queue.popleft()
        component.append(i)
        for j in tree.adjacency[i]:
            if j in in_ball and j not in seen:
                seen.add(j)
                queue.append(j)
    component.sort()
    crossings = []  # (owning segment id, unit exit direction)
    for i in component:
        a = tree.positions[i] - center
        for j in sorted(tree.adjacency[i]):
            if j in in_ball:
                continue
            b = tree.positions[j] - center
            v = b - a
            vv = float(v @ v)
            av = float(a @ v)
            disc = av * av - vv * (float(a @ a) - radius * radius)
            t = (-av + np.sqrt(max(disc, 0.0))) / vv
            exit_vec = a + t * v
            direction = exit_vec / np.linalg.norm(exit_vec)
            if tree.parent_ids[j] == i:
                segment = int(tree.segment_ids[j])
            else:
                segment = int(tree.segment_ids[i])
            crossings.append((segment, direction))
    kept = []
    for segment, direction in crossings:
        duplicate = any(
            seg2 == segment and angle_between(direction, dir2) < DEDUP_ANGLE_DEG
            for seg2, dir2 in kept
        )
        if not duplicate:
            kept.append((segment, direction))
    if not kept:
        raise NoExitError("centerline does not cross the ball boundary")
    return np.stack([direction for _, direction in kept])


def make_direction_sample(
    volume: Volume,
    tree: CenterlineTree,
    point_index: int,
    grid: SphereGrid,
    lambda_t: float = 0.0,
    rotation: EulerRotation = EulerRotation(),
    delta_dir=None,
    sphere_radius: float = SPHERE_RADIUS,
) -> DirectionSample:
    """Build one direction sample with translation/rotation augmentation.

    The patch is extracted at the translated center c_p + delta with
    delta = lambda_t * radius * delta_dir, while exits are computed at the
    pseudo center c_p + 0.2 * delta, pulled back toward the true centerline
    so the label still points along the vessel.  Exit directions are rotated
    with the patch before encoding.
    """
    if not 0.0 <= lambda_t <= 1.0:
        raise ValueError("lambda_t must lie in [0, 1]")
    point = tree.positions[point_index]
    radius = float(tree.radii[point_index])
    if lambda_t > 0.0:
        if delta_dir is None:
            raise ValueError("delta_dir is required when lambda_t > 0")
        delta = lambda_t * radius * normalize(np.asarray(delta_dir, dtype=np.float64))
    else:
        delta = np.zeros(3)
    pseudo_center = point + PSEUDO_CENTER_WEIGHT * delta
    exits = sphere_exits(tree, pseudo_center, sphere_radius)
    label = encode_directions(grid, rotate_vector(exits, rotation))
    pair = extract_patch_pair(volume, point + delta, rotation)
    return DirectionSample(
        pair=pair,
        label=label,
        bifurcation=exits.shape[0] == 3,
        point_index=int(point_index),
        delta=delta,
        rotation=rotation,
    )


def make_stop_samples(
    volume: Volume,
    tree: CenterlineTree,
    per_endpoint: int,
    rng: np.random.Generator,
):
    """Stop samples beyond each leaf plus normal samples at interior points.

    Stop centers sit at endpoint + t * d for t uniform in (0, 5] mm, where d
    continues the leaf's last chain step.  Every non-leaf centerline point
    contributes one normal sample at its own position, so the two classes are
    disjoint in center location by construction.
    """
    if per_endpoint < 0:
        raise ValueError("per_endpoint must be >= 0")
    samples = []
    for leaf in tree.leaves:
        pen = int(tree.parent_ids[leaf])
        if pen < 0 or tree.segment_ids[pen] != tree.segment_ids[leaf]:
            warnings.warn(
                f"leaf point {int(leaf)} has a single-point segment; skipped"
            )
            continue
        direction = normalize(tree.positions[leaf] - tree.positions[pen])
        for _ in range(per_endpoint):
            t = STOP_MAX_BEYOND * (1.0 - rng.random())  # uniform in (0, 5]
            center = tree.positions[leaf] + t * direction
            samples.append(
                StopSample(
                    pair=extract_patch_pair(volume, center),
                    stop=True,
                    center=center,
                )
            )
    leaf_set = set(tree.leaves.tolist())
    for i in range(tree.n_points):
        if i in leaf_set:
            continue
        samples.append(
            StopSample(
                pair=extract_patch_pair(volume, tree.positions[i]),
                stop=False,
                center=tree.positions[i].copy(),
            )
        )
    return samples


@dataclass(frozen=True)
class LabelingConfig:
    sphere_radius: float = SPHERE_RADIUS
    grid_size: int = 1000
    bifurcation_fraction: float = 0.2
    stops_per_endpoint: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.sphere_radius <= 0.0:
            raise ValueError("sphere_radius must be > 0")
        if self.grid_size < 100:
            raise ValueError("grid_size must be >= 100")
        if not (0.0 <= self.bifurcation_fraction < 1.0):
            raise ValueError("bifurcation_fraction must lie in [0, 1)")
        if self.stops_per_endpoint < 0:
            raise ValueError("stops_per_endpoint must be >= 0")


@dataclass
class _DirectionPlan:
    case_index: int
    point_index: int
    delta: np.ndarray
    rotation: EulerRotation
    label: np.ndarray
    bifurcation: bool


def _plan_direction_sample(tree, point_index, grid, cfg, rng):
    lambda_t = rng.random()
    delta_dir = normalize(rng.normal(size=3))
    angles = rng.uniform(-np.pi, np.pi, size=3)
    rotation = EulerRotation(*angles)
    delta = lambda_t * float(tree.radii[point_index]) * delta_dir
    pseudo_center = tree.positions[point_index] + PSEUDO_CENTER_WEIGHT * delta
    exits = sphere_exits(tree, pseudo_center, cfg.sphere_radius)
    label = encode_directions(grid, rotate_vector(exits, rotation)).astype(np.float32)
    return _DirectionPlan(
        case_index=-1,
        point_index=int(point_index),
        delta=delta,
        rotation=rotation,
        label=label,
        bifurcation=exits.shape[0] == 3,
    )


def build_dataset(cases, cfg: LabelingConfig, direction_path, stop_path, case_ids=None):
    """Assemble direction and stop datasets over (volume, tree) cases.

    Emits two ADS v1 files.  Direction samples cover every centerline point
    once (uniform along the 0.5 mm resampling) with random translation and
    rotation augmentation; extra samples centered on bifurcation points are
    appended with replacement until the flagged fraction reaches the
    configured target.  Identical inputs and seed yield byte-identical files.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("at least one case is required")
    if case_ids is None:
        case_ids = [f"case{i:03d}" for i in range(len(cases))]
    if len(case_ids) != len(cases):
        raise ValueError("case_ids must match cases")
    grid = build_fibonacci_grid(cfg.grid_size)
    rng = np.random.default_rng(cfg.rng_seed)
    recorded = []

    plans = []
    bif_pool = []
    for ci, (volume, tree) in enumerate(cases):
        valid = 0
        for pi in range(tree.n_points):
            try:
                plan = _plan_direction_sample(tree, pi, grid, cfg, rng)
            except NoExitError:
                continue
            plan.case_index = ci
            plans.append(plan)
            valid += 1
            if plan.bifurcation:
                bif_pool.append((ci, pi))
        if valid == 0:
            raise ValueError(f"case {case_ids[ci]!r} produced no valid samples")

    if cfg.bifurcation_fraction > 0.0:
        if not bif_pool:
            message = "no bifurcation samples available; fraction target skipped"
            warnings.warn(message)
            recorded.append(message)
        else:
            n_bif = sum(p.bifurcation for p in plans)
            guard = 10 * len(plans)
            while n_bif < cfg.bifurcation_fraction * len(plans) and guard > 0:
                ci, pi = bif_pool[int(rng.integers(len(bif_pool)))]
                plan = _plan_direction_sample(cases[ci][1], pi, grid, cfg, rng)
                plan.case_index = ci
                plans.append(plan)
                n_bif += plan.bifurcation
                guard -= 1
            if guard == 0:
                message = "bifurcation oversampling hit its iteration guard"
                warnings.warn(message)
                recorded.append(message)

    # Stop-sample plan: (case, center, stop flag); rotations stay identity.
    stop_plans = []
    for ci, (volume, tree) in enumerate(cases):
        for leaf in tree.leaves:
            pen = int(tree.parent_ids[leaf])
            if pen < 0 or tree.segment_ids[pen] != tree.segment_ids[leaf]:
                message = (
                    f"case {case_ids[ci]!r}: leaf point {int(leaf)} has a "
                    "single-point segment; skipped"
                )
                warnings.warn(message)
                recorded.append(message)
                continue
            direction = normalize(tree.positions[leaf] - tree.positions[pen])
            for _ in range(cfg.stops_per_endpoint):
                t = STOP_MAX_BEYOND * (1.0 - rng.random())
                stop_plans.append((ci, tree.positions[leaf] + t * direction, True))
        leaf_set = set(tree.leaves.tolist())
        for i in range(tree.n_points):
            if i not in leaf_set:
                stop_plans.append((ci, tree.positions[i].copy(), False))

    base = {
        "format": ADS_MAGIC,
        "version": ADS_VERSION,
        "patch_size": PATCH_SIZE,
        "patch_spacings": [PATCH_SPACING_FINE, PATCH_SPACING_COARSE],
        "rng_seed": int(cfg.rng_seed),
        "warnings": recorded,
    }
    direction_manifest = dict(
        base,
        kind="direction",
        n_samples=len(plans),
        n_directions=int(cfg.grid_size),
        flags=[int(p.bifurcation) for p in plans],
        case_ids=[case_ids[p.case_index] for p in plans],
    )

    def direction_rows():
        for plan in plans:
            volume, tree = cases[plan.case_index]
            center = tree.positions[plan.point_index] + plan.delta
            pair = extract_patch_pair(volume, center, plan.rotation)
            row = np.empty(2 * _PATCH_VALUES + cfg.grid_size + 1, dtype="<f4")
            row[:_PATCH_VALUES] = pair.p1.values.ravel()
            row[_PATCH_VALUES : 2 * _PATCH_VALUES] = pair.p2.values.ravel()
            row[2 * _PATCH_VALUES : -1] = plan.label
            row[-1] = 1.0 if plan.bifurcation else 0.0
            yield row.tobytes()

    write_container(direction_path, direction_manifest, direction_rows())

    stop_manifest = dict(
        base,
        kind="stop",
        n_samples=len(stop_plans),
        n_directions=0,
        flags=[int(stop) for _, _, stop in stop_plans],
        case_ids=[case_ids[ci] for ci, _, _ in stop_plans],
    )

    def stop_rows():
        for ci, center, stop in stop_plans:
            volume = cases[ci][0]
            pair = extract_patch_pair(volume, center)
            row = np.empty(2 * _PATCH_VALUES + 1, dtype="<f4")
            row[:_PATCH_VALUES] = pair.p1.values.ravel()
            row[_PATCH_VALUES : 2 * _PATCH_VALUES] = pair.p2.values.ravel()
            row[-1] = 1.0 if stop else 0.0
            yield row.tobytes()

    write_container(stop_path, stop_manifest, stop_rows())

    n_bif = sum(p.bifurcation for p in plans)
    return {
        "direction_samples": len(plans),
        "stop_samples": len(stop_plans),
        "bifurcation_fraction": n_bif / len(plans),
        "warnings": recorded,
    }


@dataclass
class AdsDataset:
    """Loaded ADS v1 dataset; records stay memory-mapped until sliced."""

    kind: str
    patch_size: int
    patch_spacings: tuple
    n_directions: int
    flags: np.ndarray
    case_ids: list
    rng_seed: int
    warnings: list
    records: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.records.shape[0]

    def patch_pair(self, i: int) -> PatchPair:
        """Sample patches as a PatchPair; the sampling center and rotation
        are not stored, so the metadata fields are neutral."""
        size = self.patch_size
        count = size**3
        p1 = np.asarray(self.records[i, :count]).reshape(size, size, size)
        p2 = np.asarray(self.records[i, count : 2 * count]).reshape(size, size, size)
        center = np.zeros(3)
        return PatchPair(
            p1=Patch(values=p1, spacing=self.patch_spacings[0], center=center,
                     rotation=IDENTITY_ROTATION),
            p2=Patch(values=p2, spacing=self.patch_spacings[1], center=center,
                     rotation=IDENTITY_ROTATION),
        )

    def label(self, i: int):
        if self.kind != "direction":
            return None
        return np.asarray(self.records[i, 2 * self.patch_size**3 : -1])

    def flag(self, i: int) -> bool:
        return bool(self.flags[i])


def read_ads(path: str, mmap: bool = True) -> AdsDataset:
    """Open an ADS v1 file; raises FormatError/VersionError on bad input."""
    manifest, offset = read_manifest(path)
    if manifest.get("format") != ADS_MAGIC:
        raise FormatError("ADS: bad format tag")
    if manifest.get("version") != ADS_VERSION:
        raise VersionError(f"ADS: unsupported version {manifest.get('version')!r}")
    try:
        kind = manifest["kind"]
        n = int(manifest["n_samples"])
        patch_size = int(manifest["patch_size"])
        spacings = tuple(float(s) for s in manifest["patch_spacings"])
        n_directions = int(manifest["n_directions"])
        flags = np.asarray(manifest["flags"], dtype=bool)
        case_ids = list(manifest["case_ids"])
        rng_seed = int(manifest["rng_seed"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"ADS: bad or missing manifest field: {e}") from e
    if kind == "direction":
        record = 2 * patch_size**3 + n_directions + 1
    elif kind == "stop":
        record = 2 * patch_size**3 + 1
    else:
        raise FormatError(f"ADS: unknown dataset kind {kind!r}")
    if flags.shape != (n,) or len(case_ids) != n:
        raise FormatError("ADS: flags/case_ids length does not match n_samples")
    expected = offset + 4 * n * record
    actual = os.path.getsize(path)
    if actual != expected:
        raise FormatError(f"ADS: payload is {actual - offset} bytes, expected {4 * n * record}")
    if mmap:
        records = np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=(n, record))
    else:
        with open(path, "rb") as f:
            f.seek(offset)
            records = np.frombuffer(f.read(), dtype="<f4").reshape(n, record).copy()
    return AdsDataset(
        kind=kind,
        patch_size=patch_size,
        patch_spacings=spacings,
        n_directions=n_directions,
        flags=flags,
        case_ids=case_ids,
        rng_seed=rng_seed,
        warnings=list(manifest.get("warnings", [])),
        records=records,
    )
