"""Breadth-first centerline tracking driven by direction classification.

Seeds enter a FIFO queue. Each popped entry commits its point, queries a
predictor for a direction response plus stop and bifurcation probabilities,
smooths the response, and pushes one step-length candidate per surviving
peak. A per-chain counter increments on weak evidence (high stop probability
or high direction entropy) and kills the chain once it exceeds its limit;
a single confident query resets it. Candidates near already-committed points
are discarded both when pushed and when popped, which prevents backward
steps and duplicate coverage when two fronts meet.
"""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import CompatibilityError, NoExitError
from .labeling import SPHERE_RADIUS, sphere_exits
from .network import Weights, forward_dbc, forward_stc
from .sphere import (
    SphereGrid,
    detect_peaks,
    encode_directions,
    nearest_grid_index,
    normalized_entropy,
    smooth_response,
)
from .tree import CenterlineTree
from .volume import Volume, extract_patch_pair

# Probabilities emitted by the reference-tree predictor: confident when the
# geometry supports the event, quiet otherwise.
ORACLE_CONFIDENT = 0.9
ORACLE_QUIET = 0.1


@dataclass(frozen=True)
class TrackerConfig:
    """Step, stopping and peak-selection parameters of the tracker."""

    step_length: float = 1.0
    entropy_max: float = 0.8
    stop_prob_max: float = 0.3
    stop_counter_max: int = 3
    revisit_factor: float = 0.5
    max_points: int = 20000
    smoothing_sigma_deg: float = 7.0
    bifurcation_threshold: float = 0.5

    def __post_init__(self):
        if self.step_length <= 0:
            raise ValueError("step_length must be positive")
        if not 0.0 < self.entropy_max <= 1.0:
            raise ValueError("entropy_max must be in (0, 1]")
        if not 0.0 < self.stop_prob_max < 1.0:
            raise ValueError("stop_prob_max must be in (0, 1)")
        if self.stop_counter_max < 0:
            raise ValueError("stop_counter_max must be >= 0")
        if self.revisit_factor < 0:
            raise ValueError("revisit_factor must be >= 0")
        if self.max_points < 1:
            raise ValueError("max_points must be >= 1")
        if self.smoothing_sigma_deg <= 0:
            raise ValueError("smoothing_sigma_deg must be positive")
        if not 0.0 < self.bifurcation_threshold < 1.0:
            raise ValueError("bifurcation_threshold must be in (0, 1)")

    @property
    def revisit_radius(self) -> float:
        return self.revisit_factor * self.step_length


@dataclass
class Prediction:
    """One predictor query: grid response plus event probabilities."""

    response: np.ndarray
    stop_prob: float
    bifurcation_prob: float


class OraclePredictor:
    """Geometric stand-in for the networks, built from a reference tree.

    The direction response encodes the sphere exits of the reference
    centerlines around the query point. The stop probability is confident
    once the query drifts further from the tree than the local annotated
    radius, and the bifurcation probability is confident exactly when three
    exits are visible.
    """

    def __init__(self, tree: CenterlineTree, grid: SphereGrid, sphere_radius: float = SPHERE_RADIUS):
        self.tree = tree
        self.grid = grid
        self.sphere_radius = float(sphere_radius)

    def predict(self, point) -> Prediction:
        point = np.asarray(point, dtype=float)
        dist, idx = self.tree.kdtree.query(point)
        try:
            exits = sphere_exits(self.tree, point, self.sphere_radius)
            response = encode_directions(self.grid, exits)
            n_exits = len(exits)
        except NoExitError:
            response = np.full(len(self.grid), 1.0 / len(self.grid))
            n_exits = 0
        stop = ORACLE_CONFIDENT if dist > self.tree.radii[idx] else ORACLE_QUIET
        bif = ORACLE_CONFIDENT if n_exits == 3 else ORACLE_QUIET
        return Prediction(response=response, stop_prob=stop, bifurcation_prob=bif)


class NetworkPredictor:
    """Runs the direction and stop networks on patch pairs from a volume."""

    def __init__(
        self,
        volume: Volume,
        grid: SphereGrid,
        direction_weights: Weights,
        stop_weights: Weights,
    ):
        if direction_weights.arch.variant != "dbc":
            raise CompatibilityError("direction weights must use the 'dbc' variant")
        if stop_weights.arch.variant != "stc":
            raise CompatibilityError("stop weights must use the 'stc' variant")
        if direction_weights.arch.n_directions != len(grid):
            raise CompatibilityError(
                f"weights expect {direction_weights.arch.n_directions} directions, "
                f"tracker grid has {len(grid)}"
            )
        if stop_weights.arch.n_directions != len(grid):
            raise CompatibilityError(
                f"stop weights expect {stop_weights.arch.n_directions} directions, "
                f"tracker grid has {len(grid)}"
            )
        if direction_weights.arch.patch_size != stop_weights.arch.patch_size:
            raise CompatibilityError("direction and stop weights disagree on patch size")
        self.volume = volume
        self.grid = grid
        self.direction_weights = direction_weights
        self.stop_weights = stop_weights

    def predict(self, point) -> Prediction:
        pair = extract_patch_pair(
            self.volume,
            np.asarray(point, dtype=float),
            size=self.direction_weights.arch.patch_size,
        )
        out = forward_dbc(self.direction_weights, pair)
        stop = forward_stc(self.stop_weights, pair)
        return Prediction(
            response=out.direction, stop_prob=stop, bifurcation_prob=out.bifurcation_prob
        )


class _RevisitIndex:
    """Uniform-grid hash for radius queries against committed points."""

    def __init__(self, radius: float):
        self.radius = float(radius)
        self.cell = self.radius if self.radius > 0 else 1.0
        self.buckets: dict = {}

    def _key(self, point):
        return tuple(int(v) for v in np.floor(point / self.cell))

    def add(self, point) -> None:
        if self.radius <= 0:
            return
        self.buckets.setdefault(self._key(point), []).append(point)

    def near(self, point) -> bool:
        if self.radius <= 0:
            return False
        kx, ky, kz = self._key(point)
        r2 = self.radius * self.radius
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for other in self.buckets.get((kx + dx, ky + dy, kz + dz), ()):
                        delta = point - other
                        if float(delta @ delta) <= r2:
                            return True
        return False


@dataclass
class _Entry:
    point: np.ndarray
    segment: int
    parent: int
    counter: int
    prev_dir: np.ndarray | None


@dataclass
class TrackResult:
    tree: CenterlineTree
    queries: int
    diagnostics: list | None


def track(
    predictor,
    seeds,
    grid: SphereGrid,
    config: TrackerConfig | None = None,
    threads: int = 1,
    collect_diagnostics: bool = False,
) -> TrackResult:
    """Track centerlines from seed points until every chain terminates.

    The queue is consumed in rounds: all entries currently queued are
    filtered and committed sequentially, their predictions are evaluated
    (in a thread pool when `threads` > 1; the output is identical for any
    thread count), and the resulting candidates are pushed for the next
    round. Returns the tracked tree with zero radii.
    """
    if config is None:
        config = TrackerConfig()
    if threads < 1:
        raise ValueError("threads must be >= 1")
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    if seeds.ndim != 2 or seeds.shape[1] != 3 or len(seeds) == 0:
        raise ValueError("seeds must be an (n, 3) array with n >= 1")

    positions: list = []
    segment_ids: list = []
    parent_ids: list = []
    diagnostics: list | None = [] if collect_diagnostics else None
    revisit = _RevisitIndex(config.revisit_radius)
    queue: deque = deque()
    next_segment = 0
    for seed in seeds:
        queue.append(_Entry(seed.copy(), next_segment, -1, 0, None))
        next_segment += 1

    n_queries = 0
    capped = False
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        while queue and not capped:
            round_entries = list(queue)
            queue.clear()

            committed = []
            for entry in round_entries:
                if entry.counter > config.stop_counter_max:
                    continue
                if revisit.near(entry.point):
                    continue
                if len(positions) >= config.max_points:
                    capped = True
                    break
                index = len(positions)
                positions.append(entry.point)
                segment_ids.append(entry.segment)
                parent_ids.append(entry.parent)
                revisit.add(entry.point)
                committed.append((entry, index))

            points = [entry.point for entry, _ in committed]
            if pool is not None:
                predictions = list(pool.map(predictor.predict, points))
            else:
                predictions = [predictor.predict(p) for p in points]
            n_queries += len(predictions)

            for (entry, index), pred in zip(committed, predictions):
                smoothed = smooth_response(grid, pred.response, config.smoothing_sigma_deg)
                weak = (
                    pred.stop_prob > config.stop_prob_max
                    or normalized_entropy(smoothed) > config.entropy_max
                )
                counter = entry.counter + 1 if weak else 0
                peaks = detect_peaks(
                    grid,
                    smoothed,
                    prev_dir=entry.prev_dir,
                    bifurcation=pred.bifurcation_prob > config.bifurcation_threshold,
                )
                candidates = []
                for direction in peaks:
                    # Constrained argmax can land on a zero-mass grid point;
                    # such peaks carry no evidence and are not followed.
                    if smoothed[nearest_grid_index(grid, direction)] <= 0.0:
                        continue
                    target = entry.point + config.step_length * direction
                    if revisit.near(target):
                        continue
                    candidates.append((target, direction))
                if diagnostics is not None:
                    diagnostics.append(
                        {
                            "index": index,
                            "segment": entry.segment,
                            "parent": entry.parent,
                            "point": [float(v) for v in entry.point],
                            "entropy": normalized_entropy(smoothed),
                            "stop_prob": float(pred.stop_prob),
                            "bifurcation_prob": float(pred.bifurcation_prob),
                            "stop_counter": counter,
                            "n_candidates": len(candidates),
                        }
                    )
                if not candidates:
                    continue
                if len(candidates) == 1:
                    target, direction = candidates[0]
                    queue.append(_Entry(target, entry.segment, index, counter, direction))
                else:
                    # A split ends the current segment; each branch becomes
                    # a new segment rooted at the committed point.
                    for target, direction in candidates:
                        queue.append(_Entry(target, next_segment, index, counter, direction))
                        next_segment += 1
    finally:
        if pool is not None:
            pool.shutdown()

    n = len(positions)
    tree = CenterlineTree(
        positions=np.asarray(positions, dtype=float).reshape(n, 3),
        radii=np.zeros(n),
        segment_ids=np.asarray(segment_ids, dtype=np.int64),
        parent_ids=np.asarray(parent_ids, dtype=np.int64),
    )
    return TrackResult(tree=tree, queries=n_queries, diagnostics=diagnostics)
