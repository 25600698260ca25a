"""Batch assembly: case-level splits and flag-balanced batch sampling."""

from __future__ import annotations

import numpy as np
import torch

from .formats import AdsFile


def split_by_case(case_ids, val_fraction: float, seed: int = 0):
    """Hold out whole cases for validation; returns (train_rows, val_rows).

    Splitting at the case level keeps augmented samples of one tree from
    leaking across the split.  With a single case (or val_fraction 0) the
    validation set is empty.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    case_ids = np.asarray(case_ids)
    unique = np.unique(case_ids)
    n_val = int(round(val_fraction * unique.size))
    if val_fraction > 0.0 and unique.size > 1:
        n_val = max(n_val, 1)
    n_val = min(n_val, unique.size - 1)
    if n_val <= 0:
        return np.arange(case_ids.size), np.empty(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    val_cases = set(rng.permutation(unique)[:n_val].tolist())
    mask = np.array([cid in val_cases for cid in case_ids])
    return np.flatnonzero(~mask), np.flatnonzero(mask)


class BalancedSampler:
    """Yields index batches with a fixed fraction of flagged samples.

    Flagged rows are drawn with replacement from the flagged pool; the rest
    of each batch comes from a reshuffling without-replacement stream over
    the unflagged rows.  The flagged quota uses error diffusion so the mean
    per-batch fraction equals `fraction` even when fraction * batch_size is
    not an integer.  With fraction None the sampler degrades to plain
    shuffled batches.
    """

    def __init__(self, rows, flags, batch_size: int, fraction=None, seed: int = 0):
        self.rows = np.asarray(rows, dtype=np.int64)
        flags = np.asarray(flags, dtype=bool)
        if self.rows.size == 0:
            raise ValueError("sampler needs at least one row")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if fraction is not None and not 0.0 <= fraction < 1.0:
            raise ValueError("fraction must lie in [0, 1)")
        self.batch_size = batch_size
        self.fraction = fraction
        self.rng = np.random.default_rng(seed)
        self.flagged = self.rows[flags[self.rows]]
        self.unflagged = self.rows[~flags[self.rows]]
        if fraction is not None and fraction > 0.0 and self.flagged.size == 0:
            raise ValueError("no flagged samples to balance with")
        if fraction is not None and self.unflagged.size == 0:
            raise ValueError("no unflagged samples to balance with")
        self._carry = 0.0
        self._stream = np.empty(0, dtype=np.int64)

    @property
    def batches_per_epoch(self) -> int:
        return max(1, -(-self.rows.size // self.batch_size))

    def _take(self, count: int) -> np.ndarray:
        source = self.unflagged if self.fraction is not None else self.rows
        out = []
        while count > 0:
            if self._stream.size == 0:
                self._stream = self.rng.permutation(source)
            grab = min(count, self._stream.size)
            out.append(self._stream[:grab])
            self._stream = self._stream[grab:]
            count -= grab
        return np.concatenate(out)

    def batch(self) -> np.ndarray:
        if self.fraction is None or self.fraction == 0.0:
            return self._take(self.batch_size)
        self._carry += self.fraction * self.batch_size
        quota = int(self._carry)
        self._carry -= quota
        quota = min(quota, self.batch_size)
        flagged = self.flagged[self.rng.integers(self.flagged.size, size=quota)]
        rest = self._take(self.batch_size - quota)
        merged = np.concatenate([flagged, rest])
        return merged[self.rng.permutation(merged.size)]


def patch_tensors(ads: AdsFile, rows) -> tuple[torch.Tensor, torch.Tensor]:
    """Row indices -> (B,1,S,S,S) float32 fine and coarse patch tensors."""
    p1, p2 = ads.patches(rows)
    return (torch.from_numpy(np.ascontiguousarray(p1)).unsqueeze(1),
            torch.from_numpy(np.ascontiguousarray(p2)).unsqueeze(1))
