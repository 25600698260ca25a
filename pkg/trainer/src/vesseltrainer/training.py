"""Training loops for the direction/bifurcation and stop models.

Both variants share one loop: flag-balanced mini-batches, Adam, per-epoch
validation on held-out cases, early stopping on the validation loss, and
export of the best epoch's weights to an AWT file.

Two dataset-side tricks make small corpora trainable without touching the
stored records.  Patches can be centre-cropped on the fly (`crop_size`):
because stored patches are sampled on symmetric offsets around the query
point, the central k-cube of a stored patch is exactly the patch a k-sized
model would extract at the same point, so a model trained on crops runs
unchanged in the tracker.  Direction labels can be smoothed geodesically
over the grid (`label_sigma_deg`): the raw labels put all mass on one or
two grid entries out of hundreds, which starves the classifier of gradient
early on; a narrow Gaussian over neighbouring directions fixes that while
keeping the argmax of every label unchanged.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
import torch

from .data import BalancedSampler, patch_tensors, split_by_case
from .formats import ArchSpec, fibonacci_directions, read_ads, write_awt
from .model import TrackNet, dbc_loss, export_tensors, stc_loss


@dataclass
class TrainConfig:
    """Optimization settings; the architecture comes from here plus the
    dataset manifest (patch size, and for "dbc" the direction count)."""

    batch_size: int = 64
    learning_rate: float = 1e-4
    lambda_b: float = 5.0
    epochs: int = 10
    positive_fraction: float | None = 0.2
    val_fraction: float = 0.1
    patience: int = 3
    channels: int = 32
    hidden: int = 64
    n_directions: int | None = None
    crop_size: int | None = None
    label_sigma_deg: float = 8.0
    lr_decay_every: int | None = None
    lr_decay_factor: float = 0.3
    rng_seed: int = 0
    threads: int = 1
    log_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.crop_size is not None and (self.crop_size < 3 or self.crop_size % 2 == 0):
            raise ValueError("crop_size must be an odd integer >= 3")
        if self.label_sigma_deg < 0.0:
            raise ValueError("label_sigma_deg must be >= 0")
        if self.lr_decay_every is not None and self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError("lr_decay_factor must be in (0, 1]")


def _resolve_arch(ads, variant: str, config: TrainConfig) -> ArchSpec:
    if variant == "dbc":
        if ads.kind != "direction":
            raise ValueError(f"dbc training needs a direction dataset, got {ads.kind!r}")
        n_directions = ads.n_directions
        if config.n_directions is not None and config.n_directions != n_directions:
            raise ValueError(
                f"dataset stores {n_directions} directions, "
                f"config asks for {config.n_directions}"
            )
    elif variant == "stc":
        if ads.kind != "stop":
            raise ValueError(f"stc training needs a stop dataset, got {ads.kind!r}")
        # Stop datasets carry no grid; the head width must match whatever
        # grid the tracker will run with.
        n_directions = config.n_directions or 1000
    else:
        raise ValueError("variant must be 'dbc' or 'stc'")
    patch_size = ads.patch_size
    if config.crop_size is not None:
        if config.crop_size > ads.patch_size:
            raise ValueError(
                f"crop_size {config.crop_size} exceeds stored patch size {ads.patch_size}"
            )
        patch_size = config.crop_size
    return ArchSpec(
        patch_size=patch_size,
        channels=config.channels,
        n_directions=n_directions,
        hidden=config.hidden,
        variant=variant,
    )


def smoothing_kernel(n_directions: int, sigma_deg: float) -> torch.Tensor | None:
    """Row-normalized geodesic Gaussian over the direction grid, cut at
    3 sigma; None when sigma is zero (labels pass through untouched)."""
    if sigma_deg <= 0.0:
        return None
    dirs = fibonacci_directions(n_directions)
    theta = np.degrees(np.arccos(np.clip(dirs @ dirs.T, -1.0, 1.0)))
    kernel = np.exp(-0.5 * (theta / sigma_deg) ** 2)
    kernel[theta > 3.0 * sigma_deg] = 0.0
    kernel /= kernel.sum(axis=1, keepdims=True)
    return torch.from_numpy(kernel.astype(np.float32))


class _BatchSource:
    """Fetches patch/label tensors for row indexes, applying the crop and
    the label-smoothing kernel configured for this run."""

    def __init__(self, ads, arch: ArchSpec, kernel: torch.Tensor | None):
        self.ads = ads
        self.kernel = kernel
        lo = (ads.patch_size - arch.patch_size) // 2
        self.window = slice(lo, lo + arch.patch_size)

    def patches(self, rows):
        p1, p2 = patch_tensors(self.ads, rows)
        w = self.window
        if w != slice(0, self.ads.patch_size):
            p1 = p1[:, :, w, w, w].contiguous()
            p2 = p2[:, :, w, w, w].contiguous()
        return p1, p2

    def direction_labels(self, rows):
        labels = torch.from_numpy(self.ads.labels(rows).astype(np.float32))
        if self.kernel is not None:
            labels = labels @ self.kernel.T
        return labels


def _epoch_eval(model, source: _BatchSource, rows, variant, config) -> tuple[float, float]:
    """Mean validation loss and flag accuracy at threshold 0.5."""
    if rows.size == 0:
        return float("nan"), float("nan")
    losses = []
    hits = 0
    model.eval()
    with torch.no_grad():
        for start in range(0, rows.size, config.batch_size):
            chunk = rows[start : start + config.batch_size]
            p1, p2 = source.patches(chunk)
            flags = torch.from_numpy(source.ads.targets(chunk).astype(np.float32))
            logits, z = model(p1, p2)
            if variant == "dbc":
                labels = source.direction_labels(chunk)
                loss, _, _ = dbc_loss(logits, z, labels, flags, config.lambda_b)
            else:
                loss = stc_loss(z, flags)
            losses.append(float(loss) * chunk.size)
            hits += int(((torch.sigmoid(z) > 0.5).float() == flags).sum())
    model.train()
    return sum(losses) / rows.size, hits / rows.size


def train(dataset_path, out_path, variant: str, config: TrainConfig | None = None,
          progress=None) -> list:
    """Train one model and write the best epoch to `out_path` (AWT).

    Returns the per-epoch history; each row holds the epoch number, the mean
    training loss, the validation loss and flag accuracy, and the elapsed
    seconds.  `progress` is an optional callback receiving each row.
    """
    config = config or TrainConfig()
    torch.set_num_threads(config.threads)
    torch.manual_seed(config.rng_seed)
    ads = read_ads(dataset_path)
    arch = _resolve_arch(ads, variant, config)
    kernel = None
    if variant == "dbc":
        kernel = smoothing_kernel(arch.n_directions, config.label_sigma_deg)
    source = _BatchSource(ads, arch, kernel)

    train_rows, val_rows = split_by_case(
        ads.case_ids, config.val_fraction, config.rng_seed
    )
    sampler = BalancedSampler(
        train_rows,
        ads.flags,
        config.batch_size,
        fraction=config.positive_fraction,
        seed=config.rng_seed,
    )

    model = TrackNet(arch)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    scheduler = None
    if config.lr_decay_every is not None:
        scheduler = torch.optim.lr_scheduler.StepLR(
            optimizer, step_size=config.lr_decay_every, gamma=config.lr_decay_factor
        )

    history = []
    best = {"loss": float("inf"), "tensors": export_tensors(model)}
    stale = 0
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        total = 0.0
        for _ in range(sampler.batches_per_epoch):
            rows = sampler.batch()
            p1, p2 = source.patches(rows)
            flags = torch.from_numpy(ads.targets(rows).astype(np.float32))
            logits, z = model(p1, p2)
            if variant == "dbc":
                labels = source.direction_labels(rows)
                loss, _, _ = dbc_loss(logits, z, labels, flags, config.lambda_b)
            else:
                loss = stc_loss(z, flags)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
        if scheduler is not None:
            scheduler.step()
        val_loss, val_acc = _epoch_eval(model, source, val_rows, variant, config)
        row = {
            "epoch": epoch,
            "train_loss": total / sampler.batches_per_epoch,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "seconds": time.perf_counter() - start,
        }
        history.append(row)
        if progress is not None:
            progress(row)

        # Early stopping tracks the validation loss, falling back to the
        # training loss when no cases were held out.
        score = row["train_loss"] if np.isnan(val_loss) else val_loss
        if score < best["loss"]:
            best = {"loss": score, "tensors": export_tensors(model)}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    write_awt(out_path, arch, best["tensors"])
    if config.log_path:
        with open(config.log_path, "w", newline="") as handle:
            writer = csv.DictWriter(
                handle, fieldnames=["epoch", "train_loss", "val_loss", "val_acc",
                                    "seconds"]
            )
            writer.writeheader()
            writer.writerows(history)
    return history
