"""Training loops for the three variants, plus conditioned CE evaluation.

Distributional variants minimize cross-entropy of hidden frame-2 tokens
given frame 1 and a revealed subset (reveal ratio uniform in [0, 0.5] per
sample, decode order random or raster per variant). The deterministic
variant minimizes mean squared error on raw patch pixels.

Everything is derived from counters, not shared RNG state: the batch for
step t depends only on (seed, t), so resuming from a checkpoint replays the
exact same trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from kltrace.errors import ConfigError, NumericalError
from kltrace.seqmodel.checkpoint import Checkpoint
from kltrace.seqmodel.network import FlowModel, make_mask, make_order
from kltrace.tokenizer import PatchKMeans, frame_to_patches
from kltrace.worlds import Clip, _rng


@dataclass
class TrainSettings:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    grad_clip: float = 1.0
    reveal_max: float = 0.5
    seed: int = 0
    heldout_every: int = 200
    heldout_samples: int = 64
    heldout_fraction: float = 0.1      # of clips, reserved for evaluation

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.reveal_max <= 1.0:
            raise ConfigError("reveal_max must be in [0, 1]")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ConfigError("heldout_fraction must be in [0, 1)")


@dataclass
class TokenizedDataset:
    """Token grids (and pixel patches) for every consecutive frame pair."""

    f1: np.ndarray            # (M, gh, gw) int32
    f2: np.ndarray            # (M, gh, gw) int32
    patches2: np.ndarray      # (M, n_cells, patch_dim) float32 in [0, 1]
    train_idx: np.ndarray
    heldout_idx: np.ndarray

    @classmethod
    def build(cls, clips: list[Clip], tok: PatchKMeans, heldout_fraction: float = 0.1) -> "TokenizedDataset":
        f1s, f2s, px2, owner = [], [], [], []
        for ci, clip in enumerate(clips):
            grids = [tok.transform(f) for f in clip.frames]
            for t in range(len(clip.frames) - 1):
                f1s.append(grids[t])
                f2s.append(grids[t + 1])
                px2.append(frame_to_patches(clip.frames[t + 1], tok.patch) / 255.0)
                owner.append(ci)
        if not f1s:
            raise ConfigError("no frame pairs to train on")
        owner = np.array(owner)
        n_clips = owner.max() + 1
        n_held = int(round(heldout_fraction * n_clips))
        held_clips = set(range(n_clips - n_held, n_clips))
        held = np.array([o in held_clips for o in owner])
        idx = np.arange(len(f1s))
        return cls(
            f1=np.stack(f1s).astype(np.int32),
            f2=np.stack(f2s).astype(np.int32),
            patches2=np.stack(px2).astype(np.float32),
            train_idx=idx[~held],
            heldout_idx=idx[held] if held.any() else idx,
        )


def _batch_masks(model: FlowModel, n: int, reveal_max: float, seed: int, step: int,
                 heldout: bool = False):
    """Per-sample masks and orders for one batch, derived from counters."""
    cfg = model.config
    raster = cfg.variant == "distributional_raster"
    mode = "raster_prefix" if raster else "random_subset"
    base = 0x4E if heldout else 0x7B
    masks, orders = [], []
    for i in range(n):
        r = _rng(seed, base, step, i)
        frac = float(r.random()) * reveal_max
        mseed = int(r.integers(2**31))
        oseed = int(r.integers(2**31))
        mask = make_mask(mode, frac, cfg.n_cells, mseed)
        orders.append(make_order(mask, cfg.n_cells, oseed, raster=raster))
        masks.append(mask)
    return masks, orders


def _pick(ds_idx: np.ndarray, n: int, seed: int, step: int, heldout: bool = False) -> np.ndarray:
    r = _rng(seed, 0x21 if heldout else 0x12, step)
    return ds_idx[r.integers(0, len(ds_idx), size=n)]


def batch_loss(model: FlowModel, ds: TokenizedDataset, sample_idx, masks, orders) -> torch.Tensor:
    """Mean loss over one batch: token CE or pixel MSE depending on variant."""
    f1 = torch.as_tensor(ds.f1[sample_idx], dtype=torch.long)
    f2 = torch.as_tensor(ds.f2[sample_idx], dtype=torch.long)
    if model.config.variant == "deterministic_l2":
        n = model.config.n_cells
        losses = []
        # group by identical revealed sets is possible but batches are small
        for b in range(len(sample_idx)):
            pred = model.predict_pixels(f1[b : b + 1], f2[b : b + 1], masks[b])
            target = torch.as_tensor(ds.patches2[sample_idx[b]]).view_as(pred[0])
            hidden = torch.ones(n, dtype=torch.bool)
            if masks[b].revealed:
                hidden[sorted(masks[b].revealed)] = False
            hidden = hidden.view(model.config.grid)
            losses.append(((pred[0] - target) ** 2)[hidden].mean())
        return torch.stack(losses).mean()
    logits, targets, weight = model.teacher_logits(f1, f2, masks, orders)
    if not weight.any():
        raise ConfigError("batch with nothing to predict (all cells revealed)")
    return F.cross_entropy(logits[weight], targets[weight])


def heldout_loss(model: FlowModel, ds: TokenizedDataset, settings: TrainSettings) -> float:
    """Loss on the held-out split with fixed counters, comparable across steps."""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    bs = settings.batch_size
    n_batches = max(1, settings.heldout_samples // bs)
    with torch.no_grad():
        for j in range(n_batches):
            idx = _pick(ds.heldout_idx, bs, settings.seed, j, heldout=True)
            masks, orders = _batch_masks(model, bs, settings.reveal_max, settings.seed, j, heldout=True)
            total += float(batch_loss(model, ds, idx, masks, orders))
            count += 1
    if was_training:
        model.train()
    return total / count


def conditioned_ce(model: FlowModel, ds: TokenizedDataset, mode: str, fraction: float,
                   n_samples: int, seed: int) -> float:
    """Held-out CE of hidden tokens under a prescribed conditioning mode."""
    if model.config.variant == "deterministic_l2":
        raise ConfigError("token cross-entropy needs a distributional variant")
    model.eval()
    cfg = model.config
    raster_order = cfg.variant == "distributional_raster"
    total, count = 0.0, 0
    with torch.no_grad():
        for j in range(n_samples):
            r = _rng(seed, 0x6F, j)
            idx = ds.heldout_idx[int(r.integers(len(ds.heldout_idx)))]
            mask = make_mask(mode, fraction, cfg.n_cells, int(r.integers(2**31)))
            order = make_order(mask, cfg.n_cells, int(r.integers(2**31)), raster=raster_order)
            f1 = torch.as_tensor(ds.f1[idx : idx + 1], dtype=torch.long)
            f2 = torch.as_tensor(ds.f2[idx : idx + 1], dtype=torch.long)
            logits, targets, weight = model.teacher_logits(f1, f2, [mask], [order])
            if not weight.any():
                continue
            total += float(F.cross_entropy(logits[weight], targets[weight])) * int(weight.sum())
            count += int(weight.sum())
    if count == 0:
        raise ConfigError("no hidden tokens to score")
    return total / count


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_trace: list = field(default_factory=list)      # [(step, loss)]
    heldout_trace: list = field(default_factory=list)   # [(step, loss)]


def train(
    model: FlowModel,
    ds: TokenizedDataset,
    settings: TrainSettings,
    codebook_digest: Optional[str] = None,
    resume: Optional[Checkpoint] = None,
    on_progress: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    settings.validate()
    optimizer = torch.optim.Adam(model.parameters(), lr=settings.lr,
                                 betas=(0.9, 0.999), eps=1e-8)
    start = 0
    if resume is not None:
        resume.restore(model, optimizer)
        start = resume.step
    loss_trace, heldout_trace = [], []
    model.train()
    for step in range(start, settings.steps):
        idx = _pick(ds.train_idx, settings.batch_size, settings.seed, step)
        masks, orders = _batch_masks(model, settings.batch_size, settings.reveal_max,
                                     settings.seed, step)
        optimizer.zero_grad()
        loss = batch_loss(model, ds, idx, masks, orders)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise NumericalError(
                f"training diverged at step {step}: loss={value} (lr={settings.lr})"
            )
        loss_trace.append((step, value))
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), settings.grad_clip)
        optimizer.step()
        if settings.heldout_every and (step + 1) % settings.heldout_every == 0:
            h = heldout_loss(model, ds, settings)
            heldout_trace.append((step + 1, h))
            if on_progress:
                on_progress({"step": step + 1, "loss": value, "heldout": h})
        elif on_progress and step % 50 == 0:
            on_progress({"step": step, "loss": value})
    model.eval()
    ckpt = Checkpoint.from_model(model, optimizer, step=settings.steps,
                                 codebook_digest=codebook_digest)
    return TrainResult(checkpoint=ckpt, loss_trace=loss_trace, heldout_trace=heldout_trace)
