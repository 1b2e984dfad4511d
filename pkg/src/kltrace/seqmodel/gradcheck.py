"""Finite-difference gradient verification for the hand-assembled network.

Central differences in double precision against autograd, over a seeded
subset of weight coordinates. For a model whose loss is quadratic along
every single coordinate (the zero-layer pixel-regression case) central
differences are exact up to rounding; attention stacks stay well under 1e-4.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn.functional as F

from kltrace.errors import ConfigError
from kltrace.seqmodel.network import FlowModel, make_mask, make_order
from kltrace.worlds import _rng


def make_toy_batch(config, n: int = 2, seed: int = 0, reveal: float = 0.2):
    """Random token grids plus masks/orders sized for a tiny config."""
    r = _rng(seed, 0x6C)
    gh, gw = config.grid
    f1 = r.integers(0, config.n_codes, size=(n, gh, gw))
    f2 = r.integers(0, config.n_codes, size=(n, gh, gw))
    masks, orders = [], []
    raster = config.variant == "distributional_raster"
    mode = "raster_prefix" if raster else "random_subset"
    for i in range(n):
        mask = make_mask(mode, reveal, config.n_cells, int(r.integers(2**31)))
        masks.append(mask)
        orders.append(make_order(mask, config.n_cells, int(r.integers(2**31)), raster=raster))
    pixels = r.random(size=(n, config.n_cells, config.patch_dim))
    return f1, f2, masks, orders, pixels


def _loss(model: FlowModel, batch) -> torch.Tensor:
    f1, f2, masks, orders, pixels = batch
    f1 = torch.as_tensor(f1, dtype=torch.long)
    f2 = torch.as_tensor(f2, dtype=torch.long)
    if model.config.variant == "deterministic_l2":
        losses = []
        for b in range(f1.shape[0]):
            pred = model.predict_pixels(f1[b : b + 1], f2[b : b + 1], masks[b])
            target = torch.as_tensor(pixels[b], dtype=pred.dtype).view_as(pred[0])
            hidden = torch.ones(model.config.n_cells, dtype=torch.bool)
            if masks[b].revealed:
                hidden[sorted(masks[b].revealed)] = False
            losses.append(((pred[0] - target) ** 2)[hidden.view(model.config.grid)].mean())
        return torch.stack(losses).mean()
    logits, targets, weight = model.teacher_logits(f1, f2, masks, orders)
    if not weight.any():
        raise ConfigError("gradcheck batch predicts nothing")
    return F.cross_entropy(logits[weight], targets[weight])


def grad_check(model: FlowModel, batch=None, epsilon: float = 1e-5,
               checks_per_tensor: int = 4, seed: int = 0) -> dict:
    """Max relative error |fd - autograd| / (|fd| + |autograd| + 1e-12)."""
    model = copy.deepcopy(model).double()
    model.eval()
    if batch is None:
        batch = make_toy_batch(model.config, seed=seed)

    loss = _loss(model, batch)
    model.zero_grad()
    loss.backward()
    # parameters outside the variant's graph legitimately have no grad;
    # finite differences must then confirm the loss is flat along them
    grads = {
        n: (torch.zeros_like(p) if p.grad is None else p.grad.detach().clone())
        for n, p in model.named_parameters()
    }

    r = _rng(seed, 0xFD)
    report = {"per_param": {}, "n_checked": 0}
    worst = 0.0
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        n_pick = min(checks_per_tensor, flat.numel())
        picks = r.choice(flat.numel(), size=n_pick, replace=False)
        param_worst = 0.0
        for i in picks:
            i = int(i)
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + epsilon
                lp = float(_loss(model, batch))
                flat[i] = orig - epsilon
                lm = float(_loss(model, batch))
                flat[i] = orig
            fd = (lp - lm) / (2 * epsilon)
            ag = float(grads[name].view(-1)[i])
            rel = abs(fd - ag) / (abs(fd) + abs(ag) + 1e-12)
            param_worst = max(param_worst, rel)
            report["n_checked"] += 1
        report["per_param"][name] = param_worst
        worst = max(worst, param_worst)
    report["max_rel_error"] = worst
    return report


def head_bias_grad_closed_form(model: FlowModel, batch) -> np.ndarray:
    """For a zero head the bias gradient is softmax(0) minus the one-hot
    average over predicted positions: 1/K - class frequency."""
    if model.config.variant == "deterministic_l2":
        raise ConfigError("closed form applies to the token cross-entropy head")
    f1, f2, masks, orders, _ = batch
    f1t = torch.as_tensor(f1, dtype=torch.long)
    f2t = torch.as_tensor(f2, dtype=torch.long)
    _, targets, weight = model.teacher_logits(f1t, f2t, masks, orders)
    tgt = targets[weight].numpy()
    k = model.config.n_codes
    freq = np.bincount(tgt, minlength=k) / len(tgt)
    return (1.0 / k) - freq
