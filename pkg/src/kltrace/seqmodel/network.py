"""Next-frame sequence models over (location, token) pairs.

Three variants share one transformer body:

distributional_random_access
    Causal model that decodes frame-2 patches in any order. Location
    conditioning is double: every context position carries an additive
    embedding of its own cell, plus an embedding of the cell to be decoded
    next. That second summand is what lets the same context address any
    target patch, so decode order is a runtime choice, not baked into the
    weights.

distributional_raster
    Same body, but decode order is always raster and conditioning masks must
    be raster prefixes (or full). Models the fixed-order family of predictors.

deterministic_l2
    Bidirectional (non-causal) regressor: hidden frame-2 cells carry a mask
    token and the head predicts raw patch pixels under an l2 loss. No
    sampling, no logits, single parallel pass.

Sequence layout for the causal variants: all frame-1 cells in raster order,
then revealed frame-2 cells (raster among themselves), then hidden cells in
decode order. Logits read at position i are the prediction for position i+1,
so every hidden cell sees frame 1, the revealed set, and previously decoded
cells, never anything later in the order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from kltrace.errors import ConfigError
from kltrace.worlds import _rng

VARIANTS = ("distributional_random_access", "distributional_raster", "deterministic_l2")
REVEAL_MODES = ("random_subset", "raster_prefix", "overwrite_during_rollout", "full")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "distributional_random_access"
    n_codes: int = 512
    grid: tuple[int, int] = (16, 16)
    model_dim: int = 128
    heads: int = 4
    layers: int = 4
    patch_dim: int = 48                 # pixel head width (deterministic variant)
    temperature: float = 1.0
    top_k: int = 50
    rng_seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.layers < 0 or self.n_codes < 2:
            raise ConfigError("layers must be >= 0 and n_codes >= 2")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ConfigError(f"bad grid {self.grid}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")

    @property
    def n_cells(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass(frozen=True)
class MaskSpec:
    """Revealed frame-2 cells plus how they were chosen.

    For overwrite_during_rollout the revealed set is the overwrite set: every
    cell is decoded, but these get their sampled token replaced by ground
    truth before joining the context.
    """

    revealed: frozenset[int]
    reveal_mode: str

    def validate(self, n_cells: int) -> None:
        if self.reveal_mode not in REVEAL_MODES:
            raise ConfigError(f"unknown reveal mode {self.reveal_mode!r}")
        if self.revealed and (min(self.revealed) < 0 or max(self.revealed) >= n_cells):
            raise ConfigError("revealed cell index out of range")
        if self.reveal_mode == "full" and len(self.revealed) != n_cells:
            raise ConfigError("full mode must reveal every cell")
        if self.reveal_mode == "raster_prefix" and self.revealed:
            if max(self.revealed) != len(self.revealed) - 1:
                raise ConfigError("raster_prefix must reveal the first k raster cells")


@dataclass(frozen=True)
class DecodeOrder:
    order: tuple[int, ...]
    rng_seed: int = 0

    def validate(self, mask: MaskSpec, n_cells: int) -> None:
        if len(set(self.order)) != len(self.order):
            raise ConfigError("decode order contains repeats")
        if self.order and (min(self.order) < 0 or max(self.order) >= n_cells):
            raise ConfigError("decode order cell out of range")
        if mask.reveal_mode == "overwrite_during_rollout":
            if len(self.order) != n_cells:
                raise ConfigError("overwrite mode decodes every cell")
            return
        if set(self.order) & mask.revealed:
            raise ConfigError("decode order touches revealed cells")
        if set(self.order) | mask.revealed != set(range(n_cells)):
            raise ConfigError("decode order and revealed set must cover the grid")


@dataclass
class LogitsGrid:
    logits: np.ndarray        # (gh, gw, K) float32
    validity: np.ndarray      # (gh, gw) bool; False where no prediction exists

    def check(self) -> None:
        if self.logits.shape[:2] != self.validity.shape:
            raise ConfigError("logits and validity shapes disagree")
        if not np.isfinite(self.logits[self.validity]).all():
            raise ConfigError("non-finite logits in valid cells")


@dataclass
class RolloutResult:
    """Batched rollout output; row 0 is conventionally the clean pass."""

    logits: Optional[np.ndarray]   # (B, gh, gw, K) float32; None for deterministic
    validity: np.ndarray           # (gh, gw) bool, shared across the batch
    tokens: Optional[np.ndarray]   # (B, gh, gw) int32 sampled+revealed grid
    pixels: Optional[np.ndarray]   # (B, gh, gw, patch_dim) float32 in [0,1]

    def grid(self, b: int) -> LogitsGrid:
        return LogitsGrid(self.logits[b].copy(), self.validity.copy())


def make_mask(mode: str, fraction: float, n_cells: int, seed: int) -> MaskSpec:
    """Draw a conditioning mask; fraction is the revealed (or overwrite) share."""
    if mode not in REVEAL_MODES:
        raise ConfigError(f"unknown reveal mode {mode!r}")
    if not 0.0 <= fraction < 1.0 and mode != "full":
        raise ConfigError(f"reveal fraction must be in [0, 1), got {fraction}")
    if mode == "full":
        return MaskSpec(frozenset(range(n_cells)), "full")
    k = int(np.ceil(fraction * n_cells))
    if mode == "raster_prefix":
        return MaskSpec(frozenset(range(k)), mode)
    pick = _rng(seed, 0x3A).choice(n_cells, size=k, replace=False) if k else np.array([], dtype=int)
    return MaskSpec(frozenset(int(i) for i in pick), mode)


def make_order(mask: MaskSpec, n_cells: int, seed: int, raster: bool = False) -> DecodeOrder:
    if mask.reveal_mode == "overwrite_during_rollout":
        pool = np.arange(n_cells)
    else:
        pool = np.array(sorted(set(range(n_cells)) - mask.revealed), dtype=int)
    if raster:
        order = tuple(int(i) for i in pool)
    else:
        order = tuple(int(i) for i in _rng(seed, 0x0D).permutation(pool))
    return DecodeOrder(order=order, rng_seed=seed)


# ---------------------------------------------------------------------------
# network


class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, causal: bool, cache=None):
        b, s, d = x.shape
        qkv = self.qkv(x).view(b, s, 3, self.heads, self.head_dim)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))  # (b, h, s, hd)
        if cache is not None:
            if cache.get("k") is not None:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        att = q @ k.transpose(-2, -1) / self.head_dim**0.5    # (b, h, s, t)
        if causal and s > 1:
            t = k.shape[2]
            mask = torch.ones(s, t, dtype=torch.bool, device=x.device).tril(t - s)
            att = att.masked_fill(~mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, s, d)
        return self.proj(out)


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x, causal: bool, cache=None):
        x = x + self.attn(self.ln1(x), causal, cache)
        return x + self.mlp(self.ln2(x))


class FlowModel(nn.Module):
    """The shared transformer body behind all three variants."""

    MASK_TOKEN_OFFSET = 0  # mask token id == n_codes

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        n = config.n_cells
        d = config.model_dim
        self.tok_emb = nn.Embedding(config.n_codes + 1, d)   # +1: mask token
        self.loc_emb = nn.Embedding(n, d)
        self.qloc_emb = nn.Embedding(n + 1, d)               # +1: terminal slot
        self.frame_emb = nn.Embedding(2, d)
        self.blocks = nn.ModuleList(_Block(d, config.heads) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(d)
        out_dim = config.patch_dim if config.variant == "deterministic_l2" else config.n_codes
        self.head = nn.Linear(d, out_dim)
        self._init_weights()

    @property
    def causal(self) -> bool:
        return self.config.variant != "deterministic_l2"

    @property
    def distributional(self) -> bool:
        return self.config.variant != "deterministic_l2"

    def _init_weights(self) -> None:
        gen = torch.Generator().manual_seed(self.config.rng_seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("head."):
                    p.zero_()            # uniform initial logits by construction
                elif p.dim() >= 2 or "emb" in name:
                    p.normal_(0.0, 0.02, generator=gen)
                elif name.endswith(".bias"):
                    p.zero_()
                # LayerNorm weights keep their ones/zeros defaults

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- sequence assembly ---------------------------------------------------

    def check_mask(self, mask: MaskSpec) -> None:
        mask.validate(self.config.n_cells)
        if self.config.variant == "distributional_raster" and mask.reveal_mode == "random_subset":
            raise ConfigError("raster variant only conditions on raster prefixes")
        if self.config.variant == "deterministic_l2" and mask.reveal_mode == "overwrite_during_rollout":
            raise ConfigError("overwrite mode needs sampling; deterministic variant has none")

    def _layout(self, mask: MaskSpec, order: DecodeOrder):
        """Cells/frames/query-cells arrays for one (mask, order) pair."""
        n = self.config.n_cells
        self.check_mask(mask)
        order.validate(mask, n)
        if self.config.variant == "distributional_raster" and list(order.order) != sorted(order.order):
            raise ConfigError("raster variant must decode in raster order")
        revealed = sorted(mask.revealed)
        if mask.reveal_mode == "overwrite_during_rollout":
            f2_cells = list(order.order)
        else:
            f2_cells = revealed + list(order.order)
        cells = np.concatenate([np.arange(n), np.array(f2_cells, dtype=np.int64)]) \
            if f2_cells else np.arange(n)
        frames = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(len(f2_cells), dtype=np.int64)])
        qcells = np.concatenate([cells[1:], [n]])
        return cells.astype(np.int64), frames, qcells.astype(np.int64)

    def _embed(self, tokens, cells, frames, qcells):
        x = self.tok_emb(tokens) + self.loc_emb(cells) + self.frame_emb(frames)
        if self.causal:
            x = x + self.qloc_emb(qcells)
        return x

    def _body(self, x, caches=None):
        for i, blk in enumerate(self.blocks):
            x = blk(x, self.causal, None if caches is None else caches[i])
        return self.ln_f(x) if self.config.layers > 0 else x

    # -- teacher-forced pass (training, causality tests) ---------------------

    def teacher_logits(self, f1, f2, masks, orders):
        """Full-sequence pass; ground truth stands in for sampled context.

        f1, f2: (B, gh, gw) int64 tensors. masks/orders: one per batch row.
        Returns (logits (B, S-1, K), targets (B, S-1), weight (B, S-1) bool)
        where weight marks positions whose next cell is a decoded frame-2
        cell (the only positions trained or read).
        """
        if self.config.variant == "deterministic_l2":
            raise ConfigError("teacher_logits is for the causal variants")
        b = f1.shape[0]
        n = self.config.n_cells
        rows_t, rows_c, rows_f, rows_q, rows_w = [], [], [], [], []
        for i in range(b):
            cells, frames, qcells = self._layout(masks[i], orders[i])
            f1_flat = f1[i].reshape(-1)
            f2_flat = f2[i].reshape(-1)
            tokens = torch.where(
                torch.as_tensor(frames) == 0, f1_flat[cells], f2_flat[cells]
            )
            decoded = np.zeros(n, dtype=bool)
            if masks[i].reveal_mode == "overwrite_during_rollout":
                decoded[:] = True
            else:
                decoded[list(orders[i].order)] = True
            w = np.zeros(len(cells), dtype=bool)
            w[1:] = (frames[1:] == 1) & decoded[cells[1:]]
            rows_t.append(tokens)
            rows_c.append(torch.as_tensor(cells))
            rows_f.append(torch.as_tensor(frames))
            rows_q.append(torch.as_tensor(qcells))
            rows_w.append(torch.as_tensor(w))
        tokens = torch.stack(rows_t)
        cells = torch.stack(rows_c)
        frames = torch.stack(rows_f)
        qcells = torch.stack(rows_q)
        weight = torch.stack(rows_w)
        x = self._embed(tokens, cells, frames, qcells)
        h = self._body(x)
        logits = self.head(h)
        return logits[:, :-1], tokens[:, 1:], weight[:, 1:]

    # -- deterministic parallel regression ------------------------------------

    def predict_pixels(self, f1, f2, mask: MaskSpec):
        """(B, gh, gw) tokens -> (B, gh, gw, patch_dim) pixels in [0, 1]."""
        if self.config.variant != "deterministic_l2":
            raise ConfigError("predict_pixels is only for the deterministic variant")
        self.check_mask(mask)
        b = f1.shape[0]
        n = self.config.n_cells
        revealed = torch.zeros(n, dtype=torch.bool)
        if mask.revealed:
            revealed[sorted(mask.revealed)] = True
        f2_flat = f2.reshape(b, n).clone()
        f2_flat[:, ~revealed] = self.config.n_codes      # mask token
        tokens = torch.cat([f1.reshape(b, n), f2_flat], dim=1)
        cells = torch.arange(n).repeat(2)[None].expand(b, -1)
        frames = torch.repeat_interleave(torch.tensor([0, 1]), n)[None].expand(b, -1)
        x = self._embed(tokens, cells, frames, None)
        h = self._body(x)
        out = self.head(h[:, n:])
        return out.view(b, *self.config.grid, self.config.patch_dim)

    # -- sequential rollout ---------------------------------------------------

    def rollout(self, f1, f2, mask: MaskSpec, order: DecodeOrder, sampling_seed: int) -> RolloutResult:
        """Shared-mask batched rollout; all rows see one mask, order, and
        uniform stream, so rows with identical inputs stay bit-identical.

        f1: (B, gh, gw) int token grids. f2: (gh, gw) ground-truth grid used
        for revealed cells (and overwrites). Deterministic variant ignores
        sampling and returns pixels instead of logits.
        """
        gh, gw = self.config.grid
        n = self.config.n_cells
        f1 = torch.as_tensor(np.asarray(f1), dtype=torch.long)
        if f1.dim() == 2:
            f1 = f1[None]
        b = f1.shape[0]
        f2 = torch.as_tensor(np.asarray(f2), dtype=torch.long).reshape(n)

        if self.config.variant == "deterministic_l2":
            with torch.no_grad():
                px = self.predict_pixels(f1, f2[None].expand(b, -1).reshape(b, gh, gw), mask)
            validity = np.ones((gh, gw), dtype=bool)
            for c in mask.revealed:
                validity[c // gw, c % gw] = False
            return RolloutResult(logits=None, validity=validity, tokens=None,
                                 pixels=px.numpy().astype(np.float32))

        self.check_mask(mask)
        order.validate(mask, n)
        if mask.reveal_mode == "full":
            tokens = f2.reshape(1, gh, gw).expand(b, -1, -1).numpy().astype(np.int32)
            return RolloutResult(
                logits=np.zeros((b, gh, gw, self.config.n_codes), dtype=np.float32),
                validity=np.zeros((gh, gw), dtype=bool),
                tokens=tokens.copy(),
                pixels=None,
            )

        cells, frames, qcells = self._layout(mask, order)
        overwrite = mask.reveal_mode == "overwrite_during_rollout"
        prefix_len = n if overwrite else n + len(mask.revealed)
        steps = len(order.order)
        uniforms = _rng(sampling_seed, 0x51).random(steps)

        out_tokens = np.tile(f2.numpy().reshape(gh, gw).astype(np.int32), (b, 1, 1))
        logits_all = np.zeros((b, gh, gw, self.config.n_codes), dtype=np.float32)
        validity = np.zeros((gh, gw), dtype=bool)

        caches = [{"k": None, "v": None} for _ in self.blocks]
        seq_tokens = torch.empty(b, prefix_len, dtype=torch.long)
        seq_tokens[:, :n] = f1.reshape(b, n)[:, cells[:n]]
        if not overwrite and mask.revealed:
            seq_tokens[:, n:] = f2[cells[n:prefix_len]][None].expand(b, -1)

        with torch.no_grad():
            x = self._embed(
                seq_tokens,
                torch.as_tensor(cells[:prefix_len])[None].expand(b, -1),
                torch.as_tensor(frames[:prefix_len])[None].expand(b, -1),
                torch.as_tensor(qcells[:prefix_len])[None].expand(b, -1),
            )
            h = self._body(x, caches)
            last = h[:, -1:]
            for t, cell in enumerate(order.order):
                logits = self.head(last)[:, 0]                     # (B, K)
                gy, gx = cell // gw, cell % gw
                logits_all[:, gy, gx] = logits.numpy()
                validity[gy, gx] = True
                tok = _sample_shared(logits, uniforms[t], self.config.temperature, self.config.top_k)
                if overwrite and cell in mask.revealed:
                    tok = f2[cell].expand(b).clone()
                out_tokens[:, gy, gx] = tok.numpy()
                pos = prefix_len + t
                if pos < len(cells):                               # feed back
                    x = self._embed(
                        tok[:, None],
                        torch.as_tensor(cells[pos : pos + 1])[None].expand(b, -1),
                        torch.as_tensor(frames[pos : pos + 1])[None].expand(b, -1),
                        torch.as_tensor(qcells[pos : pos + 1])[None].expand(b, -1),
                    )
                    last = self._body(x, caches)

        return RolloutResult(logits=logits_all, validity=validity, tokens=out_tokens, pixels=None)

    # -- spec-shaped single-sample wrapper ------------------------------------

    def forward_logits(self, f1_tokens, mask, f2_revealed_tokens, order, sampling_seed):
        """One clean pass: (LogitsGrid, predicted token grid)."""
        res = self.rollout(np.asarray(f1_tokens)[None], f2_revealed_tokens, mask, order, sampling_seed)
        if res.logits is None:
            raise ConfigError("deterministic variant produces pixels, not logits")
        return res.grid(0), res.tokens[0]

    # -- parallel fast path (ablation only) -----------------------------------

    def parallel_logits(self, f1, chunk: int = 32) -> np.ndarray:
        """Per-cell frame-2 logits given frame 1 alone, no sequential feedback.

        Batched re-runs of the last frame-1 position with every possible
        next-cell query. Returns (B, gh, gw, K).
        """
        if self.config.variant == "deterministic_l2":
            raise ConfigError("parallel logits need a distributional variant")
        gh, gw = self.config.grid
        n = self.config.n_cells
        f1 = torch.as_tensor(np.asarray(f1), dtype=torch.long)
        if f1.dim() == 2:
            f1 = f1[None]
        b = f1.shape[0]
        cells = torch.arange(n)
        frames = torch.zeros(n, dtype=torch.long)
        qcells = torch.cat([cells[1:], cells.new_tensor([n])])
        out = np.empty((b, n, self.config.n_codes), dtype=np.float32)
        with torch.no_grad():
            caches = [{"k": None, "v": None} for _ in self.blocks]
            if n > 1:
                x = self._embed(
                    f1.reshape(b, n)[:, :-1],
                    cells[None, :-1].expand(b, -1),
                    frames[None, :-1].expand(b, -1),
                    qcells[None, :-1].expand(b, -1),
                )
                self._body(x, caches)
            last_tok = f1.reshape(b, n)[:, -1:]
            for lo in range(0, n, chunk):
                q = torch.arange(lo, min(lo + chunk, n))
                m = len(q)
                xc = self._embed(
                    last_tok.repeat_interleave(m, dim=0),
                    cells[None, -1:].expand(b * m, -1),
                    frames[None, -1:].expand(b * m, -1),
                    q.repeat(b)[:, None],
                )
                sub = [
                    {
                        "k": None if c["k"] is None else c["k"].repeat_interleave(m, dim=0),
                        "v": None if c["v"] is None else c["v"].repeat_interleave(m, dim=0),
                    }
                    for c in caches
                ]
                h = self._body(xc, sub)
                out[:, lo : lo + m] = self.head(h[:, -1]).view(b, m, -1).numpy()
        return out.reshape(b, gh, gw, self.config.n_codes)


def _sample_shared(logits: torch.Tensor, u: float, temperature: float, top_k: int) -> torch.Tensor:
    """Inverse-CDF sample with one shared uniform; ties and floats are stable,
    so identical logit rows always yield identical tokens."""
    scaled = logits / temperature
    k = min(top_k, scaled.shape[-1])
    vals, idx = torch.topk(scaled, k, dim=-1)
    probs = torch.softmax(vals, dim=-1)
    cum = probs.cumsum(dim=-1)
    j = (cum <= float(u)).sum(dim=-1).clamp(max=k - 1)
    return idx.gather(-1, j[:, None])[:, 0]


def init_model(config: ModelConfig) -> FlowModel:
    model = FlowModel(config)
    model.eval()
    return model
