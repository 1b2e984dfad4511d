"""Perturb-and-track flow extraction.

The three-step template: (1) inject a small white Gaussian bump at the query
point of frame 1, (2) run the same conditioned next-frame prediction on the
clean and the perturbed frame with identical conditioning mask, decode order,
and sampling uniforms, (3) locate where the predictions disagree. Two readout
modes share the rollouts: per-patch KL divergence between the clean and
perturbed token distributions, and per-patch mean absolute RGB difference
between the decoded predictions.

Sharing the sampling stream across the clean and perturbed passes makes the
pipeline exactly null-stable: a zero-amplitude bump yields bit-identical
rollouts and an all-zero map.

Maps from several masks and zoom scales are painted onto the frame's pixel
canvas and averaged where they overlap (plain arithmetic mean, validity
aware). The flow target is the center of the peak patch refined by a
divergence-weighted centroid over its 3x3 neighborhood; a peak below the
calibrated divergence threshold flags the query occluded.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from kltrace.errors import ConfigError
from kltrace.seqmodel.network import FlowModel, LogitsGrid, MaskSpec, DecodeOrder, make_mask, make_order
from kltrace.tokenizer import PatchKMeans, patches_to_frame
from kltrace.worlds import QueryRecord, _rng
from kltrace._validation import check_frame, check_point_in_frame


@dataclass(frozen=True)
class PerturbSpec:
    center: tuple[float, float]        # (x, y) pixels, sub-pixel allowed
    sigma: float = 2.0
    amplitude: float = 255.0

    def validate(self, width: int, height: int) -> None:
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        check_point_in_frame(self.center[0], self.center[1], width, height)


@dataclass(frozen=True)
class TraceSettings:
    num_masks: int = 1
    scales: tuple[float, ...] = (1.0, 0.5)
    reveal_fraction: float = 0.10
    reveal_mode: str = "random_subset"
    occlusion_threshold: Optional[float] = None
    mode: str = "kl"
    rng_seed: int = 0
    sigma: float = 2.0
    amplitude: float = 255.0

    def validate(self) -> None:
        if self.num_masks < 1:
            raise ConfigError("num_masks must be >= 1")
        if not self.scales:
            raise ConfigError("scales must be non-empty")
        if any(not 0.0 < s <= 1.0 for s in self.scales):
            raise ConfigError(f"scales must lie in (0, 1], got {self.scales}")
        if not 0.0 <= self.reveal_fraction < 1.0 and self.reveal_mode != "full":
            raise ConfigError("reveal_fraction must be in [0, 1)")
        if self.mode not in ("kl", "rgb"):
            raise ConfigError(f"mode must be 'kl' or 'rgb', got {self.mode!r}")

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(payload).hexdigest()[:12]


@dataclass
class KLMap:
    values: np.ndarray       # (gh, gw) float64, nats (or RGB units in rgb mode)
    validity: np.ndarray     # (gh, gw) bool

    def check(self) -> None:
        if self.values.shape != self.validity.shape:
            raise ConfigError("map and validity shapes disagree")
        v = self.values[self.validity]
        if v.size and (not np.isfinite(v).all() or v.min() < 0):
            raise ConfigError("divergence map must be finite and non-negative")


@dataclass
class FlowEstimate:
    query: tuple[float, float]
    target: tuple[float, float]
    occluded: bool
    confidence: float


# ---------------------------------------------------------------------------
# step 1: perturbation


def inject_perturbation(frame: np.ndarray, p: PerturbSpec) -> np.ndarray:
    """Additive white Gaussian bump, clamped to 8-bit range; input untouched."""
    check_frame(frame)
    h, w = frame.shape[:2]
    p.validate(w, h)
    if p.amplitude == 0.0:
        return frame.copy()
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (xx - p.center[0]) ** 2 + (yy - p.center[1]) ** 2
    bump = p.amplitude * np.exp(-d2 / (2.0 * p.sigma**2))
    out = frame.astype(np.float64) + bump[..., None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# step 3: disagreement maps


def kl_map(clean: LogitsGrid, pert: LogitsGrid) -> KLMap:
    """Per-cell KL(softmax(clean) || softmax(pert)) in nats."""
    if clean.logits.shape != pert.logits.shape:
        raise ConfigError("logit grids have different shapes")
    if not np.array_equal(clean.validity, pert.validity):
        raise ConfigError("clean and perturbed passes used different masks")
    lc = clean.logits.astype(np.float64)
    lp = pert.logits.astype(np.float64)
    logp = lc - _logsumexp(lc)
    logq = lp - _logsumexp(lp)
    kl = np.sum(np.exp(logp) * (logp - logq), axis=-1)
    kl = np.maximum(kl, 0.0)
    kl[~clean.validity] = 0.0
    out = KLMap(values=kl, validity=clean.validity.copy())
    out.check()
    return out


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def rgb_diff_map(clean_pred: np.ndarray, pert_pred: np.ndarray, patch: int = 4) -> np.ndarray:
    """Per-patch mean absolute channel difference between two frames."""
    if clean_pred.shape != pert_pred.shape:
        raise ConfigError("predicted frames have different shapes")
    h, w = clean_pred.shape[:2]
    if h % patch or w % patch:
        raise ConfigError(f"frame {h}x{w} not divisible by patch {patch}")
    diff = np.abs(clean_pred.astype(np.float64) - pert_pred.astype(np.float64))
    gh, gw = h // patch, w // patch
    return diff.reshape(gh, patch, gw, patch, 3).mean(axis=(1, 3, 4))


# ---------------------------------------------------------------------------
# step 2+3 composed for one mask


def _decoded_frames(model: FlowModel, tok: PatchKMeans, result) -> np.ndarray:
    """(B, H, W, 3) uint8 predictions out of a rollout result."""
    if model.config.variant == "deterministic_l2":
        px = np.clip(result.pixels * 255.0, 0, 255)
        gh, gw = model.config.grid
        return np.stack([
            patches_to_frame(px[b].reshape(gh * gw, -1), gh, gw, tok.patch)
            for b in range(px.shape[0])
        ])
    return np.stack([tok.inverse_transform(result.tokens[b]) for b in range(result.tokens.shape[0])])


def trace_once(
    model: FlowModel,
    tok: PatchKMeans,
    f1: np.ndarray,
    f2: np.ndarray,
    perturb: PerturbSpec,
    mask: MaskSpec,
    order: DecodeOrder,
    sampling_seed: int,
    mode: str = "kl",
    codebook_digest: Optional[str] = None,
) -> KLMap:
    """One clean-vs-perturbed comparison under a single mask and order."""
    if mode not in ("kl", "rgb"):
        raise ConfigError(f"mode must be 'kl' or 'rgb', got {mode!r}")
    if codebook_digest is not None and codebook_digest != tok.digest_hex():
        raise ConfigError("model was trained against a different codebook")
    f1_pert = inject_perturbation(f1, perturb)
    f1_tokens = tok.transform([f1, f1_pert])
    f2_tokens = tok.transform(f2)
    result = model.rollout(f1_tokens, f2_tokens, mask, order, sampling_seed)
    if mode == "kl":
        if result.logits is None:
            raise ConfigError("KL readout needs a distributional variant")
        return kl_map(result.grid(0), result.grid(1))
    frames = _decoded_frames(model, tok, result)
    values = rgb_diff_map(frames[0], frames[1], tok.patch)
    values = values * result.validity
    out = KLMap(values=values, validity=result.validity.copy())
    out.check()
    return out


# ---------------------------------------------------------------------------
# multi-mask / multi-scale aggregation


def _nn_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = img.shape[:2]
    ys = np.minimum((np.arange(h) + 0.5) * sh / h, sh - 1).astype(int)
    xs = np.minimum((np.arange(w) + 0.5) * sw / w, sw - 1).astype(int)
    return img[ys][:, xs]


def _window_box(x_q, scale, h, w, patch):
    wh = max(patch, int(round(h * scale)))
    ww = max(patch, int(round(w * scale)))
    x0 = int(np.clip(int(round(x_q[0])) - ww // 2, 0, w - ww))
    y0 = int(np.clip(int(round(x_q[1])) - wh // 2, 0, h - wh))
    return y0, x0, wh, ww


def _mask_order_seeds(model: FlowModel, settings: TraceSettings, idx: int):
    n = model.config.n_cells
    mseed = int(_rng(settings.rng_seed, 0xA1, idx).integers(2**31))
    oseed = int(_rng(settings.rng_seed, 0xB2, idx).integers(2**31))
    sseed = int(_rng(settings.rng_seed, 0xC3, idx).integers(2**31))
    mask = make_mask(settings.reveal_mode, settings.reveal_fraction, n, mseed)
    raster = model.config.variant == "distributional_raster"
    order = make_order(mask, n, oseed, raster=raster)
    return mask, order, sseed


def _paint(canvas_v, canvas_w, values, validity, box, model_hw, patch):
    """Spread one map's cell values over its window's pixels."""
    y0, x0, wh, ww = box
    mh, mw = model_hw
    ys = np.minimum(((np.arange(wh) + 0.5) * mh / wh - 0.5).round().astype(int), mh - 1)
    xs = np.minimum(((np.arange(ww) + 0.5) * mw / ww - 0.5).round().astype(int), mw - 1)
    cy = np.clip(ys // patch, 0, values.shape[0] - 1)
    cx = np.clip(xs // patch, 0, values.shape[1] - 1)
    vals = values[np.ix_(cy, cx)]
    ok = validity[np.ix_(cy, cx)]
    canvas_v[y0 : y0 + wh, x0 : x0 + ww] += np.where(ok, vals, 0.0)
    canvas_w[y0 : y0 + wh, x0 : x0 + ww] += ok.astype(np.float64)


def _aggregate_to_grid(canvas_v, canvas_w, patch):
    h, w = canvas_v.shape
    gh, gw = h // patch, w // patch
    v = canvas_v.reshape(gh, patch, gw, patch).sum(axis=(1, 3))
    wt = canvas_w.reshape(gh, patch, gw, patch).sum(axis=(1, 3))
    agg = np.zeros((gh, gw))
    valid = wt > 0
    agg[valid] = v[valid] / wt[valid]
    return agg, valid


def _readout(agg, valid, patch, x_q, threshold):
    if not valid.any():
        # nothing was predicted (fully revealed conditioning): fall back to
        # a zero-flow guess with zero confidence
        return FlowEstimate(query=tuple(x_q), target=tuple(x_q), occluded=False, confidence=0.0)
    gh, gw = agg.shape
    flat = np.where(valid, agg, -np.inf).ravel()
    peak = int(flat.argmax())
    py, px = divmod(peak, gw)
    peak_val = float(agg[py, px])
    ys = slice(max(0, py - 1), min(gh, py + 2))
    xs = slice(max(0, px - 1), min(gw, px + 2))
    wts = np.where(valid[ys, xs], np.clip(agg[ys, xs], 0.0, None), 0.0)
    cyy, cxx = np.mgrid[ys, xs]
    centers_x = cxx * patch + (patch - 1) / 2.0
    centers_y = cyy * patch + (patch - 1) / 2.0
    if wts.sum() > 0:
        tx = float((wts * centers_x).sum() / wts.sum())
        ty = float((wts * centers_y).sum() / wts.sum())
    else:
        tx = px * patch + (patch - 1) / 2.0
        ty = py * patch + (patch - 1) / 2.0
    occluded = bool(peak_val < threshold)
    return FlowEstimate(query=tuple(x_q), target=(tx, ty), occluded=occluded,
                        confidence=peak_val)


def extract_flows_for_clip(
    model: FlowModel,
    tok: PatchKMeans,
    f1: np.ndarray,
    f2: np.ndarray,
    points: list[tuple[float, float]],
    settings: TraceSettings,
    codebook_digest: Optional[str] = None,
) -> list[dict[str, FlowEstimate]]:
    """Both readouts for many queries on one frame pair, sharing rollouts.

    Full-frame passes batch all queries with one clean row; windowed scales
    run per query (the window follows the query point). Returns one
    {"kl": estimate, "rgb": estimate} dict per query ("rgb" only, keyed the
    same, for the deterministic variant).
    """
    settings.validate()
    if codebook_digest is not None and codebook_digest != tok.digest_hex():
        raise ConfigError("model was trained against a different codebook")
    h, w = f1.shape[:2]
    patch = tok.patch
    gh, gw = model.config.grid
    mh, mw = gh * patch, gw * patch
    distributional = model.config.variant != "deterministic_l2"
    modes = ("kl", "rgb") if distributional else ("rgb",)
    if settings.occlusion_threshold is None:
        raise ConfigError("occlusion_threshold must be set or calibrated first")

    canvases = {m: [(np.zeros((h, w)), np.zeros((h, w))) for _ in points] for m in modes}

    for mi in range(settings.num_masks):
        mask, order, sseed = _mask_order_seeds(model, settings, mi)
        for scale in settings.scales:
            if scale == 1.0 and (h, w) == (mh, mw):
                boxes = [(0, 0, h, w)] * len(points)
                f1c = tok.transform(f1)
                f2t = tok.transform(f2)
                rows = [f1c]
                for pt in points:
                    pp = PerturbSpec(center=pt, sigma=settings.sigma, amplitude=settings.amplitude)
                    rows.append(tok.transform(inject_perturbation(f1, pp)))
                result = model.rollout(np.stack(rows), f2t, mask, order, sseed)
                per_query = [(result, 0, qi + 1) for qi in range(len(points))]
            else:
                per_query = []
                boxes = []
                for pt in points:
                    box = _window_box(pt, scale, h, w, patch)
                    y0, x0, wh, ww = box
                    f1w = _nn_resize(f1[y0 : y0 + wh, x0 : x0 + ww], mh, mw)
                    f2w = _nn_resize(f2[y0 : y0 + wh, x0 : x0 + ww], mh, mw)
                    qx = (pt[0] - x0 + 0.5) * mw / ww - 0.5
                    qy = (pt[1] - y0 + 0.5) * mh / wh - 0.5
                    pp = PerturbSpec(center=(qx, qy), sigma=settings.sigma,
                                     amplitude=settings.amplitude)
                    f1w_pert = inject_perturbation(f1w, pp)
                    res = model.rollout(
                        tok.transform([f1w, f1w_pert]), tok.transform(f2w), mask, order, sseed
                    )
                    per_query.append((res, 0, 1))
                    boxes.append(box)

            for qi, (result, ci, pi) in enumerate(per_query):
                box = boxes[qi]
                if "kl" in modes:
                    m = kl_map(result.grid(ci), result.grid(pi))
                    _paint(*canvases["kl"][qi], m.values, m.validity, box, (mh, mw), patch)
                frames = _decoded_frames(model, tok, result)
                rv = rgb_diff_map(frames[ci], frames[pi], patch)
                _paint(*canvases["rgb"][qi], rv, result.validity, box, (mh, mw), patch)

    out = []
    for qi, pt in enumerate(points):
        est = {}
        for m in modes:
            agg, valid = _aggregate_to_grid(*canvases[m][qi], patch)
            est[m] = _readout(agg, valid, patch, pt, settings.occlusion_threshold)
        out.append(est)
    return out


def extract_flow(
    model: FlowModel,
    tok: PatchKMeans,
    f1: np.ndarray,
    f2: np.ndarray,
    x_q: tuple[float, float],
    settings: TraceSettings,
    codebook_digest: Optional[str] = None,
) -> FlowEstimate:
    """Single-query wrapper; see extract_flows_for_clip."""
    check_point_in_frame(x_q[0], x_q[1], f1.shape[1], f1.shape[0])
    if settings.mode == "kl" and model.config.variant == "deterministic_l2":
        raise ConfigError("KL readout needs a distributional variant")
    ests = extract_flows_for_clip(model, tok, f1, f2, [tuple(x_q)], settings,
                                  codebook_digest=codebook_digest)
    return ests[0][settings.mode if model.config.variant != "deterministic_l2" else "rgb"]


# ---------------------------------------------------------------------------
# occlusion threshold calibration


def calibrate_threshold(peaks: np.ndarray, occluded: np.ndarray) -> tuple[float, float]:
    """Threshold maximizing occlusion accuracy of (peak < t); deterministic.

    Returns (threshold, accuracy on the calibration set). Ties prefer the
    smallest candidate. Candidates are below-min, between-values midpoints,
    and above-max, so an all-visible split lands below the minimum peak.
    """
    peaks = np.asarray(peaks, dtype=np.float64)
    occluded = np.asarray(occluded, dtype=bool)
    if peaks.size == 0 or peaks.shape != occluded.shape:
        raise ConfigError("calibration needs matching, non-empty peaks and labels")
    uniq = np.unique(peaks)
    candidates = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]])
    best_t, best_acc = candidates[0], -1.0
    for t in candidates:
        acc = float(np.mean((peaks < t) == occluded))
        if acc > best_acc:
            best_t, best_acc = float(t), acc
    return best_t, best_acc


def calibrate_occlusion_threshold(
    model: FlowModel,
    tok: PatchKMeans,
    clip_frames: dict[str, tuple[np.ndarray, np.ndarray]],
    queries: list[QueryRecord],
    settings: TraceSettings,
) -> tuple[float, float]:
    """Run extraction on labeled calibration queries and sweep the threshold."""
    if not queries:
        raise ConfigError("empty calibration split")
    probe = TraceSettings(**{**asdict(settings), "occlusion_threshold": 0.0})
    peaks, labels = [], []
    by_clip: dict[str, list[QueryRecord]] = {}
    for q in queries:
        by_clip.setdefault(q.clip, []).append(q)
    mode = settings.mode if model.config.variant != "deterministic_l2" else "rgb"
    for clip_id, qs in by_clip.items():
        f1, f2 = clip_frames[clip_id]
        ests = extract_flows_for_clip(model, tok, f1, f2, [(q.x, q.y) for q in qs], probe)
        for q, est in zip(qs, ests):
            peaks.append(est[mode].confidence)
            labels.append(q.occluded)
    return calibrate_threshold(np.array(peaks), np.array(labels))


def estimate_to_record(query: QueryRecord, est: FlowEstimate, settings: TraceSettings) -> dict:
    """Per-query JSON payload for records.jsonl."""
    return {
        "query": {"clip": query.clip, "frame_a": query.frame_a, "frame_b": query.frame_b,
                  "x": query.x, "y": query.y},
        "prediction": {"x": est.target[0], "y": est.target[1]},
        "occluded": est.occluded,
        "confidence": est.confidence,
        "settings_digest": settings.digest(),
    }
