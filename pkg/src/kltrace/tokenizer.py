"""Local patch tokenizer: k-means codebook over raw RGB patches.

Each non-overlapping patch (default 4x4x3) is quantized independently to the
nearest codeword, so a token at grid cell (gy, gx) depends on nothing but the
pixels of that one patch. That locality is what makes single-patch probes
visible as single-token changes downstream.

Codebooks are fit with plain Lloyd iterations: seeded initialization from
distinct patches, exact nearest-code assignment with ties resolved toward the
lowest code index, and empty codes reseeded from the currently worst-fit
patches. The objective trace is monotone non-increasing.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from kltrace.errors import ConfigError, DataError
from kltrace._validation import check_frame

CODEBOOK_MAGIC = b"KLCB"
CODEBOOK_VERSION = 1


def patch_grid_shape(h: int, w: int, patch: int) -> tuple[int, int]:
    if h % patch or w % patch:
        raise ConfigError(f"frame {h}x{w} not divisible by patch {patch}")
    return h // patch, w // patch


def frame_to_patches(frame: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, 3) uint8 -> (gh*gw, patch*patch*3) float32, row-major cells."""
    check_frame(frame)
    h, w = frame.shape[:2]
    gh, gw = patch_grid_shape(h, w, patch)
    x = frame.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(gh * gw, patch * patch * 3).astype(np.float32)


def patches_to_frame(patches: np.ndarray, gh: int, gw: int, patch: int) -> np.ndarray:
    """Inverse of frame_to_patches; values clipped and rounded to uint8."""
    x = np.asarray(patches, dtype=np.float32).reshape(gh, gw, patch, patch, 3)
    x = x.transpose(0, 2, 1, 3, 4).reshape(gh * patch, gw * patch, 3)
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _as_frames(frames) -> list[np.ndarray]:
    if isinstance(frames, np.ndarray) and frames.ndim == 3:
        return [frames]
    out = list(frames)
    if not out:
        raise ConfigError("need at least one frame")
    return out


class PatchKMeans(TransformerMixin, BaseEstimator):
    """Nearest-codeword tokenizer with a k-means-trained codebook.

    Parameters
    ----------
    n_codes : codebook size K
    patch : patch side length in pixels
    n_iter : Lloyd iterations
    seed : controls initialization only; fitting itself is deterministic
    """

    def __init__(self, n_codes: int = 512, patch: int = 4, n_iter: int = 20, seed: int = 0):
        self.n_codes = n_codes
        self.patch = patch
        self.n_iter = n_iter
        self.seed = seed

    # -- fitting -----------------------------------------------------------

    def fit(self, frames, y=None):
        if self.n_codes < 1:
            raise ConfigError("n_codes must be >= 1")
        if self.patch < 1:
            raise ConfigError("patch must be >= 1")
        frames = _as_frames(frames)
        x = np.concatenate([frame_to_patches(f, self.patch) for f in frames])
        if len(x) < 1:
            raise DataError("no patches to fit")
        x64 = x.astype(np.float64)

        codes = self._init_codes(x64)
        trace = []
        for _ in range(self.n_iter):
            assign, dmin, inertia = _assign(x64, codes)
            trace.append(inertia)
            counts = np.bincount(assign, minlength=len(codes)).astype(np.float64)
            sums = np.zeros_like(codes)
            np.add.at(sums, assign, x64)
            nonempty = counts > 0
            codes[nonempty] = sums[nonempty] / counts[nonempty, None]
            empties = np.nonzero(~nonempty)[0]
            if len(empties):
                d = dmin.copy()
                for e in empties:
                    far = int(np.argmax(d))
                    codes[e] = x64[far]
                    d[far] = -1.0
        assign, _, inertia = _assign(x64, codes)
        trace.append(inertia)

        self.codebook_ = codes.astype(np.float32)
        self.inertia_ = float(inertia)
        self.inertia_trace_ = [float(v) for v in trace]
        return self

    def _init_codes(self, x64: np.ndarray) -> np.ndarray:
        uniq = np.unique(x64, axis=0)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(0x7C,))))
        k = self.n_codes
        if len(uniq) >= k:
            pick = rng.choice(len(uniq), size=k, replace=False)
            return uniq[pick].copy()
        reps = -(-k // len(uniq))
        return np.tile(uniq, (reps, 1))[:k].copy()

    # -- inference ---------------------------------------------------------

    def _check_fitted(self) -> None:
        if not hasattr(self, "codebook_"):
            raise ConfigError("tokenizer is not fitted; call fit() or load()")

    def transform(self, frames):
        """Frame (H, W, 3) -> token grid (gh, gw) int32; batches map elementwise."""
        self._check_fitted()
        if isinstance(frames, np.ndarray) and frames.ndim == 3:
            return self._transform_one(frames)
        return np.stack([self._transform_one(f) for f in _as_frames(frames)])

    def _transform_one(self, frame: np.ndarray) -> np.ndarray:
        x = frame_to_patches(frame, self.patch).astype(np.float64)
        gh, gw = patch_grid_shape(frame.shape[0], frame.shape[1], self.patch)
        assign, _, _ = _assign(x, self.codebook_.astype(np.float64))
        return assign.reshape(gh, gw).astype(np.int32)

    def inverse_transform(self, tokens):
        """Token grid (gh, gw) -> frame (H, W, 3) uint8 of codeword patches."""
        self._check_fitted()
        tokens = np.asarray(tokens)
        if tokens.ndim == 3:
            return np.stack([self.inverse_transform(t) for t in tokens])
        if tokens.ndim != 2:
            raise ConfigError(f"token grid must be 2-d, got shape {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= len(self.codebook_):
            raise ConfigError("token id out of codebook range")
        gh, gw = tokens.shape
        return patches_to_frame(self.codebook_[tokens.ravel()], gh, gw, self.patch)

    def reconstruction_mse(self, frames) -> float:
        """Mean squared pixel error of tokenize -> detokenize, over all frames."""
        self._check_fitted()
        total, count = 0.0, 0
        for f in _as_frames(frames):
            recon = self.inverse_transform(self.transform(f))
            diff = recon.astype(np.float64) - f.astype(np.float64)
            total += float((diff**2).sum())
            count += diff.size
        return total / count

    # -- serialization -----------------------------------------------------

    def digest_hex(self) -> str:
        self._check_fitted()
        return _digest(self.codebook_).hex()

    def save(self, path) -> None:
        self._check_fitted()
        payload = self.codebook_.astype("<f4").tobytes()
        k, d = self.codebook_.shape
        with open(path, "wb") as f:
            f.write(CODEBOOK_MAGIC)
            f.write(struct.pack("<III", CODEBOOK_VERSION, k, d * 4))
            f.write(payload)
            f.write(_digest(self.codebook_))

    @classmethod
    def load(cls, path) -> "PatchKMeans":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < 16 or raw[:4] != CODEBOOK_MAGIC:
            raise DataError(f"{path}: bad codebook magic at byte 0")
        version, k, patch_bytes = struct.unpack_from("<III", raw, 4)
        if version != CODEBOOK_VERSION:
            raise DataError(f"{path}: unsupported codebook version {version} at byte 4")
        d = patch_bytes // 4
        need = 16 + k * patch_bytes + 8
        if len(raw) != need:
            raise DataError(f"{path}: expected {need} bytes, got {len(raw)} (payload at byte 16)")
        codes = np.frombuffer(raw, dtype="<f4", offset=16, count=k * d).reshape(k, d).copy()
        stored = raw[16 + k * patch_bytes :]
        if stored != _digest(codes):
            raise DataError(f"{path}: digest mismatch at byte {16 + k * patch_bytes}")
        patch = int(round((d / 3) ** 0.5))
        if patch * patch * 3 != d:
            raise DataError(f"{path}: codeword length {d} is not a square RGB patch")
        tok = cls(n_codes=k, patch=patch)
        tok.codebook_ = codes
        return tok


def _assign(x: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Nearest code per row; ties go to the lowest index. Chunked for memory."""
    n = len(x)
    assign = np.empty(n, dtype=np.int64)
    dmin = np.empty(n, dtype=np.float64)
    c2 = (codes**2).sum(axis=1)
    step = max(1, 2**22 // max(len(codes), 1))
    for lo in range(0, n, step):
        xs = x[lo : lo + step]
        d2 = xs @ (-2.0 * codes.T)
        d2 += c2[None, :]
        d2 += (xs**2).sum(axis=1)[:, None]
        a = np.argmin(d2, axis=1)
        assign[lo : lo + step] = a
        dmin[lo : lo + step] = d2[np.arange(len(xs)), a]
    np.maximum(dmin, 0.0, out=dmin)
    return assign, dmin, float(dmin.sum())


def _digest(codes: np.ndarray) -> bytes:
    return hashlib.sha256(codes.astype("<f4").tobytes()).digest()[:8]
