"""Synthetic two-frame (and short multi-frame) clips with exact ground truth.

Every clip is rendered nearest-neighbor from layered rigid objects, so for
integer motions the warp identity holds exactly: frame2[p + flow(p)] ==
frame1[p] wherever p is not occluded. Occlusion masks are derived from the
renderer's per-pixel layer ids, never hand-painted.

Scenario taxonomy covers the qualitative challenge categories: plain
translation, in-place rotation, motion behind occluding bars, textureless
(flat) regions, identical-twin position swaps, and full-frame camera pans.
Twin swaps follow object identity, not appearance: the ground-truth flow
says the sprites exchanged places even though the two frames look alike.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict, replace
from typing import Optional

import numpy as np

from kltrace.errors import ConfigError, DataError

SCENARIOS = (
    "translate",
    "rotate_inplace",
    "occluder_pass",
    "textureless_region",
    "twin_swap",
    "camera_pan",
)

SHAPES = ("square", "disk")
TEXTURES = ("flat", "stripes", "blocks")

# Distinct, non-white colors so the white tracer bump never blends in.
PALETTE = np.array(
    [
        (200, 44, 44), (44, 160, 44), (52, 84, 200), (204, 164, 40),
        (160, 60, 180), (40, 180, 180), (128, 128, 128), (228, 120, 40),
        (100, 56, 24), (28, 104, 64), (64, 64, 136), (184, 184, 184),
    ],
    dtype=np.uint8,
)

# Frames must tile into patches; 4 is the package-wide default patch size.
DEFAULT_PATCH = 4


@dataclass(frozen=True)
class SceneSpec:
    """Full recipe for one clip; all randomness derives from rng_seed."""

    scenario: str
    shape: str = "square"
    size: int = 16                      # sprite side / diameter, pixels
    texture: str = "stripes"
    texture_seed: int = 0
    displacement: tuple[int, int] = (6, 0)   # (dx, dy) pixels per frame step
    angle_deg: float = 90.0                  # rotate_inplace only
    background_seed: int = 0
    rng_seed: int = 0
    width: int = 64
    height: int = 64
    n_frames: int = 2
    dots: int = 0                       # small white rider dots on the scene
    subpixel: bool = False              # allow non-integer motion (metrics-only)

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture {self.texture!r}")
        if self.width % DEFAULT_PATCH or self.height % DEFAULT_PATCH:
            raise ConfigError(
                f"frame dims {self.width}x{self.height} must be multiples of {DEFAULT_PATCH}"
            )
        if not (1 <= self.size <= min(self.width, self.height)):
            raise ConfigError(f"sprite size {self.size} larger than frame")
        dx, dy = self.displacement
        if abs(dx) > self.width // 2 or abs(dy) > self.height // 2:
            raise ConfigError(f"displacement {self.displacement} exceeds half the frame extent")
        if self.n_frames < 2:
            raise ConfigError("clips need at least 2 frames")
        if not self.subpixel:
            if float(dx) != int(dx) or float(dy) != int(dy):
                raise ConfigError("non-integer displacement requires subpixel=True")
            if self.scenario == "rotate_inplace" and self.angle_deg % 90 != 0:
                raise ConfigError("non-quarter-turn rotation requires subpixel=True")
        if self.dots < 0:
            raise ConfigError("dots must be >= 0")

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(payload).hexdigest()[:12]


@dataclass
class Clip:
    """Rendered frames plus per-consecutive-pair ground truth."""

    clip_id: str
    scenario: str
    frames: list[np.ndarray]          # (H, W, 3) uint8
    flows: list[np.ndarray]           # (H, W, 2) float32, (u, v), frame t -> t+1
    occs: list[np.ndarray]            # (H, W) bool, True = not visible in t+1
    subpixel: bool = False
    spec: Optional[SceneSpec] = None
    # per-frame visible layer ids; populated by the renderer, not serialized
    id_maps: list[np.ndarray] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.frames[0].shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].shape[1]


@dataclass
class QueryRecord:
    clip: str
    frame_a: int
    frame_b: int
    x: float
    y: float
    gt_x: float
    gt_y: float
    occluded: bool


# ---------------------------------------------------------------------------
# layers


@dataclass
class _Layer:
    layer_id: int
    z: int
    colors: np.ndarray                 # (N, 3) uint8
    track: list[np.ndarray]            # per frame: (N, 2) float32 (y, x)
    # pixels actually painted per frame; equals rounded track for rigid
    # integer motion, but dense inverse-sampled footprints for subpixel moves
    paint: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    custom_paint: bool = False

    def default_paint(self) -> None:
        self.paint = [
            (np.rint(pos).astype(np.int64), self.colors) for pos in self.track
        ]


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def _texture(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency textures the 512-code tokenizer can represent."""
    idx = rng.permutation(len(PALETTE))
    if kind == "flat":
        return np.tile(PALETTE[idx[0]], (h, w, 1))
    if kind == "stripes":
        period = int(rng.choice([8, 16]))
        axis = int(rng.integers(2))
        coords = np.arange(h if axis == 0 else w) // (period // 2)
        bands = PALETTE[np.where(coords % 2 == 0, idx[0], idx[1])]
        if axis == 0:
            return np.repeat(bands[:, None, :], w, axis=1)
        return np.repeat(bands[None, :, :], h, axis=0)
    if kind == "blocks":
        bh, bw = -(-h // 8), -(-w // 8)
        choice = rng.integers(0, 3, size=(bh, bw))
        grid = PALETTE[idx[:3]][choice]
        return np.repeat(np.repeat(grid, 8, axis=0), 8, axis=1)[:h, :w]
    raise ConfigError(f"unknown texture {kind!r}")


def _sprite_mask(shape: str, size: int) -> np.ndarray:
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disk":
        c = (size - 1) / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
    raise ConfigError(f"unknown shape {shape!r}")


def _grid_positions(h: int, w: int, y0: int = 0, x0: int = 0) -> np.ndarray:
    yy, xx = np.mgrid[y0 : y0 + h, x0 : x0 + w]
    return np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float32)


def _make_background(spec: SceneSpec, static: bool = True) -> _Layer:
    rng = _rng(spec.background_seed, 0xB6)
    tex = _texture(spec.texture if spec.scenario != "textureless_region" else "flat",
                   spec.height, spec.width, rng)
    pos = _grid_positions(spec.height, spec.width)
    layer = _Layer(0, 0, tex.reshape(-1, 3), [pos.copy() for _ in range(spec.n_frames)])
    layer.default_paint()
    return layer


def _sprite_layer(spec: SceneSpec, layer_id: int, z: int, mask: np.ndarray,
                  tex: np.ndarray, y0: int, x0: int) -> _Layer:
    ys, xs = np.nonzero(mask)
    pos = np.stack([ys + y0, xs + x0], axis=1).astype(np.float32)
    colors = tex[ys, xs]
    return _Layer(layer_id, z, colors, [pos.copy() for _ in range(spec.n_frames)])


def _apply_translation(layer: _Layer, dx: float, dy: float) -> None:
    for t, pos in enumerate(layer.track):
        pos += np.array([dy * t, dx * t], dtype=np.float32)


def _fits(spec: SceneSpec, y0: int, x0: int, size: int, t_max: int,
          dx: float = 0.0, dy: float = 0.0) -> bool:
    for t in range(t_max):
        ty, tx = y0 + dy * t, x0 + dx * t
        if ty < 0 or tx < 0 or ty + size > spec.height or tx + size > spec.width:
            return False
    return True


def _sample_start(spec: SceneSpec, rng: np.random.Generator, size: int,
                  dx: float, dy: float) -> tuple[int, int]:
    lo_y = max(0, int(np.ceil(-dy * (spec.n_frames - 1))))
    hi_y = min(spec.height - size, int(np.floor(spec.height - size - dy * (spec.n_frames - 1))))
    lo_x = max(0, int(np.ceil(-dx * (spec.n_frames - 1))))
    hi_x = min(spec.width - size, int(np.floor(spec.width - size - dx * (spec.n_frames - 1))))
    if hi_y < lo_y or hi_x < lo_x:
        raise ConfigError(
            f"motion {(dx, dy)} would push a size-{size} sprite out of the {spec.width}x{spec.height} frame"
        )
    return int(rng.integers(lo_y, hi_y + 1)), int(rng.integers(lo_x, hi_x + 1))


def _rot90_local_map(size: int, quarters: int) -> tuple[np.ndarray, np.ndarray]:
    """(i, j) -> rotated (i', j') matching np.rot90(A, quarters)."""
    ii, jj = np.mgrid[0:size, 0:size]
    k = quarters % 4
    if k == 0:
        return ii, jj
    if k == 1:
        return size - 1 - jj, ii
    if k == 2:
        return size - 1 - ii, size - 1 - jj
    return jj, size - 1 - ii


def _build_layers(spec: SceneSpec) -> list[_Layer]:
    rng = _rng(spec.rng_seed, 0x5C)
    tex_rng = _rng(spec.texture_seed, 0x7E)
    dx, dy = float(spec.displacement[0]), float(spec.displacement[1])
    size = spec.size
    mask = _sprite_mask(spec.shape, size)
    tex = _texture(spec.texture, size, size, tex_rng)

    if spec.scenario == "camera_pan":
        # Everything shifts by (dx, dy) per step; background comes from a
        # padded world so no frame pixel is ever unfilled.
        steps = spec.n_frames - 1
        pad = int(np.ceil(max(abs(dx), abs(dy)) * steps)) + 1
        wrng = _rng(spec.background_seed, 0xB6)
        world = _texture(spec.texture, spec.height + 2 * pad, spec.width + 2 * pad, wrng)
        bg_pos = _grid_positions(spec.height + 2 * pad, spec.width + 2 * pad, -pad, -pad)
        bg = _Layer(0, 0, world.reshape(-1, 3), [bg_pos.copy() for _ in range(spec.n_frames)])
        _apply_translation(bg, dx, dy)
        bg.default_paint()
        layers = [bg]
        # one static-in-world sprite, kept in frame across the pan
        y0, x0 = _sample_start(spec, rng, size, dx, dy)
        sp = _sprite_layer(spec, 1, 1, mask, tex, y0, x0)
        _apply_translation(sp, dx, dy)
        sp.default_paint()
        layers.append(sp)
        return layers

    layers = [_make_background(spec)]

    if spec.scenario in ("translate", "textureless_region"):
        if spec.scenario == "textureless_region":
            tex = _texture("flat", size, size, tex_rng)
            bg_img = layers[0].colors.reshape(spec.height, spec.width, 3)
            if np.array_equal(tex[0, 0], bg_img[spec.height // 2, spec.width // 2]):
                row = np.nonzero((PALETTE == tex[0, 0]).all(axis=1))[0][0]
                tex = np.tile(PALETTE[(row + 1) % len(PALETTE)], (size, size, 1))
        y0, x0 = _sample_start(spec, rng, size, dx, dy)
        sp = _sprite_layer(spec, 1, 1, mask, tex, y0, x0)
        _apply_translation(sp, dx, dy)
        sp.default_paint()
        layers.append(sp)

    elif spec.scenario == "rotate_inplace":
        y0, x0 = _sample_start(spec, rng, size, 0.0, 0.0)
        sp = _sprite_layer(spec, 1, 1, mask, tex, y0, x0)
        if spec.angle_deg % 90 == 0:
            quarters = int(spec.angle_deg // 90)
            ys, xs = np.nonzero(mask)
            for t in range(spec.n_frames):
                ri, rj = _rot90_local_map(size, quarters * t)
                sp.track[t] = np.stack(
                    [ri[ys, xs] + y0, rj[ys, xs] + x0], axis=1
                ).astype(np.float32)
            sp.default_paint()
        else:
            _rotate_subpixel(sp, spec, mask, tex, y0, x0)
        layers.append(sp)

    elif spec.scenario == "occluder_pass":
        # Static high-z bar; the sprite translates into / behind it, so the
        # second frame always hides part of the sprite.
        if abs(dx) < 4:
            raise ConfigError("occluder_pass needs |dx| >= 4 to reach the bar")
        bar_w = 8
        bar_x = spec.width // 2 - bar_w // 2 + int(rng.integers(-4, 5))
        bar_mask = np.zeros((spec.height, spec.width), dtype=bool)
        bar_mask[:, bar_x : bar_x + bar_w] = True
        bar_tex = np.tile(PALETTE[int(rng.integers(len(PALETTE)))], (spec.height, spec.width, 1))
        y0, _ = _sample_start(spec, rng, size, 0.0, dy)
        # frame-2 sprite span must overlap the bar columns; frame-1 span must
        # not, so the occluded pixels appear between the frames of the pair
        lo = int(np.ceil(bar_x - size - dx + 1))
        hi = int(np.floor(bar_x + bar_w - dx - 1))
        if dx > 0:
            hi = min(hi, bar_x - size)       # start fully left of the bar
        else:
            lo = max(lo, bar_x + bar_w)      # start fully right of the bar
        lo = max(lo, 0 if dx > 0 else int(np.ceil(-dx)))
        hi = min(hi, spec.width - size - (int(np.ceil(dx)) if dx > 0 else 0))
        if hi < lo:
            raise ConfigError(
                f"occluder_pass geometry impossible for size={size}, dx={dx}"
            )
        x0 = int(rng.integers(lo, hi + 1))
        sp = _sprite_layer(spec, 1, 1, mask, tex, y0, x0)
        _apply_translation(sp, dx, dy)
        sp.default_paint()
        bar = _sprite_layer(spec, 2, 2, bar_mask, bar_tex, 0, 0)
        bar.default_paint()
        layers.extend([sp, bar])

    elif spec.scenario == "twin_swap":
        # Two identical sprites exchange positions; identity defines the flow.
        gap = size + 4
        if spec.width - size - gap < 0:
            raise ConfigError(f"frame too small for twin sprites of size {size}")
        y0, _ = _sample_start(spec, rng, size, 0.0, 0.0)
        x0 = int(rng.integers(0, spec.width - size - gap + 1))
        x1 = x0 + gap
        a = _sprite_layer(spec, 1, 1, mask, tex, y0, x0)
        b = _sprite_layer(spec, 2, 2, mask, tex, y0, x1)
        shift = float(x1 - x0)
        for t in range(spec.n_frames):
            off = shift if t % 2 == 1 else 0.0
            a.track[t] = a.track[0] + np.array([0.0, off], dtype=np.float32)
            b.track[t] = b.track[0] - np.array([0.0, off], dtype=np.float32)
        a.default_paint()
        b.default_paint()
        layers.extend([a, b])

    else:  # pragma: no cover - validate() already rejects
        raise ConfigError(f"unknown scenario {spec.scenario!r}")

    return layers


def _rotate_subpixel(sp: _Layer, spec: SceneSpec, mask: np.ndarray,
                     tex: np.ndarray, y0: int, x0: int) -> None:
    """Arbitrary-angle rotation: forward track for flow, inverse NN paint."""
    size = mask.shape[0]
    c = (size - 1) / 2.0
    ys, xs = np.nonzero(mask)
    sp.paint = []
    sp.custom_paint = True
    for t in range(spec.n_frames):
        theta = np.deg2rad(spec.angle_deg * t)
        cos, sin = np.cos(theta), np.sin(theta)
        ry = (ys - c) * cos + (xs - c) * sin
        rx = -(ys - c) * sin + (xs - c) * cos
        sp.track[t] = np.stack([ry + c + y0, rx + c + x0], axis=1).astype(np.float32)
        # inverse sample a dense footprint
        gy, gx = np.mgrid[0:size, 0:size]
        sy = (gy - c) * cos - (gx - c) * sin + c
        sx = (gy - c) * sin + (gx - c) * cos + c
        syi, sxi = np.rint(sy).astype(int), np.rint(sx).astype(int)
        ok = (syi >= 0) & (syi < size) & (sxi >= 0) & (sxi < size)
        ok &= mask[np.clip(syi, 0, size - 1), np.clip(sxi, 0, size - 1)]
        pos = np.stack([gy[ok] + y0, gx[ok] + x0], axis=1).astype(np.int64)
        sp.paint.append((pos, tex[syi[ok], sxi[ok]]))


def _add_rider_dots(layers: list[_Layer], spec: SceneSpec) -> None:
    """Recolor small white bumps into layer textures; they move with the layer.

    These decorations put bump-like patches into the training distribution so
    the tokenizer and model treat an injected probe like any other content.
    """
    rng = _rng(spec.rng_seed, 0xD0)
    sigma = 1.3
    candidates = [l for l in layers if l.z > 0 and not l.custom_paint]
    if not candidates:
        candidates = [l for l in layers if not l.custom_paint]
    if not candidates:
        return
    for _ in range(spec.dots):
        layer = candidates[int(rng.integers(len(candidates)))]
        pos0 = layer.track[0]
        inside = (
            (pos0[:, 0] >= 2) & (pos0[:, 0] <= spec.height - 3)
            & (pos0[:, 1] >= 2) & (pos0[:, 1] <= spec.width - 3)
        )
        idx = np.nonzero(inside)[0]
        if len(idx) == 0:
            continue
        anchor = pos0[idx[int(rng.integers(len(idx)))]]
        d2 = ((pos0 - anchor) ** 2).sum(axis=1)
        w = np.exp(-d2 / (2 * sigma * sigma))[:, None]
        mixed = layer.colors.astype(np.float64) + (255.0 - layer.colors) * w
        layer.colors = np.clip(np.rint(mixed), 0, 255).astype(np.uint8)
        layer.default_paint()


def _paint_frame(layers: list[_Layer], t: int, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    pixels = np.zeros((h, w, 3), dtype=np.uint8)
    ids = np.full((h, w), -1, dtype=np.int32)
    for layer in sorted(layers, key=lambda l: l.z):
        pos, colors = layer.paint[t]
        ok = (pos[:, 0] >= 0) & (pos[:, 0] < h) & (pos[:, 1] >= 0) & (pos[:, 1] < w)
        pixels[pos[ok, 0], pos[ok, 1]] = colors[ok]
        ids[pos[ok, 0], pos[ok, 1]] = layer.layer_id
    if (ids < 0).any():
        raise DataError("renderer left unfilled pixels; background does not cover the frame")
    return pixels, ids


def generate_clip(spec: SceneSpec) -> Clip:
    """Render a clip; deterministic function of the spec."""
    spec.validate()
    layers = _build_layers(spec)
    if spec.dots:
        _add_rider_dots(layers, spec)
    h, w = spec.height, spec.width
    painted = [_paint_frame(layers, t, h, w) for t in range(spec.n_frames)]
    frames = [p[0] for p in painted]
    id_maps = [p[1] for p in painted]

    flows, occs = [], []
    for t in range(spec.n_frames - 1):
        flow = np.zeros((h, w, 2), dtype=np.float32)
        occ = np.zeros((h, w), dtype=bool)
        for layer in layers:
            p1 = layer.track[t]
            p2 = layer.track[t + 1]
            p1i = np.rint(p1).astype(np.int64)
            inb = (p1i[:, 0] >= 0) & (p1i[:, 0] < h) & (p1i[:, 1] >= 0) & (p1i[:, 1] < w)
            own = np.zeros(len(p1i), dtype=bool)
            own[inb] = id_maps[t][p1i[inb, 0], p1i[inb, 1]] == layer.layer_id
            sel = np.nonzero(own)[0]
            ys, xs = p1i[sel, 0], p1i[sel, 1]
            d = p2[sel] - p1[sel]
            flow[ys, xs, 0] = d[:, 1]
            flow[ys, xs, 1] = d[:, 0]
            tgt = np.rint(p2[sel]).astype(np.int64)
            oob = (tgt[:, 0] < 0) | (tgt[:, 0] >= h) | (tgt[:, 1] < 0) | (tgt[:, 1] >= w)
            covered = np.zeros(len(sel), dtype=bool)
            ti = tgt[~oob]
            covered[~oob] = id_maps[t + 1][ti[:, 0], ti[:, 1]] != layer.layer_id
            occ[ys, xs] = oob | covered
        flows.append(flow)
        occs.append(occ)

    return Clip(
        clip_id=spec.digest(),
        scenario=spec.scenario,
        frames=frames,
        flows=flows,
        occs=occs,
        subpixel=spec.subpixel,
        spec=spec,
        id_maps=id_maps,
    )


# ---------------------------------------------------------------------------
# queries


def sample_queries(
    clip: Clip,
    n: int,
    visible_fraction: float,
    rng_seed: int,
    pair: int = 0,
) -> list[QueryRecord]:
    """Draw query points with ground truth read off the flow field.

    Visible queries prefer moving pixels (anything with nonzero flow) so the
    benchmark is not dominated by trivial static-background points; clips
    with no motion at all fall back to any visible pixel.
    """
    if not 0.0 <= visible_fraction <= 1.0:
        raise ConfigError(f"visible_fraction must be in [0, 1], got {visible_fraction}")
    if n < 0:
        raise ConfigError("n must be >= 0")
    if n == 0:
        return []
    if pair < 0 or pair >= len(clip.flows):
        raise ConfigError(f"clip has no frame pair {pair}")

    flow, occ = clip.flows[pair], clip.occs[pair]
    moving = (np.abs(flow) > 1e-6).any(axis=2)
    vis_pool = moving & ~occ
    if not vis_pool.any():
        vis_pool = ~occ
    occ_pool = occ

    n_occ = int(round(n * (1.0 - visible_fraction)))
    n_vis = n - n_occ
    rng = _rng(rng_seed, 0x9A)
    records: list[QueryRecord] = []
    for pool, count, occluded in ((vis_pool, n_vis, False), (occ_pool, n_occ, True)):
        ys, xs = np.nonzero(pool)
        if count > len(ys):
            kind = "occluded" if occluded else "visible"
            raise DataError(
                f"clip {clip.clip_id} has only {len(ys)} {kind} pixels, need {count}"
            )
        if count == 0:
            continue
        pick = rng.choice(len(ys), size=count, replace=False)
        for i in np.sort(pick):
            y, x = int(ys[i]), int(xs[i])
            u, v = float(flow[y, x, 0]), float(flow[y, x, 1])
            records.append(
                QueryRecord(
                    clip=clip.clip_id,
                    frame_a=pair,
                    frame_b=pair + 1,
                    x=float(x),
                    y=float(y),
                    gt_x=x + u,
                    gt_y=y + v,
                    occluded=occluded,
                )
            )
    return records


# ---------------------------------------------------------------------------
# corpus sampling


DEFAULT_MIX = {
    "translate": 0.30,
    "rotate_inplace": 0.10,
    "occluder_pass": 0.20,
    "textureless_region": 0.10,
    "twin_swap": 0.20,
    "camera_pan": 0.10,
}


def _mix_counts(n: int, mix: dict[str, float]) -> dict[str, int]:
    total = sum(mix.values())
    raw = {k: n * v / total for k, v in mix.items()}
    counts = {k: int(np.floor(r)) for k, r in raw.items()}
    remainder = n - sum(counts.values())
    order = sorted(mix, key=lambda k: (counts[k] - raw[k], k))
    for k in order[:remainder]:
        counts[k] += 1
    return counts


def sample_scene_specs(
    n: int,
    master_seed: int,
    mix: Optional[dict[str, float]] = None,
    dot_rate: float = 0.6,
    frame: int = 64,
) -> list[SceneSpec]:
    """Deterministic corpus recipe: counter-split seeds, scenario mix honored."""
    mix = dict(mix or DEFAULT_MIX)
    unknown = set(mix) - set(SCENARIOS)
    if unknown:
        raise ConfigError(f"unknown scenarios in mix: {sorted(unknown)}")
    if frame < 48 and "occluder_pass" in mix:
        # the 8-px occluder bar needs room; small frames fold its share into
        # plain translation
        mix["translate"] = mix.get("translate", 0.0) + mix.pop("occluder_pass")
    counts = _mix_counts(n, mix)
    size_lo = max(3, frame // 5)
    size_hi = max(size_lo + 1, frame // 3)
    d_lo = max(1, frame // 16)
    d_hi = max(d_lo + 1, frame // 5)
    specs: list[SceneSpec] = []
    i = 0
    for scenario in SCENARIOS:
        for _ in range(counts.get(scenario, 0)):
            rng = _rng(master_seed, 0xC0, i)
            size = int(rng.integers(size_lo, size_hi + 1))
            dx = int(rng.integers(d_lo, d_hi + 1)) * int(rng.choice([-1, 1]))
            dy = int(rng.integers(0, frame // 8 + 1)) * int(rng.choice([-1, 1]))
            if scenario == "occluder_pass" and abs(dx) < 4:
                dx = 4 * int(np.sign(dx) or 1)
            if scenario == "camera_pan":
                dx, dy = int(np.sign(dx) * max(3, abs(dx) // 2)), int(np.sign(dy) * (abs(dy) // 2))
            texture = str(rng.choice(["stripes", "blocks"])) if scenario != "textureless_region" else "flat"
            if scenario == "rotate_inplace":
                texture = str(rng.choice(["stripes", "blocks"]))
            spec = SceneSpec(
                scenario=scenario,
                shape=str(rng.choice(SHAPES)),
                size=size,
                texture=texture,
                texture_seed=int(rng.integers(2**31)),
                displacement=(dx, dy),
                angle_deg=float(rng.choice([90.0, 180.0, 270.0])),
                background_seed=int(rng.integers(2**31)),
                rng_seed=int(rng.integers(2**31)),
                width=frame,
                height=frame,
                dots=int(rng.random() < dot_rate) + int(rng.random() < dot_rate / 2),
            )
            if scenario == "twin_swap":
                spec = replace(spec, displacement=(0, 0))
            specs.append(spec)
            i += 1
    return specs
