"""On-disk dataset layout and the Middlebury .flo flow format.

Layout per dataset directory:
    manifest.json                dataset version, seed, scenario counts, clips
    queries.jsonl                one JSON object per query
    <clip_id>/frame_000.png ...  8-bit RGB frames
    <clip_id>/flow_000_001.flo   Middlebury format, little-endian
    <clip_id>/occ_000_001.png    8-bit grayscale, 0 = visible, 255 = occluded

Point-labeled datasets (converted real benchmarks) carry no .flo/occ files;
their manifest sets "point_labeled": true and queries.jsonl is authoritative.

All writers are canonical (sorted JSON keys, fixed PNG settings) so writing
the same data twice produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from kltrace.errors import DataError
from kltrace.worlds import Clip, QueryRecord, SceneSpec

FLO_MAGIC = 202021.25  # spells "PIEH" in little-endian float32
DATASET_VERSION = 1


# ---------------------------------------------------------------------------
# .flo


def write_flo(path: Path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DataError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(flow.astype("<f4").tobytes())


def read_flo(path: Path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise DataError(f"{path}: truncated header at byte {len(raw)}")
    (magic,) = struct.unpack_from("<f", raw, 0)
    if magic != FLO_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte 0")
    w, h = struct.unpack_from("<ii", raw, 4)
    if w <= 0 or h <= 0 or w > 99999 or h > 99999:
        raise DataError(f"{path}: implausible dims {w}x{h} at byte 4")
    need = 12 + 8 * w * h
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes, got {len(raw)} (payload at byte 12)")
    flow = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return flow.copy()


# ---------------------------------------------------------------------------
# PNG helpers


def write_png(path: Path, arr: np.ndarray) -> None:
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode=mode).save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except Exception as exc:
        raise DataError(f"{path}: unreadable PNG ({exc})") from exc


# ---------------------------------------------------------------------------
# dataset


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_dataset(
    clips: list[Clip],
    queries: list[QueryRecord],
    dir_path: Path,
    seed: int = 0,
    point_labeled: bool = False,
) -> dict:
    """Serialize clips + queries; returns the manifest dict."""
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    scenario_counts: dict[str, int] = {}
    clip_entries = []
    for clip in clips:
        scenario_counts[clip.scenario] = scenario_counts.get(clip.scenario, 0) + 1
        cdir = root / clip.clip_id
        cdir.mkdir(exist_ok=True)
        for t, frame in enumerate(clip.frames):
            write_png(cdir / f"frame_{t:03d}.png", frame)
        if not point_labeled:
            for t, (flow, occ) in enumerate(zip(clip.flows, clip.occs)):
                write_flo(cdir / f"flow_{t:03d}_{t + 1:03d}.flo", flow)
                write_png(
                    cdir / f"occ_{t:03d}_{t + 1:03d}.png",
                    np.where(occ, 255, 0).astype(np.uint8),
                )
        entry = {
            "id": clip.clip_id,
            "scenario": clip.scenario,
            "n_frames": len(clip.frames),
            "subpixel": clip.subpixel,
        }
        if clip.spec is not None:
            entry["spec"] = asdict(clip.spec)
        clip_entries.append(entry)

    with open(root / "queries.jsonl", "w") as f:
        for q in queries:
            f.write(_dump_json(asdict(q)) + "\n")

    manifest = {
        "version": DATASET_VERSION,
        "seed": seed,
        "point_labeled": point_labeled,
        "scenario_counts": scenario_counts,
        "clips": clip_entries,
    }
    (root / "manifest.json").write_text(_dump_json(manifest) + "\n")
    return manifest


def read_manifest(dir_path: Path) -> dict:
    path = Path(dir_path) / "manifest.json"
    if not path.exists():
        raise DataError(f"{path}: missing manifest")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at byte {exc.pos}") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset version {manifest.get('version')!r}")
    return manifest


def read_queries(dir_path: Path) -> list[QueryRecord]:
    path = Path(dir_path) / "queries.jsonl"
    if not path.exists():
        raise DataError(f"{path}: missing queries.jsonl")
    records = []
    offset = 0
    with open(path, "rb") as f:
        for line_no, line in enumerate(f):
            try:
                obj = json.loads(line)
                records.append(
                    QueryRecord(
                        clip=obj["clip"],
                        frame_a=int(obj["frame_a"]),
                        frame_b=int(obj["frame_b"]),
                        x=float(obj["x"]),
                        y=float(obj["y"]),
                        gt_x=float(obj["gt_x"]),
                        gt_y=float(obj["gt_y"]),
                        occluded=bool(obj["occluded"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise DataError(
                    f"{path}: bad query on line {line_no + 1} at byte {offset} ({exc})"
                ) from exc
            offset += len(line)
    return records


def read_clip(dir_path: Path, entry: dict) -> Clip:
    cdir = Path(dir_path) / entry["id"]
    n = entry["n_frames"]
    frames = []
    for t in range(n):
        p = cdir / f"frame_{t:03d}.png"
        if not p.exists():
            raise DataError(f"{p}: missing frame")
        arr = read_png(p)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DataError(f"{p}: expected RGB frame, got shape {arr.shape}")
        frames.append(arr.astype(np.uint8))
    flows, occs = [], []
    point_labeled = entry.get("point_labeled", False)
    if not point_labeled:
        for t in range(n - 1):
            fp = cdir / f"flow_{t:03d}_{t + 1:03d}.flo"
            op = cdir / f"occ_{t:03d}_{t + 1:03d}.png"
            if not fp.exists() and t == 0:
                # tolerate converted datasets whose entries lack the flag
                point_labeled = True
                break
            flows.append(read_flo(fp))
            occ = read_png(op)
            if occ.ndim != 2:
                raise DataError(f"{op}: occlusion mask must be grayscale")
            occs.append(occ >= 128)
    spec = SceneSpec(**{**entry["spec"], "displacement": tuple(entry["spec"]["displacement"])}) if "spec" in entry else None
    return Clip(
        clip_id=entry["id"],
        scenario=entry.get("scenario", "unknown"),
        frames=frames,
        flows=flows,
        occs=occs,
        subpixel=entry.get("subpixel", False),
        spec=spec,
    )


def read_dataset(dir_path: Path) -> tuple[list[Clip], list[QueryRecord], dict]:
    """Load the whole dataset; returns (clips, queries, manifest)."""
    manifest = read_manifest(dir_path)
    point_labeled = manifest.get("point_labeled", False)
    clips = []
    for entry in manifest["clips"]:
        entry = dict(entry)
        entry.setdefault("point_labeled", point_labeled)
        clips.append(read_clip(dir_path, entry))
    queries = read_queries(dir_path)
    return clips, queries, manifest
