"""Command line harness.

Subcommands cover the full loop: synthesize data, fit the patch codebook,
train a next-frame model, extract flow with the perturb-and-track readout,
score it, sweep ablations, calibrate the occlusion threshold, and render
diagnostic panels.

Conventions:
  * progress and results go to stdout as JSON lines ({"event": ...});
  * failures go to stderr as one JSON object and map to exit codes
    2 (config), 3 (data), 4 (numerical);
  * each run writes into <out>/<timestamp>-<config digest>/ with config.json,
    records.jsonl, report.json, checkpoint.klt, plots/ as applicable;
  * report.json carries no timestamps, so reruns of the same config + seed
    are byte-identical.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import multiprocessing as mp
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from kltrace.dataset_io import read_clip, read_dataset, read_manifest, read_queries, write_dataset
from kltrace.errors import ConfigError, DataError, KltraceError, NumericalError
from kltrace.metrics import compute_report, match_records, write_report_csv, write_report_json
from kltrace.seqmodel import (
    Checkpoint,
    ModelConfig,
    TokenizedDataset,
    TrainSettings,
    init_model,
    train,
)
from kltrace.tokenizer import PatchKMeans
from kltrace.tracer import (
    TraceSettings,
    calibrate_threshold,
    estimate_to_record,
    extract_flows_for_clip,
    inject_perturbation,
    PerturbSpec,
    trace_once,
    _mask_order_seeds,
)
from kltrace.plots import save_plot, trace_panel
from kltrace.worlds import _rng, generate_clip, sample_queries, sample_scene_specs

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "n_clips": 200,
        "frame": 64,
        "queries_per_clip": 10,
        "visible_fraction": 0.8,
        "dot_rate": 0.6,
        "mix": None,
        "point_labeled": False,
    },
    "tokenizer": {"n_codes": 512, "patch": 4, "n_iter": 20, "max_frames": 160},
    "model": {
        "variant": "distributional_random_access",
        "n_codes": 512,
        "grid": [16, 16],
        "model_dim": 128,
        "heads": 4,
        "layers": 4,
        "patch_dim": 48,
        "temperature": 1.0,
        "top_k": 50,
    },
    "train": {
        "steps": 2000,
        "batch_size": 16,
        "lr": 3e-4,
        "grad_clip": 1.0,
        "reveal_max": 0.5,
        "heldout_every": 200,
        "heldout_samples": 64,
        "heldout_fraction": 0.1,
    },
    "trace": {
        "num_masks": 1,
        "scales": [1.0],
        "reveal_fraction": 0.1,
        "reveal_mode": "random_subset",
        "occlusion_threshold": 0.0,
        "mode": "kl",
        "sigma": 2.0,
        "amplitude": 255.0,
    },
    "calibrate": {"fraction": 0.5},
    "ablate": {
        "modes": ["kl", "rgb"],
        "reveal_modes": ["random_subset"],
        "num_masks": [1],
        "reveal_fractions": [0.1],
        "scale_sets": [[1.0]],
        "max_clips": 20,
    },
}


# ---------------------------------------------------------------------------
# config plumbing


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, where)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _apply_set(cfg: dict, dotted: str) -> None:
    if "=" not in dotted:
        raise ConfigError(f"--set expects key=value, got {dotted!r}")
    key, raw = dotted.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(path: str | None, sets: list[str], seed: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, user)
    for s in sets:
        _apply_set(cfg, s)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def config_digest(cfg: dict) -> str:
    payload = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(payload).hexdigest()[:12]


def make_run_dir(out: str, cfg: dict) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{stamp}-{config_digest(cfg)}"
    run = base
    i = 1
    while run.exists():
        i += 1
        run = Path(str(base) + f"-{i}")
    run.mkdir(parents=True)
    (run / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    return run


def emit(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), flush=True)


def _trace_settings(cfg: dict) -> TraceSettings:
    t = cfg["trace"]
    s = TraceSettings(
        num_masks=int(t["num_masks"]),
        scales=tuple(float(x) for x in t["scales"]),
        reveal_fraction=float(t["reveal_fraction"]),
        reveal_mode=str(t["reveal_mode"]),
        occlusion_threshold=None if t["occlusion_threshold"] is None else float(t["occlusion_threshold"]),
        mode=str(t["mode"]),
        rng_seed=int(cfg["seed"]),
        sigma=float(t["sigma"]),
        amplitude=float(t["amplitude"]),
    )
    s.validate()
    return s


def _model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    mc = ModelConfig(
        variant=str(m["variant"]),
        n_codes=int(m["n_codes"]),
        grid=tuple(int(x) for x in m["grid"]),
        model_dim=int(m["model_dim"]),
        heads=int(m["heads"]),
        layers=int(m["layers"]),
        patch_dim=int(m["patch_dim"]),
        temperature=float(m["temperature"]),
        top_k=int(m["top_k"]),
        rng_seed=int(cfg["seed"]),
    )
    mc.validate()
    return mc


def _train_settings(cfg: dict) -> TrainSettings:
    t = cfg["train"]
    s = TrainSettings(
        steps=int(t["steps"]),
        batch_size=int(t["batch_size"]),
        lr=float(t["lr"]),
        grad_clip=float(t["grad_clip"]),
        reveal_max=float(t["reveal_max"]),
        seed=int(cfg["seed"]),
        heldout_every=int(t["heldout_every"]),
        heldout_samples=int(t["heldout_samples"]),
        heldout_fraction=float(t["heldout_fraction"]),
    )
    s.validate()
    return s


# ---------------------------------------------------------------------------
# extraction over a dataset, optionally in parallel


_WORKER: dict = {}


def _worker_init(ckpt_path: str, codebook_path: str) -> None:
    torch.set_num_threads(1)
    ckpt = Checkpoint.load(ckpt_path)
    _WORKER["model"] = ckpt.build_model()
    _WORKER["tok"] = PatchKMeans.load(codebook_path)
    _WORKER["digest"] = ckpt.codebook_digest


def _worker_task(task) -> tuple[int, list]:
    idx, data_dir, entry, points, settings_dict = task
    clip = read_clip(Path(data_dir), entry)
    settings = TraceSettings(**settings_dict)
    ests = extract_flows_for_clip(
        _WORKER["model"], _WORKER["tok"], clip.frames[0], clip.frames[1],
        points, settings, codebook_digest=_WORKER["digest"],
    )
    return idx, ests


def clip_trace_seed(base_seed: int, clip_index: int) -> int:
    """Per-clip settings seed; fixed counter split keeps any worker count
    and visit order on the same stream."""
    return int(_rng(base_seed, 0xCE, clip_index).integers(2**31))


def run_extraction(
    data_dir: str,
    ckpt_path: str,
    codebook_path: str,
    settings: TraceSettings,
    workers: int = 0,
    max_clips: int | None = None,
    scenarios: list[str] | None = None,
    on_clip=None,
):
    """Returns (queries, {mode: estimates}) in manifest clip order."""
    manifest = read_manifest(Path(data_dir))
    queries = read_queries(Path(data_dir))
    by_clip: dict[str, list] = {}
    for q in queries:
        by_clip.setdefault(q.clip, []).append(q)

    entries = [e for e in manifest["clips"] if e["id"] in by_clip]
    if scenarios is not None:
        entries = [e for e in entries if e["scenario"] in scenarios]
    if max_clips is not None:
        entries = entries[:max_clips]

    tasks = []
    for i, entry in enumerate(entries):
        qs = by_clip[entry["id"]]
        pts = [(q.x, q.y) for q in qs]
        per_clip = replace(settings, rng_seed=clip_trace_seed(settings.rng_seed, i))
        tasks.append((i, str(data_dir), entry, pts, asdict(per_clip)))

    results: dict[int, list] = {}
    if workers and workers > 1:
        ctx = mp.get_context("spawn")
        with ctx.Pool(workers, initializer=_worker_init,
                      initargs=(str(ckpt_path), str(codebook_path))) as pool:
            for idx, ests in pool.imap_unordered(_worker_task, tasks):
                results[idx] = ests
                if on_clip:
                    on_clip(len(results), len(tasks))
    else:
        _worker_init(str(ckpt_path), str(codebook_path))
        for t in tasks:
            idx, ests = _worker_task(t)
            results[idx] = ests
            if on_clip:
                on_clip(len(results), len(tasks))

    ordered_queries: list = []
    ordered_ests: dict[str, list] = {}
    for i, entry in enumerate(entries):
        qs = by_clip[entry["id"]]
        ests = results[i]
        for q, e in zip(qs, ests):
            ordered_queries.append(q)
            for mode, est in e.items():
                ordered_ests.setdefault(mode, []).append(est)
    return ordered_queries, ordered_ests


def write_records(path: Path, queries, estimates, settings: TraceSettings) -> None:
    with open(path, "w") as f:
        for q, est in zip(queries, estimates):
            f.write(json.dumps(estimate_to_record(q, est, settings), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg) -> int:
    d = cfg["data"]
    specs = sample_scene_specs(int(d["n_clips"]), int(cfg["seed"]), mix=d["mix"],
                               dot_rate=float(d["dot_rate"]), frame=int(d["frame"]))
    clips, queries = [], []
    for i, spec in enumerate(specs):
        clip = generate_clip(spec)
        clips.append(clip)
        qseed = int(_rng(int(cfg["seed"]), 0x9E, i).integers(2**31))
        try:
            qs = sample_queries(clip, int(d["queries_per_clip"]),
                                float(d["visible_fraction"]), rng_seed=qseed)
        except DataError:
            # clips without any occlusion (static scenes) get visible queries
            qs = sample_queries(clip, int(d["queries_per_clip"]), 1.0, rng_seed=qseed)
        queries.extend(qs)
        if (i + 1) % 25 == 0 or i + 1 == len(specs):
            emit("gen-data", done=i + 1, total=len(specs))
    out = Path(args.out)
    manifest = write_dataset(clips, queries, out, seed=int(cfg["seed"]),
                             point_labeled=bool(d["point_labeled"]))
    emit("done", path=str(out), clips=len(clips), queries=len(queries),
         scenario_counts=manifest["scenario_counts"])
    return 0


def cmd_fit_tokenizer(args, cfg) -> int:
    t = cfg["tokenizer"]
    clips, _, _ = read_dataset(Path(args.data))
    frames = [f for c in clips for f in c.frames]
    max_frames = int(t["max_frames"])
    train_frames = frames[:max_frames]
    tok = PatchKMeans(n_codes=int(t["n_codes"]), patch=int(t["patch"]),
                      n_iter=int(t["n_iter"]), seed=int(cfg["seed"]))
    tok.fit(train_frames)
    holdout = frames[-16:] if len(frames) > max_frames else train_frames[-8:]
    mse = tok.reconstruction_mse(holdout)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tok.save(out)
    emit("done", path=str(out), digest=tok.digest_hex(), reconstruction_mse=mse,
         inertia=tok.inertia_trace_[-1])
    return 0


def cmd_train(args, cfg) -> int:
    run = make_run_dir(args.out, cfg)
    clips, _, _ = read_dataset(Path(args.data))
    tok = PatchKMeans.load(args.codebook)
    mc = _model_config(cfg)
    if mc.n_codes != tok.n_codes:
        raise ConfigError(f"model n_codes {mc.n_codes} != codebook {tok.n_codes}")
    ds = TokenizedDataset.build(clips, tok, heldout_fraction=float(cfg["train"]["heldout_fraction"]))
    model = init_model(mc)
    resume = Checkpoint.load(args.resume) if args.resume else None
    settings = _train_settings(cfg)

    def progress(info: dict) -> None:
        emit("train", **info)

    result = train(model, ds, settings, codebook_digest=tok.digest_hex(),
                   resume=resume, on_progress=progress)
    ckpt_path = run / "checkpoint.klt"
    result.checkpoint.save(ckpt_path)
    with open(run / "loss_trace.jsonl", "w") as f:
        for step, loss in result.loss_trace:
            f.write(json.dumps({"step": step, "loss": loss}) + "\n")
        for step, loss in result.heldout_trace:
            f.write(json.dumps({"step": step, "heldout_loss": loss}) + "\n")
    emit("done", run=str(run), checkpoint=str(ckpt_path),
         final_loss=result.loss_trace[-1][1] if result.loss_trace else None,
         heldout=result.heldout_trace[-1][1] if result.heldout_trace else None)
    return 0


def _mode_for(settings: TraceSettings, variant: str) -> str:
    if variant == "deterministic_l2":
        if settings.mode == "kl":
            raise ConfigError("KL readout needs a distributional variant")
        return "rgb"
    return settings.mode


def cmd_extract(args, cfg, with_report: bool = False) -> int:
    run = make_run_dir(args.out, cfg)
    settings = _trace_settings(cfg)
    ckpt = Checkpoint.load(args.checkpoint)
    mode = _mode_for(settings, ckpt.config.variant)

    def on_clip(done, total):
        if done % 10 == 0 or done == total:
            emit("extract", done=done, total=total)

    queries, ests = run_extraction(args.data, args.checkpoint, args.codebook,
                                   settings, workers=args.workers, on_clip=on_clip)
    write_records(run / "records.jsonl", queries, ests[mode], settings)
    emit("records", path=str(run / "records.jsonl"), n=len(queries))
    if with_report:
        report = compute_report(match_records(queries, ests[mode]))
        write_report_json(run / "report.json", report,
                          extra={"mode": mode, "settings_digest": settings.digest(),
                                 "config_digest": config_digest(cfg)})
        emit("report", path=str(run / "report.json"), **report.to_dict())
    emit("done", run=str(run))
    return 0


def cmd_calibrate(args, cfg) -> int:
    settings = _trace_settings(cfg)
    ckpt = Checkpoint.load(args.checkpoint)
    mode = _mode_for(settings, ckpt.config.variant)
    probe = replace(settings, occlusion_threshold=0.0)
    queries, ests = run_extraction(args.data, args.checkpoint, args.codebook,
                                   probe, workers=args.workers,
                                   max_clips=args.max_clips)
    frac = float(cfg["calibrate"]["fraction"])
    n_cal = max(1, int(round(len(queries) * frac)))
    peaks = np.array([e.confidence for e in ests[mode][:n_cal]])
    labels = np.array([q.occluded for q in queries[:n_cal]])
    threshold, acc = calibrate_threshold(peaks, labels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {"occlusion_threshold": threshold, "calibration_accuracy": acc,
               "n_calibration": int(n_cal), "mode": mode}
    out.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    emit("done", path=str(out), **payload)
    return 0


def cmd_eval(args, cfg) -> int:
    return cmd_extract(args, cfg, with_report=True)


def cmd_ablate(args, cfg) -> int:
    run = make_run_dir(args.out, cfg)
    a = cfg["ablate"]
    base = _trace_settings(cfg)
    variant = Checkpoint.load(args.checkpoint).config.variant
    rows = []
    for reveal_mode in a["reveal_modes"]:
        for mm in a["num_masks"]:
            for scales in a["scale_sets"]:
                for frac in a["reveal_fractions"]:
                    s = replace(base, reveal_mode=str(reveal_mode), num_masks=int(mm),
                                scales=tuple(float(x) for x in scales),
                                reveal_fraction=float(frac))
                    queries, ests = run_extraction(
                        args.data, args.checkpoint, args.codebook, s,
                        workers=args.workers, max_clips=int(a["max_clips"]))
                    for mode in a["modes"]:
                        if mode == "kl" and variant == "deterministic_l2":
                            continue
                        key = "rgb" if variant == "deterministic_l2" else mode
                        rep = compute_report(match_records(queries, ests[key]))
                        row = {"mode": mode, "reveal_mode": reveal_mode,
                               "num_masks": mm, "scales": json.dumps(scales),
                               "reveal_fraction": frac,
                               **rep.to_dict()}
                        rows.append(row)
                        emit("ablate", **row)
    rows.sort(key=lambda r: r["average_distance"])
    write_report_csv(run / "report.csv", rows)
    emit("done", run=str(run), rows=len(rows), path=str(run / "report.csv"))
    return 0


def cmd_plot(args, cfg) -> int:
    run = make_run_dir(args.out, cfg)
    (run / "plots").mkdir()
    settings = _trace_settings(cfg)
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build_model()
    tok = PatchKMeans.load(args.codebook)
    manifest = read_manifest(Path(args.data))
    queries = read_queries(Path(args.data))
    entries = {e["id"]: e for e in manifest["clips"]}
    ids = [e["id"] for e in manifest["clips"]]
    clip_id = args.clip or ids[0]
    if clip_id not in entries:
        raise DataError(f"clip {clip_id!r} not in manifest")
    clip = read_clip(Path(args.data), entries[clip_id])
    qs = [q for q in queries if q.clip == clip_id]
    if not qs:
        raise DataError(f"no queries for clip {clip_id!r}")
    qs = qs[: args.max_queries]
    clip_index = ids.index(clip_id)
    per_clip = replace(settings, rng_seed=clip_trace_seed(settings.rng_seed, clip_index))
    mask, order, sseed = _mask_order_seeds(model, per_clip, 0)
    mode = _mode_for(settings, ckpt.config.variant)
    for i, q in enumerate(qs):
        p = PerturbSpec(center=(q.x, q.y), sigma=settings.sigma, amplitude=settings.amplitude)
        m = trace_once(model, tok, clip.frames[0], clip.frames[1], p, mask, order,
                       sseed, mode=mode, codebook_digest=ckpt.codebook_digest)
        img = trace_panel(clip.frames[0], inject_perturbation(clip.frames[0], p),
                          clip.frames[1], m.values, m.validity, tok.patch,
                          query=(q.x, q.y), gt=None if q.occluded else (q.gt_x, q.gt_y))
        path = run / "plots" / f"{clip_id}_q{i:02d}.png"
        save_plot(path, img)
        emit("plot", path=str(path))
    emit("done", run=str(run), plots=len(qs))
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kltrace",
                                description="zero-shot flow by perturb-and-track")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry by dotted path")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize a labeled clip corpus")
    g.add_argument("--out", required=True)

    f = sub.add_parser("fit-tokenizer", help="fit the patch codebook")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a next-frame model")
    t.add_argument("--data", required=True)
    t.add_argument("--codebook", required=True)
    t.add_argument("--out", default="runs")
    t.add_argument("--resume", default=None)

    for name, help_ in (("extract", "write per-query flow records"),
                        ("eval", "extract and score")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--data", required=True)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--codebook", required=True)
        e.add_argument("--out", default="runs")
        e.add_argument("--workers", type=int, default=0)

    c = sub.add_parser("calibrate-occlusion", help="fit the occlusion threshold")
    c.add_argument("--data", required=True)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--codebook", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--workers", type=int, default=0)
    c.add_argument("--max-clips", type=int, default=None)

    a = sub.add_parser("ablate", help="sweep trace settings into a csv")
    a.add_argument("--data", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--codebook", required=True)
    a.add_argument("--out", default="runs")
    a.add_argument("--workers", type=int, default=0)

    pl = sub.add_parser("plot", help="render trace panels")
    pl.add_argument("--data", required=True)
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--codebook", required=True)
    pl.add_argument("--out", default="runs")
    pl.add_argument("--clip", default=None)
    pl.add_argument("--max-queries", type=int, default=4)
    return p


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit-tokenizer": cmd_fit_tokenizer,
    "train": cmd_train,
    "extract": cmd_extract,
    "eval": cmd_eval,
    "calibrate-occlusion": cmd_calibrate,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}

_EXIT_CODES = {ConfigError: 2, DataError: 3, NumericalError: 4}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed)
        return _COMMANDS[args.command](args, cfg)
    except KltraceError as e:
        code = next((c for t, c in _EXIT_CODES.items() if isinstance(e, t)), 2)
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr, flush=True)
        return code


if __name__ == "__main__":
    sys.exit(main())
