"""Bit-exact checkpoint files.

Layout: magic "KLTM", u32 version, u64 header length, canonical JSON header
(config, step counter, codebook digest, tensor directory with byte offsets,
optimizer payload), then raw little-endian float32 tensor data. Loading a
file and saving it again reproduces the original bytes exactly, which is what
makes cross-platform regression tests possible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from kltrace.errors import ConfigError, DataError
from kltrace.seqmodel.network import FlowModel, ModelConfig

CHECKPOINT_MAGIC = b"KLTM"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]                 # model state, float32
    step: int = 0
    codebook_digest: Optional[str] = None
    opt_tensors: dict[str, np.ndarray] = field(default_factory=dict)
    opt_meta: dict = field(default_factory=dict)

    # -- construction --------------------------------------------------------

    @classmethod
    def from_model(
        cls,
        model: FlowModel,
        optimizer: Optional[torch.optim.Adam] = None,
        step: int = 0,
        codebook_digest: Optional[str] = None,
    ) -> "Checkpoint":
        tensors = {
            name: t.detach().numpy().astype(np.float32).copy()
            for name, t in model.state_dict().items()
        }
        opt_tensors: dict[str, np.ndarray] = {}
        opt_meta: dict = {}
        if optimizer is not None:
            group = optimizer.param_groups[0]
            opt_meta = {
                "lr": group["lr"],
                "betas": list(group["betas"]),
                "eps": group["eps"],
                "steps": {},
            }
            by_param = {id(p): n for n, p in model.named_parameters()}
            for p, state in optimizer.state.items():
                name = by_param.get(id(p))
                if name is None:
                    raise ConfigError("optimizer tracks a tensor the model does not own")
                opt_meta["steps"][name] = int(state["step"])
                for key in ("exp_avg", "exp_avg_sq"):
                    opt_tensors[f"{key}.{name}"] = (
                        state[key].detach().numpy().astype(np.float32).copy()
                    )
        return cls(
            config=model.config,
            tensors=tensors,
            step=step,
            codebook_digest=codebook_digest,
            opt_tensors=opt_tensors,
            opt_meta=opt_meta,
        )

    def restore(self, model: FlowModel, optimizer: Optional[torch.optim.Adam] = None) -> None:
        if asdict(model.config) != asdict(self.config):
            raise ConfigError("checkpoint config does not match the model")
        state = {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}
        model.load_state_dict(state)
        if optimizer is not None and self.opt_meta:
            named = dict(model.named_parameters())
            for name, p in named.items():
                if f"exp_avg.{name}" not in self.opt_tensors:
                    continue
                optimizer.state[p] = {
                    "step": torch.tensor(float(self.opt_meta["steps"][name])),
                    "exp_avg": torch.from_numpy(self.opt_tensors[f"exp_avg.{name}"].copy()),
                    "exp_avg_sq": torch.from_numpy(self.opt_tensors[f"exp_avg_sq.{name}"].copy()),
                }

    def build_model(self) -> FlowModel:
        model = FlowModel(self.config)
        self.restore(model)
        model.eval()
        return model

    # -- serialization ---------------------------------------------------------

    def save(self, path) -> None:
        names = list(self.tensors)
        opt_names = list(self.opt_tensors)
        directory, offset = [], 0
        blobs = []
        for kind, group in (("tensors", names), ("opt_tensors", opt_names)):
            for name in group:
                arr = (self.tensors if kind == "tensors" else self.opt_tensors)[name]
                blob = arr.astype("<f4").tobytes()
                directory.append(
                    {"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset}
                )
                blobs.append(blob)
                offset += len(blob)
        header = {
            "config": _config_dict(self.config),
            "step": self.step,
            "codebook_digest": self.codebook_digest,
            "directory": directory,
            "opt_meta": self.opt_meta,
        }
        hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(struct.pack("<Q", len(hjson)))
            f.write(hjson)
            for blob in blobs:
                f.write(blob)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic at byte 0")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version} at byte 4")
        (hlen,) = struct.unpack_from("<Q", raw, 8)
        if 16 + hlen > len(raw):
            raise DataError(f"{path}: truncated header at byte 16")
        try:
            header = json.loads(raw[16 : 16 + hlen])
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid header JSON at byte {16 + exc.pos}") from exc
        data = raw[16 + hlen :]
        tensors: dict[str, np.ndarray] = {}
        opt_tensors: dict[str, np.ndarray] = {}
        for entry in header["directory"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            end = start + 4 * count
            if end > len(data):
                raise DataError(f"{path}: tensor {entry['name']} overruns file at byte {16 + hlen + start}")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape).copy()
            (tensors if entry["kind"] == "tensors" else opt_tensors)[entry["name"]] = arr
        cfg = header["config"]
        config = ModelConfig(**{**cfg, "grid": tuple(cfg["grid"])})
        return cls(
            config=config,
            tensors=tensors,
            step=int(header["step"]),
            codebook_digest=header["codebook_digest"],
            opt_tensors=opt_tensors,
            opt_meta=header.get("opt_meta", {}),
        )


def _config_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["grid"] = list(d["grid"])
    return d
