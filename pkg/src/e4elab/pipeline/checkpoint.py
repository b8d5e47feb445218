"""Checkpoint container.

Layout of a ``.ckpt`` file::

    b"E4ECKPT1" | manifest length (uint64 LE) | manifest JSON | payload

The manifest holds ``version``, ``config_hash``, ``step``, free-form ``meta``
and a ``tensors`` index of ``{name, shape, dtype, offset, nbytes}``. The
payload is the concatenation of the tensors as little-endian float32 in
index order. The manifest is serialized with sorted keys and no whitespace,
so loading a file and saving it again reproduces it byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ConfigError

MAGIC = b"E4ECKPT1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int = 0
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        index, offset = [], 0
        for name, arr in self.tensors.items():
            nbytes = int(np.asarray(arr).size) * 4
            index.append({"name": name, "shape": list(np.shape(arr)), "dtype": "<f4",
                          "offset": offset, "nbytes": nbytes})
            offset += nbytes
        return {"version": FORMAT_VERSION, "config_hash": self.config_hash, "step": int(self.step),
                "meta": self.meta, "tensors": index}

    def to_bytes(self) -> bytes:
        header = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":")).encode()
        payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.tensors.values())
        return MAGIC + struct.pack("<Q", len(header)) + header + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise ConfigError("not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", data[8:16])
        manifest = json.loads(data[16:16 + hlen].decode())
        if manifest.get("version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {manifest.get('version')}")
        payload = memoryview(data)[16 + hlen:]
        tensors = {}
        for entry in manifest["tensors"]:
            start, nbytes = entry["offset"], entry["nbytes"]
            if start < 0 or start + nbytes > len(payload):
                raise ConfigError(f"tensor {entry['name']} lies outside the payload")
            arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4").reshape(entry["shape"])
            tensors[entry["name"]] = arr.copy()
        return cls(tensors=tensors, step=manifest["step"], config_hash=manifest["config_hash"],
                   meta=manifest["meta"])

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        if not os.path.exists(path):
            raise ConfigError(f"checkpoint not found: {path}")
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def state_dict(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "/"
        return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith(p)}


def module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().float().numpy() for k, v in module.state_dict().items()}


def optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    """Adam moments and step counts, keyed by parameter position."""
    out = {}
    for i, state in sorted(opt.state_dict()["state"].items()):
        for key in ("step", "exp_avg", "exp_avg_sq"):
            if key in state:
                out[f"{prefix}/{i}/{key}"] = torch.as_tensor(state[key]).float().numpy().reshape(np.shape(state[key]))
    return out


def load_optimizer(opt: torch.optim.Optimizer, ckpt: Checkpoint, prefix: str) -> None:
    sd = opt.state_dict()
    state = {}
    flat = ckpt.state_dict(prefix)
    for key, value in flat.items():
        i, name = key.split("/")
        state.setdefault(int(i), {})[name] = value.reshape(()) if name == "step" else value
    sd["state"] = state
    opt.load_state_dict(sd)
