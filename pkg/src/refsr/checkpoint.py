"""Versioned binary container for network weights.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"RSRW"
    4       4     uint32 container version (currently 1)
    8       8     uint64 header length L in bytes
    16      L     UTF-8 JSON header (sorted keys, no whitespace)
    16+L    ...   tensor payload, concatenated in header order

The header holds ``architecture_id``, a free-form ``meta`` object and a
``tensors`` list of ``{"name", "dtype", "shape", "offset", "nbytes"}`` entries,
offsets relative to the start of the payload. Parameters are stored as
little-endian float32 (``<f4``); integer buffers as ``<i8``. Saving the same
tensors with the same metadata always produces the same bytes.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RSRW"
VERSION = 1

_DTYPES = {"float32": "<f4", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    architecture_id: str
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries = []
        payload = io.BytesIO()
        for name in sorted(self.tensors):
            t = self.tensors[name].detach().cpu()
            if t.is_floating_point():
                dtype = "float32"
            elif t.dtype in (torch.int64, torch.int32, torch.bool):
                dtype = "int64"
            else:
                raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
            raw = np.ascontiguousarray(t.numpy().astype(_DTYPES[dtype])).tobytes()
            entries.append({"name": name, "dtype": dtype, "shape": list(t.shape),
                            "offset": payload.tell(), "nbytes": len(raw)})
            payload.write(raw)
        header = {"architecture_id": self.architecture_id, "meta": self.meta, "tensors": entries}
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + payload.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:4] != MAGIC:
            raise CheckpointError("not a weights container (bad magic)")
        version, hlen = struct.unpack("<IQ", data[4:16])
        if version != VERSION:
            raise CheckpointError(f"unsupported container version {version}")
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        base = 16 + hlen
        tensors = {}
        for e in header["tensors"]:
            start = base + e["offset"]
            arr = np.frombuffer(data[start:start + e["nbytes"]], dtype=_DTYPES[e["dtype"]])
            arr = arr.astype(np.float32 if e["dtype"] == "float32" else np.int64)
            tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
        return cls(header["architecture_id"], tensors, header.get("meta", {}))

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def optimizer_tensors(opt: torch.optim.Optimizer, prefix: str = "optim.") -> tuple[dict, dict]:
    """Flatten an optimizer's state into (tensors, json-able meta)."""
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"{prefix}{idx}.{key}"] = torch.as_tensor(val, dtype=torch.float32)
    return tensors, {"param_groups": sd["param_groups"]}


def load_optimizer_state(opt: torch.optim.Optimizer, ckpt: Checkpoint, prefix: str = "optim.") -> None:
    flat = ckpt.subset(prefix)
    state: dict[int, dict] = {}
    for name, val in flat.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = val
    groups = ckpt.meta.get("optimizer", {}).get("param_groups")
    if groups is None:
        raise CheckpointError("checkpoint carries no optimizer state")
    opt.load_state_dict({"state": state, "param_groups": groups})
