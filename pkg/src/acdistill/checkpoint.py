"""Single-file checkpoint container.

Layout::

    b"ACDCKPT\\0" | u64 little-endian header length | UTF-8 JSON header | array bytes

The header carries ``format_version``, ``role``, ``config``, ``schedule``,
``iteration``, ``rng`` and an ``arrays`` index of ``{name, dtype, shape,
offset, nbytes}`` entries; offsets are relative to the end of the header.
Arrays are stored C-contiguous little-endian, in sorted name order, so the
payload depends only on the array contents.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .schedule import NoiseSchedule

MAGIC = b"ACDCKPT\0"
FORMAT_VERSION = 1
ROLES = ("teacher", "student", "discriminator")


@dataclass
class Checkpoint:
    role: str
    config: dict
    schedule: NoiseSchedule
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "/"
        return {k[len(p) :]: torch.from_numpy(v.copy()) for k, v in self.arrays.items() if k.startswith(p)}

    def has_group(self, prefix: str) -> bool:
        return any(k.startswith(prefix + "/") for k in self.arrays)

    def put_state(self, prefix: str, state: dict[str, torch.Tensor]) -> None:
        for k, v in state.items():
            self.arrays[f"{prefix}/{k}"] = v.detach().cpu().numpy().copy()

    def put_optimizer(self, prefix: str, opt: torch.optim.Optimizer) -> None:
        sd = opt.state_dict()
        for idx, st in sd["state"].items():
            for key, val in st.items():
                self.arrays[f"{prefix}/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
        self.extra[f"{prefix}_param_groups"] = sd["param_groups"]

    def load_optimizer(self, prefix: str, opt: torch.optim.Optimizer) -> None:
        state: dict[int, dict] = {}
        for name, arr in self.group(prefix).items():
            idx, key = name.split("/", 1)
            state.setdefault(int(idx), {})[key] = arr
        groups = self.extra[f"{prefix}_param_groups"]
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        opt.load_state_dict({"state": state, "param_groups": groups})

    def payload_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(self.arrays[k]).astype(self.arrays[k].dtype.newbyteorder("<")).tobytes() for k in sorted(self.arrays))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    index, offset, chunks = [], 0, []
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format_version": ckpt.format_version,
        "role": ckpt.role,
        "config": ckpt.config,
        "schedule": ckpt.schedule.to_dict(),
        "iteration": ckpt.iteration,
        "rng": ckpt.rng,
        "extra": ckpt.extra,
        "arrays": index,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for c in chunks:
            f.write(c)
    tmp.replace(path)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(blob[start : start + n].decode("utf-8"))
    if header["format_version"] > FORMAT_VERSION:
        raise ValueError(f"checkpoint format {header['format_version']} is newer than supported {FORMAT_VERSION}")
    base = start + n
    arrays = {}
    for e in header["arrays"]:
        buf = blob[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return Checkpoint(
        role=header["role"],
        config=header["config"],
        schedule=NoiseSchedule.from_dict(header["schedule"]),
        arrays=arrays,
        iteration=header["iteration"],
        rng=header["rng"],
        extra=header.get("extra", {}),
        format_version=header["format_version"],
    )
