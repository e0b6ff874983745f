"""DAPM checkpoint container.

Layout (little-endian)::

    magic "DAPM" | version u32 | header length u32 | header (UTF-8 JSON) | tensor blobs

The header holds the config snapshot, phase, adapter mode, epoch, metrics tail and a
tensor index of ``{path, kind, shape, dtype, offset, nbytes}`` with offsets relative to
the start of the blob section. Parameters and BN statistics are stored as f32; the torch
RNG state is stored as a u8 blob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, from_dict
from .data import FormatError
from .model import DapMae, build_model

MAGIC = b"DAPM"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
RNG_PATH = "rng.torch"


class ModeError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: dict
    phase: str
    hda_mode: str
    epoch: int
    tensors: dict[str, np.ndarray]
    kinds: dict[str, str]
    metrics_tail: list[dict] = field(default_factory=list)
    n_classes: int | None = None

    @property
    def train_config(self) -> TrainConfig:
        return from_dict(self.config)

    def parameter_paths(self) -> list[str]:
        return [p for p, k in self.kinds.items() if k == "param"]

    def param_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for path in self.parameter_paths():
            top = path.split(".")[0]
            counts[top] = counts.get(top, 0) + int(self.tensors[path].size)
        return counts


def _state_items(model: DapMae):
    for name, p in model.named_parameters():
        yield name, "param", p
    for name, b in model.named_buffers():
        if name.endswith("num_batches_tracked"):
            continue
        yield name, "buffer", b


def from_model(model: DapMae, cfg: TrainConfig, phase: str, epoch: int, metrics_tail=None, rng_state=None) -> Checkpoint:
    tensors, kinds = {}, {}
    for name, kind, t in _state_items(model):
        tensors[name] = t.detach().cpu().numpy().astype("<f4")
        kinds[name] = kind
    if rng_state is None:
        rng_state = torch.get_rng_state()
    tensors[RNG_PATH] = rng_state.numpy().astype("u1")
    kinds[RNG_PATH] = "rng"
    return Checkpoint(
        config=cfg.to_dict(), phase=phase, hda_mode=model.hda_mode, epoch=epoch,
        tensors=tensors, kinds=kinds, metrics_tail=list(metrics_tail or [])[-5:], n_classes=model.n_classes,
    )


def encode(ckpt: Checkpoint) -> bytes:
    index, blobs, offset = [], [], 0
    for path in sorted(ckpt.tensors):
        arr = ckpt.tensors[path]
        dtype = "u8" if ckpt.kinds[path] == "rng" else "f32"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        index.append({"path": path, "kind": ckpt.kinds[path], "shape": list(arr.shape),
                      "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config, "phase": ckpt.phase, "hda_mode": ckpt.hda_mode, "epoch": ckpt.epoch,
        "metrics_tail": ckpt.metrics_tail, "n_classes": ckpt.n_classes, "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    if len(buf) < _PREFIX.size:
        raise FormatError("truncated checkpoint prefix", len(buf))
    _, version, hlen = _PREFIX.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise FormatError(f"truncated header: expected {hlen} bytes", len(buf))
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header ({exc})", start) from None
    base = start + hlen
    tensors, kinds = {}, {}
    for entry in header.get("tensors", []):
        path = entry["path"]
        if path in tensors:
            raise FormatError(f"duplicate tensor path {path!r}", base + entry["offset"])
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"unknown dtype {entry['dtype']!r} for {path!r}", base + entry["offset"])
        lo, n = base + entry["offset"], entry["nbytes"]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if n != count * dtype.itemsize:
            raise FormatError(f"size mismatch for {path!r}", lo)
        if lo + n > len(buf):
            raise FormatError(f"truncated blob for {path!r}: need {lo + n} bytes, file has {len(buf)}", len(buf))
        tensors[path] = np.frombuffer(buf, dtype=dtype, count=count, offset=lo).reshape(entry["shape"]).copy()
        kinds[path] = entry["kind"]
    return Checkpoint(
        config=header["config"], phase=header["phase"], hda_mode=header["hda_mode"], epoch=header["epoch"],
        tensors=tensors, kinds=kinds, metrics_tail=header.get("metrics_tail", []), n_classes=header.get("n_classes"),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> int:
    data = encode(ckpt)
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def restore_model(ckpt: Checkpoint, cfg: TrainConfig | None = None) -> DapMae:
    """Rebuild the network described by ``ckpt`` and load every stored tensor into it."""
    saved = ckpt.train_config
    cfg = cfg or saved
    arch = saved.copy(precision=cfg.precision)
    arch.model.drop_path = cfg.model.drop_path
    model = build_model(arch)
    if ckpt.n_classes is not None:
        model.add_head(ckpt.n_classes, saved.model.head_hidden)
    if model.use_hda:
        model.hda.set_mode(ckpt.hda_mode)
    load_into(model, ckpt)
    return model


def load_into(model: DapMae, ckpt: Checkpoint) -> None:
    expected = {name: t for name, _, t in _state_items(model)}
    stored = {p for p, k in ckpt.kinds.items() if k != "rng"}
    unknown = stored - expected.keys()
    if unknown:
        raise FormatError(f"unknown parameter path {sorted(unknown)[0]!r}", 0)
    missing = expected.keys() - stored
    if missing:
        raise FormatError(f"checkpoint lacks parameter path {sorted(missing)[0]!r}", 0)
    with torch.no_grad():
        for name, t in expected.items():
            arr = ckpt.tensors[name]
            if tuple(arr.shape) != tuple(t.shape):
                raise FormatError(f"shape mismatch for {name!r}: {arr.shape} vs {tuple(t.shape)}", 0)
            t.copy_(torch.from_numpy(arr).to(t.dtype))


def rng_state(ckpt: Checkpoint) -> torch.Tensor | None:
    arr = ckpt.tensors.get(RNG_PATH)
    return torch.from_numpy(arr.copy()) if arr is not None else None
