"""Self-describing binary checkpoints.

Layout (little-endian throughout): magic `GNM1`, u32 format version, u32
metadata length, canonical JSON metadata (sorted keys, compact separators),
u32 tensor count, then per tensor sorted by name: u32 name length, UTF-8
name, u32 rank, u32 extents, raw float32 data. Canonical ordering makes
save -> load -> save byte-identical.

Tensor names: param/<net>/<name>, buffer/<net>/<name>,
adam/<net>/{m,v}/<name>.
"""

import json
import os
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"GNM1"
FORMAT_VERSION = 1


class Checkpoint:
    """Loaded checkpoint: metadata dict plus name -> float32 array tensors."""

    def __init__(self, meta, tensors):
        self.meta = meta
        self.tensors = tensors

    @property
    def epoch(self):
        return int(self.meta["epoch"])

    @property
    def seed(self):
        return int(self.meta["seed"])

    @property
    def config(self):
        return dict(self.meta["config"])


def _meta_bytes(meta):
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def collect_tensors(networks, optimizers):
    """Flatten parameters, buffers and optimizer moments into named arrays."""
    tensors = {}
    for net_name, net in networks.items():
        for pname, p in net.params.items():
            tensors[f"param/{net_name}/{pname}"] = p.data
        for bname, buf in net.buffers.items():
            tensors[f"buffer/{net_name}/{bname}"] = buf
    for opt_name, state in optimizers.items():
        for pname, arr in state.m.items():
            tensors[f"adam/{opt_name}/m/{pname}"] = arr
        for pname, arr in state.v.items():
            tensors[f"adam/{opt_name}/v/{pname}"] = arr
    return tensors


def save_checkpoint(path, config_dict, epoch, seed, networks, optimizers):
    """Write a checkpoint; returns the path."""
    meta = {
        "format": FORMAT_VERSION,
        "epoch": int(epoch),
        "seed": int(seed),
        "config": config_dict,
        "optim": {
            name: {
                "t": state.t,
                "alpha": state.alpha,
                "beta1": state.beta1,
                "beta2": state.beta2,
                "eps": state.eps,
            }
            for name, state in optimizers.items()
        },
        "networks": {name: net.kind for name, net in networks.items()},
    }
    tensors = collect_tensors(networks, optimizers)
    blob = _meta_bytes(meta)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    os.replace(tmp_path, path)
    return path


def load_checkpoint(path):
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MAGIC:
                raise CheckpointError(f"{path}: bad magic {magic!r} (expected {MAGIC!r})")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: unsupported format version {version} (supported: {FORMAT_VERSION})"
                )
            (meta_len,) = struct.unpack("<I", fh.read(4))
            meta = json.loads(fh.read(meta_len).decode("utf-8"))
            (count,) = struct.unpack("<I", fh.read(4))
            tensors = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<I", fh.read(4))
                name = fh.read(name_len).decode("utf-8")
                (rank,) = struct.unpack("<I", fh.read(4))
                shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
                n_bytes = 4 * int(np.prod(shape, dtype=np.int64)) if rank else 4
                raw = fh.read(n_bytes)
                if len(raw) != n_bytes:
                    raise CheckpointError(f"{path}: truncated tensor {name!r}")
                tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            return Checkpoint(meta, tensors)
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
