"""Bit-exact checkpoints.

Layout: a one-line ascii preamble "moelab-ckpt v1 <header-bytes>", then a
JSON header (version, step, config, rng states, adam step counts, tensor
directory with names/shapes/offsets), then a newline, then the raw tensor
payloads concatenated as little-endian float64. Tensor order follows the
directory, so save -> load -> save reproduces the file byte for byte.
"""

import json

import numpy as np

from .config import RunConfig

MAGIC = "moelab-ckpt"
VERSION = 1


def _payload(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path, model, optimizer, step, rng_states, config):
    """rng_states: dict name -> Rng.state() snapshot."""
    tensors = []
    for name, t in model.named_params().items():
        tensors.append((name, t.data))
    for name in optimizer.m:
        tensors.append((f"adam.m.{name}", optimizer.m[name]))
        tensors.append((f"adam.v.{name}", optimizer.v[name]))

    directory = []
    offset = 0
    for name, arr in tensors:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8

    header = {
        "version": VERSION,
        "step": int(step),
        "config": config.to_dict(),
        "rng": rng_states,
        "adam_t": {k: int(v) for k, v in optimizer.t.items()},
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(f"{MAGIC} v{VERSION} {len(blob)}\n".encode("ascii"))
        f.write(blob)
        f.write(b"\n")
        for _, arr in tensors:
            f.write(_payload(arr))


def load_checkpoint(path):
    with open(path, "rb") as f:
        preamble = f.readline().decode("ascii").split()
        if len(preamble) != 3 or preamble[0] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if preamble[1] != f"v{VERSION}":
            raise ValueError(f"{path}: unsupported checkpoint version {preamble[1]}")
        header = json.loads(f.read(int(preamble[2])).decode("utf-8"))
        if f.read(1) != b"\n":
            raise ValueError(f"{path}: corrupt header terminator")
        body = f.read()

    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=start).reshape(shape)
        params[entry["name"]] = np.ascontiguousarray(arr)

    return {
        "step": header["step"],
        "config": RunConfig.from_dict(header["config"]),
        "rng": header["rng"],
        "adam_t": header["adam_t"],
        "tensors": params,
    }


def restore_model(model, snapshot):
    """Copy checkpoint tensors into an already-built model, shape-checked."""
    for name, t in model.named_params().items():
        if name not in snapshot["tensors"]:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        arr = snapshot["tensors"][name]
        if arr.shape != t.data.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {t.data.shape}"
            )
        t.data[:] = arr


def restore_optimizer(optimizer, snapshot):
    for name in optimizer.m:
        m = snapshot["tensors"].get(f"adam.m.{name}")
        v = snapshot["tensors"].get(f"adam.v.{name}")
        if m is None or v is None:
            raise ValueError(f"checkpoint is missing optimizer state for {name!r}")
        optimizer.m[name][:] = m
        optimizer.v[name][:] = v
        optimizer.t[name] = int(snapshot["adam_t"][name])
