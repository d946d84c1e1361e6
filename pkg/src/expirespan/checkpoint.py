"""Checkpoint files: a text header followed by raw little-endian float64 data.

Header layout (one item per line)::

    EXPIRESPAN-CHECKPOINT 1
    step <int>
    optim <adam step> <skipped>
    config <run config as one-line JSON>
    array <name> float64 <comma-separated shape>
    ...
    END

The payload holds the arrays back to back in header order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "EXPIRESPAN-CHECKPOINT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, arrays: dict, config: dict, step: int, optim: tuple = (0, 0)) -> None:
    lines = [f"{MAGIC} {VERSION}", f"step {int(step)}", f"optim {int(optim[0])} {int(optim[1])}"]
    lines.append("config " + json.dumps(config, sort_keys=True))
    payload = []
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"array name with whitespace: {name!r}")
        a = np.ascontiguousarray(arr, dtype="<f8")
        lines.append(f"array {name} float64 {','.join(str(n) for n in a.shape)}")
        payload.append(a.tobytes())
    lines.append("END")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for chunk in payload:
            fh.write(chunk)
    tmp.replace(path)


def load(path) -> dict:
    """Returns {"step", "optim", "config", "arrays"}."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\nEND\n")
    if end < 0:
        raise CheckpointError("missing END line")
    header = raw[:end].decode("utf-8").split("\n")
    body = memoryview(raw)[end + 5 :]
    if not header or not header[0].startswith(MAGIC):
        raise CheckpointError("not a checkpoint file")
    version = int(header[0].split()[1])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {"step": 0, "optim": (0, 0), "config": {}, "arrays": {}}
    specs = []
    for line in header[1:]:
        key, _, rest = line.partition(" ")
        if key == "step":
            out["step"] = int(rest)
        elif key == "optim":
            a, b = rest.split()
            out["optim"] = (int(a), int(b))
        elif key == "config":
            out["config"] = json.loads(rest)
        elif key == "array":
            name, dtype, shape = rest.split(" ")
            if dtype != "float64":
                raise CheckpointError(f"unsupported dtype {dtype}")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            specs.append((name, dims))
        else:
            raise CheckpointError(f"unknown header line {line!r}")
    off = 0
    for name, dims in specs:
        n = int(np.prod(dims)) if dims else 1
        a = np.frombuffer(body[off : off + 8 * n], dtype="<f8")
        if a.size != n:
            raise CheckpointError(f"truncated payload for {name}")
        out["arrays"][name] = a.reshape(dims).astype(np.float64)
        off += 8 * n
    if off != len(body):
        raise CheckpointError("trailing bytes after payload")
    return out


def model_and_optim_arrays(model, state) -> dict:
    arrays = dict(model.state_arrays())
    if state is not None:
        for k, v in state.m.items():
            arrays[f"adam.m.{k}"] = v
        for k, v in state.v.items():
            arrays[f"adam.v.{k}"] = v
    return arrays


def split_arrays(arrays: dict) -> tuple[dict, dict, dict]:
    params, m, v = {}, {}, {}
    for k, a in arrays.items():
        if k.startswith("adam.m."):
            m[k[7:]] = a
        elif k.startswith("adam.v."):
            v[k[7:]] = a
        else:
            params[k] = a
    return params, m, v


class Rotator:
    """Saves ``ckpt_<step>.bin`` under a directory and keeps the newest ``keep``."""

    def __init__(self, directory, config: dict, keep: int = 2):
        self.dir = Path(directory)
        self.config = config
        self.keep = keep

    def __call__(self, model, state, banks=None) -> Path:
        path = self.dir / f"ckpt_{state.step:08d}.bin"
        save(path, model_and_optim_arrays(model, state), self.config, state.step, (state.step, state.skipped))
        old = sorted(self.dir.glob("ckpt_*.bin"))
        for p in old[: -self.keep]:
            p.unlink()
        return path


def latest(directory) -> Path | None:
    found = sorted(Path(directory).glob("ckpt_*.bin"))
    return found[-1] if found else None
