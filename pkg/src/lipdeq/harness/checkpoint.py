"""Checkpoint directory: ``manifest.txt`` plus one ``weights.bin``.

The manifest is ``key = value`` text: the format version, an echo of the
model configuration and one ``tensor.<name> = <shape>|<offset>`` line per
array, in blob order.  The blob holds little-endian float32 values,
row-major, back to back.  Power-iteration probes are stored as tensors named
``u:<conv>``.
"""

from __future__ import annotations

import os

import numpy as np

from ..model import ModelParams, build_model
from .config import model_config_from_items, model_config_items

FORMAT = "LDEQ1"
MANIFEST = "manifest.txt"
BLOB = "weights.bin"
_LE32 = np.dtype("<f4")


class CheckpointError(ValueError):
    def __init__(self, message: str, tensor: str | None = None):
        self.tensor = tensor
        super().__init__(f"{tensor}: {message}" if tensor else message)


def _arrays(params: ModelParams):
    for name, a in params.tensors.items():
        yield name, a
    for name, u in params.u_state.items():
        yield f"u:{name}", u


def save_checkpoint(params: ModelParams, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = [f"format = {FORMAT}"]
    lines += [f"config.{k} = {v}" for k, v in model_config_items(params.cfg)]
    offset, chunks = 0, []
    for name, a in _arrays(params):
        data = np.ascontiguousarray(a, dtype=_LE32).tobytes()
        shape = "x".join(str(d) for d in a.shape)
        lines.append(f"tensor.{name} = {shape}|{offset}")
        chunks.append(data)
        offset += len(data)
    # write the blob first so a manifest never points at a missing file
    tmp = os.path.join(directory, BLOB + ".tmp")
    with open(tmp, "wb") as fh:
        for c in chunks:
            fh.write(c)
    os.replace(tmp, os.path.join(directory, BLOB))
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(directory):
    """Return ``(format, config_items, [(tensor, shape, offset), ...])``."""
    path = os.path.join(directory, MANIFEST)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"no {MANIFEST} in {directory}") from None
    fmt, items, tensors = None, [], []
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"{MANIFEST} line {no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "format":
            fmt = value
        elif key.startswith("config."):
            items.append((key[len("config."):], value))
        elif key.startswith("tensor."):
            name = key[len("tensor."):]
            try:
                shape_s, off_s = value.split("|")
                shape = tuple(int(d) for d in shape_s.split("x")) if shape_s else ()
                tensors.append((name, shape, int(off_s)))
            except ValueError:
                raise CheckpointError(f"malformed entry {value!r}", name) from None
        else:
            raise CheckpointError(f"{MANIFEST} line {no}: unknown key {key!r}")
    return fmt, items, tensors


def load_checkpoint(directory) -> ModelParams:
    fmt, items, tensors = read_manifest(directory)
    if fmt != FORMAT:
        raise CheckpointError(f"format version {fmt!r} is not {FORMAT!r}")
    cfg = model_config_from_items(items)
    params = build_model(cfg, power_iters=0)
    expected = dict(_arrays(params))
    with open(os.path.join(directory, BLOB), "rb") as fh:
        blob = fh.read()
    seen = set()
    for name, shape, offset in tensors:
        if name not in expected:
            raise CheckpointError("not part of this model", name)
        target = expected[name]
        if shape != target.shape:
            raise CheckpointError(f"shape {shape} does not match model shape {target.shape}", name)
        nbytes = int(np.prod(shape, dtype=np.int64)) * _LE32.itemsize
        if offset < 0 or offset + nbytes > len(blob):
            raise CheckpointError(f"{BLOB} truncated: need bytes {offset}..{offset + nbytes}, "
                                  f"file has {len(blob)}", name)
        values = np.frombuffer(blob, dtype=_LE32, count=nbytes // 4, offset=offset).reshape(shape)
        target[...] = values
        seen.add(name)
    missing = [n for n in expected if n not in seen]
    if missing:
        raise CheckpointError("missing from manifest", missing[0])
    return params
