"""Desk-scale datasets: a synthetic blob generator and an IDX reader/writer.

Images come out as float arrays in ``[0, 1]`` with layout ``(N, C, H, W)``
and integer labels in ``[0, classes)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# IDX type codes -> numpy big-endian dtypes
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.str.lstrip("<>|="): k for k, v in _IDX_TYPES.items()}


class IdxFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path, self.offset = path, offset
        super().__init__(f"{path}: byte {offset}: {message}")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def batches(self, batch_size: int, seed: int | None = None, epoch: int = 0):
        """Yield ``(images, labels)`` batches; shuffled deterministically when ``seed`` is given."""
        order = np.arange(len(self))
        if seed is not None:
            order = np.random.default_rng([seed, epoch]).permutation(len(self))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            yield self.images[idx], self.labels[idx]


def synthetic_dataset(n_samples: int = 500, classes: int = 3, height: int = 32, width: int = 32,
                      channels: int = 3, noise: float = 0.1, seed: int = 0,
                      dtype="float64") -> Dataset:
    """Class-conditioned multiscale Gaussian blobs.

    Class ``k`` draws one to three blobs whose width grows with ``k`` (so the
    classes live at different scales) and paints them with a class colour
    that favours channel ``k mod C``.  Labels are balanced; pixel noise is
    Gaussian with std ``noise`` and the result is clipped to ``[0, 1]``.
    """
    if classes < 1 or n_samples < 1:
        raise ValueError("need at least one class and one sample")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_samples) % classes)
    yy, xx = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    scale = min(height, width)
    images = np.empty((n_samples, channels, height, width))
    for s, k in enumerate(labels):
        sigma = scale * (0.06 + 0.12 * k / max(classes - 1, 1))
        colour = np.full(channels, 0.25)
        colour[k % channels] = 1.0
        canvas = np.zeros((height, width))
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.2, 0.8) * height, rng.uniform(0.2, 0.8) * width
            canvas += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        canvas = np.minimum(canvas, 1.0)
        images[s] = colour[:, None, None] * canvas
    images += noise * rng.standard_normal(images.shape)
    return Dataset(np.clip(images, 0.0, 1.0).astype(dtype), labels.astype(np.int64))


def read_idx(path) -> np.ndarray:
    """Read one IDX file (big-endian header, any of the standard element types)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxFormatError(path, len(blob), "file shorter than the 4-byte magic")
    zero, code, ndim = struct.unpack_from(">HBB", blob, 0)
    if zero != 0:
        raise IdxFormatError(path, 0, f"bad magic 0x{blob[:4].hex()} (first two bytes must be zero)")
    if code not in _IDX_TYPES:
        raise IdxFormatError(path, 2, f"unknown element type 0x{code:02x}")
    if ndim < 1:
        raise IdxFormatError(path, 3, "zero dimensions")
    if len(blob) < 4 + 4 * ndim:
        raise IdxFormatError(path, len(blob), "truncated dimension header")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    dt = _IDX_TYPES[code]
    start = 4 + 4 * ndim
    need = int(np.prod(dims)) * dt.itemsize
    if len(blob) - start != need:
        raise IdxFormatError(path, start, f"expected {need} data bytes for shape {dims}, found {len(blob) - start}")
    return np.frombuffer(blob, dtype=dt, offset=start).reshape(dims).astype(dt.newbyteorder("="))


def write_idx(path, array) -> None:
    a = np.asarray(array)
    code = _IDX_CODES.get(a.dtype.str.lstrip("<>|="))
    if code is None:
        raise ValueError(f"dtype {a.dtype} has no IDX code")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, a.ndim))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.astype(_IDX_TYPES[code]).tobytes())


def load_idx_dataset(images_path, labels_path, dtype="float64") -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise IdxFormatError(labels_path, 3, f"labels must be 1-D, got {labels.ndim} dims")
    if len(images) != len(labels):
        raise IdxFormatError(labels_path, 4, f"{len(labels)} labels for {len(images)} images")
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise IdxFormatError(images_path, 3, f"images need 3 or 4 dims, got {images.ndim}")
    if images.dtype == np.uint8:
        x = images.astype(np.float64) / 255.0
    elif np.issubdtype(images.dtype, np.integer):
        lo, hi = float(images.min()), float(images.max())
        x = (images.astype(np.float64) - lo) / (hi - lo if hi > lo else 1.0)
    else:
        x = np.clip(images.astype(np.float64), 0.0, 1.0)
    return Dataset(x.astype(dtype), labels.astype(np.int64))


def load_dataset(spec, model_cfg, seed: int = 0) -> Dataset:
    """Dataset for a run: ``spec`` is a DataSpec, ``model_cfg`` fixes image geometry."""
    dt = model_cfg.dtype
    if spec.source == "synthetic":
        return synthetic_dataset(spec.n_samples, model_cfg.classes, model_cfg.height, model_cfg.width,
                                 model_cfg.in_channels, spec.noise, seed, dt)
    if spec.source == "idx":
        ds = load_idx_dataset(spec.images, spec.labels, dt)
        want = (model_cfg.in_channels, model_cfg.height, model_cfg.width)
        if ds.images.shape[1:] != want:
            raise ValueError(f"IDX images have shape {ds.images.shape[1:]}, model expects {want}")
        return ds
    raise ValueError(f"unknown data source {spec.source!r}")
