"""Multiscale hidden state and the product-space norm.

Feature maps are plain numpy arrays in ``(batch, channels, height, width)``
layout.  A :class:`MultiscaleState` is an ordered tuple of such arrays, one
per resolution branch, all sharing the leading batch axis.  Norms are
computed per batch sample and then reduced (mean by default).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


class StructuralError(ValueError):
    """Shapes or branch layouts that do not line up."""


REDUCTIONS = ("mean", "max", "sum", "none")


def reduce_samples(values: np.ndarray, reduction: str = "mean"):
    if reduction == "mean":
        return float(np.mean(values))
    if reduction == "max":
        return float(np.max(values))
    if reduction == "sum":
        return float(np.sum(values))
    if reduction == "none":
        return values
    raise ValueError(f"unknown reduction {reduction!r}; expected one of {REDUCTIONS}")


def sample_norms(a: np.ndarray) -> np.ndarray:
    """Euclidean norm of every batch sample of ``a`` (axis 0 is the batch)."""
    a = np.asarray(a)
    flat = a.reshape(a.shape[0], -1) if a.ndim > 1 else a.reshape(-1, 1)
    return np.sqrt(np.einsum("bi,bi->b", flat, flat))


@dataclass(frozen=True, eq=False)
class MultiscaleState:
    """Tuple of branch feature maps ``z = [z_1, ..., z_n]``.

    Branch ``i`` is expected to have spatial extent ``(H / 2**i, W / 2**i)``
    (0-based) when it comes from a model; :func:`check_pyramid` enforces
    that, the container itself only requires a shared batch axis.
    """

    branches: tuple

    def __post_init__(self):
        branches = tuple(np.asarray(b) for b in self.branches)
        if not branches:
            raise StructuralError("a multiscale state needs at least one branch")
        batch = branches[0].shape[0] if branches[0].ndim else None
        for i, b in enumerate(branches):
            if b.ndim == 0 or b.shape[0] != batch:
                raise StructuralError(
                    f"branch {i} has shape {b.shape}; expected leading batch axis {batch}")
        object.__setattr__(self, "branches", branches)

    def __len__(self) -> int:
        return len(self.branches)

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.branches)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.branches[i]

    @property
    def batch(self) -> int:
        return self.branches[0].shape[0]

    @property
    def shapes(self) -> tuple:
        return tuple(b.shape for b in self.branches)

    @property
    def dtype(self):
        return self.branches[0].dtype

    def flat(self) -> np.ndarray:
        """Concatenate all branches into a ``(batch, D)`` array."""
        B = self.batch
        return np.concatenate([b.reshape(B, -1) for b in self.branches], axis=1)

    @classmethod
    def from_flat(cls, flat: np.ndarray, shapes: Sequence[tuple]) -> "MultiscaleState":
        flat = np.asarray(flat)
        sizes = [int(np.prod(s[1:])) for s in shapes]
        if flat.ndim != 2 or flat.shape[1] != sum(sizes) or flat.shape[0] != shapes[0][0]:
            raise StructuralError(
                f"flat array {flat.shape} does not match branch shapes {list(shapes)}")
        out, start = [], 0
        for s, k in zip(shapes, sizes):
            out.append(flat[:, start:start + k].reshape(s))
            start += k
        return cls(tuple(out))

    @classmethod
    def zeros(cls, shapes: Sequence[tuple], dtype=np.float64) -> "MultiscaleState":
        return cls(tuple(np.zeros(s, dtype=dtype) for s in shapes))

    def map(self, fn) -> "MultiscaleState":
        return MultiscaleState(tuple(fn(b) for b in self.branches))

    def astype(self, dtype) -> "MultiscaleState":
        return self.map(lambda b: b.astype(dtype, copy=False))


def check_same_layout(x: MultiscaleState, y: MultiscaleState) -> None:
    if x.shapes != y.shapes:
        raise StructuralError(f"branch shapes differ: {x.shapes} vs {y.shapes}")


def check_pyramid(z: MultiscaleState, channels: Sequence[int], height: int, width: int) -> None:
    """Raise unless ``z`` matches the declared channel counts and halving extents."""
    if len(z) != len(channels):
        raise StructuralError(f"expected {len(channels)} branches, got {len(z)}")
    for i, (b, c) in enumerate(zip(z, channels)):
        want = (c, height >> i, width >> i)
        if b.ndim != 4 or b.shape[1:] != want:
            raise StructuralError(f"branch {i} has shape {b.shape}, expected (B, *{want})")


def state_norm(z: MultiscaleState, reduction: str = "mean"):
    """``sqrt(sum_i ||z_i||^2)`` per sample, reduced over the batch."""
    total = np.zeros(z.batch)
    for b in z:
        flat = b.reshape(b.shape[0], -1)
        total = total + np.einsum("bi,bi->b", flat, flat)
    return reduce_samples(np.sqrt(total), reduction)


def axpy_state(alpha: float, x: MultiscaleState, beta: float, y: MultiscaleState) -> MultiscaleState:
    """Branchwise ``alpha * x_i + beta * y_i``."""
    check_same_layout(x, y)
    return MultiscaleState(tuple(alpha * a + beta * b for a, b in zip(x, y)))
