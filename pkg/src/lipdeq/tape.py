"""Minimal reverse-mode recorder used to linearise the fixed-point map.

Values are wrapped in :class:`Var`.  When a :class:`Tape` is active every
operation appends a node holding its parents and a VJP closure; calling
:meth:`Tape.backward` replays the closures in reverse creation order.  A
recorded tape is linear in the cotangent, so it can be replayed many times
at a fixed linearisation point (the implicit backward solve relies on this).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import lipops


class Var:
    __slots__ = ("value", "index")

    def __init__(self, value, index: int = -1):
        self.value = value
        self.index = index


class Tape:
    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []

    def __len__(self):
        return len(self._parents)

    def leaf(self, value) -> Var:
        return self._push(value, (), None)

    def _push(self, value, parents, fn) -> Var:
        self._parents.append(parents)
        self._vjps.append(fn)
        return Var(value, len(self._parents) - 1)

    def backward(self, seeds: dict[int, np.ndarray], need_params: bool = True):
        """Propagate ``seeds`` (node index -> cotangent) to every node.

        Returns ``(cotangents, param_grads)``; ``cotangents`` maps node index
        to its accumulated cotangent and ``param_grads`` maps global parameter
        names to their accumulated gradients.
        """
        cot: dict[int, np.ndarray] = dict(seeds)
        pgrads: dict[str, np.ndarray] = {}
        for idx in range(len(self._parents) - 1, -1, -1):
            fn = self._vjps[idx]
            if fn is None or idx not in cot:
                continue
            g = cot.pop(idx)
            in_grads, named = fn(g, need_params)
            for p, gp in zip(self._parents[idx], in_grads):
                if gp is None or p < 0:
                    continue
                cot[p] = cot[p] + gp if p in cot else gp
            for name, gp in named.items():
                pgrads[name] = pgrads[name] + gp if name in pgrads else gp
        return cot, pgrads


class Graph:
    """Builds values through ops, recording onto ``tape`` when one is given."""

    def __init__(self, tape: Tape | None = None, mode: str = "train"):
        self.tape = tape
        self.mode = mode

    def input(self, value) -> Var:
        return self.tape.leaf(value) if self.tape is not None else Var(value)

    def op(self, spec: lipops.OpSpec, x: Var) -> Var:
        out = lipops.apply(spec, x.value, self.mode)
        if self.tape is None:
            return Var(out)
        z, mode = x.value, self.mode

        def fn(g, need_params):
            v_in, grads = lipops.vjp(spec, z, g, mode, need_params)
            return (v_in,), {spec.names[r]: gr for r, gr in grads.items() if r in spec.names}

        return self.tape._push(out, (x.index,), fn)

    def lincomb(self, terms: list[tuple[float, Var]]) -> Var:
        """``sum_k c_k * x_k`` over Vars of identical shape."""
        out = None
        for c, x in terms:
            out = c * x.value if out is None else out + c * x.value
        if self.tape is None:
            return Var(out)
        coefs = [c for c, _ in terms]

        def fn(g, need_params):
            return tuple(c * g for c in coefs), {}

        return self.tape._push(out, tuple(x.index for _, x in terms), fn)
