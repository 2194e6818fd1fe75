"""Multiscale equilibrium map ``f_theta = post-fusion o fusion o residual-block``.

Per branch ``i`` (0-based here, branch ``i`` has spatial size ``H / 2**i``)::

    g(z_i)  = MGN2(Drop(Conv2(SReLU(MGN1(Conv1(z_i))))) + [u(x) if i == 0])
    zh_i    = SReLU(MGN3((1 - a1) z_i + a1 g(z_i)))
    zt_i    = (1 - a2) zh_i + a2 sum_{j != i} w_ij Fuse_ij(zh_j)
    out_i   = SReLU(MGN(Conv(zt_i)))

``Fuse_ij`` is a chain of stride-2 convolutions for ``j < i`` and a 1x1
convolution, MGN and nearest-neighbour upsampling for ``j > i``.  The
baseline mode swaps in GN, ReLU, plain sums and unit fusion weights and
drops the weight projection.  Individual toggles on :class:`ModelConfig`
reach every intermediate ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import lipops
from .budget import BudgetReport, LipschitzConfig
from .lipops import ConvGeometry, OpSpec, fusion_weights
from .tape import Graph, Tape, Var
from .tensors import MultiscaleState, StructuralError, check_pyramid, sample_norms

MODES = ("lipschitz", "baseline")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Topology and Lipschitz hyperparameters.

    ``lip.n`` is overwritten with ``n``.  Toggles left as ``None`` follow
    ``mode``: the Lipschitz variant uses MGN, SReLU, constrained convs,
    softmax fusion, convex combinations and gamma clamping; the baseline uses
    none of them.
    """

    n: int = 4
    channels: tuple = (4, 4, 8, 8)
    height: int = 32
    width: int = 32
    in_channels: int = 3
    classes: int = 3
    lip: LipschitzConfig = LipschitzConfig()
    mode: str = "lipschitz"
    seed: int = 0
    dtype: str = "float64"
    gn_eps: float = 1e-5
    norm: str | None = None
    activation: str | None = None
    constrain_conv: bool | None = None
    softmax_fusion: bool | None = None
    convex_residual: bool | None = None
    convex_fusion: bool | None = None
    clamp_gamma: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n < 1 or len(self.channels) != self.n:
            raise ConfigError(f"need {self.n} channel counts, got {self.channels}")
        if any(c < 1 for c in self.channels) or self.in_channels < 1 or self.classes < 1:
            raise ConfigError("channel and class counts must be positive")
        k = 2 ** (self.n - 1)
        if self.height % k or self.width % k or self.height < k or self.width < k:
            raise ConfigError(f"input {self.height}x{self.width} not divisible by 2^(n-1) = {k}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.lip.n != self.n:
            object.__setattr__(self, "lip", replace(self.lip, n=self.n))

    def flag(self, name: str):
        v = getattr(self, name)
        if v is not None:
            return v
        lip = self.mode == "lipschitz"
        if name == "norm":
            return "mgn" if lip else "gn"
        if name == "activation":
            return "srelu" if lip else "relu"
        return lip

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def branch_shapes(self, batch: int) -> list[tuple]:
        return [(batch, c, self.height >> i, self.width >> i) for i, c in enumerate(self.channels)]


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict = field(default_factory=dict)
    u_state: dict = field(default_factory=dict)
    geometry: dict = field(default_factory=dict)

    def names(self):
        return list(self.tensors)


# --------------------------------------------------------------------------
# parameter layout


def _conv_layout(cfg: ModelConfig):
    """Yield ``(name, c_out, c_in, k, geometry, in_f_theta)`` for every convolution."""
    H, W = cfg.height, cfg.width
    C = cfg.channels
    yield "inj", C[0], cfg.in_channels, 3, ConvGeometry(1, 1, (H, W)), False
    for i in range(cfg.n):
        hw = (H >> i, W >> i)
        yield f"res{i}.conv1", C[i], C[i], 3, ConvGeometry(1, 1, hw), True
        yield f"res{i}.conv2", C[i], C[i], 3, ConvGeometry(1, 1, hw), True
    for i in range(cfg.n):
        for j in range(cfg.n):
            if j < i:
                for k in range(i - j):
                    cout = C[i] if k == i - j - 1 else C[j]
                    hw = (H >> (j + k), W >> (j + k))
                    yield f"fuse{i}_{j}.hop{k}", cout, C[j], 3, ConvGeometry(2, 1, hw), True
            elif j > i:
                yield f"fuse{i}_{j}.conv", C[i], C[j], 1, ConvGeometry(1, 0, (H >> j, W >> j)), True
    for i in range(cfg.n):
        yield f"post{i}.conv", C[i], C[i], 3, ConvGeometry(1, 1, (H >> i, W >> i)), True


def _norm_layout(cfg: ModelConfig):
    C = cfg.channels
    for i in range(cfg.n):
        for k in (1, 2, 3):
            yield f"res{i}.norm{k}", C[i]
    for i in range(cfg.n):
        for j in range(cfg.n):
            if j < i:
                for k in range(i - j):
                    yield f"fuse{i}_{j}.hop{k}.norm", C[i] if k == i - j - 1 else C[j]
            elif j > i:
                yield f"fuse{i}_{j}.norm", C[i]
    for i in range(cfg.n):
        yield f"post{i}.norm", C[i]


def build_model(cfg: ModelConfig, power_iters: int = 50) -> ModelParams:
    """Draw parameters deterministically from ``cfg.seed`` and project them.

    ``power_iters=0`` skips the projection (used when weights are about to be
    overwritten from a checkpoint).
    """
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.np_dtype
    params = ModelParams(cfg)
    for name, cout, cin, k, geom, in_f in _conv_layout(cfg):
        fan_in = cin * k * k
        bound = math.sqrt(3.0 / fan_in)
        params.tensors[f"{name}.W"] = rng.uniform(-bound, bound, (cout, cin, k, k)).astype(dt)
        params.tensors[f"{name}.b"] = rng.uniform(-1.0, 1.0, cout).astype(dt) / math.sqrt(fan_in)
        if in_f:
            params.geometry[name] = geom
            params.u_state[name] = lipops.init_u_state(params.tensors[f"{name}.W"], geom,
                                                       seed=int(rng.integers(2**31)))
    gamma0 = cfg.lip.gamma_bar if cfg.flag("clamp_gamma") else 1.0
    for name, c in _norm_layout(cfg):
        params.tensors[f"{name}.gamma"] = np.full(c, gamma0, dtype=dt)
        params.tensors[f"{name}.beta"] = np.zeros(c, dtype=dt)
    feat = sum(cfg.channels)
    bound = 1.0 / math.sqrt(feat)
    params.tensors["head.W"] = rng.uniform(-bound, bound, (cfg.classes, feat)).astype(dt)
    params.tensors["head.b"] = np.zeros(cfg.classes, dtype=dt)
    if power_iters > 0:
        project_all(params, iters=power_iters)
    return params


def conv_names(params: ModelParams) -> list[str]:
    return list(params.geometry)


def project_all(params: ModelParams, iters: int = 1) -> None:
    """Project constrained kernels onto the c-ball and clamp affine gains, in place."""
    cfg = params.cfg
    if cfg.flag("constrain_conv"):
        c = cfg.lip.c
        for name, geom in params.geometry.items():
            W = params.tensors[f"{name}.W"]
            W[...] = lipops.project_weights(W, c, geom, params.u_state[name], iters)
    if cfg.flag("clamp_gamma"):
        for name in params.tensors:
            if name.endswith(".gamma"):
                g = params.tensors[name]
                g[...] = lipops.clamp_affine(g, cfg.lip.gamma_bar)


# --------------------------------------------------------------------------
# operation graph


def draw_masks(cfg: ModelConfig, batch: int, rng: np.random.Generator) -> dict:
    """One variational-dropout mask per branch, shared over space, frozen for a solve."""
    p = cfg.lip.p
    return {f"res{i}.drop": (rng.random((batch, c, 1, 1)) >= p).astype(cfg.np_dtype)
            for i, c in enumerate(cfg.channels)}


class Layers:
    """OpSpecs of one model, wired to its live parameter arrays."""

    def __init__(self, params: ModelParams, masks: dict | None = None):
        self.params = params
        cfg = self.cfg = params.cfg
        t = params.tensors
        lip = cfg.lip
        self.constrained = cfg.flag("constrain_conv")
        if cfg.flag("activation") == "srelu":
            self.act = OpSpec("SReLU", {"a": lip.a})
        else:
            self.act = OpSpec("ReLU")
        self.ops: dict[str, OpSpec] = {}
        for name, cout, cin, k, geom, in_f in _conv_layout(cfg):
            kind = "ConvStar" if (in_f and self.constrained) else "Conv"
            hyper = {"stride": geom.stride, "padding": geom.padding, "in_hw": geom.in_hw}
            if kind == "ConvStar":
                hyper["c"] = lip.c
            if in_f:
                hyper["u_state"] = params.u_state.get(name)
            self.ops[name] = OpSpec(kind, hyper, {"W": t[f"{name}.W"], "b": t[f"{name}.b"]},
                                    {"W": f"{name}.W", "b": f"{name}.b"})
        for name, c in _norm_layout(cfg):
            if cfg.flag("norm") == "mgn":
                spec = OpSpec("MGN", {}, {}, {})
            else:
                spec = OpSpec("GN", {"eps": cfg.gn_eps}, {}, {})
            spec.params = {"gamma": t[f"{name}.gamma"], "beta": t[f"{name}.beta"]}
            spec.names = {"gamma": f"{name}.gamma", "beta": f"{name}.beta"}
            if cfg.flag("clamp_gamma"):
                spec.hyper["gamma_bar"] = lip.gamma_bar
            self.ops[name] = spec
        for i in range(cfg.n):
            mask = masks.get(f"res{i}.drop") if masks else None
            self.ops[f"res{i}.drop"] = OpSpec("Dropout", {"p": lip.p, "mask": mask})
            for j in range(i + 1, cfg.n):
                s = 2 ** (j - i)
                self.ops[f"fuse{i}_{j}.up"] = OpSpec("UpsampleNN", {"s": s, "t": s})
        a1, a2 = lip.alpha1, lip.alpha2
        self.res_coefs = (1.0 - a1, a1) if cfg.flag("convex_residual") else (1.0, 1.0)
        self.self_coef = (1.0 - a2) if cfg.flag("convex_fusion") else 1.0
        self.fuse_scale = a2 if cfg.flag("convex_fusion") else 1.0
        self.rows = []
        for i in range(cfg.n):
            row = fusion_weights(cfg.n, i + 1) if cfg.n > 1 else None
            partners = [j - 1 for j in row.partners] if row else []
            if cfg.flag("softmax_fusion") and row is not None:
                weights = [float(w) for w in row.weights]
            else:
                weights = [1.0] * len(partners)
            self.rows.append(list(zip(partners, weights)))

    def __getitem__(self, name) -> OpSpec:
        return self.ops[name]

    # -- structure shared by evaluation, linearisation and bound composition

    def residual_branch(self, g: Graph, i: int, z: Var, inj: Var | None) -> Var:
        h = g.op(self.ops[f"res{i}.conv1"], z)
        h = g.op(self.ops[f"res{i}.norm1"], h)
        h = g.op(self.act, h)
        h = g.op(self.ops[f"res{i}.conv2"], h)
        h = g.op(self.ops[f"res{i}.drop"], h)
        if inj is not None:
            h = g.lincomb([(1.0, h), (1.0, inj)])
        h = g.op(self.ops[f"res{i}.norm2"], h)
        c_skip, c_res = self.res_coefs
        m = g.lincomb([(c_skip, z), (c_res, h)])
        return g.op(self.act, g.op(self.ops[f"res{i}.norm3"], m))

    def fuse_path(self, g: Graph, i: int, j: int, y: Var) -> Var:
        if j < i:
            hops = i - j
            for k in range(hops):
                y = g.op(self.ops[f"fuse{i}_{j}.hop{k}"], y)
                y = g.op(self.ops[f"fuse{i}_{j}.hop{k}.norm"], y)
                if k < hops - 1:
                    y = g.op(self.act, y)
            return y
        y = g.op(self.ops[f"fuse{i}_{j}.conv"], y)
        y = g.op(self.ops[f"fuse{i}_{j}.norm"], y)
        return g.op(self.ops[f"fuse{i}_{j}.up"], y)

    def fusion_branch(self, g: Graph, i: int, zh: list) -> Var:
        terms = [(self.self_coef, zh[i])]
        for j, w in self.rows[i]:
            terms.append((self.fuse_scale * w, self.fuse_path(g, i, j, zh[j])))
        return g.lincomb(terms)

    def post_branch(self, g: Graph, i: int, zt: Var) -> Var:
        y = g.op(self.ops[f"post{i}.conv"], zt)
        y = g.op(self.ops[f"post{i}.norm"], y)
        return g.op(self.act, y)

    def forward(self, g: Graph, zs: list, inj: Var | None) -> list:
        n = self.cfg.n
        zh = [self.residual_branch(g, i, zs[i], inj if i == 0 else None) for i in range(n)]
        zt = [self.fusion_branch(g, i, zh) for i in range(n)]
        return [self.post_branch(g, i, zt[i]) for i in range(n)]

    def injection(self, g: Graph, x) -> Var | None:
        if x is None:
            return None
        return g.op(self.ops["inj"], g.input(x))

    # -- bounds along the graph

    def composed_bound(self) -> BudgetReport:
        """Compose per-op bounds along the actual graph.

        Sequential chains multiply, the residual skip adds, and the fusion rows
        combine as ``sqrt(self^2 + sum_j (coef_j * path_j)^2)``.
        """
        from .budget import compose

        B = lipops.lipschitz_bound
        n = self.cfg.n
        act = B(self.act)
        hats, hats_eval, bars, tildes, paths = [], [], [], [], {}
        c_skip, c_res = self.res_coefs
        for i in range(n):
            o = self.ops
            inner = compose([B(o[f"res{i}.norm2"]), B(o[f"res{i}.conv2"]),
                             act, B(o[f"res{i}.norm1"]), B(o[f"res{i}.conv1"])])
            outer = compose([act, B(o[f"res{i}.norm3"])])
            drop = B(o[f"res{i}.drop"])
            hats.append(outer * compose([c_skip, c_res * inner * drop], "additive"))
            # eval mode: dropout is the identity
            hats_eval.append(outer * compose([c_skip, c_res * inner], "additive"))
            bars.append(compose([act, B(o[f"post{i}.norm"]), B(o[f"post{i}.conv"])]))
        for i in range(n):
            acc = 0.0
            for j, w in self.rows[i]:
                if j < i:
                    hops = i - j
                    chain = []
                    for k in range(hops):
                        chain += [B(self.ops[f"fuse{i}_{j}.hop{k}"]), B(self.ops[f"fuse{i}_{j}.hop{k}.norm"])]
                        if k < hops - 1:
                            chain.append(act)
                    lp = compose(chain)
                else:
                    lp = compose([B(self.ops[f"fuse{i}_{j}.conv"]), B(self.ops[f"fuse{i}_{j}.norm"]),
                                  B(self.ops[f"fuse{i}_{j}.up"])])
                paths[(i + 1, j + 1)] = lp
                acc += (self.fuse_scale * w * lp) ** 2
            tildes.append(math.sqrt(self.self_coef ** 2 + acc))
        L_hat, L_bar = max(hats), max(bars)
        rms = math.sqrt(math.fsum(t * t for t in tildes))
        return BudgetReport(L_hat, L_bar, tuple(tildes), L_hat * rms * L_bar, paths,
                            max(hats_eval) * rms * L_bar)


def certified_bound(params: ModelParams) -> BudgetReport:
    """Network bound composed from the current parameters' per-op bounds."""
    return Layers(params).composed_bound()


# --------------------------------------------------------------------------
# evaluation and linearisation


class FixedPointMap:
    """``z -> f_theta(z; x)`` with dropout masks frozen and the injection cached."""

    def __init__(self, params: ModelParams, x=None, mode: str = "train", masks: dict | None = None):
        cfg = params.cfg
        if mode not in lipops.MODES:
            raise ValueError(f"mode must be train or eval, got {mode!r}")
        if mode == "train" and cfg.lip.p > 0 and masks is None:
            raise StructuralError("train mode needs frozen dropout masks (see draw_masks)")
        self.params, self.mode, self.masks = params, mode, masks
        self.layers = Layers(params, masks)
        if x is not None:
            x = np.asarray(x, dtype=cfg.np_dtype)
            if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
                raise StructuralError(
                    f"input shape {x.shape} does not match (B, {cfg.in_channels}, {cfg.height}, {cfg.width})")
        self.x = x
        self._inj = self.layers.injection(Graph(None, mode), x)

    def shapes(self, batch: int):
        return self.params.cfg.branch_shapes(batch)

    def __call__(self, z: MultiscaleState) -> MultiscaleState:
        cfg = self.params.cfg
        check_pyramid(z, cfg.channels, cfg.height, cfg.width)
        if self.x is not None and z.batch != self.x.shape[0]:
            raise StructuralError(f"state batch {z.batch} != input batch {self.x.shape[0]}")
        g = Graph(None, self.mode)
        outs = self.layers.forward(g, [Var(b) for b in z], self._inj)
        return MultiscaleState(tuple(o.value for o in outs))

    def flat_map(self, batch: int):
        shapes = self.shapes(batch)
        return lambda zf: self(MultiscaleState.from_flat(zf, shapes)).flat()

    def linearize(self, z: MultiscaleState) -> "Linearization":
        return Linearization(self, z)


class Linearization:
    """Recorded tape of ``f_theta`` at a fixed point, replayable for VJPs."""

    def __init__(self, fmap: FixedPointMap, z: MultiscaleState):
        self.fmap = fmap
        self.tape = Tape()
        g = Graph(self.tape, fmap.mode)
        self.z_vars = [g.input(b) for b in z]
        inj = fmap.layers.injection(g, fmap.x)
        self.out_vars = fmap.layers.forward(g, self.z_vars, inj)
        self.value = MultiscaleState(tuple(o.value for o in self.out_vars))
        self.shapes = z.shapes

    def vjp(self, v: MultiscaleState, need_params: bool = True):
        """Return ``(J_z^T v, dtheta)`` where ``dtheta`` covers every parameter inside f_theta."""
        seeds = {}
        for o, vb in zip(self.out_vars, v):
            if vb.shape != o.value.shape:
                raise StructuralError(f"cotangent {vb.shape} does not match output {o.value.shape}")
            seeds[o.index] = seeds[o.index] + vb if o.index in seeds else vb
        cot, pgrads = self.tape.backward(seeds, need_params)
        vz = tuple(cot.get(zv.index, np.zeros(s, dtype=v.dtype)) for zv, s in zip(self.z_vars, self.shapes))
        return MultiscaleState(vz), pgrads

    def vjp_flat(self, vf: np.ndarray) -> np.ndarray:
        v = MultiscaleState.from_flat(vf, self.shapes)
        return self.vjp(v, need_params=False)[0].flat()


def apply_f_theta(params: ModelParams, z: MultiscaleState, x=None, mode: str = "train",
                  masks: dict | None = None) -> MultiscaleState:
    return FixedPointMap(params, x, mode, masks)(z)


# --------------------------------------------------------------------------
# classification head


def pooled_features(z: MultiscaleState) -> np.ndarray:
    return np.concatenate([b.mean(axis=(2, 3)) for b in z], axis=1)


def classify(params: ModelParams, z_star: MultiscaleState) -> np.ndarray:
    """Global-average-pool every branch, concatenate and apply the affine head."""
    feats = pooled_features(z_star)
    return feats @ params.tensors["head.W"].T + params.tensors["head.b"]


def classify_vjp(params: ModelParams, z_star: MultiscaleState, dlogits: np.ndarray):
    """Cotangent of the head: returns ``(dz_star, {'head.W': .., 'head.b': ..})``."""
    feats = pooled_features(z_star)
    W = params.tensors["head.W"]
    grads = {"head.W": dlogits.T @ feats, "head.b": dlogits.sum(axis=0)}
    dfeat = dlogits @ W
    out, start = [], 0
    for b in z_star:
        C, H, Wd = b.shape[1:]
        piece = dfeat[:, start:start + C] / (H * Wd)
        out.append(np.broadcast_to(piece[:, :, None, None], b.shape).astype(b.dtype))
        start += C
    return MultiscaleState(tuple(out)), grads


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = logits.shape[0]
    loss = -float(logp[np.arange(B), labels].mean())
    d = np.exp(logp)
    d[np.arange(B), labels] -= 1.0
    return loss, d / B


# --------------------------------------------------------------------------
# empirical checks


def empirical_ratios(params: ModelParams, z1: MultiscaleState, z2: MultiscaleState, x=None,
                     mode: str = "train", masks: dict | None = None) -> np.ndarray:
    """Per-sample ``||f(z1) - f(z2)||_Z / ||z1 - z2||_Z`` with shared masks."""
    f = FixedPointMap(params, x, mode, masks)
    d_out = sample_norms(f(z1).flat() - f(z2).flat())
    return d_out / sample_norms(z1.flat() - z2.flat())


def random_state(cfg: ModelConfig, batch: int, rng: np.random.Generator, scale: float = 1.0) -> MultiscaleState:
    return MultiscaleState(tuple((scale * rng.standard_normal(s)).astype(cfg.np_dtype)
                                 for s in cfg.branch_shapes(batch)))
