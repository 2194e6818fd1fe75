"""INI run configuration.

Four sections are recognised, ``[model] [solver] [train] [data]``, each with
``key = value`` lines and ``#`` comments.  Unknown keys and out-of-domain
values are rejected with the offending key and line.  ``--set`` overrides
use ``key=value`` or ``section.key=value``; a bare key is looked up in the
section that owns it.
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field, replace

from ..budget import LipschitzConfig
from ..model import ModelConfig
from ..solvers import SolverConfig


class ConfigFileError(ValueError):
    def __init__(self, key: str, line, message: str):
        self.key, self.line = key, line
        where = f"line {line}" if isinstance(line, int) else str(line)
        super().__init__(f"{key} ({where}): {message}")


@dataclass(frozen=True)
class DataSpec:
    source: str = "synthetic"
    n_samples: int = 500
    noise: float = 0.1
    images: str | None = None
    labels: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    solver_fwd: SolverConfig = field(default_factory=lambda: SolverConfig(max_iter=18))
    solver_bwd: SolverConfig = field(default_factory=lambda: SolverConfig(max_iter=20))
    backward: str = "implicit"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 32
    data: DataSpec = field(default_factory=DataSpec)
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.backward not in ("implicit", "jfb"):
            raise ValueError(f"backward must be implicit or jfb, got {self.backward!r}")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _opt_bool(s: str):
    return None if s.strip().lower() in ("", "auto", "none") else _bool(s)


def _opt_str(s: str):
    return None if s.strip().lower() in ("", "auto", "none") else s.strip()


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.replace(" ", "").split(",") if v)


def _choice(*options):
    def conv(s: str) -> str:
        v = s.strip()
        if v not in options:
            raise ValueError(f"expected one of {options}, got {v!r}")
        return v
    return conv


def _interval(lo, hi, lo_open=True, hi_open=True):
    def check(v):
        ok_lo = v > lo if lo_open else v >= lo
        ok_hi = v < hi if hi_open else v <= hi
        if not (ok_lo and ok_hi):
            raise ValueError(f"{v} outside {'(' if lo_open else '['}{lo}, {hi}{')' if hi_open else ']'}")
    return check


def _positive(v):
    if not v > 0:
        raise ValueError(f"must be positive, got {v}")


def _at_least(k):
    def check(v):
        if v < k:
            raise ValueError(f"must be >= {k}, got {v}")
    return check


# key -> (section, converter, domain check)
SCHEMA = {
    "model": {
        "n": (int, _at_least(1)),
        "channels": (_ints, None),
        "height": (int, _at_least(1)),
        "width": (int, _at_least(1)),
        "in_channels": (int, _at_least(1)),
        "classes": (int, _at_least(2)),
        "mode": (_choice("lipschitz", "baseline"), None),
        "alpha1": (float, _interval(0, 1)),
        "alpha2": (float, _interval(0, 1)),
        "c": (float, _positive),
        "gamma_bar": (float, _positive),
        "a": (float, _interval(0, 1, hi_open=False)),
        "p": (float, _interval(0, 1, lo_open=False)),
        "upsample_includes_conv": (_bool, None),
        "gn_eps": (float, _positive),
        "norm": (_opt_str, None),
        "activation": (_opt_str, None),
        "constrain_conv": (_opt_bool, None),
        "softmax_fusion": (_opt_bool, None),
        "convex_residual": (_opt_bool, None),
        "convex_fusion": (_opt_bool, None),
        "clamp_gamma": (_opt_bool, None),
    },
    "solver": {
        "kind": (_choice("banach", "anderson"), None),
        "tol": (float, _positive),
        "metric": (_choice("relative", "absolute"), None),
        "max_iter_fwd": (int, _at_least(1)),
        "max_iter_bwd": (int, _at_least(1)),
        "memory": (int, _at_least(1)),
        "lam": (float, _at_least(0)),
        "beta": (float, _interval(0, 1, hi_open=False)),
    },
    "train": {
        "lr": (float, _positive),
        "beta1": (float, _interval(0, 1, lo_open=False)),
        "beta2": (float, _interval(0, 1, lo_open=False)),
        "adam_eps": (float, _positive),
        "epochs": (int, _at_least(1)),
        "batch_size": (int, _at_least(1)),
        "backward": (_choice("implicit", "jfb"), None),
        "out_dir": (str, None),
        "seed": (int, _at_least(0)),
        "precision": (_choice("float32", "float64"), None),
    },
    "data": {
        "source": (_choice("synthetic", "idx"), None),
        "n_samples": (int, _at_least(1)),
        "noise": (float, _at_least(0)),
        "images": (str, None),
        "labels": (str, None),
    },
}

_KEY_OWNER = {}
for _sec, _keys in SCHEMA.items():
    for _k in _keys:
        _KEY_OWNER.setdefault(_k, _sec)


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number, for error messages."""
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip().lower()), no)
    return where


def read_raw(text: str) -> dict:
    """Parse INI text into ``{(section, key): (value, line)}`` without type conversion."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#", ";"),
                                   interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigFileError("<file>", getattr(exc, "lineno", "?"), str(exc).splitlines()[0]) from None
    lines = _line_index(text)
    raw = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigFileError(f"[{section}]", lines.get((section, None), "?"), "unknown section")
        for key, value in cp.items(section):
            line = lines.get((section, key), "?")
            if key not in SCHEMA[section]:
                raise ConfigFileError(f"{section}.{key}", line, "unknown key")
            raw[(section, key)] = (value, line)
    return raw


def apply_overrides(raw: dict, overrides) -> dict:
    raw = dict(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigFileError(item, "--set", "expected key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if "." in key:
            section, key = key.split(".", 1)
        else:
            section = _KEY_OWNER.get(key)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigFileError(key, "--set", "unknown key")
        raw[(section, key)] = (value, "--set")
    return raw


def _convert(raw: dict) -> dict:
    out = {}
    for (section, key), (value, line) in raw.items():
        conv, check = SCHEMA[section][key]
        try:
            v = conv(value)
            if check is not None:
                check(v)
        except ValueError as exc:
            raise ConfigFileError(f"{section}.{key}", line, str(exc)) from None
        out[(section, key)] = v
    return out


def _fail(raw, sec, key, exc):
    line = raw.get((sec, key), (None, "?"))[1]
    return ConfigFileError(f"{sec}.{key}", line, str(exc))


_LIP_FIELDS = ("alpha1", "alpha2", "c", "gamma_bar", "a", "p", "upsample_includes_conv")


def _model_config(vals: dict, raw: dict, seed: int) -> ModelConfig:
    m = ModelConfig()
    lip = replace(LipschitzConfig(), **{k: vals[("model", k)] for k in _LIP_FIELDS if ("model", k) in vals})
    n = vals.get(("model", "n"), m.n)
    channels = vals.get(("model", "channels"), m.channels if n == m.n else tuple([4] * n))
    kw = {k: vals[("model", k)] for k in SCHEMA["model"] if ("model", k) in vals and k not in _LIP_FIELDS}
    kw.update(n=n, channels=channels, lip=replace(lip, n=n), seed=seed,
              dtype=vals.get(("train", "precision"), "float32"))
    try:
        return ModelConfig(**kw)
    except ValueError as exc:
        raise _fail(raw, "model", "channels" if "channel" in str(exc) else "n", exc) from None


def model_config_from_items(items) -> ModelConfig:
    """Inverse of :func:`model_config_items`."""
    raw = {}
    for key, value in items:
        section, k = key.split(".", 1)
        raw[(section, k)] = (value, "manifest")
    vals = _convert(raw)
    return _model_config(vals, raw, vals.get(("train", "seed"), 0))


def build_run_config(raw: dict) -> RunConfig:
    vals = _convert(raw)
    get = lambda sec, key, default: vals.get((sec, key), default)

    fail = lambda sec, key, exc: _fail(raw, sec, key, exc)
    seed = get("train", "seed", 0)
    env_seed = os.environ.get("LDEQ_SEED")
    if env_seed is not None and env_seed.strip():
        seed = int(env_seed)
    model = _model_config(vals, raw, seed)

    base = dict(kind=get("solver", "kind", "anderson"), tol=get("solver", "tol", 1e-3),
                metric=get("solver", "metric", "relative"), memory=get("solver", "memory", 5),
                lam=get("solver", "lam", 1e-4), beta=get("solver", "beta", 1.0))
    fwd = SolverConfig(max_iter=get("solver", "max_iter_fwd", 18), **base)
    bwd = SolverConfig(max_iter=get("solver", "max_iter_bwd", 20), **base)
    data = DataSpec(source=get("data", "source", "synthetic"), n_samples=get("data", "n_samples", 500),
                    noise=get("data", "noise", 0.1), images=get("data", "images", None),
                    labels=get("data", "labels", None))
    if data.source == "idx" and not (data.images and data.labels):
        raise fail("data", "source", "idx source needs images and labels paths")
    return RunConfig(model=model, solver_fwd=fwd, solver_bwd=bwd,
                     backward=get("train", "backward", "implicit"), lr=get("train", "lr", 1e-3),
                     betas=(get("train", "beta1", 0.9), get("train", "beta2", 0.999)),
                     adam_eps=get("train", "adam_eps", 1e-8), epochs=get("train", "epochs", 1),
                     batch_size=get("train", "batch_size", 32), data=data,
                     out_dir=get("train", "out_dir", "runs/default"), seed=seed)


def parse_config(text: str, overrides=None) -> RunConfig:
    """Parse INI ``text`` (plus ``--set`` style overrides) into a validated RunConfig."""
    return build_run_config(apply_overrides(read_raw(text), overrides))


def load_config(path: str | None, overrides=None) -> RunConfig:
    text = ""
    if path:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_config(text, overrides)


def model_config_items(m: ModelConfig) -> list[tuple[str, str]]:
    """Flatten a ModelConfig into ``section.key`` / value strings (checkpoint echo)."""
    lip = m.lip

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if v is None:
            return "auto"
        return repr(v) if isinstance(v, float) else str(v)

    items = [("model.n", m.n), ("model.channels", m.channels), ("model.height", m.height),
             ("model.width", m.width), ("model.in_channels", m.in_channels), ("model.classes", m.classes),
             ("model.mode", m.mode), ("model.alpha1", lip.alpha1), ("model.alpha2", lip.alpha2),
             ("model.c", lip.c), ("model.gamma_bar", lip.gamma_bar), ("model.a", lip.a), ("model.p", lip.p),
             ("model.upsample_includes_conv", lip.upsample_includes_conv), ("model.gn_eps", m.gn_eps)]
    for t in ("norm", "activation", "constrain_conv", "softmax_fusion", "convex_residual",
              "convex_fusion", "clamp_gamma"):
        items.append((f"model.{t}", getattr(m, t)))
    items += [("train.seed", m.seed), ("train.precision", m.dtype)]
    return [(k, fmt(v)) for k, v in items]
