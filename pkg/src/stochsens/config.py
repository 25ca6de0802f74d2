"""JSON run configurations: schema validation, defaults and decoding into specs.

A time function is a number, a nested array holding one value, a nested array
of per-step values (length ``K`` or 1), or an object ``{"constant": v}`` /
``{"samples": [...]}``. Noise-channel families (``C``, ``D``, ``f``) are lists
with one such entry per Brownian component.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .core import BrownianEnsemble, TimeGrid
from .errors import ControlWeightError, EllipticityError, InvalidArgumentError, SpecError
from .lq import LQSpec
from .mv import MVSpec
from .sensitivity import LQPerturbation, MVPerturbation
from .timefn import Constant, PiecewiseConstant, TimeFunction

BUILTIN_PREFIX = "builtin:"

DEFAULTS = {
    "ensemble": {"n_paths": 10000, "seed": 0},
    "perturbations": [],
    "fd": {"tau": None, "richardson": True},
    "sensitivity": {"method": "exact"},
    "check": {"picard_paths": 2000, "picard_tol": 1e-8, "min_steps": 100},
    "output": {"path": None, "format": "csv", "timing": False},
}


class ConfigError(InvalidArgumentError):
    """Invalid configuration; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path or "<root>"
        super().__init__(f"{self.path}: {message}")


def schema() -> dict:
    text = resources.files("stochsens").joinpath("data/config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def builtin_names() -> list[str]:
    root = resources.files("stochsens").joinpath("data/configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _read(source: str | Path) -> tuple[dict, str]:
    src = str(source)
    if src.startswith(BUILTIN_PREFIX):
        name = src[len(BUILTIN_PREFIX):]
        if name not in builtin_names():
            raise ConfigError("--config", f"unknown builtin {name!r}; available: {', '.join(builtin_names())}")
        ref = resources.files("stochsens").joinpath(f"data/configs/{name}.json")
        text = ref.read_text(encoding="utf-8")
    else:
        try:
            text = Path(src).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {src}: {exc.strerror}") from exc
    try:
        return json.loads(text), src
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


def validate(doc) -> None:
    """Raise ``ConfigError`` for the first schema violation (deepest path first)."""
    validator = jsonschema.Draft202012Validator(schema())
    errors = list(validator.iter_errors(doc))
    if errors:
        err = max(errors, key=lambda e: len(e.absolute_path))
        if err.context:
            err = max(err.context, key=lambda e: len(e.absolute_path))
        raise ConfigError(_path(err.absolute_path), err.message)


def _with_defaults(doc: dict) -> dict:
    out = copy.deepcopy(doc)
    for key, default in DEFAULTS.items():
        if isinstance(default, dict):
            merged = dict(default)
            merged.update(out.get(key, {}))
            out[key] = merged
        else:
            out.setdefault(key, copy.deepcopy(default))
    if out["problem"] == "mv":
        out["mv"].setdefault("solver", "auto")
        out["mv"].setdefault("r", 0.0)
    return out


# ----------------------------------------------------------------- decoding


def _time_function(value, shape, path, K, T) -> TimeFunction:
    shape = tuple(shape)
    if isinstance(value, dict):
        if "constant" in value:
            arr = np.asarray(value["constant"], dtype=float)
            if arr.size == 1 and int(np.prod(shape)) == 1:
                return Constant(arr.reshape(shape))
            if arr.shape != shape:
                raise ConfigError(path, f"constant must have shape {list(shape)}, got {list(arr.shape)}")
            return Constant(arr)
        return _samples(np.asarray(value["samples"], dtype=float), shape, path, K, T)
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, "ragged or non-numeric array") from exc
    if arr.ndim == 0:
        if int(np.prod(shape)) == 1 or arr == 0.0:
            return Constant(np.full(shape, float(arr)))
        raise ConfigError(path, f"a scalar only stands for a 1x1 value or zero; expected shape {list(shape)}")
    if int(np.prod(shape)) == 1:
        if arr.size == 1:
            return Constant(arr.reshape(shape))
        if arr.size != arr.shape[0]:
            raise ConfigError(path, f"expected scalar samples, got shape {list(arr.shape)}")
        return _samples(arr.reshape((-1,) + shape), shape, path, K, T)
    if arr.shape == shape:
        return Constant(arr)
    if arr.ndim == len(shape) + 1:
        return _samples(arr, shape, path, K, T)
    raise ConfigError(path, f"expected shape {list(shape)} or per-step samples of it, got {list(arr.shape)}")


def _samples(arr, shape, path, K, T) -> TimeFunction:
    if arr.shape[1:] != shape:
        raise ConfigError(path, f"samples must have shape [L, {', '.join(map(str, shape))}], got {list(arr.shape)}")
    if arr.shape[0] not in (1, K):
        raise ConfigError(path, f"array-valued time functions must have length K={K} or 1, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(path, "non-finite values")
    if arr.shape[0] == 1:
        return Constant(arr[0])
    return PiecewiseConstant(arr, T)


def _family(values, d, shape, path, K, T):
    if values is None:
        return None
    if len(values) != d:
        raise ConfigError(path, f"expected {d} noise channels, got {len(values)}")
    return [_time_function(v, shape, f"{path}[{j}]", K, T) for j, v in enumerate(values)]


def _vector(value, n, path):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.shape == (1,) and n > 1 and arr[0] == 0.0:
        arr = np.zeros(n)
    if arr.shape != (n,):
        raise ConfigError(path, f"expected a vector of length {n}, got shape {list(arr.shape)}")
    return arr


def _lq_dims(p: dict) -> tuple[int, int, int]:
    n = np.atleast_1d(np.asarray(p["x0"], dtype=float)).shape[0]
    B = p["B"]
    B = B.get("constant", B.get("samples")) if isinstance(B, dict) else B
    arr = np.asarray(B, dtype=float)
    if arr.ndim == 0 or (n == 1 and arr.ndim == 1):
        m = 1
    elif arr.ndim in (2, 3) and arr.shape[-2] == n:
        m = arr.shape[-1]
    else:
        raise ConfigError("lq.B", f"cannot infer control dimension from shape {list(arr.shape)} with n={n}")
    counts = {k: len(p[k]) for k in ("C", "D", "f") if k in p}
    if "d" in p:
        d = p["d"]
    else:
        d = max(counts.values(), default=1)
    for k, c in counts.items():
        if c != d:
            raise ConfigError(f"lq.{k}", f"expected {d} noise channels, got {c}")
    return n, m, d


def _mv_dim(p: dict) -> int:
    sig = p["sigma"]
    sig = sig.get("constant", sig.get("samples")) if isinstance(sig, dict) else sig
    arr = np.asarray(sig, dtype=float)
    return 1 if arr.ndim <= 1 else arr.shape[-1]


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class RunConfig:
    document: dict
    source: str = "<dict>"

    @property
    def problem(self) -> str:
        return self.document["problem"]

    @property
    def grid(self) -> TimeGrid:
        g = self.document["grid"]
        return TimeGrid(float(g["T"]), int(g["K"]))

    @property
    def n_paths(self) -> int:
        return int(self.document["ensemble"]["n_paths"])

    @property
    def seed(self) -> int:
        return int(self.document["ensemble"]["seed"])

    @property
    def fd(self) -> dict:
        return self.document["fd"]

    @property
    def method(self) -> str:
        return self.document["sensitivity"]["method"]

    @property
    def output(self) -> dict:
        return self.document["output"]

    @property
    def check(self) -> dict:
        return self.document["check"]

    @property
    def perturbation_labels(self) -> list[str]:
        return [p["label"] for p in self.document["perturbations"]]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.document)

    def dumps(self) -> str:
        return json.dumps(self.document, indent=2, sort_keys=True) + "\n"

    def ensemble(self, dim: int, n_paths: int | None = None, seed: int | None = None) -> BrownianEnsemble:
        return BrownianEnsemble(self.grid, self.n_paths if n_paths is None else n_paths, dim,
                                self.seed if seed is None else seed)

    def with_overrides(self, seed=None, paths=None, steps=None, out=None, fmt=None) -> "RunConfig":
        doc = self.to_dict()
        if seed is not None:
            doc["ensemble"]["seed"] = seed
        if paths is not None:
            doc["ensemble"]["n_paths"] = paths
        if steps is not None:
            doc["grid"]["K"] = steps
        if out is not None:
            doc["output"]["path"] = out
        if fmt is not None:
            doc["output"]["format"] = fmt
        return parse_config(doc, self.source)

    # decoding -------------------------------------------------------------

    def _ctx(self):
        g = self.document["grid"]
        return int(g["K"]), float(g["T"])

    def lq_spec(self) -> LQSpec:
        p = self.document["lq"]
        K, T = self._ctx()
        n, m, d = _lq_dims(p)
        tf = lambda key, shape: (None if key not in p  # noqa: E731
                                 else _time_function(p[key], shape, f"lq.{key}", K, T))
        fam = lambda key, shape: _family(p.get(key), d, shape, f"lq.{key}", K, T)  # noqa: E731
        M = p.get("M")
        if M is not None:
            M = np.asarray(M, dtype=float)
            if M.ndim == 0:
                M = M * np.eye(n) if n == 1 or M == 0 else None
            if M is None or M.shape != (n, n):
                raise ConfigError("lq.M", f"expected a {n}x{n} matrix")
        return LQSpec(x0=_vector(p["x0"], n, "lq.x0"), A=tf("A", (n, n)), B=tf("B", (n, m)),
                      C=fam("C", (n, n)), D=fam("D", (n, m)), e=tf("e", (n,)), f=fam("f", (n,)),
                      Q=tf("Q", (n, n)), N=tf("N", (m, m)), M=M, d=d, delta=p.get("delta"), horizon=T)

    def mv_spec(self) -> MVSpec:
        p = self.document["mv"]
        K, T = self._ctx()
        d = _mv_dim(p)
        tf = lambda key, shape: _time_function(p[key], shape, f"mv.{key}", K, T)  # noqa: E731
        return MVSpec(x=p["x"], r=tf("r", ()), A=p["A"], mu=tf("mu", (d,)), sigma=tf("sigma", (d, d)),
                      horizon=T, delta=p.get("delta"))

    @property
    def mv_solver(self) -> str:
        return self.document["mv"].get("solver", "auto")

    def lq_perturbations(self, spec: LQSpec) -> list[tuple[str, LQPerturbation]]:
        K, T = self._ctx()
        n, m, d = spec.n, spec.m, spec.d
        out = []
        for i, blk in enumerate(self.document["perturbations"]):
            base = f"perturbations[{i}]"
            tf = lambda key, shape: (None if key not in blk  # noqa: E731
                                     else _time_function(blk[key], shape, f"{base}.{key}", K, T))
            fam = lambda key, shape: _family(blk.get(key), d, shape, f"{base}.{key}", K, T)  # noqa: E731
            dx0 = _vector(blk["dx0"], n, f"{base}.dx0") if "dx0" in blk else None
            out.append((blk["label"], LQPerturbation(dx0=dx0, dA=tf("dA", (n, n)), dB=tf("dB", (n, m)),
                                                     dC=fam("dC", (n, n)), dD=fam("dD", (n, m)),
                                                     de=tf("de", (n,)), df=fam("df", (n,)))))
        return out

    def mv_perturbations(self, spec: MVSpec) -> list[tuple[str, MVPerturbation]]:
        K, T = self._ctx()
        d = spec.d
        out = []
        for i, blk in enumerate(self.document["perturbations"]):
            base = f"perturbations[{i}]"
            tf = lambda key, shape: (None if key not in blk  # noqa: E731
                                     else _time_function(blk[key], shape, f"{base}.{key}", K, T))
            out.append((blk["label"], MVPerturbation(dx=blk.get("dx"), dr=tf("dr", ()), dA=blk.get("dA"),
                                                     dmu=tf("dmu", (d,)), dsigma=tf("dsigma", (d, d)))))
        return out

    def build(self):
        """Decode the problem and its perturbations; spec errors are reported against the config."""
        try:
            if self.problem == "lq":
                spec = self.lq_spec()
                perts = self.lq_perturbations(spec)
            else:
                spec = self.mv_spec()
                perts = self.mv_perturbations(spec)
            spec.sampled(self.grid)
            return spec, perts
        except ConfigError:
            raise
        except SpecError as exc:
            where = self.problem
            if isinstance(exc, EllipticityError):
                where = "mv.sigma"
            elif isinstance(exc, ControlWeightError):
                where = "lq.N"
            raise ConfigError(where, str(exc)) from exc


def parse_config(doc, source: str = "<dict>") -> RunConfig:
    validate(doc)
    full = _with_defaults(doc)
    validate(full)
    labels = [p["label"] for p in full["perturbations"]]
    for i, lab in enumerate(labels):
        if lab in labels[:i]:
            raise ConfigError(f"perturbations[{i}].label", f"duplicate label {lab!r}")
    cfg = RunConfig(full, source)
    cfg.build()
    return cfg


def load_config(source: str | Path) -> RunConfig:
    doc, src = _read(source)
    return parse_config(doc, src)
