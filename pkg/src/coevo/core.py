"""Domain types, the coefficient registry, counter-based randomness and configuration."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import RegistryError, ValidationError

DEFAULT_DT = 1e-3


@dataclass(frozen=True)
class Domain:
    kind: str = "torus"
    dim: int = 1

    def __post_init__(self):
        if self.kind not in ("torus", "euclidean"):
            raise ValidationError("domain.kind", f"must be 'torus' or 'euclidean', got {self.kind!r}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValidationError("domain.dim", "must be a positive integer")

    @property
    def is_torus(self):
        return self.kind == "torus"

    def reduce(self, x):
        """Map coordinates to [0, 2pi)^d on the torus; identity on R^d."""
        x = np.asarray(x, dtype=float)
        if not self.is_torus:
            return x
        return K.reduce_torus(np.array(x, dtype=float, copy=True))

    def difference(self, a, b):
        """Componentwise a - b, taken as the shortest representative on the torus."""
        diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.is_torus:
            diff = np.mod(diff + math.pi, 2 * math.pi) - math.pi
        return diff

    def distance(self, a, b):
        """Pointwise distance between arrays of points (..., d)."""
        return np.linalg.norm(self.difference(a, b), axis=-1)

    def pairwise_distance(self, a, b):
        a = np.asarray(a, dtype=float).reshape(-1, self.dim)
        b = np.asarray(b, dtype=float).reshape(-1, self.dim)
        return self.distance(a[:, None, :], b[None, :, :])


@dataclass(frozen=True)
class CoefficientBounds:
    """Sup norms and Lipschitz constants of the dynamics coefficients."""

    mu: float = 0.0
    grad_mu: float = 0.0
    sigma: float = 0.0
    grad_sigma: float = 0.0
    alpha: float = 0.0
    grad_alpha: float = 0.0
    alpha1: float = 0.0
    alpha2: float = 0.0
    beta: float = 0.0
    grad_beta: float = 0.0
    clip_radius: float | None = None

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class CoefficientSet:
    """A named preset: drift mu, kernel sigma, alpha = alpha1(x) alpha2(y), beta, nu.

    The callables below are vectorized over leading axes and exist for
    inspection and testing; the integrators call the compiled kernels.
    """

    name: str
    code: int
    domain: Domain
    nu: float
    params: dict
    bounds: CoefficientBounds

    @property
    def prm(self):
        return np.array([self.params.get("a", 0.0), self.params.get("clip_radius", math.inf)])

    def _pts(self, x):
        return np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1, self.domain.dim))

    def mu(self, x):
        x = np.asarray(x, dtype=float)
        pts = self._pts(x)
        out = np.empty_like(pts)
        K.mu_all(self.code, self.prm, pts, out)
        return out.reshape(x.shape)

    def alpha1(self, x):
        x = np.asarray(x, dtype=float)
        return K.alpha1_all(self.code, self.prm, self._pts(x)).reshape(x.shape[:-1])

    def alpha2(self, x):
        x = np.asarray(x, dtype=float)
        return K.alpha2_all(self.code, self.prm, self._pts(x)).reshape(x.shape[:-1])

    def alpha(self, x, y):
        # separable by construction
        return self.alpha1(x) * self.alpha2(y)

    def _pair_features(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return x.shape, K.features(self.code, self._pts(x)), K.features(self.code, self._pts(y))

    def beta(self, x, y):
        shape, fx, fy = self._pair_features(x, y)
        return K.beta_pairs(self.code, fx, fy).reshape(shape[:-1])

    def sigma(self, x, y):
        shape, fx, fy = self._pair_features(x, y)
        return K.sigma_pairs(self.code, fx, fy).reshape(shape)

    def beta_matrix(self, x, y=None):
        """Pairwise beta(x_i, y_j) for point arrays (n, d) and (m, d)."""
        fx = K.features(self.code, self._pts(x))
        fy = fx if y is None else K.features(self.code, self._pts(y))
        return K.beta_matrix(self.code, fx, fy)

    def weight_growth(self):
        """(rate, forcing) so that |w(t)| <= e^{rate t}(|w(0)| + forcing t)."""
        return self.bounds.alpha, self.bounds.beta

    def describe(self):
        return {"preset": self.name, "nu": self.nu, "params": dict(self.params),
                "domain": {"kind": self.domain.kind, "dim": self.domain.dim},
                "bounds": self.bounds.as_dict(), "label": "preset chosen for experiments"}


def _zero(dim, nu, params):
    kind = params.pop("domain_kind", "euclidean")
    return K.ZERO, Domain(kind, dim), 0.0 if nu is None else nu, CoefficientBounds()


def _linear_decay(dim, nu, params):
    radius = float(params.setdefault("clip_radius", 10.0))
    bounds = CoefficientBounds(mu=radius, grad_mu=1.0, clip_radius=radius)
    return K.LINEAR_DECAY, Domain("euclidean", dim), 0.0 if nu is None else nu, bounds


def _kuramoto(dim, nu, params):
    a = float(params.setdefault("a", 1.0))
    if a < 0:
        raise ValidationError("coefficients.a", "decay rate must be non-negative")
    root = math.sqrt(a)
    bounds = CoefficientBounds(sigma=math.sqrt(dim), grad_sigma=1.0, alpha=a, grad_alpha=0.0,
                               alpha1=root, alpha2=root, beta=1.0, grad_beta=1.0)
    return K.KURAMOTO, Domain("torus", dim), 0.5 if nu is None else nu, bounds


def _tanh_consensus(dim, nu, params):
    a = float(params.setdefault("a", 1.0))
    radius = float(params.setdefault("clip_radius", 10.0))
    # sup |d/dr r/(1+r^2)^2 ...|: |grad (1/(1+r^2))| peaks at r = 1/sqrt(3)
    grad_a1 = a * 3.0 * math.sqrt(3.0) / 8.0
    bounds = CoefficientBounds(mu=radius, grad_mu=1.0, sigma=math.sqrt(dim), grad_sigma=1.0,
                               alpha=a, grad_alpha=grad_a1, alpha1=a, alpha2=1.0,
                               beta=1.0, grad_beta=math.exp(-0.5), clip_radius=radius)
    return K.TANH_CONSENSUS, Domain("euclidean", dim), 0.2 if nu is None else nu, bounds


_REGISTRY = {
    "zero": _zero,
    "linear-decay": _linear_decay,
    "kuramoto-adaptive": _kuramoto,
    "tanh-consensus": _tanh_consensus,
}


def available_presets():
    return tuple(_REGISTRY)


def lookup_coefficients(name, *, dim=1, nu=None, **params):
    """Instantiate a registered coefficient preset.

    ``kuramoto-adaptive`` lives on the torus with sigma(x, y) = sin(y - x)
    componentwise, beta(x, y) = mean cos(y - x) and constant alpha = -a.
    ``linear-decay`` is mu(x) = -x clipped to a ball, everything else zero.
    ``tanh-consensus`` is a Euclidean preset with non-constant alpha1.
    """
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise RegistryError(name, _REGISTRY) from None
    params = dict(params)
    code, domain, nu_val, bounds = factory(int(dim), nu, params)
    if not (math.isfinite(nu_val) and nu_val >= 0):
        raise ValidationError("coefficients.nu", "must be finite and non-negative")
    return CoefficientSet(name, code, domain, float(nu_val), params, bounds)


def _stream_key(seed, role, step):
    role_id = zlib.crc32(role.encode())
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, role_id, int(step)])
    return ss.generate_state(2, np.uint64)


@dataclass(frozen=True)
class RngSpec:
    """Stateless randomness keyed by (seed, role, step); entities index the draw array.

    Each (seed, role, step) selects an independent Philox stream; entity
    ``e`` reads row ``e`` of the draws, so a given entity sees the same
    numbers whatever the population size and whatever the evaluation order.
    """

    seed: int = 0

    def generator(self, role, step=0):
        return np.random.Generator(np.random.Philox(key=_stream_key(self.seed, role, step)))

    def normals(self, role, step, shape):
        return self.generator(role, step).standard_normal(shape)

    def uniforms(self, role, step, shape):
        return self.generator(role, step).random(shape)

    def child(self, tag):
        """Derived spec for an independent sub-experiment (e.g. one replica)."""
        h = hashlib.sha256(f"{self.seed}:{tag}".encode()).digest()
        return RngSpec(int.from_bytes(h[:8], "little"))


@dataclass(frozen=True)
class TimeGrid:
    t_end: float
    dt: float = DEFAULT_DT

    def __post_init__(self):
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValidationError("time.dt", "dt must be positive")
        if not (math.isfinite(self.t_end) and self.t_end > 0):
            raise ValidationError("time.t_end", "t_end must be positive")
        n = round(self.t_end / self.dt)
        if n < 1 or abs(n * self.dt - self.t_end) > 1e-12 * self.t_end:
            raise ValidationError("time.dt", f"t_end={self.t_end} is not a multiple of dt={self.dt}")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))

    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    def index_of(self, t):
        k = round(t / self.dt)
        if k < 0 or k > self.n_steps or abs(k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValidationError("snapshots", f"time {t} is not on the grid")
        return int(k)


# ---------------------------------------------------------------- configuration

DEFAULT_CONFIG = {
    "domain": {"kind": "torus", "dim": 1},
    "coefficients": {"preset": "kuramoto-adaptive"},
    "time": {"t_end": 1.0, "dt": DEFAULT_DT},
    "rng": {"seed": 0},
    "system": {
        "N": 100,
        "variant": "base",
        "labels": 64,
        "paths": 1,
        "states": "ramp",
        "kernel": "cosine",
        "mixture": "iid",
    },
    "experiment": {"kind": "propagation_rate", "replicas": 8, "threads": 1,
                   "memory_cap_gb": 4.0},
}

_VARIANTS = ("base", "decay_ou", "weight_noise", "decay_limit")
_MIXTURES = ("iid", "stratified", "dirac")


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_finite(obj, path=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{path}.{k}" if path else k)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{path}[{i}]")
    elif isinstance(obj, float) and not math.isfinite(obj):
        raise ValidationError(path, "must be finite")


def check_mixture_rows(rows, masses=None, tol=1e-10):
    """Validate mixture rows against the averaging condition; returns (rows, masses)."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValidationError("system.mixture", "rows must be a non-empty 2-d array")
    if np.any(rows < 0) or not np.all(np.isfinite(rows)):
        raise ValidationError("system.mixture", "rows must be finite and non-negative")
    if np.max(np.abs(rows.sum(axis=1) - 1.0)) > tol:
        raise ValidationError("system.mixture", "each row must be a probability vector")
    if masses is None:
        masses = np.full(rows.shape[1], 1.0 / rows.shape[1])
    masses = np.asarray(masses, dtype=float)
    if masses.shape != (rows.shape[1],):
        raise ValidationError("system.mixture", "rows and label masses disagree in length")
    dev = np.max(np.abs(rows.mean(axis=0) - masses))
    if dev > tol:
        raise ValidationError("system.mixture",
                              f"averaging condition violated: column mean deviates by {dev:.3g}")
    return rows, masses


def validate_config(cfg):
    """Fill defaults and check every field; returns a normalized nested dict."""
    cfg = _merge(DEFAULT_CONFIG, cfg)
    _check_finite(cfg)
    dom = cfg["domain"]
    Domain(dom["kind"], dom["dim"])
    t = cfg["time"]
    if not (isinstance(t["dt"], (int, float)) and t["dt"] > 0):
        raise ValidationError("time.dt", "dt must be positive")
    TimeGrid(float(t["t_end"]), float(t["dt"]))
    preset = cfg["coefficients"]["preset"]
    coef = coefficients_from_config(cfg)
    if coef.domain.kind != dom["kind"] and preset != "zero":
        raise ValidationError("domain.kind",
                              f"preset {preset!r} requires a {coef.domain.kind} domain")
    seed = cfg["rng"]["seed"]
    if not isinstance(seed, int) or seed < 0 or seed >= 2 ** 64:
        raise ValidationError("rng.seed", "must be an unsigned 64-bit integer")
    sys_ = cfg["system"]
    if not isinstance(sys_["N"], int) or sys_["N"] < 2:
        raise ValidationError("system.N", "N must be an integer >= 2")
    if sys_["variant"] not in _VARIANTS:
        raise ValidationError("system.variant", f"must be one of {_VARIANTS}")
    if sys_["variant"] in ("decay_ou", "decay_limit"):
        eps = sys_.setdefault("epsilon", 1.0)
        if not (eps > 0):
            raise ValidationError("system.epsilon", "epsilon must be positive")
    if sys_["variant"] == "weight_noise":
        eta = sys_.setdefault("eta", 0.1)
        if not (eta >= 0):
            raise ValidationError("system.eta", "eta must be non-negative")
    if not isinstance(sys_["labels"], int) or sys_["labels"] < 1:
        raise ValidationError("system.labels", "must be a positive integer")
    if not isinstance(sys_["paths"], int) or sys_["paths"] < 1:
        raise ValidationError("system.paths", "must be a positive integer")
    mix = sys_["mixture"]
    if isinstance(mix, str):
        if mix not in _MIXTURES:
            raise ValidationError("system.mixture", f"must be one of {_MIXTURES} or explicit rows")
    else:
        rows, _ = check_mixture_rows(mix, sys_.get("masses"))
        if rows.shape[0] != sys_["N"]:
            raise ValidationError("system.mixture", "need one row per agent")
    exp = cfg["experiment"]
    if "sweep" in exp:
        sweep = list(exp["sweep"])
        if any(b <= a for a, b in zip(sweep, sweep[1:])):
            raise ValidationError("experiment.sweep", "N values must be strictly increasing")
    return cfg


def load_config(path):
    from ._compat import toml_module

    toml = toml_module()

    try:
        with open(path, "rb") as fh:
            raw = toml.load(fh)
    except OSError as exc:
        raise ValidationError("config", f"cannot read {path}: {exc}") from None
    except toml.TOMLDecodeError as exc:
        raise ValidationError("config", f"invalid TOML in {path}: {exc}") from None
    return validate_config(raw)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def coefficients_from_config(cfg):
    c = dict(cfg["coefficients"])
    preset = c.pop("preset")
    if preset == "zero":
        c["domain_kind"] = cfg["domain"]["kind"]
    return lookup_coefficients(preset, dim=cfg["domain"]["dim"], **c)
