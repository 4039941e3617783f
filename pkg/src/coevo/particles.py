"""Euler-Maruyama integration of the finite-N co-evolving state/weight system."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .core import CoefficientSet, RngSpec, TimeGrid
from .errors import IntegrationError, ValidationError


@dataclass
class ParticleEnsemble:
    """N agent states (N, d) with the dense N x N weight matrix at time t.

    Diagonal weights are stored and integrated but never enter the
    interaction sums.
    """

    states: np.ndarray
    weights: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        self.weights = np.ascontiguousarray(self.weights, dtype=float)
        n = self.states.shape[0]
        if self.weights.shape != (n, n):
            raise ValidationError("weights", f"expected shape ({n}, {n}), got {self.weights.shape}")

    @property
    def n_agents(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[1]

    def copy(self):
        return ParticleEnsemble(self.states.copy(), self.weights.copy(), self.t)

    def is_finite(self):
        return bool(np.isfinite(self.states).all() and np.isfinite(self.weights).all())


@dataclass(frozen=True)
class DynamicsVariant:
    """Weight dynamics: ``base``, ``decay_ou`` (epsilon), ``weight_noise`` (eta).

    ``decay_limit`` is the epsilon -> 0 limit of ``decay_ou`` where the
    weights are slaved to beta of the current states.
    """

    kind: str = "base"
    epsilon: float = 1.0
    eta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("base", "decay_ou", "weight_noise", "decay_limit"):
            raise ValidationError("system.variant", f"unknown variant {self.kind!r}")
        if self.kind == "decay_ou" and not self.epsilon > 0:
            raise ValidationError("system.epsilon", "epsilon must be positive")
        if self.kind == "weight_noise" and not self.eta >= 0:
            raise ValidationError("system.eta", "eta must be non-negative")

    @classmethod
    def base(cls):
        return cls("base")

    @classmethod
    def decay_ou(cls, epsilon):
        return cls("decay_ou", epsilon=float(epsilon))

    @classmethod
    def weight_noise(cls, eta):
        return cls("weight_noise", eta=float(eta))

    @classmethod
    def decay_limit(cls):
        return cls("decay_limit")

    @classmethod
    def from_config(cls, system):
        kind = system.get("variant", "base")
        return cls(kind, epsilon=float(system.get("epsilon", 1.0)), eta=float(system.get("eta", 0.0)))

    @property
    def code(self):
        return {"base": K.BASE, "decay_ou": K.DECAY_OU,
                "weight_noise": K.WEIGHT_NOISE, "decay_limit": K.DECAY_LIMIT}[self.kind]

    @property
    def param(self):
        return self.epsilon if self.kind == "decay_ou" else 1.0


_NO_NOISE = np.zeros((1, 1))


def weight_bound(coeffs, variant, w0_max, t, noise_max=0.0):
    """A-priori bound on max |w_ij(t)| for the given dynamics.

    For the base dynamics |w(t)| <= e^{|alpha| t}(|w(0)| + |beta| t); the
    explicit Euler recursion satisfies the same bound exactly. With weight
    noise, v = w - eta*B solves an ODE forced by alpha*eta*B, giving the
    extra ``noise_max`` terms where noise_max bounds |B_ij| on [0, t].
    """
    b = coeffs.bounds
    if variant.kind == "decay_ou":
        # convex combination of w(0) and values of beta while dt <= epsilon
        return max(w0_max, b.beta)
    if variant.kind == "decay_limit":
        return b.beta
    growth = math.exp(b.alpha * t)
    if variant.kind == "weight_noise":
        eta_k = variant.eta * noise_max
        return growth * (w0_max + (b.beta + b.alpha * eta_k) * t) + eta_k
    return growth * (w0_max + b.beta * t)


def _first_bad_row(*arrays):
    for a in arrays:
        bad = ~np.isfinite(a.reshape(a.shape[0], -1)).all(axis=1)
        if bad.any():
            return int(np.argmax(bad))
    return -1


def state_noise(rng, role, step_index, n, d, stream_ids=None):
    """Standard normals for n entities; row e belongs to stream ``stream_ids[e]``."""
    if stream_ids is None:
        return rng.normals(role, step_index, (n, d))
    stream_ids = np.asarray(stream_ids)
    draws = rng.normals(role, step_index, (int(stream_ids.max()) + 1, d))
    return draws[stream_ids]


def euler_state(x, drift, dt, nu, gauss, domain):
    """x + drift*dt + nu*sqrt(dt)*gauss, reduced to the domain."""
    # overflow surfaces as a non-finite state, reported by the caller
    with np.errstate(over="ignore", invalid="ignore"):
        out = x + dt * drift
        if nu != 0.0:
            out = out + (nu * math.sqrt(dt)) * gauss
    if domain.is_torus:
        out = K.reduce_torus(out)
    return out


def advance(states, weights, coeffs, variant, dt, rng, step_index, *,
            probs=None, role="state", stream_ids=None, weight_role="weight",
            gauss=None, check=True):
    """One in-place Euler step of (states, weights); returns the new states array.

    ``probs`` are the averaging weights over the other entities (1/N for the
    particle system, masses/K for the discretized limit). The sum skips
    the self pair in both cases. ``gauss`` overrides the state noise draws.
    """
    n, d = states.shape
    pid = coeffs.code
    prm = coeffs.prm
    if probs is None:
        probs = np.full(n, 1.0 / n)
    feats = K.features(pid, states)
    a1 = K.alpha1_all(pid, prm, states)
    a2 = K.alpha2_all(pid, prm, states)
    drift = np.empty_like(states)
    K.mu_all(pid, prm, states, drift)
    acc = np.empty_like(states)
    if variant.kind == "weight_noise" and variant.eta != 0.0:
        wnoise = (variant.eta * math.sqrt(dt)) * rng.normals(weight_role, step_index, (n, n))
    else:
        wnoise = _NO_NOISE
    vcode = variant.code
    if vcode == K.WEIGHT_NOISE and wnoise is _NO_NOISE:
        vcode = K.BASE
    K.pair_step(pid, feats, a1, feats, a2, weights, probs, True, True,
                dt, vcode, variant.param, wnoise, acc)
    drift += acc
    if gauss is None and coeffs.nu != 0.0:
        gauss = state_noise(rng, role, step_index, n, d, stream_ids)
    new_states = euler_state(states, drift, dt, coeffs.nu, gauss, coeffs.domain)
    if variant.kind == "decay_limit":
        fn = K.features(pid, new_states)
        weights[...] = K.beta_matrix(pid, fn, fn)
    if check:
        bad = _first_bad_row(new_states, weights)
        if bad >= 0:
            raise IntegrationError(step_index, bad)
    return new_states, (wnoise if wnoise is not _NO_NOISE else None)


def step(ens, coeffs, variant, dt, rng, step_index, stream_ids=None):
    """Return the ensemble advanced by one Euler-Maruyama step; the input is untouched."""
    if not dt > 0:
        raise ValidationError("time.dt", "dt must be positive")
    w = ens.weights.copy()
    x, _ = advance(ens.states, w, coeffs, variant, dt, rng, step_index, stream_ids=stream_ids)
    return ParticleEnsemble(x, w, ens.t + dt)


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    weight_bounds: list = field(default_factory=list)
    state_history: np.ndarray | None = None

    @property
    def final(self):
        return self.snapshots[-1]

    def bound_holds(self, slack=0.0):
        return all(float(np.max(np.abs(s.weights), initial=0.0)) <= b + slack
                   for s, b in zip(self.snapshots, self.weight_bounds))


def simulate(init, coeffs, variant, grid, rng, snapshots=(), *, record_states=False,
             stream_ids=None, check_bound=True):
    """Integrate ``init`` over ``grid``; keeps the requested snapshots plus the final state.

    The a-priori weight bound is evaluated at every snapshot and a
    violation (beyond a 10*dt integrator slack) raises IntegrationError.
    """
    if not isinstance(grid, TimeGrid):
        raise ValidationError("grid", "expected a TimeGrid")
    want = sorted({grid.index_of(t) for t in snapshots} | {grid.n_steps})
    x = init.states.copy()
    w = init.weights.copy()
    w0 = float(np.max(np.abs(w), initial=0.0))
    noise_acc = np.zeros_like(w) if variant.kind == "weight_noise" else None
    noise_max = 0.0
    history = np.empty((grid.n_steps + 1,) + x.shape) if record_states else None
    if record_states:
        history[0] = x
    traj = Trajectory(state_history=history)

    def keep(k):
        t = init.t + k * grid.dt
        bound = weight_bound(coeffs, variant, w0, k * grid.dt, noise_max)
        snap = ParticleEnsemble(x.copy(), w.copy(), t)
        if check_bound and np.max(np.abs(w), initial=0.0) > bound + 10 * grid.dt:
            raise IntegrationError(k, int(np.argmax(np.abs(w).max(axis=1))), "weight bound")
        traj.times.append(t)
        traj.snapshots.append(snap)
        traj.weight_bounds.append(bound)

    if 0 in want:
        keep(0)
    for k in range(grid.n_steps):
        x, wn = advance(x, w, coeffs, variant, grid.dt, rng, k, stream_ids=stream_ids)
        if noise_acc is not None and wn is not None:
            noise_acc += wn / variant.eta
            noise_max = max(noise_max, float(np.max(np.abs(noise_acc))))
        if record_states:
            history[k + 1] = x
        if k + 1 in want:
            keep(k + 1)
    return traj


def ou_weight_oracle(state_traj, coeffs, epsilon, w0, dt):
    """Weights of the decay dynamics from the variation-of-constants formula.

    w(t) = e^{-t/eps} w(0) + int_0^t eps^{-1} e^{-(t-s)/eps} beta(X_i(s), X_j(s)) ds,
    with the integral evaluated by the composite trapezoid rule on the
    grid of ``state_traj`` (shape (T+1, N, d)). Returns (T+1, N, N).
    """
    state_traj = np.asarray(state_traj, dtype=float)
    w0 = np.asarray(w0, dtype=float)
    decay = math.exp(-dt / epsilon)
    out = np.empty((state_traj.shape[0],) + w0.shape)
    integral = np.zeros_like(w0)
    beta_prev = coeffs.beta_matrix(state_traj[0])
    out[0] = w0
    for k in range(1, state_traj.shape[0]):
        beta_k = coeffs.beta_matrix(state_traj[k])
        integral = decay * integral + (0.5 * dt / epsilon) * (decay * beta_prev + beta_k)
        out[k] = math.exp(-k * dt / epsilon) * w0 + integral
        beta_prev = beta_k
    if not np.isfinite(out).all():
        raise IntegrationError(int(np.argmax(~np.isfinite(out).reshape(len(out), -1).all(axis=1))), -1,
                               "oracle weight")
    return out


# ------------------------------------------------------------------ snapshot IO

def write_snapshot(path, ens):
    """CSV: header row ``N,d,t``, one values row, then N state rows and N weight rows."""
    n, d = ens.states.shape
    with open(path, "w") as fh:
        fh.write("N,d,t\n")
        fh.write(f"{n},{d},{ens.t!r}\n")
        for row in ens.states:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
        for row in ens.weights:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_snapshot(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "N,d,t":
        raise ValidationError("snapshot", f"{path}: missing N,d,t header")
    n_s, d_s, t_s = lines[1].split(",")
    n, d = int(n_s), int(d_s)
    body = [np.array(line.split(","), dtype=float) for line in lines[2:2 + 2 * n]]
    if len(body) != 2 * n:
        raise ValidationError("snapshot", f"{path}: expected {2 * n} data rows")
    states = np.vstack(body[:n]).reshape(n, d)
    weights = np.vstack(body[n:])
    return ParticleEnsemble(states, weights, float(t_s))
