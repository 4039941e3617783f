"""Discretized McKean-Vlasov limit, the Picard integral operator, mixture sampling
and coupled particle/shadow runs measuring the distance to the limit."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .core import Domain, RngSpec, TimeGrid, check_mixture_rows
from .errors import IntegrationError, ResourceGuardError, ValidationError
from .particles import (DynamicsVariant, ParticleEnsemble, advance, euler_state,
                        state_noise, weight_bound)

MAX_ENTITIES = 8192


@dataclass
class StepTriplet:
    """Finite state-weight triplet: label masses, per-label states, label kernel."""

    masses: np.ndarray
    states: np.ndarray
    kernel: np.ndarray

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        self.kernel = np.asarray(self.kernel, dtype=float)
        m = self.masses.shape[0]
        if self.masses.ndim != 1 or m < 1:
            raise ValidationError("triplet.masses", "must be a non-empty vector")
        if np.any(self.masses <= 0) or abs(self.masses.sum() - 1.0) > 1e-12:
            raise ValidationError("triplet.masses", "must be positive and sum to 1")
        if self.states.shape[0] != m or self.kernel.shape != (m, m):
            raise ValidationError("triplet", "masses, states and kernel sizes disagree")
        if not (np.isfinite(self.states).all() and np.isfinite(self.kernel).all()):
            raise ValidationError("triplet", "states and kernel must be finite")

    @classmethod
    def uniform(cls, states, kernel):
        states = np.asarray(states, dtype=float)
        return cls(np.full(len(states), 1.0 / len(states)), states, kernel)

    @property
    def n_labels(self):
        return self.masses.shape[0]

    @property
    def dim(self):
        return self.states.shape[1]

    def permuted(self, perm):
        perm = np.asarray(perm)
        return StepTriplet(self.masses[perm], self.states[perm], self.kernel[np.ix_(perm, perm)])

    @classmethod
    def from_ensemble(cls, ens):
        """Empirical triplet of an ensemble: uniform masses over agents."""
        return cls.uniform(ens.states, ens.weights)


def make_triplet(M, domain, states="ramp", kernel="cosine", *, blocks=4, level=1.0,
                 rng=None):
    """Build one of the standard source triplets with uniform label masses.

    states: ``ramp`` (evenly spread), ``random`` (needs rng) or ``zero``.
    kernel: ``cosine`` (1 + 0.5 cos of the label gap), ``constant`` (level),
    ``blocks`` (1 inside, 0.2 across ``blocks`` equal groups) or ``random``.
    """
    d = domain.dim
    frac = (np.arange(M) + 0.5) / M
    if states == "ramp":
        base = 2 * math.pi * frac if domain.is_torus else 2 * frac - 1
        xs = np.repeat(base[:, None], d, axis=1)
    elif states == "random":
        if rng is None:
            raise ValidationError("system.states", "random states need an rng")
        u = rng.uniforms("triplet-states", 0, (M, d))
        xs = 2 * math.pi * u if domain.is_torus else 2 * u - 1
    elif states == "zero":
        xs = np.zeros((M, d))
    else:
        raise ValidationError("system.states", f"unknown state family {states!r}")
    if kernel == "cosine":
        gap = frac[:, None] - frac[None, :]
        ker = 1.0 + 0.5 * np.cos(2 * math.pi * gap)
    elif kernel == "constant":
        ker = np.full((M, M), float(level))
    elif kernel == "blocks":
        grp = np.minimum((frac * blocks).astype(int), blocks - 1)
        ker = np.where(grp[:, None] == grp[None, :], 1.0, 0.2)
    elif kernel == "random":
        if rng is None:
            raise ValidationError("system.kernel", "random kernel needs an rng")
        ker = rng.uniforms("triplet-kernel", 0, (M, M))
    else:
        raise ValidationError("system.kernel", f"unknown kernel family {kernel!r}")
    if domain.is_torus:
        xs = domain.reduce(xs)
    return StepTriplet(np.full(M, 1.0 / M), xs, ker)


@dataclass
class MixtureSpec:
    """N probability rows over the labels whose average is the label measure."""

    rows: np.ndarray
    masses: np.ndarray | None = None

    def __post_init__(self):
        self.rows, self.masses = check_mixture_rows(self.rows, self.masses)

    @property
    def n_agents(self):
        return self.rows.shape[0]

    @classmethod
    def iid(cls, N, masses):
        masses = np.asarray(masses, dtype=float)
        return cls(np.repeat(masses[None, :], N, axis=0), masses)

    @classmethod
    def stratified(cls, N, masses):
        """Row i is the normalized restriction of the labels to the i-th mass block [i/N, (i+1)/N)."""
        masses = np.asarray(masses, dtype=float)
        edges = np.concatenate([[0.0], np.cumsum(masses)])
        edges[-1] = 1.0
        lo = np.arange(N)[:, None] / N
        hi = (np.arange(N)[:, None] + 1) / N
        overlap = np.clip(np.minimum(hi, edges[None, 1:]) - np.maximum(lo, edges[None, :-1]), 0, None)
        rows = overlap * N
        rows /= rows.sum(axis=1, keepdims=True)
        return cls(rows, masses)

    @classmethod
    def dirac(cls, M, repeat=1):
        """Agent i sits on label i // repeat; needs uniform masses over M labels."""
        rows = np.zeros((M * repeat, M))
        rows[np.arange(M * repeat), np.arange(M * repeat) // repeat] = 1.0
        return cls(rows, np.full(M, 1.0 / M))

    def draw(self, rng, role="labels", step=0):
        u = rng.uniforms(role, step, self.n_agents)
        cdf = np.cumsum(self.rows, axis=1)
        idx = np.array([np.searchsorted(c, v, side="right") for c, v in zip(cdf, u)])
        # rounding can leave u beyond the last cumulative value
        last = self.rows.shape[1] - 1 - np.argmax(self.rows[:, ::-1] > 0, axis=1)
        return np.minimum(idx, last)


def mixture_from_config(system, masses):
    N = system["N"]
    mix = system.get("mixture", "iid")
    if isinstance(mix, str):
        if mix == "iid":
            return MixtureSpec.iid(N, masses)
        if mix == "stratified":
            return MixtureSpec.stratified(N, masses)
        if mix == "dirac":
            if N % len(masses):
                raise ValidationError("system.mixture", "dirac mixture needs N a multiple of the label count")
            return MixtureSpec.dirac(len(masses), N // len(masses))
        raise ValidationError("system.mixture", f"unknown mixture {mix!r}")
    return MixtureSpec(np.asarray(mix, dtype=float), masses)


def sample_mixture(triplet, mix, rng, role="labels"):
    """Independent mixture sample: labels xi_i ~ row i; X_i = states[xi_i], w_ij = kernel[xi_i, xi_j]."""
    if mix.rows.shape[1] != triplet.n_labels:
        raise ValidationError("system.mixture", "rows must range over the triplet labels")
    if np.max(np.abs(mix.masses - triplet.masses)) > 1e-10:
        raise ValidationError("system.mixture", "averaging condition fails for the triplet masses")
    labels = mix.draw(rng, role)
    ens = ParticleEnsemble(triplet.states[labels].copy(), triplet.kernel[np.ix_(labels, labels)].copy())
    return labels, ens


# -------------------------------------------------------------- discretized limit

@dataclass
class DiscretizedLimit:
    """M labels x K Brownian streams; entity e = m*K + k carries label m, stream k."""

    M: int
    K: int
    masses: np.ndarray
    states: np.ndarray
    weights: np.ndarray
    t: float = 0.0

    @property
    def n_entities(self):
        return self.M * self.K

    @property
    def labels(self):
        return np.arange(self.n_entities) // self.K

    @property
    def probs(self):
        return np.repeat(self.masses / self.K, self.K)


@dataclass
class LimitTrajectory:
    times: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    weight_bounds: list = field(default_factory=list)
    state_history: np.ndarray | None = None
    weight_history: np.ndarray | None = None
    probs: np.ndarray | None = None

    @property
    def final(self):
        return self.snapshots[-1]

    def bound_holds(self, slack=0.0):
        return all(float(np.max(np.abs(s.weights), initial=0.0)) <= b + slack
                   for s, b in zip(self.snapshots, self.weight_bounds))


def _guard_entities(n):
    if n > MAX_ENTITIES:
        raise ResourceGuardError(f"M*K = {n} exceeds the limit of {MAX_ENTITIES} entities")
    if n < 2:
        raise ValidationError("system.paths", "need at least two entities (M*K >= 2)")


def initial_limit(init, K):
    _guard_entities(init.n_labels * K)
    labels = np.arange(init.n_labels * K) // K
    return DiscretizedLimit(init.n_labels, K, init.masses.copy(),
                            np.ascontiguousarray(init.states[labels]),
                            np.ascontiguousarray(init.kernel[np.ix_(labels, labels)]))


def solve_limit(init, coeffs, grid, K, rng, *, variant=None, snapshots=(), role="state",
                record_states=False, record_weights=False):
    """Time-step the discretized McKean-Vlasov system.

    The expectation over (label, path) is the average over all M*K
    entities with probability masses[m]/K, skipping the entity itself so
    that with K = 1 and uniform masses this is exactly the M-agent system.
    Entity e draws its noise from row e of ``role``.
    """
    if K < 1:
        raise ValidationError("system.paths", "K must be >= 1")
    variant = variant or DynamicsVariant.base()
    lim = initial_limit(init, K)
    probs = lim.probs
    x = lim.states.copy()
    w = lim.weights.copy()
    w0 = float(np.max(np.abs(w)))
    want = sorted({grid.index_of(t) for t in snapshots} | {grid.n_steps})
    traj = LimitTrajectory(probs=probs)
    if record_states:
        traj.state_history = np.empty((grid.n_steps + 1,) + x.shape)
        traj.state_history[0] = x
    if record_weights:
        traj.weight_history = np.empty((grid.n_steps + 1,) + w.shape)
        traj.weight_history[0] = w

    def keep(k):
        bound = weight_bound(coeffs, variant, w0, k * grid.dt)
        if np.max(np.abs(w)) > bound + 10 * grid.dt:
            raise IntegrationError(k, int(np.argmax(np.abs(w).max(axis=1))), "weight bound")
        traj.times.append(k * grid.dt)
        traj.snapshots.append(DiscretizedLimit(lim.M, K, lim.masses, x.copy(), w.copy(), k * grid.dt))
        traj.weight_bounds.append(bound)

    if 0 in want:
        keep(0)
    for k in range(grid.n_steps):
        x, _ = advance(x, w, coeffs, variant, grid.dt, rng, k, probs=probs, role=role)
        if record_states:
            traj.state_history[k + 1] = x
        if record_weights:
            traj.weight_history[k + 1] = w
        if k + 1 in want:
            keep(k + 1)
    return traj


# ------------------------------------------------------------------ Picard operator

@dataclass
class LimitPath:
    """A candidate trajectory on the grid: states (T+1, E, d), weights (T+1, E, E)."""

    states: np.ndarray
    weights: np.ndarray


def _trapezoid_cumulative(values, dt):
    out = np.zeros_like(values)
    out[1:] = np.cumsum(0.5 * dt * (values[1:] + values[:-1]), axis=0)
    return out


def picard_apply(candidate, init, coeffs, grid, K, rng, *, role="state"):
    """Apply the integral operator to a candidate path with the same noise realization.

    X(t) = X(0) + int mu(X) + nu B(t) + int sum_{e' != e} p_e' w_ee' sigma(X_e, X_e'),
    W(t) = W(0) + int (alpha W + beta), integrals by the trapezoid rule.
    """
    T = grid.n_steps
    if candidate.states.shape[0] != T + 1 or candidate.weights.shape[0] != T + 1:
        raise ValidationError("candidate", "candidate path is not defined on the grid")
    lim = initial_limit(init, K)
    E, d = lim.states.shape
    probs = lim.probs
    pid, prm = coeffs.code, coeffs.prm
    mu_v = np.empty((T + 1, E, d))
    inter = np.empty((T + 1, E, d))
    wdrift = np.empty((T + 1, E, E))
    offdiag = ~np.eye(E, dtype=bool)
    for n in range(T + 1):
        xs = np.ascontiguousarray(candidate.states[n])
        ws = candidate.weights[n]
        kern.mu_all(pid, prm, xs, mu_v[n])
        f = kern.features(pid, xs)
        sig = kern.sigma_matrix(pid, f, f)
        inter[n] = np.einsum("ij,ijk->ik", ws * offdiag * probs[None, :], sig)
        a = np.outer(kern.alpha1_all(pid, prm, xs), kern.alpha2_all(pid, prm, xs))
        wdrift[n] = a * ws + kern.beta_matrix(pid, f, f)
    noise = np.zeros((T + 1, E, d))
    if coeffs.nu != 0.0:
        for n in range(T):
            noise[n + 1] = noise[n] + math.sqrt(grid.dt) * state_noise(rng, role, n, E, d)
    states = lim.states[None] + _trapezoid_cumulative(mu_v + inter, grid.dt) + coeffs.nu * noise
    if coeffs.domain.is_torus:
        states = kern.reduce_torus(states)
    weights = lim.weights[None] + _trapezoid_cumulative(wdrift, grid.dt)
    return LimitPath(states, weights)


def path_distance(a, b, domain):
    """Sup-norm distance between two paths (torus-aware for states)."""
    ds = float(np.max(np.abs(domain.difference(a.states, b.states)), initial=0.0))
    dw = float(np.max(np.abs(a.weights - b.weights), initial=0.0))
    return max(ds, dw)


def picard_iterate(init, coeffs, grid, K, rng, iterations, *, role="state"):
    """Picard iteration from the constant-in-time initial guess; returns (path, increments)."""
    lim = initial_limit(init, K)
    T = grid.n_steps
    path = LimitPath(np.repeat(lim.states[None], T + 1, axis=0),
                     np.repeat(lim.weights[None], T + 1, axis=0))
    increments = []
    for _ in range(iterations):
        nxt = picard_apply(path, init, coeffs, grid, K, rng, role=role)
        increments.append(path_distance(nxt, path, coeffs.domain))
        path = nxt
    return path, increments


# ------------------------------------------------------------ propagation error

def limit_weight_sup(coeffs, w0_max, t):
    """A-priori sup of the limit weights on [0, t]: e^{|alpha| t}(|w(0)| + |beta| t)."""
    b = coeffs.bounds
    return math.exp(b.alpha * t) * (w0_max + b.beta * t)


def gronwall_constants(coeffs, w_sup):
    """(C1, C2) of the error envelope G(t) <= exp(C1 t) C2 t / sqrt(N)."""
    b = coeffs.bounds
    c1 = (2 * b.grad_alpha * w_sup + b.alpha + 2 * b.grad_beta + b.grad_mu
          + 2 * b.grad_sigma * w_sup + b.sigma)
    c2 = 3 * w_sup * b.sigma
    return c1, c2


def gronwall_bound(c1, c2, t, N):
    return math.exp(c1 * t) * c2 * t / math.sqrt(N)


@dataclass
class ReferencePath:
    """Discretized limit trajectory kept in memory to drive shadow processes."""

    init: StepTriplet
    K: int
    grid: TimeGrid
    states: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    role: str
    rng: RngSpec
    weight_sup: float


def build_reference(init, coeffs, grid, K, rng, *, variant=None, role="reference"):
    traj = solve_limit(init, coeffs, grid, K, rng, variant=variant, role=role,
                       record_states=True, snapshots=grid.times()[:: max(1, grid.n_steps // 10)])
    if not traj.bound_holds(10 * grid.dt):
        raise IntegrationError(grid.n_steps, -1, "reference weight bound")
    return ReferencePath(init, K, grid, traj.state_history, traj.probs,
                         np.arange(init.n_labels * K) // K, role, rng,
                         max(float(np.max(np.abs(s.weights))) for s in traj.snapshots))


@dataclass
class PropagationResult:
    N: int
    times: np.ndarray
    G_state: np.ndarray
    G_state_stderr: np.ndarray
    G_weight: np.ndarray
    G_weight_stderr: np.ndarray
    G_state_max_agent: np.ndarray
    C1: float
    C2: float
    bound: np.ndarray
    replicas: int
    reference_entities: int
    weight_bound_ok: bool
    notes: list = field(default_factory=list)

    @property
    def G(self):
        return np.maximum(self.G_state, self.G_weight)

    def rows(self):
        return [
            {"t": float(t), "N": self.N, "G_state": float(gs), "G_state_stderr": float(ss),
             "G_weight": float(gw), "G_weight_stderr": float(sw), "C1": self.C1, "C2": self.C2,
             "gronwall_bound": float(b)}
            for t, gs, ss, gw, sw, b in zip(self.times, self.G_state, self.G_state_stderr,
                                            self.G_weight, self.G_weight_stderr, self.bound)
        ]


G_COLUMNS = ("t", "N", "G_state", "G_state_stderr", "G_weight", "G_weight_stderr",
             "C1", "C2", "gronwall_bound")


def _run_replica(ref, mix, coeffs, variant, particle_variant, rng_r, snap_idx, shared_streams):
    grid = ref.grid
    init = ref.init
    pid, prm = coeffs.code, coeffs.prm
    dt = grid.dt
    labels, ens = sample_mixture(init, mix, rng_r)
    N, d = ens.states.shape
    x = ens.states.copy()
    w = ens.weights.copy()
    xs = x.copy()
    ws = w.copy()
    # shadow-to-reference weights start from the kernel between the labels
    wr = np.ascontiguousarray(init.kernel[np.ix_(labels, ref.labels)])
    streams = labels * ref.K + (np.arange(N) % ref.K) if shared_streams else None
    acc = np.empty((N, d))
    drift = np.empty((N, d))
    p_dummy = np.zeros(N)
    no_noise = np.zeros((1, 1))
    vcode, vpar = variant.code, variant.param
    if vcode == kern.WEIGHT_NOISE:
        vcode = kern.BASE
    err_x, err_w = [], []
    w0 = float(np.max(np.abs(w)))
    bound_ok = True

    def record(k):
        nonlocal bound_ok
        ex = coeffs.domain.distance(x, xs)
        diff = np.abs(w - ws)
        np.fill_diagonal(diff, 0.0)
        err_x.append(ex)
        err_w.append(diff.sum(axis=1) / (N - 1))
        wb = weight_bound(coeffs, particle_variant, w0, k * dt)
        lim_b = weight_bound(coeffs, variant, w0, k * dt)
        if (np.max(np.abs(w)) > wb + 10 * dt or np.max(np.abs(ws)) > lim_b + 10 * dt
                or np.max(np.abs(wr)) > lim_b + 10 * dt):
            bound_ok = False

    if 0 in snap_idx:
        record(0)
    for k in range(grid.n_steps):
        if coeffs.nu == 0.0:
            gauss = None
        elif shared_streams:
            gauss = state_noise(ref.rng, ref.role, k, N, d, streams)
        else:
            gauss = state_noise(rng_r, "state", k, N, d)
        # shadows read the reference state at the start of the step
        fr = kern.features(pid, ref.states[k])
        a2r = kern.alpha2_all(pid, prm, ref.states[k])
        fs = kern.features(pid, xs)
        a1s = kern.alpha1_all(pid, prm, xs)
        a2s = kern.alpha2_all(pid, prm, xs)
        kern.mu_all(pid, prm, xs, drift)
        kern.pair_step(pid, fs, a1s, fr, a2r, wr, ref.probs, False, True, dt, vcode, vpar, no_noise, acc)
        drift += acc
        kern.pair_step(pid, fs, a1s, fs, a2s, ws, p_dummy, False, False, dt, vcode, vpar, no_noise, acc)
        xs = euler_state(xs, drift, dt, coeffs.nu, gauss, coeffs.domain)
        if variant.kind == "decay_limit":
            fn = kern.features(pid, xs)
            ws[...] = kern.beta_matrix(pid, fn, fn)
        if not np.isfinite(xs).all():
            raise IntegrationError(k, int(np.argmax(~np.isfinite(xs).all(axis=1))), "shadow state")
        x, _ = advance(x, w, coeffs, particle_variant, dt, rng_r, k, gauss=gauss)
        if k + 1 in snap_idx:
            record(k + 1)
    return np.array(err_x), np.array(err_w), bound_ok


def coupled_propagation_error(init, mix, coeffs, grid, K_paths, replicas, rng, *,
                              variant=None, particle_variant=None, snapshots=None,
                              reference=None, shared_streams=False):
    """Monte Carlo estimate of the particle-to-limit distance G(t).

    Each replica samples labels from ``mix``, runs the N-particle system
    and its shadow: shadow states use the particle's own noise, with the
    interaction expectation taken against a discretized limit reference
    (M*K entities, solved once and shared by all replicas); shadow weights
    follow the limit weight equation between shadow states.

    For exchangeable (i.i.d.) mixtures the sup over agents of E|X_i - Xbar_i|
    equals the common per-agent value, so the estimate pools agents and
    replicas; the per-agent max of replica means is reported alongside.
    ``shared_streams`` drives agent i with reference stream
    (xi_i, i mod K) instead of its own.
    """
    variant = variant or DynamicsVariant.base()
    particle_variant = particle_variant or variant
    if replicas < 2:
        raise ValidationError("experiment.replicas", "need at least two replicas for error bars")
    N = mix.n_agents
    notes = []
    if reference is None:
        reference = build_reference(init, coeffs, grid, K_paths, rng, variant=variant)
    E = reference.labels.shape[0]
    if E < 4 * N:
        msg = f"reference resolution M*K={E} is below 4N={4 * N}; bias O(1/sqrt(MK)) may dominate"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    notes.append(f"reference bias O(1/sqrt({E})) not removed")
    if snapshots is None:
        snapshots = grid.times()[:: max(1, grid.n_steps // 10)]
    snap_idx = sorted({grid.index_of(t) for t in snapshots} | {grid.n_steps})
    ex_all, ew_all = [], []
    bound_ok = True
    for r in range(replicas):
        ex, ew, ok = _run_replica(reference, mix, coeffs, variant, particle_variant,
                                  rng.child(f"replica-{r}"), snap_idx, shared_streams)
        ex_all.append(ex)
        ew_all.append(ew)
        bound_ok &= ok
    ex_all = np.array(ex_all)  # (R, S, N)
    ew_all = np.array(ew_all)
    rep_x = ex_all.mean(axis=2)
    rep_w = ew_all.mean(axis=2)
    se = lambda a: a.std(axis=0, ddof=1) / math.sqrt(a.shape[0])
    times = np.array(snap_idx) * grid.dt
    w0 = float(np.max(np.abs(init.kernel)))
    c1, c2 = gronwall_constants(coeffs, limit_weight_sup(coeffs, w0, grid.t_end))
    bound = np.array([gronwall_bound(c1, c2, t, N) for t in times])
    return PropagationResult(N, times, rep_x.mean(axis=0), se(rep_x), rep_w.mean(axis=0), se(rep_w),
                             ex_all.mean(axis=0).max(axis=1), c1, c2, bound, replicas, E,
                             bound_ok, notes)


def projected_memory_bytes(N, M, K_paths, replicas_in_flight=1):
    """Working set of one coupled run: reference weights, reference history, per-replica blocks."""
    E = M * K_paths
    per_replica = 8 * (3 * N * N + N * E)
    return 8 * E * E + 8 * E * 1024 + replicas_in_flight * per_replica
