"""Step kernels on finite label spaces: cut norm (exact, heuristic, sampling bound),
weak regularity partitions, kernel sampling and homomorphism densities."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .core import RngSpec
from .errors import ValidationError

EXACT_MAX_LABELS = 24
PM_ONE_MAX = 16


@dataclass
class StepKernel:
    masses: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        n = self.masses.shape[0]
        if self.masses.ndim != 1 or n < 1 or self.values.shape != (n, n):
            raise ValidationError("kernel", "masses must be (n,) and values (n, n)")
        if np.any(self.masses <= 0) or abs(self.masses.sum() - 1.0) > 1e-12:
            raise ValidationError("kernel.masses", "must be positive and sum to 1")
        if not np.isfinite(self.values).all():
            raise ValidationError("kernel.values", "must be finite")

    @classmethod
    def uniform(cls, values):
        values = np.asarray(values, dtype=float)
        return cls(np.full(values.shape[0], 1.0 / values.shape[0]), values)

    @property
    def n(self):
        return self.masses.shape[0]

    def weighted(self):
        """Matrix of m_i m_j k_ij; cut sums are plain block sums of it."""
        return self.masses[:, None] * self.values * self.masses[None, :]

    def __sub__(self, other):
        if not np.array_equal(self.masses, other.masses):
            raise ValidationError("kernel", "difference needs identical label masses")
        return StepKernel(self.masses, self.values - other.values)

    def scaled(self, c):
        return StepKernel(self.masses, c * self.values)


@dataclass(frozen=True)
class CutWitness:
    S: frozenset
    T: frozenset
    value: float

    def recompute(self, kernel):
        return cut_value(kernel, self.S, self.T)


def _mass(masses, idx):
    if masses.max() == masses.min():
        return len(idx) / masses.shape[0]
    return math.fsum(masses[idx])


def cut_value(kernel, S, T):
    S = sorted(S)
    T = sorted(T)
    if not S or not T:
        return 0.0
    block = kernel.values[np.ix_(S, T)]
    if block.max() == block.min():
        # factored form keeps constant kernels exact: |c| * m(S) * m(T)
        return abs(float(block[0, 0]) * _mass(kernel.masses, S) * _mass(kernel.masses, T))
    return abs(float(kernel.weighted()[np.ix_(S, T)].sum()))


# ------------------------------------------------------------------ exact

@njit(cache=True)
def _gray_chunk(B, top, low_bits):
    """Scan all row subsets whose high bits equal ``top`` in Gray-code order.

    Returns (best value, best encoding, sign) with ties going to the
    smaller encoding and then to the positive sign.
    """
    n = B.shape[0]
    c = np.zeros(n)
    for i in range(low_bits, n):
        if (top >> (i - low_bits)) & 1:
            for j in range(n):
                c[j] += B[i, j]
    best = -1.0
    best_code = 0
    best_sign = 1
    state = 0
    total = 1 << low_bits
    for g in range(total):
        if g > 0:
            # bit flipped between consecutive Gray codes
            flip = 0
            x = g
            while (x & 1) == 0:
                x >>= 1
                flip += 1
            state ^= 1 << flip
            if (state >> flip) & 1:
                for j in range(n):
                    c[j] += B[flip, j]
            else:
                for j in range(n):
                    c[j] -= B[flip, j]
        pos = 0.0
        neg = 0.0
        for j in range(n):
            if c[j] > 0:
                pos += c[j]
            else:
                neg -= c[j]
        code = (top << low_bits) | state
        if pos > best or (pos == best and code < best_code):
            best = pos
            best_code = code
            best_sign = 1
        if neg > best or (neg == best and code < best_code):
            best = neg
            best_code = code
            best_sign = -1
    return best, best_code, best_sign


@njit(parallel=True, cache=True)
def _exact_scan(B, top_bits):
    n = B.shape[0]
    low = n - top_bits
    chunks = 1 << top_bits
    vals = np.empty(chunks)
    codes = np.empty(chunks, dtype=np.int64)
    signs = np.empty(chunks, dtype=np.int64)
    for t in prange(chunks):
        v, c, s = _gray_chunk(B, t, low)
        vals[t] = v
        codes[t] = c
        signs[t] = s
    return vals, codes, signs


def _columns_for(B, S_mask, sign):
    c = B[S_mask].sum(axis=0)
    return frozenset(np.flatnonzero(sign * c > 0).tolist())


def cut_norm_exact(kernel):
    """Exact cut norm by enumerating row subsets with optimal column completion.

    For a fixed row set S the best column set for each sign is read off the
    S-restricted column sums, so 2^n subsets suffice. Ties go to the
    smallest row-subset encoding (bit i is label i).
    """
    n = kernel.n
    if n > EXACT_MAX_LABELS:
        raise ValidationError("kernel", f"n={n} exceeds {EXACT_MAX_LABELS} labels for the exact cut norm; "
                                        "use heuristic or sampling bound")
    B = np.ascontiguousarray(kernel.weighted())
    top_bits = max(0, min(n - 10, 8))
    vals, codes, signs = _exact_scan(B, top_bits)
    best = int(np.argmax(vals))
    # argmax picks the first maximum; chunks are ordered by encoding
    top = vals[best]
    tied = np.flatnonzero(vals == top)
    best = int(tied[np.argmin(codes[tied])])
    code, sign = int(codes[best]), int(signs[best])
    S_mask = np.array([(code >> i) & 1 for i in range(n)], dtype=bool)
    T = _columns_for(B, S_mask, sign)
    S = frozenset(np.flatnonzero(S_mask).tolist())
    if not T:
        S = frozenset()
    value = cut_value(kernel, S, T)
    return value, CutWitness(S, T, value)


# ------------------------------------------------------------------ heuristic

def cut_norm_heuristic(kernel, restarts=32, rng=None, max_iter=100):
    """Lower bound on the cut norm by alternating best responses.

    Each restart draws a random column set and alternates S given T and
    T given S for both signs until stable; a label whose marginal
    contribution is exactly zero is included.
    """
    if restarts < 1:
        raise ValidationError("restarts", "must be >= 1")
    rng = rng or RngSpec(0)
    B = kernel.weighted()
    n = kernel.n
    starts = rng.uniforms("cut-heuristic", n, (restarts, n)) < 0.5
    best_val, best_S, best_T = -1.0, None, None
    for sign in (1.0, -1.0):
        T = starts.astype(float)
        S = np.zeros_like(T)
        for _ in range(max_iter):
            S_new = (sign * (T @ B.T) >= 0).astype(float)
            T_new = (sign * (S_new @ B) >= 0).astype(float)
            done = np.array_equal(S_new, S) and np.array_equal(T_new, T)
            S, T = S_new, T_new
            if done:
                break
        vals = np.abs(np.einsum("ri,ij,rj->r", S, B, T))
        for r in range(restarts):
            if vals[r] > best_val:
                best_val, best_S, best_T = vals[r], S[r], T[r]
    S = frozenset(np.flatnonzero(best_S).tolist())
    T = frozenset(np.flatnonzero(best_T).tolist())
    value = cut_value(kernel, S, T)
    return value, CutWitness(S, T, value)


# ------------------------------------------------------------------ infinity-to-one

@njit(cache=True)
def _pm_one_scan(A):
    # A is (p, q) with p the enumerated side; the sign of row 0 is fixed to +1
    p, q = A.shape
    c = np.zeros(q)
    for i in range(p):
        for j in range(q):
            c[j] -= A[i, j]
    best = 0.0
    for j in range(q):
        best += abs(c[j] + 2 * A[0, j])
    best_state = 0
    state = 0
    for g in range(1, 1 << (p - 1)):
        flip = 0
        x = g
        while (x & 1) == 0:
            x >>= 1
            flip += 1
        state ^= 1 << flip
        row = flip + 1
        # bit set means row sign +1
        if (state >> flip) & 1:
            for j in range(q):
                c[j] += 2 * A[row, j]
        else:
            for j in range(q):
                c[j] -= 2 * A[row, j]
        tot = 0.0
        for j in range(q):
            tot += abs(c[j] + 2 * A[0, j])
        if tot > best:
            best = tot
            best_state = state
    return best, best_state


def pm_one_maximizer(A):
    """(value, phi, psi) maximizing phi^T A psi over sign vectors (exact)."""
    A = np.asarray(A, dtype=float)
    flip = A.shape[0] > A.shape[1]
    M = A.T if flip else A
    if M.shape[0] > PM_ONE_MAX:
        raise ValidationError("kernel", f"exact sign enumeration limited to {PM_ONE_MAX} on the smaller side")
    if M.shape[0] == 0:
        return 0.0, np.ones(A.shape[0]), np.ones(A.shape[1])
    _, state = _pm_one_scan(np.ascontiguousarray(M))
    phi = np.array([1.0] + [1.0 if (state >> i) & 1 else -1.0 for i in range(M.shape[0] - 1)])
    psi = np.where(phi @ M >= 0, 1.0, -1.0)
    value = float(phi @ M @ psi)
    return (value, psi, phi) if flip else (value, phi, psi)


def pm_one_norm(A):
    """max over sign vectors phi, psi of phi^T A psi (exact, smaller side enumerated)."""
    return pm_one_maximizer(A)[0]


def pm_one_maximizer_heuristic(A, restarts=32, rng=None, max_iter=200):
    """Lower bound (value, phi, psi) on max phi^T A psi by alternating sign updates."""
    A = np.asarray(A, dtype=float)
    rng = rng or RngSpec(0)
    psi = np.where(rng.uniforms("pm-one", A.shape[1], (restarts, A.shape[1])) < 0.5, -1.0, 1.0)
    phi = np.zeros((restarts, A.shape[0]))
    for _ in range(max_iter):
        phi_new = np.where(psi @ A.T >= 0, 1.0, -1.0)
        psi_new = np.where(phi_new @ A >= 0, 1.0, -1.0)
        done = np.array_equal(phi_new, phi) and np.array_equal(psi_new, psi)
        phi, psi = phi_new, psi_new
        if done:
            break
    vals = np.einsum("ri,ij,rj->r", phi, A, psi)
    r = int(np.argmax(vals))
    return float(vals[r]), phi[r], psi[r]


def infinity_to_one_norm(kernel):
    """Norm of the kernel operator from L-infinity to L1 (exact for n <= 16)."""
    return pm_one_norm(kernel.weighted())


# ------------------------------------------------------------------ sampling bound

@dataclass(frozen=True)
class SamplingBound:
    value: float
    mean: float
    stderr: float
    slack: float
    q: int
    trials: int


def _one_sided_sample(B, Q1, Q2):
    """max over R2 in Q2 (columns), R1 in Q1 (rows) of B(R2+, R1+)."""
    q2 = len(Q2)
    q1 = len(Q1)
    sub2 = ((np.arange(1 << q2)[:, None] >> np.arange(q2)) & 1).astype(float)
    sub1 = ((np.arange(1 << q1)[:, None] >> np.arange(q1)) & 1).astype(float)
    rows_plus = (sub2 @ B[:, Q2].T > 0).astype(float)  # rows with positive mass on R2
    cols_plus = (sub1 @ B[Q1, :] > 0).astype(float)    # columns with positive mass on R1
    return float(np.max(rows_plus @ B @ cols_plus.T))


def cut_norm_sampling_bound(kernel, q, trials, rng, max_q=12):
    """Monte Carlo upper estimate of the cut norm from random q-subsets.

    Uses ||B||+ <= n^-2 E[max_{R_i in Q_i} B(R2+, R1+)] + 2||B||_inf / sqrt(q)
    for B_ij = n^2 m_i m_j k_ij, applied to B and -B. The reported value is
    the trial mean plus two standard errors plus the slack.
    """
    n = kernel.n
    if not 1 <= q <= n:
        raise ValidationError("q", f"need 1 <= q <= n={n}")
    if q > max_q:
        raise ValidationError("q", f"q={q} exceeds the enumeration limit {max_q}")
    B = n * n * kernel.weighted()
    binf = float(np.max(np.abs(B)))
    gen = rng.generator("cut-sampling", q)
    samples = []
    for _ in range(trials):
        Q1 = np.sort(gen.choice(n, q, replace=False))
        Q2 = np.sort(gen.choice(n, q, replace=False))
        samples.append(max(_one_sided_sample(B, Q1, Q2), _one_sided_sample(-B, Q1, Q2)) / n ** 2)
    samples = np.array(samples)
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    slack = 2 * binf / math.sqrt(q)
    return SamplingBound(mean + 2 * se + slack, mean, se, slack, q, trials)


# ------------------------------------------------------------------ weak regularity

@dataclass
class Partition:
    assignment: np.ndarray
    class_masses: np.ndarray
    n_labels: int

    @property
    def m(self):
        return self.class_masses.shape[0]

    @property
    def is_equipartition(self):
        return bool(self.class_masses.max() - self.class_masses.min() <= 1.0 / self.n_labels + 1e-12)

    def classes(self):
        return [np.flatnonzero(self.assignment == c) for c in range(self.m)]


def project(kernel, assignment, m):
    """Step projection: each block replaced by its mass-weighted average."""
    P = np.zeros((kernel.n, m))
    P[np.arange(kernel.n), assignment] = 1.0
    cm = P.T @ kernel.masses
    block = (P.T @ kernel.weighted() @ P) / np.outer(cm, cm)
    # blocks that are already constant keep their value exactly
    members = [np.flatnonzero(assignment == c) for c in range(m)]
    for a, ia in enumerate(members):
        for b, ib in enumerate(members):
            sub = kernel.values[np.ix_(ia, ib)]
            if sub.size and sub.max() == sub.min():
                block[a, b] = sub[0, 0]
    return StepKernel(kernel.masses, block[np.ix_(assignment, assignment)]), cm


def _chop(order, masses, m):
    """Cut a label ordering into m consecutive groups of near-equal mass."""
    cum = np.cumsum(masses[order])
    mid = (cum - masses[order] / 2) / cum[-1]
    cls = np.minimum((mid * m).astype(int), m - 1)
    if len(np.unique(cls)) < m:
        # very uneven masses: fall back to equal label counts
        cls = np.concatenate([np.full(len(p), c) for c, p in enumerate(np.array_split(order, m))])
    assign = np.empty(len(order), dtype=np.int64)
    assign[order] = cls
    return assign


def weak_regularity_partition(kernel, m, steps=None, restarts=32, rng=None):
    """Greedy cut-norm regularization into an m-class (near) equipartition.

    Repeatedly refine by the heuristic cut witness of the residual k - k_P;
    after each refinement the labels are ordered by refined atom and cut
    into m consecutive groups of equal mass. The candidate with the
    smallest heuristic residual is returned as (Partition, projection, error).
    """
    n = kernel.n
    if not 1 <= m <= n:
        raise ValidationError("m", f"need 1 <= m <= n={n}")
    rng = rng or RngSpec(0)
    steps = steps if steps is not None else max(1, 2 * int(math.ceil(math.log2(m + 1))))
    atoms = np.zeros(n, dtype=np.int64)
    best = None
    for s in range(steps + 1):
        order = np.lexsort((np.arange(n), atoms))
        assign = _chop(order, kernel.masses, m)
        proj, cm = project(kernel, assign, m)
        err, _ = cut_norm_heuristic(kernel - proj, restarts, rng.child(f"wr-{s}"))
        if best is None or err < best[2] - 1e-15:
            best = (Partition(assign, cm, n), proj, err)
        if err == 0.0:
            break
        # refine atoms by the witness of the residual against the atom projection
        n_atoms = int(atoms.max()) + 1
        atom_proj, _ = project(kernel, atoms, n_atoms)
        _, wit = cut_norm_heuristic(kernel - atom_proj, restarts, rng.child(f"wr-atoms-{s}"))
        s_mask = np.zeros(n, dtype=np.int64)
        s_mask[list(wit.S)] = 1
        t_mask = np.zeros(n, dtype=np.int64)
        t_mask[list(wit.T)] = 1
        key = atoms * 4 + 2 * s_mask + t_mask
        _, atoms = np.unique(key, return_inverse=True)
    return best


# ------------------------------------------------------------------ sampling

def sample_kernel(kernel, mix, rng, role="kernel-sample"):
    """w_[xi]: labels xi_i drawn from mixture row i, values k[xi_i, xi_j], masses 1/N."""
    if mix.rows.shape[1] != kernel.n:
        raise ValidationError("mixture", "rows must range over the kernel labels")
    if np.max(np.abs(mix.masses - kernel.masses)) > 1e-10:
        raise ValidationError("mixture", "averaging condition fails for the kernel masses")
    labels = mix.draw(rng, role)
    return StepKernel.uniform(kernel.values[np.ix_(labels, labels)]), labels


# ------------------------------------------------------------------ homomorphism density

_LETTERS = "abcdefgh"


def hom_density(edges, kernel, n_vertices=None):
    """t(F, k) = sum over label maps of prod_{(u, v) in E(F)} k[xi_u, xi_v] prod_u m[xi_u]."""
    edges = [tuple(int(v) for v in e) for e in edges]
    if n_vertices is None:
        n_vertices = 1 + max((max(e) for e in edges), default=-1)
    if n_vertices > len(_LETTERS):
        raise ValidationError("graph", f"at most {len(_LETTERS)} vertices supported")
    if len(set(edges)) != len(edges) or any(u == v for u, v in edges):
        raise ValidationError("graph", "F must be a simple oriented graph (no loops or repeated arcs)")
    if any(not (0 <= u < n_vertices and 0 <= v < n_vertices) for u, v in edges):
        raise ValidationError("graph", "edge endpoint out of range")
    if n_vertices == 0:
        return 1.0
    terms = [f"{_LETTERS[u]}{_LETTERS[v]}" for u, v in edges] + list(_LETTERS[:n_vertices])
    operands = [kernel.values] * len(edges) + [kernel.masses] * n_vertices
    return float(np.einsum(",".join(terms) + "->", *operands, optimize="greedy"))


# ------------------------------------------------------------------ IO

def write_kernel(path, kernel):
    """CSV: first row masses, then n rows of values."""
    with open(path, "w") as fh:
        fh.write(",".join(repr(float(v)) for v in kernel.masses) + "\n")
        for row in kernel.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_kernel(path):
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise ValidationError("kernel", f"cannot read {path}: {exc}") from None
    if data.shape[0] != data.shape[1] + 1:
        raise ValidationError("kernel", f"{path}: expected a masses row followed by n value rows")
    return StepKernel(data[0], data[1:])
