import math

import numpy as np
import pytest

from coevo.core import Domain, RngSpec, TimeGrid, lookup_coefficients
from coevo.errors import ResourceGuardError, ValidationError
from coevo.meanfield import (G_COLUMNS, LimitPath, MixtureSpec, StepTriplet, build_reference,
                             coupled_propagation_error, gronwall_bound, gronwall_constants,
                             initial_limit, make_triplet, picard_apply, picard_iterate,
                             projected_memory_bytes, sample_mixture, solve_limit)
from coevo.particles import DynamicsVariant, ParticleEnsemble, simulate

TORUS = Domain("torus", 1)


def _random_triplet(M, seed=0):
    g = np.random.default_rng(seed)
    return StepTriplet.uniform(g.uniform(0, 2 * math.pi, (M, 1)), g.uniform(0, 1.5, (M, M)))


@pytest.mark.parametrize("nu", [0.0, 0.5])
def test_limit_with_one_path_is_the_particle_system(nu):
    c = lookup_coefficients("kuramoto-adaptive", nu=nu)
    tri = _random_triplet(10)
    grid = TimeGrid(0.5, 1e-2)
    lim = solve_limit(tri, c, grid, 1, RngSpec(3)).final
    ens = ParticleEnsemble(tri.states.copy(), tri.kernel.copy())
    par = simulate(ens, c, DynamicsVariant.base(), grid, RngSpec(3)).final
    assert np.max(np.abs(lim.states - par.states)) <= 1e-12
    assert np.max(np.abs(lim.weights - par.weights)) <= 1e-12


def test_decoupled_entities_match_independent_agents():
    c = lookup_coefficients("linear-decay", nu=0.3)
    tri = _random_triplet(6, seed=1)
    K = 3
    grid = TimeGrid(0.3, 1e-2)
    lim = solve_limit(tri, c, grid, K, RngSpec(5)).final
    labels = np.arange(6 * K) // K
    ens = ParticleEnsemble(tri.states[labels], tri.kernel[np.ix_(labels, labels)])
    par = simulate(ens, c, DynamicsVariant.base(), grid, RngSpec(5)).final
    assert np.array_equal(lim.states, par.states)


def test_constant_kernel_limit_keeps_weight_bound():
    c = lookup_coefficients("kuramoto-adaptive")
    tri = make_triplet(16, TORUS, "ramp", "constant", level=0.7)
    grid = TimeGrid(1.0, 1e-2)
    traj = solve_limit(tri, c, grid, 4, RngSpec(0), snapshots=grid.times()[::10])
    assert len(traj.snapshots) == 11
    assert traj.bound_holds(10 * grid.dt)


def test_limit_entity_layout_and_guards():
    tri = _random_triplet(5)
    lim = initial_limit(tri, 3)
    assert lim.n_entities == 15
    assert np.array_equal(lim.labels, np.arange(15) // 3)
    assert lim.probs.sum() == pytest.approx(1.0)
    with pytest.raises(ResourceGuardError):
        initial_limit(make_triplet(100, TORUS), 100)
    with pytest.raises(ValidationError):
        solve_limit(tri, lookup_coefficients("zero"), TimeGrid(0.1, 0.05), 0, RngSpec(0))


def test_picard_fixed_point_of_time_stepping():
    c = lookup_coefficients("kuramoto-adaptive", nu=0.5)
    tri = _random_triplet(8, seed=2)
    grid = TimeGrid(0.5, 1e-3)
    traj = solve_limit(tri, c, grid, 2, RngSpec(1), record_states=True, record_weights=True)
    cand = LimitPath(traj.state_history, traj.weight_history)
    out = picard_apply(cand, tri, c, grid, 2, RngSpec(1))
    from coevo.meanfield import path_distance
    assert path_distance(out, cand, c.domain) <= 10 * grid.dt


def test_picard_zero_coefficients_returns_initial_data():
    c = lookup_coefficients("zero")
    tri = _random_triplet(4, seed=3)
    grid = TimeGrid(0.2, 1e-2)
    lim = initial_limit(tri, 2)
    cand = LimitPath(np.random.default_rng(0).normal(size=(21, 8, 1)),
                     np.random.default_rng(1).normal(size=(21, 8, 8)))
    out = picard_apply(cand, tri, c, grid, 2, RngSpec(0))
    assert np.array_equal(out.states, np.repeat(lim.states[None], 21, axis=0))
    assert np.array_equal(out.weights, np.repeat(lim.weights[None], 21, axis=0))
    with pytest.raises(ValidationError):
        picard_apply(LimitPath(cand.states[:5], cand.weights[:5]), tri, c, grid, 2, RngSpec(0))


def test_picard_iteration_contracts():
    c = lookup_coefficients("kuramoto-adaptive", nu=0.5)
    tri = _random_triplet(6, seed=4)
    grid = TimeGrid(0.25, 1e-3)
    _, inc = picard_iterate(tri, c, grid, 2, RngSpec(2), 6)
    # t * C1 with w_sup from the initial kernel is about 0.25 * 8 here
    tail = [a / b for a, b in zip(inc[1:], inc[2:]) if b > 1e-13]
    assert tail and all(r >= 2.0 for r in tail), inc


def test_mixture_examples():
    tri = _random_triplet(5, seed=5)
    labels, ens = sample_mixture(tri, MixtureSpec.dirac(5), RngSpec(9))
    assert np.array_equal(labels, np.arange(5))
    assert np.array_equal(ens.states, tri.states) and np.array_equal(ens.weights, tri.kernel)
    labels, _ = sample_mixture(tri, MixtureSpec.stratified(5, tri.masses), RngSpec(10))
    assert sorted(labels.tolist()) == list(range(5))
    const = make_triplet(7, TORUS, "random", "constant", level=0.3, rng=RngSpec(1))
    _, ens = sample_mixture(const, MixtureSpec.iid(20, const.masses), RngSpec(11))
    assert np.all(ens.weights == 0.3)


def test_sampled_ensemble_reads_the_triplet():
    tri = _random_triplet(6, seed=6)
    labels, ens = sample_mixture(tri, MixtureSpec.iid(15, tri.masses), RngSpec(12))
    assert np.array_equal(ens.states, tri.states[labels])
    assert np.array_equal(ens.weights, tri.kernel[np.ix_(labels, labels)])


def test_mixture_validation():
    with pytest.raises(ValidationError):
        MixtureSpec(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0.5, 0.5]))
    with pytest.raises(ValidationError):
        MixtureSpec(np.array([[0.5, 0.6], [0.5, 0.4]]))
    tri = _random_triplet(3)
    with pytest.raises(ValidationError):
        sample_mixture(tri, MixtureSpec.iid(4, np.full(4, 0.25)), RngSpec(0))


def test_stratified_rows_average_to_masses():
    masses = np.array([0.1, 0.25, 0.05, 0.3, 0.3])
    for N in (1, 3, 7, 20):
        mix = MixtureSpec.stratified(N, masses)
        assert np.max(np.abs(mix.rows.mean(axis=0) - masses)) <= 1e-10


def test_iid_draw_frequencies():
    masses = np.array([0.2, 0.5, 0.3])
    mix = MixtureSpec.iid(20000, masses)
    lab = mix.draw(RngSpec(4))
    freq = np.bincount(lab, minlength=3) / lab.size
    assert np.max(np.abs(freq - masses)) <= 4 * math.sqrt(0.25 / lab.size)


def test_disjoint_shadows_are_uncorrelated():
    # zero coefficients: shadows are the sampled initial states, exactly independent across agents
    tri = _random_triplet(12, seed=7)
    mix = MixtureSpec.iid(4, tri.masses)
    R = 400
    pairs = np.array([sample_mixture(tri, mix, RngSpec(1).child(f"replica-{r}"))[1].states[:2, 0]
                      for r in range(R)])
    rho = np.corrcoef(pairs[:, 0], pairs[:, 1])[0, 1]
    assert abs(rho) <= 3 / math.sqrt(R)


def test_gronwall_constants_by_hand():
    c = lookup_coefficients("kuramoto-adaptive")
    # |alpha| = a = 1, |grad alpha| = 0, |grad beta| = 1, mu = 0, |sigma| = |grad sigma| = 1
    C1, C2 = gronwall_constants(c, 2.0)
    assert C1 == pytest.approx(0 + 1 + 2 + 0 + 4 + 1)
    assert C2 == pytest.approx(6.0)
    assert gronwall_constants(lookup_coefficients("zero"), 3.0) == (0.0, 0.0)
    assert gronwall_constants(lookup_coefficients("linear-decay"), 3.0)[1] == 0.0
    assert gronwall_bound(8.0, 6.0, 1.0, 100) == pytest.approx(math.exp(8) * 0.6)


def test_zero_coefficients_give_zero_error():
    c = lookup_coefficients("zero")
    tri = _random_triplet(8, seed=8)
    res = coupled_propagation_error(tri, MixtureSpec.iid(6, tri.masses), c, TimeGrid(0.2, 1e-2),
                                    8, 4, RngSpec(0))
    assert np.all(res.G == 0.0)
    assert res.weight_bound_ok
    assert [r for r in res.rows()][0].keys() == set(G_COLUMNS)


def test_dirac_shared_streams_error_is_discretization_only():
    c = lookup_coefficients("kuramoto-adaptive", nu=0.5)
    M, K = 6, 4
    tri = _random_triplet(M, seed=9)
    grid = TimeGrid(1.0, 1e-2)
    with pytest.warns(RuntimeWarning):
        res = coupled_propagation_error(tri, MixtureSpec.dirac(M, K), c, grid, K, 3, RngSpec(1),
                                        shared_streams=True)
    assert np.max(res.G) <= 10 * grid.dt


def test_small_propagation_run_is_within_envelope():
    c = lookup_coefficients("kuramoto-adaptive", nu=0.5)
    tri = make_triplet(16, TORUS)
    grid = TimeGrid(0.5, 1e-2)
    ref = build_reference(tri, c, grid, 16, RngSpec(2))
    with pytest.warns(RuntimeWarning):
        small = coupled_propagation_error(tri, MixtureSpec.iid(80, tri.masses), c, grid, 16, 4,
                                          RngSpec(3), reference=ref)
    res = coupled_propagation_error(tri, MixtureSpec.iid(20, tri.masses), c, grid, 16, 8,
                                    RngSpec(3), reference=ref)
    assert np.all(res.G <= res.bound + 1e-12)
    assert res.G[-1] > 0 and np.all(res.G_state_stderr >= 0)
    assert small.N == 80


def test_projected_memory_grows_with_reference():
    assert projected_memory_bytes(100, 64, 64) > projected_memory_bytes(100, 16, 16)
    assert projected_memory_bytes(400, 64, 64) >= projected_memory_bytes(50, 64, 64)
