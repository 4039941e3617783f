import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coevo.core import (DEFAULT_CONFIG, Domain, RngSpec, TimeGrid, available_presets,
                        check_mixture_rows, config_hash, load_config, lookup_coefficients,
                        validate_config)
from coevo.errors import RegistryError, ValidationError

GRID = 10_000


def _grid_points(domain, n=GRID, seed=0):
    g = np.random.default_rng(seed)
    if domain.is_torus:
        return g.uniform(0, 2 * math.pi, (n, domain.dim))
    return g.uniform(-15, 15, (n, domain.dim))


# ---------------------------------------------------------------- domain

@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
def test_torus_reduction_idempotent(xs):
    d = Domain("torus", 1)
    x = np.array(xs)[:, None]
    once = d.reduce(x)
    assert np.array_equal(d.reduce(once), once)
    assert np.all((once >= 0) & (once < 2 * math.pi))


def test_euclidean_reduce_is_identity():
    d = Domain("euclidean", 2)
    x = np.array([[1e3, -7.0]])
    assert np.array_equal(d.reduce(x), x)


def test_torus_distance_uses_shortest_arc():
    d = Domain("torus", 1)
    assert d.distance(np.array([0.1]), np.array([2 * math.pi - 0.1])) == pytest.approx(0.2)


@pytest.mark.parametrize("kind,dim", [("sphere", 1), ("torus", 0), ("torus", 1.5)])
def test_domain_rejects_bad_fields(kind, dim):
    with pytest.raises(ValidationError):
        Domain(kind, dim)


# ---------------------------------------------------------------- registry

def test_zero_preset_is_null():
    c = lookup_coefficients("zero")
    x = _grid_points(c.domain, 100)
    assert c.nu == 0.0
    assert np.all(c.mu(x) == 0) and np.all(c.sigma(x, x[::-1]) == 0)
    assert np.all(c.beta(x, x) == 0) and np.all(c.alpha(x, x) == 0)
    assert all(v in (0.0, None) for v in c.bounds.as_dict().values())


def test_linear_decay_is_clipped_minus_x():
    c = lookup_coefficients("linear-decay", dim=2)
    assert np.allclose(c.mu(np.array([[1.0, -2.0]])), [[-1.0, 2.0]])
    far = c.mu(np.array([[30.0, 40.0]]))
    assert np.linalg.norm(far) == pytest.approx(10.0)
    assert c.bounds.clip_radius == 10.0
    x = _grid_points(c.domain, 50)
    assert np.all(c.sigma(x, x) == 0) and np.all(c.beta(x, x) == 0)


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_kuramoto_sigma_bounds_match_analytic_sup(dim):
    c = lookup_coefficients("kuramoto-adaptive", dim=dim)
    assert c.bounds.sigma == pytest.approx(math.sqrt(dim))
    assert c.bounds.grad_sigma == 1.0
    # sin(y - x) componentwise attains |.| = 1 in each coordinate
    x = np.zeros((1, dim))
    y = np.full((1, dim), math.pi / 2)
    assert np.linalg.norm(c.sigma(x, y)) == pytest.approx(math.sqrt(dim))


def test_kuramoto_alpha_is_separable_constant():
    c = lookup_coefficients("kuramoto-adaptive", a=0.49)
    x = _grid_points(c.domain, 20)
    assert np.allclose(c.alpha(x, x[::-1]), -0.49)
    assert np.allclose(c.alpha1(x) * c.alpha2(x), c.alpha(x, x))


def _finite_difference_lipschitz(f, pts, domain, h=1e-5):
    worst = 0.0
    for j in range(domain.dim):
        e = np.zeros(domain.dim)
        e[j] = h
        worst = max(worst, float(np.max(np.abs(f(pts + e) - f(pts - e)) / (2 * h))))
    return worst


@pytest.mark.parametrize("name", available_presets())
def test_declared_bounds_dominate_sampled_sups(name):
    c = lookup_coefficients(name, dim=2)
    b = c.bounds
    x = _grid_points(c.domain)
    y = _grid_points(c.domain, seed=1)
    tol = 1e-9
    assert np.max(np.linalg.norm(c.mu(x), axis=1)) <= b.mu + tol
    assert np.max(np.linalg.norm(c.sigma(x, y), axis=1)) <= b.sigma + tol
    assert np.max(np.abs(c.alpha(x, y))) <= b.alpha + tol
    assert np.max(np.abs(c.alpha1(x))) <= b.alpha1 + tol
    assert np.max(np.abs(c.alpha2(x))) <= b.alpha2 + tol
    assert np.max(np.abs(c.beta(x, y))) <= b.beta + tol
    # gradients from central differences (per coordinate)
    pts = x[:2000]
    slack = 1e-4
    assert _finite_difference_lipschitz(lambda p: c.alpha1(p), pts, c.domain) <= b.grad_alpha + slack
    assert _finite_difference_lipschitz(lambda p: c.beta(p, y[:2000]), pts, c.domain) <= b.grad_beta + slack
    for j in range(2):
        f = lambda p, j=j: c.sigma(p, y[:2000])[:, j]
        assert _finite_difference_lipschitz(f, pts, c.domain) <= b.grad_sigma + slack
        g = lambda p, j=j: c.mu(p)[:, j]
        assert _finite_difference_lipschitz(g, pts, c.domain) <= b.grad_mu + slack


def test_unknown_preset_lists_available():
    with pytest.raises(RegistryError) as exc:
        lookup_coefficients("lorenz")
    for name in available_presets():
        assert name in str(exc.value)


def test_negative_nu_rejected():
    with pytest.raises(ValidationError):
        lookup_coefficients("kuramoto-adaptive", nu=-0.1)


# ---------------------------------------------------------------- rng and grid

def test_rng_is_keyed_by_seed_role_step():
    r = RngSpec(7)
    a = r.normals("state", 3, (5, 2))
    assert np.array_equal(a, RngSpec(7).normals("state", 3, (5, 2)))
    assert not np.array_equal(a, r.normals("state", 4, (5, 2)))
    assert not np.array_equal(a, r.normals("weight", 3, (5, 2)))
    assert not np.array_equal(a, RngSpec(8).normals("state", 3, (5, 2)))


def test_rng_entity_rows_do_not_depend_on_population():
    r = RngSpec(3)
    small = r.normals("state", 0, (4, 2))
    big = r.normals("state", 0, (100, 2))
    assert np.array_equal(small, big[:4])


def test_rng_children_differ_and_repeat():
    r = RngSpec(0)
    assert r.child("a") == RngSpec(0).child("a")
    assert r.child("a").seed != r.child("b").seed


def test_time_grid():
    g = TimeGrid(1.0, 1e-3)
    assert g.n_steps == 1000
    assert abs(g.n_steps * g.dt - g.t_end) <= 1e-12
    assert g.index_of(0.5) == 500
    with pytest.raises(ValidationError):
        g.index_of(0.0005)
    with pytest.raises(ValidationError):
        TimeGrid(1.0, 0.3)


# ---------------------------------------------------------------- configuration

def test_dt_zero_rejected():
    with pytest.raises(ValidationError, match="dt must be positive"):
        validate_config({"time": {"dt": 0.0}})


def test_stratified_rows_accepted():
    M = 5
    rows = np.eye(M).tolist()
    cfg = validate_config({"system": {"N": M, "labels": M, "mixture": rows}})
    assert cfg["system"]["N"] == M


def test_averaging_condition_violation_rejected():
    rows = [[0.3, 0.7]] * 4
    with pytest.raises(ValidationError, match="averaging condition"):
        check_mixture_rows(rows, [0.5, 0.5])
    with pytest.raises(ValidationError):
        validate_config({"system": {"N": 4, "labels": 2, "mixture": rows}})


@pytest.mark.parametrize("patch,field", [
    ({"system": {"N": 1}}, "system.N"),
    ({"system": {"variant": "chaotic"}}, "system.variant"),
    ({"rng": {"seed": -1}}, "rng.seed"),
    ({"time": {"t_end": float("inf")}}, "time.t_end"),
    ({"experiment": {"sweep": [10, 10]}}, "experiment.sweep"),
    ({"coefficients": {"preset": "kuramoto-adaptive"}, "domain": {"kind": "euclidean"}}, "domain.kind"),
])
def test_validation_names_field(patch, field):
    with pytest.raises(ValidationError) as exc:
        validate_config(patch)
    assert exc.value.field == field


def test_load_config_roundtrip(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[system]\nN = 12\n[rng]\nseed = 5\n')
    cfg = load_config(p)
    assert cfg["system"]["N"] == 12 and cfg["rng"]["seed"] == 5
    assert cfg["domain"] == DEFAULT_CONFIG["domain"]
    assert config_hash(cfg) == config_hash(validate_config({"system": {"N": 12}, "rng": {"seed": 5}}))


def test_load_config_bad_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[system\nN = ")
    with pytest.raises(ValidationError):
        load_config(p)
