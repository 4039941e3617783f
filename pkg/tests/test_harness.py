import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from coevo.core import DEFAULT_CONFIG, _merge
from coevo.errors import ResourceGuardError, ValidationError
from coevo.harness import ExperimentSpec, ResultBundle, Table, emit_outputs, fit_rate, run_experiment
from coevo.harness.fitting import DEGENERATE_ZERO, refit
from coevo.harness.output import plot_spec, render_csv


def spec_for(overrides, out_dir=None):
    return ExperimentSpec.from_config(_merge(DEFAULT_CONFIG, overrides), out_dir)


SMALL_PROP = {
    "coefficients": {"preset": "kuramoto-adaptive", "nu": 0.5},
    "time": {"t_end": 0.2, "dt": 0.01},
    "system": {"labels": 8, "paths": 8},
    "experiment": {"kind": "propagation_rate", "sweep": [4, 8, 16], "replicas": 8},
}


# ------------------------------------------------------------------ fitting

def test_fit_exact_power_laws():
    N = [50, 100, 200, 400]
    f = fit_rate([(n, n ** -0.5, 0.01 * n ** -0.5) for n in N])
    assert abs(f.slope + 0.5) <= 1e-12 and f.r2 == pytest.approx(1.0)
    f = fit_rate([(n, 3 * n ** -0.25, 0.0) for n in N])
    assert f.slope == pytest.approx(-0.25, abs=1e-12)
    assert f.intercept == pytest.approx(math.log(3), abs=1e-12)


def test_fit_noisy_calibration():
    N = np.array([10, 30, 100, 300, 1000])
    hits = 0
    for s in range(100):
        g = np.random.default_rng(s)
        e = N ** -0.5 * (1 + 0.2 * g.standard_normal(5))
        hits += abs(fit_rate(list(zip(N, e, 0.2 * e))).slope + 0.5) <= 0.15
    assert hits >= 90


def test_fit_degenerate_and_invalid():
    f = fit_rate([(10, 0.0, 0.0), (20, 0.0, 0.0), (40, 0.0, 0.0)])
    assert f.degenerate and f.reason == DEGENERATE_ZERO and math.isnan(f.slope)
    assert f.as_dict()["slope"] is None
    with pytest.raises(ValidationError):
        fit_rate([(10, 1.0, 0.1), (20, 0.5, 0.1)])
    with pytest.raises(ValidationError):
        fit_rate([(10, 1.0, 0.1), (10, 0.5, 0.1), (10, 0.2, 0.1)])


def test_refit_reproduces_fit():
    pts = [(16, 0.4, 0.02), (64, 0.2, 0.01), (256, 0.09, 0.01)]
    f = fit_rate(pts)
    slope, intercept, r2, _ = refit(f)
    assert slope == pytest.approx(f.slope, abs=1e-14)
    assert intercept == pytest.approx(f.intercept, abs=1e-14)
    assert r2 == pytest.approx(f.r2, abs=1e-14)


# ------------------------------------------------------------------ output

def test_empty_bundle_writes_metadata_only(tmp_path):
    paths = emit_outputs(ResultBundle("propagation_rate", 0, "abc"), tmp_path)
    assert sorted(os.listdir(tmp_path)) == ["metadata.json"]
    assert [os.path.basename(p) for p in paths] == ["metadata.json"]


def test_csv_rows_carry_seed_and_hash():
    t = Table("demo", ["N", "value", "ok"])
    t.add(N=4, value=0.1, ok=True)
    text = render_csv(t, 7, "h1")
    assert text.splitlines() == ["N,value,ok,seed,config_hash", "4,0.1,true,7,h1"]


def test_plot_spec_schema():
    spec = plot_spec("p", "title", "summary.csv", "N", "G")["spec"]
    assert spec["schema"] == "coevo-plot/1" and spec["data"] == "summary.csv"
    assert spec["series"][0]["label"] == "G"


def test_propagation_bundle_layout_and_determinism(tmp_path):
    spec = spec_for(SMALL_PROP)
    b1 = run_experiment(spec)
    emit_outputs(b1, tmp_path / "a")
    emit_outputs(run_experiment(spec), tmp_path / "b")
    files = sorted(os.listdir(tmp_path / "a"))
    csvs = [f for f in files if f.endswith(".csv")]
    assert csvs == ["propagation_N16.csv", "propagation_N4.csv", "propagation_N8.csv", "summary.csv"]
    assert len([f for f in files if f.startswith("plot_")]) == 1
    for f in csvs + [p for p in files if p.startswith("plot_")]:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    meta = json.loads((tmp_path / "a" / "metadata.json").read_text())
    assert "created" in meta and "fits" in meta
    summary = b1.table("summary")
    assert all(r["within_bound"] for r in summary.rows)


def test_zero_coefficients_propagation_is_degenerate():
    spec = spec_for({**SMALL_PROP, "coefficients": {"preset": "zero"}})
    b = run_experiment(spec)
    assert all(r["G_state"] == 0.0 and r["G_weight"] == 0.0 for r in b.table("summary").rows)
    assert all(f["reason"] == DEGENERATE_ZERO for f in b.fits.values())


def test_sampling_rate_constant_kernel():
    spec = spec_for({"system": {"labels": 3, "kernel": "constant"},
                     "experiment": {"kind": "sampling_rate", "sweep": [4, 8, 16], "replicas": 8}})
    b = run_experiment(spec)
    assert all(r["cut_deviation"] == 0.0 for r in b.table("cells").rows)


def test_toy_model_small():
    spec = spec_for({"coefficients": {"preset": "kuramoto-adaptive", "nu": 0.0},
                     "time": {"t_end": 0.5, "dt": 0.01},
                     "experiment": {"kind": "toy_model", "sweep": [12], "replicas": 8}})
    b = run_experiment(spec)
    row = b.table("summary").rows[0]
    assert max(r["max_state_diff"] for r in b.table("toy_N12").rows) <= 1e-10
    assert row["gamma_periodic_initial"] <= 1e-12
    assert b.table("reduced").rows[0]["delta_exact"] == pytest.approx(2 / 9, abs=1e-12)


def test_memory_guard_names_N():
    spec = spec_for({**SMALL_PROP, "experiment": {**SMALL_PROP["experiment"], "memory_cap_gb": 1e-7}})
    with pytest.raises(ResourceGuardError, match="N=4"):
        run_experiment(spec)


def test_spec_validation():
    with pytest.raises(ValidationError):
        ExperimentSpec("propagation_rate", [10, 10], 8, DEFAULT_CONFIG)
    with pytest.raises(ValidationError):
        ExperimentSpec("propagation_rate", [10], 4, DEFAULT_CONFIG)
    with pytest.raises(ValidationError):
        ExperimentSpec("nonsense", [10], 8, DEFAULT_CONFIG)


# ------------------------------------------------------------------ CLI

def run_cli(args, cwd, threads=1):
    env = dict(os.environ, NUMBA_NUM_THREADS=str(threads))
    return subprocess.run([sys.executable, "-m", "coevo", "--threads", str(threads), *args],
                          cwd=cwd, env=env,
                          capture_output=True, text=True, timeout=600)


def write(path, text):
    path.write_text(text)
    return str(path)


def test_cli_exit_codes(tmp_path):
    ok = write(tmp_path / "ok.toml", '[time]\nt_end = 0.05\ndt = 0.01\n[system]\nN = 6\nlabels = 6\n')
    r = run_cli(["--config", ok, "--out", "o", "simulate"], tmp_path)
    assert r.returncode == 0, r.stderr
    assert {"trajectory.csv", "final.csv", "metadata.json"} <= set(os.listdir(tmp_path / "o"))
    bad = write(tmp_path / "bad.toml", "[time]\ndt = 0.0\n")
    r = run_cli(["--config", bad, "simulate"], tmp_path)
    assert r.returncode == 2 and "time.dt" in r.stderr
    guard = write(tmp_path / "guard.toml", '[experiment]\nmemory_cap_gb = 1e-9\nsweep = [50]\nreplicas = 8\n'
                  '[system]\nlabels = 4\npaths = 4\n[time]\nt_end = 0.01\ndt = 0.01\n')
    r = run_cli(["--config", guard, "experiment"], tmp_path)
    assert r.returncode == 3 and "N=50" in r.stderr
    # noise large enough to overflow a double in one step
    blow = write(tmp_path / "blow.toml", '[domain]\nkind = "euclidean"\n[coefficients]\npreset = "linear-decay"\n'
                 'nu = 1e308\n[system]\nN = 3\nlabels = 3\n[time]\nt_end = 1.0\ndt = 0.5\n')
    r = run_cli(["--config", blow, "simulate"], tmp_path)
    assert r.returncode == 4 and "non-finite" in r.stderr


def test_cli_metric_sample_and_fit(tmp_path):
    cfg = write(tmp_path / "c.toml", '[time]\nt_end = 0.05\ndt = 0.01\n[system]\nN = 6\nlabels = 6\n')
    assert run_cli(["--config", cfg, "--out", "s", "sample"], tmp_path).returncode == 0
    assert run_cli(["--config", cfg, "--out", "o", "simulate"], tmp_path).returncode == 0
    r = run_cli(["--out", "m", "metric", "delta", "o/initial.csv", "o/final.csv", "--exact"], tmp_path)
    assert r.returncode == 0, r.stderr
    res = json.loads(r.stdout)
    assert res["value"] >= 0 and res["certified"]
    rows = (tmp_path / "m" / "metric.csv").read_text().splitlines()
    assert rows[0] == "pair_id,metric,value,certified,state_part,cut_part,restarts,seed"
    assert rows[1].startswith("initial.csv:final.csv,delta,") and ",true," in rows[1]
    r = run_cli(["--out", "g", "metric", "gamma", "o/initial.csv", "o/final.csv", "--restarts", "2"], tmp_path)
    assert r.returncode == 0, r.stderr
    assert ",gamma," in (tmp_path / "g" / "metric.csv").read_text()
    (tmp_path / "t.csv").write_text("N,mean,stderr\n10,0.3,0.01\n40,0.15,0.01\n160,0.075,0.01\n")
    r = run_cli(["--out", "f", "fit", "t.csv"], tmp_path)
    assert r.returncode == 0, r.stderr
    assert json.loads((tmp_path / "f" / "fit.json").read_text())["slope"] == pytest.approx(-0.5, abs=1e-9)


def test_cli_outputs_independent_of_threads(tmp_path):
    cfg = write(tmp_path / "c.toml", '[time]\nt_end = 0.1\ndt = 0.01\n[system]\nN = 24\nlabels = 24\n'
                '[coefficients]\nnu = 0.3\n')
    outputs = []
    for threads in (1, 2, 8):
        r = run_cli(["--config", cfg, "--out", f"t{threads}", "simulate"], tmp_path, threads)
        assert r.returncode == 0, r.stderr
        outputs.append({f: (tmp_path / f"t{threads}" / f).read_bytes()
                        for f in ("trajectory.csv", "final.csv")})
    assert outputs[0] == outputs[1] == outputs[2]
