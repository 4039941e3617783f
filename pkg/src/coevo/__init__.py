"""Co-evolving multi-agent systems: particle simulator, discretized mean-field limit,
step-kernel graphon tools, triplet distances and an experiment harness.

Submodules are imported on first attribute access so that the command line
can configure the numba thread pool before numba loads.
"""

import importlib

_EXPORTS = {
    "Domain": "core", "CoefficientSet": "core", "CoefficientBounds": "core", "RngSpec": "core",
    "TimeGrid": "core", "lookup_coefficients": "core", "available_presets": "core",
    "validate_config": "core", "load_config": "core", "config_hash": "core",
    "ParticleEnsemble": "particles", "DynamicsVariant": "particles", "simulate": "particles",
    "step": "particles", "weight_bound": "particles",
    "StepTriplet": "meanfield", "MixtureSpec": "meanfield", "make_triplet": "meanfield",
    "sample_mixture": "meanfield", "solve_limit": "meanfield", "picard_iterate": "meanfield",
    "gronwall_constants": "meanfield", "coupled_propagation_error": "meanfield",
    "StepKernel": "graphon", "cut_norm_exact": "graphon", "cut_norm_heuristic": "graphon",
    "cut_norm_sampling_bound": "graphon", "infinity_to_one_norm": "graphon",
    "weak_regularity_partition": "graphon", "sample_kernel": "graphon", "hom_density": "graphon",
    "Coupling": "metrics", "wasserstein1": "metrics", "delta_exact_small": "metrics",
    "delta_heuristic": "metrics", "gamma_objective": "metrics", "gamma_heuristic": "metrics",
    "ExperimentSpec": "harness", "run_experiment": "harness", "fit_rate": "harness",
    "RateFit": "harness", "emit_outputs": "harness",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    mod = _EXPORTS.get(name)
    if mod is None:
        raise AttributeError(f"module 'coevo' has no attribute {name!r}")
    return getattr(importlib.import_module(f".{mod}", __name__), name)


def __dir__():
    return sorted(set(globals()) | set(__all__))
