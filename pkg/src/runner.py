"""Subcommand orchestration.

Every subcommand loads and validates the configuration, runs its experiment,
writes CSV/JSON artifacts plus manifest.json into a fresh results directory
and returns an exit code. Library errors are translated here and only here.
"""

import json
import logging
import os
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from pydantic import ValidationError

from src.chaos_expansion import (
    adjoint_truncated_expansion,
    expansion_duality_gaps,
    operator_norm_decay,
    remainder_bound,
    truncated_expansion,
)
from src.config import (
    ExperimentConfig,
    build_grid_backend,
    build_model,
    build_test_function,
    error_key_path,
    load_config,
    resolved,
)
from src.constants import (
    LOGGER_NAME,
    MAX_IBP_LEVEL,
    MAX_NORM_DECAY_LEVEL,
    MIN_DYADIC_STEPS,
    VACUOUS_NORM,
    AdjointForm,
    BackendKind,
    ExitCode,
    Oracle,
    Preset,
    RandomStream,
    Subcommand,
    Target,
    VerifyCheck,
)
from src.data_models import CheckReport, FilterEstimate
from src.errors import ConfigError, UnsupportedError, ZakaiLabError
from src.filtering import (
    kalman_bucy_oracle,
    mass_lower_bound_check,
    observation_sup_norms,
    particle_filter_oracle,
    rho_grid,
    rho_mc,
    scenario_seed,
    z_score,
)
from src.gradient_harness import gradient_exponent_fit
from src.iterated_integrals import (
    IteratedIntegralTable,
    chen_check,
    extend_multiplicative,
    holder_constant_fit,
    neoclassical_check,
    signature_levels,
)
from src.report_utils import read_path_csv, run_directory, write_csv, write_manifest, write_path_csv
from src.robust_repr import (
    degree_audit,
    fixture_matches,
    ibp_convergence,
    ibp_term_values,
    ibp_terms,
    robustness_check,
)
from src.sde_core import (
    PathGrid,
    SdeModel,
    make_path_grid,
    model_hash,
    observe_path,
    simulate_paths,
    simulate_signal,
    substream,
)
from src.semigroup import GridBackend, adjoint_semigroup

logger = logging.getLogger(LOGGER_NAME)

CHEN_TOLERANCE = 1e-12
CHEN_TRIPLES = 50
NEOCLASSICAL_DRAWS = 1000
DUALITY_TOLERANCE = 1e-8
EXTENSION_AGREEMENT = 1e-10


@dataclass
class RunContext:
    subcommand: str
    config: ExperimentConfig
    directory: str
    outputs: list[str] = field(default_factory=list)

    def csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
        path = write_csv(os.path.join(self.directory, name), header, rows)
        self.outputs.append(name)
        return path

    def json(self, name: str, payload: Mapping[str, Any]) -> str:
        path = os.path.join(self.directory, name)
        with open(path, "w", encoding="utf8") as json_file:
            json.dump(payload, json_file, indent=4, default=str)
        self.outputs.append(name)
        return path


# --- Shared inputs ---
def _model(config: ExperimentConfig) -> SdeModel:
    model = build_model(config.model)
    if len(config.model.x0) != model.N:
        raise ConfigError(f"x0 must have {model.N} entries", "model.x0")
    return model


def _observation_path(config: ExperimentConfig, model: SdeModel) -> PathGrid:
    """The path file when given, otherwise Y generated by a simulated signal."""
    if config.path_file:
        return read_path_csv(config.path_file, config.observation_seed)
    T, M = config.time.T, config.time.steps
    return observe_path(model, config.model.x0, T, M, config.observation_seed)


def _grid_backend(config: ExperimentConfig, model: SdeModel) -> GridBackend:
    if config.backend != BackendKind.GRID:
        raise UnsupportedError(f"{config.backend} backend: this subcommand needs the grid backend")
    return build_grid_backend(config, model)


def _at_x0(backend: GridBackend, values: np.ndarray, x0: Sequence[float]) -> float:
    return float(backend.interpolate(values, np.asarray(x0))[0])


# --- Subcommands ---
def _simulate(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    model = _model(config)
    path = _observation_path(config, model)
    signal = simulate_signal(model, config.model.x0, path)
    write_path_csv(os.path.join(ctx.directory, "path.csv"), path, signal)
    ctx.outputs.append("path.csv")
    terminal = simulate_paths(
        model,
        config.model.x0,
        config.time.T,
        config.time.steps,
        config.monte_carlo.n_paths,
        config.seed,
        config.threads,
        config.monte_carlo.chunk_size,
    )
    return {
        "terminal_mean": terminal.mean(axis=0).tolist(),
        "terminal_std": terminal.std(axis=0, ddof=1).tolist(),
        "observation_end": path.Y[-1].tolist(),
    }


def _filter_estimate(config: ExperimentConfig, model: SdeModel, path: PathGrid) -> FilterEstimate:
    phi = build_test_function(config.phi, model.N)
    if config.backend == BackendKind.MONTE_CARLO:
        mc = config.monte_carlo
        return rho_mc(
            model,
            config.model.x0,
            path,
            phi,
            mc.n_paths,
            config.seed,
            config.threads,
            mc.chunk_size,
        )
    backend = build_grid_backend(config, model)
    rho_phi = _at_x0(backend, rho_grid(backend, path, phi), config.model.x0)
    rho_one = _at_x0(backend, rho_grid(backend, path, np.ones(backend.grid.size)), config.model.x0)
    return FilterEstimate(rho_phi, rho_one, rho_phi / rho_one, method="grid")


def _filter(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    model = _model(config)
    path = _observation_path(config, model)
    estimate = _filter_estimate(config, model, path)
    payload: dict[str, Any] = {
        "estimate": estimate.to_dict(),
        "oracle": str(config.oracle),
        "seed": config.seed,
        "model_hash": model_hash(model),
    }
    if config.oracle == Oracle.KALMAN:
        if config.model.preset != Preset.LINEAR_GAUSSIAN or config.phi.kind != "identity":
            raise ConfigError(
                "the Kalman-Bucy oracle needs the linear-gaussian preset and phi = identity",
                "oracle",
            )
        params = config.model.params
        kalman = kalman_bucy_oracle(
            params.get("a", 1.0),
            params.get("sigma", 1.0),
            path,
            config.model.x0[0],
            gain=params.get("gain", 1.0),
        )
        payload["reference"] = kalman.to_dict()
        reference = kalman.mean
        payload["z_score"] = z_score(estimate.pi_phi, estimate.pi_phi_stderr, kalman.mean)
    else:
        phi = build_test_function(config.phi, model.N)
        particle = particle_filter_oracle(
            model, config.model.x0, path, phi, config.monte_carlo.n_particles, config.seed
        )
        payload["reference"] = particle.to_dict()
        reference = particle.pi_phi
        payload["z_score"] = z_score(
            estimate.pi_phi, estimate.pi_phi_stderr, particle.pi_phi, particle.pi_phi_stderr
        )
    payload["abs_error"] = abs(estimate.pi_phi - reference)
    payload["rel_error"] = payload["abs_error"] / max(abs(reference), VACUOUS_NORM)
    ctx.json("filter.json", payload)
    return {
        "pi": estimate.pi_phi,
        "z_score": payload["z_score"],
        "abs_error": payload["abs_error"],
        "rel_error": payload["rel_error"],
    }


def _expand(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    model = _model(config)
    backend = _grid_backend(config, model)
    path = _observation_path(config, model)
    phi = build_test_function(config.phi, model.N)
    x0 = config.model.x0
    result = truncated_expansion(backend, path, x0, phi, config.levels, per_word=True)
    reference = _at_x0(backend, rho_grid(backend, path, phi), x0)
    ctx.csv(
        "levels.csv",
        ["level", "contribution", "partial_sum", "gap_to_rho"],
        [
            [m, v, s, reference - s]
            for m, (v, s) in enumerate(zip(result.levels, result.partial_sums, strict=True))
        ],
    )
    ctx.csv(
        "words.csv",
        ["level", "word", "contribution"],
        [[t.level, "".join(map(str, t.word)), t.contribution] for t in result.terms],
    )
    decay = _norm_decay(config, backend, path)
    if decay:
        ctx.json(
            "norm_decay.json",
            {"dictionary_version": config.dictionary_version, "levels": decay},
        )
    return {"value": result.value, "rho_grid": reference, "norm_decay_levels": len(decay)}


def _norm_decay(
    config: ExperimentConfig, backend: GridBackend, path: PathGrid
) -> list[dict[str, Any]]:
    # four dyadic scales down to MIN_DYADIC_STEPS steps
    if backend.grid.dim != 1 or path.M < 8 * MIN_DYADIC_STEPS:
        logger.warning("Skipping operator norm decay: it needs a 1-D grid and 32 or more steps")
        return []
    top = min(config.levels, MAX_NORM_DECAY_LEVEL)
    return [
        operator_norm_decay(backend, path, m, config.gamma, config.dictionary_version).to_dict()
        for m in range(1, top + 1)
    ]


def _robust(ctx: RunContext) -> dict[str, Any]:
    """Per-term table of the pathwise levels plus step-halving and path-shift checks."""
    config = ctx.config
    model = _model(config)
    backend = _grid_backend(config, model)
    path = _observation_path(config, model)
    phi = build_test_function(config.phi, model.N)
    levels = range(1, min(max(config.levels, 1), MAX_IBP_LEVEL) + 1)
    rows = []
    for level in levels:
        values = ibp_term_values(backend, path, level, 0.0, path.T, phi, config.psi_form)
        for j, (term, coefficient, contribution) in enumerate(values, start=1):
            point = _at_x0(backend, contribution, config.model.x0)
            rows.append([f"L{level}T{j}", coefficient, term.label, point])
    ctx.csv("terms.csv", ["term", "coefficient", "chain", "contribution"], rows)
    summary: dict[str, Any] = {
        "terms": len(rows),
        "degree_audit": all(degree_audit(ibp_terms(level)) for level in levels),
        "fixture_matches": fixture_matches(),
    }
    if path.M % 2**config.halvings == 0:
        convergence = ibp_convergence(backend, path, phi, levels, config.halvings)
        ctx.json("convergence.json", {"levels": [r.to_dict() for r in convergence]})
        summary["convergence_slopes"] = [r.slope for r in convergence]
    else:
        logger.warning(
            f"{path.M} steps are not divisible by 2^{config.halvings}; skipping the halving study"
        )
    robustness = robustness_check(backend, path, phi, levels)
    ctx.json("robustness.json", {"levels": [r.to_dict() for r in robustness]})
    summary["lipschitz_ok"] = all(r.passed for r in robustness)
    return summary


def _signature(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    model = _model(config)
    path = _observation_path(config, model)
    cuts = [0.0, *sorted(config.times or []), path.T]
    pairs = [(s, t) for s, t in zip(cuts, cuts[1:], strict=False) if s < t]
    table = IteratedIntegralTable.build(path, pairs, config.k)
    ctx.csv("iterated_integrals.csv", ["word", "s", "t", "value"], table.rows())
    fit = holder_constant_fit(path, config.gamma, config.k)
    return {"pairs": len(pairs), "holder": asdict(fit)}


def _gradient(ctx: RunContext) -> dict[str, Any]:
    config = ctx.config
    model = _model(config)
    backend = _grid_backend(config, model)
    path = None if config.target == Target.HEAT else _observation_path(config, model)
    phi = build_test_function(config.phi, model.N)
    report = gradient_exponent_fit(
        backend, config.target, config.alpha_index, config.beta_index, phi, config.times, path
    )
    ctx.csv("norms.csv", ["t", "norm"], list(zip(report.times, report.norms, strict=True)))
    ctx.json("exponent.json", report.to_dict())
    return {"slope": report.slope, "theory": report.theoretical_slope, "passed": report.passed}


# --- Verify checks ---
def _verify_chen(config: ExperimentConfig) -> CheckReport:
    path = make_path_grid(config.time.T, config.time.steps, 1, 2, config.observation_seed)
    rng = substream(config.seed, RandomStream.SCENARIO)
    worst = 0.0
    for _ in range(CHEN_TRIPLES):
        s, u, t = np.sort(rng.integers(0, path.M + 1, size=3)) * path.dt
        worst = max(worst, chen_check(path, config.k, s, u, t))
    return CheckReport("chen", worst, CHEN_TOLERANCE, worst <= CHEN_TOLERANCE, {"k": config.k})


def _verify_neoclassical(config: ExperimentConfig) -> CheckReport:
    """Random draws of (q, n, s, t); q = 1 must reproduce the binomial identity."""
    rng = substream(config.seed, RandomStream.SCENARIO)
    failures, worst_slack = 0, np.inf
    for _ in range(NEOCLASSICAL_DRAWS):
        q = rng.uniform(1.0, 4.0)
        n = int(rng.integers(0, 13))
        s, t = rng.uniform(0.0, 10.0, size=2)
        lhs, rhs, passed = neoclassical_check(q, n, s, t)
        failures += not passed
        worst_slack = min(worst_slack, (rhs - lhs) / max(rhs, 1.0))
    binomial_gap = 0.0
    for n in range(13):
        lhs, rhs, _ = neoclassical_check(1.0, n, 0.7, 1.9)
        binomial_gap = max(binomial_gap, abs(lhs - rhs) / rhs)
    return CheckReport(
        "neoclassical",
        float(worst_slack),
        0.0,
        failures == 0 and binomial_gap <= 1e-10,
        {"failures": failures, "draws": NEOCLASSICAL_DRAWS, "q1_relative_gap": binomial_gap},
    )


def _verify_remainder(config: ExperimentConfig) -> CheckReport:
    model = _model(config)
    backend = _grid_backend(config, model)
    phi = build_test_function(config.phi, model.N)
    T, M, x0 = config.time.T, config.time.steps, config.model.x0
    gaps = np.zeros((config.n_scenarios, config.levels + 1))
    for s in range(config.n_scenarios):
        path = make_path_grid(T, M, model.d1, model.d2, scenario_seed(config.seed, s))
        exact = _at_x0(backend, rho_grid(backend, path, phi), x0)
        partial = truncated_expansion(backend, path, x0, phi, config.levels).partial_sums
        gaps[s] = (exact - np.asarray(partial)) ** 2
    h_sup = float(np.max(observation_sup_norms(model, backend.grid)[0], initial=0.0))
    phi_sup = backend.sup_norm(backend.sample(phi), layer=0)
    bounds = [remainder_bound(h_sup, T, k, phi_sup) for k in range(config.levels + 1)]
    empirical = gaps.mean(axis=0)
    worst = float(np.max(empirical - np.asarray(bounds)))
    return CheckReport(
        "remainder",
        worst,
        0.0,
        worst <= 0.0,
        {"empirical": empirical.tolist(), "bounds": bounds, "scenarios": config.n_scenarios},
    )


def _verify_duality(config: ExperimentConfig) -> CheckReport:
    model = _model(config)
    backend = _grid_backend(config, model)
    phi = build_test_function(config.phi, model.N)
    g = np.exp(-0.5 * np.sum(backend.x**2, axis=-1))
    f = backend.sample(phi)
    t = config.time.T
    gaps = {}
    for form in AdjointForm:
        adjoint = adjoint_semigroup(backend, t, g, form=form)
        gaps[str(form)] = abs(backend.inner(backend.propagate(t, f), g) - backend.inner(f, adjoint))
    path = _observation_path(config, model)
    level_gaps = expansion_duality_gaps(backend, path, phi, g, config.levels)
    adjoint = adjoint_truncated_expansion(backend, path, g, config.levels, form=config.adjoint_form)
    scale = max(abs(backend.inner(f, g)), 1.0)
    worst = max(gaps[str(AdjointForm.TRANSPOSE)], *level_gaps) / scale
    return CheckReport(
        "duality",
        worst,
        DUALITY_TOLERANCE,
        worst <= DUALITY_TOLERANCE,
        {
            "semigroup": gaps,
            "expansion_levels": level_gaps,
            "adjoint_form": str(config.adjoint_form),
            "adjoint_levels": adjoint.levels,
        },
    )


def _verify_massbound(config: ExperimentConfig) -> CheckReport:
    model = _model(config)
    path = _observation_path(config, model)
    mc = config.monte_carlo
    report = mass_lower_bound_check(
        model, config.model.x0, path, mc.n_paths, config.seed, threads=config.threads
    )
    return CheckReport("massbound", report.log_lhs, report.log_rhs, report.passed, report.to_dict())


def _verify_extension(config: ExperimentConfig) -> CheckReport:
    model = _model(config)
    path = _observation_path(config, model)
    known = max(1, int(1.0 / config.gamma))
    holder = holder_constant_fit(path, config.gamma, config.k)
    result = extend_multiplicative(
        path, known, config.k, 0.0, path.T, config.schedule, holder=holder
    )
    direct = signature_levels(path, 0.0, path.T, config.k)
    error = (result.series - direct).norm() / max(direct.norm(), 1.0)
    return CheckReport(
        "extension",
        error,
        EXTENSION_AGREEMENT,
        error <= EXTENSION_AGREEMENT,
        {
            "known_depth": known,
            "refinements": result.refinements,
            "differences": result.differences,
            "holder_ok": result.holder_ok,
        },
    )


VERIFY_CHECKS: dict[VerifyCheck, Callable[[ExperimentConfig], CheckReport]] = {
    VerifyCheck.CHEN: _verify_chen,
    VerifyCheck.NEOCLASSICAL: _verify_neoclassical,
    VerifyCheck.REMAINDER: _verify_remainder,
    VerifyCheck.DUALITY: _verify_duality,
    VerifyCheck.MASSBOUND: _verify_massbound,
    VerifyCheck.EXTENSION: _verify_extension,
}


def verify(config: ExperimentConfig, check: VerifyCheck) -> CheckReport:
    report = VERIFY_CHECKS[check](config)
    logger.info(f"verify {check}: value {report.value:.3g} ({'pass' if report.passed else 'fail'})")
    return report


SUBCOMMANDS: dict[Subcommand, Callable[[RunContext], dict[str, Any]]] = {
    Subcommand.SIMULATE: _simulate,
    Subcommand.FILTER: _filter,
    Subcommand.EXPAND: _expand,
    Subcommand.ROBUST: _robust,
    Subcommand.SIGNATURE: _signature,
    Subcommand.GRADIENT: _gradient,
}


# --- Entry ---
def execute(
    subcommand: Subcommand,
    config: ExperimentConfig,
    results_dir: str | None = None,
    check: VerifyCheck | None = None,
) -> tuple[str, dict[str, Any]]:
    """Run one subcommand on a validated config; returns (results directory, summary)."""
    name = f"{subcommand}-{check}" if check else str(subcommand)
    ctx = RunContext(name, config, run_directory(name, results_dir, config.seed))
    if subcommand == Subcommand.VERIFY:
        if check is None:
            raise ConfigError("verify needs a check name", "check")
        report = verify(config, check)
        ctx.json("check.json", report.to_dict())
        summary = {"passed": report.passed, "value": report.value}
    else:
        summary = SUBCOMMANDS[subcommand](ctx)
    write_manifest(ctx.directory, name, resolved(config), ctx.outputs, summary)
    return ctx.directory, summary


def run(
    subcommand: Subcommand,
    config_path: str | None = None,
    overrides: Mapping[str, Any] | None = None,
    results_dir: str | None = None,
    check: VerifyCheck | None = None,
) -> tuple[ExitCode, dict[str, Any]]:
    """Exit code and summary; 2 for invalid input, 3 for a numerical guard."""
    try:
        config = load_config(config_path, overrides)
        directory, summary = execute(subcommand, config, results_dir, check)
    except ValidationError as e:
        key = error_key_path(e)
        logger.error(f"Invalid configuration at '{key}': {e.errors()[0]['msg']}")
        return ExitCode.VALIDATION, {"error": "validation", "key": key}
    except ZakaiLabError as e:
        logger.exception(f"{subcommand} stopped: {e}")
        return e.exit_code, {"error": type(e).__name__, "message": str(e)}
    summary = {**summary, "results": directory}
    if summary.get("passed") is False:
        return ExitCode.FAILURE, summary
    return ExitCode.OK, summary
