import argparse
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from dotenv import load_dotenv

from src.config import get_settings
from src.dynamics.lyapunov import (
    RelativeEntropyField,
    censored_trajectory_compare,
    entropy_decay_report,
    lyapunov_check,
    reduced_lyapunov,
)
from src.dynamics.ode import IntegratorConfig, integrate
from src.dynamics.particles import simulate
from src.errors import ConfigError, DomainError, MeanFieldError
from src.handlers.failures import FailureLedger
from src.loaders.files import FileLoader
from src.models.spec import GeneratorSpec, lipschitz_estimate, load_model
from src.solvers.basin import CommutationConfig, Seed, basin_scan, metastability_report
from src.solvers.censoring import reconstruct, rg_factorize, stationary_from_rg
from src.solvers.fixed_point import algorithm_I, certify, initial_vector, parse_recipe, recipe_set
from src.solvers.structured import qbd_mean_drift
from src.state_space import ProbabilityVector, max_norm
from src.transformers.trajectories import normalize_trajectory, vector_frame


logger = logging.getLogger("src.pipeline")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Invalid command-line input, detected before any computation."""


@dataclass
class RunConfig:
    command: str
    model_path: str
    out_dir: Path
    fmt: str
    params: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None

    def meta(self, spec: GeneratorSpec) -> Dict[str, Any]:
        return {
            "command": self.command,
            "config": {"model_path": self.model_path, "model": spec.source, "params": self.params, "format": self.fmt},
            "seed": self.seed,
        }


def _positive(kind: Callable[[str], Any]) -> Callable[[str], Any]:
    def convert(text: str) -> Any:
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value

    return convert


def _integrator_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=["dopri5", "rk4"], default="dopri5")
    p.add_argument("--step", type=_positive(float), default=1e-2, help="Fixed step for rk4")
    p.add_argument("--abs-tol", type=_positive(float), default=1e-10)
    p.add_argument("--rel-tol", type=_positive(float), default=1e-8)
    p.add_argument("--renormalization", choices=["clip-rescale", "none"], default="clip-rescale")


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="meanfield", description="Mean-field block-structured Markov toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, help="Model file (YAML)")
    common.add_argument("--out-dir", default=None, help="Defaults to $MEANFIELD_OUTPUT_DIR or ./output")
    common.add_argument("--format", choices=["csv", "jsonl"], default="csv", help="Table format")
    common.add_argument("--settings", default=None, help="Override config/settings.yaml")
    common.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="Fixed point by successive substitution, then certify")
    p.add_argument("--init", default="uniform:1", help="Initial-vector recipe, e.g. geometric:0.5 or file:pi.csv")
    p.add_argument("--eps", type=_positive(float), default=1e-10)
    p.add_argument("--max-iter", type=_positive(int), default=10_000)
    p.add_argument("--damping", type=_positive(float), default=1.0)
    p.add_argument("--solver", choices=["rg", "structured"], default="rg")

    p = sub.add_parser("integrate", parents=[common], help="Integrate the mean-field ODE")
    p.add_argument("--init", default="uniform:1")
    p.add_argument("--T", dest="t_end", type=_positive(float), required=True)
    p.add_argument("--sample-dt", type=_positive(float), default=None)
    _integrator_args(p)

    p = sub.add_parser("simulate", parents=[common], help="Exact N-particle simulation")
    p.add_argument("--init", default="uniform:1")
    p.add_argument("--N", dest="n", type=_positive(int), required=True)
    p.add_argument("--T", dest="t_end", type=_positive(float), required=True)
    p.add_argument("--sample-dt", type=_positive(float), default=0.1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("scan", parents=[common], help="Basin scan over initial vectors")
    p.add_argument("--seeds", default="recipes:default20", help="recipes:<name> or ';'-separated recipes")
    p.add_argument("--t-transient", type=_positive(float), default=100.0)
    p.add_argument("--t-window", type=_positive(float), default=10.0)
    p.add_argument("--merge-tol", type=_positive(float), default=1e-4)
    p.add_argument("--eps", type=_positive(float), default=1e-8)
    p.add_argument("--perturbations", type=int, default=3)
    p.add_argument("--seed", type=int, default=0, help="Seed of the perturbation directions")
    p.add_argument("--commutation", action="store_true", help="Run the limit-commutation experiment when one stable limit exists")
    p.add_argument("--commutation-N", type=_positive(int), default=20)
    p.add_argument("--commutation-T", type=_positive(float), default=1000.0)
    _integrator_args(p)

    p = sub.add_parser("factorize", parents=[common], help="RG factorization of Γ(p)")
    p.add_argument("--at", default="uniform:1", help="Distribution p at which Γ is evaluated")

    p = sub.add_parser("check", parents=[common], help="Certificates, mean drift, Lipschitz estimate, entropy decay")
    p.add_argument("--at", default="uniform:1")
    p.add_argument("--certify", action="store_true")
    p.add_argument("--mean-drift", action="store_true")
    p.add_argument("--lipschitz", type=int, default=None, metavar="SAMPLES")
    p.add_argument("--entropy", action="store_true")
    p.add_argument("--lyapunov", type=int, default=None, metavar="SAMPLES")
    p.add_argument("--p0", default="custom:1,0", help="Entropy decay: initial law of p")
    p.add_argument("--q0", default="uniform:2", help="Entropy decay: initial law of q")
    p.add_argument("--T", dest="t_end", type=_positive(float), default=5.0)
    p.add_argument("--dt", type=_positive(float), default=1e-3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("compare-censored", parents=[common], help="Level-0 drift against p_0Ψ_0(p) along a trajectory")
    p.add_argument("--init", default="uniform:1")
    p.add_argument("--T", dest="t_end", type=_positive(float), required=True)
    p.add_argument("--sample-dt", type=_positive(float), default=0.1)
    _integrator_args(p)

    return parser.parse_args(argv)


def build_run_config(args: argparse.Namespace) -> RunConfig:
    if not Path(args.model).is_file():
        raise UsageError(f"Model file not found: {args.model}")
    out_dir = Path(args.out_dir or os.environ.get("MEANFIELD_OUTPUT_DIR") or "output")
    skip = {"model", "out_dir", "format", "verbose", "command", "settings"}
    params = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    if "damping" in params and params["damping"] > 1.0:
        raise UsageError("--damping must lie in (0, 1]")
    if "perturbations" in params and params["perturbations"] < 0:
        raise UsageError("--perturbations must be >= 0")
    return RunConfig(
        command=args.command,
        model_path=args.model,
        out_dir=out_dir,
        fmt=args.format,
        params=params,
        seed=params.get("seed"),
    )


def _integrator(args: argparse.Namespace, sample_dt: Optional[float] = None) -> IntegratorConfig:
    return IntegratorConfig(
        method=args.method,
        step=args.step,
        abs_tol=args.abs_tol,
        rel_tol=args.rel_tol,
        renormalization=args.renormalization,
        sample_dt=sample_dt,
    )


# ----------------------------------------------------------------------
# Subcommands. Each returns an exit code; outputs go through the loader.
# ----------------------------------------------------------------------

def run_solve(args: argparse.Namespace, spec: GeneratorSpec, loader: FileLoader, ledger: FailureLedger) -> int:
    pi0 = initial_vector(args.init, spec.layout)
    report = algorithm_I(spec, pi0, epsilon=args.eps, max_iter=args.max_iter, damping=args.damping, solver=args.solver)
    loader.write_json("fixed_point", {"report": report.to_dict(), "level_masses": report.pi.level_masses().tolist()})
    loader.write_frame("pi", vector_frame(report.pi), fmt="csv")
    print(f"converged={report.converged} iterations={report.iterations} residual={report.residual:.3g} certified={report.certified}")
    if report.truncation_flag:
        print(f"warning: {report.boundary_mass:.3g} of the mass sits at level L (truncation signature)", file=sys.stderr)
    return EXIT_OK if report.converged and report.certified else EXIT_FAILED


def run_integrate(args: argparse.Namespace, spec: GeneratorSpec, loader: FileLoader, ledger: FailureLedger) -> int:
    q = initial_vector(args.init, spec.layout)
    traj = integrate(spec, q, args.t_end, _integrator(args, args.sample_dt))
    loader.write_frame("trajectory", normalize_trajectory(spec.layout, traj.times, traj.states))
    loader.write_json("integrate", {"metadata": traj.metadata})
    print(f"{len(traj)} states stored, {traj.metadata['steps']} steps, max correction {traj.metadata['max_correction']:.3g}")
    return EXIT_OK


def run_simulate(args: argparse.Namespace, spec: GeneratorSpec, loader: FileLoader, ledger: FailureLedger) -> int:
    q = initial_vector(args.init, spec.layout)
    run = simulate(spec, args.n, q, args.t_end, args.sample_dt, args.seed)
    loader.write_frame("empirical", normalize_trajectory(spec.layout, run.times, run.measures, N=run.N, seed=run.seed))
    loader.write_json("simulate", {"metadata": run.metadata, "N": run.N})
    print(f"N={run.N} seed={run.seed} jumps={run.metadata['jump_count']}")
    return EXIT_OK


def run_scan(args: argparse.Namespace, spec: GeneratorSpec, loader: FileLoader, ledger: FailureLedger) -> int:
    seeds = [Seed.from_recipe(r, spec) for r in recipe_set(args.seeds)]
    if not seeds:
        raise UsageError("--seeds produced no initial vectors")
    scan = basin_scan(
        spec, seeds,
        t_transient=args.t_transient,
        t_window=args.t_window,
        merge_tol=args.merge_tol,
        epsilon=args.eps,
        perturbations=args.perturbations,
        perturbation_seed=args.seed,
        cfg=_integrator(args),
        ledger=ledger,
    )
    commutation = CommutationConfig(N=args.commutation_N, t_end=args.commutation_T, seed=args.seed) if args.commutation else None
    summary = metastability_report(scan, spec, commutation)
    loader.write_json("scan", {"report": scan.to_dict(), "metastability": summary.to_dict()})
    loader.write_frame("scan_seeds", scan.seed_frame())
    loader.write_frame("scan_limits", scan.limit_frame())
    for limit in scan.limits:
        loader.write_frame(f"limit_{limit.index}", vector_frame(limit.pi), fmt="csv")
    print(f"limits={len(scan.limits)} stable={summary.count_stable} metastable={scan.metastable}")
    for note in summary.diagnostics:
        print(f"note: {note}", file=sys.stderr)
    return EXIT_OK if scan.limits else EXIT_FAILED


def run_factorize(args: argparse.Namespace, spec: GeneratorSpec, loader: FileLoader, ledger: FailureLedger) -> int:
    p = initial_vector(args.at, spec.layout)
    generator = spec.evaluate(p)
    factors = rg_factorize(generator)
    error = max_norm(reconstruct(factors).matrix, generator.matrix)
    pi = stationary_from_rg(factors)
    loader.write_json("factors", {
        "reconstruction_error": error,
        "R_U": factors.R_U,
        "Psi_D": factors.Psi_D,
        "G_L": factors.G_L,
        "Psi_0": factors.Psi(0),
    })
    loader.write_frame("stationary", vector_frame(pi), fmt="csv")
    print(f"reconstruction error {error:.3g}")
    return EXIT_OK


def selected_checks(args: argparse.Namespace, spec: GeneratorSpec) -> List[str]:
    """Explicitly requested checks, or every check that applies to the model."""
    chosen = [
        name for name, wanted in (
            ("certificate", args.certify),
            ("mean_drift", args.mean_drift),
            ("lipschitz_estimate", args.lipschitz is not None),
            ("lyapunov", args.lyapunov is not None),
            ("entropy_decay", args.entropy),
        ) if wanted
    ]
    if chosen:
        return chosen
    checks = ["certificate", "lipschitz_estimate"]
    if spec.structure_tag.kind == "qbd":
        checks.append("mean_drift")
    if spec.is_linear:
        checks.extend(["lyapunov", "entropy_decay"])
    return checks


def run_check(args: argparse.Namespace, spec: GeneratorSpec, loader: FileLoader, ledger: FailureLedger) -> int:
    p = initial_vector(args.at, spec.layout)
    actions: Dict[str, Callable[[], Any]] = {
        "certificate": lambda: certify(spec, p).to_dict(),
        "mean_drift": lambda: qbd_mean_drift(spec, p).__dict__.copy(),
        "lipschitz_estimate": lambda: lipschitz_estimate(spec, args.lipschitz or 50, args.seed),
        "lyapunov": lambda: _lyapunov(spec, p, args.lyapunov or 200, args.seed),
        "entropy_decay": lambda: _entropy(args, spec, loader),
    }
    results: Dict[str, Any] = {}
    failed = False
    for name in selected_checks(args, spec):
        try:
            results[name] = actions[name]()
        except MeanFieldError as exc:
            failed = True
            ledger.send("check", {"check": name}, exc)
            results[name] = {"error": f"{type(exc).__name__}: {exc}"}

    loader.write_json("check", {"at": args.at, "results": results})
    for name, value in results.items():
        print(f"{name}: {value}")
    return EXIT_FAILED if failed else EXIT_OK


def _reduced(p: ProbabilityVector, pi: ProbabilityVector) -> Optional[float]:
    try:
        return reduced_lyapunov(p, pi)
    except DomainError:
        return None


def _lyapunov(spec: GeneratorSpec, p: ProbabilityVector, samples: int, seed: int) -> Dict[str, Any]:
    pi = stationary_from_rg(rg_factorize(spec.evaluate(p)))
    report = lyapunov_check(spec, RelativeEntropyField(pi), samples, seed)
    return {
        "max_violation": report.max_violation,
        "violations": len(report.violating_points),
        "skipped": report.skipped,
        "reduced_lyapunov_at": _reduced(p, pi),
    }


def _entropy(args: argparse.Namespace, spec: GeneratorSpec, loader: FileLoader) -> Dict[str, Any]:
    cfg = IntegratorConfig(method="rk4", step=args.dt, sample_dt=args.dt)
    p_traj = integrate(spec, initial_vector(args.p0, spec.layout), args.t_end, cfg)
    q_traj = integrate(spec, initial_vector(args.q0, spec.layout), args.t_end, cfg)
    df = entropy_decay_report(spec, p_traj, q_traj)
    loader.write_frame("entropy_decay", df)
    gap = (df["dR_dt_numeric"] - df["dR_dt_formula"]).abs().iloc[1:-1]
    return {
        "max_formula_value": float(df["dR_dt_formula"].max()),
        "max_derivative_gap": float(gap.max()) if len(gap) else 0.0,
        "rows": len(df),
    }


def run_compare_censored(args: argparse.Namespace, spec: GeneratorSpec, loader: FileLoader, ledger: FailureLedger) -> int:
    q = initial_vector(args.init, spec.layout)
    traj = integrate(spec, q, args.t_end, _integrator(args, args.sample_dt))
    df = censored_trajectory_compare(spec, traj, ledger)
    loader.write_frame("censored_gap", df)
    failures = int((df["status"] != "ok").sum()) if len(df) else 0
    print(f"{len(df)} rows, max gap {df['gap'].max():.3g}, {failures} censoring failures")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, GeneratorSpec, FileLoader, FailureLedger], int]] = {
    "solve": run_solve,
    "integrate": run_integrate,
    "simulate": run_simulate,
    "scan": run_scan,
    "factorize": run_factorize,
    "check": run_check,
    "compare-censored": run_compare_censored,
}


def _validate_inputs(args: argparse.Namespace, spec: GeneratorSpec) -> None:
    """Recipes are parsed and built before any computation starts."""
    texts = [getattr(args, name) for name in ("init", "at") if getattr(args, name, None) is not None]
    if args.command == "check" and "entropy_decay" in selected_checks(args, spec):
        texts.extend([args.p0, args.q0])
    for text in texts:
        initial_vector(parse_recipe(text), spec.layout)
    if getattr(args, "seeds", None) is not None:
        for recipe in recipe_set(args.seeds):
            initial_vector(recipe, spec.layout)


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.getLogger("pandera").setLevel(logging.WARNING)
    warnings.filterwarnings("ignore", category=FutureWarning, module="pandera")

    try:
        if args.settings:
            os.environ["MEANFIELD_SETTINGS"] = args.settings
            get_settings.cache_clear()
        get_settings()
        config = build_run_config(args)
        spec = load_model(config.model_path)
        _validate_inputs(args, spec)
    except (UsageError, MeanFieldError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    loader = FileLoader(str(config.out_dir), config.fmt, config.meta(spec))
    ledger = FailureLedger(str(config.out_dir / "failures"))
    try:
        code = COMMANDS[args.command](args, spec, loader, ledger)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except MeanFieldError as exc:
        logger.error("%s failed: %s", args.command, exc)
        code = EXIT_FAILED
    ledger.flush()
    return code


if __name__ == "__main__":
    sys.exit(main())
