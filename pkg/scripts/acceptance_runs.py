"""
Desk-scale acceptance experiments that are too long for the unit suite:
M/M/1 oracle, supermarket fixed point, propagation of chaos, metastability
and the mean-drift/truncation check. Every table and report lands in
--out-dir with its metadata header.

    python scripts/acceptance_runs.py --only chaos --out-dir output/acceptance
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np
from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))
from src.dynamics.chaos import chaos_convergence_report, errors_decrease
from src.dynamics.ode import integrate
from src.loaders.files import FileLoader
from src.models.spec import load_model
from src.solvers.basin import Seed, basin_scan, metastability_report, perturbation_test
from src.solvers.fixed_point import algorithm_I, initial_vector, parse_recipe
from src.solvers.structured import qbd_mean_drift
from src.state_space import tail_masses

load_dotenv()

MODELS = Path(__file__).resolve().parent.parent / "config" / "models"
logger = logging.getLogger("acceptance")


def _model(name: str):
    return load_model(str(MODELS / f"{name}.yaml"))


def mm1_oracle(loader: FileLoader) -> bool:
    spec = _model("mm1")
    expected = 0.5 * 0.5 ** np.arange(41)
    ok = True
    results = {}
    for recipe in ("uniform:4", "geometric:0.5", "poisson:1"):
        report = algorithm_I(spec, initial_vector(recipe, spec.layout))
        error = float(np.abs(report.pi.values[:41] - expected).max())
        results[recipe] = {"max_error": error, "certified": report.certified, "iterations": report.iterations}
        ok &= error <= 1e-8 and report.certified
    loader.write_json("mm1_oracle", {"results": results, "passed": ok})
    return ok


def supermarket(loader: FileLoader) -> bool:
    spec = _model("supermarket")
    q = initial_vector("geometric:0.5", spec.layout)
    s = np.zeros(9)
    s[0] = 1.0
    for k in range(1, 9):
        s[k] = 0.9 * s[k - 1] ** 2
    flow = tail_masses(integrate(spec, q, 200.0).final)[:9]
    fixed = tail_masses(algorithm_I(spec, q).pi)[:9]
    errors = {"integrate": float(np.abs(flow - s).max()), "algorithm_I": float(np.abs(fixed - s).max())}
    ok = max(errors.values()) <= 1e-6
    loader.write_json("supermarket", {"oracle_tails": s, "errors": errors, "passed": ok})
    return ok


def chaos(loader: FileLoader, sizes: List[int], replications: int) -> bool:
    ok = True
    for name, recipe in (("linear2", "custom:1,0"), ("supermarket", "geometric:0.5")):
        spec = _model(name)
        report = chaos_convergence_report(spec, sizes, initial_vector(recipe, spec.layout), 5.0, replications, seed=0)
        loader.write_frame(f"chaos_{name}", report)
        means = report["mean_sup_l1_error"].to_numpy()
        decreasing = bool(np.all(np.diff(means) < 0)) and errors_decrease(report, slack=-2.0)
        ok &= decreasing
        if name == "linear2":
            ratios = means[1:] / means[:-1]
            ok &= bool(np.all((ratios >= 0.2) & (ratios <= 0.5)))
            print(f"   linear2 error ratios: {np.round(ratios, 3).tolist()}")
    return ok


def metastability(loader: FileLoader) -> bool:
    spec = _model("bistable")
    seeds = [Seed.from_recipe(parse_recipe(t), spec) for t in ("uniform:1", "custom:0,1", "custom:0.9,0.1", "custom:0.2,0.8")]
    scan = basin_scan(spec, seeds, t_transient=100.0)
    summary = metastability_report(scan)
    returned = [max(perturbation_test(spec, lim.pi, 10, 1e-3, 100.0, seed=lim.index)) for lim in scan.stable_limits]
    loader.write_json("metastability", {"scan": scan.to_dict(), "summary": summary.to_dict(), "worst_return": returned})
    return (
        summary.count_stable == 2
        and scan.metastable
        and min(summary.separations.values()) > 0.1
        and all(r < scan.parameters["merge_tol"] for r in returned)
    )


def mean_drift(loader: FileLoader) -> bool:
    results = {}
    for name in ("mm1qbd", "mm1qbd_overloaded"):
        spec = _model(name)
        p0 = initial_vector("uniform:1", spec.layout)
        drift = qbd_mean_drift(spec, p0)
        report = algorithm_I(spec, p0)
        results[name] = {"stable": drift.stable, "converged": report.converged, "truncation_flag": report.truncation_flag}
    ok = (
        results["mm1qbd"]["stable"] and results["mm1qbd"]["converged"] and not results["mm1qbd"]["truncation_flag"]
        and not results["mm1qbd_overloaded"]["stable"] and results["mm1qbd_overloaded"]["truncation_flag"]
    )
    loader.write_json("mean_drift", {"results": results, "passed": ok})
    return ok


def main() -> int:
    parser = argparse.ArgumentParser(description="Run the desk-scale acceptance experiments")
    parser.add_argument("--out-dir", default="output/acceptance")
    parser.add_argument("--only", action="append", default=None, help="Run only the named experiment (repeatable)")
    parser.add_argument("--N", dest="sizes", type=int, nargs="+", default=[100, 1000, 10000])
    parser.add_argument("--replications", type=int, default=20)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("pandera").setLevel(logging.WARNING)

    loader = FileLoader(args.out_dir, meta={"command": "acceptance", "seed": 0})
    experiments: Dict[str, Callable[[], bool]] = {
        "mm1": lambda: mm1_oracle(loader),
        "supermarket": lambda: supermarket(loader),
        "chaos": lambda: chaos(loader, args.sizes, args.replications),
        "metastability": lambda: metastability(loader),
        "mean-drift": lambda: mean_drift(loader),
    }
    selected = args.only or list(experiments)
    unknown = [name for name in selected if name not in experiments]
    if unknown:
        print(f"❌ Unknown experiment(s): {unknown}; choose from {list(experiments)}")
        return 2

    failed = []
    for name in selected:
        print(f"🔍 {name}...")
        started = time.monotonic()
        passed = experiments[name]()
        print(f"{'✅' if passed else '❌'} {name} ({time.monotonic() - started:.1f}s)")
        if not passed:
            failed.append(name)

    print("-" * 40)
    print(f"{len(selected) - len(failed)}/{len(selected)} experiments passed; outputs in {args.out_dir}")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
