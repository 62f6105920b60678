import numpy as np
import pytest
from scipy import stats

from src.dynamics.chaos import (
    chaos_convergence_report,
    errors_decrease,
    exchangeability_probe,
    reference_trajectory,
    sup_l1_error,
)
from src.dynamics.particles import simulate
from src.errors import DomainError
from src.solvers.fixed_point import initial_vector
from src.state_space import tail_mass

from helpers import supermarket_spec


SPEC = supermarket_spec(2, 0.9, L=8)
Q0 = initial_vector("geometric:0.5", SPEC.layout)


class TestSupError:
    def test_bounded_and_covers_start(self):
        ref = reference_trajectory(SPEC, Q0, 2.0, 0.5)
        run = simulate(SPEC, 10, Q0, 2.0, 0.5, seed=0)
        assert sup_l1_error(run, ref) <= 2.0
        assert sup_l1_error(run, ref) >= float(np.abs(run.values[0] - ref.values[0]).sum())

    def test_grids_must_match(self):
        ref = reference_trajectory(SPEC, Q0, 2.0, 0.5)
        run = simulate(SPEC, 10, Q0, 2.0, 0.25, seed=0)
        with pytest.raises(DomainError):
            sup_l1_error(run, ref)


class TestConvergenceReport:
    @pytest.mark.parametrize(
        "kwargs", [{"N_list": []}, {"N_list": [100, 10]}, {"N_list": [0, 10]}, {"replications": 1}]
    )
    def test_invalid(self, kwargs):
        args = {"N_list": [10, 20], "replications": 3, **kwargs}
        with pytest.raises(DomainError):
            chaos_convergence_report(SPEC, q=Q0, t_end=1.0, seed=0, **args)

    def test_small_run_shape(self):
        report = chaos_convergence_report(SPEC, [5, 20], Q0, 1.0, replications=3, seed=4)
        assert list(report["N"]) == [5, 20]
        assert list(report.columns) == ["N", "replications", "mean_sup_l1_error", "std", "standard_error"]
        again = chaos_convergence_report(SPEC, [5, 20], Q0, 1.0, replications=3, seed=4)
        assert report.equals(again)

    @pytest.mark.slow
    def test_error_shrinks_with_N(self):
        report = chaos_convergence_report(SPEC, [10, 100, 1000], Q0, 5.0, replications=10, seed=0)
        assert errors_decrease(report)
        means = report["mean_sup_l1_error"].to_numpy()
        assert means[-1] < means[0]


class TestExchangeability:
    def test_permuted_start_gives_same_empirical_path(self):
        order = np.random.default_rng(1).permutation(30)
        runs = exchangeability_probe(SPEC, 30, Q0, 3.0, seed=5, permutation=order)
        np.testing.assert_array_equal(runs["original_empirical"].values, runs["permuted_empirical"].values)

    def test_permutation_must_be_bijection(self):
        with pytest.raises(DomainError):
            exchangeability_probe(SPEC, 3, Q0, 1.0, seed=0, permutation=[0, 1, 1])

    @pytest.mark.slow
    def test_swapping_two_particles_keeps_final_law(self, model):
        spec = model("linear2")
        q = initial_vector("uniform:2", spec.layout)
        original, swapped = [], []
        for seed in range(200):
            runs = exchangeability_probe(spec, 2, q, 2.0, seed=seed, permutation=[1, 0], sample_dt=1.0)
            original.append(tail_mass(runs["original_empirical"].final, 1))
            swapped.append(tail_mass(runs["permuted_empirical"].final, 1))
        assert stats.ks_2samp(original, swapped).pvalue > 0.01
