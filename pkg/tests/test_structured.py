import numpy as np
import pytest

from src.errors import InstabilityError, ModelError, NonConvergenceError
from src.models.spec import evaluate_generator, spec_from_dict
from src.solvers.censoring import censor, rg_factorize, stationary_from_rg
from src.solvers.structured import mean_drift, mg1_r_measure, mg1_stationary, qbd_mean_drift, solve_G_mg1, solve_R_gim1
from src.solvers.fixed_point import initial_vector
from src.state_space import LevelPhaseLayout, l1_distance


def scalars(*values):
    return [np.array([[v]]) for v in values]


class TestGIM1:
    def test_mm1_minimal_root(self):
        R, pi = solve_R_gim1(scalars(1.0, -3.0, 2.0), scalars(1.0, -1.0, 2.0))
        assert R[0, 0] == pytest.approx(0.5, abs=1e-11)
        np.testing.assert_allclose(pi.values[:30], 0.5 * 0.5 ** np.arange(30), atol=1e-10)

    def test_faster_service(self):
        solution = solve_R_gim1(scalars(1.0, -5.0, 4.0), scalars(1.0, -1.0, 4.0))
        assert solution.R[0, 0] == pytest.approx(0.25, abs=1e-11)
        assert solution.residual <= 1e-10

    def test_no_upward_transitions(self):
        R, _ = solve_R_gim1(scalars(0.0, -2.0, 2.0), scalars(0.0, 0.0, 2.0))
        assert R[0, 0] == 0.0

    def test_iterates_are_monotone_and_below_other_roots(self):
        iterates = []
        solution = solve_R_gim1(scalars(1.0, -3.0, 2.0), scalars(1.0, -1.0, 2.0), on_iterate=lambda n, R: iterates.append(R[0, 0]))
        assert np.all(np.diff(iterates) >= 0.0)
        # roots of 2R^2 - 3R + 1 are 0.5 and 1
        assert solution.R[0, 0] <= 1.0

    def test_overloaded_is_unstable(self):
        with pytest.raises(InstabilityError):
            solve_R_gim1(scalars(2.0, -3.0, 1.0), scalars(2.0, -2.0, 1.0))

    def test_matches_generic_solver_on_qbd(self, model):
        spec = model("mm1qbd")
        p = initial_vector("geometric:0.5", spec.layout)
        blocks = spec.structured_blocks(p)
        structured = solve_R_gim1(blocks.A, blocks.B, layout=spec.layout).pi
        generic = stationary_from_rg(rg_factorize(evaluate_generator(spec, p)))
        assert l1_distance(structured, generic) <= 1e-8

    def test_matches_generic_solver_on_two_phase_qbd(self):
        deep = spec_from_dict({"family": "Bistable", "levels": 80, "phases": 2, "params": {"base_up": 0.3, "feedback": 0.0}})
        p = initial_vector("uniform:1", deep.layout)
        blocks = deep.structured_blocks(p)
        structured = solve_R_gim1(blocks.A, blocks.B, layout=deep.layout).pi
        generic = stationary_from_rg(rg_factorize(evaluate_generator(deep, p)))
        assert np.max(np.abs(structured.values - generic.values)) <= 1e-8


class TestMG1:
    def test_mm1_G_is_one(self):
        solution = solve_G_mg1(scalars(2.0, -3.0, 1.0))
        assert solution.G[0, 0] == pytest.approx(1.0, abs=1e-10)
        assert solution.residual <= 1e-10
        assert solution.positive_recurrent is True

    def test_loose_stopping_rule_fails_the_residual_bound(self):
        with pytest.raises(NonConvergenceError, match="residual"):
            solve_G_mg1(scalars(2.0, -3.0, 1.0), tol=1e-3)

    def test_iteration_cap(self):
        with pytest.raises(NonConvergenceError):
            solve_G_mg1(scalars(2.0, -3.0, 1.0), max_iter=3)

    def test_no_downward_transitions(self):
        solution = solve_G_mg1(scalars(0.0, -1.0, 1.0))
        assert solution.G[0, 0] == 0.0
        assert solution.positive_recurrent is False

    def test_pure_death_single_substitution(self):
        A0 = np.array([[1.0, 0.5], [0.0, 2.0]])
        A1 = np.array([[-2.0, 0.5], [1.0, -3.0]])
        G = solve_G_mg1([A0, A1]).G
        np.testing.assert_allclose(G, np.linalg.solve(-A1, A0), atol=1e-14)
        np.testing.assert_allclose(G.sum(axis=1), 1.0, atol=1e-12)

    def test_r_measure_hand_values(self):
        A = scalars(2.0, -3.0, 1.0)
        B = scalars(2.0, -1.0, 1.0)
        measures = mg1_r_measure(solve_G_mg1(A).G, A, B)
        assert measures.Psi[0, 0] == pytest.approx(-2.0, abs=1e-10)
        assert measures.G1[0, 0] == pytest.approx(1.0, abs=1e-10)
        assert measures.Psi0[0, 0] == pytest.approx(0.0, abs=1e-10)
        assert measures.R[0][0, 0] == pytest.approx(0.5, abs=1e-10)
        assert measures.R0[0][0, 0] == pytest.approx(0.5, abs=1e-10)

    def test_stationary_agrees_with_censoring(self, model):
        spec = model("mg1")
        p = initial_vector("uniform:1", spec.layout)
        blocks = spec.structured_blocks(p)
        measures = mg1_r_measure(solve_G_mg1(blocks.A).G, blocks.A, blocks.B)
        gen = evaluate_generator(spec, p)
        assert np.max(np.abs(measures.Psi0 - censor(gen, 0).matrix)) <= 1e-6
        pi = mg1_stationary(measures, spec.layout)
        assert np.max(np.abs(pi.values - stationary_from_rg(rg_factorize(gen)).values)) <= 1e-6
        assert pi.values[0] == pytest.approx(0.5, abs=1e-8)

    def test_gim1_and_mg1_forms_of_mm1_agree(self, model):
        gim1, mg1 = model("gim1"), model("mg1")
        p = initial_vector("uniform:1", gim1.layout)
        a = solve_R_gim1(gim1.structured_blocks(p).A, gim1.structured_blocks(p).B, layout=gim1.layout).pi
        blocks = mg1.structured_blocks(p)
        b = mg1_stationary(mg1_r_measure(solve_G_mg1(blocks.A).G, blocks.A, blocks.B), mg1.layout)
        assert l1_distance(a, b) <= 1e-8


class TestMeanDrift:
    def test_scalar_mm1(self):
        drift = mean_drift(*scalars(1.0, -3.0, 2.0))
        assert drift.theta == (1.0,)
        assert (drift.up_rate, drift.down_rate, drift.stable) == (1.0, 2.0, True)

    def test_balanced_is_not_stable(self):
        drift = mean_drift(*scalars(1.0, -2.0, 1.0))
        assert drift.up_rate == drift.down_rate
        assert not drift.stable

    def test_two_phase(self):
        A0 = np.diag([1.0, 3.0])
        A2 = np.diag([4.0, 2.0])
        A1 = np.array([[-1.0, 1.0], [1.0, -1.0]]) - A0 - A2
        drift = mean_drift(A0, A1, A2)
        np.testing.assert_allclose(drift.theta, [0.5, 0.5], atol=1e-12)
        assert drift.up_rate == pytest.approx(2.0)
        assert drift.down_rate == pytest.approx(3.0)
        assert drift.stable

    def test_qbd_spec(self, model):
        spec = model("mm1qbd")
        drift = qbd_mean_drift(spec, initial_vector("geometric:0.5", spec.layout))
        assert drift.stable and drift.up_rate == pytest.approx(1.0) and drift.down_rate == pytest.approx(2.0)

    def test_qbd_spec_overloaded(self, model):
        spec = model("mm1qbd_overloaded")
        assert not qbd_mean_drift(spec, initial_vector("uniform:1", spec.layout)).stable

    def test_needs_qbd(self, model):
        spec = model("supermarket")
        with pytest.raises(ModelError):
            qbd_mean_drift(spec, initial_vector("uniform:1", spec.layout))

    def test_default_layout_for_bare_blocks(self):
        _, pi = solve_R_gim1(scalars(1.0, -3.0, 2.0), scalars(1.0, -1.0, 2.0))
        assert pi.layout == LevelPhaseLayout.uniform(50)
