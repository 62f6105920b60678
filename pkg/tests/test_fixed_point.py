import math

import numpy as np
import pytest

from src.errors import DomainError, ModelError
from src.loaders.files import FileLoader
from src.models.spec import spec_from_dict
from src.solvers.censoring import rg_factorize, stationary_from_rg
from src.solvers.fixed_point import (
    NAMED_RECIPE_SETS,
    algorithm_I,
    initial_vector,
    parse_recipe,
    recipe_set,
    residual_norm,
)
from src.state_space import LevelPhaseLayout, l1_distance, tail_masses
from src.transformers.trajectories import vector_frame

from helpers import supermarket_tails


LAYOUT = LevelPhaseLayout.uniform(9)


class TestRecipes:
    def test_uniform(self):
        np.testing.assert_allclose(initial_vector("uniform:4", LAYOUT).values[:5], [0.25, 0.25, 0.25, 0.25, 0.0])

    def test_geometric(self):
        p = initial_vector("geometric:0.5", LAYOUT)
        np.testing.assert_allclose(p.values[:4], [0.5, 0.25, 0.125, 0.0625])
        assert p.values[-1] == pytest.approx(0.5 ** 9)

    def test_poisson_folds_tail(self):
        p = initial_vector("poisson:1", LAYOUT)
        e = math.exp(-1.0)
        np.testing.assert_allclose(p.values[:4], [e, e, e / 2, e / 6], rtol=1e-12)
        assert p.values.sum() == pytest.approx(1.0, abs=1e-12)

    def test_ph2_matches_requested_mean(self):
        layout = LevelPhaseLayout.uniform(400)
        p = initial_vector("ph2:4,1.5", layout)
        assert np.dot(np.arange(401), p.level_masses()) == pytest.approx(4.0, rel=1e-9)

    def test_ph2_rejects_low_variability(self):
        with pytest.raises(DomainError):
            initial_vector("ph2:1,1.5", LAYOUT)

    def test_custom_level_masses_and_folding(self):
        p = initial_vector("custom:1,1,2", LevelPhaseLayout.uniform(1))
        np.testing.assert_allclose(p.values, [0.25, 0.75])

    def test_custom_per_state_on_phased_layout(self):
        p = initial_vector("custom:0.1,0.2,0.3,0.4", LevelPhaseLayout((2, 2)))
        np.testing.assert_allclose(p.values, [0.1, 0.2, 0.3, 0.4])

    def test_phases_share_level_mass(self):
        p = initial_vector("uniform:1", LevelPhaseLayout((2, 2)))
        np.testing.assert_allclose(p.values, [0.5, 0.5, 0.0, 0.0])

    def test_file_recipe_reads_written_vector(self, tmp_path):
        original = initial_vector("poisson:2", LAYOUT)
        path = FileLoader(str(tmp_path), meta={"seed": None}).write_frame("pi", vector_frame(original))
        again = initial_vector(f"file:{path}", LAYOUT)
        np.testing.assert_allclose(again.values, original.values, atol=1e-15)

    @pytest.mark.parametrize("text", ["gauss:1", "uniform", "geometric:1.5", "poisson:-1", "uniform:0", "ph2:1"])
    def test_invalid(self, text):
        with pytest.raises(DomainError):
            initial_vector(text, LAYOUT)

    def test_named_set(self):
        recipes = recipe_set("recipes:default20")
        assert len(recipes) == 20 == len(NAMED_RECIPE_SETS["default20"])
        assert {r.kind for r in recipes} == {"uniform", "geometric", "poisson", "ph2"}
        for r in recipes:
            assert initial_vector(r, LevelPhaseLayout.uniform(32)).values.sum() == pytest.approx(1.0, abs=1e-12)

    def test_explicit_set_and_labels(self):
        recipes = recipe_set("uniform:2; geometric:0.25")
        assert [r.label for r in recipes] == ["uniform:2", "geometric:0.25"]
        assert parse_recipe("file:pi.csv").path == "pi.csv"

    def test_unknown_named_set(self):
        with pytest.raises(DomainError):
            recipe_set("recipes:nope")


class TestAlgorithmI:
    def test_linear_converges_in_one_iteration(self, model):
        spec = model("linear2")
        report = algorithm_I(spec, initial_vector("custom:0.9,0.1", spec.layout))
        assert report.converged
        assert report.iterations == 1
        assert report.changes[1] < 1e-10
        np.testing.assert_allclose(report.pi.values, [0.5, 0.5], atol=1e-12)

    def test_start_at_fixed_point_counts_one_iteration(self, model):
        spec = model("linear2")
        report = algorithm_I(spec, initial_vector("uniform:2", spec.layout))
        assert report.converged
        assert report.iterations == 1
        assert len(report.changes) == 1

    def test_mm1_closed_form(self, model):
        spec = model("mm1")
        report = algorithm_I(spec, initial_vector("uniform:4", spec.layout))
        direct = stationary_from_rg(rg_factorize(spec.evaluate(report.pi)))
        assert report.converged and report.certified
        np.testing.assert_allclose(report.pi.values[:41], 0.5 * 0.5 ** np.arange(41), atol=1e-8)
        assert l1_distance(report.pi, direct) <= 1e-12
        assert not report.truncation_flag

    @pytest.mark.parametrize("init", ["uniform:4", "geometric:0.5", "poisson:1", "geometric:0.9", "poisson:3"])
    def test_mm1_independent_of_start_and_certified(self, model, init):
        spec = model("mm1")
        report = algorithm_I(spec, initial_vector(init, spec.layout))
        assert report.converged
        assert report.certificate.passed, report.certificate.reason
        np.testing.assert_allclose(report.pi.values[:41], 0.5 * 0.5 ** np.arange(41), atol=1e-8)

    def test_supermarket_tails(self, model):
        spec = model("supermarket")
        report = algorithm_I(spec, initial_vector("geometric:0.5", spec.layout))
        assert report.converged
        assert report.residual <= 1e-10
        expected = supermarket_tails(0.9, 2, 8)
        np.testing.assert_allclose(tail_masses(report.pi)[:9], expected, atol=1e-6)
        assert report.certified

    def test_structured_solver_agrees_with_rg(self, model):
        spec = model("mm1qbd")
        p0 = initial_vector("uniform:1", spec.layout)
        rg = algorithm_I(spec, p0)
        structured = algorithm_I(spec, p0, solver="structured")
        assert structured.converged and structured.solver == "structured"
        assert l1_distance(rg.pi, structured.pi) <= 1e-8

    def test_structured_mg1(self, model):
        spec = model("mg1")
        report = algorithm_I(spec, initial_vector("uniform:1", spec.layout), solver="structured")
        assert report.converged
        assert report.pi.values[0] == pytest.approx(0.5, abs=1e-8)

    def test_structured_needs_block_structure(self, model):
        spec = model("supermarket")
        with pytest.raises(ModelError):
            algorithm_I(spec, initial_vector("uniform:1", spec.layout), solver="structured")

    def test_overloaded_sets_truncation_flag(self, model):
        spec = model("mm1qbd_overloaded")
        report = algorithm_I(spec, initial_vector("uniform:1", spec.layout))
        assert report.converged
        assert report.truncation_flag
        assert report.boundary_mass > 0.4

    def test_solver_failure_reports_iteration(self, model):
        spec = model("mm1qbd_overloaded")
        report = algorithm_I(spec, initial_vector("uniform:1", spec.layout), solver="structured")
        assert not report.converged
        assert report.failed_iteration == 1
        assert report.error.startswith("InstabilityError")
        assert report.certificate is None

    def test_damping_falls_back_on_oscillation(self):
        # undamped map has slope -1.6 at the fixed point (0.2, 0.8) and settles on a 2-cycle
        spec = spec_from_dict({
            "family": "ExpressionBlocks", "levels": 1, "phases": 1,
            "params": {"rates": ["(0,1) -> (1,1) = 100*(1 - tail(1))^2", "(1,1) -> (0,1) = 1"]},
        })
        report = algorithm_I(spec, initial_vector("uniform:2", spec.layout))
        assert report.converged
        assert report.damping == 0.5
        np.testing.assert_allclose(report.pi.values, [0.2, 0.8], atol=1e-8)

    def test_explicit_damping(self, model):
        spec = model("linear2")
        report = algorithm_I(spec, initial_vector("custom:1,0", spec.layout), damping=0.5)
        assert report.converged
        assert report.iterations > 1
        assert residual_norm(spec, report.pi) <= 1e-10

    def test_max_iter_exhausted(self, model):
        spec = model("supermarket")
        report = algorithm_I(spec, initial_vector("uniform:1", spec.layout), max_iter=2)
        assert not report.converged
        assert report.iterations == 2
        assert len(report.changes) == 2

    @pytest.mark.parametrize("kwargs", [{"epsilon": 0.0}, {"damping": 1.5}, {"solver": "newton"}])
    def test_invalid_arguments(self, model, kwargs):
        spec = model("linear2")
        with pytest.raises(DomainError):
            algorithm_I(spec, initial_vector("uniform:1", spec.layout), **kwargs)

    def test_report_serializes(self, model):
        spec = model("linear2")
        data = algorithm_I(spec, initial_vector("uniform:1", spec.layout)).to_dict()
        assert data["converged"] is True
        assert data["certificate"]["passed"] is True
        assert data["solver"] == "rg"
