import numpy as np
import pytest
from scipy import linalg

from src.errors import CensoringError, FactorizationError, StationarySolveError
from src.solvers.censoring import censor, reconstruct, rg_factorize, stationary_from_rg
from src.state_space import BlockGenerator, LevelPhaseLayout, ProbabilityVector, max_norm

from helpers import birth_death_spec, random_rates


TWO_STATE = BlockGenerator(LevelPhaseLayout((1, 1)), np.array([[-1.0, 1.0], [2.0, -2.0]]))


def mm1_generator(L: int) -> BlockGenerator:
    spec = birth_death_spec(1.0, 2.0, L)
    return spec.evaluate(ProbabilityVector(spec.layout, np.full(L + 1, 1.0 / (L + 1))))


def random_generator(rng: np.random.Generator) -> BlockGenerator:
    layout = LevelPhaseLayout(tuple(rng.integers(1, 4, size=rng.integers(2, 8))))
    return BlockGenerator.from_off_diagonal(layout, random_rates(rng, layout.dimension))


class TestCensor:
    def test_two_state_to_level_zero(self):
        np.testing.assert_allclose(censor(TWO_STATE, 0).matrix, [[0.0]], atol=1e-15)

    def test_mm1_to_level_zero(self):
        np.testing.assert_allclose(censor(mm1_generator(3), 0).matrix, [[0.0]], atol=1e-15)

    def test_one_elimination_step(self):
        censored = censor(mm1_generator(2), 1)
        np.testing.assert_allclose(censored.matrix, [[-1.0, 1.0], [1.0, -1.0]], atol=1e-14)

    def test_result_is_conservative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            gen = random_generator(rng)
            for n in range(gen.layout.truncation_level):
                censored = censor(gen, n)
                assert np.abs(censored.matrix.sum(axis=1)).max() <= 1e-10
                assert censored.layout.phase_counts == gen.layout.phase_counts[: n + 1]

    def test_level_out_of_range(self):
        with pytest.raises(CensoringError):
            censor(TWO_STATE, 1)

    def test_singular_top_block_names_level(self):
        # level 2 has no way out: its diagonal block is zero
        layout = LevelPhaseLayout.uniform(2)
        rates = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        with pytest.raises(CensoringError) as info:
            censor(BlockGenerator.from_off_diagonal(layout, rates), 0)
        assert info.value.level == 2


class TestRGFactorization:
    def test_two_state_factors(self):
        factors = rg_factorize(TWO_STATE)
        assert factors.Psi(1)[0, 0] == pytest.approx(-2.0)
        assert factors.R(0, 1)[0, 0] == pytest.approx(0.5)
        assert factors.G(1, 0)[0, 0] == pytest.approx(1.0)
        assert factors.Psi(0)[0, 0] == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(reconstruct(factors).matrix, TWO_STATE.matrix, atol=1e-14)

    def test_block_diagonal_has_no_coupling(self):
        layout = LevelPhaseLayout((2, 2))
        rates = np.zeros((4, 4))
        rates[0, 1] = rates[1, 0] = 1.0
        rates[2, 3] = 2.0
        rates[3, 2] = 3.0
        gen = BlockGenerator.from_off_diagonal(layout, rates)
        factors = rg_factorize(gen)
        assert not factors.R_U.any()
        assert not factors.G_L.any()
        np.testing.assert_array_equal(factors.Psi_D, gen.matrix)

    def test_mm1_R_away_from_boundary(self):
        factors = rg_factorize(mm1_generator(60))
        for k in range(5, 40):
            assert factors.R(k, k + 1)[0, 0] == pytest.approx(0.5, abs=1e-12)

    def test_reconstruction_on_random_generators(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            gen = random_generator(rng)
            factors = rg_factorize(gen)
            assert max_norm(reconstruct(factors).matrix, gen.matrix) <= 1e-8
            assert factors.R_U.min() >= 0.0
            assert factors.G_L.min() >= 0.0
            assert factors.G_L.sum(axis=1).max() <= 1.0 + 1e-10
            assert max_norm(factors.Psi(0), censor(gen, 0).matrix) <= 1e-10
            assert np.abs(factors.Psi(0).sum(axis=1)).max() <= 1e-8

    def test_singular_block(self):
        layout = LevelPhaseLayout.uniform(2)
        rates = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        with pytest.raises(FactorizationError):
            rg_factorize(BlockGenerator.from_off_diagonal(layout, rates))


class TestStationaryFromRG:
    def test_two_state(self):
        pi = stationary_from_rg(rg_factorize(TWO_STATE))
        np.testing.assert_allclose(pi.values, [2 / 3, 1 / 3], atol=1e-12)

    def test_symmetric(self):
        gen = BlockGenerator(LevelPhaseLayout((1, 1)), np.array([[-1.0, 1.0], [1.0, -1.0]]))
        np.testing.assert_allclose(stationary_from_rg(rg_factorize(gen)).values, [0.5, 0.5], atol=1e-12)

    def test_mm1_geometric_law(self):
        pi = stationary_from_rg(rg_factorize(mm1_generator(200)))
        k = np.arange(41)
        np.testing.assert_allclose(pi.values[:41], 0.5 * 0.5 ** k, atol=1e-8)

    def test_agrees_with_null_space_on_random_generators(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            gen = random_generator(rng)
            pi = stationary_from_rg(rg_factorize(gen))
            assert max_norm(pi.values @ gen.matrix) <= 1e-8
            null = linalg.null_space(gen.matrix.T)[:, 0]
            np.testing.assert_allclose(pi.values, null / null.sum(), atol=1e-8)

    def test_reducible_boundary(self):
        # two closed classes at level 0 leave Psi_0 with a two-dimensional null space
        layout = LevelPhaseLayout((2, 1))
        gen = BlockGenerator(layout, np.zeros((3, 3)))
        with pytest.raises(StationarySolveError):
            stationary_from_rg(rg_factorize(gen))
