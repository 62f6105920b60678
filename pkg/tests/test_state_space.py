import math

import numpy as np
import pytest

from src.errors import DomainError, LayoutError
from src.state_space import (
    BlockGenerator,
    LevelPhaseLayout,
    ProbabilityVector,
    flatten_index,
    l1_distance,
    relative_entropy,
    tail_mass,
    tail_masses,
    unflatten_index,
)

from helpers import vector


class TestLayout:
    def test_flatten_index_examples(self):
        assert flatten_index(LevelPhaseLayout((1, 1, 1)), (0, 1)) == 0
        assert flatten_index(LevelPhaseLayout((2, 3)), (1, 2)) == 3
        assert flatten_index(LevelPhaseLayout((2, 3)), (1, 3)) == 4

    @pytest.mark.parametrize("state", [(2, 1), (-1, 1), (0, 0), (0, 3)])
    def test_flatten_index_out_of_range(self, state):
        with pytest.raises(LayoutError):
            flatten_index(LevelPhaseLayout((2, 3)), state)

    def test_flatten_round_trip_on_random_layouts(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            layout = LevelPhaseLayout(tuple(rng.integers(1, 5, size=rng.integers(2, 7))))
            indices = [flatten_index(layout, s) for s in layout.states()]
            assert indices == list(range(layout.dimension))
            assert all(unflatten_index(layout, i) == s for i, s in zip(indices, layout.states()))

    def test_invalid_layouts(self):
        with pytest.raises(LayoutError):
            LevelPhaseLayout((2,))
        with pytest.raises(LayoutError):
            LevelPhaseLayout((1, 0, 1))

    def test_dimension_and_labels(self):
        layout = LevelPhaseLayout((2, 3, 1))
        assert layout.dimension == 6
        assert layout.truncation_level == 2
        assert layout.state_labels()[:3] == ["p_0_1", "p_0_2", "p_1_1"]


class TestProbabilityVector:
    def test_rejects_unnormalized(self):
        with pytest.raises(DomainError):
            vector(0.5, 0.4)

    def test_rejects_negative(self):
        with pytest.raises(DomainError):
            vector(1.2, -0.2)

    def test_project_clips_and_rescales(self):
        p, correction = ProbabilityVector.project(LevelPhaseLayout.uniform(2), np.array([0.5, -1e-12, 0.5]))
        assert p.values.min() >= 0.0
        assert p.values.sum() == pytest.approx(1.0, abs=1e-12)
        assert correction < 1e-11

    def test_values_are_read_only(self):
        p = vector(0.5, 0.5)
        with pytest.raises(ValueError):
            p.values[0] = 1.0


class TestTailMass:
    def test_examples(self):
        assert tail_mass(vector(1.0, 0.0, 0.0), 0) == 1.0
        assert tail_mass(vector(0.5, 0.25, 0.25), 1) == pytest.approx(0.5)
        assert tail_mass(vector(0.5, 0.25, 0.25), 3) == 0.0

    def test_out_of_range(self):
        with pytest.raises(LayoutError):
            tail_mass(vector(0.5, 0.5), 3)

    def test_telescoping_and_monotone(self):
        rng = np.random.default_rng(0)
        layout = LevelPhaseLayout((2, 1, 3, 2))
        for _ in range(20):
            p = ProbabilityVector(layout, rng.dirichlet(np.ones(layout.dimension)))
            tails = tail_masses(p)
            assert np.all(np.diff(tails) <= 1e-15)
            for k in range(layout.levels):
                assert tail_mass(p, k) - tail_mass(p, k + 1) == pytest.approx(p.block(k).sum(), abs=1e-12)
                assert tails[k] == pytest.approx(tail_mass(p, k), abs=1e-12)


class TestDistances:
    def test_relative_entropy_examples(self):
        assert relative_entropy(vector(0.5, 0.5), vector(0.5, 0.5)) == 0.0
        expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        assert relative_entropy(vector(0.5, 0.5), vector(0.25, 0.75)) == pytest.approx(expected, abs=1e-12)
        assert relative_entropy(vector(1.0, 0.0), vector(0.5, 0.5)) == pytest.approx(math.log(2), abs=1e-12)

    def test_relative_entropy_support_violation(self):
        with pytest.raises(DomainError):
            relative_entropy(vector(0.5, 0.5), vector(1.0, 0.0))

    def test_l1_examples(self):
        assert l1_distance(vector(0.3, 0.7), vector(0.3, 0.7)) == 0.0
        assert l1_distance(vector(1.0, 0.0), vector(0.0, 1.0)) == 2.0
        assert l1_distance(vector(0.5, 0.5), vector(0.25, 0.75)) == pytest.approx(0.5)

    def test_layout_mismatch(self):
        with pytest.raises(LayoutError):
            l1_distance(vector(0.5, 0.5), vector(0.5, 0.25, 0.25))

    def test_entropy_zero_iff_equal_on_random_samples(self):
        rng = np.random.default_rng(11)
        layout = LevelPhaseLayout.uniform(4, 2)
        for _ in range(50):
            p = ProbabilityVector(layout, rng.dirichlet(np.ones(layout.dimension)))
            q = ProbabilityVector(layout, rng.dirichlet(np.ones(layout.dimension)))
            assert relative_entropy(p, q) > 0.0
            assert relative_entropy(p, p) == 0.0
            assert 0.0 < l1_distance(p, q) <= 2.0


class TestBlockGenerator:
    def test_from_off_diagonal_derives_diagonal(self):
        gen = BlockGenerator.from_off_diagonal(LevelPhaseLayout((1, 1)), np.array([[5.0, 1.0], [2.0, 7.0]]))
        np.testing.assert_array_equal(gen.matrix, [[-1.0, 1.0], [2.0, -2.0]])

    def test_rejects_nonconservative(self):
        with pytest.raises(DomainError):
            BlockGenerator(LevelPhaseLayout((1, 1)), np.array([[-1.0, 1.0], [2.0, -1.0]]))

    def test_rejects_negative_off_diagonal(self):
        with pytest.raises(DomainError):
            BlockGenerator(LevelPhaseLayout((1, 1)), np.array([[1.0, -1.0], [2.0, -2.0]]))

    def test_block_access(self):
        layout = LevelPhaseLayout((2, 1))
        gen = BlockGenerator.from_off_diagonal(layout, np.array([[0, 1, 2], [3, 0, 4], [5, 6, 0]], dtype=float))
        np.testing.assert_array_equal(gen.block(0, 1), [[2.0], [4.0]])
        assert gen.block(1, 0).shape == (1, 2)
