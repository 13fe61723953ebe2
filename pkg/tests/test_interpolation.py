import numpy as np
import pytest

from meshfree_filter.exceptions import DimensionError, InvalidSpecError
from meshfree_filter.interpolation import (
    KnnIndex,
    ShepardConfig,
    ShepardInterpolant,
    evaluate_density,
    knn_query,
    shepard_weights,
    shepard_weights_batch,
)


class TestShepardConfig:
    @pytest.mark.parametrize("dim,expected", [(1, 4), (2, 4), (3, 6), (6, 12)])
    def test_default_neighbors(self, dim, expected):
        assert ShepardConfig().resolve_neighbors(dim, 10_000) == expected

    def test_neighbors_capped_by_cloud(self):
        assert ShepardConfig(neighbors=50).resolve_neighbors(2, 7) == 7

    def test_rejects_unknown_mode(self):
        with pytest.raises(InvalidSpecError):
            ShepardConfig(weight_mode="gaussian")


class TestKnnQuery:
    def test_sorted_by_distance(self):
        index = KnnIndex(np.array([[0.0], [5.0], [1.0], [3.0]]))
        result = knn_query(index, np.array([0.9]), 3)
        assert [i for i, _ in result] == [2, 0, 3]
        np.testing.assert_allclose([d for _, d in result], [0.1, 0.9, 2.1])

    def test_tie_prefers_lower_index(self):
        index = KnnIndex(np.array([[1.0], [-1.0], [2.0]]))
        assert knn_query(index, np.array([0.0]), 1)[0][0] == 0

    def test_tie_prefers_lower_index_in_tree(self):
        index = KnnIndex(np.arange(300, dtype=float)[:, np.newaxis])
        result = knn_query(index, np.array([10.5]), 1)
        assert result[0][0] == 10
        result = knn_query(index, np.array([10.5]), 2)
        assert [i for i, _ in result] == [10, 11]

    def test_count_larger_than_cloud(self):
        with pytest.raises(DimensionError):
            KnnIndex(np.zeros((3, 2))).query(np.zeros(2), 4)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            KnnIndex(np.zeros((3, 2))).query(np.zeros(3), 1)

    def test_tree_matches_linear_scan(self):
        rng = np.random.default_rng(4)
        for trial in range(100):
            dim = 1 + trial % 6
            index = KnnIndex(rng.normal(size=(300, dim)))
            points = rng.normal(size=(5, dim))
            count = 1 + trial % 12
            tree_idx, tree_dist = index.query_batch(points, count)
            scan_idx, scan_dist = index._linear_scan(points, count)
            np.testing.assert_array_equal(tree_idx, scan_idx)
            np.testing.assert_allclose(tree_dist, scan_dist, rtol=0, atol=1e-12)


class TestShepardWeights:
    def test_inverse_distance(self):
        np.testing.assert_allclose(shepard_weights([1.0, 2.0], ShepardConfig()), [0.8, 0.2])

    def test_paper_literal(self):
        cfg = ShepardConfig(weight_mode="paper_literal")
        np.testing.assert_allclose(shepard_weights([1.0, 2.0], cfg), [1 / 3, 2 / 3])

    def test_exact_hit_is_one_hot(self):
        np.testing.assert_array_equal(shepard_weights([0.0, 1.0, 2.0], ShepardConfig()), [1.0, 0.0, 0.0])

    def test_partition_of_unity(self):
        rng = np.random.default_rng(5)
        distances = np.sort(rng.uniform(1e-6, 10.0, size=(100, 8)), axis=1)
        for mode in ("inverse_distance", "paper_literal"):
            weights = shepard_weights_batch(distances, mode)
            np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(weights >= 0)

    def test_rejects_negative_distance(self):
        with pytest.raises(InvalidSpecError):
            shepard_weights([-1.0, 1.0], ShepardConfig())


class TestShepardInterpolant:
    def test_node_exactness(self):
        rng = np.random.default_rng(6)
        nodes = rng.normal(size=(400, 3))
        values = rng.uniform(size=400)
        interpolant = ShepardInterpolant(nodes, values)
        np.testing.assert_array_equal(interpolant(nodes), values)

    def test_constant_values_reproduced(self):
        rng = np.random.default_rng(7)
        interpolant = ShepardInterpolant(rng.normal(size=(50, 2)), np.full(50, 0.02))
        np.testing.assert_allclose(interpolant(rng.normal(size=(30, 2))), 0.02, rtol=1e-12)

    def test_bounded_by_node_values(self):
        rng = np.random.default_rng(8)
        for mode in ("inverse_distance", "paper_literal"):
            values = rng.uniform(size=300)
            interpolant = ShepardInterpolant(rng.normal(size=(300, 2)), values, ShepardConfig(weight_mode=mode))
            out = interpolant(rng.normal(size=(200, 2)) * 2.0)
            assert np.all(out >= values.min() - 1e-12)
            assert np.all(out <= values.max() + 1e-12)

    def test_single_point_returns_scalar(self):
        nodes = np.array([[0.0], [1.0]])
        value = evaluate_density(nodes, np.array([1.0, 3.0]), None, np.array([0.25]))
        # weights proportional to d**-2: (1/0.0625, 1/0.5625) -> (0.9, 0.1)
        assert value == pytest.approx(0.9 * 1.0 + 0.1 * 3.0)

    def test_rejects_negative_values(self):
        with pytest.raises(InvalidSpecError):
            ShepardInterpolant(np.zeros((2, 1)) + [[0.0], [1.0]], np.array([0.5, -0.1]))

    def test_translation_equivariance(self):
        rng = np.random.default_rng(9)
        nodes = rng.normal(size=(300, 2))
        values = rng.uniform(size=300)
        points = rng.normal(size=(100, 2)) * 1.5
        shift = np.array([5.0, -3.0])
        plain = ShepardInterpolant(nodes, values)(points)
        moved = ShepardInterpolant(nodes + shift, values)(points + shift)
        np.testing.assert_allclose(moved, plain, rtol=0, atol=1e-12)

    def test_columns_share_weights(self):
        rng = np.random.default_rng(10)
        nodes = rng.normal(size=(300, 3))
        table = rng.uniform(size=(300, 2))
        points = rng.normal(size=(40, 3))
        both = ShepardInterpolant(nodes, table)(points)
        assert both.shape == (40, 2)
        first = ShepardInterpolant(nodes, table[:, 0])
        np.testing.assert_allclose(both[:, 0], first(points), rtol=1e-14)
        np.testing.assert_allclose(both[:, 1], first.with_values(table[:, 1])(points), rtol=1e-14)

    def test_duplicate_nodes_match_linear_scan(self):
        rng = np.random.default_rng(11)
        base = rng.normal(size=(100, 2))
        index = KnnIndex(np.vstack([base, base, base]))
        points = np.vstack([base[:10], rng.normal(size=(20, 2))])
        tree_idx, tree_dist = index.query_batch(points, 4)
        scan_idx, scan_dist = index._linear_scan(points, 4)
        np.testing.assert_array_equal(tree_idx, scan_idx)
        np.testing.assert_allclose(tree_dist, scan_dist, rtol=0, atol=1e-12)


class TestEvaluateDensity:
    def test_uses_supplied_index(self):
        nodes = np.array([[0.0], [1.0]])
        index = KnnIndex(nodes)
        assert evaluate_density(nodes, np.array([2.0, 4.0]), index, np.array([0.0])) == pytest.approx(2.0)

    def test_rejects_index_over_other_nodes(self):
        index = KnnIndex(np.array([[0.0], [1.0]]))
        with pytest.raises(InvalidSpecError):
            evaluate_density(np.array([[0.0], [2.0]]), np.array([1.0, 1.0]), index, np.array([0.5]))
