import math

import numpy as np
import numpy.testing as npt
import pytest

from core import ndauto as nd
from core.errors import ConfigurationError, DimensionError
from core.ndauto import Tensor, grad_check
from core.routing import (RouterWeights, aux_stats, bucket_sizes, combine, dispatch, route,
                          routing_margin)


def _router(rows):
    return RouterWeights(Tensor(np.asarray(rows, dtype=np.float64)))


def _random_case(seed, t=6, d=5, n=4, k=2, min_margin=1e-3):
    """Random inputs whose top-k selection is stable under small perturbations."""
    for s in range(seed, seed + 100):
        rng = np.random.default_rng(s)
        x = Tensor(rng.normal(size=(t, d)))
        w = RouterWeights(Tensor(rng.normal(size=(n, d))))
        if routing_margin(route(x, w, k)) > min_margin:
            return rng, x, w
    raise AssertionError("no tie-free case found")


class TestRoute:
    def test_hand_example(self):
        d = route(Tensor([[1.0]]), _router([[2.0], [1.0], [0.0], [-1.0]]), k=2)
        npt.assert_array_equal(d.indices, [[0, 1]])
        npt.assert_allclose(d.gates.data, [[0.731059, 0.268941]], atol=1e-6)

    def test_ties_go_to_lowest_index(self):
        d = route(Tensor([[1.0, -2.0]]), _router(np.zeros((4, 2))), k=2)
        npt.assert_array_equal(d.indices, [[0, 1]])
        npt.assert_allclose(d.gates.data, [[0.5, 0.5]])

    def test_k_equal_n_is_full_softmax(self, rng):
        x = Tensor(rng.normal(size=(5, 3)))
        w = RouterWeights(Tensor(rng.normal(size=(4, 3))))
        d = route(x, w, k=4)
        npt.assert_allclose(d.dense_gates(), nd.row_softmax(d.logits).data, atol=1e-12)

    @pytest.mark.parametrize("k", [0, 5])
    def test_k_out_of_range(self, k):
        with pytest.raises(ConfigurationError):
            route(Tensor(np.ones((2, 3))), _router(np.ones((4, 3))), k=k)

    def test_gate_rows_and_indices(self, rng):
        for _ in range(10):
            d = route(Tensor(rng.normal(size=(9, 4))), RouterWeights(Tensor(rng.normal(size=(6, 4)))), k=3)
            npt.assert_allclose(d.gates.data.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(d.gates.data >= 0)
            assert all(len(set(row)) == 3 for row in d.indices.tolist())
            assert np.all((d.indices >= 0) & (d.indices < 6))
            assert np.all(np.count_nonzero(d.dense_gates(), axis=1) == 3)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(7, 3))
        w = rng.normal(size=(4, 3))
        c = 3.5
        # an all-ones feature with router column c adds c to every logit of every token
        x_shift = np.hstack([x, np.ones((7, 1))])
        w_shift = np.hstack([w, np.full((4, 1), c)])
        base = route(Tensor(x), RouterWeights(Tensor(w)), k=2)
        shifted = route(Tensor(x_shift), RouterWeights(Tensor(w_shift)), k=2)
        npt.assert_array_equal(base.indices, shifted.indices)
        npt.assert_allclose(base.gates.data, shifted.gates.data, atol=1e-9)

    def test_router_gradient_through_selected_softmax(self):
        _, x, w = _random_case(0)
        d = route(x, w, 2)
        outputs = {b.expert: b.rows * float(b.expert + 1) for b in dispatch(x, d) if b.token_index.size}
        weights = np.random.default_rng(7).normal(size=x.shape)

        def f(w_rtr):
            dec = route(x, RouterWeights(w_rtr), 2)
            return (combine(outputs, dec) * Tensor(weights)).sum()

        assert grad_check(f, w.w_rtr) <= 1e-5


class TestMargin:
    def test_hand_value(self):
        d = route(Tensor([[1.0]]), _router([[2.0], [1.5], [0.0]]), k=1)
        assert routing_margin(d) == pytest.approx(0.5)

    def test_k_equal_n(self):
        d = route(Tensor([[1.0]]), _router([[2.0], [1.5]]), k=2)
        assert math.isinf(routing_margin(d))


class TestDispatch:
    def test_everyone_selects_first_two(self):
        x = Tensor(np.ones((3, 1)))
        buckets = dispatch(x, route(x, _router([[3.0], [2.0], [1.0], [0.0]]), k=2))
        assert bucket_sizes(buckets) == {0: 3, 1: 3, 2: 0, 3: 0}
        npt.assert_array_equal(buckets[0].token_index, [0, 1, 2])

    def test_skewed_selection(self):
        x = Tensor(np.array([[2.0, 1.0], [1.0, 2.0], [2.0, 2.0], [0.0, 2.0]]))
        w = _router([[1.0, 0.0], [0.0, 1.0], [10.0, 10.0], [-1.0, 0.0]])
        buckets = dispatch(x, route(x, w, k=2))
        assert bucket_sizes(buckets)[2] == 4

    def test_sizes_sum_to_tk(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            t, n = int(rng.integers(1, 12)), int(rng.integers(1, 7))
            k = int(rng.integers(1, n + 1))
            x = Tensor(rng.normal(size=(t, 3)))
            buckets = dispatch(x, route(x, RouterWeights(Tensor(rng.normal(size=(n, 3)))), k))
            assert sum(bucket_sizes(buckets).values()) == t * k

    def test_each_pair_once_in_ascending_order(self, rng):
        x = Tensor(rng.normal(size=(10, 4)))
        d = route(x, RouterWeights(Tensor(rng.normal(size=(5, 4)))), k=2)
        seen = set()
        for b in dispatch(x, d):
            assert np.all(np.diff(b.token_index) > 0)
            npt.assert_array_equal(b.rows.data, x.data[b.token_index])
            seen.update((int(t), b.expert) for t in b.token_index)
        assert seen == {(t, int(e)) for t in range(10) for e in d.indices[t]}

    def test_token_count_mismatch(self):
        x = Tensor(np.ones((3, 2)))
        d = route(x, _router(np.ones((2, 2))), k=1)
        with pytest.raises(DimensionError):
            dispatch(Tensor(np.ones((4, 2))), d)


class TestCombine:
    def test_identity_experts(self, rng):
        x = Tensor(rng.normal(size=(8, 3)))
        d = route(x, RouterWeights(Tensor(rng.normal(size=(4, 3)))), k=2)
        outputs = {b.expert: b.rows for b in dispatch(x, d)}
        npt.assert_allclose(combine(outputs, d).data, x.data, atol=1e-12)

    def test_zero_expert(self):
        x = Tensor([[1.0, 2.0]])
        d = route(x, _router([[1.0, 0.0], [0.0, 0.25]]), k=2)
        g = d.gates.data[0]
        assert list(d.indices[0]) == [0, 1]
        outputs = {0: Tensor(np.zeros((1, 2))), 1: Tensor([[4.0, 6.0]])}
        npt.assert_allclose(combine(outputs, d).data, [[4.0 * g[1], 6.0 * g[1]]], atol=1e-15)
        npt.assert_allclose(g[1], 1.0 - g[0])

    def test_sparse_matches_dense(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(size=(9, 4)))
            mats = [rng.normal(size=(4, 4)) for _ in range(5)]
            d = route(x, RouterWeights(Tensor(rng.normal(size=(5, 4)))), k=2)
            outputs = {b.expert: nd.matmul(b.rows, Tensor(mats[b.expert])) for b in dispatch(x, d)}
            dense = sum(d.dense_gates()[:, [e]] * (x.data @ mats[e]) for e in range(5))
            npt.assert_allclose(combine(outputs, d).data, dense, rtol=1e-10, atol=1e-12)

    def test_bucket_mismatch(self):
        x = Tensor(np.ones((3, 2)))
        d = route(x, _router([[1.0, 1.0], [0.0, 0.0]]), k=1)
        with pytest.raises(DimensionError):
            combine({0: Tensor(np.ones((2, 2)))}, d)
        with pytest.raises(DimensionError):
            combine({}, d)


class TestAuxStats:
    def test_fixed_selection(self):
        x = Tensor(np.ones((4, 1)))
        stats = aux_stats(route(x, _router([[3.0], [2.0], [1.0], [0.0]]), k=2))
        npt.assert_array_equal(stats.f.data, [0.5, 0.5, 0.0, 0.0])

    def test_uniform_logits(self):
        stats = aux_stats(route(Tensor(np.ones((3, 2))), _router(np.zeros((4, 2))), k=1))
        npt.assert_allclose(stats.p.data, np.full(4, 0.25))

    def test_sums(self, rng):
        for _ in range(10):
            x = Tensor(rng.normal(size=(11, 3)))
            stats = aux_stats(route(x, RouterWeights(Tensor(rng.normal(size=(5, 3)))), k=2))
            assert stats.f.data.sum() == pytest.approx(1.0, abs=1e-12)
            assert stats.p.data.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all((stats.p.data >= 0) & (stats.p.data <= 1))
