import math

import numpy as np
import numpy.testing as npt
import pytest

from core.errors import ConfigurationError, DataError, DegenerateBatchError, DimensionError, RangeError
from core.ndauto import Tape, Tensor, backward, grad_check
from core.objectives import (LossWeights, PreferenceBatch, aux_loss_means, balance_loss, batch_sequence_logprobs,
                             dpo_loss, implicit_reward_margin, lm_cross_entropy, sequence_logprob, total_pretrain_loss,
                             z_loss)
from core.routing import LayerAuxStats, RouterWeights, aux_stats, route, routing_margin


def _stats(f, p):
    return LayerAuxStats(f=Tensor(np.asarray(f, dtype=np.float64)), p=Tensor(np.asarray(p, dtype=np.float64)))


def _pref(pc, pr, rc, rr, eta=0.1):
    return PreferenceBatch(*(Tensor(np.atleast_1d(np.asarray(a, dtype=np.float64))) for a in (pc, pr, rc, rr)), eta=eta)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = lm_cross_entropy(Tensor(np.zeros((5, 8))), np.arange(5))
        assert loss.item() == pytest.approx(math.log(8), abs=1e-12)

    def test_certain_prediction(self):
        logits = np.zeros((3, 8))
        targets = np.array([1, 4, 7])
        logits[np.arange(3), targets] = 1e4
        assert lm_cross_entropy(Tensor(logits), targets).item() == pytest.approx(0.0, abs=1e-12)

    def test_mask_equals_loss_on_subset(self, rng):
        logits = rng.normal(size=(6, 5))
        targets = rng.integers(0, 5, size=6)
        mask = np.array([1, 0, 1, 0, 1, 0])
        keep = mask.astype(bool)
        masked = lm_cross_entropy(Tensor(logits), targets, mask).item()
        subset = lm_cross_entropy(Tensor(logits[keep]), targets[keep]).item()
        assert masked == subset

    def test_masked_targets_are_ignored(self, rng):
        logits = Tensor(rng.normal(size=(6, 5)))
        targets = rng.integers(0, 5, size=6)
        mask = np.array([0, 0, 0, 1, 1, 1])
        corrupted = targets.copy()
        corrupted[:3] = (corrupted[:3] + 1) % 5
        assert lm_cross_entropy(logits, targets, mask).item() == lm_cross_entropy(logits, corrupted, mask).item()

    def test_batched_logits(self, rng):
        logits = rng.normal(size=(2, 3, 4))
        targets = rng.integers(0, 4, size=(2, 3))
        flat = lm_cross_entropy(Tensor(logits.reshape(6, 4)), targets.reshape(6)).item()
        assert lm_cross_entropy(Tensor(logits), targets).item() == pytest.approx(flat, abs=1e-15)

    def test_empty_mask(self):
        with pytest.raises(DegenerateBatchError):
            lm_cross_entropy(Tensor(np.zeros((3, 4))), np.zeros(3, dtype=int), np.zeros(3))

    def test_target_out_of_range(self):
        with pytest.raises(RangeError):
            lm_cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 4]))

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            lm_cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 1, 2]))

    def test_gradient(self, rng):
        targets = rng.integers(0, 6, size=4)
        mask = np.array([1, 1, 0, 1])
        assert grad_check(lambda t: lm_cross_entropy(t, targets, mask), Tensor(rng.normal(size=(4, 6)))) <= 1e-6


class TestSequenceLogprob:
    def test_uniform(self):
        mask = np.array([0, 1, 1, 1])
        lp = sequence_logprob(Tensor(np.zeros((4, 10))), np.zeros(4, dtype=int), mask).item()
        assert lp == pytest.approx(-3 * math.log(10), abs=1e-12)

    def test_relation_to_cross_entropy(self, rng):
        logits = Tensor(rng.normal(size=(7, 5)))
        tokens = rng.integers(0, 5, size=7)
        mask = np.array([0, 0, 1, 1, 1, 0, 1])
        lp = sequence_logprob(logits, tokens, mask).item()
        ce = lm_cross_entropy(logits, tokens, mask).item()
        assert lp == pytest.approx(-4 * ce, rel=1e-14)

    def test_certain(self):
        logits = np.zeros((3, 4))
        logits[np.arange(3), [2, 2, 1]] = 1e4
        assert sequence_logprob(Tensor(logits), np.array([2, 2, 1]), np.ones(3)).item() == pytest.approx(0.0, abs=1e-12)

    def test_batch_matches_per_row(self, rng):
        logits = rng.normal(size=(3, 5, 6))
        tokens = rng.integers(0, 6, size=(3, 5))
        mask = np.array([[0, 1, 1, 0, 0], [1, 1, 1, 1, 1], [0, 0, 0, 0, 1]])
        batched = batch_sequence_logprobs(Tensor(logits), tokens, mask).data
        for b in range(3):
            single = sequence_logprob(Tensor(logits[b]), tokens[b], mask[b]).item()
            assert batched[b] == pytest.approx(single, rel=1e-12)

    def test_batch_row_without_mask(self):
        mask = np.array([[1, 1], [0, 0]])
        with pytest.raises(DegenerateBatchError):
            batch_sequence_logprobs(Tensor(np.zeros((2, 2, 3))), np.zeros((2, 2), dtype=int), mask)


class TestBalanceLoss:
    @pytest.mark.parametrize("n", [1, 2, 4, 8])
    def test_uniform(self, n):
        assert balance_loss(_stats(np.full(n, 1 / n), np.full(n, 1 / n))).item() == pytest.approx(1.0, abs=1e-15)

    def test_collapse(self):
        assert balance_loss(_stats([1, 0, 0, 0], [1, 0, 0, 0])).item() == 4.0

    def test_hand_value(self):
        assert balance_loss(_stats([0.75, 0.25], [0.6, 0.4])).item() == pytest.approx(1.1, abs=1e-15)

    def test_permutation_invariant(self, rng):
        f, p = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        perm = rng.permutation(5)
        a = balance_loss(_stats(f, p)).item()
        assert balance_loss(_stats(f[perm], p[perm])).item() == pytest.approx(a, rel=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            balance_loss(_stats([0.5, 0.5], [0.2, 0.3, 0.5]))

    def test_gradient_flows_through_p_only(self):
        tape = Tape()
        f = tape.watch(Tensor([0.75, 0.25]))
        p = tape.watch(Tensor([0.6, 0.4]))
        backward(balance_loss(LayerAuxStats(f=f, p=p)))
        npt.assert_array_equal(f.grad, [0.0, 0.0])
        npt.assert_allclose(p.grad, [1.5, 0.5])
        tape.release()


class TestZLoss:
    def test_zero_logits(self):
        assert z_loss(Tensor(np.zeros((1, 8)))).item() == pytest.approx(math.log(8) ** 2, abs=1e-12)

    def test_single_expert(self):
        assert z_loss(Tensor([[3.5]])).item() == pytest.approx(3.5 ** 2, abs=1e-12)

    def test_two_experts(self):
        assert z_loss(Tensor([[0.0, 0.0]])).item() == pytest.approx(math.log(2) ** 2, abs=1e-12)

    def test_large_logits_are_stable(self):
        assert z_loss(Tensor([[1000.0, 1000.0]])).item() == pytest.approx((1000 + math.log(2)) ** 2, rel=1e-12)

    def test_non_negative(self, rng):
        for _ in range(20):
            assert z_loss(Tensor(rng.normal(scale=3, size=(4, 5)))).item() >= 0

    def test_gradient(self, rng):
        assert grad_check(z_loss, Tensor(rng.normal(size=(3, 4)))) <= 1e-6


class TestTotalLoss:
    def test_combined_value(self):
        # one router with balance loss 1.0 and z-loss 4.0: uniform f, p and a single logit of 2
        stats = _stats([1.0], [1.0])
        total = total_pretrain_loss(Tensor(2.0), [stats], [Tensor([[2.0]])], LossWeights(0.01, 0.001))
        assert total.item() == pytest.approx(2.014, abs=1e-12)

    def test_zero_weights(self, rng):
        d = route(Tensor(rng.normal(size=(5, 3))), RouterWeights(Tensor(rng.normal(size=(4, 3)))), 2)
        lm = Tensor(1.2345)
        assert total_pretrain_loss(lm, [aux_stats(d)], [d.logits], LossWeights(0.0, 0.0)).item() == 1.2345

    def test_linear_in_weights(self, rng):
        d = route(Tensor(rng.normal(size=(5, 3))), RouterWeights(Tensor(rng.normal(size=(4, 3)))), 2)
        stats, logits = [aux_stats(d)] * 2, [d.logits] * 2
        mean_b, mean_z = (t.item() for t in aux_loss_means(stats, logits))
        for alpha, beta in [(0.0, 0.0), (0.01, 0.001), (3.0, 0.5)]:
            total = total_pretrain_loss(Tensor(0.0), stats, logits, LossWeights(alpha, beta)).item()
            assert total == pytest.approx(alpha * mean_b + beta * mean_z, rel=1e-14, abs=1e-15)

    def test_mean_over_routers(self):
        a, b = _stats([1.0, 0.0], [1.0, 0.0]), _stats([0.5, 0.5], [0.5, 0.5])
        mean_b, _ = aux_loss_means([a, b], [Tensor([[0.0, 0.0]])] * 2)
        assert mean_b.item() == pytest.approx(1.5)

    def test_router_count_mismatch(self):
        with pytest.raises(ConfigurationError):
            total_pretrain_loss(Tensor(1.0), [], [], LossWeights())
        with pytest.raises(ConfigurationError):
            aux_loss_means([_stats([1.0], [1.0])], [])

    def test_negative_weights(self):
        with pytest.raises(ConfigurationError):
            LossWeights(alpha=-1.0)

    def test_router_gradient(self):
        for s in range(100):
            rng = np.random.default_rng(s)
            x = Tensor(rng.normal(size=(6, 4)))
            w = Tensor(rng.normal(size=(4, 4)))
            if routing_margin(route(x, RouterWeights(w), 2)) > 1e-3:
                break

        def f(t):
            d = route(x, RouterWeights(t), 2)
            return total_pretrain_loss(Tensor(0.5), [aux_stats(d)], [d.logits], LossWeights(0.3, 0.2))

        assert grad_check(f, w) <= 1e-5


class TestDpo:
    def test_policy_equals_reference(self, rng):
        lp = -rng.uniform(1, 10, size=(2, 6))
        batch = _pref(lp[0], lp[1], lp[0], lp[1])
        assert dpo_loss(batch).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_hand_value(self):
        batch = _pref(-1.0 + math.log(2), -2.0, -1.0, -2.0, eta=1.0)
        assert dpo_loss(batch).item() == pytest.approx(-math.log(2 / 3), abs=1e-12)
        assert implicit_reward_margin(batch).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_zero_eta(self, rng):
        lp = -rng.uniform(1, 10, size=(4, 3))
        assert dpo_loss(_pref(*lp, eta=0.0)).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_monotone(self, rng):
        lp = -rng.uniform(1, 10, size=(4, 3))
        base = dpo_loss(_pref(*lp, eta=0.5)).item()
        more_chosen = lp.copy()
        more_chosen[0] += 0.1
        more_rejected = lp.copy()
        more_rejected[1] += 0.1
        assert dpo_loss(_pref(*more_chosen, eta=0.5)).item() < base
        assert dpo_loss(_pref(*more_rejected, eta=0.5)).item() > base

    def test_gradient(self, rng):
        lp = -rng.uniform(1, 10, size=(4, 5))
        rc, rr = Tensor(lp[2]), Tensor(lp[3])
        f_chosen = lambda t: dpo_loss(PreferenceBatch(t, Tensor(lp[1]), rc, rr, eta=0.7))
        f_rejected = lambda t: dpo_loss(PreferenceBatch(Tensor(lp[0]), t, rc, rr, eta=0.7))
        assert grad_check(f_chosen, Tensor(lp[0])) <= 1e-6
        assert grad_check(f_rejected, Tensor(lp[1])) <= 1e-6

    def test_reference_carries_no_gradient(self, rng):
        lp = -rng.uniform(1, 10, size=(4, 3))
        tape = Tape()
        fields = [tape.watch(Tensor(row)) for row in lp]
        backward(dpo_loss(PreferenceBatch(*fields, eta=0.3)))
        npt.assert_array_equal(fields[2].grad, 0.0)
        npt.assert_array_equal(fields[3].grad, 0.0)
        assert np.all(fields[0].grad < 0) and np.all(fields[1].grad > 0)
        tape.release()

    def test_validation(self):
        with pytest.raises(DegenerateBatchError):
            dpo_loss(_pref(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0)))
        with pytest.raises(DimensionError):
            dpo_loss(_pref([-1.0, -2.0], [-1.0], [-1.0], [-1.0]))
        with pytest.raises(DataError):
            dpo_loss(_pref([0.5], [-1.0], [-1.0], [-1.0]))
        with pytest.raises(ConfigurationError):
            dpo_loss(_pref([-1.0], [-1.0], [-1.0], [-1.0], eta=-0.1))
