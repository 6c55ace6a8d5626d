"""
Training objectives: LM cross-entropy, balancing loss, router z-loss, their
weighted sum, the response-masked SFT likelihood and the DPO preference loss.

DPO's KL-constrained optimum and implied reward are not separate functions:
substituting the reward into the Bradley-Terry likelihood yields dpo_loss
directly, with the reference (SFT) policy playing the baseline.
"""
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from core import ndauto as nd
from core.errors import ConfigurationError, DataError, DegenerateBatchError, DimensionError, RangeError
from core.ndauto import Tensor
from core.routing import LayerAuxStats

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    alpha: float = 0.01   # balancing loss
    beta: float = 0.001   # z-loss

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError(f"loss weights must be >= 0, got alpha={self.alpha}, beta={self.beta}")


@dataclass
class PreferenceBatch:
    policy_chosen: Tensor      # [P] log pi(y_w | x)
    policy_rejected: Tensor    # [P] log pi(y_l | x)
    reference_chosen: Tensor   # [P] log pi_ref(y_w | x), constant
    reference_rejected: Tensor # [P] log pi_ref(y_l | x), constant
    eta: float = 0.1

    def __len__(self) -> int:
        return self.policy_chosen.shape[0] if self.policy_chosen.ndim else 1

    def validate(self) -> None:
        if self.eta < 0:
            raise ConfigurationError(f"eta must be >= 0, got {self.eta}")
        fields = (self.policy_chosen, self.policy_rejected, self.reference_chosen, self.reference_rejected)
        shapes = {f.shape for f in fields}
        if len(shapes) != 1:
            raise DimensionError(f"preference batch fields disagree on shape: {sorted(shapes)}")
        if self.policy_chosen.size == 0:
            raise DegenerateBatchError("preference batch is empty")
        for f in fields:
            if np.any(f.data > 1e-9):
                raise DataError("log-probabilities must be <= 0")


def _selected_logprobs(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tuple[Tensor, int]:
    """log softmax(logits)[target] at the masked positions, gathered in position order."""
    v = logits.shape[-1]
    targets = np.asarray(targets).reshape(-1)
    mask = np.asarray(mask).reshape(-1)
    flat = logits.reshape(-1, v)
    if flat.shape[0] != targets.size or targets.size != mask.size:
        raise DimensionError(f"logits {logits.shape}, targets {targets.size}, mask {mask.size} disagree")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise RangeError(f"target ids must lie in [0, {v}), got max {targets.max()}")
    rows = np.nonzero(mask)[0]
    if rows.size == 0:
        raise DegenerateBatchError("loss mask selects no positions")
    picked = nd.take(nd.log_softmax(nd.take(flat, rows)), (np.arange(rows.size), targets[rows]))
    return picked, rows.size


def lm_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray = None) -> Tensor:
    """Mean negative log-likelihood over masked positions; logits [..., V]."""
    if mask is None:
        mask = np.ones(np.asarray(targets).size, dtype=np.int64)
    picked, n = _selected_logprobs(logits, targets, mask)
    return -picked.sum() * (1.0 / n)


def sequence_logprob(logits: Tensor, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
    """Summed log-probability of ``tokens`` over masked positions."""
    picked, _ = _selected_logprobs(logits, tokens, mask)
    return picked.sum()


def batch_sequence_logprobs(logits: Tensor, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
    """One summed log-probability per row of a padded [B, T, V] batch."""
    b, t, v = logits.shape
    tokens = np.asarray(tokens)
    mask = np.asarray(mask)
    if tokens.shape != (b, t) or mask.shape != (b, t):
        raise DimensionError(f"tokens {tokens.shape} / mask {mask.shape} do not match logits {logits.shape}")
    if not mask.any(axis=1).all():
        raise DegenerateBatchError("every row needs at least one masked position")
    if tokens.min() < 0 or tokens.max() >= v:
        raise RangeError(f"token ids must lie in [0, {v})")
    logp = nd.log_softmax(logits)
    picked = nd.take(logp, (np.arange(b)[:, None], np.arange(t)[None, :], tokens))
    return (picked * mask.astype(logits.dtype)).sum(axis=1)


def balance_loss(stats: LayerAuxStats) -> Tensor:
    """N * sum_i f_i * P_i; f is a constant count so only P carries gradient."""
    n = stats.f.shape[0]
    if stats.p.shape != (n,):
        raise DimensionError(f"f has {n} entries, p has shape {stats.p.shape}")
    return (Tensor(stats.f.data) * stats.p).sum() * float(n)


def z_loss(logits: Tensor) -> Tensor:
    """Mean over tokens of the squared log-sum-exp of all router logits."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise DimensionError(f"z_loss expects [B, N] logits with B >= 1, got {logits.shape}")
    lse = nd.logsumexp(logits)
    return (lse * lse).mean()


def aux_loss_means(per_router_stats: Sequence[LayerAuxStats],
                   per_router_logits: Sequence[Tensor]) -> Tuple[Tensor, Tensor]:
    """Mean balancing loss and mean z-loss over routers."""
    if not per_router_stats or len(per_router_stats) != len(per_router_logits):
        raise ConfigurationError(
            f"need one logits entry per router, got {len(per_router_stats)} stats / {len(per_router_logits)} logits"
        )
    n = len(per_router_stats)
    b_sum = z_sum = None
    for stats, logits in zip(per_router_stats, per_router_logits):
        b, z = balance_loss(stats), z_loss(logits)
        b_sum = b if b_sum is None else b_sum + b
        z_sum = z if z_sum is None else z_sum + z
    return b_sum * (1.0 / n), z_sum * (1.0 / n)


def weighted_total(lm: Tensor, mean_b: Tensor, mean_z: Tensor, w: LossWeights) -> Tensor:
    """Combine already-averaged router losses with the LM loss."""
    return lm + mean_b * w.alpha + mean_z * w.beta


def total_pretrain_loss(lm: Tensor, per_router_stats: Sequence[LayerAuxStats],
                        per_router_logits: Sequence[Tensor], w: LossWeights) -> Tensor:
    """loss_lm + alpha * mean loss_b + beta * mean loss_z."""
    mean_b, mean_z = aux_loss_means(per_router_stats, per_router_logits)
    return weighted_total(lm, mean_b, mean_z, w)


def implicit_reward_margin(batch: PreferenceBatch) -> Tensor:
    """eta * [(log pi/pi_ref)(chosen) - (log pi/pi_ref)(rejected)] per pair."""
    chosen = batch.policy_chosen - Tensor(batch.reference_chosen.data)
    rejected = batch.policy_rejected - Tensor(batch.reference_rejected.data)
    return (chosen - rejected) * batch.eta


def dpo_loss(batch: PreferenceBatch) -> Tensor:
    """Mean over pairs of -log sigmoid(implicit reward margin)."""
    batch.validate()
    return -nd.log_sigmoid(implicit_reward_margin(batch)).mean()
