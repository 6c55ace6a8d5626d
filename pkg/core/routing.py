"""
Top-k softmax router shared by the MoA and MoE-FFD layers, with dropless
dispatch/combine and the statistics behind the auxiliary losses.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping

import numpy as np

from core import ndauto as nd
from core.errors import ConfigurationError, DimensionError
from core.ndauto import Tensor

logger = logging.getLogger(__name__)


@dataclass
class RouterWeights:
    w_rtr: Tensor  # [N, D_emb]

    @property
    def n_experts(self) -> int:
        return self.w_rtr.shape[0]


@dataclass
class GateDecision:
    logits: Tensor          # [T, N] raw router scores
    indices: np.ndarray     # [T, k] selected experts, best first
    gates: Tensor           # [T, k] softmax over the selected logits

    @property
    def n_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def n_experts(self) -> int:
        return self.logits.shape[-1]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def dense_gates(self) -> np.ndarray:
        """Full [T, N] gate matrix with zeros for unselected experts (values only)."""
        full = np.zeros((self.n_tokens, self.n_experts), dtype=self.gates.dtype)
        np.put_along_axis(full, self.indices, self.gates.data, axis=1)
        return full


@dataclass
class LayerAuxStats:
    f: Tensor        # [N] dispatch fractions, constant
    p: Tensor        # [N] mean full-softmax router probability, differentiable
    logits: Tensor = field(default=None, repr=False)  # [T, N] router logits for z-loss


@dataclass
class ExpertBucket:
    expert: int
    token_index: np.ndarray  # ascending token ids routed to this expert
    slot_index: np.ndarray   # position of this expert inside each token's top-k
    rows: Tensor             # gathered inputs, [len(token_index), D]


def route(x: Tensor, w: RouterWeights, k: int) -> GateDecision:
    """Score tokens against the expert embeddings and keep the top-k per token."""
    n = w.n_experts
    if not 1 <= k <= n:
        raise ConfigurationError(f"top_k={k} outside [1, {n}]")
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"route expects [T, D] with T >= 1, got {x.shape}")
    logits = nd.matmul(x, nd.transpose(w.w_rtr))
    # stable sort of negated scores: ties go to the lowest expert index
    indices = np.argsort(-logits.data, axis=1, kind="stable")[:, :k]
    selected = nd.take(logits, (np.arange(x.shape[0])[:, None], indices))
    return GateDecision(logits=logits, indices=indices, gates=nd.row_softmax(selected))


def routing_margin(d: GateDecision) -> float:
    """Smallest gap between the k-th and (k+1)-th logit over all tokens (inf when k == N)."""
    if d.k == d.n_experts:
        return float("inf")
    ordered = -np.sort(-d.logits.data, axis=1)
    return float(np.min(ordered[:, d.k - 1] - ordered[:, d.k]))


def _expert_positions(indices: np.ndarray, expert: int):
    # np.nonzero walks row-major: ascending token, and a token holds each expert at most once
    return np.nonzero(indices == expert)


def dispatch(x: Tensor, d: GateDecision) -> List[ExpertBucket]:
    """Dropless dispatch: one bucket per expert, no capacity limit."""
    if x.shape[0] != d.n_tokens:
        raise DimensionError(f"dispatch: x has {x.shape[0]} tokens, decision has {d.n_tokens}")
    buckets = []
    for e in range(d.n_experts):
        token_index, slot_index = _expert_positions(d.indices, e)
        buckets.append(ExpertBucket(e, token_index, slot_index, nd.take(x, token_index)))
    return buckets


def combine(expert_outputs: Mapping[int, Tensor], d: GateDecision) -> Tensor:
    """y_t = sum over t's selected experts of gate * expert output, reduced in expert order."""
    y = None
    for e in range(d.n_experts):
        token_index, slot_index = _expert_positions(d.indices, e)
        out = expert_outputs.get(e)
        if out is None:
            if token_index.size:
                raise DimensionError(f"combine: expert {e} has {token_index.size} routed tokens but no output")
            continue
        if out.shape[0] != token_index.size:
            raise DimensionError(
                f"combine: expert {e} output has {out.shape[0]} rows, decision routes {token_index.size}"
            )
        if token_index.size == 0:
            continue
        g = nd.take(d.gates, (token_index, slot_index)).reshape(-1, 1)
        part = nd.scatter_rows(out * g, token_index, d.n_tokens)
        y = part if y is None else y + part
    if y is None:
        raise DimensionError("combine: no expert outputs")
    return y


def aux_stats(d: GateDecision) -> LayerAuxStats:
    """Dispatch fractions f (sum to 1) and mean full-softmax probability mass p."""
    counts = np.bincount(d.indices.ravel(), minlength=d.n_experts)
    f = Tensor(counts / (d.n_tokens * d.k), dtype=d.logits.dtype)
    p = nd.row_softmax(d.logits).mean(axis=0)
    return LayerAuxStats(f=f, p=p, logits=d.logits)


def bucket_sizes(buckets: List[ExpertBucket]) -> Dict[int, int]:
    return {b.expert: int(b.token_index.size) for b in buckets}
