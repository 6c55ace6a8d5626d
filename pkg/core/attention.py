"""
Mixture of Attention heads (MoA).

Each expert owns its query and output projections; the key and value
projections are shared, computed once per layer and rotated once with RoPE.
A routed token's query attends over the full shared key/value prefix of its
own sequence; only routed query rows are attended.
"""
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from core import ndauto as nd
from core.errors import ConfigurationError, DimensionError, RangeError
from core.ndauto import Tensor
from core.routing import LayerAuxStats, RouterWeights, aux_stats, combine, dispatch, route

logger = logging.getLogger(__name__)

ROPE_BASE = 10000.0


@dataclass
class MoaSharedWeights:
    w_k: Tensor  # [D_att, D_emb]
    w_v: Tensor  # [D_att, D_emb]


@dataclass
class MoaExpertWeights:
    w_q: Tensor  # [D_att, D_emb]
    w_o: Tensor  # [D_emb, D_att]


@dataclass
class RopeTable:
    cos: np.ndarray  # [max_positions, D_head / 2]
    sin: np.ndarray
    base: float = ROPE_BASE

    @property
    def max_positions(self) -> int:
        return self.cos.shape[0]

    @property
    def d_head(self) -> int:
        return 2 * self.cos.shape[1]


@dataclass
class MoaLayer:
    router: RouterWeights
    shared: MoaSharedWeights
    experts: List[MoaExpertWeights]
    k: int
    n_heads: int
    counter: Counter = field(default_factory=Counter)

    @property
    def d_att(self) -> int:
        return self.shared.w_k.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_att // self.n_heads

    def validate(self) -> None:
        n = len(self.experts)
        if not 1 <= self.k <= n:
            raise ConfigurationError(f"top_k={self.k} outside [1, {n}]")
        if self.router.n_experts != n:
            raise ConfigurationError(f"router scores {self.router.n_experts} experts, layer has {n}")
        if self.d_att % self.n_heads:
            raise ConfigurationError(f"D_att={self.d_att} not divisible by {self.n_heads} heads")
        d_att, d_emb = self.shared.w_k.shape
        if self.shared.w_v.shape != (d_att, d_emb):
            raise DimensionError(f"w_v shape {self.shared.w_v.shape} != w_k shape {(d_att, d_emb)}")
        for e, ex in enumerate(self.experts):
            if ex.w_q.shape != (d_att, d_emb) or ex.w_o.shape != (d_emb, d_att):
                raise DimensionError(f"expert {e} projections {ex.w_q.shape}/{ex.w_o.shape} "
                                     f"do not match D_att={d_att}, D_emb={d_emb}")


def build_rope_table(d_head: int, max_positions: int, base: float = ROPE_BASE,
                     dtype=np.float64) -> RopeTable:
    if d_head % 2:
        raise ConfigurationError(f"RoPE needs an even head dimension, got {d_head}")
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = np.outer(np.arange(max_positions, dtype=np.float64), inv_freq)
    return RopeTable(cos=np.cos(angles).astype(dtype), sin=np.sin(angles).astype(dtype), base=base)


def apply_rope(x: Tensor, positions: np.ndarray, table: RopeTable) -> Tensor:
    """Rotate pair (2j, 2j+1) of each head by positions * base^(-2j/D_head). x: [T, H, D_head]."""
    if x.shape[-1] % 2:
        raise ConfigurationError(f"RoPE needs an even head dimension, got {x.shape[-1]}")
    if x.shape[-1] != table.d_head:
        raise DimensionError(f"head dim {x.shape[-1]} does not match RoPE table {table.d_head}")
    positions = np.asarray(positions)
    if positions.size and (positions.min() < 0 or positions.max() >= table.max_positions):
        raise RangeError(f"positions must lie in [0, {table.max_positions}), got max {positions.max()}")
    cos = table.cos[positions][:, None, :]
    sin = table.sin[positions][:, None, :]
    return nd.rotate_pairs(x, cos, sin)


def causal_mask(t: int) -> np.ndarray:
    """True where position t may NOT attend (strictly future keys)."""
    return np.triu(np.ones((t, t), dtype=bool), k=1)


def mha(q: Tensor, k: Tensor, v: Tensor, causal: bool = True) -> Tensor:
    """Scaled dot-product attention per head; [.., T, H, D_head] -> [.., T, H * D_head]."""
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"mha shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    squeeze = q.ndim == 3
    if squeeze:
        q, k, v = (t.reshape((1,) + t.shape) for t in (q, k, v))
    b, t, h, dh = q.shape
    qh, kh, vh = (nd.transpose(x, (0, 2, 1, 3)) for x in (q, k, v))
    scores = nd.matmul(qh, nd.transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if causal:
        scores = nd.masked_fill(scores, causal_mask(t), -np.inf)
    out = nd.matmul(nd.row_softmax(scores), vh)
    out = nd.transpose(out, (0, 2, 1, 3)).reshape(b, t, h * dh)
    return out.reshape(t, h * dh) if squeeze else out


def _routed_attention(q: Tensor, keys: Tensor, values: Tensor, token_index: np.ndarray) -> Tensor:
    """
    Causal attention for gathered query rows only.

    q is [n, H, D_head] for the flat token indices ``token_index``; keys and
    values are [B, T, H, D_head]. Each query sees keys 0..p of its own sequence,
    p being its position. Returns [n, H * D_head] in token_index order.
    """
    n, h, dh = q.shape
    t = keys.shape[1]
    seq, pos = np.divmod(token_index, t)
    # token_index ascends, so each sequence's queries form one contiguous run
    starts = np.flatnonzero(np.r_[True, seq[1:] != seq[:-1]])
    ends = np.r_[starts[1:], n]
    parts = []
    for lo, hi in zip(starts.tolist(), ends.tolist()):
        s = int(seq[lo])
        qs = nd.transpose(q[lo:hi], (1, 0, 2))
        scores = nd.matmul(qs, nd.transpose(keys[s], (1, 2, 0))) * (1.0 / math.sqrt(dh))
        future = np.arange(t)[None, None, :] > pos[lo:hi, None][None]
        weights = nd.row_softmax(nd.masked_fill(scores, future, -np.inf))
        out = nd.matmul(weights, nd.transpose(values[s], (1, 0, 2)))
        parts.append(nd.transpose(out, (1, 0, 2)).reshape(hi - lo, h * dh))
    return nd.concat_rows(parts)


def moa_forward(x: Tensor, layer: MoaLayer, table: RopeTable) -> Tuple[Tensor, LayerAuxStats]:
    """MoA over x of shape [T, D_emb] or [B, T, D_emb]."""
    layer.validate()
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    b, t, d_emb = x.shape
    h, dh = layer.n_heads, layer.d_head
    flat = x.reshape(b * t, d_emb)
    positions = np.tile(np.arange(t), b)

    d = route(flat, layer.router, layer.k)

    keys = apply_rope(nd.matmul(flat, layer.shared.w_k.T).reshape(b * t, h, dh), positions, table)
    keys = keys.reshape(b, t, h, dh)
    values = nd.matmul(flat, layer.shared.w_v.T).reshape(b, t, h, dh)
    layer.counter["kv_projections"] += 1

    outputs: Dict[int, Tensor] = {}
    for bucket in dispatch(flat, d):
        n = bucket.token_index.size
        if n == 0:
            continue
        expert = layer.experts[bucket.expert]
        q = nd.matmul(bucket.rows, expert.w_q.T).reshape(n, h, dh)
        q = apply_rope(q, positions[bucket.token_index], table)
        attended = _routed_attention(q, keys, values, bucket.token_index)
        outputs[bucket.expert] = nd.matmul(attended, expert.w_o.T)
        layer.counter["attention_calls"] += 1
        layer.counter["attended_queries"] += n

    y = combine(outputs, d)
    y = y.reshape(t, d_emb) if squeeze else y.reshape(b, t, d_emb)
    return y, aux_stats(d)
