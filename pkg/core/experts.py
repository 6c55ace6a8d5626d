"""SwiGLU feed-forward experts and the MoE-FFD layer built on the router."""
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core import ndauto as nd
from core.errors import ConfigurationError, DimensionError
from core.ndauto import Tensor
from core.routing import LayerAuxStats, RouterWeights, aux_stats, combine, dispatch, route

logger = logging.getLogger(__name__)


@dataclass
class FfdExpertWeights:
    w_in: Tensor   # [2 * D_ffd, D_emb]; first half gates, second half is linear
    w_out: Tensor  # [D_emb, D_ffd]

    def validate(self) -> None:
        two_f, d_emb = self.w_in.shape
        if two_f % 2:
            raise ConfigurationError(f"w_in first extent must be even, got {two_f}")
        if self.w_out.shape != (d_emb, two_f // 2):
            raise DimensionError(f"w_out shape {self.w_out.shape} does not match w_in {self.w_in.shape}")


@dataclass
class MoeFfdLayer:
    router: RouterWeights
    experts: List[FfdExpertWeights]
    k: int
    counter: Counter = field(default_factory=Counter)
    last_token_evals: Optional[np.ndarray] = field(default=None, repr=False)

    def validate(self) -> None:
        n = len(self.experts)
        if not 1 <= self.k <= n:
            raise ConfigurationError(f"top_k={self.k} outside [1, {n}]")
        if self.router.n_experts != n:
            raise ConfigurationError(f"router scores {self.router.n_experts} experts, layer has {n}")
        shapes = {(e.w_in.shape, e.w_out.shape) for e in self.experts}
        if len(shapes) != 1:
            raise DimensionError(f"experts disagree on shapes: {sorted(shapes)}")
        self.experts[0].validate()


def ffd_forward(x: Tensor, w: FfdExpertWeights) -> Tensor:
    """W_out (silu(a) * b) where [a; b] = W_in x."""
    w.validate()
    h = nd.matmul(x, w.w_in.T)
    half = w.w_in.shape[0] // 2
    hidden = nd.silu(h[:, :half]) * h[:, half:]
    return nd.matmul(hidden, w.w_out.T)


def moe_ffd_forward(x: Tensor, layer: MoeFfdLayer) -> Tuple[Tensor, LayerAuxStats]:
    """Route, run each non-empty expert bucket once, and recombine with the gates."""
    layer.validate()
    d = route(x, layer.router, layer.k)
    outputs: Dict[int, Tensor] = {}
    evals = np.zeros(x.shape[0], dtype=np.int64)
    for bucket in dispatch(x, d):
        if bucket.token_index.size == 0:
            continue
        outputs[bucket.expert] = ffd_forward(bucket.rows, layer.experts[bucket.expert])
        evals[bucket.token_index] += 1
        layer.counter["ffd_calls"] += 1
        layer.counter["ffd_rows"] += int(bucket.token_index.size)
    layer.last_token_evals = evals
    return combine(outputs, d), aux_stats(d)
