"""
JetMoE network assembly: token embedding -> n_layers x [RMSNorm, MoA, residual,
RMSNorm, MoE-FFD, residual] -> final RMSNorm -> untied output head.

Parameter names (stable; checkpoints depend on them):

    embed.weight                         [V, D]
    blocks.{i}.attn_norm.weight          [D]
    blocks.{i}.moa.router.w_rtr          [N, D]
    blocks.{i}.moa.w_k / w_v             [H*Dh, D]
    blocks.{i}.moa.experts.{e}.w_q       [H*Dh, D]
    blocks.{i}.moa.experts.{e}.w_o       [D, H*Dh]
    blocks.{i}.ffd_norm.weight           [D]
    blocks.{i}.moe.router.w_rtr          [N, D]
    blocks.{i}.moe.experts.{e}.w_in      [2*F, D]
    blocks.{i}.moe.experts.{e}.w_out     [D, F]
    final_norm.weight                    [D]
    lm_head.weight                       [V, D]
"""
import logging
import math
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import truncnorm

from core import ndauto as nd
from core.attention import MoaExpertWeights, MoaLayer, MoaSharedWeights, build_rope_table, moa_forward
from core.errors import ConfigurationError, RangeError
from core.experts import FfdExpertWeights, MoeFfdLayer, moe_ffd_forward
from core.ndauto import Tensor
from core.objectives import LossWeights
from core.routing import LayerAuxStats, RouterWeights

logger = logging.getLogger(__name__)

NORM_EPS = 1e-5
INIT_STD = 0.02
INIT_REFERENCE_WIDTH = 2048


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_experts: int = 4
    top_k: int = 2
    heads_per_expert: int = 2
    d_head: int = 16
    d_mlp: int = 128
    vocab_size: int = 256
    max_positions: int = 512
    alpha: float = 0.01
    beta: float = 0.001
    dtype: str = "float32"

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        """The 8B production shape. V=32000 is assumed; the tokenizer is not fixed."""
        values = dict(n_layers=24, d_model=2048, n_experts=8, top_k=2, heads_per_expert=16,
                      d_head=128, d_mlp=5632, vocab_size=32000, max_positions=4096)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            logger.warning(f"Ignoring unknown model config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k in known})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def d_att(self) -> int:
        return self.heads_per_expert * self.d_head

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta)

    def validate(self) -> None:
        extents = {k: getattr(self, k) for k in
                   ("n_layers", "d_model", "n_experts", "top_k", "heads_per_expert",
                    "d_head", "d_mlp", "vocab_size", "max_positions")}
        bad = {k: v for k, v in extents.items() if not isinstance(v, int) or v <= 0}
        if bad:
            raise ConfigurationError(f"extents must be positive integers: {bad}")
        if self.top_k > self.n_experts:
            raise ConfigurationError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if self.d_head % 2:
            raise ConfigurationError(f"d_head must be even for RoPE, got {self.d_head}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype}")
        self.loss_weights  # validates alpha/beta


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every parameter name and shape, in initialization order."""
    d, n, f, v, a = cfg.d_model, cfg.n_experts, cfg.d_mlp, cfg.vocab_size, cfg.d_att
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["embed.weight"] = (v, d)
    for i in range(cfg.n_layers):
        p = f"blocks.{i}"
        shapes[f"{p}.attn_norm.weight"] = (d,)
        shapes[f"{p}.moa.router.w_rtr"] = (n, d)
        shapes[f"{p}.moa.w_k"] = (a, d)
        shapes[f"{p}.moa.w_v"] = (a, d)
        for e in range(n):
            shapes[f"{p}.moa.experts.{e}.w_q"] = (a, d)
            shapes[f"{p}.moa.experts.{e}.w_o"] = (d, a)
        shapes[f"{p}.ffd_norm.weight"] = (d,)
        shapes[f"{p}.moe.router.w_rtr"] = (n, d)
        for e in range(n):
            shapes[f"{p}.moe.experts.{e}.w_in"] = (2 * f, d)
            shapes[f"{p}.moe.experts.{e}.w_out"] = (d, f)
    shapes["final_norm.weight"] = (d,)
    shapes["lm_head.weight"] = (v, d)
    return shapes


def count_params(cfg: ModelConfig) -> Tuple[int, int]:
    """Closed-form (total, active-per-token) parameter counts."""
    cfg.validate()
    d, n, k, f, v, a = cfg.d_model, cfg.n_experts, cfg.top_k, cfg.d_mlp, cfg.vocab_size, cfg.d_att
    attn_expert = 2 * a * d
    ffd_expert = 3 * f * d
    per_block_shared = 2 * d + 2 * n * d + 2 * a * d   # norms, two routers, W_k, W_v
    outer = 2 * v * d + d                               # embedding, head, final norm
    total = outer + cfg.n_layers * (per_block_shared + n * (attn_expert + ffd_expert))
    active = outer + cfg.n_layers * (per_block_shared + k * (attn_expert + ffd_expert))
    return total, active


def rms_norm(x: Tensor, weight: Tensor, eps: float = NORM_EPS) -> Tensor:
    inv = nd.power((x * x).mean(axis=-1, keepdims=True) + eps, -0.5)
    return x * inv * weight


class JetMoeModel:
    """Parameters by name plus the forward pass; layer views are rebuilt from ``params`` on each call."""

    def __init__(self, cfg: ModelConfig, params: "OrderedDict[str, Tensor]"):
        cfg.validate()
        expected = parameter_shapes(cfg)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ConfigurationError(f"parameter set mismatch; missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigurationError(f"parameter '{name}' has shape {params[name].shape}, expected {shape}")
        self.cfg = cfg
        self.params = params
        self.rope = build_rope_table(cfg.d_head, cfg.max_positions, dtype=cfg.np_dtype)
        self.counters: Counter = Counter()
        self.last_token_evals: List[np.ndarray] = []

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data) for name, t in self.params.items())

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.grad if t.grad is not None else np.zeros_like(t.data))
                           for name, t in self.params.items())

    def copy(self) -> "JetMoeModel":
        return JetMoeModel(self.cfg, OrderedDict((n, Tensor(t.data.copy(), name=n)) for n, t in self.params.items()))

    def moa_layer(self, i: int) -> MoaLayer:
        p, cfg = self.params, self.cfg
        return MoaLayer(
            router=RouterWeights(p[f"blocks.{i}.moa.router.w_rtr"]),
            shared=MoaSharedWeights(p[f"blocks.{i}.moa.w_k"], p[f"blocks.{i}.moa.w_v"]),
            experts=[MoaExpertWeights(p[f"blocks.{i}.moa.experts.{e}.w_q"], p[f"blocks.{i}.moa.experts.{e}.w_o"])
                     for e in range(cfg.n_experts)],
            k=cfg.top_k,
            n_heads=cfg.heads_per_expert,
            counter=self.counters,
        )

    def moe_layer(self, i: int) -> MoeFfdLayer:
        p, cfg = self.params, self.cfg
        return MoeFfdLayer(
            router=RouterWeights(p[f"blocks.{i}.moe.router.w_rtr"]),
            experts=[FfdExpertWeights(p[f"blocks.{i}.moe.experts.{e}.w_in"], p[f"blocks.{i}.moe.experts.{e}.w_out"])
                     for e in range(cfg.n_experts)],
            k=cfg.top_k,
            counter=self.counters,
        )

    def forward(self, tokens: np.ndarray) -> Tuple[Tensor, List[LayerAuxStats]]:
        """Logits [.., T, V] and 2 * n_layers router stats (MoA then MoE-FFD per block)."""
        return forward(self, tokens)


def _truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng).astype(dtype)


def build_model(cfg: ModelConfig, seed: int) -> JetMoeModel:
    """Deterministic truncated-normal init; residual output projections shrink with depth."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    std = INIT_STD * min(1.0, math.sqrt(INIT_REFERENCE_WIDTH / cfg.d_model))
    out_std = std / math.sqrt(2 * cfg.n_layers)
    dtype = cfg.np_dtype
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("norm.weight"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith((".w_o", ".w_out")):
            data = _truncated_normal(rng, shape, out_std, dtype)
        else:
            data = _truncated_normal(rng, shape, std, dtype)
        params[name] = Tensor(data, name=name)
    logger.debug(f"Built model with {sum(t.size for t in params.values())} parameters (seed={seed})")
    return JetMoeModel(cfg, params)


def forward(model: JetMoeModel, tokens: np.ndarray) -> Tuple[Tensor, List[LayerAuxStats]]:
    cfg = model.cfg
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise RangeError(f"tokens must be a non-empty [T] or [B, T] array, got shape {tokens.shape}")
    b, t = tokens.shape
    if t > cfg.max_positions:
        raise RangeError(f"sequence length {t} exceeds max_positions={cfg.max_positions}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise RangeError(f"token ids must lie in [0, {cfg.vocab_size}), got [{tokens.min()}, {tokens.max()}]")

    p = model.params
    x = nd.embedding(p["embed.weight"], tokens)
    aux: List[LayerAuxStats] = []
    model.last_token_evals = []
    for i in range(cfg.n_layers):
        attn_out, attn_stats = moa_forward(rms_norm(x, p[f"blocks.{i}.attn_norm.weight"]), model.moa_layer(i), model.rope)
        x = x + attn_out
        moe = model.moe_layer(i)
        h = rms_norm(x, p[f"blocks.{i}.ffd_norm.weight"]).reshape(b * t, cfg.d_model)
        ffd_out, ffd_stats = moe_ffd_forward(h, moe)
        x = x + ffd_out.reshape(b, t, cfg.d_model)
        model.last_token_evals.append(moe.last_token_evals)
        aux.extend([attn_stats, ffd_stats])
    if x.shape[-1] != cfg.d_model:
        raise ConfigurationError(f"residual width drifted to {x.shape[-1]}")

    h = rms_norm(x, p["final_norm.weight"]).reshape(b * t, cfg.d_model)
    logits = nd.matmul(h, p["lm_head.weight"].T).reshape(b, t, cfg.vocab_size)
    if squeeze:
        logits = logits.reshape(t, cfg.vocab_size)
    return logits, aux


def greedy_decode(model: JetMoeModel, prompt: np.ndarray, n_new: int) -> np.ndarray:
    """Append ``n_new`` argmax tokens to ``prompt``; recomputes the full prefix each step."""
    seq = [int(t) for t in np.asarray(prompt).reshape(-1)]
    if not seq:
        raise RangeError("greedy_decode needs a non-empty prompt")
    for _ in range(n_new):
        window = np.asarray(seq[-model.cfg.max_positions:], dtype=np.int64)
        logits, _ = forward(model, window)
        seq.append(int(np.argmax(logits.data[-1])))
    return np.asarray(seq, dtype=np.int64)
