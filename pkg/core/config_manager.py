"""
Configuration Manager
Reads a JSON run config and deep-merges it over the built-in DEFAULTS.
"""
import copy
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from core.errors import ConfigurationError
from core.model import ModelConfig
from core.optim import BETA1, BETA2, CLIP_NORM, EPS, MAX_LR, WEIGHT_DECAY, WsdSchedule

logger = logging.getLogger(__name__)

CONFIG_JSON_PATH = Path(os.getenv("JETMOE_CONFIG", "config.json"))


DEFAULTS: Dict[str, Any] = {
    # Network shape (toy scale, byte vocabulary)
    "model": {
        "n_layers": 2,
        "d_model": 64,
        "n_experts": 4,
        "top_k": 2,
        "heads_per_expert": 2,
        "d_head": 16,
        "d_mlp": 128,
        "vocab_size": 256,
        "max_positions": 512,
        "alpha": 0.01,
        "beta": 0.001,
        "dtype": "float32",
    },

    # Pretraining loop
    "train": {
        "seq_len": 128,
        "batch_tokens": 4096,
        "steps": 200,
        "seed": 0,
        "corpus": "data/corpus.txt",
        "phase2_corpus": None,      # swapped in at phase2_start
        "phase2_start": None,       # None = start of the decay stage
        "out_dir": "runs/default",
        "checkpoint_interval": 100,
        "log_interval": 10,
        "prefetch": 2,
        "progress": True,
    },

    # Warmup-Stable-Decay learning rate
    "schedule": {
        "warmup_steps": 20,
        "stable_end": 160,
        "decay_steps": 40,
        "max_lr": MAX_LR,
        "floor_fraction": 0.1,
    },

    # AdamW
    "optimizer": {
        "beta1": BETA1,
        "beta2": BETA2,
        "eps": EPS,
        "weight_decay": WEIGHT_DECAY,
        "clip_norm": CLIP_NORM,
    },

    # Distilled SFT
    "sft": {
        "dataset": "data/sft.jsonl",
        "init": None,               # checkpoint to start from
        "lr": 2e-5,
        "batch_size": 128,
        "epochs": 3,
    },

    # Distilled DPO
    "dpo": {
        "dataset": "data/preferences.jsonl",
        "reference": None,          # frozen reference / initial policy checkpoint
        "lr": 5e-7,
        "batch_size": 128,
        "epochs": 1,
        "eta": 0.1,
    },
}


@dataclass
class StageConfig:
    """Fine-tuning stage settings (SFT or DPO)."""
    dataset: str
    lr: float
    batch_size: int
    epochs: int
    init: Optional[str] = None
    reference: Optional[str] = None
    eta: float = 0.1


@dataclass
class TrainRunConfig:
    model: ModelConfig
    schedule: WsdSchedule
    seq_len: int = 128
    batch_tokens: int = 4096
    steps: int = 200
    seed: int = 0
    corpus: str = "data/corpus.txt"
    phase2_corpus: Optional[str] = None
    phase2_start: Optional[int] = None
    out_dir: str = "runs/default"
    checkpoint_interval: int = 100
    log_interval: int = 10
    prefetch: int = 2
    progress: bool = True
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS
    weight_decay: float = WEIGHT_DECAY
    clip_norm: float = CLIP_NORM
    sft: StageConfig = field(default=None)
    dpo: StageConfig = field(default=None)

    @property
    def batch_size(self) -> int:
        return self.batch_tokens // self.seq_len

    @property
    def swap_step(self) -> Optional[int]:
        if not self.phase2_corpus:
            return None
        return self.phase2_start if self.phase2_start is not None else self.schedule.stable_end

    def validate(self) -> None:
        self.model.validate()
        self.schedule.validate()
        if self.seq_len <= 0 or self.batch_tokens <= 0 or self.batch_tokens % self.seq_len:
            raise ConfigurationError(
                f"batch_tokens ({self.batch_tokens}) must be a positive multiple of seq_len ({self.seq_len})"
            )
        if self.seq_len > self.model.max_positions:
            raise ConfigurationError(f"seq_len {self.seq_len} exceeds max_positions {self.model.max_positions}")
        if self.steps < 0 or self.log_interval <= 0 or self.checkpoint_interval <= 0:
            raise ConfigurationError("steps must be >= 0 and intervals > 0")
        if self.clip_norm <= 0:
            raise ConfigurationError(f"clip_norm must be > 0, got {self.clip_norm}")
        for stage in (self.sft, self.dpo):
            if stage is not None and (stage.lr < 0 or stage.batch_size <= 0 or stage.epochs <= 0):
                raise ConfigurationError(f"invalid stage settings: {stage}")


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any], where: str = "") -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if key not in merged:
            logger.warning(f"Ignoring unknown config key '{where}{key}'")
            continue
        if isinstance(merged[key], dict) and isinstance(value, dict):
            merged[key] = _deep_merge(merged[key], value, f"{where}{key}.")
        else:
            merged[key] = value
    return merged


class ConfigManager:
    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else CONFIG_JSON_PATH
        self._explicit = path is not None
        self._cache: Dict[str, Any] = {}
        self._load()

    def _load(self):
        """Load config from JSON, merging with defaults."""
        self._cache = copy.deepcopy(DEFAULTS)
        if self.path.exists():
            try:
                with open(self.path, "r") as f:
                    user_config = json.load(f)
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigurationError(f"Failed to load {self.path}: {e}") from e
            if not isinstance(user_config, dict):
                raise ConfigurationError(f"{self.path} must contain a JSON object")
            self._cache = _deep_merge(self._cache, user_config)
            logger.info(f"Loaded config from {self.path}")
        elif self._explicit:
            raise ConfigurationError(f"Config file not found: {self.path}")
        else:
            logger.info("No config.json found, using built-in defaults")

    def get(self, key: str, default: Any = None) -> Any:
        """Get a config value; dotted keys reach into sections ('train.seed')."""
        node: Any = self._cache
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def get_all(self) -> Dict[str, Any]:
        return copy.deepcopy(self._cache)

    def set(self, key: str, value: Any):
        """Set a single value (dotted key), e.g. a CLI override."""
        parts = key.split(".")
        node = self._cache
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    def save(self, path: Optional[Path] = None) -> Path:
        target = Path(path) if path is not None else self.path
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w") as f:
            json.dump(self._cache, f, indent=4)
        return target

    def get_defaults(self) -> Dict[str, Any]:
        return copy.deepcopy(DEFAULTS)

    def run_config(self) -> TrainRunConfig:
        """Typed view of the merged config; raises ConfigurationError on invalid values."""
        c = self._cache
        try:
            opt = c["optimizer"]
            cfg = TrainRunConfig(
                model=ModelConfig.from_dict(c["model"]),
                schedule=WsdSchedule(**c["schedule"]),
                beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"],
                weight_decay=opt["weight_decay"], clip_norm=opt["clip_norm"],
                sft=StageConfig(**c["sft"]),
                dpo=StageConfig(**c["dpo"]),
                **c["train"],
            )
        except TypeError as e:
            raise ConfigurationError(f"Invalid config: {e}") from e
        cfg.validate()
        return cfg


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> TrainRunConfig:
    """Convenience: merged config plus dotted-key overrides, as a validated TrainRunConfig."""
    manager = ConfigManager(path)
    for key, value in (overrides or {}).items():
        if value is not None:
            manager.set(key, value)
    return manager.run_config()
