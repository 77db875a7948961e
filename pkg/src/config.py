"""
Run configuration: JSON file with a schema version, overridable from the command line.
"""

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from model.errors import ArityMismatch, ConfigError, IoFailure

SCHEMA_VERSION = 1
JSR_HEAD_COUNTS = (1, 2, 4)


@dataclass
class ModelConfig:
    feature_dim: Optional[int] = None   # D_o; None adopts the dataset's value
    vocab_size: Optional[int] = None    # None adopts the dataset's value
    embed_dim: int = 32                 # D_e
    word_dim: int = 32                  # D_w
    heads: int = 4                      # H
    K: int = 2
    gat_depth: int = 1
    use_global_path: bool = True
    use_regional_path: bool = True
    use_ssr: bool = True
    use_jsr: bool = True
    use_batchnorm: bool = True
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    inject_gradient_fault: bool = False


@dataclass
class LossConfig:
    margin: float = 0.2
    reduction: str = "sum"


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 0.01
    decay_factor: float = 0.1
    decay_epoch: Optional[int] = None   # None means half of the epochs
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.0
    seed: int = 7
    eval_every: int = 1

    @property
    def effective_decay_epoch(self) -> int:
        return self.decay_epoch if self.decay_epoch is not None else max(1, self.epochs // 2)


@dataclass
class EvalConfig:
    top_n: int = 15
    rerank_lambda: float = 0.5
    rerank: bool = False
    ensemble: List[str] = field(default_factory=list)
    folds: int = 1


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    dataset: Optional[str] = None
    val_dataset: Optional[str] = None
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        """Checks every cross-field invariant; returns self for chaining."""
        m, t, e = self.model, self.train, self.eval
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {self.schema_version}")
        if not (m.use_global_path or m.use_regional_path):
            raise ConfigError("at least one visual path must be enabled")
        if m.use_jsr and not (m.use_global_path and m.use_regional_path):
            raise ConfigError("use_jsr needs both the global and the regional path")
        if m.K not in JSR_HEAD_COUNTS:
            raise ArityMismatch(f"K must be one of {JSR_HEAD_COUNTS}, got {m.K}")
        for name in ("embed_dim", "word_dim", "heads", "gat_depth"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if m.embed_dim % m.heads != 0:
            raise ConfigError(f"heads ({m.heads}) must divide embed_dim ({m.embed_dim})")
        if not 0.0 < m.bn_momentum < 1.0 or m.bn_epsilon <= 0:
            raise ConfigError("bn_momentum must lie in (0, 1) and bn_epsilon be positive")
        if self.loss.margin < 0:
            raise ConfigError(f"loss.margin must be >= 0, got {self.loss.margin}")
        if self.loss.reduction not in ("sum", "mean"):
            raise ConfigError(f"loss.reduction must be 'sum' or 'mean', got '{self.loss.reduction}'")
        if t.epochs < 1 or t.batch_size < 2 or t.eval_every < 1:
            raise ConfigError("train.epochs >= 1, train.batch_size >= 2 and train.eval_every >= 1 required")
        if t.learning_rate < 0 or not 0 < t.decay_factor <= 1:
            raise ConfigError("learning_rate must be >= 0 and decay_factor in (0, 1]")
        if not 1 <= t.effective_decay_epoch <= t.epochs:
            raise ConfigError(f"decay_epoch {t.effective_decay_epoch} must lie in [1, epochs={t.epochs}]")
        if not 0.0 <= t.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if e.top_n < 1 or not 0.0 <= e.rerank_lambda <= 1.0 or e.folds < 1:
            raise ConfigError("eval.top_n >= 1, eval.rerank_lambda in [0, 1] and eval.folds >= 1 required")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _build(cls, raw: Dict[str, Any], where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"'{where}' must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    values = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        values[key] = _build(type(default), value, f"{where}.{key}") if is_dataclass(default) else value
    return cls(**values)


def config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    return _build(RunConfig, raw, "config").validate()


def load_config(path: Optional[Path]) -> RunConfig:
    """
    Reads a JSON run configuration; no path gives the defaults.

    Raises:
        IoFailure: File missing or unreadable.
        ConfigError: Bad JSON, unknown keys, or violated invariants.
    """
    if path is None:
        return RunConfig().validate()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise IoFailure(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    except OSError as e:
        raise IoFailure(f"cannot read config {path}: {e}") from e
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    Returns a copy with dotted-key overrides applied, e.g. {'train.seed': 3}.
    None values are skipped so unset command-line flags leave the file value.
    """
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.get(part) if isinstance(node, dict) else None
            if node is None:
                break
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown config key '{dotted}'")
        node[leaf] = value
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def with_model(cfg: RunConfig, **changes: Any) -> RunConfig:
    return replace(cfg, model=replace(cfg.model, **changes))


def with_train(cfg: RunConfig, **changes: Any) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, **changes))
