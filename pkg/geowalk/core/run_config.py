"""
Run configuration - validated tree of settings for every command
Unknown keys are rejected; every run writes the resolved copy next to its outputs
"""

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from geowalk.core import config as defaults
from geowalk.core.errors import ConfigurationError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthConfig(_Section):
    n: int = Field(default=2000, ge=1)
    n_clusters: int = Field(default=4, ge=1)
    depth: int = Field(default=3, ge=1)
    feature_dim: int = Field(default=defaults.FEATURE_DIM, ge=1)
    branching: int = Field(default=3, ge=1)
    noise: float = Field(default=0.3, ge=0)

    @model_validator(mode="after")
    def _check_sizes(self):
        if self.n < self.n_clusters:
            raise ValueError("n must be >= n_clusters")
        return self


class GraphConfig(_Section):
    k: int = Field(default=defaults.DEFAULT_K, ge=1)
    hyperbolic_curvature: float = Field(default=defaults.DEFAULT_HYPERBOLIC_CURVATURE, lt=0)
    spherical_curvature: float = Field(default=defaults.DEFAULT_SPHERICAL_CURVATURE, gt=0)
    brute_force_limit: int = Field(default=defaults.BRUTE_FORCE_LIMIT, ge=1)
    workers: int = Field(default=1, ge=1)


class PromptConfig(_Section):
    """Stage I settings"""

    hidden_dim: int = Field(default=defaults.PROMPT_HIDDEN_DIM, ge=1)
    out_dim: int = Field(default=defaults.PROMPT_OUT_DIM, ge=1)
    activation: Literal["relu", "tanh", "identity"] = "relu"
    epochs: int = Field(default=defaults.STAGE1_EPOCHS, ge=0)
    lr: float = Field(default=defaults.STAGE1_LR, gt=0)
    weight_decay: float = Field(default=defaults.STAGE1_WEIGHT_DECAY, ge=0)
    step_size: int = Field(default=defaults.STAGE1_STEP_SIZE, ge=1)
    gamma: float = Field(default=defaults.STAGE1_GAMMA, gt=0)
    # held-out nodes for both stages; Stage II reuses the split train-prompt writes
    val_fraction: float = Field(default=0.2, gt=0, lt=1)


class BackboneConfig(_Section):
    layers: int = Field(default=defaults.BACKBONE_LAYERS, ge=1)
    model_dim: int = Field(default=defaults.BACKBONE_DIM, ge=1)
    heads: int = Field(default=defaults.BACKBONE_HEADS, ge=1)
    adapter_period: int = Field(default=defaults.ADAPTER_PERIOD, ge=1)
    ffn_dim: int = Field(default=4 * defaults.BACKBONE_DIM, ge=1)
    expert_hidden_dim: Optional[int] = Field(default=None, ge=1)
    vocabulary: int = Field(default=4, ge=2)
    temperature: float = Field(default=defaults.GATE_TEMPERATURE, gt=0)
    expert_kinds: Tuple[str, str, str] = ("euclidean", "spherical", "hyperbolic")
    hyperbolic_curvature: float = Field(default=-1.0, lt=0)
    spherical_kappa: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _check_heads(self):
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be divisible by heads")
        unknown = set(self.expert_kinds) - {"euclidean", "spherical", "hyperbolic"}
        if unknown:
            raise ValueError(f"unknown expert kinds: {sorted(unknown)}")
        return self

    def adapter_layers(self) -> List[int]:
        """1-based indices of the blocks whose FFN is replaced by an adapter"""
        return [i for i in range(1, self.layers + 1) if i % self.adapter_period == 0]

    @property
    def expert_width(self) -> int:
        """Expert hidden width; defaults to the host FFN width so the Euclidean expert can inherit it"""
        return self.expert_hidden_dim or self.ffn_dim


class TrainConfig(_Section):
    """Stage II settings"""

    lam: float = Field(default=1.0, ge=0)
    beta: float = Field(default=1.0, gt=0)
    lr: float = Field(default=defaults.DESK_STAGE2_LR, gt=0)
    weight_decay: float = Field(default=defaults.STAGE2_WEIGHT_DECAY, ge=0)
    warmup_steps: int = Field(default=defaults.STAGE2_WARMUP_STEPS // 50, ge=0)
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=64, ge=1)
    frozen_attention: bool = True
    warm_fit_epochs: int = Field(default=20, ge=0)
    warm_fit_lr: float = Field(default=1e-3, gt=0)


class SweepConfig(_Section):
    periods: List[int] = Field(default_factory=lambda: [1, 2, 4])
    loss_threshold: Optional[float] = None

    @model_validator(mode="after")
    def _check_periods(self):
        if not self.periods or any(p < 1 for p in self.periods):
            raise ValueError("periods must be a non-empty list of positive integers")
        return self


class RunConfig(_Section):
    seed: int = 0
    synth: SynthConfig = Field(default_factory=SynthConfig)
    graph: GraphConfig = Field(default_factory=GraphConfig)
    prompt: PromptConfig = Field(default_factory=PromptConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def load_run_config(path: Optional[str] = None, **overrides) -> RunConfig:
    """Read a JSON config file (optional) and apply dotted overrides such as seed=7"""
    data = {}
    if path:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            data = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")

    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration: {e}")


def write_resolved_config(run_config: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / defaults.RESOLVED_CONFIG_FILE
    path.write_text(
        json.dumps(run_config.model_dump(mode="json"), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return path
