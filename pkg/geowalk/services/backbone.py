"""
Host Model Service - desk-scale transformer backbone with geometry adapters
Modality vectors become tokens through scaled projections, a task query token is
appended, and pre-norm blocks process the sequence. Every adapter_period-th block
swaps its FFN for an AdapterBlock. The last token collects the final hidden states
of the modality tokens (replay) before the numeric and class heads read it.
"""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from geowalk.core.errors import DimensionError, NormalizationError
from geowalk.core.run_config import BackboneConfig
from geowalk.services.checkpoint import load_checkpoint, save_checkpoint
from geowalk.services.geo_moe import AdapterBlock, GateTrace

logger = logging.getLogger(__name__)

MODALITIES = ("prompt_euclidean", "prompt_hyperbolic", "prompt_spherical", "feature")
TASKS = ("regression", "classification")
HOST_CHECKPOINT_KIND = "host-model"
ZERO_NORM = 1e-12

# parameter-name prefixes trained in Stage II when the backbone is frozen
TRAINABLE_PREFIXES = ("proj.", "numeric_head.", "class_head.")


class ModalProjection(nn.Module):
    """e_m = alpha_m * pi_m(x_m / ||x_m||) for each declared modality, in fixed order"""

    def __init__(self, modality_dims: Dict[str, int], model_dim: int, modalities: Sequence[str] = MODALITIES):
        super().__init__()
        self.modalities = tuple(modalities)
        missing = [m for m in self.modalities if m not in modality_dims]
        if missing:
            raise DimensionError(f"no input width given for modalities {missing}")
        self.modality_dims = {m: int(modality_dims[m]) for m in self.modalities}
        self.projections = nn.ModuleDict(
            {m: nn.Linear(self.modality_dims[m], model_dim, bias=False) for m in self.modalities}
        )
        self.alphas = nn.ParameterDict({m: nn.Parameter(torch.tensor(1.0)) for m in self.modalities})

    def forward(self, inputs: Dict[str, torch.Tensor]) -> torch.Tensor:
        tokens = []
        for m in self.modalities:
            if m not in inputs:
                raise DimensionError(f"missing modality input '{m}'")
            x = inputs[m]
            if x.shape[-1] != self.modality_dims[m]:
                raise DimensionError(f"modality '{m}' expects width {self.modality_dims[m]}, got {x.shape[-1]}")
            wide = x.to(torch.float64)
            norm = torch.linalg.vector_norm(wide, dim=-1, keepdim=True)
            if norm.numel() and float(norm.min()) < ZERO_NORM:
                raise NormalizationError(m)
            unit = (wide / norm).to(self.alphas[m].dtype)
            tokens.append(self.alphas[m] * self.projections[m](unit))
        return torch.stack(tokens, dim=-2)


def project_modalities(proj: ModalProjection, inputs: Dict[str, torch.Tensor]) -> torch.Tensor:
    return proj(inputs)


class HostBlock(nn.Module):
    """Pre-norm self-attention + FFN; the FFN is bypassed by the adapter when one is attached"""

    def __init__(self, model_dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(model_dim)
        self.attn = nn.MultiheadAttention(model_dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(model_dim)
        self.ffn_in = nn.Linear(model_dim, ffn_dim)
        self.ffn_out = nn.Linear(ffn_dim, model_dim)
        self.adapter: Optional[AdapterBlock] = None

    def ffn(self, x: torch.Tensor) -> torch.Tensor:
        return self.ffn_out(F.gelu(self.ffn_in(x)))

    def forward(
        self, h: torch.Tensor, use_adapter: bool = True, trace: GateTrace = None, task: str = None
    ) -> torch.Tensor:
        a = self.norm1(h)
        h = h + self.attn(a, a, a, need_weights=False)[0]
        f = self.norm2(h)
        if self.adapter is not None and use_adapter:
            return h + self.adapter(f, trace, task)
        return h + self.ffn(f)


@dataclass
class HostOutput:
    hidden: torch.Tensor
    last: torch.Tensor
    numeric: torch.Tensor
    logits: torch.Tensor


class HostModel(nn.Module):
    def __init__(self, config: BackboneConfig, modality_dims: Dict[str, int]):
        super().__init__()
        self.config = config
        self.modality_dims = dict(modality_dims)
        d = config.model_dim
        self.proj = ModalProjection(self.modality_dims, d)
        self.positions = nn.Parameter(torch.randn(len(MODALITIES) + 1, d) * 0.02)
        self.task_queries = nn.Parameter(torch.randn(len(TASKS), d) * 0.02)
        self.blocks = nn.ModuleList([HostBlock(d, config.heads, config.ffn_dim) for _ in range(config.layers)])
        self.final_norm = nn.LayerNorm(d)
        self.numeric_head = nn.Linear(d, 1)
        self.class_head = nn.Linear(d, config.vocabulary)
        self.use_adapters = True
        for i in config.adapter_layers():
            self.blocks[i - 1].adapter = AdapterBlock(
                d,
                config.expert_width,
                config.expert_kinds,
                temperature=config.temperature,
                kappa=config.spherical_kappa,
                curvature=config.hyperbolic_curvature,
            )
        self.inherit_ffn()

    def inherit_ffn(self) -> int:
        """Start every adapter's Euclidean expert from its block's FFN"""
        return sum(
            block.adapter.inherit_ffn(block.ffn_in, block.ffn_out) for block in self.blocks if block.adapter is not None
        )

    def adapters(self) -> List[AdapterBlock]:
        return [block.adapter for block in self.blocks if block.adapter is not None]

    def tokens(self, inputs: Dict[str, torch.Tensor], task: str) -> torch.Tensor:
        if task not in TASKS:
            raise ValueError(f"unknown task '{task}'")
        modal = project_modalities(self.proj, inputs)
        query = self.task_queries[TASKS.index(task)].expand(*modal.shape[:-2], 1, -1)
        return torch.cat([modal, query], dim=-2) + self.positions

    def forward(self, inputs: Dict[str, torch.Tensor], task: str, trace: GateTrace = None) -> HostOutput:
        hidden, last = backbone_forward(self, self.tokens(inputs, task), trace, task)
        modality_hiddens = [hidden[..., i, :] for i in range(len(MODALITIES))]
        adjusted = self.final_norm(replay_accumulate(last, modality_hiddens))
        return HostOutput(hidden, adjusted, self.numeric_head(adjusted).squeeze(-1), self.class_head(adjusted))


def backbone_forward(
    model: HostModel, tokens: torch.Tensor, trace: GateTrace = None, task: str = None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Run every block over a (batch, tokens, model) sequence; returns (hidden states, last hidden)"""
    if tokens.dim() < 2 or tokens.shape[-2] < 1:
        raise DimensionError("backbone needs at least one token")
    if tokens.shape[-1] != model.config.model_dim:
        raise DimensionError(f"tokens have width {tokens.shape[-1]}, backbone expects {model.config.model_dim}")
    squeeze = tokens.dim() == 2
    h = tokens.unsqueeze(0) if squeeze else tokens
    for block in model.blocks:
        h = block(h, model.use_adapters, trace, task)
    if squeeze:
        h = h.squeeze(0)
    return h, h[..., -1, :]


def replay_accumulate(last_hidden: torch.Tensor, modality_hiddens: Iterable[torch.Tensor]) -> torch.Tensor:
    """last + h_1 + h_2 + ..., summed left to right"""
    out = last_hidden
    for h in modality_hiddens:
        if h.shape != last_hidden.shape:
            raise DimensionError(f"modality hidden {tuple(h.shape)} does not match last hidden {tuple(last_hidden.shape)}")
        out = out + h
    return out


# FREEZING #####################################################################


def is_stage2_trainable(name: str) -> bool:
    return name.startswith(TRAINABLE_PREFIXES) or ".adapter." in name


def freeze_backbone(model: HostModel, frozen: bool = True) -> List[str]:
    """Set requires_grad for Stage II; returns the names left trainable"""
    trainable = []
    for name, p in model.named_parameters():
        p.requires_grad_(is_stage2_trainable(name) or not frozen)
        if p.requires_grad:
            trainable.append(name)
    return trainable


def parameter_digest(model: nn.Module, names: Iterable[str] = None) -> str:
    """SHA-256 over the raw bytes of the named parameters, in sorted name order"""
    params = dict(model.named_parameters())
    digest = hashlib.sha256()
    for name in sorted(names if names is not None else params):
        digest.update(name.encode("utf-8"))
        digest.update(params[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# PERSISTENCE ##################################################################


def save_host_model(model: HostModel, path: Union[str, Path], meta: Dict = None) -> Path:
    payload = {"backbone": model.config.model_dump(mode="json"), "modality_dims": model.modality_dims}
    payload.update(meta or {})
    return save_checkpoint(path, HOST_CHECKPOINT_KIND, model.state_dict(), payload)


def load_host_model(path: Union[str, Path]) -> Tuple[HostModel, Dict]:
    state, meta = load_checkpoint(path, kind=HOST_CHECKPOINT_KIND)
    model = HostModel(BackboneConfig.model_validate(meta["backbone"]), meta["modality_dims"])
    model.load_state_dict(state)
    return model, meta
