"""
Geometry Adapter Service - mixture of Euclidean, spherical and hyperbolic experts
Every expert is an FFN computed in its own geometry; a temperature-scaled softmax
gate mixes all of them densely. Gate weights can be traced per task and token and
summarized into per-task expert contributions.
"""

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from geowalk.core.config import GATE_TEMPERATURE, INACTIVE_GATE_THRESHOLD
from geowalk.core.errors import (
    DegenerateDirectionError,
    DimensionError,
    EmptyInputError,
    OutOfDomainError,
)
from geowalk.services.manifold import clamp_to_ball, mobius_add, mobius_matvec, poincare_exp0, poincare_log0

logger = logging.getLogger(__name__)

EXPERT_KINDS = ("euclidean", "spherical", "hyperbolic")
DEGENERATE_NORM = 1e-12
SIMPLEX_TOL = 1e-6

EXPERT_ACTIVATIONS = {
    "gelu": F.gelu,
    "relu": torch.relu,
    "identity": lambda h: h,
}


def _inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


# EXPERT KERNELS ###############################################################


def expert_euclidean(w1, b1, w2, b2, x: torch.Tensor, activation: str = "gelu") -> torch.Tensor:
    if x.shape[-1] != w1.shape[-1]:
        raise DimensionError(f"expert expects width {w1.shape[-1]}, got {x.shape[-1]}")
    return EXPERT_ACTIVATIONS[activation](x @ w1.T + b1) @ w2.T + b2


def expert_spherical(w1, b1, w2, b2, kappa, x: torch.Tensor, activation: str = "gelu") -> torch.Tensor:
    inner = expert_euclidean(w1, b1, w2, b2, x, activation)
    norm = torch.linalg.vector_norm(inner, dim=-1, keepdim=True)
    if norm.numel() and float(norm.detach().min()) < DEGENERATE_NORM:
        raise DegenerateDirectionError(
            f"spherical expert inner result has norm {float(norm.detach().min()):.3e}; direction undefined"
        )
    return kappa * inner / norm


def expert_hyperbolic(w1, b1, w2, b2, c, x: torch.Tensor, activation: str = "gelu") -> torch.Tensor:
    """
    exp0(W2 sigma(log0(W1 (x) b1)) + b2) on the Poincare ball of curvature c, with
    x rescaled into the ball first and b1 stored as a tangent vector at the origin
    """
    if x.shape[-1] != w1.shape[-1]:
        raise DimensionError(f"expert expects width {w1.shape[-1]}, got {x.shape[-1]}")
    xb = clamp_to_ball(x, c)
    h = mobius_matvec(w1, xb, c, check=False)
    h = mobius_add(h, poincare_exp0(b1, c), c, check=False)
    u = EXPERT_ACTIVATIONS[activation](poincare_log0(h, c, check=False))
    return poincare_exp0(u @ w2.T + b2, c)


def gate(w_g: torch.Tensor, x: torch.Tensor, temperature: float = GATE_TEMPERATURE) -> torch.Tensor:
    """softmax((w_g x) / temperature) over the expert axis"""
    return torch.softmax((x @ w_g.T) / temperature, dim=-1)


# MODULES ######################################################################


class Expert(nn.Module):
    """FFN parameters W1 (hidden x model), b1, W2 (model x hidden), b2"""

    kind = "euclidean"

    def __init__(self, model_dim: int, hidden_dim: int, activation: str = "gelu"):
        super().__init__()
        if activation not in EXPERT_ACTIVATIONS:
            raise ValueError(f"unknown expert activation '{activation}'")
        self.model_dim = model_dim
        self.hidden_dim = hidden_dim
        self.activation = activation
        self.w1 = nn.Parameter(torch.empty(hidden_dim, model_dim))
        self.b1 = nn.Parameter(torch.zeros(hidden_dim))
        self.w2 = nn.Parameter(torch.empty(model_dim, hidden_dim))
        self.b2 = nn.Parameter(torch.zeros(model_dim))
        nn.init.xavier_uniform_(self.w1)
        nn.init.xavier_uniform_(self.w2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return expert_euclidean(self.w1, self.b1, self.w2, self.b2, x, self.activation)

    def inherit(self, linear1: nn.Linear, linear2: nn.Linear, output_scale: float = 1.0) -> bool:
        """Copy a host FFN's weights, output layer times output_scale; skipped when the widths differ"""
        if tuple(linear1.weight.shape) != tuple(self.w1.shape) or tuple(linear2.weight.shape) != tuple(self.w2.shape):
            logger.debug(f"{self.kind} expert width {self.hidden_dim} differs from host FFN; not inherited")
            return False
        with torch.no_grad():
            self.w1.copy_(linear1.weight)
            self.b1.copy_(linear1.bias)
            self.w2.copy_(linear2.weight * output_scale)
            self.b2.copy_(linear2.bias * output_scale)
        return True


class SphericalExpert(Expert):
    kind = "spherical"

    def __init__(self, model_dim: int, hidden_dim: int, activation: str = "gelu", kappa: float = 1.0):
        super().__init__(model_dim, hidden_dim, activation)
        self.kappa_raw = nn.Parameter(torch.tensor(_inverse_softplus(kappa)))

    @property
    def kappa(self) -> torch.Tensor:
        return F.softplus(self.kappa_raw)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return expert_spherical(self.w1, self.b1, self.w2, self.b2, self.kappa, x, self.activation)


class HyperbolicExpert(Expert):
    kind = "hyperbolic"

    def __init__(self, model_dim: int, hidden_dim: int, activation: str = "gelu", curvature: float = -1.0):
        super().__init__(model_dim, hidden_dim, activation)
        if not curvature < 0:
            raise ValueError(f"hyperbolic expert needs curvature < 0, got {curvature}")
        self.c_raw = nn.Parameter(torch.tensor(_inverse_softplus(-curvature)))

    @property
    def c(self) -> torch.Tensor:
        return -F.softplus(self.c_raw)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return expert_hyperbolic(self.w1, self.b1, self.w2, self.b2, self.c, x, self.activation)


_EXPERTS = {"euclidean": Expert, "spherical": SphericalExpert, "hyperbolic": HyperbolicExpert}


def make_expert(
    kind: str, model_dim: int, hidden_dim: int, activation: str = "gelu", kappa: float = 1.0, curvature: float = -1.0
) -> Expert:
    if kind == "spherical":
        return SphericalExpert(model_dim, hidden_dim, activation, kappa=kappa)
    if kind == "hyperbolic":
        return HyperbolicExpert(model_dim, hidden_dim, activation, curvature=curvature)
    if kind == "euclidean":
        return Expert(model_dim, hidden_dim, activation)
    raise ValueError(f"unknown expert kind '{kind}'")


class Gate(nn.Module):
    def __init__(self, model_dim: int, n_experts: int = 3, temperature: float = GATE_TEMPERATURE):
        super().__init__()
        if not temperature > 0:
            raise ValueError(f"gate temperature must be > 0, got {temperature}")
        self.temperature = temperature
        self.w_g = nn.Parameter(torch.zeros(n_experts, model_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gate(self.w_g, x, self.temperature)


def weight_columns(kinds: Sequence[str]) -> List[str]:
    """Trace column per expert position: w_e, w_s, w_h (repeated kinds get a suffix)"""
    columns, seen = [], {}
    for kind in kinds:
        base = f"w_{kind[0]}"
        seen[base] = seen.get(base, 0) + 1
        columns.append(base if seen[base] == 1 else f"{base}_{seen[base] - 1}")
    return columns


class AdapterBlock(nn.Module):
    """Replaces a host block's FFN with a gated mixture of geometry experts"""

    def __init__(
        self,
        model_dim: int,
        hidden_dim: int,
        expert_kinds: Sequence[str] = EXPERT_KINDS,
        temperature: float = GATE_TEMPERATURE,
        activation: str = "gelu",
        kappa: float = 1.0,
        curvature: float = -1.0,
    ):
        super().__init__()
        self.expert_kinds = tuple(expert_kinds)
        self.experts = nn.ModuleList(
            [make_expert(kind, model_dim, hidden_dim, activation, kappa, curvature) for kind in self.expert_kinds]
        )
        self.gate = Gate(model_dim, len(self.experts), temperature)

    @property
    def columns(self) -> List[str]:
        return weight_columns(self.expert_kinds)

    def inherit_ffn(self, linear1: nn.Linear, linear2: nn.Linear) -> bool:
        """
        The first Euclidean expert starts from the host FFN, its output scaled by the
        expert count so that its share under the uniform initial gate is the FFN itself
        """
        for expert in self.experts:
            if expert.kind == "euclidean":
                return expert.inherit(linear1, linear2, output_scale=len(self.experts))
        return False

    def forward(self, x: torch.Tensor, trace: "GateTrace" = None, task: str = None) -> torch.Tensor:
        return adapter_forward(self, x, trace, task)


def adapter_forward(block: AdapterBlock, x: torch.Tensor, trace: "GateTrace" = None, task: str = None) -> torch.Tensor:
    """
    Dense mixture sum_i G_i(x) F_i(x). x is (..., model); with a trace, the gate
    weights of every token along the second-to-last axis are appended under task.
    """
    weights = block.gate(x)
    outputs = []
    for expert in block.experts:
        try:
            outputs.append(expert(x))
        except DegenerateDirectionError as e:
            raise DegenerateDirectionError(f"adapter forward aborted in {expert.kind} expert: {e.detail}")
    mixed = (weights.unsqueeze(-1) * torch.stack(outputs, dim=-2)).sum(dim=-2)

    if trace is not None:
        w = weights.detach().reshape(-1, weights.shape[-1])
        seq_len = x.shape[-2] if x.dim() >= 2 else 1
        token_index = np.tile(np.arange(seq_len), w.shape[0] // seq_len)
        trace.append(task or "", token_index, w.to(torch.float64).numpy(), block.columns)
    return mixed


# GATE TRACES ##################################################################


class GateTrace:
    """
    Gate-weight records (task, token_index, one weight per expert). Appends go to a
    per-worker trace; merge combines shards in the order given.
    """

    def __init__(self, columns: Sequence[str] = None):
        self.columns = list(columns) if columns is not None else weight_columns(EXPERT_KINDS)
        self._chunks: List[pd.DataFrame] = []

    def __len__(self):
        return sum(len(chunk) for chunk in self._chunks)

    def append(self, task: str, token_index, weights: np.ndarray, columns: Sequence[str] = None):
        weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
        if columns is not None and list(columns) != self.columns:
            raise DimensionError(f"trace columns {self.columns} do not match {list(columns)}")
        if weights.shape[1] != len(self.columns):
            raise DimensionError(f"expected {len(self.columns)} gate weights per record, got {weights.shape[1]}")
        if (weights < -SIMPLEX_TOL).any() or (weights > 1 + SIMPLEX_TOL).any():
            raise OutOfDomainError("gate weights must lie in [0, 1]")
        if (np.abs(weights.sum(axis=1) - 1.0) > SIMPLEX_TOL).any():
            raise OutOfDomainError("gate weights of every record must sum to 1")
        token_index = np.broadcast_to(np.asarray(token_index, dtype=np.int64), (len(weights),))
        chunk = pd.DataFrame(weights, columns=self.columns)
        chunk.insert(0, "token_index", token_index)
        chunk.insert(0, "task", task)
        self._chunks.append(chunk)

    def record(self, task: str, token_index: int, weights: Sequence[float]):
        self.append(task, token_index, np.asarray([weights], dtype=np.float64))

    def to_frame(self) -> pd.DataFrame:
        if not self._chunks:
            return pd.DataFrame(columns=["task", "token_index", *self.columns])
        return pd.concat(self._chunks, ignore_index=True)

    @classmethod
    def merge(cls, *traces: "GateTrace") -> "GateTrace":
        if not traces:
            return cls()
        merged = cls(traces[0].columns)
        for trace in traces:
            if trace.columns != merged.columns:
                raise DimensionError(f"cannot merge traces with columns {trace.columns} and {merged.columns}")
            merged._chunks.extend(trace._chunks)
        return merged

    def save_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        return path

    @classmethod
    def load_csv(cls, path: Union[str, Path]) -> "GateTrace":
        frame = pd.read_csv(path, dtype={"task": str}, keep_default_na=False, float_precision="round_trip")
        if list(frame.columns[:2]) != ["task", "token_index"] or len(frame.columns) < 3:
            raise DimensionError(f"{path} is not a gate trace (expected task,token_index,w_...)")
        trace = cls(list(frame.columns[2:]))
        if frame.empty:
            return trace
        # one chunk per run of equal task labels keeps the file's record order
        tasks = frame["task"].to_numpy()
        starts = np.flatnonzero(np.r_[True, tasks[1:] != tasks[:-1]])
        for lo, hi in zip(starts, np.r_[starts[1:], len(frame)]):
            run = frame.iloc[lo:hi]
            trace.append(tasks[lo], run["token_index"].to_numpy(), run[trace.columns].to_numpy())
        return trace


def expert_contributions(trace: GateTrace) -> pd.DataFrame:
    """Mean gate weight per expert for every task label"""
    frame = trace.to_frame()
    if frame.empty:
        raise EmptyInputError("gate trace is empty; nothing to average")
    return frame.groupby("task", sort=True)[trace.columns].mean()


def expert_sparsity(trace: GateTrace, threshold: float = INACTIVE_GATE_THRESHOLD) -> pd.Series:
    """Fraction of (record, expert) weights below threshold, per task"""
    frame = trace.to_frame()
    if frame.empty:
        raise EmptyInputError("gate trace is empty; nothing to count")
    inactive = frame[trace.columns].lt(threshold)
    inactive.insert(0, "task", frame["task"])
    return inactive.groupby("task", sort=True)[trace.columns].mean().mean(axis=1).rename("sparsity")


def contributions_frame(trace: GateTrace) -> pd.DataFrame:
    """Per-task contributions, sparsity and record counts as one report table"""
    table = expert_contributions(trace)
    table["sparsity"] = expert_sparsity(trace)
    table["records"] = trace.to_frame().groupby("task").size()
    return table.reset_index()
