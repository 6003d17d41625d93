"""
Prompt Encoder Service - geometry prompts from two-layer Riemannian GraphSAGE
Each geometry gets its own encoder: features are lifted from Euclidean space onto
the manifold by the first layer and refined on it by the second. Stage I trains
every encoder with a linear read-out on a property-regression task.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch import nn

from geowalk.core.errors import CatalogValidationError, DimensionError, DivergenceError, InvalidSpecError
from geowalk.core.run_config import PromptConfig
from geowalk.services.checkpoint import load_checkpoint, save_checkpoint
from geowalk.services.graph import GraphBundle, RelationalGraph
from geowalk.services.manifold import ManifoldKind, ManifoldSpec, expmap0_chart, logmap0_chart

logger = logging.getLogger(__name__)

ENCODER_CHECKPOINT_KIND = "prompt-encoder"

ACTIVATIONS = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "identity": lambda h: h,
}


# AGGREGATION ##################################################################


def sage_aggregate(x: torch.Tensor, graph: RelationalGraph) -> torch.Tensor:
    """Mean of each node's neighbor rows; isolated nodes keep their own row"""
    if x.shape[0] != graph.n:
        raise DimensionError(f"feature rows ({x.shape[0]}) must match graph nodes ({graph.n})")
    rows, cols = graph.edge_index()
    sums = torch.zeros_like(x).index_add(0, rows, x[cols])
    degree = torch.from_numpy(graph.degrees()).to(x.dtype).unsqueeze(-1)
    return torch.where(degree > 0, sums / degree.clamp_min(1), x)


class SageLayer(nn.Module):
    """Mean-aggregator SAGE layer with separate self and neighbor weights"""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "relu"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.w_self = nn.Parameter(torch.empty(out_dim, in_dim))
        self.w_neigh = nn.Parameter(torch.empty(out_dim, in_dim))
        self.bias = nn.Parameter(torch.empty(out_dim))
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.xavier_uniform_(self.w_self)
        nn.init.xavier_uniform_(self.w_neigh)
        nn.init.zeros_(self.bias)

    def forward(self, u: torch.Tensor, graph: RelationalGraph) -> torch.Tensor:
        if u.shape[-1] != self.in_dim:
            raise DimensionError(f"layer expects width {self.in_dim}, got {u.shape[-1]}")
        h = u @ self.w_self.T + sage_aggregate(u, graph) @ self.w_neigh.T + self.bias
        return ACTIVATIONS[self.activation](h)


def riemannian_sage_layer(
    layer: SageLayer,
    x: torch.Tensor,
    graph: RelationalGraph,
    spec_in: ManifoldSpec,
    spec_out: ManifoldSpec,
) -> torch.Tensor:
    """log at the origin of spec_in, SAGE in the tangent chart, exp at the origin of spec_out"""
    u = logmap0_chart(x, spec_in)
    return expmap0_chart(layer(u, graph), spec_out)


# ENCODERS #####################################################################


class GeometryEncoder(nn.Module):
    def __init__(
        self,
        spec: ManifoldSpec,
        in_dim: int,
        hidden_dim: int,
        out_dim: int,
        activation: str = "relu",
    ):
        super().__init__()
        self.spec = spec
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.layer1 = SageLayer(in_dim, hidden_dim, activation)
        self.layer2 = SageLayer(hidden_dim, out_dim, activation)

    def embed(self, x: torch.Tensor, graph: RelationalGraph) -> torch.Tensor:
        """Raw second-layer output as points on the manifold"""
        if graph.spec != self.spec:
            raise InvalidSpecError(f"graph built on {graph.spec}, encoder expects {self.spec}")
        z = riemannian_sage_layer(self.layer1, x, graph, ManifoldSpec.euclidean(), self.spec)
        return riemannian_sage_layer(self.layer2, z, graph, self.spec, self.spec)

    def forward(self, x: torch.Tensor, graph: RelationalGraph) -> torch.Tensor:
        return logmap0_chart(self.embed(x, graph), self.spec)


@dataclass
class GeometryPrompt:
    """Origin tangent-chart coordinates of every node's prompt, one row per node"""

    spec: ManifoldSpec
    ids: List[str]
    matrix: torch.Tensor

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.ids):
            raise DimensionError(f"prompt has {self.matrix.shape[0]} rows for {len(self.ids)} ids")

    def to_frame(self) -> pd.DataFrame:
        values = self.matrix.detach().to(torch.float64).numpy()
        frame = pd.DataFrame(values, columns=[f"p{j}" for j in range(values.shape[1])])
        frame.insert(0, "id", self.ids)
        return frame

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path], spec: ManifoldSpec) -> "GeometryPrompt":
        frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
        columns = [c for c in frame.columns if c != "id"]
        if "id" not in frame.columns or not columns:
            raise DimensionError(f"prompt file {path} needs an id column and at least one p column")
        return cls(spec, frame["id"].tolist(), torch.from_numpy(frame[columns].to_numpy(dtype=np.float64)))


def encode(
    encoder: GeometryEncoder, x: torch.Tensor, graph: RelationalGraph, ids: Optional[List[str]] = None
) -> GeometryPrompt:
    with torch.no_grad():
        matrix = encoder(x, graph)
    ids = ids if ids is not None else [str(i) for i in range(graph.n)]
    return GeometryPrompt(encoder.spec, ids, matrix)


class PromptModel(nn.Module):
    """Per-geometry encoders with their Stage I regression read-outs"""

    def __init__(self, specs: Dict[str, ManifoldSpec], in_dim: int, config: PromptConfig):
        super().__init__()
        self.specs = dict(specs)
        self.in_dim = in_dim
        self.config = config
        self.encoders = nn.ModuleDict(
            {
                kind: GeometryEncoder(spec, in_dim, config.hidden_dim, config.out_dim, config.activation)
                for kind, spec in self.specs.items()
            }
        )
        self.readouts = nn.ModuleDict({kind: nn.Linear(config.out_dim, 1) for kind in self.specs})

    def predict(self, kind: str, x: torch.Tensor, graph: RelationalGraph) -> torch.Tensor:
        return self.readouts[kind](self.encoders[kind](x, graph)).squeeze(-1)


def build_prompt_model(bundle: GraphBundle, in_dim: int, config: PromptConfig, seed: int) -> PromptModel:
    torch.manual_seed(seed)
    specs = {kind: graph.spec for kind, graph in bundle.items()}
    return PromptModel(specs, in_dim, config)


# STAGE I ######################################################################


def node_split(n: int, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded transductive split into (train, validation) node indices"""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    if n - n_val < 1:
        n_val = n - 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def save_split(ids: List[str], train_idx: np.ndarray, val_idx: np.ndarray, path: Union[str, Path]) -> Path:
    """One row per node, in catalog order, labelled train or val"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = np.full(len(ids), "train", dtype=object)
    labels[np.asarray(val_idx, dtype=np.int64)] = "val"
    pd.DataFrame({"id": ids, "split": labels}).to_csv(path, index=False, lineterminator="\n")
    return path


def load_split(path: Union[str, Path], ids: List[str]) -> Tuple[np.ndarray, np.ndarray]:
    frame = pd.read_csv(path, dtype={"id": str, "split": str}, keep_default_na=False)
    if list(frame.columns) != ["id", "split"]:
        raise CatalogValidationError(f"split file {path} must have columns id,split")
    if frame["id"].tolist() != list(ids):
        raise CatalogValidationError(f"split file {path} does not match the catalog ids")
    unknown = set(frame["split"]) - {"train", "val"}
    if unknown:
        raise CatalogValidationError(f"split file {path} has unknown labels {sorted(unknown)}")
    is_val = (frame["split"] == "val").to_numpy()
    return np.flatnonzero(~is_val), np.flatnonzero(is_val)


@dataclass
class Stage1Result:
    model: PromptModel
    loss_traces: Dict[str, pd.DataFrame] = field(default_factory=dict)
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None

    def final_val_loss(self, kind: str) -> float:
        return float(self.loss_traces[kind]["val_loss"].iloc[-1])


def _mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.numel() == 0:
        return torch.tensor(float("nan"), dtype=pred.dtype)
    return torch.mean((pred - target) ** 2)


def stage1_train(
    model: PromptModel,
    bundle: GraphBundle,
    features: torch.Tensor,
    targets: torch.Tensor,
    config: PromptConfig,
    seed: int = 0,
) -> Stage1Result:
    """
    Train each geometry's encoder and read-out independently on full-graph MSE.
    The read-out starts at zero weight with its bias at the training-target mean.
    AdamW with step decay; one loss-trace row per epoch (train loss before the
    update, validation loss on held-out nodes).
    """
    if targets.shape[0] != features.shape[0]:
        raise DimensionError(f"{targets.shape[0]} targets for {features.shape[0]} feature rows")
    train_idx, val_idx = node_split(features.shape[0], config.val_fraction, seed)
    train_t = torch.from_numpy(train_idx)
    val_t = torch.from_numpy(val_idx)
    result = Stage1Result(model, train_idx=train_idx, val_idx=val_idx)

    for kind, graph in bundle.items():
        torch.manual_seed(seed)
        encoder, readout = model.encoders[kind], model.readouts[kind]
        with torch.no_grad():
            readout.weight.zero_()
            readout.bias.fill_(targets[train_t].mean().item())
        parameters = list(encoder.parameters()) + list(readout.parameters())
        optimizer = torch.optim.AdamW(parameters, lr=config.lr, weight_decay=config.weight_decay)
        scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=config.step_size, gamma=config.gamma)

        rows = []
        for epoch in range(1, config.epochs + 1):
            optimizer.zero_grad()
            pred = model.predict(kind, features, graph)
            loss = _mse(pred[train_t], targets[train_t])
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(epoch, value)
            loss.backward()
            optimizer.step()
            scheduler.step()
            val_loss = _mse(pred.detach()[val_t], targets[val_t]).item()
            rows.append({"epoch": epoch, "loss": value, "val_loss": val_loss})
            if epoch == 1 or epoch % 10 == 0 or epoch == config.epochs:
                logger.info(f"stage1 {kind} epoch {epoch}: loss={value:.6f} val_loss={val_loss:.6f}")

        result.loss_traces[kind] = pd.DataFrame(rows, columns=["epoch", "loss", "val_loss"])
    return result


def evaluate_stage1(
    model: PromptModel, bundle: GraphBundle, features: torch.Tensor, targets: torch.Tensor, idx: np.ndarray
) -> Dict[str, float]:
    """Per-geometry MSE on the given node subset with the current parameters"""
    idx_t = torch.from_numpy(idx)
    with torch.no_grad():
        return {
            kind: float(_mse(model.predict(kind, features, graph)[idx_t], targets[idx_t]))
            for kind, graph in bundle.items()
        }


def linear_baseline(
    features: np.ndarray,
    targets: np.ndarray,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    ridge: float = 1e-3,
) -> Dict[str, float]:
    """Graph-free ridge read-out on the raw features"""
    x = np.hstack([features, np.ones((len(features), 1))])
    x_train, y_train = x[train_idx], targets[train_idx]
    gram = x_train.T @ x_train + ridge * np.eye(x.shape[1])
    weights = np.linalg.solve(gram, x_train.T @ y_train)
    residual_train = x_train @ weights - y_train
    residual_val = x[val_idx] @ weights - targets[val_idx]
    return {
        "train_mse": float(np.mean(residual_train**2)),
        "val_mse": float(np.mean(residual_val**2)) if len(val_idx) else float("nan"),
    }


# PERSISTENCE ##################################################################


def save_prompt_model(model: PromptModel, path: Union[str, Path], meta: Dict = None) -> Path:
    payload = {
        "in_dim": model.in_dim,
        "prompt": model.config.model_dump(mode="json"),
        "specs": {kind: [spec.kind.value, spec.curvature] for kind, spec in model.specs.items()},
    }
    payload.update(meta or {})
    return save_checkpoint(path, ENCODER_CHECKPOINT_KIND, model.state_dict(), payload)


def load_prompt_model(path: Union[str, Path]) -> PromptModel:
    state, meta = load_checkpoint(path, kind=ENCODER_CHECKPOINT_KIND)
    specs = {kind: ManifoldSpec(ManifoldKind(k), float(c)) for kind, (k, c) in meta["specs"].items()}
    model = PromptModel(specs, int(meta["in_dim"]), PromptConfig.model_validate(meta["prompt"]))
    model.load_state_dict(state)
    return model
