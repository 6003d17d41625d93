"""
Training Service - Stage II adapter training, objective, sweeps and ablations
The desk backbone is warm-fitted without adapters and frozen; Stage II then trains
only the adapters, modality projections, scaling factors and heads on
cross-entropy over class tokens plus lambda times smooth-L1 regression.
"""

import logging
import traceback
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from geowalk.core.errors import (
    CatalogValidationError,
    ConfigurationError,
    DivergenceError,
    EmptyInputError,
    GeoWalkError,
    UndefinedVarianceError,
)
from geowalk.core.run_config import BackboneConfig, RunConfig, TrainConfig
from geowalk.services.backbone import (
    TASKS,
    HostModel,
    count_trainable,
    freeze_backbone,
    parameter_digest,
)
from geowalk.services.catalog import Catalog, CatalogTargets
from geowalk.services.geo_moe import GateTrace, expert_contributions
from geowalk.services.metrics import f1_score, r2_score
from geowalk.services.prompt_encoder import GeometryPrompt, node_split

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["step", "task", "metric", "value"]
PREDICTION_COLUMNS = ["id", "regression_target", "regression_pred", "class_target", "class_pred"]
EVAL_BATCH = 512

_PROMPT_MODALITIES = {
    "prompt_euclidean": "euclidean",
    "prompt_hyperbolic": "hyperbolic",
    "prompt_spherical": "spherical",
}


# DATA #########################################################################


@dataclass
class Dataset:
    """Per-object modality inputs and targets with a fixed train/validation split"""

    ids: List[str]
    inputs: Dict[str, torch.Tensor]
    regression: np.ndarray
    classes: np.ndarray
    leaf_depth: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def modality_dims(self) -> Dict[str, int]:
        return {m: int(x.shape[-1]) for m, x in self.inputs.items()}

    @property
    def n_classes(self) -> int:
        return int(self.classes.max()) + 1

    @property
    def regression_mean(self) -> float:
        return float(self.regression[self.train_idx].mean())

    @property
    def regression_std(self) -> float:
        std = float(self.regression[self.train_idx].std())
        return std if std > 0 else 1.0

    def batch(self, idx: np.ndarray) -> Dict[str, torch.Tensor]:
        index = torch.from_numpy(np.asarray(idx, dtype=np.int64))
        return {m: x[index] for m, x in self.inputs.items()}

    def standardized(self, idx: np.ndarray) -> torch.Tensor:
        values = (self.regression[idx] - self.regression_mean) / self.regression_std
        return torch.from_numpy(values).to(torch.float32)


def build_dataset(
    catalog: Catalog,
    targets: CatalogTargets,
    prompts: Dict[str, GeometryPrompt],
    val_fraction: float,
    seed: int,
    split: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Dataset:
    """A given (train, validation) split replaces the seeded one"""
    targets = targets.aligned_to(catalog)
    inputs = {}
    for modality, kind in _PROMPT_MODALITIES.items():
        if kind not in prompts:
            raise CatalogValidationError(f"no {kind} prompts supplied")
        prompt = prompts[kind]
        if prompt.ids != catalog.ids:
            raise CatalogValidationError(f"{kind} prompt ids do not match the catalog")
        inputs[modality] = prompt.matrix.detach().to(torch.float32)
    inputs["feature"] = torch.from_numpy(catalog.features).to(torch.float32)
    train_idx, val_idx = split if split is not None else node_split(catalog.n, val_fraction, seed)
    if len(val_idx) == 0:
        raise CatalogValidationError("Stage II needs at least one validation node")
    return Dataset(
        catalog.ids, inputs, targets.regression, targets.classes, targets.leaf_depth, train_idx, val_idx
    )


# OBJECTIVE ####################################################################


def smooth_l1(pred, target, beta: float = 1.0) -> torch.Tensor:
    """Elementwise: 0.5 d^2 / beta below beta, |d| - 0.5 beta above"""
    if not beta > 0:
        raise ConfigurationError(f"smooth-L1 beta must be > 0, got {beta}")
    pred = torch.as_tensor(pred, dtype=torch.float64) if not isinstance(pred, torch.Tensor) else pred
    target = torch.as_tensor(target, dtype=pred.dtype) if not isinstance(target, torch.Tensor) else target
    return F.smooth_l1_loss(pred, target, reduction="none", beta=beta)


def combined_loss(
    class_logits: Optional[torch.Tensor],
    class_target: Optional[torch.Tensor],
    numeric_pred: Optional[torch.Tensor],
    numeric_target: Optional[torch.Tensor],
    lam: float = 1.0,
    beta: float = 1.0,
) -> torch.Tensor:
    """Cross-entropy over class tokens + lam * mean smooth-L1; an absent task adds 0"""
    has_class = class_logits is not None and class_logits.numel() > 0
    has_numeric = numeric_pred is not None and numeric_pred.numel() > 0
    if not (has_class or has_numeric):
        raise EmptyInputError("combined loss needs at least one task in the batch")
    loss = None
    if has_class:
        loss = F.cross_entropy(class_logits, class_target)
    if has_numeric:
        reg = lam * smooth_l1(numeric_pred, numeric_target, beta).mean()
        loss = reg if loss is None else loss + reg
    return loss


def _batch_loss(model: HostModel, dataset: Dataset, idx: np.ndarray, lam: float, beta: float):
    inputs = dataset.batch(idx)
    reg_out = model(inputs, "regression")
    cls_out = model(inputs, "classification")
    class_target = torch.from_numpy(dataset.classes[idx])
    numeric_target = dataset.standardized(idx).to(reg_out.numeric.dtype)
    loss = combined_loss(cls_out.logits, class_target, reg_out.numeric, numeric_target, lam, beta)
    parts = {
        "classification": float(F.cross_entropy(cls_out.logits.detach(), class_target)),
        "regression": float(smooth_l1(reg_out.numeric.detach(), numeric_target, beta).mean()),
    }
    return loss, parts


# EVALUATION ###################################################################


def predict(
    model: HostModel, dataset: Dataset, idx: np.ndarray, trace: GateTrace = None
) -> pd.DataFrame:
    """Predictions on the original target scale, one row per object"""
    reg_pred, cls_pred = [], []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(idx), EVAL_BATCH):
            chunk = idx[start : start + EVAL_BATCH]
            inputs = dataset.batch(chunk)
            reg_pred.append(model(inputs, "regression", trace).numeric.to(torch.float64).numpy())
            cls_pred.append(model(inputs, "classification", trace).logits.argmax(dim=-1).numpy())
    model.train()
    reg = np.concatenate(reg_pred) if reg_pred else np.zeros(0)
    return pd.DataFrame(
        {
            "id": [dataset.ids[i] for i in idx],
            "regression_target": dataset.regression[idx],
            "regression_pred": reg * dataset.regression_std + dataset.regression_mean,
            "class_target": dataset.classes[idx],
            "class_pred": np.concatenate(cls_pred) if cls_pred else np.zeros(0, dtype=np.int64),
        },
        columns=PREDICTION_COLUMNS,
    )


def score_predictions(predictions: pd.DataFrame, classes: Sequence[int] = None) -> Dict[str, float]:
    try:
        r2 = r2_score(predictions["regression_pred"], predictions["regression_target"])
    except UndefinedVarianceError as e:
        logger.warning(f"R2 not reported: {e}")
        r2 = float("nan")
    f1 = (
        f1_score(predictions["class_pred"], predictions["class_target"], classes)
        if len(predictions)
        else float("nan")
    )
    return {"r2": r2, "f1": f1}


def validation_loss(model: HostModel, dataset: Dataset, lam: float, beta: float) -> float:
    if not len(dataset.val_idx):
        return float("nan")
    model.eval()
    with torch.no_grad():
        loss, _ = _batch_loss(model, dataset, dataset.val_idx, lam, beta)
    model.train()
    return float(loss)


# WARM FIT AND STAGE II ########################################################


def _warmup_lambda(warmup_steps: int):
    if warmup_steps <= 0:
        return lambda step: 1.0
    return lambda step: min(1.0, (step + 1) / warmup_steps)


def _batches(train_idx: np.ndarray, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(train_idx)
    return [order[s : s + batch_size] for s in range(0, len(order), batch_size)]


def warm_fit(model: HostModel, dataset: Dataset, config: TrainConfig, seed: int = 0) -> pd.DataFrame:
    """
    Full-parameter fit of the backbone with adapters bypassed, then freeze it for
    Stage II and restart every Euclidean expert from its block's fitted FFN
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model.use_adapters = False
    params = [p for name, p in model.named_parameters() if ".adapter." not in name]
    for p in params:
        p.requires_grad_(True)
    optimizer = torch.optim.AdamW(params, lr=config.warm_fit_lr, weight_decay=config.weight_decay)

    rows, step = [], 0
    for epoch in range(1, config.warm_fit_epochs + 1):
        for idx in _batches(dataset.train_idx, config.batch_size, rng):
            optimizer.zero_grad()
            loss, _ = _batch_loss(model, dataset, idx, config.lam, config.beta)
            step += 1
            if not torch.isfinite(loss):
                raise DivergenceError(step, float(loss))
            loss.backward()
            optimizer.step()
            rows.append({"step": step, "task": "warm_fit", "metric": "loss", "value": float(loss)})
        logger.info(f"warm fit epoch {epoch}: loss={rows[-1]['value']:.6f}")

    model.use_adapters = True
    model.inherit_ffn()
    freeze_backbone(model, frozen=config.frozen_attention)
    return pd.DataFrame(rows, columns=TRACE_COLUMNS)


@dataclass
class Stage2Result:
    model: HostModel
    trace: pd.DataFrame
    metrics: Dict[str, float]
    trainable_parameters: int
    frozen_digest_before: str
    frozen_digest_after: str
    steps: int = 0

    @property
    def frozen_unchanged(self) -> bool:
        return self.frozen_digest_before == self.frozen_digest_after


def _eval_rows(step: int, model: HostModel, dataset: Dataset, config: TrainConfig, classes) -> List[Dict]:
    scores = score_predictions(predict(model, dataset, dataset.val_idx), classes)
    val_loss = validation_loss(model, dataset, config.lam, config.beta)
    return [
        {"step": step, "task": "regression", "metric": "val_r2", "value": scores["r2"]},
        {"step": step, "task": "classification", "metric": "val_f1", "value": scores["f1"]},
        {"step": step, "task": "combined", "metric": "val_loss", "value": val_loss},
    ]


def stage2_train(model: HostModel, dataset: Dataset, config: TrainConfig, seed: int = 0) -> Stage2Result:
    """
    Train adapters, projections, scaling factors and heads (everything when
    frozen_attention is off). The frozen-parameter digest is compared before and
    after; R2, F1 and validation loss are evaluated before training and after
    every epoch.
    """
    if dataset.n_classes > model.config.vocabulary:
        raise ConfigurationError(
            f"dataset has {dataset.n_classes} classes but the class head has {model.config.vocabulary}"
        )
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    freeze_backbone(model, frozen=config.frozen_attention)
    frozen_names = [name for name, p in model.named_parameters() if not p.requires_grad]
    digest_before = parameter_digest(model, frozen_names)

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, _warmup_lambda(config.warmup_steps))
    classes = list(range(model.config.vocabulary))

    rows = _eval_rows(0, model, dataset, config, classes)
    step = 0
    for epoch in range(1, config.epochs + 1):
        for idx in _batches(dataset.train_idx, config.batch_size, rng):
            optimizer.zero_grad()
            loss, parts = _batch_loss(model, dataset, idx, config.lam, config.beta)
            step += 1
            if not torch.isfinite(loss):
                raise DivergenceError(step, float(loss))
            loss.backward()
            optimizer.step()
            scheduler.step()
            rows.append({"step": step, "task": "combined", "metric": "loss", "value": float(loss)})
            rows.append({"step": step, "task": "classification", "metric": "cross_entropy", "value": parts["classification"]})
            rows.append({"step": step, "task": "regression", "metric": "smooth_l1", "value": parts["regression"]})
        rows.extend(_eval_rows(step, model, dataset, config, classes))
        logger.info(
            f"stage2 epoch {epoch}: loss={float(loss):.6f} "
            f"val_r2={rows[-3]['value']:.4f} val_f1={rows[-2]['value']:.4f}"
        )

    digest_after = parameter_digest(model, frozen_names)
    if digest_after != digest_before:
        raise GeoWalkError("frozen backbone parameters changed during Stage II")

    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    final = {r["metric"]: r["value"] for r in rows[-3:]}
    return Stage2Result(
        model=model,
        trace=trace,
        metrics=final,
        trainable_parameters=count_trainable(model),
        frozen_digest_before=digest_before,
        frozen_digest_after=digest_after,
        steps=step,
    )


def build_host_model(dataset: Dataset, backbone: BackboneConfig, seed: int) -> HostModel:
    torch.manual_seed(seed)
    return HostModel(backbone, dataset.modality_dims)


def train_host(dataset: Dataset, run_config: RunConfig, backbone: BackboneConfig = None) -> Stage2Result:
    """Build, warm-fit and Stage II train one host model"""
    backbone = backbone or run_config.backbone
    model = build_host_model(dataset, backbone, run_config.seed)
    warm = warm_fit(model, dataset, run_config.train, run_config.seed)
    result = stage2_train(model, dataset, run_config.train, run_config.seed)
    result.trace = pd.concat([warm, result.trace], ignore_index=True)
    return result


# SWEEP AND ABLATION ###########################################################


def steps_to_threshold(
    trace: pd.DataFrame, threshold: float, task: str = "combined", metric: str = "loss"
) -> Optional[int]:
    """First Stage II step whose value is at or below threshold, None if never"""
    rows = trace[(trace["task"] == task) & (trace["metric"] == metric)]
    hits = rows[rows["value"] <= threshold]
    return int(hits["step"].iloc[0]) if len(hits) else None


@dataclass
class SweepRun:
    period: int
    adapter_layers: List[int]
    trace: pd.DataFrame = None
    metrics: Dict[str, float] = field(default_factory=dict)
    trainable_parameters: int = 0
    error: str = None

    @property
    def ok(self) -> bool:
        return self.error is None


def insertion_sweep(dataset: Dataset, run_config: RunConfig, periods: Sequence[int] = None) -> Dict[int, SweepRun]:
    """Identical runs differing only in the adapter period; a failed run is recorded, not raised"""
    periods = sorted(set(periods or run_config.sweep.periods))
    runs = {}
    for period in periods:
        backbone = run_config.backbone.model_copy(update={"adapter_period": period})
        run = SweepRun(period, backbone.adapter_layers())
        try:
            result = train_host(dataset, run_config, backbone)
            run.trace = result.trace
            run.metrics = result.metrics
            run.trainable_parameters = result.trainable_parameters
        except GeoWalkError as e:
            logger.error(f"sweep run k={period} failed: {e.detail}")
            run.error = e.detail
        except Exception as e:
            logger.error(f"sweep run k={period} failed: {e}\n{traceback.format_exc()}")
            run.error = str(e)
        runs[period] = run
    return runs


def sweep_summary(runs: Dict[int, SweepRun], threshold: float = None) -> pd.DataFrame:
    """Steps to reach the loss threshold per period (default: worst final loss among runs)"""
    finished = {k: r for k, r in runs.items() if r.ok}
    if threshold is None and finished:
        threshold = max(
            float(r.trace[(r.trace["task"] == "combined") & (r.trace["metric"] == "loss")]["value"].iloc[-1])
            for r in finished.values()
        )
    rows = []
    for period, run in sorted(runs.items()):
        rows.append(
            {
                "period": period,
                "adapter_layers": " ".join(str(i) for i in run.adapter_layers),
                "trainable_parameters": run.trainable_parameters,
                "steps_to_threshold": steps_to_threshold(run.trace, threshold) if run.ok else None,
                "threshold": threshold,
                "val_r2": run.metrics.get("val_r2"),
                "val_f1": run.metrics.get("val_f1"),
                "val_loss": run.metrics.get("val_loss"),
                "error": run.error,
            }
        )
    return pd.DataFrame(rows)


def hierarchy_gate_means(model: HostModel, dataset: Dataset, idx: np.ndarray = None) -> Dict[str, Dict[str, float]]:
    """Mean gate weights over nested-cluster objects (leaf depth > 1) and flat ones"""
    idx = dataset.val_idx if idx is None else idx
    groups = {"hierarchical": idx[dataset.leaf_depth[idx] > 1], "flat": idx[dataset.leaf_depth[idx] <= 1]}
    columns = model.adapters()[0].columns if model.adapters() else None
    means = {}
    for group, members in groups.items():
        if not len(members) or columns is None:
            continue
        trace = GateTrace(columns)
        predict(model, dataset, members, trace)
        means[group] = trace.to_frame()[columns].mean().to_dict()
    return means


def geometry_ablation(dataset: Dataset, run_config: RunConfig) -> Dict:
    """Three-geometry adapter against an all-Euclidean control from the same seed"""
    variants = {
        "geometry": run_config.backbone.expert_kinds,
        "euclidean_control": ("euclidean", "euclidean", "euclidean"),
    }
    report = {}
    for name, kinds in variants.items():
        backbone = run_config.backbone.model_copy(update={"expert_kinds": tuple(kinds)})
        result = train_host(dataset, run_config, backbone)
        trace = GateTrace(result.model.adapters()[0].columns) if result.model.adapters() else GateTrace()
        predict(result.model, dataset, dataset.val_idx, trace)
        report[name] = {
            "expert_kinds": list(kinds),
            "val_loss": result.metrics.get("val_loss"),
            "val_r2": result.metrics.get("val_r2"),
            "val_f1": result.metrics.get("val_f1"),
            "trainable_parameters": result.trainable_parameters,
            "contributions": expert_contributions(trace).to_dict(orient="index") if len(trace) else {},
            "hierarchy_gate_means": hierarchy_gate_means(result.model, dataset),
        }
    geometry, control = report["geometry"], report["euclidean_control"]
    report["geometry_beats_control"] = bool(geometry["val_loss"] < control["val_loss"])
    hier = geometry["hierarchy_gate_means"]
    if "hierarchical" in hier and "flat" in hier and "w_h" in hier["hierarchical"]:
        report["hyperbolic_prefers_hierarchy"] = bool(hier["hierarchical"]["w_h"] > hier["flat"]["w_h"])
    return report
