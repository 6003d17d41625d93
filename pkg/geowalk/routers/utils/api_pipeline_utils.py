"""
Pipeline helpers - artifact loading and the work behind every pipeline command
Each function reads its upstream artifacts from data_dir, writes its own into
out_dir and returns the results block for the command summary
"""

import logging
from pathlib import Path
from typing import Dict, Tuple

import pandas as pd
import torch

from geowalk.core.config import (
    CATALOG_FILE,
    ENCODER_CHECKPOINT_FILE,
    GATE_TRACE_FILE,
    GRAPH_FILE_TEMPLATE,
    HOST_CHECKPOINT_FILE,
    LOSS_TRACE_TEMPLATE,
    METRIC_TRACE_FILE,
    PREDICTIONS_FILE,
    PROMPT_FILE_TEMPLATE,
    SPLIT_FILE,
    TARGETS_FILE,
)
from geowalk.core.errors import CatalogValidationError
from geowalk.core.run_config import RunConfig
from geowalk.routers.utils.report_utils import require, write_csv
from geowalk.services.backbone import save_host_model
from geowalk.services.catalog import (
    Catalog,
    CatalogTargets,
    load_catalog,
    load_targets,
    save_catalog,
    save_targets,
    synth_catalog,
)
from geowalk.services.geo_moe import GateTrace, contributions_frame
from geowalk.services.graph import GraphBundle, build_bundle, graph_statistics, load_bundle, save_bundle
from geowalk.services.manifold import ManifoldKind
from geowalk.services.prompt_encoder import (
    GeometryPrompt,
    build_prompt_model,
    encode,
    evaluate_stage1,
    linear_baseline,
    load_split,
    save_prompt_model,
    save_split,
    stage1_train,
)
from geowalk.services.training import (
    PREDICTION_COLUMNS,
    Dataset,
    build_dataset,
    geometry_ablation,
    insertion_sweep,
    predict,
    score_predictions,
    sweep_summary,
    train_host,
)

logger = logging.getLogger(__name__)

SWEEP_TRACE_TEMPLATE = "sweep_k{period}.csv"
SWEEP_SUMMARY_FILE = "sweep_summary.csv"
CONTRIBUTIONS_FILE = "expert_contributions.csv"


# ARTIFACT LOADING #############################################################


def load_catalog_inputs(data_dir: Path) -> Tuple[Catalog, CatalogTargets]:
    catalog = load_catalog(require(data_dir / CATALOG_FILE, "synth"))
    targets = load_targets(require(data_dir / TARGETS_FILE, "synth")).aligned_to(catalog)
    return catalog, targets


def load_graphs(data_dir: Path, catalog: Catalog) -> GraphBundle:
    for kind in ManifoldKind:
        require(data_dir / GRAPH_FILE_TEMPLATE.format(kind=kind.value), "build-graph")
    bundle = load_bundle(data_dir, GRAPH_FILE_TEMPLATE)
    if bundle.n != catalog.n:
        raise CatalogValidationError(f"graphs cover {bundle.n} nodes but the catalog has {catalog.n}")
    return bundle


def load_prompts(data_dir: Path, bundle: GraphBundle) -> Dict[str, GeometryPrompt]:
    prompts = {}
    for kind, graph in bundle.items():
        path = require(data_dir / PROMPT_FILE_TEMPLATE.format(kind=kind), "train-prompt")
        prompts[kind] = GeometryPrompt.load(path, graph.spec)
    return prompts


def load_dataset(data_dir: Path, run_config: RunConfig) -> Dataset:
    catalog, targets = load_catalog_inputs(data_dir)
    bundle = load_graphs(data_dir, catalog)
    prompts = load_prompts(data_dir, bundle)
    split = load_split(require(data_dir / SPLIT_FILE, "train-prompt"), catalog.ids)
    return build_dataset(catalog, targets, prompts, run_config.prompt.val_fraction, run_config.seed, split)


# COMMANDS #####################################################################


def synthesize(run_config: RunConfig, out_dir: Path) -> Dict:
    synth = run_config.synth
    catalog, targets = synth_catalog(
        run_config.seed, synth.n, synth.n_clusters, synth.depth, synth.feature_dim, synth.branching, synth.noise
    )
    save_catalog(catalog, out_dir / CATALOG_FILE)
    save_targets(targets, out_dir / TARGETS_FILE)
    return {
        "n": catalog.n,
        "feature_dim": catalog.feature_dim,
        "n_clusters": synth.n_clusters,
        "hierarchical_objects": int((targets.leaf_depth > 1).sum()),
        "files": [CATALOG_FILE, TARGETS_FILE],
    }


def build_graphs(run_config: RunConfig, data_dir: Path, out_dir: Path) -> Dict:
    catalog, _ = load_catalog_inputs(data_dir)
    g = run_config.graph
    bundle = build_bundle(
        catalog, g.k, g.hyperbolic_curvature, g.spherical_curvature, g.brute_force_limit, g.workers
    )
    paths = save_bundle(bundle, out_dir, GRAPH_FILE_TEMPLATE)
    stats = graph_statistics(bundle)
    stats["files"] = sorted(p.name for p in paths.values())
    return stats


def train_prompts(run_config: RunConfig, data_dir: Path, out_dir: Path) -> Dict:
    catalog, targets = load_catalog_inputs(data_dir)
    bundle = load_graphs(data_dir, catalog)
    features = torch.from_numpy(catalog.features).to(torch.float32)
    y = torch.from_numpy(targets.regression).to(torch.float32)

    model = build_prompt_model(bundle, catalog.feature_dim, run_config.prompt, run_config.seed)
    result = stage1_train(model, bundle, features, y, run_config.prompt, run_config.seed)
    save_prompt_model(model, out_dir / ENCODER_CHECKPOINT_FILE, {"seed": run_config.seed})
    save_split(catalog.ids, result.train_idx, result.val_idx, out_dir / SPLIT_FILE)

    val_mse = evaluate_stage1(model, bundle, features, y, result.val_idx) if len(result.val_idx) else {}
    for kind, graph in bundle.items():
        encode(model.encoders[kind], features, graph, catalog.ids).save(out_dir / PROMPT_FILE_TEMPLATE.format(kind=kind))
        write_csv(result.loss_traces[kind], out_dir / LOSS_TRACE_TEMPLATE.format(kind=kind))

    baseline = linear_baseline(catalog.features, targets.regression, result.train_idx, result.val_idx)
    return {
        "epochs": run_config.prompt.epochs,
        "final_loss": {k: float(t["loss"].iloc[-1]) if len(t) else None for k, t in result.loss_traces.items()},
        "val_mse": val_mse,
        "linear_baseline": baseline,
        "split": {"train": len(result.train_idx), "val": len(result.val_idx)},
    }


def train_adapter(run_config: RunConfig, data_dir: Path, out_dir: Path) -> Dict:
    dataset = load_dataset(data_dir, run_config)
    result = train_host(dataset, run_config)
    save_host_model(result.model, out_dir / HOST_CHECKPOINT_FILE, {"seed": run_config.seed})
    write_csv(result.trace, out_dir / METRIC_TRACE_FILE)

    trace = GateTrace(result.model.adapters()[0].columns) if result.model.adapters() else GateTrace()
    predictions = predict(result.model, dataset, dataset.val_idx, trace)
    write_csv(predictions, out_dir / PREDICTIONS_FILE)
    trace.save_csv(out_dir / GATE_TRACE_FILE)
    return {
        "metrics": result.metrics,
        "steps": result.steps,
        "trainable_parameters": result.trainable_parameters,
        "frozen_digest": result.frozen_digest_after,
        "adapter_layers": run_config.backbone.adapter_layers(),
    }


def evaluate_predictions(predictions_path: Path) -> Dict:
    require(predictions_path, "train-adapter")
    frame = pd.read_csv(predictions_path, dtype={"id": str}, float_precision="round_trip")
    missing = [c for c in PREDICTION_COLUMNS if c not in frame.columns]
    if missing:
        raise CatalogValidationError(f"predictions file {predictions_path} lacks columns {missing}")
    scores = score_predictions(frame)
    return {"n": len(frame), "r2": scores["r2"], "f1": scores["f1"]}


def analyze_experts(trace_path: Path, out_dir: Path) -> Dict:
    require(trace_path, "train-adapter")
    trace = GateTrace.load_csv(trace_path)
    table = contributions_frame(trace)
    write_csv(table, out_dir / CONTRIBUTIONS_FILE)
    return {
        "records": len(trace),
        "contributions": table.set_index("task")[trace.columns].to_dict(orient="index"),
        "sparsity": table.set_index("task")["sparsity"].to_dict(),
    }


def run_sweep(run_config: RunConfig, data_dir: Path, out_dir: Path) -> Dict:
    dataset = load_dataset(data_dir, run_config)
    runs = insertion_sweep(dataset, run_config)
    for period, run in runs.items():
        if run.ok:
            write_csv(run.trace, out_dir / SWEEP_TRACE_TEMPLATE.format(period=period))
    summary = sweep_summary(runs, run_config.sweep.loss_threshold)
    write_csv(summary, out_dir / SWEEP_SUMMARY_FILE)
    return {"runs": summary.to_dict(orient="records")}


def run_ablation(run_config: RunConfig, data_dir: Path) -> Dict:
    dataset = load_dataset(data_dir, run_config)
    return geometry_ablation(dataset, run_config)
