"""
Pipeline Router - synth, build-graph, train-prompt, train-adapter, evaluate, analyze-experts
"""

from pathlib import Path

from geowalk.core.commands import CommandRouter, arg
from geowalk.core.config import GATE_TRACE_FILE, PREDICTIONS_FILE
from geowalk.routers.utils.api_pipeline_utils import (
    analyze_experts,
    build_graphs,
    evaluate_predictions,
    synthesize,
    train_adapter,
    train_prompts,
)
from geowalk.routers.utils.report_utils import finish_run, prepare_run

COMMON_ARGUMENTS = [
    arg("--out", required=True, help="output directory (relative paths resolve under GEOWALK_OUTPUT_ROOT)"),
    arg("--config", default=None, help="JSON run configuration"),
    arg("--seed", type=int, default=None, help="global seed (overrides the config)"),
]
DATA_ARGUMENT = arg("--data", default=None, help="directory holding upstream artifacts (default: --out)")

router = CommandRouter(common=COMMON_ARGUMENTS)


@router.command(
    "synth",
    help="synthesize a hierarchical catalog and its targets",
    arguments=[
        arg("--n", type=int, default=None),
        arg("--clusters", type=int, default=None),
        arg("--depth", type=int, default=None),
        arg("--feature-dim", type=int, default=None),
    ],
)
def synth_command(args):
    run_config, out_dir, _ = prepare_run(
        args,
        **{
            "synth.n": args.n,
            "synth.n_clusters": args.clusters,
            "synth.depth": args.depth,
            "synth.feature_dim": args.feature_dim,
        },
    )
    return finish_run("synth", run_config, out_dir, synthesize(run_config, out_dir))


@router.command(
    "build-graph",
    help="build the euclidean, hyperbolic and spherical KNN graphs",
    arguments=[DATA_ARGUMENT, arg("--k", type=int, default=None), arg("--workers", type=int, default=None)],
)
def build_graph_command(args):
    run_config, out_dir, data_dir = prepare_run(args, **{"graph.k": args.k, "graph.workers": args.workers})
    return finish_run("build-graph", run_config, out_dir, build_graphs(run_config, data_dir, out_dir))


@router.command(
    "train-prompt",
    help="Stage I: train the geometry prompt encoders and export prompts",
    arguments=[DATA_ARGUMENT, arg("--epochs", type=int, default=None)],
)
def train_prompt_command(args):
    run_config, out_dir, data_dir = prepare_run(args, **{"prompt.epochs": args.epochs})
    return finish_run("train-prompt", run_config, out_dir, train_prompts(run_config, data_dir, out_dir))


@router.command(
    "train-adapter",
    help="Stage II: warm-fit the host, freeze it and train the geometry adapters",
    arguments=[
        DATA_ARGUMENT,
        arg("--epochs", type=int, default=None),
        arg("--period", type=int, default=None, help="adapter insertion period k"),
    ],
)
def train_adapter_command(args):
    run_config, out_dir, data_dir = prepare_run(
        args, **{"train.epochs": args.epochs, "backbone.adapter_period": args.period}
    )
    return finish_run("train-adapter", run_config, out_dir, train_adapter(run_config, data_dir, out_dir))


@router.command(
    "evaluate",
    help="R2 and macro F1 of a predictions file",
    arguments=[arg("--predictions", default=None, help=f"predictions CSV (default: <data>/{PREDICTIONS_FILE})"), DATA_ARGUMENT],
)
def evaluate_command(args):
    run_config, out_dir, data_dir = prepare_run(args)
    path = Path(args.predictions) if args.predictions else data_dir / PREDICTIONS_FILE
    return finish_run("evaluate", run_config, out_dir, evaluate_predictions(path))


@router.command(
    "analyze-experts",
    help="per-task mean gate weights and sparsity from a gate trace",
    arguments=[arg("--trace", default=None, help=f"gate trace CSV (default: <data>/{GATE_TRACE_FILE})"), DATA_ARGUMENT],
)
def analyze_experts_command(args):
    run_config, out_dir, data_dir = prepare_run(args)
    path = Path(args.trace) if args.trace else data_dir / GATE_TRACE_FILE
    return finish_run("analyze-experts", run_config, out_dir, analyze_experts(path, out_dir))
