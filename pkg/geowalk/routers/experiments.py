"""
Experiments Router - adapter insertion sweep and geometry ablation
"""

from geowalk.core.commands import CommandRouter, arg
from geowalk.routers.pipeline import COMMON_ARGUMENTS, DATA_ARGUMENT
from geowalk.routers.utils.api_pipeline_utils import run_ablation, run_sweep
from geowalk.routers.utils.report_utils import finish_run, prepare_run

router = CommandRouter(common=COMMON_ARGUMENTS + [DATA_ARGUMENT])


@router.command(
    "sweep",
    help="train one adapter model per insertion period and compare convergence",
    arguments=[
        arg("--periods", type=int, nargs="+", default=None, help="insertion periods to compare"),
        arg("--epochs", type=int, default=None),
        arg("--threshold", type=float, default=None, help="training loss counted as converged (default: worst final loss)"),
    ],
)
def sweep_command(args):
    run_config, out_dir, data_dir = prepare_run(
        args,
        **{
            "sweep.periods": args.periods,
            "sweep.loss_threshold": args.threshold,
            "train.epochs": args.epochs,
        },
    )
    return finish_run("sweep", run_config, out_dir, run_sweep(run_config, data_dir, out_dir))


@router.command(
    "ablate",
    help="compare the mixed-geometry adapter against an all-euclidean control",
    arguments=[arg("--epochs", type=int, default=None)],
)
def ablate_command(args):
    run_config, out_dir, data_dir = prepare_run(args, **{"train.epochs": args.epochs})
    return finish_run("ablate", run_config, out_dir, run_ablation(run_config, data_dir))
