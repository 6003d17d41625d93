"""
Check Router - runs the invariant suite and reports every failure by name
"""

import json
import logging
from pathlib import Path

from geowalk.core.commands import CommandRouter, arg
from geowalk.core.errors import EXIT_OK, CheckFailedError, ConfigurationError
from geowalk.routers.utils.report_utils import json_safe
from geowalk.services.self_check import CHECKS, results_payload, run_checks

logger = logging.getLogger(__name__)

router = CommandRouter()


@router.command(
    "check",
    help="run the kernel, gating, gradient and metric invariant checks",
    arguments=[
        arg("--only", nargs="+", default=None, metavar="NAME", help="run only the named checks"),
        arg("--seed", type=int, default=0),
        arg("--report", default=None, help="also write the JSON report to this path"),
        arg("--list", action="store_true", help="list the registered checks and exit"),
    ],
)
def check_command(args):
    if args.list:
        print("\n".join(CHECKS))
        return EXIT_OK

    try:
        results = run_checks(args.only, seed=args.seed)
    except KeyError as e:
        raise ConfigurationError(str(e.args[0]))

    payload = json_safe(results_payload(results))
    text = json.dumps(payload, sort_keys=True, indent=2)
    print(text)
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n", encoding="utf-8")

    if payload["failed"]:
        raise CheckFailedError(f"{len(payload['failed'])} of {payload['check_count']} checks failed: {payload['failed']}")
    logger.info(f"all {payload['check_count']} checks passed")
    return EXIT_OK
