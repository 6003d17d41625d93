"""
Report helpers - JSON summaries and CSV artifacts for every command
Only the summary's metadata block varies between identical runs
"""

import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pandas as pd

from geowalk.core.config import OUTPUT_ROOT, SUMMARY_FILE
from geowalk.core.errors import DependencyMissingError
from geowalk.core.run_config import RunConfig, load_run_config, write_resolved_config

FORMAT_VERSION = "1"


def resolve_out_dir(out: str) -> Path:
    """Relative --out paths live under GEOWALK_OUTPUT_ROOT"""
    path = Path(out)
    if not path.is_absolute():
        path = Path(OUTPUT_ROOT) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def require(path: Path, produced_by: str) -> Path:
    if not Path(path).is_file():
        raise DependencyMissingError(str(path), produced_by)
    return Path(path)


def json_safe(value: Any) -> Any:
    """Plain JSON types; NaN and infinities become null"""
    if isinstance(value, dict):
        return {str(k): json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def write_summary(out_dir: Path, command: str, run_config: RunConfig, results: Dict) -> Path:
    """summary.json plus the resolved config it was produced with"""
    write_resolved_config(run_config, out_dir)
    summary = {
        "command": command,
        "config_hash": run_config.config_hash(),
        "results": json_safe(results),
        "metadata": {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "format_version": FORMAT_VERSION,
        },
    }
    path = out_dir / SUMMARY_FILE
    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def prepare_run(args, **overrides):
    """Resolved config, output directory and upstream data directory of a command"""
    run_config = load_run_config(args.config, seed=args.seed, **overrides)
    out_dir = resolve_out_dir(args.out)
    data = getattr(args, "data", None)
    data_dir = resolve_out_dir(data) if data else out_dir
    return run_config, out_dir, data_dir


def finish_run(command: str, run_config: RunConfig, out_dir: Path, results: Dict) -> int:
    write_summary(out_dir, command, run_config, results)
    return 0
