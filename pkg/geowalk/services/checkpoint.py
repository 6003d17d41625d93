"""
Checkpoint Service - versioned JSON container for model parameters
Tensors are stored as shape, dtype and row-major data; keys are sorted so the same
parameters always produce the same bytes
"""

import json
import logging
from pathlib import Path
from typing import Dict, Tuple, Union

import torch

from geowalk.core.errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "GEOWALK-CKPT"
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


def _encode_tensor(t: torch.Tensor) -> Dict:
    t = t.detach().cpu()
    name = str(t.dtype).replace("torch.", "")
    if name not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    return {"shape": list(t.shape), "dtype": name, "data": t.reshape(-1).tolist()}


def _decode_tensor(key: str, payload: Dict) -> torch.Tensor:
    try:
        dtype = _DTYPES[payload["dtype"]]
        shape = [int(s) for s in payload["shape"]]
        data = torch.tensor(payload["data"], dtype=dtype)
        return data.reshape(shape)
    except (KeyError, TypeError, ValueError, RuntimeError) as e:
        raise CheckpointError(f"tensor '{key}' is malformed: {e}")


def save_checkpoint(
    path: Union[str, Path], kind: str, state: Dict[str, torch.Tensor], meta: Dict = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": {key: _encode_tensor(value) for key, value in state.items()},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(document, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    logger.debug(f"wrote {kind} checkpoint with {len(state)} tensors to {path}")
    return path


def load_checkpoint(path: Union[str, Path], kind: str = None) -> Tuple[Dict[str, torch.Tensor], Dict]:
    """Return (state dict, meta); kind, when given, must match the stored kind"""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {e}")

    if not isinstance(document, dict) or document.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if document.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {document.get('version')}; expected {CHECKPOINT_VERSION}"
        )
    if kind is not None and document.get("kind") != kind:
        raise CheckpointError(f"checkpoint {path} holds '{document.get('kind')}', expected '{kind}'")

    tensors = document.get("tensors", {})
    state = {key: _decode_tensor(key, payload) for key, payload in tensors.items()}
    return state, document.get("meta", {})
