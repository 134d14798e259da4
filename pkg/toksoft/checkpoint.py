"""Checkpoint format for tables and parameter vectors.

A checkpoint is an `.npz` archive holding:

- `header`: JSON with `format_version`, `vocab_hash` (sha256 of the action
  vocabulary symbols), and caller metadata;
- for each tabular component `<name>`: `<name>.keys` (JSON list of
  `[state, prefix]` pairs in insertion order) and `<name>.rows`;
- for each parametric component `<name>`: `<name>.params`.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Union

import numpy as np

from .core import CheckpointError, Vocabulary
from .policy_q import Context, ParametricNet, ParametricPolicy, ParametricQ, PolicyTable, QTable

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

Component = Union[PolicyTable, QTable, ParametricPolicy, ParametricQ, ParametricNet]


def vocab_hash(vocab: Vocabulary) -> str:
    return hashlib.sha256("\x1f".join(vocab.tokens).encode("utf-8")).hexdigest()


def _net_of(obj: Component) -> ParametricNet:
    return obj if isinstance(obj, ParametricNet) else obj.net  # type: ignore[union-attr]


def save_checkpoint(path: Union[str, Path], vocab: Vocabulary, components: Mapping[str, Component],
                    meta: Mapping[str, Any] = ()) -> Path:
    path = Path(path)
    arrays: Dict[str, np.ndarray] = {}
    for name, obj in components.items():
        if isinstance(obj, (PolicyTable, QTable)):
            ctxs = list(obj.contexts())
            arrays[f"{name}.keys"] = np.array(json.dumps([[list(c.state), list(c.prefix)] for c in ctxs]))
            rows = [obj.probs(c) if isinstance(obj, PolicyTable) else obj.q_values(c) for c in ctxs]
            arrays[f"{name}.rows"] = np.array(rows).reshape(len(ctxs), obj.size)
        else:
            arrays[f"{name}.params"] = _net_of(obj).params.copy()
    header = {"format_version": FORMAT_VERSION, "vocab_hash": vocab_hash(vocab), "meta": dict(meta)}
    arrays["header"] = np.array(json.dumps(header))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            np.savez_compressed(fh, **arrays)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info("checkpoint written to %s", path)
    return path


def load_checkpoint(path: Union[str, Path], vocab: Vocabulary, components: Mapping[str, Component]) -> Dict[str, Any]:
    """Restore `components` in place and return the stored metadata.

    Raises:
        CheckpointError: on IO failure, version or vocabulary mismatch, or a missing component.
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
            if header.get("vocab_hash") != vocab_hash(vocab):
                raise CheckpointError(f"{path}: checkpoint was written for a different vocabulary")
            for name, obj in components.items():
                if isinstance(obj, (PolicyTable, QTable)):
                    if f"{name}.keys" not in data:
                        raise CheckpointError(f"{path}: no component {name!r}")
                    keys = json.loads(str(data[f"{name}.keys"]))
                    rows = data[f"{name}.rows"]
                    for (state, prefix), row in zip(keys, rows):
                        obj.set_row(Context(tuple(state), tuple(prefix)), row)
                else:
                    if f"{name}.params" not in data:
                        raise CheckpointError(f"{path}: no component {name!r}")
                    net = _net_of(obj)
                    params = data[f"{name}.params"]
                    if params.shape != net.params.shape:
                        raise CheckpointError(f"{path}: {name} has {params.shape} parameters, expected {net.params.shape}")
                    net.params[...] = params
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    return header.get("meta", {})
