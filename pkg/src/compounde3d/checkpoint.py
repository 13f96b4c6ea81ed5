"""Model checkpoints as ``.npz`` archives with an embedded JSON header."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .model import Model
from .variant import parse_variant

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not match the current dataset."""


def config_hash(config: dict | None) -> str:
    text = json.dumps(config or {}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path, model: Model, vocab_hash: str | None = None, config: dict | None = None, extra: dict | None = None) -> Path:
    """Write ``model`` bit-exactly; the header records variant, hashes and code version."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "variant": model.variant.render(),
        "norm_order": model.norm_order,
        "config": config or {},
        "config_hash": config_hash(config),
        "vocab_hash": vocab_hash,
        "code_version": __version__,
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    arrays["entity"] = model.entity
    for j, arr in enumerate(model.head_params):
        arrays[f"head_{j}"] = arr
    for j, arr in enumerate(model.tail_params):
        arrays[f"tail_{j}"] = arr
    # np.savez appends .npz to bare names; write through a handle to keep the path as given
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def read_meta(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as data:
            return json.loads(data["meta"].tobytes().decode("utf-8"))
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None


def load_checkpoint(path, expected_vocab_hash: str | None = None) -> tuple[Model, dict]:
    """Load a model; refuses archives whose vocab hash differs from ``expected_vocab_hash``."""
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(data["meta"].tobytes().decode("utf-8"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
            variant = parse_variant(meta["variant"])
            head = [data[f"head_{j}"] for j in range(len(variant.head))]
            tail = [data[f"tail_{j}"] for j in range(len(variant.tail))]
            entity = data["entity"]
    except CheckpointError:
        raise
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if expected_vocab_hash is not None and meta.get("vocab_hash") != expected_vocab_hash:
        raise CheckpointError(
            f"{path}: vocab hash {meta.get('vocab_hash')} does not match dataset vocab hash {expected_vocab_hash}"
        )
    return Model(entity, variant, head, tail, int(meta["norm_order"])), meta
