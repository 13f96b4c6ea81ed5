"""Self-adversarial negative-sampling loss, sparse Adam and the training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .data import FilterIndex, TripleStore, build_filter_index
from .evaluation import evaluate
from .model import Model

logger = logging.getLogger(__name__)

CORRUPT_HEAD, CORRUPT_TAIL = 0, 1


class NumericError(FloatingPointError):
    """Non-finite loss; ``triple`` is the first offending positive."""

    def __init__(self, message: str, triple=None):
        super().__init__(message)
        self.triple = triple


@dataclass
class LossConfig:
    margin: float = 6.0
    temperature: float = 1.0
    num_negatives: int = 128
    corruption: str = "both"  # head | tail | both

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.num_negatives < 1:
            raise ValueError("num_negatives must be >= 1")
        if self.corruption not in ("head", "tail", "both"):
            raise ValueError("corruption must be head, tail or both")


@dataclass
class TrainConfig:
    batch_size: int = 512
    max_steps: int = 1000
    eval_every: int = 0  # 0 disables periodic validation
    seed: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    normalize_entities: bool = False
    valid_max_queries: int = 0  # 0 = whole valid split
    log_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


class SparseGrad(NamedTuple):
    rows: np.ndarray
    values: np.ndarray


# ---------------------------------------------------------------------------
# negatives and weights


def sample_negatives(batch, num_entities: int, cfg: LossConfig, rng: np.random.Generator):
    """Corrupt each positive ``cfg.num_negatives`` times.

    Returns ``(negatives, modes)``: ``negatives`` has shape ``(B, N, 3)`` and
    ``modes[b]`` says which side of positive ``b`` was corrupted. With
    ``corruption="both"`` the side is a fair coin per positive. The
    replacement entity is uniform over all entities other than the original.
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    b, n = len(batch), cfg.num_negatives
    if cfg.corruption == "head":
        modes = np.full(b, CORRUPT_HEAD)
    elif cfg.corruption == "tail":
        modes = np.full(b, CORRUPT_TAIL)
    else:
        modes = rng.integers(0, 2, size=b)
    original = np.where(modes == CORRUPT_TAIL, batch[:, 2], batch[:, 0])[:, None]
    if num_entities > 1:
        # uniform over the other |E|-1 ids: draw from [0, |E|-1) and skip the original
        draw = rng.integers(0, num_entities - 1, size=(b, n))
        draw = draw + (draw >= original)
    else:
        draw = np.broadcast_to(original, (b, n)).copy()
    negatives = np.repeat(batch[:, None, :], n, axis=1)
    tail_rows = modes == CORRUPT_TAIL
    negatives[tail_rows, :, 2] = draw[tail_rows]
    negatives[~tail_rows, :, 0] = draw[~tail_rows]
    return negatives, modes


def self_adversarial_weights(neg_scores, temperature: float) -> np.ndarray:
    """Softmax of ``temperature * score`` over the last axis (no gradient path)."""
    z = temperature * np.asarray(neg_scores, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def loss_from_scores(pos_scores, neg_scores, cfg: LossConfig, weights=None):
    """Batch-mean loss and its derivatives w.r.t. the scores.

    ``pos_scores`` is ``(B,)`` and ``neg_scores`` ``(B, N)``. The negative
    weights are computed from the scores (unless given) but treated as
    constants. Returns ``(loss, per_positive_loss, d_pos, d_neg)``.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    w = self_adversarial_weights(neg, cfg.temperature) if weights is None else np.asarray(weights)
    per_pos = -_log_sigmoid(cfg.margin - pos) - (w * _log_sigmoid(neg - cfg.margin)).sum(axis=-1)
    b = pos.shape[0]
    loss = float(per_pos.mean()) if b else 0.0
    d_pos = _sigmoid(pos - cfg.margin) / b
    d_neg = -w * _sigmoid(cfg.margin - neg) / b
    return loss, per_pos, d_pos, d_neg


# ---------------------------------------------------------------------------
# gradients


def _norm_and_grad(diff: np.ndarray, order: int):
    if order == 1:
        return np.abs(diff).sum(axis=-1), np.sign(diff)
    norm = np.sqrt((diff * diff).sum(axis=-1))
    safe = np.where(norm > 0, norm, 1.0)
    return norm, diff / safe[..., None]


def segment_sum(ids: np.ndarray, values: np.ndarray) -> SparseGrad:
    """Sum rows of ``values`` that share an id; ids come back sorted and unique."""
    ids = ids.reshape(-1)
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    summed = np.add.reduceat(values[order], starts, axis=0) if len(order) else values[:0]
    return SparseGrad(sorted_ids[starts], summed)


def _flat(ids, grads, row_shape):
    ids = np.broadcast_to(np.asarray(ids), grads.shape[: grads.ndim - len(row_shape)])
    return ids.reshape(-1), grads.reshape((-1,) + row_shape)


def loss_and_grad(model: Model, batch, negatives, modes, cfg: LossConfig, fixed_weights=None):
    """Loss over a batch and sparse gradients for every parameter array.

    Returns ``(loss, grads)`` where ``grads`` maps parameter names (see
    :meth:`Model.parameters`) to :class:`SparseGrad` row updates. Raises
    :class:`NumericError` if the loss is not finite. ``fixed_weights``
    (shape ``(B, N)``) replaces the self-adversarial weights; finite
    difference checks use it to freeze them.
    """
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    negatives = np.asarray(negatives, dtype=np.int64)
    modes = np.asarray(modes)
    n_blocks, dim = model.num_blocks, model.dim
    h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
    b, n = negatives.shape[0], negatives.shape[1]

    fh, cache_h = model.transform("head", r, model.blocks(h), keep_cache=True)
    ft, cache_t = model.transform("tail", r, model.blocks(t), keep_cache=True)
    pos_score, pos_dir = _norm_and_grad((fh - ft).reshape(b, dim), model.norm_order)

    tail_rows = np.flatnonzero(modes == CORRUPT_TAIL)
    head_rows = np.flatnonzero(modes != CORRUPT_TAIL)
    neg_score = np.empty((b, n))

    # corrupted side transforms: tails for tail-mode rows, heads for head-mode rows
    neg_t_ids = negatives[tail_rows, :, 2]
    neg_ft, cache_nt = model.transform("tail", r[tail_rows, None], model.blocks(neg_t_ids), keep_cache=True)
    diff_t = fh[tail_rows, None] - neg_ft
    s_t, dir_t = _norm_and_grad(diff_t.reshape(len(tail_rows), n, dim), model.norm_order)
    neg_score[tail_rows] = s_t

    neg_h_ids = negatives[head_rows, :, 0]
    neg_fh, cache_nh = model.transform("head", r[head_rows, None], model.blocks(neg_h_ids), keep_cache=True)
    diff_h = neg_fh - ft[head_rows, None]
    s_h, dir_h = _norm_and_grad(diff_h.reshape(len(head_rows), n, dim), model.norm_order)
    neg_score[head_rows] = s_h

    loss, per_pos, d_pos, d_neg = loss_from_scores(pos_score, neg_score, cfg, fixed_weights)
    if not np.isfinite(loss):
        bad = int(np.flatnonzero(~np.isfinite(per_pos))[0]) if np.any(~np.isfinite(per_pos)) else 0
        raise NumericError(f"non-finite loss at triple {batch[bad].tolist()}", batch[bad].tolist())

    # d loss / d (fh - ft) for positives
    g_pos = (d_pos[:, None] * pos_dir).reshape(b, n_blocks, 3)
    g_fh = g_pos.copy()
    g_ft = -g_pos
    g_t = (d_neg[tail_rows, :, None] * dir_t).reshape(len(tail_rows), n, n_blocks, 3)
    g_fh[tail_rows] += g_t.sum(axis=1)
    g_h = (d_neg[head_rows, :, None] * dir_h).reshape(len(head_rows), n, n_blocks, 3)
    g_ft[head_rows] -= g_h.sum(axis=1)

    ent_ids, ent_grads = [], []
    rel_grads: dict[str, list] = {}

    def push(side, rel, ids, cache, g_out):
        gx, gp = model.transform_backward(side, rel, cache, g_out)
        i, v = _flat(ids, gx, (n_blocks, 3))
        ent_ids.append(i)
        ent_grads.append(v.reshape(-1, dim))
        for j, gj in enumerate(gp):
            ri, rv = _flat(rel, gj, (n_blocks, gj.shape[-1]))
            rel_grads.setdefault(f"{side}.{j}", []).append((ri, rv))

    push("head", r, h, cache_h, g_fh)
    push("tail", r, t, cache_t, g_ft)
    push("tail", r[tail_rows, None], neg_t_ids, cache_nt, -g_t)
    push("head", r[head_rows, None], neg_h_ids, cache_nh, g_h)

    grads = {"entity": segment_sum(np.concatenate(ent_ids), np.concatenate(ent_grads))}
    for name, parts in rel_grads.items():
        grads[name] = segment_sum(
            np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
        )
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SparseAdam:
    """Adam with lazy row updates: only rows present in a gradient move.

    Bias correction uses the global step count, as in the usual sparse Adam.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, SparseGrad]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, (rows, g) in grads.items():
            param = params[name]
            if name not in self.moments:
                self.moments[name] = (np.zeros_like(param), np.zeros_like(param))
            m, v = self.moments[name]
            m_rows = self.beta1 * m[rows] + (1.0 - self.beta1) * g
            v_rows = self.beta2 * v[rows] + (1.0 - self.beta2) * g * g
            m[rows] = m_rows
            v[rows] = v_rows
            param[rows] -= self.learning_rate * (m_rows / bc1) / (np.sqrt(v_rows / bc2) + self.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    log: list[dict] = field(default_factory=list)
    best_valid_mrr: float | None = None
    best_step: int | None = None
    final_model: Model | None = None
    losses: list[float] = field(default_factory=list)


def _batches(num_train: int, batch_size: int, rng: np.random.Generator):
    batch_size = min(batch_size, num_train)
    while True:
        perm = rng.permutation(num_train)
        for start in range(0, num_train - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def validation_mrr(model: Model, store: TripleStore, filter_index: FilterIndex, max_queries: int = 0) -> float:
    valid = store.valid
    if max_queries and len(valid) > max_queries:
        valid = valid[:max_queries]
    if len(valid) == 0:
        return float("nan")
    return evaluate(model, valid, filter_index).mrr


def train(
    model: Model,
    store: TripleStore,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    filter_index: FilterIndex | None = None,
    log_path: str | Path | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minibatch sparse-Adam training of ``model`` in place.

    With ``eval_every > 0`` the validation MRR is measured periodically and
    at the end; ``TrainResult.model`` is then the best-validation snapshot
    (``final_model`` keeps the last iterate). Without validation both are
    the trained model.
    """
    rng = np.random.default_rng(train_cfg.seed)
    params = model.parameters()
    opt = SparseAdam(train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    if filter_index is None and train_cfg.eval_every:
        filter_index = build_filter_index(store)
    log: list[dict] = []
    result = TrainResult(model=model)
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    start = time.perf_counter()
    batches = _batches(len(store.train), train_cfg.batch_size, rng) if len(store.train) else None

    def record(entry):
        log.append(entry)
        if log_file:
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()
        if on_record:
            on_record(entry)

    def validate(step, loss):
        mrr = validation_mrr(model, store, filter_index, train_cfg.valid_max_queries)
        record({"step": step, "loss": loss, "val_mrr": mrr, "wall_time": round(time.perf_counter() - start, 4)})
        if result.best_valid_mrr is None or mrr > result.best_valid_mrr:
            result.best_valid_mrr = mrr
            result.best_step = step
            result.model = model.copy()

    try:
        loss = float("nan")
        for step in range(1, train_cfg.max_steps + 1):
            idx = next(batches)
            batch = store.train[idx]
            negatives, modes = sample_negatives(batch, model.num_entities, loss_cfg, rng)
            loss, grads = loss_and_grad(model, batch, negatives, modes, loss_cfg)
            opt.step(params, grads)
            result.losses.append(loss)
            if train_cfg.normalize_entities:
                rows = grads["entity"].rows
                norms = np.linalg.norm(model.entity[rows], axis=1, keepdims=True)
                model.entity[rows] /= np.maximum(norms, 1e-12)
            if train_cfg.eval_every and step % train_cfg.eval_every == 0:
                validate(step, loss)
            elif (train_cfg.log_every and step % train_cfg.log_every == 0) or step == train_cfg.max_steps:
                record({"step": step, "loss": loss, "val_mrr": None,
                        "wall_time": round(time.perf_counter() - start, 4)})
        if train_cfg.eval_every and train_cfg.max_steps and train_cfg.max_steps % train_cfg.eval_every:
            validate(train_cfg.max_steps, loss)
    finally:
        if log_file:
            log_file.close()

    result.log = log
    result.final_model = model
    if result.best_valid_mrr is None:
        result.model = model
    return result


def config_dict(loss_cfg: LossConfig, train_cfg: TrainConfig) -> dict:
    return {"loss": asdict(loss_cfg), "train": asdict(train_cfg)}
