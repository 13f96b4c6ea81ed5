"""Stage-wise beam search over variants.

Stage 1 trains every single operator pair. Each later stage extends every
frontier variant by every pair (the new operators are prepended, i.e. they
left-multiply the existing chains), trains the children and keeps the top
``k``. The search stops once no child fits the operator budget, when the
best MRR gain per added parameter of a stage drops below ``gamma``, or at
the stage cap. The answer is the best variant over every stage.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .data import FilterIndex, TripleStore, build_filter_index
from .geometry import CHAIN_KINDS, OperatorKind
from .model import Model, _init_op_params, init_model, param_count
from .training import LossConfig, TrainConfig, train, validation_mrr
from .variant import VariantSpec, parse_variant

logger = logging.getLogger(__name__)

IDENTITY = OperatorKind.IDENTITY


class SearchError(RuntimeError):
    """Every candidate of a stage failed to train."""


@dataclass(frozen=True)
class OperatorPair:
    head: OperatorKind
    tail: OperatorKind

    def __post_init__(self):
        head, tail = OperatorKind(self.head), OperatorKind(self.tail)
        if head is IDENTITY and tail is IDENTITY:
            raise ValueError("an operator pair needs at least one non-identity side")
        if head is not IDENTITY and tail is not IDENTITY and head is not tail:
            raise ValueError(f"paired operators must be the same kind, got {head.value}/{tail.value}")
        object.__setattr__(self, "head", head)
        object.__setattr__(self, "tail", tail)

    @property
    def op_count(self) -> int:
        return (self.head is not IDENTITY) + (self.tail is not IDENTITY)

    def render(self) -> str:
        return f"({self.head.value},{self.tail.value})"


def enumerate_pairs() -> list[OperatorPair]:
    """The 15 pairs: head-only, tail-only, then same kind on both sides."""
    pairs = [OperatorPair(k, IDENTITY) for k in CHAIN_KINDS]
    pairs += [OperatorPair(IDENTITY, k) for k in CHAIN_KINDS]
    pairs += [OperatorPair(k, k) for k in CHAIN_KINDS]
    return pairs


def extend_variant(base: VariantSpec | None, pair: OperatorPair) -> VariantSpec:
    """Prepend ``pair`` to ``base``; ``None`` is the empty stage-0 variant."""
    head = base.head if base is not None else ()
    tail = base.tail if base is not None else ()
    if pair.head is not IDENTITY:
        head = (pair.head,) + head
    if pair.tail is not IDENTITY:
        tail = (pair.tail,) + tail
    return VariantSpec(head, tail)


@dataclass
class SearchConfig:
    """Search budget.

    ``iterations`` is the per-candidate training length ``l`` (30000 in
    the full-scale setting; small values suit desk runs). ``gamma`` is in
    validation MRR per added free parameter.
    """

    beam_width: int = 3
    iterations: int = 2000
    max_ops: int = 4
    gamma: float = 1e-9
    max_stages: int = 10
    seed: int = 0
    workers: int = 1
    warm_start: bool = False

    def __post_init__(self):
        if self.beam_width < 1 or self.iterations < 1 or self.max_ops < 1 or self.max_stages < 1:
            raise ValueError("beam_width, iterations, max_ops and max_stages must be >= 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class CandidateRecord:
    variant: str
    stage: int
    parent: str | None
    pair: str
    mrr: float | None
    delta_mrr: float | None
    delta_param: int
    param_count: int
    op_count: int
    seed: int
    wall_time: float
    status: str = "ok"
    error: str | None = None
    checkpoint: str | None = None
    best_so_far: float | None = None
    best_variant_so_far: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def spec(self) -> VariantSpec:
        return parse_variant(self.variant)


@dataclass
class SearchResult:
    best: CandidateRecord
    records: list[CandidateRecord]
    stages: list[dict] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def best_variant(self) -> VariantSpec:
        return self.best.spec()

    @property
    def final_frontier(self) -> list[str]:
        return self.stages[-1]["frontier"] if self.stages else []


class Trainer(Protocol):
    def __call__(self, variant: VariantSpec, store: TripleStore, filter_index: FilterIndex, seed: int,
                 iterations: int, init: Model | None = None) -> tuple[float, Model | None]: ...


@dataclass
class DefaultTrainer:
    """Trains one candidate from scratch and scores it by validation MRR.

    ``train.max_steps`` and ``train.seed`` are replaced per call.
    """

    num_entities: int
    num_relations: int
    dim: int = 48
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    norm_order: int = 2

    def make_model(self, variant: VariantSpec, seed: int) -> Model:
        return init_model(self.num_entities, self.num_relations, self.dim, variant,
                          seed=seed, margin=self.loss.margin, norm_order=self.norm_order)

    def __call__(self, variant, store, filter_index, seed, iterations, init=None):
        model = init if init is not None else self.make_model(variant, seed)
        cfg = TrainConfig(**{**asdict(self.train), "seed": seed, "max_steps": iterations})
        result = train(model, store, self.loss, cfg, filter_index)
        best = result.model
        mrr = result.best_valid_mrr
        if mrr is None:
            mrr = validation_mrr(best, store, filter_index, cfg.valid_max_queries)
        return float(mrr), best


def warm_start_model(parent: Model, child: VariantSpec, pair: OperatorPair, seed: int) -> Model:
    """Child initialised from a trained parent: parent chains are kept, new ops start fresh."""
    rng = np.random.default_rng(seed)
    shape = (parent.num_relations, parent.num_blocks)
    head = [p.copy() for p in parent.head_params]
    tail = [p.copy() for p in parent.tail_params]
    if pair.head is not IDENTITY:
        head.insert(0, _init_op_params(pair.head, shape, rng))
    if pair.tail is not IDENTITY:
        tail.insert(0, _init_op_params(pair.tail, shape, rng))
    return Model(parent.entity.copy(), child, head, tail, parent.norm_order)


def _rank_key(rec: CandidateRecord):
    # best MRR first, then fewer parameters, then fewer tail operators (an
    # untransformed tail side lets all-tail scoring reuse the entity table),
    # then variant text
    return (-rec.mrr, rec.param_count, len(rec.spec().tail), rec.variant)


def select_best(records) -> CandidateRecord | None:
    ok = [r for r in records if r.ok and r.mrr is not None]
    return min(ok, key=_rank_key) if ok else None


@dataclass
class _Job:
    variant: VariantSpec
    parent: CandidateRecord | None
    pair: OperatorPair


def _run_job(trainer, variant, store, filter_index, seed, iterations, init):
    start = time.perf_counter()
    mrr, model = trainer(variant, store, filter_index, seed, iterations, init)
    return mrr, model, time.perf_counter() - start


def beam_search(
    store: TripleStore,
    search_cfg: SearchConfig,
    trainer: Trainer,
    num_entities: int,
    num_relations: int,
    dim: int,
    filter_index: FilterIndex | None = None,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    vocab_hash: str | None = None,
    on_record: Callable[[CandidateRecord], None] | None = None,
) -> SearchResult:
    """Run the search; every trained candidate is logged (JSON lines when ``log_path`` is set).

    ``num_entities``, ``num_relations`` and ``dim`` are used for parameter
    accounting only; ``trainer`` owns model construction.
    """
    if filter_index is None:
        filter_index = build_filter_index(store)
    pairs = enumerate_pairs()
    base_params = num_entities * dim
    records: list[CandidateRecord] = []
    stages: list[dict] = []
    models: dict[str, Model] = {}
    seen: set[str] = set()
    frontier: list[CandidateRecord | None] = [None]
    best: CandidateRecord | None = None
    stop_reason = "stage cap"
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    pool = ProcessPoolExecutor(search_cfg.workers) if search_cfg.workers > 1 else None

    def emit(entry: dict):
        if log_file:
            log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            log_file.flush()

    try:
        for stage in range(1, search_cfg.max_stages + 1):
            jobs, skipped = [], 0
            for parent in frontier:
                parent_spec = parent.spec() if parent is not None else None
                for pair in pairs:
                    child = extend_variant(parent_spec, pair)
                    if child.op_count > search_cfg.max_ops:
                        skipped += 1
                        continue
                    key = child.render()
                    if key in seen:
                        continue
                    seen.add(key)
                    jobs.append(_Job(child, parent, pair))
            if not jobs:
                stop_reason = "operator budget"
                break

            inits = []
            for job in jobs:
                init = None
                if search_cfg.warm_start and job.parent is not None and job.parent.variant in models:
                    init = warm_start_model(models[job.parent.variant], job.variant, job.pair, search_cfg.seed)
                inits.append(init)
            if pool is not None:
                futures = [pool.submit(_run_job, trainer, job.variant, store, filter_index, search_cfg.seed,
                                       search_cfg.iterations, init)
                           for job, init in zip(jobs, inits)]
                outcomes = []
                for fut in futures:
                    try:
                        outcomes.append(fut.result())
                    except Exception as exc:  # noqa: BLE001 - a failed candidate is logged and dropped
                        outcomes.append(exc)
            else:
                outcomes = []
                for job, init in zip(jobs, inits):
                    try:
                        outcomes.append(_run_job(trainer, job.variant, store, filter_index, search_cfg.seed,
                                                 search_cfg.iterations, init))
                    except Exception as exc:  # noqa: BLE001
                        outcomes.append(exc)

            stage_records = []
            for job, outcome in zip(jobs, outcomes):
                child_params = param_count(job.variant, dim, num_relations, num_entities)
                parent_params = (param_count(job.parent.spec(), dim, num_relations, num_entities)
                                 if job.parent is not None else base_params)
                parent_mrr = job.parent.mrr if job.parent is not None else 0.0
                rec = CandidateRecord(
                    variant=job.variant.render(), stage=stage,
                    parent=job.parent.variant if job.parent is not None else None,
                    pair=job.pair.render(), mrr=None, delta_mrr=None,
                    delta_param=child_params - parent_params, param_count=child_params,
                    op_count=job.variant.op_count, seed=search_cfg.seed, wall_time=0.0,
                )
                if isinstance(outcome, Exception):
                    rec.status, rec.error = "failed", f"{type(outcome).__name__}: {outcome}"
                    logger.warning("candidate %s failed: %s", rec.variant, rec.error)
                else:
                    mrr, model, wall = outcome
                    rec.mrr, rec.wall_time = float(mrr), round(wall, 4)
                    rec.delta_mrr = rec.mrr - parent_mrr
                    if model is not None:
                        if search_cfg.warm_start:
                            models[rec.variant] = model
                        if checkpoint_dir is not None:
                            from .checkpoint import save_checkpoint

                            path = Path(checkpoint_dir) / f"stage{stage}_{len(records):04d}.npz"
                            save_checkpoint(path, model, vocab_hash, {"variant": rec.variant, "seed": rec.seed})
                            rec.checkpoint = str(path)
                    if best is None or _rank_key(rec) < _rank_key(best):
                        best = rec
                if best is not None:
                    rec.best_so_far, rec.best_variant_so_far = best.mrr, best.variant
                records.append(rec)
                stage_records.append(rec)
                emit({"kind": "candidate", **asdict(rec)})
                if on_record:
                    on_record(rec)
                logger.info("stage %d %s mrr=%s", stage, rec.variant, rec.mrr)

            ok = sorted((r for r in stage_records if r.ok), key=_rank_key)
            if not ok:
                raise SearchError(f"every candidate failed in stage {stage}")
            frontier = ok[: search_cfg.beam_width]
            efficiency = max(r.delta_mrr / r.delta_param for r in ok)
            stage_info = {
                "kind": "stage", "stage": stage, "trained": len(stage_records), "skipped_over_budget": skipped,
                "frontier": [r.variant for r in frontier], "max_efficiency": efficiency,
                "best_so_far": best.mrr, "best_variant_so_far": best.variant,
            }
            stages.append(stage_info)
            emit(stage_info)
            if stage > 1 and efficiency < search_cfg.gamma:
                stop_reason = "efficiency below gamma"
                break
        else:
            stop_reason = "stage cap"
    finally:
        if pool is not None:
            pool.shutdown()
        if log_file:
            emit({"kind": "end", "stop_reason": stop_reason, "best": best.variant if best else None})
            log_file.close()

    return SearchResult(best=best, records=records, stages=stages, stop_reason=stop_reason)


def read_search_log(path) -> list[CandidateRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            if entry.pop("kind", "candidate") == "candidate":
                records.append(CandidateRecord(**entry))
    return records


def replay_search_log(path) -> CandidateRecord | None:
    """Recompute the final selection from a search log without retraining."""
    return select_best(read_search_log(path))
