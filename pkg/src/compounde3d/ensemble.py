"""Ensembles of trained variants: weighted distance sums (WDS) and rank fusion.

A WDS scorer averages member distances with normalized positive weights
and then goes through the ordinary filtered-rank pipeline. Rank fusion
works on each member's filtered rank list per query and aggregates the
ranks with one of eight fusion formulas.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import FilterIndex, TripleStore
from .evaluation import HEAD, TAIL, MetricsReport, RankResult, _query_groups, apply_filter, evaluate, score_candidates
from .model import Model
from .training import LossConfig, SparseAdam, SparseGrad, loss_from_scores, sample_negatives


class EnsembleError(ValueError):
    """Incompatible members or fusion inputs."""


# ---------------------------------------------------------------------------
# weighted distance sum

WDS_SCHEMES = ("uniform", "geometric", "learnable")


@dataclass
class WdsConfig:
    scheme: str = "uniform"
    ratio: float = 0.5  # geometric ratio, in (0, 1)
    learning_rate: float = 1e-3
    steps: int = 200
    batch_size: int = 512
    per_relation: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in WDS_SCHEMES:
            raise ValueError(f"scheme must be one of {WDS_SCHEMES}")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("geometric ratio must be in (0, 1)")


def normalize_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise EnsembleError("WDS weights must be finite and strictly positive")
    return w / w.sum(axis=-1, keepdims=True)


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def geometric_weights(n: int, ratio: float) -> np.ndarray:
    """Weight ``ratio**i`` for the i-th best member (i from 1), normalized."""
    return normalize_weights(ratio ** np.arange(1, n + 1, dtype=np.float64))


def weights_from_logits(logits) -> np.ndarray:
    """``w = exp(u)`` normalized, i.e. a softmax over the last axis."""
    u = np.asarray(logits, dtype=np.float64)
    z = np.exp(u - u.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def check_compatible(members: list[Model], vocab_hashes=None) -> None:
    if len(members) < 1:
        raise EnsembleError("an ensemble needs at least one member")
    shapes = {(m.num_entities, m.num_relations) for m in members}
    if len(shapes) != 1:
        raise EnsembleError(f"members disagree on (entities, relations): {sorted(shapes)}")
    if vocab_hashes is not None and len(set(vocab_hashes)) != 1:
        raise EnsembleError("members were trained on different vocabularies")


class WdsScorer:
    """Weighted mean of member distances; drop-in for a model in evaluation.

    ``weights`` is ``(n,)`` for global weights or ``(|R|, n)`` for one
    weight vector per relation. Members must be sorted by validation MRR
    (best first) when geometric weights are used.
    """

    def __init__(self, members: list[Model], weights, vocab_hashes=None):
        check_compatible(members, vocab_hashes)
        self.members = list(members)
        w = normalize_weights(weights)
        if w.shape[-1] != len(self.members):
            raise EnsembleError("one weight per member is required")
        if w.ndim == 2 and w.shape[0] != self.members[0].num_relations:
            raise EnsembleError("per-relation weights need one row per relation")
        self.weights = w

    @property
    def num_entities(self) -> int:
        return self.members[0].num_entities

    @property
    def num_relations(self) -> int:
        return self.members[0].num_relations

    def relation_weights(self, r) -> np.ndarray:
        return self.weights[r] if self.weights.ndim == 2 else self.weights

    def score_batch(self, triples) -> np.ndarray:
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        scores = np.stack([m.score_batch(triples) for m in self.members], axis=-1)
        if self.weights.ndim == 2:
            return (scores * self.weights[triples[:, 1]]).sum(axis=-1)
        return scores @ self.weights

    def score(self, h: int, r: int, t: int) -> float:
        return float(self.score_batch([[h, r, t]])[0])

    def _combine(self, per_member, r) -> np.ndarray:
        w = self.relation_weights(r)
        out = w[0] * per_member[0]
        for wi, s in zip(w[1:], per_member[1:]):
            out = out + wi * s
        return out

    def score_all_tails_batch(self, heads, r: int, table=None) -> np.ndarray:
        return self._combine([m.score_all_tails_batch(heads, r) for m in self.members], r)

    def score_all_heads_batch(self, tails, r: int, table=None) -> np.ndarray:
        return self._combine([m.score_all_heads_batch(tails, r) for m in self.members], r)

    def score_all_tails(self, h: int, r: int) -> np.ndarray:
        return self.score_all_tails_batch([h], r)[0]

    def score_all_heads(self, r: int, t: int) -> np.ndarray:
        return self.score_all_heads_batch([t], r)[0]


def learn_weights(
    members: list[Model],
    store: TripleStore,
    loss_cfg: LossConfig,
    cfg: WdsConfig,
) -> np.ndarray:
    """Fit ``w = exp(u)`` on train triples with the training loss; members stay frozen.

    Returns normalized weights, ``(n,)`` or ``(|R|, n)`` when ``cfg.per_relation``.
    """
    check_compatible(members)
    n = len(members)
    rows = members[0].num_relations if cfg.per_relation else 1
    logits = np.zeros((rows, n))
    params = {"logits": logits}
    opt = SparseAdam(cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    train = store.train
    for _ in range(cfg.steps):
        batch = train[rng.integers(0, len(train), size=min(cfg.batch_size, len(train)))]
        negatives, _ = sample_negatives(batch, members[0].num_entities, loss_cfg, rng)
        b, k = negatives.shape[:2]
        pos_m = np.stack([m.score_batch(batch) for m in members], axis=-1)  # (B, n)
        neg_m = np.stack([m.score_batch(negatives.reshape(-1, 3)) for m in members], axis=-1).reshape(b, k, n)
        rel_row = batch[:, 1] if cfg.per_relation else np.zeros(b, dtype=np.int64)
        w = weights_from_logits(logits)[rel_row]  # (B, n)
        pos = (pos_m * w).sum(-1)
        neg = (neg_m * w[:, None, :]).sum(-1)
        _, _, d_pos, d_neg = loss_from_scores(pos, neg, loss_cfg)
        # d f / d u_j = w_j (f_j - f)
        g = d_pos[:, None] * w * (pos_m - pos[:, None])
        g += (d_neg[..., None] * w[:, None, :] * (neg_m - neg[..., None])).sum(axis=1)
        uniq, inv = np.unique(rel_row, return_inverse=True)
        grad = np.zeros((len(uniq), n))
        np.add.at(grad, inv, g)
        opt.step(params, {"logits": SparseGrad(uniq, grad)})
    weights = weights_from_logits(logits)
    return weights if cfg.per_relation else weights[0]


def wds_weights(members: list[Model], cfg: WdsConfig, store: TripleStore | None = None,
                loss_cfg: LossConfig | None = None) -> np.ndarray:
    n = len(members)
    if cfg.scheme == "uniform":
        return uniform_weights(n)
    if cfg.scheme == "geometric":
        return geometric_weights(n, cfg.ratio)
    if store is None:
        raise EnsembleError("learnable weights need the training triples")
    return learn_weights(members, store, loss_cfg or LossConfig(), cfg)


def per_relation_best_scheme(members, candidates: dict[str, np.ndarray], valid, filter_index):
    """Pick, per relation, the weight vector with the best validation MRR.

    ``candidates`` maps scheme name to global weights. Relations without
    validation triples keep the first scheme. Returns ``(weights (|R|, n), chosen names)``.
    """
    names = list(candidates)
    num_rel = members[0].num_relations
    per_rel = {}
    for name in names:
        report = evaluate(WdsScorer(members, candidates[name]), valid, filter_index)
        ranks = report.ranks
        for r in range(num_rel):
            mask = ranks.triples[:, 1] == r
            if mask.any():
                per_rel.setdefault(r, {})[name] = float(np.mean(1.0 / ranks.ranks[mask]))
    weights = np.empty((num_rel, len(members)))
    chosen = []
    for r in range(num_rel):
        scores = per_rel.get(r)
        best = names[0] if not scores else max(names, key=lambda s: (scores[s], -names.index(s)))
        weights[r] = normalize_weights(candidates[best])
        chosen.append(best)
    return weights, chosen


# ---------------------------------------------------------------------------
# rank fusion


class FusionMethod(str, Enum):
    COMBMAX = "CombMAX"
    COMBMIN = "CombMIN"
    COMBMEDIAN = "CombMEDIAN"
    COMBSUM = "CombSUM"
    EUCLIDEAN = "Euclidean"
    BORDA = "Borda"
    RRF = "RRF"
    RBC = "RBC"

    @property
    def higher_is_better(self) -> bool:
        return self in (FusionMethod.BORDA, FusionMethod.RRF, FusionMethod.RBC)


@dataclass
class FusionConfig:
    method: FusionMethod = FusionMethod.RRF
    k_rrf: float = 60.0
    phi: float = 0.98

    def __post_init__(self):
        self.method = FusionMethod(self.method)
        if self.k_rrf <= 0:
            raise ValueError("k_rrf must be positive")
        if not 0.0 < self.phi < 1.0:
            raise ValueError("phi must be in (0, 1)")


def fusion_values(ranks, cfg: FusionConfig, num_candidates: int | None = None) -> np.ndarray:
    """Aggregate ``ranks`` of shape ``(n_members, C)`` into one value per candidate."""
    r = np.asarray(ranks, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 1:
        raise EnsembleError("rank lists must have shape (members, candidates)")
    size = r.shape[1] if num_candidates is None else num_candidates
    # summing in sorted order makes equal rank multisets give bit-identical values
    r = np.sort(r, axis=0)
    m = cfg.method
    if m is FusionMethod.COMBMAX:
        return r.max(axis=0)
    if m is FusionMethod.COMBMIN:
        return r.min(axis=0)
    if m is FusionMethod.COMBMEDIAN:
        return np.median(r, axis=0)
    if m is FusionMethod.COMBSUM:
        return r.sum(axis=0)
    if m is FusionMethod.EUCLIDEAN:
        return np.sqrt((r * r).sum(axis=0))
    if m is FusionMethod.BORDA:
        return ((size - r + 1.0) / size).sum(axis=0)
    if m is FusionMethod.RRF:
        return (1.0 / (cfg.k_rrf + r)).sum(axis=0)
    return ((1.0 - cfg.phi) * _phi_powers(cfg.phi, r)).sum(axis=0)


@lru_cache(maxsize=8)
def _phi_table(phi: float, half_steps: int) -> np.ndarray:
    # scalar libm pow: vectorized pow may differ in the last ulp between candidates
    return np.array([math.pow(phi, k / 2.0) for k in range(half_steps + 1)])


def _phi_powers(phi: float, r: np.ndarray) -> np.ndarray:
    """``phi ** (r - 1)`` for ranks that are multiples of 1/2."""
    steps = np.rint(2.0 * (r - 1.0)).astype(np.int64)
    if not np.array_equal(steps / 2.0, r - 1.0):
        return phi ** (r - 1.0)
    top = int(steps.max())
    return _phi_table(phi, max(64, 1 << top.bit_length()))[steps]


def _sort_keys(ranks, cfg: FusionConfig):
    values = fusion_values(ranks, cfg)
    primary = -values if cfg.method.higher_is_better else values
    return primary, np.asarray(ranks, dtype=np.float64).mean(axis=0)


def fuse_ranks(ranks, cfg: FusionConfig) -> np.ndarray:
    """Candidate indices ordered best first.

    Ties on the fused value are broken by mean member rank, then candidate index.
    """
    primary, mean_rank = _sort_keys(ranks, cfg)
    return np.lexsort((np.arange(primary.shape[0]), mean_rank, primary))


def fused_rank(ranks, truth: int, cfg: FusionConfig) -> int:
    """Rank of candidate ``truth`` after fusion.

    Uses the same tie rule as single-model evaluation once the mean-rank
    tie-break is applied: ``1 + better + ties // 2``.
    """
    primary, mean_rank = _sort_keys(ranks, cfg)
    p, m = primary[truth], mean_rank[truth]
    better = np.count_nonzero((primary < p) | ((primary == p) & (mean_rank < m)))
    ties = np.count_nonzero((primary == p) & (mean_rank == m)) - 1
    return int(1 + better + ties // 2)


def member_rank_lists(score_rows) -> np.ndarray:
    """Per-member ranks (ascending score, ties averaged) for one query, ``(n, C)``."""
    return rankdata(np.asarray(score_rows, dtype=np.float64), method="average", axis=1)


def fusion_rank_triples(members: list[Model], triples, filter_index: FilterIndex | None,
                        configs: list[FusionConfig]) -> dict[FusionMethod, RankResult]:
    """Filtered member rank lists per query, fused by every config in ``configs``."""
    check_compatible(members)
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    out = {cfg.method: ([], [], []) for cfg in configs}
    for r, idx in _query_groups(triples):
        group = triples[idx]
        for direction in (HEAD, TAIL):
            per_member = []
            for m in members:
                scores = score_candidates(m, group, direction, r)
                apply_filter(scores, group, direction, filter_index)
                per_member.append(scores)
            truths = group[:, 2] if direction == TAIL else group[:, 0]
            for q in range(len(group)):
                # filtered candidates are +inf for every member; drop them
                keep = np.isfinite(per_member[0][q])
                kept_ids = np.flatnonzero(keep)
                truth_pos = int(np.searchsorted(kept_ids, truths[q]))
                ranks = member_rank_lists([s[q][keep] for s in per_member])
                for cfg in configs:
                    tr, dr, rr = out[cfg.method]
                    tr.append(group[q])
                    dr.append(direction)
                    rr.append(fused_rank(ranks, truth_pos, cfg))
    results = {}
    for method, (tr, dr, rr) in out.items():
        results[method] = RankResult(
            np.array(tr, dtype=np.int64).reshape(-1, 3), np.array(dr, dtype=np.int64), np.array(rr, dtype=np.int64)
        )
    return results


def ensemble_evaluate(
    members: list[Model],
    triples,
    filter_index: FilterIndex | None,
    methods=tuple(FusionMethod),
    wds: dict[str, np.ndarray] | None = None,
    k_rrf: float = 60.0,
    phi: float = 0.98,
    relation_names=None,
) -> dict[str, MetricsReport]:
    """Reports keyed by method name: ``WDS-<scheme>`` entries and one per fusion method."""
    reports: dict[str, MetricsReport] = {}
    for scheme, weights in (wds or {}).items():
        reports[f"WDS-{scheme}"] = evaluate(WdsScorer(members, weights), triples, filter_index, relation_names)
    configs = [FusionConfig(FusionMethod(m), k_rrf, phi) for m in methods]
    if configs:
        fused = fusion_rank_triples(members, triples, filter_index, configs)
        for cfg in configs:
            reports[cfg.method.value] = MetricsReport.from_ranks(fused[cfg.method], relation_names)
    return reports


def format_ensemble_table(reports: dict[str, MetricsReport]) -> str:
    """Method, MRR, Hits@1, Hits@3, Hits@10 as CSV."""
    lines = ["method,mrr,hits@1,hits@3,hits@10"]
    for name, rep in reports.items():
        lines.append(f"{name},{rep.mrr:.6f},{rep.hits[1]:.6f},{rep.hits[3]:.6f},{rep.hits[10]:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# member manifest


@dataclass
class MemberEntry:
    checkpoint: str
    valid_mrr: float
    name: str = ""


@dataclass
class Manifest:
    members: list[MemberEntry] = field(default_factory=list)

    def sorted(self) -> "Manifest":
        """Members ordered by validation MRR, best first (drives geometric weights)."""
        return Manifest(sorted(self.members, key=lambda e: (-e.valid_mrr, e.name, e.checkpoint)))

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps({"members": [asdict(e) for e in self.members]}, indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            members = [MemberEntry(**e) for e in data["members"]]
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise EnsembleError(f"bad manifest {path}: {exc}") from None
        base = path.parent
        for e in members:
            if not math.isfinite(e.valid_mrr):
                raise EnsembleError(f"{path}: member {e.checkpoint} has non-finite valid_mrr")
            if not Path(e.checkpoint).is_absolute():
                e.checkpoint = str(base / e.checkpoint)
        return cls(members)


def load_members(manifest: Manifest, expected_vocab_hash: str | None = None) -> tuple[list[Model], list[MemberEntry]]:
    """Load checkpoints in validation-MRR order (best first)."""
    from .checkpoint import load_checkpoint

    ordered = manifest.sorted().members
    models, hashes = [], []
    for entry in ordered:
        model, meta = load_checkpoint(entry.checkpoint, expected_vocab_hash)
        models.append(model)
        hashes.append(meta.get("vocab_hash"))
    check_compatible(models, hashes)
    return models, ordered
