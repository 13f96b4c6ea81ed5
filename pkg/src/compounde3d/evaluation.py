"""Filtered link-prediction evaluation: ranks, MRR, Hits@k, per-relation reports."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .data import FilterIndex
from .model import Model

HITS_AT = (1, 3, 10)
HEAD, TAIL = 0, 1
DIRECTIONS = {HEAD: "head", TAIL: "tail"}


def rank_from_scores(scores: np.ndarray, truth: int, exclude=()) -> int:
    """Filtered rank of ``truth`` among ``scores`` (lower score = better).

    ``exclude`` lists candidates to drop (known true triples); ``truth``
    itself is never dropped. Ties count half: ``1 + better + ties // 2``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(scores.shape[0], dtype=bool)
    excl = [e for e in exclude if e != truth]
    keep[excl] = False
    target = scores[truth]
    better = int(np.count_nonzero(keep & (scores < target)))
    ties = int(np.count_nonzero(keep & (scores == target))) - 1
    return 1 + better + ties // 2


def _ranks_from_matrix(scores: np.ndarray, truths: np.ndarray) -> np.ndarray:
    """Row-wise version of :func:`rank_from_scores`; filtered entries must be +inf."""
    target = scores[np.arange(len(truths)), truths][:, None]
    better = np.count_nonzero(scores < target, axis=1)
    ties = np.count_nonzero(scores == target, axis=1) - 1
    return 1 + better + ties // 2


def rank_query(model: Model, triple, direction: str, filter_index: FilterIndex) -> int:
    h, r, t = (int(x) for x in triple)
    if direction == "tail":
        return rank_from_scores(model.score_all_tails(h, r), t, filter_index.tails(h, r))
    if direction == "head":
        return rank_from_scores(model.score_all_heads(r, t), h, filter_index.heads(r, t))
    raise ValueError(f"direction must be 'head' or 'tail', got {direction!r}")


@dataclass
class RankResult:
    triples: np.ndarray  # (Q, 3)
    directions: np.ndarray  # (Q,) HEAD / TAIL
    ranks: np.ndarray  # (Q,)

    def __len__(self):
        return len(self.ranks)


def metrics_from_ranks(ranks) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        return {"mrr": 0.0, **{f"hits@{k}": 0.0 for k in HITS_AT}, "count": 0}
    out = {"mrr": float(np.mean(1.0 / ranks))}
    for k in HITS_AT:
        out[f"hits@{k}"] = float(np.mean(ranks <= k))
    out["count"] = int(ranks.size)
    return out


@dataclass
class MetricsReport:
    mrr: float
    hits: dict[int, float]
    count: int
    per_relation: dict[str, dict[str, float]] = field(default_factory=dict)
    per_type: dict[str, dict[str, float]] = field(default_factory=dict)
    relation_types: dict[str, str] = field(default_factory=dict)
    ranks: RankResult | None = None

    @classmethod
    def from_ranks(cls, result: RankResult, relation_names=None, relation_types=None) -> "MetricsReport":
        overall = metrics_from_ranks(result.ranks)
        per_rel: dict[str, list] = defaultdict(list)
        per_type: dict[str, list] = defaultdict(list)
        names = {}
        for rel in np.unique(result.triples[:, 1]) if len(result) else []:
            rel = int(rel)
            names[rel] = relation_names[rel] if relation_names is not None else str(rel)
        for (h, r, t), rank in zip(result.triples.tolist(), result.ranks.tolist()):
            per_rel[names[r]].append(rank)
            if relation_types is not None:
                per_type[relation_types.get(r, "unknown")].append(rank)
        types_by_name = {}
        if relation_types is not None:
            types_by_name = {names[r]: relation_types.get(r, "unknown") for r in names}
        return cls(
            mrr=overall["mrr"],
            hits={k: overall[f"hits@{k}"] for k in HITS_AT},
            count=overall["count"],
            per_relation={k: metrics_from_ranks(v) for k, v in sorted(per_rel.items())},
            per_type={k: metrics_from_ranks(v) for k, v in sorted(per_type.items())},
            relation_types=types_by_name,
            ranks=result,
        )

    def as_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            **{f"hits@{k}": v for k, v in self.hits.items()},
            "count": self.count,
            "per_relation": self.per_relation,
            "per_type": self.per_type,
            "relation_types": self.relation_types,
        }

    def to_text(self, header: dict | None = None) -> str:
        lines = [f"{k}={v}" for k, v in (header or {}).items()]
        lines.append(f"mrr={self.mrr:.6f}")
        for k, v in self.hits.items():
            lines.append(f"hits@{k}={v:.6f}")
        lines.append(f"queries={self.count}")
        for name, m in self.per_relation.items():
            lines.append(f"relation[{name}].mrr={m['mrr']:.6f}")
            lines.append(f"relation[{name}].count={m['count']}")
        for name, m in self.per_type.items():
            lines.append(f"type[{name}].mrr={m['mrr']:.6f}")
        return "\n".join(lines) + "\n"

    def relation_table_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["relation", "type", "mrr", "hits@1", "hits@3", "hits@10", "count"])
        for name, m in self.per_relation.items():
            writer.writerow([
                name, self.relation_types.get(name, ""), f"{m['mrr']:.6f}",
                f"{m['hits@1']:.6f}", f"{m['hits@3']:.6f}", f"{m['hits@10']:.6f}", m["count"],
            ])
        return buf.getvalue()


def _query_groups(triples: np.ndarray):
    """(relation, row indices) pairs for batching by relation."""
    order = np.argsort(triples[:, 1], kind="stable")
    rels = triples[order, 1]
    bounds = np.flatnonzero(np.diff(rels)) + 1
    for idx in np.split(order, bounds):
        if len(idx):
            yield int(triples[idx[0], 1]), idx


def score_candidates(model: Model, triples: np.ndarray, direction: int, r: int, tables=None) -> np.ndarray:
    """Scores of every candidate entity for the missing slot, shape (Q, |E|)."""
    if direction == TAIL:
        table = None if tables is None else tables.get(("tail", r))
        return model.score_all_tails_batch(triples[:, 0], r, table)
    table = None if tables is None else tables.get(("head", r))
    return model.score_all_heads_batch(triples[:, 2], r, table)


def apply_filter(scores: np.ndarray, triples: np.ndarray, direction: int, filter_index: FilterIndex | None) -> None:
    """Set scores of known-true non-target candidates to +inf in place."""
    if filter_index is None:
        return
    for q, (h, r, t) in enumerate(triples.tolist()):
        if direction == TAIL:
            known, truth = filter_index.tails(h, r), t
        else:
            known, truth = filter_index.heads(r, t), h
        idx = [e for e in known if e != truth]
        if idx:
            scores[q, idx] = np.inf


def rank_triples(model: Model, triples, filter_index: FilterIndex | None, directions=(HEAD, TAIL)) -> RankResult:
    """Filtered ranks for both directions of every triple."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    out_triples, out_dirs, out_ranks = [], [], []
    for r, idx in _query_groups(triples):
        group = triples[idx]
        for direction in directions:
            scores = score_candidates(model, group, direction, r)
            apply_filter(scores, group, direction, filter_index)
            truths = group[:, 2] if direction == TAIL else group[:, 0]
            out_triples.append(group)
            out_dirs.append(np.full(len(group), direction))
            out_ranks.append(_ranks_from_matrix(scores, truths))
    if not out_triples:
        empty = np.zeros((0, 3), dtype=np.int64)
        return RankResult(empty, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    return RankResult(np.concatenate(out_triples), np.concatenate(out_dirs), np.concatenate(out_ranks))


def evaluate(
    model: Model,
    triples,
    filter_index: FilterIndex | None,
    relation_names=None,
    relation_types=None,
) -> MetricsReport:
    """Filtered MRR / Hits@k over both directions of ``triples``."""
    result = rank_triples(model, triples, filter_index)
    return MetricsReport.from_ranks(result, relation_names, relation_types)
