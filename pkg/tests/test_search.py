import hashlib
import json

import numpy as np
import pytest

from compounde3d.data import TripleStore
from compounde3d.geometry import OperatorKind
from compounde3d.model import param_count
from compounde3d.search import (
    DefaultTrainer,
    OperatorPair,
    SearchConfig,
    SearchError,
    beam_search,
    enumerate_pairs,
    extend_variant,
    read_search_log,
    replay_search_log,
    warm_start_model,
)
from compounde3d.training import LossConfig, TrainConfig
from compounde3d.variant import parse_variant

T, S, R, F, H, I = (OperatorKind(k) for k in "TSRFHI")
STORE = TripleStore([[0, 0, 1], [1, 0, 2], [2, 0, 3]], [[3, 0, 0]], [[0, 0, 2]])
NE, NR, DIM = 4, 1, 6


class FakeTrainer:
    """Deterministic pseudo-MRR from the variant text; no training."""

    def __init__(self, table=None, fail=()):
        self.table = table or {}
        self.fail = set(fail)
        self.calls = []

    def __call__(self, variant, store, filter_index, seed, iterations, init=None):
        text = variant.render()
        self.calls.append((text, seed, iterations))
        if text in self.fail:
            raise FloatingPointError("diverged")
        if text in self.table:
            return self.table[text], None
        digest = hashlib.sha256(text.encode()).digest()
        return 0.1 * variant.op_count + digest[0] / 2560.0, None


def test_fifteen_pairs():
    pairs = enumerate_pairs()
    assert len(pairs) == 15
    assert len({p.render() for p in pairs}) == 15
    assert sum(p.op_count == 2 for p in pairs) == 5


def test_pair_validation():
    with pytest.raises(ValueError):
        OperatorPair(I, I)
    with pytest.raises(ValueError):
        OperatorPair(T, R)


def test_extend_examples():
    assert extend_variant(None, OperatorPair(T, I)).render() == "T h - t"
    assert extend_variant(parse_variant("T h - t"), OperatorPair(S, I)).render() == "S.T h - t"
    assert extend_variant(parse_variant("T h - t"), OperatorPair(I, R)).render() == "T h - R t"
    assert extend_variant(parse_variant("S h - T t"), OperatorPair(R, R)).render() == "R.S h - R.T t"


def test_single_op_budget_skips_pairs():
    trainer = FakeTrainer()
    result = beam_search(STORE, SearchConfig(beam_width=15, max_ops=1), trainer, NE, NR, DIM)
    assert len(result.records) == 10
    assert all(r.op_count == 1 for r in result.records)
    assert result.stages[0]["skipped_over_budget"] == 5
    assert result.stop_reason == "operator budget"


def test_full_beam_stage_two_dedupes():
    trainer = FakeTrainer()
    result = beam_search(STORE, SearchConfig(beam_width=15, max_ops=2, max_stages=2, gamma=1e-30), trainer, NE, NR, DIM)
    stage2 = [r for r in result.records if r.stage == 2]
    # only single-op parents can grow; children are unique variants with two ops
    assert len({r.variant for r in stage2}) == len(stage2)
    assert all(r.op_count == 2 for r in stage2)
    assert all(r.op_count <= 2 for r in result.records)
    texts = [c[0] for c in trainer.calls]
    assert len(texts) == len(set(texts))


def test_budget_never_exceeded_and_seed_shared(tmp_path):
    trainer = FakeTrainer()
    result = beam_search(STORE, SearchConfig(beam_width=3, max_ops=3, seed=11, iterations=7, gamma=1e-30),
                         trainer, NE, NR, DIM)
    assert all(r.op_count <= 3 for r in result.records)
    assert {c[1] for c in trainer.calls} == {11}
    assert {c[2] for c in trainer.calls} == {7}


def test_delta_param_accounting():
    trainer = FakeTrainer()
    result = beam_search(STORE, SearchConfig(beam_width=2, max_ops=2, gamma=1e-30), trainer, NE, NR, DIM)
    by_name = {r.variant: r for r in result.records}
    for rec in result.records:
        expected = param_count(rec.spec(), DIM, NR, NE)
        assert rec.param_count == expected
        parent = NE * DIM if rec.parent is None else by_name[rec.parent].param_count
        assert rec.delta_param == expected - parent


def test_best_is_global_and_log_replays(tmp_path):
    # stage-1 winner is better than anything found later
    table = {"R h - t": 0.9}
    trainer = FakeTrainer(table)
    log = tmp_path / "search.jsonl"
    result = beam_search(STORE, SearchConfig(beam_width=2, max_ops=3, gamma=1e-30), trainer, NE, NR, DIM,
                         log_path=log)
    assert result.best.variant == "R h - t"
    entries = [json.loads(x) for x in log.read_text().splitlines()]
    kinds = [e["kind"] for e in entries]
    assert kinds[-1] == "end" and "stage" in kinds
    cand = [e for e in entries if e["kind"] == "candidate"]
    assert {"variant", "stage", "parent", "pair", "mrr", "delta_mrr", "delta_param", "param_count",
            "op_count", "seed", "wall_time"} <= set(cand[0])
    assert len(read_search_log(log)) == len(result.records)
    assert replay_search_log(log).variant == result.best.variant
    for stage in result.stages:
        assert stage["best_so_far"] == max(r.mrr for r in result.records if r.stage <= stage["stage"])


def test_gamma_stops_search():
    # no candidate improves on its parent after stage 1
    class Flat(FakeTrainer):
        def __call__(self, variant, *args, **kw):
            super().__call__(variant, *args, **kw)
            return 0.5, None

    result = beam_search(STORE, SearchConfig(beam_width=2, max_ops=4, gamma=1e-6), Flat(), NE, NR, DIM)
    assert result.stop_reason == "efficiency below gamma"
    assert len(result.stages) == 2


def test_tie_break_prefers_fewer_tail_ops():
    table = {"S h - t": 0.7, "h - S t": 0.7}

    def only(variant, *args, **kwargs):
        return table.get(variant.render(), 0.0), None

    result = beam_search(STORE, SearchConfig(beam_width=1, max_ops=1), only, NE, NR, DIM)
    assert result.best.variant == "S h - t"


def test_failed_candidates_are_logged_and_skipped(tmp_path):
    trainer = FakeTrainer(fail={"T h - t", "R h - R t"})
    log = tmp_path / "s.jsonl"
    result = beam_search(STORE, SearchConfig(beam_width=2, max_ops=2, gamma=1e-30), trainer, NE, NR, DIM,
                         log_path=log)
    failed = [r for r in result.records if not r.ok]
    assert {r.variant for r in failed} == {"T h - t", "R h - R t"}
    assert all("FloatingPointError" in r.error for r in failed)
    assert result.best.ok


def test_all_failed_raises():
    names = [extend_variant(None, p).render() for p in enumerate_pairs()]
    with pytest.raises(SearchError):
        beam_search(STORE, SearchConfig(max_ops=2), FakeTrainer(fail=names), NE, NR, DIM)


def test_parallel_matches_serial():
    cfg = dict(beam_width=2, max_ops=2, gamma=1e-30)
    a = beam_search(STORE, SearchConfig(**cfg), FakeTrainer(), NE, NR, DIM)
    b = beam_search(STORE, SearchConfig(**cfg, workers=2), FakeTrainer(), NE, NR, DIM)
    assert [(r.variant, r.mrr) for r in a.records] == [(r.variant, r.mrr) for r in b.records]


def test_default_trainer_reproducible(tmp_path):
    trainer = DefaultTrainer(NE, NR, dim=6, loss=LossConfig(margin=2.0, num_negatives=2),
                             train=TrainConfig(batch_size=3, learning_rate=0.05))
    cfg = SearchConfig(beam_width=1, max_ops=1, iterations=20, seed=3)
    a = beam_search(STORE, cfg, trainer, NE, NR, 6, checkpoint_dir=tmp_path / "a")
    b = beam_search(STORE, cfg, trainer, NE, NR, 6, checkpoint_dir=tmp_path / "b")
    assert [r.mrr for r in a.records] == [r.mrr for r in b.records]
    assert all(r.checkpoint for r in a.records)


def test_warm_start_keeps_parent_operators():
    trainer = DefaultTrainer(NE, NR, dim=6)
    parent = trainer.make_model(parse_variant("T h - t"), seed=0)
    parent.head_params[0][:] = 0.25
    child = warm_start_model(parent, parse_variant("S.T h - S t"), OperatorPair(S, S), seed=0)
    np.testing.assert_array_equal(child.head_params[1], parent.head_params[0])
    np.testing.assert_array_equal(child.entity, parent.entity)
    assert np.all(child.head_params[0] == 1) and np.all(child.tail_params[0] == 1)
