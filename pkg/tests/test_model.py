import math

import numpy as np
import pytest

from compounde3d.model import Model, init_model, param_count
from compounde3d.variant import parse_variant
from oracles import brute_score


def make(variant, num_entities=5, num_relations=2, dim=6, seed=0, norm_order=2, perturb=True):
    m = init_model(num_entities, num_relations, dim, parse_variant(variant), seed=seed, norm_order=norm_order)
    if perturb:
        # move every operator away from its initial value so checks are not trivial
        rng = np.random.default_rng(seed + 100)
        for p in m.head_params + m.tail_params:
            p += rng.normal(scale=0.3, size=p.shape)
        m.entity[:] = rng.normal(size=m.entity.shape)
    return m


def test_init_rejects_bad_dim():
    with pytest.raises(ValueError):
        init_model(3, 1, 5, parse_variant("T h - t"))


def test_init_deterministic():
    a = init_model(10, 3, 12, parse_variant("R.S.T h - F t"), seed=7)
    b = init_model(10, 3, 12, parse_variant("R.S.T h - F t"), seed=7)
    np.testing.assert_array_equal(a.entity, b.entity)
    for x, y in zip(a.head_params + a.tail_params, b.head_params + b.tail_params):
        np.testing.assert_array_equal(x, y)


def test_init_ranges():
    m = init_model(50, 2, 30, parse_variant("T.S.H.R h - F t"), seed=1, margin=6.0)
    assert np.abs(m.entity).max() <= 8.0 / 30
    t, s, h, r = m.head_params
    assert np.all(t == 0) and np.all(s == 1) and np.all(h == 0)
    assert np.abs(r).max() <= math.pi
    np.testing.assert_allclose(np.linalg.norm(m.tail_params[0], axis=-1), 1.0)


def test_wn18rr_relation_param_count():
    m = init_model(4, 1, 480, parse_variant("R.S.T h - t"))
    assert m.relation_param_count() == 1440


def test_param_count_examples():
    assert param_count(parse_variant("T h - t"), 3, 1, 2) == 9
    assert param_count(parse_variant("T.S.R.F.H h - t"), 3, 1, 0) == 18


def test_ogbl_wikikg2_param_count():
    total = param_count(parse_variant("T h - H t"), 90, 535, 2_500_604)
    assert abs(total - 225.2e6) / 225.2e6 < 0.01


def test_zero_translation_scores_zero():
    m = init_model(3, 1, 6, parse_variant("T h - t"))
    assert m.score(1, 0, 1) == 0.0


def test_scaling_by_two():
    m = init_model(2, 1, 6, parse_variant("S h - t"))
    m.head_params[0][:] = 2.0
    m.entity[1] = 2 * m.entity[0]
    assert m.score(0, 0, 1) == pytest.approx(0.0, abs=1e-15)


def test_yaw_rotation_maps_axis():
    m = init_model(2, 1, 3, parse_variant("R h - t"))
    m.head_params[0][:] = [math.pi / 2, 0, 0]
    m.entity[0] = [1, 0, 0]
    m.entity[1] = [0, 1, 0]
    assert m.score(0, 0, 1) == pytest.approx(0.0, abs=1e-15)


def test_out_of_range_ids():
    m = make("T h - t")
    with pytest.raises(IndexError):
        m.score(0, 0, 99)
    with pytest.raises(IndexError):
        m.score(0, 5, 1)


@pytest.mark.parametrize("variant", ["T h - t", "R.S.T h - t", "S h - T.R.S t", "H h - F.R t", "h - S t"])
@pytest.mark.parametrize("order", [1, 2])
def test_score_matches_homogeneous_oracle(variant, order):
    m = make(variant, norm_order=order)
    spec = m.variant
    rng = np.random.default_rng(3)
    for _ in range(10):
        h, t = rng.integers(0, 5, 2)
        r = rng.integers(0, 2)
        ref = brute_score(m.entity, [k.value for k in spec.head], m.head_params,
                          [k.value for k in spec.tail], m.tail_params, h, r, t, order)
        assert m.score(h, r, t) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_batch_matches_loop():
    m = make("R.S.T h - H t", num_entities=20, num_relations=4, dim=12)
    rng = np.random.default_rng(0)
    triples = np.stack([rng.integers(0, 20, 100), rng.integers(0, 4, 100), rng.integers(0, 20, 100)], axis=1)
    batch = m.score_batch(triples)
    loop = np.array([m.score(*t) for t in triples])
    assert np.abs(batch - loop).max() < 1e-12
    assert np.all(batch >= 0) and np.all(np.isfinite(batch))


@pytest.mark.parametrize("variant", ["T h - t", "S h - F t", "h - R t"])
def test_score_all_matches_single(variant):
    m = make(variant)
    for h in range(5):
        tails = m.score_all_tails(h, 1)
        heads = m.score_all_heads(1, h)
        for e in range(5):
            assert tails[e] == m.score(h, 1, e)
            assert heads[e] == m.score(e, 1, h)


def test_block_permutation_invariance():
    for order in (1, 2):
        m = make("R.S h - H t", dim=12, norm_order=order)
        perm = np.array([2, 0, 3, 1])
        cols = (perm[:, None] * 3 + np.arange(3)).ravel()
        p = Model(m.entity[:, cols], m.variant, [a[:, perm] for a in m.head_params],
                  [a[:, perm] for a in m.tail_params], order)
        triples = [[0, 0, 1], [2, 1, 3], [4, 0, 4]]
        np.testing.assert_allclose(m.score_batch(triples), p.score_batch(triples), rtol=1e-12)


def test_isometric_chain_preserves_block_norms():
    m = make("R.F.R h - t", num_entities=8, dim=12)
    x = m.blocks(np.arange(8))
    y = m.transform("head", np.array([1]), x)
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-9)


def test_reduces_to_transe():
    m = make("T h - t")
    h, r, t = 1, 0, 3
    trans = m.head_params[0][r].ravel()
    assert m.score(h, r, t) == pytest.approx(np.linalg.norm(m.entity[h] + trans - m.entity[t]), rel=1e-12)


def test_reduces_to_pairre_style():
    m = make("S h - S t")
    h, r, t = 0, 1, 2
    sh, st = m.head_params[0][r].ravel(), m.tail_params[0][r].ravel()
    expected = np.linalg.norm(m.entity[h] * sh - m.entity[t] * st)
    assert m.score(h, r, t) == pytest.approx(expected, rel=1e-12)


def test_reduces_to_rotation_score():
    m = make("R h - t", dim=3)
    h, r, t = 0, 1, 4
    a, b, g = m.head_params[0][r, 0]
    rz = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    ry = np.array([[math.cos(b), 0, math.sin(b)], [0, 1, 0], [-math.sin(b), 0, math.cos(b)]])
    rx = np.array([[1, 0, 0], [0, math.cos(g), -math.sin(g)], [0, math.sin(g), math.cos(g)]])
    expected = np.linalg.norm(rz @ ry @ rx @ m.entity[h] - m.entity[t])
    assert m.score(h, r, t) == pytest.approx(expected, rel=1e-12)


def test_copy_is_independent():
    m = make("T h - S t")
    c = m.copy()
    c.entity[0, 0] += 1
    c.head_params[0][0, 0, 0] += 1
    assert m.entity[0, 0] != c.entity[0, 0]
    assert m.head_params[0][0, 0, 0] != c.head_params[0][0, 0, 0]
