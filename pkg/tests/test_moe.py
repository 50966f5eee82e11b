"""Gated expert fusion: view gates, output gate, pseudo bundles, training."""

import hashlib

import numpy as np
import pytest

from coldbundle.data import Scenario, make_split, synth_blockmodel
from coldbundle.errors import ContractError
from coldbundle.graph import membership_matrix
from coldbundle.moe import (
    ExpertOutputs, GateParams, Stage3Config, cold_features, fuse, fused_tables,
    gate_dump_rows, interpolate_pseudo, output_gate, predict,
    sample_pseudo_triples, score_all, score_all_no_diff, score_all_no_moe,
    stage3_loss_and_grads, train_stage3, view_gate,
)
from coldbundle.nn import finite_diff_check
from coldbundle.rng import Rng


def _tiny(seed=0, d=6):
    cat, x, y, z = synth_blockmodel(20, 24, 8, 2, 4, 0.5, seed)
    split = make_split(x, y, z, cat, Scenario.COLD_START, seed=seed)
    rng = Rng(seed).derive("experts")
    bf, itf = cold_features(split)
    experts = ExpertOutputs(
        ru_bint=rng.normal((cat.n_users, d)),
        ru_iint=rng.normal((cat.n_users, d)),
        r_e_bint=rng.normal((cat.n_bundles, d)),
        r_d_bint=rng.normal((cat.n_bundles, d)),
        r_e_items=rng.normal((cat.n_items, d)),
        r_d_items=rng.normal((cat.n_items, d)),
        agg=membership_matrix(split.z, cat.n_bundles, cat.n_items),
        bundle_feature=bf,
        item_feature=itf,
    )
    return split, experts


def test_view_gate_simplex_and_uniform():
    w = np.zeros((2, 1))
    g = view_gate(np.array([0.0, 1.7, 100.0]), w)
    np.testing.assert_allclose(g, 0.5)
    rng = Rng(0)
    w = rng.normal((2, 1))
    feats = rng.normal(20)
    g = view_gate(feats, w)
    assert np.all(g >= 0)
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)
    # scalar softmax oracle
    f = 1.7
    logits = np.array([f * w[0, 0], f * w[1, 0]])
    oracle = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(view_gate(np.array([f]), w)[0], oracle, atol=1e-12)


def test_view_gate_saturation():
    w = np.array([[20.0], [-20.0]])
    g = view_gate(np.array([1.0]), w)
    assert abs(g[0, 0] - 1.0) < 1e-8 and g[0, 1] < 1e-8


def test_view_gate_rejects_nonfinite():
    with pytest.raises(ContractError):
        view_gate(np.array([np.nan]), np.zeros((2, 1)))


def test_cold_features_zero_for_cold():
    split, experts = _tiny()
    bf, itf = cold_features(split)
    np.testing.assert_array_equal(bf[split.bundle_bint_cold], 0.0)
    np.testing.assert_array_equal(itf[split.item_cold], 0.0)
    assert np.all(bf[~split.bundle_bint_cold] > 0)


def test_fusion_convexity():
    rng = Rng(1)
    r_e, r_d = rng.normal((5, 3)), rng.normal((5, 3))
    w = view_gate(rng.uniform(5), rng.normal((2, 1)))
    fused = fuse(r_e, r_d, w)
    lo = np.minimum(r_e, r_d)
    hi = np.maximum(r_e, r_d)
    assert np.all(fused >= lo - 1e-12) and np.all(fused <= hi + 1e-12)
    np.testing.assert_allclose(fuse(r_e, r_e, w), r_e)


def test_item_view_fuses_before_aggregation():
    split, x = _tiny()
    gp = GateParams.create(x.d, Rng(2))
    rb_bint, rb_iint, _, w_i = fused_tables(x, gp)
    # independent two-step oracle: fuse every item, then mean per bundle
    items_fused = w_i[:, 0:1] * x.r_e_items + w_i[:, 1:2] * x.r_d_items
    cat = split.catalog
    for b in range(cat.n_bundles):
        members = split.z.cols[split.z.rows == b]
        np.testing.assert_allclose(rb_iint[b], items_fused[members].mean(axis=0),
                                   atol=1e-13)


def test_predict_matches_hand_oracle():
    split, x = _tiny()
    gp = GateParams.create(x.d, Rng(3))
    rb_bint, rb_iint, _, _ = fused_tables(x, gp)
    u, b = 1, 2
    a_out = np.concatenate([rb_bint[b], rb_iint[b]])
    g = np.tanh(gp.w_out @ a_out)
    expect = g[0] * (x.ru_bint[u] @ rb_bint[b]) + g[1] * (x.ru_iint[u] @ rb_iint[b])
    assert abs(predict(u, b, x, gp) - expect) < 1e-12
    scores = score_all(x, gp)
    assert abs(scores[u, b] - expect) < 1e-12


def test_zero_output_gate_scores_zero():
    split, x = _tiny()
    gp = GateParams.create(x.d, Rng(4))
    gp.w_out[:] = 0.0
    assert predict(0, 0, x, gp) == 0.0
    np.testing.assert_array_equal(score_all(x, gp), 0.0)


def test_output_gate_range():
    rng = Rng(5)
    g = output_gate(rng.normal((7, 4)), rng.normal((2, 4)))
    assert np.all(np.abs(g) < 1.0)


def test_interpolation_symmetry_and_endpoints():
    split, x = _tiny()
    lam = 0.3
    a = interpolate_pseudo(0, 1, lam, x)
    b = interpolate_pseudo(1, 0, 1.0 - lam, x)
    np.testing.assert_allclose(a.r_e_bint, b.r_e_bint, atol=1e-15)
    np.testing.assert_allclose(a.r_d_iint, b.r_d_iint, atol=1e-15)
    end = interpolate_pseudo(2, 3, 1.0, x)
    np.testing.assert_array_equal(end.r_e_bint, x.r_e_bint[2])
    mid = interpolate_pseudo(2, 3, 0.5, x)
    np.testing.assert_allclose(mid.r_e_bint, 0.5 * (x.r_e_bint[2] + x.r_e_bint[3]))
    assert a.feature == 0.0


def test_interpolation_rejects():
    split, x = _tiny()
    with pytest.raises(ContractError):
        interpolate_pseudo(0, 0, 0.5, x)
    with pytest.raises(ContractError):
        interpolate_pseudo(0, 1, 1.5, x)


def test_stage3_gradcheck_all_gates():
    split, x = _tiny(d=4)
    gp = GateParams.create(x.d, Rng(6))
    u = split.train_x.rows[:6]
    bp = split.train_x.cols[:6]
    bn = np.roll(bp, 1)
    pseudo = sample_pseudo_triples(split, x, 4, 0.9, Rng(6).derive("p"))

    def loss_fn():
        loss, _ = stage3_loss_and_grads(x, gp, (u, bp, bn), pseudo)
        return loss

    _, grads = stage3_loss_and_grads(x, gp, (u, bp, bn), pseudo)
    report = finite_diff_check(loss_fn, gp.params(), grads)
    assert report["max_rel_err"] < 1e-4


def test_pseudo_triples_properties():
    split, x = _tiny()
    rng = Rng(7)
    triples = sample_pseudo_triples(split, x, 30, 0.9, rng)
    pos_sets = {}
    for u, b in zip(split.train_x.rows.tolist(), split.train_x.cols.tolist()):
        pos_sets.setdefault(u, set()).add(b)
    for u, pos, neg in triples:
        assert len(pos_sets[u]) >= 2
        assert pos.b_x in pos_sets[u] and pos.b_y in pos_sets[u]
        assert pos.b_x != pos.b_y
        assert neg.b_x not in pos_sets[u] and neg.b_y not in pos_sets[u]
        assert neg.b_x != neg.b_y
        assert 0.0 <= pos.lam <= 1.0


def test_train_stage3_leaves_experts_frozen():
    split, x = _tiny()
    before = hashlib.sha256(b"".join(
        np.ascontiguousarray(t).tobytes() for t in
        (x.ru_bint, x.ru_iint, x.r_e_bint, x.r_d_bint, x.r_e_items, x.r_d_items)
    )).hexdigest()
    config = Stage3Config(eta=0.5, epochs=3, batch_size=64, seed=0)
    gp, history = train_stage3(split, x, config)
    after = hashlib.sha256(b"".join(
        np.ascontiguousarray(t).tobytes() for t in
        (x.ru_bint, x.ru_iint, x.r_e_bint, x.r_d_bint, x.r_e_items, x.r_d_items)
    )).hexdigest()
    assert before == after
    assert len(history["view_loss"]) == 3
    assert len(history["out_loss"]) == 3


def test_train_stage3_deterministic():
    split, x = _tiny()
    config = Stage3Config(eta=0.5, epochs=2, batch_size=64, seed=1)
    a, _ = train_stage3(split, x, config)
    b, _ = train_stage3(split, x, config)
    for pa, pb in zip(a.params(), b.params()):
        np.testing.assert_array_equal(pa, pb)


def test_ablation_scores_shapes():
    split, x = _tiny()
    cat = split.catalog
    assert score_all_no_moe(x).shape == (cat.n_users, cat.n_bundles)
    assert score_all_no_diff(x).shape == (cat.n_users, cat.n_bundles)
    # no-diff ignores the diffusion tables entirely
    x.r_d_bint[:] = 1e9
    x.r_d_items[:] = 1e9
    s = score_all_no_diff(x)
    assert np.all(np.abs(s) < 1e6)


def test_gate_dump_rows_cover_all_entities():
    split, x = _tiny()
    gp = GateParams.create(x.d, Rng(8))
    rows = gate_dump_rows(x, gp)
    cat = split.catalog
    assert len(rows) == cat.n_bundles + cat.n_items
    for cls, ident, view, w_e, w_d in rows:
        assert cls in ("bundle", "item")
        assert abs(w_e + w_d - 1.0) < 1e-12
