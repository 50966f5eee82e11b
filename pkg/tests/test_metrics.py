"""Ranking metrics against brute-force oracles; evaluation protocol; projection."""

import itertools

import numpy as np
import pytest

from coldbundle.data import Scenario, make_split, synth_blockmodel
from coldbundle.errors import BoundsError, ContractError
from coldbundle.metrics import (
    SITUATION_KEYS, evaluate, ndcg_at_k, project_2d, rank_candidates, recall_at_k,
)
from coldbundle.rng import Rng


def _oracle_rank(scores, masked):
    """Exhaustive: sort candidates by (-score, id)."""
    ids = [i for i in range(len(scores)) if i not in masked]
    return sorted(ids, key=lambda i: (-scores[i], i))


def test_recall_ndcg_against_oracle():
    rng = Rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 5, 30)[0])
        scores = rng.normal(n)
        k = int(rng.integers(1, 1, n + 1)[0])
        n_pos = int(rng.integers(1, 1, n + 1)[0])
        pos = set(rng.choice(n, n_pos).tolist())
        ranked = _oracle_rank(scores, set())
        topk = ranked[:k]
        hits = sum(1 for b in topk if b in pos)
        assert abs(recall_at_k(ranked, pos, k) - hits / len(pos)) < 1e-12
        dcg = sum(1.0 / np.log2(r + 2) for r, b in enumerate(topk) if b in pos)
        idcg = sum(1.0 / np.log2(r + 2) for r in range(min(k, len(pos))))
        assert abs(ndcg_at_k(ranked, pos, k) - dcg / idcg) < 1e-12


def test_metric_contract_errors():
    with pytest.raises(BoundsError):
        recall_at_k([0, 1], {0}, 0)
    with pytest.raises(ContractError):
        recall_at_k([0, 1], set(), 1)
    with pytest.raises(BoundsError):
        ndcg_at_k([0, 1], {0}, 0)
    with pytest.raises(ContractError):
        ndcg_at_k([0, 1], set(), 1)


def _split(seed=0):
    cat, x, y, z = synth_blockmodel(20, 24, 10, 2, 4, 0.5, seed)
    return make_split(x, y, z, cat, Scenario.COLD_START, seed=seed)


def test_rank_candidates_masks_train_and_breaks_ties():
    split = _split()
    cat = split.catalog
    scores = np.zeros((cat.n_users, cat.n_bundles))  # all ties
    order = rank_candidates(scores, split)
    train_pairs = split.train_x.pair_set()
    for u in range(cat.n_users):
        row = order[u].tolist()
        n_masked = sum(1 for b in range(cat.n_bundles) if (u, b) in train_pairs)
        unmasked = row[:cat.n_bundles - n_masked]
        # ties resolve to ascending id among unmasked candidates
        assert unmasked == sorted(unmasked)
        for b in unmasked:
            assert (u, b) not in train_pairs


def test_rank_candidates_shape_check():
    split = _split()
    with pytest.raises(ContractError):
        rank_candidates(np.zeros((3, 3)), split)


def test_evaluate_report_consistency():
    split = _split(1)
    cat = split.catalog
    scores = Rng(1).normal((cat.n_users, cat.n_bundles))
    report = evaluate(scores, split, k=5)
    assert report.k == 5
    assert 0.0 <= report.recall <= 1.0
    assert 0.0 <= report.ndcg <= 1.0
    assert report.n_users_evaluated == len(set(split.test_x.rows.tolist()))
    d = report.to_json_dict()
    assert list(d["situation_hits"].keys()) == SITUATION_KEYS
    # in a bundle-cold split every test positive is bint-cold
    assert d["situation_hits"]["warm__warm"] == 0
    assert d["situation_hits"]["warm__cold"] == 0


def test_evaluate_perfect_scores():
    split = _split(2)
    cat = split.catalog
    scores = np.zeros((cat.n_users, cat.n_bundles))
    for u, b in zip(split.test_x.rows.tolist(), split.test_x.cols.tolist()):
        scores[u, b] = 10.0
    report = evaluate(scores, split, k=20)
    assert report.recall == 1.0
    assert report.cold_bundle_recall == 1.0


def test_project_2d_matches_eigendecomposition():
    rng = Rng(4)
    base = rng.normal((40, 2)) @ np.array([[3.0, 0.5, 0.1], [0.2, 1.5, 0.05]])
    base += 0.01 * rng.normal((40, 3))
    rows = project_2d(base, ["a"] * 40, seed=0)
    xy = np.array([[r[1], r[2]] for r in rows])
    centered = base - base.mean(axis=0)
    cov = centered.T @ centered / base.shape[0]
    w, v = np.linalg.eigh(cov)
    pc = centered @ v[:, ::-1][:, :2]
    # components match up to sign
    for j in range(2):
        match = min(np.abs(xy[:, j] - pc[:, j]).max(), np.abs(xy[:, j] + pc[:, j]).max())
        assert match < 1e-6


def test_project_2d_rank_deficient():
    base = np.outer(np.arange(10, dtype=np.float64), np.ones(3))
    rows = project_2d(base, list("abcdefghij"), seed=0)
    ys = [r[2] for r in rows]
    assert np.allclose(ys, 0.0)


def test_project_2d_contract():
    with pytest.raises(ContractError):
        project_2d(np.zeros((2, 3)), ["a", "b"])
    with pytest.raises(ContractError):
        project_2d(np.zeros((5, 3)), ["a"])
