"""Top-K evaluation under the all-unrated-item protocol, plus 2-D projection.

Per user, every bundle not interacted with in training is ranked by
descending score with ties broken by ascending id.  Metrics average over
users with at least one test positive; users without are skipped, not
scored as zero (documented in the report header).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import ScenarioSplit
from .errors import BoundsError, ContractError
from .rng import Rng

log = logging.getLogger(__name__)

SITUATION_KEYS = ["warm__warm", "warm__cold", "cold__warm", "cold__cold"]


def _situation_key(bint_cold: bool, iint_cold: bool) -> str:
    return f"{'cold' if bint_cold else 'warm'}__{'cold' if iint_cold else 'warm'}"


def recall_at_k(ranked, positives, k: int) -> float:
    """|top-k hits| / |positives|."""
    if k < 1:
        raise BoundsError("k must be >= 1")
    if not positives:
        raise ContractError("empty positive set; exclude the user upstream")
    hits = sum(1 for b in ranked[:k] if b in positives)
    return hits / len(positives)


def ndcg_at_k(ranked, positives, k: int) -> float:
    """Binary-relevance NDCG with the ideal DCG truncated at min(k, |positives|)."""
    if k < 1:
        raise BoundsError("k must be >= 1")
    if not positives:
        raise ContractError("empty positive set; exclude the user upstream")
    dcg = sum(1.0 / np.log2(r + 2) for r, b in enumerate(ranked[:k]) if b in positives)
    ideal = sum(1.0 / np.log2(r + 2) for r in range(min(k, len(positives))))
    return float(dcg / ideal)


@dataclass
class MetricReport:
    scenario: str
    k: int
    n_users_evaluated: int
    recall: float
    ndcg: float
    situation_hits: dict      # situation key -> hit count within top-k
    cold_bundle_recall: float  # recall restricted to bint-cold test positives
    cold_bundle_users: int

    def to_json_dict(self) -> dict:
        return {
            "protocol": "all-unrated-item; users without test positives skipped",
            "scenario": self.scenario,
            "k": self.k,
            "n_users_evaluated": self.n_users_evaluated,
            "recall_at_k": self.recall,
            "ndcg_at_k": self.ndcg,
            "situation_hits": {key: self.situation_hits[key] for key in SITUATION_KEYS},
            "cold_bundle_recall_at_k": self.cold_bundle_recall,
            "cold_bundle_users": self.cold_bundle_users,
        }


def rank_candidates(scores: np.ndarray, split: ScenarioSplit) -> np.ndarray:
    """Per-user candidate ranking with train positives masked.

    Returns an (n_users, n_bundles) array of bundle ids in rank order;
    masked slots are pushed to the end.
    """
    scores = np.asarray(scores, dtype=np.float64)
    cat = split.catalog
    if scores.shape != (cat.n_users, cat.n_bundles):
        raise ContractError(f"score matrix shape {scores.shape} does not match catalog")
    masked = scores.copy()
    masked[split.train_x.rows, split.train_x.cols] = -np.inf
    ids = np.arange(cat.n_bundles)
    # lexsort: primary key descending score, secondary ascending id
    order = np.empty_like(masked, dtype=np.int64)
    for u in range(cat.n_users):
        order[u] = np.lexsort((ids, -masked[u]))
    return order


def evaluate(scores: np.ndarray, split: ScenarioSplit, k: int = 20) -> MetricReport:
    cat = split.catalog
    order = rank_candidates(scores, split)
    train_pairs = split.train_x.pair_set()

    pos_by_user = [[] for _ in range(cat.n_users)]
    for u, b in zip(split.test_x.rows.tolist(), split.test_x.cols.tolist()):
        pos_by_user[u].append(b)

    iint_cold = split.bundle_iint_cold
    bint_cold = split.bundle_bint_cold
    train_deg = split.train_x.row_degrees(cat.n_users)
    hits = {key: 0 for key in SITUATION_KEYS}
    recalls, ndcgs = [], []
    cold_recalls = []
    for u in range(cat.n_users):
        pos = set(pos_by_user[u])
        if not pos:
            continue
        ranked = order[u].tolist()
        # masked train positives sit at the tail; keep top-k within candidates
        n_valid = cat.n_bundles - int(train_deg[u])
        topk = ranked[:min(k, n_valid)]
        for b in topk:
            if (u, b) in train_pairs:
                raise ContractError("train positive leaked into ranked candidates")
        recalls.append(recall_at_k(ranked, pos, k))
        ndcgs.append(ndcg_at_k(ranked, pos, k))
        for b in topk:
            if b in pos:
                hits[_situation_key(bool(bint_cold[b]), bool(iint_cold[b]))] += 1
        cold_pos = {b for b in pos if bint_cold[b]}
        if cold_pos:
            cold_recalls.append(sum(1 for b in topk if b in cold_pos) / len(cold_pos))

    return MetricReport(
        scenario=split.scenario.value,
        k=k,
        n_users_evaluated=len(recalls),
        recall=float(np.mean(recalls)) if recalls else 0.0,
        ndcg=float(np.mean(ndcgs)) if ndcgs else 0.0,
        situation_hits=hits,
        cold_bundle_recall=float(np.mean(cold_recalls)) if cold_recalls else 0.0,
        cold_bundle_users=len(cold_recalls),
    )


def _power_component(cov: np.ndarray, rng: Rng, iters: int = 200) -> tuple[np.ndarray, float]:
    v = rng.normal(cov.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        nv = cov @ v
        norm = np.linalg.norm(nv)
        if norm < 1e-14:
            return np.zeros_like(v), 0.0
        v = nv / norm
    return v, float(v @ cov @ v)


def project_2d(reps: np.ndarray, labels, seed: int = 0) -> list[tuple]:
    """Top-2 principal components by power iteration with deflation.

    Returns rows (id, x, y, label).  Rank-deficient input zeroes the second
    coordinate with a warning.
    """
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[0] < 3:
        raise ContractError("projection needs at least 3 rows")
    if len(labels) != reps.shape[0]:
        raise ContractError("label count does not match row count")
    centered = reps - reps.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / reps.shape[0]
    rng = Rng(seed).derive("pca")
    v1, lam1 = _power_component(cov, rng.derive("pc1"))
    cov2 = cov - lam1 * np.outer(v1, v1)
    v2, lam2 = _power_component(cov2, rng.derive("pc2"))
    if lam1 > 0 and lam2 / max(lam1, 1e-300) < 1e-12:
        log.warning("rank-deficient input: second principal component zeroed")
        v2 = np.zeros_like(v2)
    x = centered @ v1
    y = centered @ v2
    return [(i, float(x[i]), float(y[i]), labels[i]) for i in range(reps.shape[0])]
