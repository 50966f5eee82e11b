"""Prior-embedding experts: dual-view graph propagation plus ranking-loss training.

Both views use symmetric-normalized bipartite propagation.  Layer pooling
follows the backbone formula exactly: the representation is the sum of the
K+1 layer embeddings scaled by 1/K (the printed off-by-one is kept, not
"fixed").  Entities with no training edges therefore keep their initial
embedding scaled by 1/K and receive no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import InteractionSet, ScenarioSplit
from .errors import ContractError, DivergenceError
from .nn import Adam, _sigmoid
from .rng import Rng


@dataclass
class BipartiteGraph:
    n_left: int
    n_right: int
    mat: sp.csr_matrix     # (n_left, n_right), entry 1/sqrt(deg_l * deg_r)
    mat_t: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        self.mat_t = self.mat.T.tocsr()


def normalize_adjacency(edges: InteractionSet, n_left: int, n_right: int) -> BipartiteGraph:
    """Edge weights 1/sqrt(deg(left) * deg(right)); isolated nodes keep empty rows."""
    deg_l = edges.row_degrees(n_left).astype(np.float64)
    deg_r = edges.col_degrees(n_right).astype(np.float64)
    if len(edges):
        w = 1.0 / np.sqrt(deg_l[edges.rows] * deg_r[edges.cols])
    else:
        w = np.zeros(0)
    mat = sp.csr_matrix((w, (edges.rows, edges.cols)), shape=(n_left, n_right))
    return BipartiteGraph(n_left, n_right, mat)


def propagate(g: BipartiteGraph, e_left: np.ndarray, e_right: np.ndarray, K: int):
    """Alternating propagation; returns pooled (r_left, r_right).

    r = (1/K) * sum_{k=0..K} e^(k), with e_left^(k) = A e_right^(k-1) and
    e_right^(k) = A^T e_left^(k-1).
    """
    if K < 1:
        raise ContractError("K must be >= 1")
    if e_left.shape[1] != e_right.shape[1]:
        raise ContractError("embedding dimensions differ between sides")
    acc_l, acc_r = e_left.copy(), e_right.copy()
    cur_l, cur_r = e_left, e_right
    for _ in range(K):
        nxt_l = g.mat @ cur_r
        nxt_r = g.mat_t @ cur_l
        acc_l += nxt_l
        acc_r += nxt_r
        cur_l, cur_r = nxt_l, nxt_r
    return acc_l / K, acc_r / K


def propagate_backward(g: BipartiteGraph, K: int,
                       grad_r_left: np.ndarray, grad_r_right: np.ndarray):
    """Adjoint of propagate: gradients wrt the initial embedding tables."""
    gl = grad_r_left / K
    gr = grad_r_right / K
    acc_l, acc_r = gl.copy(), gr.copy()
    for _ in range(K):
        nxt_l = g.mat @ acc_r
        nxt_r = g.mat_t @ acc_l
        acc_l = gl + nxt_l
        acc_r = gr + nxt_r
    return acc_l, acc_r


def membership_matrix(z: InteractionSet, n_bundles: int, n_items: int,
                      require_nonempty: bool = True) -> sp.csr_matrix:
    """Row-stochastic bundle->item matrix with weight 1/|C_b|."""
    sizes = z.row_degrees(n_bundles).astype(np.float64)
    if require_nonempty and np.any(sizes == 0):
        empty = np.flatnonzero(sizes == 0)
        raise ContractError(f"bundles with empty item sets: {empty[:10].tolist()}")
    w = 1.0 / sizes[z.rows]
    return sp.csr_matrix((w, (z.rows, z.cols)), shape=(n_bundles, n_items))


def aggregate_items(item_rep: np.ndarray, z: InteractionSet, n_bundles: int) -> np.ndarray:
    """Bundle representation = mean of its member items' representations."""
    m = membership_matrix(z, n_bundles, item_rep.shape[0])
    return m @ item_rep


def bpr_loss(scores_pos: np.ndarray, scores_neg: np.ndarray):
    """Summed -ln sigmoid(pos - neg); returns (loss, dloss/d(pos - neg))."""
    diff = scores_pos - scores_neg
    # -ln sigma(d) = softplus(-d), computed stably
    loss = float(np.sum(np.logaddexp(0.0, -diff)))
    grad = _sigmoid(diff) - 1.0
    return loss, grad


@dataclass
class Stage1Config:
    d: int = 64
    K: int = 2
    lr: float = 0.05
    weight_decay: float = 1e-5
    epochs: int = 100
    patience: int = 10
    batch_size: int = 2048
    seed: int = 0


@dataclass
class PriorEmbeddings:
    """Initial tables plus derived view representations."""
    e_user: np.ndarray
    e_bundle: np.ndarray
    e_item: np.ndarray
    K: int

    def view_reps(self, gx: BipartiteGraph, gy: BipartiteGraph, z: InteractionSet):
        ru_b, rb = propagate(gx, self.e_user, self.e_bundle, self.K)
        ru_i, ri = propagate(gy, self.e_user, self.e_item, self.K)
        rb_i = aggregate_items(ri, z, self.e_bundle.shape[0])
        return ru_b, rb, ru_i, ri, rb_i


def _sample_negatives(rng: Rng, users: np.ndarray, candidates: np.ndarray,
                      pos_sets: list[set]) -> np.ndarray:
    """Negatives drawn from `candidates` (train-interacted bundles only, so
    cold embeddings receive no gradient and stay at their initial values)."""
    neg = candidates[rng.integers(users.size, 0, candidates.size)]
    for i, u in enumerate(users.tolist()):
        while int(neg[i]) in pos_sets[u]:
            neg[i] = int(candidates[rng.integers(1, 0, candidates.size)[0]])
    return neg


def _recall_at_k(scores: np.ndarray, train_x: InteractionSet, eval_x: InteractionSet, k: int = 20) -> float:
    """Mean Recall@k over users with eval positives, train positives masked."""
    n_users = scores.shape[0]
    masked = scores.copy()
    masked[train_x.rows, train_x.cols] = -np.inf
    pos_by_user = [[] for _ in range(n_users)]
    for u, b in zip(eval_x.rows.tolist(), eval_x.cols.tolist()):
        pos_by_user[u].append(b)
    total, count = 0.0, 0
    order = np.argsort(-masked, axis=1, kind="stable")[:, :k]
    for u, pos in enumerate(pos_by_user):
        if not pos:
            continue
        hits = len(set(order[u].tolist()) & set(pos))
        total += hits / len(pos)
        count += 1
    return total / count if count else 0.0


def train_stage1(split: ScenarioSplit, config: Stage1Config):
    """Joint two-view training with the summed ranking loss.

    Returns (PriorEmbeddings, history dict).  Only embedding rows touched
    by a batch are weight-decayed, so entities that never appear in a
    training triple keep their initial embeddings exactly.
    """
    cat = split.catalog
    rng = Rng(config.seed).derive("stage1")
    emb = PriorEmbeddings(
        e_user=rng.uniform_init((cat.n_users, config.d), config.d),
        e_bundle=rng.uniform_init((cat.n_bundles, config.d), config.d),
        e_item=rng.uniform_init((cat.n_items, config.d), config.d),
        K=config.K,
    )
    gx = normalize_adjacency(split.train_x, cat.n_users, cat.n_bundles)
    gy = normalize_adjacency(split.y, cat.n_users, cat.n_items)
    agg = membership_matrix(split.z, cat.n_bundles, cat.n_items)
    agg_t = agg.T.tocsr()

    pos_sets = [set() for _ in range(cat.n_users)]
    for u, b in zip(split.train_x.rows.tolist(), split.train_x.cols.tolist()):
        pos_sets[u].add(b)
    warm_bundles = np.unique(split.train_x.cols)
    if warm_bundles.size < 2:
        raise ContractError("need at least two train-interacted bundles")

    params = [emb.e_user, emb.e_bundle, emb.e_item]
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    users_all = split.train_x.rows
    pos_all = split.train_x.cols
    n_pairs = users_all.size

    best = {"recall": -1.0, "params": [p.copy() for p in params], "epoch": 0}
    history = {"loss": [], "val_recall": []}
    bad_epochs = 0

    for epoch in range(config.epochs):
        order = rng.permutation(n_pairs)
        neg_all = _sample_negatives(rng, users_all[order], warm_bundles, pos_sets)
        epoch_loss = 0.0
        for start in range(0, n_pairs, config.batch_size):
            idx = order[start:start + config.batch_size]
            u, bp = users_all[idx], pos_all[idx]
            bn = neg_all[start:start + config.batch_size]

            ru_b, rb = propagate(gx, emb.e_user, emb.e_bundle, config.K)
            ru_i, ri = propagate(gy, emb.e_user, emb.e_item, config.K)
            rb_i = agg @ ri

            s_pos = np.sum(ru_b[u] * rb[bp], axis=1) + np.sum(ru_i[u] * rb_i[bp], axis=1)
            s_neg = np.sum(ru_b[u] * rb[bn], axis=1) + np.sum(ru_i[u] * rb_i[bn], axis=1)
            loss, c = bpr_loss(s_pos, s_neg)
            epoch_loss += loss
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")

            g_ru_b = np.zeros_like(ru_b)
            g_rb = np.zeros_like(rb)
            g_ru_i = np.zeros_like(ru_i)
            g_rb_i = np.zeros_like(rb_i)
            cw = c[:, None]
            np.add.at(g_ru_b, u, cw * (rb[bp] - rb[bn]))
            np.add.at(g_rb, bp, cw * ru_b[u])
            np.add.at(g_rb, bn, -cw * ru_b[u])
            np.add.at(g_ru_i, u, cw * (rb_i[bp] - rb_i[bn]))
            np.add.at(g_rb_i, bp, cw * ru_i[u])
            np.add.at(g_rb_i, bn, -cw * ru_i[u])
            g_ri = agg_t @ g_rb_i

            g_eu_b, g_eb = propagate_backward(gx, config.K, g_ru_b, g_rb)
            g_eu_i, g_ei = propagate_backward(gy, config.K, g_ru_i, g_ri)
            g_eu = g_eu_b + g_eu_i

            # Decay only rows that received gradient; untouched entities stay exact.
            masks = [(np.any(g != 0.0, axis=1, keepdims=True)).astype(np.float64)
                     for g in (g_eu, g_eb, g_ei)]
            opt.step(params, [g_eu, g_eb, g_ei], decay_masks=masks)

        history["loss"].append(epoch_loss / max(n_pairs, 1))
        ru_b, rb = propagate(gx, emb.e_user, emb.e_bundle, config.K)
        ru_i, ri = propagate(gy, emb.e_user, emb.e_item, config.K)
        rb_i = agg @ ri
        scores = ru_b @ rb.T + ru_i @ rb_i.T
        val_recall = _recall_at_k(scores, split.train_x, split.val_x)
        history["val_recall"].append(val_recall)
        if val_recall > best["recall"]:
            best = {"recall": val_recall, "params": [p.copy() for p in params], "epoch": epoch}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    emb.e_user[:], emb.e_bundle[:], emb.e_item[:] = best["params"]
    history["best_epoch"] = best["epoch"]
    history["best_val_recall"] = best["recall"]
    return emb, history
