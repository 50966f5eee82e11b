"""Cold-aware hierarchical expert fusion.

Each view fuses its embedded and diffusion expert with a Softmax gate fed a
1-dim log interaction count (zero for cold and pseudo-cold entities); the
item-level view fuses per item before aggregating to bundles.  A Tanh
output gate over the concatenated per-view bundle representations weights
the per-view inner-product scores.  Stage-3 trains only the three gate
matrices on frozen expert outputs, optionally augmented with interpolated
pseudo cold bundles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import ScenarioSplit
from .errors import ContractError, DivergenceError
from .graph import bpr_loss
from .nn import Adam
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass
class ExpertOutputs:
    """Frozen expert tables consumed by gate training and scoring."""
    ru_bint: np.ndarray         # (n_users, d) embedded user reps, bundle view
    ru_iint: np.ndarray         # (n_users, d) embedded user reps, item view
    r_e_bint: np.ndarray        # (n_bundles, d) embedded bundle reps
    r_d_bint: np.ndarray        # (n_bundles, d) diffusion bundle reps
    r_e_items: np.ndarray       # (n_items, d) embedded item reps
    r_d_items: np.ndarray       # (n_items, d) diffusion item reps
    agg: sp.csr_matrix          # (n_bundles, n_items) mean membership
    bundle_feature: np.ndarray  # (n_bundles,) log1p train user-bundle degree
    item_feature: np.ndarray    # (n_items,) log1p train user-item degree
    r_e_iint_b: np.ndarray = field(init=False)  # aggregated item-view expert outputs
    r_d_iint_b: np.ndarray = field(init=False)

    def __post_init__(self):
        self.r_e_iint_b = self.agg @ self.r_e_items
        self.r_d_iint_b = self.agg @ self.r_d_items

    @property
    def d(self) -> int:
        return self.r_e_bint.shape[1]

    def tensors(self) -> dict:
        return {
            "ru_bint": self.ru_bint, "ru_iint": self.ru_iint,
            "r_e_bint": self.r_e_bint, "r_d_bint": self.r_d_bint,
            "r_e_items": self.r_e_items, "r_d_items": self.r_d_items,
            "bundle_feature": self.bundle_feature, "item_feature": self.item_feature,
        }


def cold_features(split: ScenarioSplit) -> tuple[np.ndarray, np.ndarray]:
    """log(1 + train interaction count) per bundle and item; 0 for cold."""
    cat = split.catalog
    bf = np.log1p(split.train_x.col_degrees(cat.n_bundles).astype(np.float64))
    itf = np.log1p(split.y.col_degrees(cat.n_items).astype(np.float64))
    return bf, itf


@dataclass
class GateParams:
    w_bint: np.ndarray  # (2, 1)
    w_iint: np.ndarray  # (2, 1)
    w_out: np.ndarray   # (2, 2d)

    @classmethod
    def create(cls, d: int, rng: Rng) -> "GateParams":
        return cls(
            w_bint=rng.uniform_init((2, 1), 1) * 0.1,
            w_iint=rng.uniform_init((2, 1), 1) * 0.1,
            w_out=rng.uniform_init((2, 2 * d), 2 * d),
        )

    def params(self) -> list[np.ndarray]:
        return [self.w_bint, self.w_iint, self.w_out]


def view_gate(features: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Softmax over the two experts; features (n,) -> weights (n, 2)."""
    features = np.atleast_1d(np.asarray(features, dtype=np.float64))
    if not np.all(np.isfinite(features)):
        raise ContractError("non-finite gate feature")
    logits = features[:, None] * w[:, 0][None, :]
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def fuse(r_e: np.ndarray, r_d: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return weights[:, 0:1] * r_e + weights[:, 1:2] * r_d


def fused_tables(x: ExpertOutputs, gp: GateParams):
    """Per-bundle fused representations of both views (items fused first)."""
    w_b = view_gate(x.bundle_feature, gp.w_bint)
    w_i = view_gate(x.item_feature, gp.w_iint)
    rb_bint = fuse(x.r_e_bint, x.r_d_bint, w_b)
    items_fused = fuse(x.r_e_items, x.r_d_items, w_i)
    rb_iint = x.agg @ items_fused
    return rb_bint, rb_iint, w_b, w_i


def output_gate(a_out: np.ndarray, w_out: np.ndarray) -> np.ndarray:
    return np.tanh(np.atleast_2d(a_out) @ w_out.T)


def predict(u: int, b: int, x: ExpertOutputs, gp: GateParams) -> float:
    """Score of one user-bundle pair through both gating layers."""
    rb_bint, rb_iint, _, _ = fused_tables(x, gp)
    a_out = np.concatenate([rb_bint[b], rb_iint[b]])
    g = output_gate(a_out, gp.w_out)[0]
    return float(g[0] * x.ru_bint[u] @ rb_bint[b] + g[1] * x.ru_iint[u] @ rb_iint[b])


def score_all(x: ExpertOutputs, gp: GateParams) -> np.ndarray:
    """Full (n_users, n_bundles) score matrix."""
    rb_bint, rb_iint, _, _ = fused_tables(x, gp)
    a_out = np.concatenate([rb_bint, rb_iint], axis=1)
    g = output_gate(a_out, gp.w_out)
    return (x.ru_bint @ rb_bint.T) * g[:, 0][None, :] + (x.ru_iint @ rb_iint.T) * g[:, 1][None, :]


def score_all_no_moe(x: ExpertOutputs) -> np.ndarray:
    """Ablation: experts summed with equal weight, no gates."""
    rb_bint = x.r_e_bint + x.r_d_bint
    rb_iint = x.r_e_iint_b + x.r_d_iint_b
    return x.ru_bint @ rb_bint.T + x.ru_iint @ rb_iint.T


def score_all_no_diff(x: ExpertOutputs) -> np.ndarray:
    """Ablation: prior-embedding experts only."""
    return x.ru_bint @ x.r_e_bint.T + x.ru_iint @ x.r_e_iint_b.T


@dataclass
class PseudoBundle:
    """Convex interpolation of two source bundles with zeroed cold feature."""
    b_x: int
    b_y: int
    lam: float
    r_e_bint: np.ndarray
    r_d_bint: np.ndarray
    r_e_iint: np.ndarray  # aggregated item-layer reps, kept consistent across layers
    r_d_iint: np.ndarray
    feature: float = 0.0


def interpolate_pseudo(b_x: int, b_y: int, lam: float, x: ExpertOutputs) -> PseudoBundle:
    if not 0.0 <= lam <= 1.0:
        raise ContractError("interpolation ratio outside [0, 1]")
    if b_x == b_y:
        raise ContractError("pseudo bundle needs two distinct sources")
    mix = lambda a: lam * a[b_x] + (1.0 - lam) * a[b_y]
    return PseudoBundle(
        b_x=b_x, b_y=b_y, lam=lam,
        r_e_bint=mix(x.r_e_bint), r_d_bint=mix(x.r_d_bint),
        r_e_iint=mix(x.r_e_iint_b), r_d_iint=mix(x.r_d_iint_b),
    )


@dataclass
class Stage3Config:
    eta: float = 0.5
    beta_alpha: float = 0.9
    lr: float = 0.02
    weight_decay: float = 0.0
    epochs: int = 150
    batch_size: int = 4096
    seed: int = 0


def _pair_scores_and_grads(x, gp, u, b, coef, acc):
    """Accumulate gradients for real (user, bundle) score terms.

    `acc` carries (g_w_out, GB, GI) plus the cached fused tables for the
    current parameter values.
    """
    rb_bint, rb_iint, w_b, w_i, g_w_out, GB, GI = acc
    d = x.d
    ru1, ru2 = x.ru_bint[u], x.ru_iint[u]
    fb, fi = rb_bint[b], rb_iint[b]
    s1 = np.sum(ru1 * fb, axis=1)
    s2 = np.sum(ru2 * fi, axis=1)
    a_out = np.concatenate([fb, fi], axis=1)
    g = np.tanh(a_out @ gp.w_out.T)
    y = g[:, 0] * s1 + g[:, 1] * s2
    s_vec = np.stack([s1, s2], axis=1)
    v = coef[:, None] * (1.0 - g * g) * s_vec
    g_w_out += v.T @ a_out
    d_a = v @ gp.w_out
    d_fb = coef[:, None] * g[:, 0:1] * ru1 + d_a[:, :d]
    d_fi = coef[:, None] * g[:, 1:2] * ru2 + d_a[:, d:]
    np.add.at(GB, b, d_fb)
    np.add.at(GI, b, d_fi)
    return y


def _pseudo_scores_and_grads(x, gp, u_ru1, u_ru2, fb, fi, coef, g_w_out):
    """Score pseudo bundles; only the output gate receives gradient
    (zero features pin the view gates at [0.5, 0.5])."""
    s1 = np.sum(u_ru1 * fb, axis=1)
    s2 = np.sum(u_ru2 * fi, axis=1)
    a_out = np.concatenate([fb, fi], axis=1)
    g = np.tanh(a_out @ gp.w_out.T)
    y = g[:, 0] * s1 + g[:, 1] * s2
    s_vec = np.stack([s1, s2], axis=1)
    v = coef[:, None] * (1.0 - g * g) * s_vec
    g_w_out += v.T @ a_out
    return y


def _gate_grad_from_rep_grads(G, r_e, r_d, w, features):
    """Fold per-entity fused-rep gradients into the (2, 1) gate matrix."""
    p_e = np.sum(G * r_e, axis=1)
    p_d = np.sum(G * r_d, axis=1)
    pbar = w[:, 0] * p_e + w[:, 1] * p_d
    glog_e = w[:, 0] * (p_e - pbar)
    glog_d = w[:, 1] * (p_d - pbar)
    return np.array([[np.sum(glog_e * features)], [np.sum(glog_d * features)]])


def stage3_loss_and_grads(x: ExpertOutputs, gp: GateParams,
                          triples: tuple[np.ndarray, np.ndarray, np.ndarray],
                          pseudo: list | None = None):
    """Summed ranking loss over real and pseudo triples; exact gate gradients.

    pseudo is a list of (u, PseudoBundle_pos, PseudoBundle_neg).
    """
    u, bp, bn = triples
    rb_bint, rb_iint, w_b, w_i = fused_tables(x, gp)
    g_w_out = np.zeros_like(gp.w_out)
    GB = np.zeros_like(x.r_e_bint)
    GI = np.zeros_like(x.r_e_iint_b)
    acc = (rb_bint, rb_iint, w_b, w_i, g_w_out, GB, GI)

    # First pass computes scores with unit coef to derive the loss weights,
    # but gradient weights depend on the score difference, so score first.
    def pair_scores(users, bundles):
        ru1, ru2 = x.ru_bint[users], x.ru_iint[users]
        fb, fi = rb_bint[bundles], rb_iint[bundles]
        s1 = np.sum(ru1 * fb, axis=1)
        s2 = np.sum(ru2 * fi, axis=1)
        g = np.tanh(np.concatenate([fb, fi], axis=1) @ gp.w_out.T)
        return g[:, 0] * s1 + g[:, 1] * s2

    total_loss = 0.0
    if u.size:
        y_pos = pair_scores(u, bp)
        y_neg = pair_scores(u, bn)
        loss, c = bpr_loss(y_pos, y_neg)
        total_loss += loss
        _pair_scores_and_grads(x, gp, u, bp, c, acc)
        _pair_scores_and_grads(x, gp, u, bn, -c, acc)

    if pseudo:
        pu = np.array([p[0] for p in pseudo], dtype=np.int64)
        fb_pos = np.stack([0.5 * (p[1].r_e_bint + p[1].r_d_bint) for p in pseudo])
        fi_pos = np.stack([0.5 * (p[1].r_e_iint + p[1].r_d_iint) for p in pseudo])
        fb_neg = np.stack([0.5 * (p[2].r_e_bint + p[2].r_d_bint) for p in pseudo])
        fi_neg = np.stack([0.5 * (p[2].r_e_iint + p[2].r_d_iint) for p in pseudo])
        ru1, ru2 = x.ru_bint[pu], x.ru_iint[pu]
        yp = _pseudo_scores_and_grads(x, gp, ru1, ru2, fb_pos, fi_pos,
                                      np.zeros(pu.size), np.zeros_like(gp.w_out))
        yn = _pseudo_scores_and_grads(x, gp, ru1, ru2, fb_neg, fi_neg,
                                      np.zeros(pu.size), np.zeros_like(gp.w_out))
        loss, c = bpr_loss(yp, yn)
        total_loss += loss
        _pseudo_scores_and_grads(x, gp, ru1, ru2, fb_pos, fi_pos, c, g_w_out)
        _pseudo_scores_and_grads(x, gp, ru1, ru2, fb_neg, fi_neg, -c, g_w_out)

    g_w_bint = _gate_grad_from_rep_grads(GB, x.r_e_bint, x.r_d_bint, w_b, x.bundle_feature)
    GI_items = x.agg.T @ GI
    g_w_iint = _gate_grad_from_rep_grads(GI_items, x.r_e_items, x.r_d_items, w_i, x.item_feature)
    return total_loss, [g_w_bint, g_w_iint, g_w_out]


def sample_pseudo_triples(split: ScenarioSplit, x: ExpertOutputs, count: int,
                          beta_alpha: float, rng: Rng) -> list:
    """`count` augmented triples: pseudo-positive interpolates two of the
    user's train positives, pseudo-negative two never-interacted bundles."""
    cat = split.catalog
    pos_by_user = [[] for _ in range(cat.n_users)]
    for u, b in zip(split.train_x.rows.tolist(), split.train_x.cols.tolist()):
        pos_by_user[u].append(b)
    eligible = [u for u in range(cat.n_users) if len(pos_by_user[u]) >= 2]
    skipped = cat.n_users - len(eligible)
    if skipped:
        log.info("cold-gating augmentation: %d users lack two positives, skipped", skipped)
    if not eligible:
        return []
    pos_sets = [set(p) for p in pos_by_user]
    out = []
    for _ in range(count):
        u = eligible[int(rng.integers(1, 0, len(eligible))[0])]
        pool = pos_by_user[u]
        i, j = rng.choice(len(pool), 2)[:2]
        bx, by = pool[int(i)], pool[int(j)]
        lam_p = rng.beta(beta_alpha, beta_alpha)
        pos = interpolate_pseudo(bx, by, lam_p, x)
        while True:
            nx, ny = rng.integers(2, 0, cat.n_bundles)
            if nx != ny and int(nx) not in pos_sets[u] and int(ny) not in pos_sets[u]:
                break
        lam_n = rng.beta(beta_alpha, beta_alpha)
        neg = interpolate_pseudo(int(nx), int(ny), lam_n, x)
        out.append((u, pos, neg))
    return out


def _view_phase_loss_and_grads(x: ExpertOutputs, gp: GateParams,
                               triples: tuple[np.ndarray, np.ndarray, np.ndarray]):
    """Ranking loss with unit output fusion (y = s_bint + s_iint); gradients
    flow to the view gates only."""
    u, bp, bn = triples
    rb_bint, rb_iint, w_b, w_i = fused_tables(x, gp)
    GB = np.zeros_like(x.r_e_bint)
    GI = np.zeros_like(x.r_e_iint_b)

    def scores(users, bundles):
        return (np.sum(x.ru_bint[users] * rb_bint[bundles], axis=1)
                + np.sum(x.ru_iint[users] * rb_iint[bundles], axis=1))

    loss, c = bpr_loss(scores(u, bp), scores(u, bn))
    cw = c[:, None]
    np.add.at(GB, bp, cw * x.ru_bint[u])
    np.add.at(GB, bn, -cw * x.ru_bint[u])
    np.add.at(GI, bp, cw * x.ru_iint[u])
    np.add.at(GI, bn, -cw * x.ru_iint[u])
    g_w_bint = _gate_grad_from_rep_grads(GB, x.r_e_bint, x.r_d_bint, w_b, x.bundle_feature)
    GI_items = x.agg.T @ GI
    g_w_iint = _gate_grad_from_rep_grads(GI_items, x.r_e_items, x.r_d_items, w_i, x.item_feature)
    return loss, [g_w_bint, g_w_iint]


def _epoch_negatives(rng: Rng, users: np.ndarray, warm_bundles: np.ndarray,
                     pos_sets: list[set]) -> np.ndarray:
    neg = warm_bundles[rng.integers(users.size, 0, warm_bundles.size)]
    for i, u in enumerate(users.tolist()):
        while int(neg[i]) in pos_sets[u]:
            neg[i] = int(warm_bundles[rng.integers(1, 0, warm_bundles.size)[0]])
    return neg


def train_stage3(split: ScenarioSplit, x: ExpertOutputs, config: Stage3Config):
    """Gate-only training on frozen expert outputs, in two phases.

    Phase one fits the two view-layer gates with unit output fusion; phase
    two freezes them and fits the output gate on the real plus augmented
    triples.  Decoupling the phases keeps the view-layer routing (which has
    a clean per-entity signal) from being disturbed by the higher-variance
    output-gate updates.  Negatives are drawn from train-interacted bundles,
    mirroring the prior-embedding stage: the ranking signal never touches
    bundles that are cold at inference time.  Phase one runs its full epoch
    budget (the two view gates are scalars with a monotone trajectory);
    phase two keeps the epoch snapshot with the best validation Recall@20.
    Returns (GateParams, history).
    """
    from .graph import _recall_at_k

    cat = split.catalog
    rng = Rng(config.seed).derive("stage3")
    gp = GateParams.create(x.d, rng.derive("init"))
    gp.w_out[:] = 0.0

    users_all = split.train_x.rows
    pos_all = split.train_x.cols
    n_pairs = users_all.size
    pos_sets = [set() for _ in range(cat.n_users)]
    for u, b in zip(users_all.tolist(), pos_all.tolist()):
        pos_sets[u].add(b)
    warm_bundles = np.unique(pos_all)
    if warm_bundles.size < 2:
        raise ContractError("need at least two train-interacted bundles")
    n_pseudo = int(round(config.eta * n_pairs))

    history = {"view_loss": [], "view_val_recall": [],
               "out_loss": [], "out_val_recall": []}

    # Phase one: view-layer gates, unit output fusion, full epoch budget.
    view_params = [gp.w_bint, gp.w_iint]
    opt = Adam(view_params, lr=config.lr, weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        order = rng.permutation(n_pairs)
        neg_all = _epoch_negatives(rng, users_all[order], warm_bundles, pos_sets)
        epoch_loss = 0.0
        for start in range(0, n_pairs, config.batch_size):
            idx = order[start:start + config.batch_size]
            triples = (users_all[idx], pos_all[idx], neg_all[start:start + config.batch_size])
            loss, grads = _view_phase_loss_and_grads(x, gp, triples)
            if not np.isfinite(loss):
                raise DivergenceError(f"view-gate loss diverged at epoch {epoch}")
            epoch_loss += loss
            opt.step(view_params, grads)
        history["view_loss"].append(epoch_loss / max(1, n_pairs))
        rb_bint, rb_iint, _, _ = fused_tables(x, gp)
        scores = x.ru_bint @ rb_bint.T + x.ru_iint @ rb_iint.T
        history["view_val_recall"].append(
            _recall_at_k(scores, split.train_x, split.val_x))

    # Phase two: output gate on frozen view routing, real plus pseudo triples.
    opt = Adam([gp.w_out], lr=config.lr, weight_decay=config.weight_decay)
    n_batches = max(1, int(np.ceil(n_pairs / config.batch_size)))
    best = {"recall": -1.0, "w_out": gp.w_out.copy(), "epoch": -1}
    for epoch in range(config.epochs):
        order = rng.permutation(n_pairs)
        neg_all = _epoch_negatives(rng, users_all[order], warm_bundles, pos_sets)
        pseudo = sample_pseudo_triples(split, x, n_pseudo, config.beta_alpha,
                                       rng.derive(f"pseudo:{epoch}")) if n_pseudo else []
        per_batch_pseudo = max(1, int(np.ceil(len(pseudo) / n_batches))) if pseudo else 0
        pseudo_cursor = 0
        epoch_loss = 0.0
        for start in range(0, n_pairs, config.batch_size):
            idx = order[start:start + config.batch_size]
            triples = (users_all[idx], pos_all[idx], neg_all[start:start + config.batch_size])
            batch_pseudo = pseudo[pseudo_cursor:pseudo_cursor + per_batch_pseudo]
            pseudo_cursor += len(batch_pseudo)
            loss, grads = stage3_loss_and_grads(x, gp, triples, batch_pseudo)
            if not np.isfinite(loss):
                raise DivergenceError(f"gate loss diverged at epoch {epoch}")
            epoch_loss += loss
            opt.step([gp.w_out], [grads[2]])
        history["out_loss"].append(epoch_loss / max(1, n_pairs + len(pseudo)))
        val_recall = _recall_at_k(score_all(x, gp), split.train_x, split.val_x)
        history["out_val_recall"].append(val_recall)
        if val_recall > best["recall"]:
            best = {"recall": val_recall, "w_out": gp.w_out.copy(), "epoch": epoch}
    gp.w_out[:] = best["w_out"]
    history["out_best_epoch"] = best["epoch"]
    history["best_val_recall"] = best["recall"]
    return gp, history


def gate_dump_rows(x: ExpertOutputs, gp: GateParams) -> list[tuple]:
    """Per-entity view-gate weights: (entity_class, id, view, w_embed, w_diff)."""
    rows = []
    w_b = view_gate(x.bundle_feature, gp.w_bint)
    for b in range(w_b.shape[0]):
        rows.append(("bundle", b, "bint", float(w_b[b, 0]), float(w_b[b, 1])))
    w_i = view_gate(x.item_feature, gp.w_iint)
    for i in range(w_i.shape[0]):
        rows.append(("item", i, "iint", float(w_i[i, 0]), float(w_i[i, 1])))
    return rows
