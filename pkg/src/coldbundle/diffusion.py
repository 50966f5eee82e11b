"""Per-view conditional diffusion experts.

A small MLP is trained to predict the clean representation from a noised
one plus a condition derived from bundle-item affiliations and a sinusoidal
time embedding.  Generation starts from a similarity-based anchor (mean of
the top-n composition-similar warm entities' representations) and runs a
deterministic strided denoising loop: at each kept timestep the implied
noise is extracted and re-applied at the next kept timestep, with no fresh
noise, so outputs are reproducible and the full-length loop is recovered
exactly when the stride is 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import InteractionSet
from .errors import ContractError, DivergenceError
from .graph import bpr_loss, membership_matrix
from .nn import Adam, Mlp
from .rng import Rng

log = logging.getLogger(__name__)

# Endpoint calibration for the beta range, stated at the reference step
# count 500 and scaled inversely with T so total injected noise stays
# roughly constant across step counts.
_BETA_LO, _BETA_HI, _REF_T = 1e-4, 0.02, 500


@dataclass
class NoiseSchedule:
    kind: str  # linear | cosine | exp
    T: int
    beta: np.ndarray       # index 0 is step 1
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def bar(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ContractError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[t - 1])


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    if T < 2:
        raise ContractError("schedule needs T >= 2")
    scale = _REF_T / T
    if kind == "linear":
        beta = np.linspace(_BETA_LO, _BETA_HI, T) * scale
    elif kind == "exp":
        beta = np.geomspace(_BETA_LO, _BETA_HI, T) * scale
    elif kind == "cosine":
        def f(t):
            return np.cos((t / T + 0.008) / 1.008 * np.pi / 2.0) ** 2
        bar = f(np.arange(T + 1)) / f(0)
        beta = np.clip(1.0 - bar[1:] / bar[:-1], 0.0, 0.999)
    else:
        raise ContractError(f"unknown schedule kind {kind!r}")
    beta = np.clip(beta, 0.0, 0.999)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(kind, T, beta, alpha, alpha_bar)


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    ab = s.bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def implied_noise(x_t: np.ndarray, x0_hat: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    """Algebraic inverse of forward_noise given a clean estimate."""
    ab = s.bar(t)
    return (x_t - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)


def time_embedding(t, T: int, dim: int = 64) -> np.ndarray:
    """Sinusoidal embedding of t/T; t may be a scalar or an array."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(np.arange(half) * (-np.log(10000.0) / max(half - 1, 1)))
    ang = (t[:, None] / T) * freqs[None, :] * 10000.0
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class Denoiser:
    net: Mlp
    d: int
    d_cond: int
    d_time: int


def make_denoiser(d: int, d_cond: int, d_time: int, rng: Rng, hidden: int | None = None) -> Denoiser:
    hidden = hidden or 4 * d
    net = Mlp.create([d + d_cond + d_time, hidden, hidden, d], rng, hidden_act="silu")
    return Denoiser(net=net, d=d, d_cond=d_cond, d_time=d_time)


def denoiser_forward(den: Denoiser, x_t: np.ndarray, cond: np.ndarray,
                     t, s: NoiseSchedule):
    """Batched x0 prediction; returns (x0_hat, tape)."""
    x_t = np.atleast_2d(x_t)
    cond = np.atleast_2d(cond)
    t_arr = np.full(x_t.shape[0], t) if np.isscalar(t) else np.asarray(t)
    temb = time_embedding(t_arr, s.T, den.d_time)
    inp = np.concatenate([x_t, cond, temb], axis=1)
    return den.net.forward(inp)


@dataclass
class DiffusionConfig:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.0
    d_time: int = 64
    hidden: int | None = None
    seed: int = 0


def train_diffusion(warm_reps: np.ndarray, conds: np.ndarray, s: NoiseSchedule,
                    config: DiffusionConfig, rng: Rng,
                    den: Denoiser | None = None) -> Denoiser:
    """Fit x0-prediction on the warm representations.

    Per sample and epoch: fresh t ~ Uniform[1, T], eps ~ N(0, I), squared
    error against the clean representation.
    """
    n, d = warm_reps.shape
    if den is None:
        den = make_denoiser(d, conds.shape[1], config.d_time, rng.derive("init"),
                            hidden=config.hidden)
    params = den.net.params()
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        ts = rng.integers(n, 1, s.T + 1)
        eps = rng.normal((n, d))
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x0 = warm_reps[idx]
            t = ts[start:start + config.batch_size]
            e = eps[start:start + config.batch_size]
            ab = s.alpha_bar[t - 1][:, None]
            x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * e
            x0_hat, tape = denoiser_forward(den, x_t, conds[idx], t, s)
            resid = x0_hat - x0
            loss = float(np.mean(np.sum(resid ** 2, axis=1)))
            if not np.isfinite(loss):
                raise DivergenceError(f"diffusion loss diverged at epoch {epoch}")
            grads, _ = den.net.backward(tape, 2.0 * resid / idx.size)
            opt.step(params, grads)
    return den


def diffusion_loss(den: Denoiser, warm_reps, conds, t, eps, s: NoiseSchedule) -> float:
    """Mean squared x0-prediction error for fixed (t, eps); used by gradient checks."""
    ab = s.alpha_bar[np.asarray(t) - 1][:, None]
    x_t = np.sqrt(ab) * warm_reps + np.sqrt(1.0 - ab) * eps
    x0_hat, _ = denoiser_forward(den, x_t, conds, t, s)
    return float(np.mean(np.sum((x0_hat - warm_reps) ** 2, axis=1)))


@dataclass
class AnchorIndex:
    warm_ids: np.ndarray          # entity ids, ascending
    comp: sp.csr_matrix           # composition vectors of ALL entities
    comp_norms: np.ndarray        # per-entity L2 norm of composition rows
    warm_reps: np.ndarray         # embedded representations of warm_ids


def build_anchor_index(comp: sp.csr_matrix, warm_ids: np.ndarray,
                       reps: np.ndarray) -> AnchorIndex:
    warm_ids = np.sort(np.asarray(warm_ids, dtype=np.int64))
    norms = np.sqrt(np.asarray(comp.multiply(comp).sum(axis=1)).ravel())
    return AnchorIndex(warm_ids, comp.tocsr(), norms, reps[warm_ids])


def anchor(entity: int, idx: AnchorIndex, n: int) -> np.ndarray:
    """Mean embedded representation of the top-n composition-cosine-similar
    warm entities (self excluded, ties broken by ascending id)."""
    if n < 1 or idx.warm_ids.size == 0:
        raise ContractError("anchor needs n >= 1 and a nonempty warm set")
    cand = idx.warm_ids[idx.warm_ids != entity]
    if cand.size == 0:
        raise ContractError("no warm candidates besides the query entity")
    q = idx.comp[entity].toarray().ravel()
    qn = idx.comp_norms[entity]
    if qn == 0.0:
        log.info("entity %d has empty composition; using mean of all warm reps", entity)
        reps = idx.warm_reps[np.isin(idx.warm_ids, cand)]
        return reps.mean(axis=0)
    sims = (idx.comp[cand] @ q) / (idx.comp_norms[cand] * qn + 1e-300)
    order = np.lexsort((cand, -sims))
    top = cand[order[:n]]
    pos = np.searchsorted(idx.warm_ids, top)
    return idx.warm_reps[pos].mean(axis=0)


def strided_timesteps(T: int, T_prime: int) -> np.ndarray:
    """T_prime timesteps uniformly strided over [1, T], descending."""
    if not 1 <= T_prime <= T:
        raise ContractError("T_prime must be in [1, T]")
    ts = np.unique(np.round(np.linspace(1, T, T_prime)).astype(np.int64))
    return ts[::-1].copy()


def reverse_denoise(start: np.ndarray, cond: np.ndarray, den: Denoiser,
                    s: NoiseSchedule, T_prime: int) -> np.ndarray:
    """Deterministic strided denoising; batched over rows of `start`.

    x at the first kept step is the anchor; each step predicts x0, extracts
    the implied noise, and re-applies it at the next kept step.  Output is
    the final x0 prediction.
    """
    ts = strided_timesteps(s.T, T_prime)
    x = np.atleast_2d(np.asarray(start, dtype=np.float64)).copy()
    cond = np.atleast_2d(cond)
    x0_hat = None
    for i, t in enumerate(ts.tolist()):
        x0_hat, _ = denoiser_forward(den, x, cond, int(t), s)
        if not np.all(np.isfinite(x0_hat)):
            raise DivergenceError(f"non-finite denoiser output at step index {i} (t={t})")
        if i + 1 < ts.size:
            t_next = int(ts[i + 1])
            eps_hat = implied_noise(x, x0_hat, int(t), s)
            ab_next = s.bar(t_next)
            x = np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps_hat
    if start.ndim == 1:
        return x0_hat[0]
    return x0_hat


@dataclass
class ConditionProvider:
    item_cond: np.ndarray       # (n_items, d_c)
    bundle_cond: np.ndarray     # (n_bundles, d_c), mean over member items


@dataclass
class ConditionConfig:
    d_c: int = 64
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 4096
    seed: int = 0


def pretrain_conditions(z: InteractionSet, n_bundles: int, n_items: int,
                        config: ConditionConfig, rng: Rng) -> ConditionProvider:
    """Ranking-style matrix factorization on bundle-item membership.

    Positive = member item, negative = uniform non-member; the bundle
    condition is the mean of its member items' vectors, so two bundles with
    identical item sets get identical conditions.
    """
    if len(z) == 0:
        raise ContractError("bundle-item affiliations are empty")
    d = config.d_c
    w_bundle = rng.uniform_init((n_bundles, d), d)
    w_item = rng.uniform_init((n_items, d), d)
    members = [set() for _ in range(n_bundles)]
    for b, i in zip(z.rows.tolist(), z.cols.tolist()):
        members[b].add(i)
    params = [w_bundle, w_item]
    opt = Adam(params, lr=config.lr)
    n_pairs = len(z)
    for _ in range(config.epochs):
        order = rng.permutation(n_pairs)
        neg = rng.integers(n_pairs, 0, n_items)
        for j in range(n_pairs):
            b = int(z.rows[order[j]])
            while int(neg[j]) in members[b]:
                neg[j] = int(rng.integers(1, 0, n_items)[0])
        for start in range(0, n_pairs, config.batch_size):
            idx = order[start:start + config.batch_size]
            b, ip = z.rows[idx], z.cols[idx]
            ineg = neg[start:start + config.batch_size]
            s_pos = np.sum(w_bundle[b] * w_item[ip], axis=1)
            s_neg = np.sum(w_bundle[b] * w_item[ineg], axis=1)
            _, c = bpr_loss(s_pos, s_neg)
            cw = c[:, None]
            g_b = np.zeros_like(w_bundle)
            g_i = np.zeros_like(w_item)
            np.add.at(g_b, b, cw * (w_item[ip] - w_item[ineg]))
            np.add.at(g_i, ip, cw * w_bundle[b])
            np.add.at(g_i, ineg, -cw * w_bundle[b])
            opt.step(params, [g_b, g_i])
    bundle_cond = membership_matrix(z, n_bundles, n_items, require_nonempty=False) @ w_item
    return ConditionProvider(item_cond=w_item, bundle_cond=bundle_cond)


def generate_all(view: str, z: InteractionSet, n_bundles: int, n_items: int,
                 embedded_reps: np.ndarray, warm_ids: np.ndarray,
                 cond: ConditionProvider, den: Denoiser, s: NoiseSchedule,
                 T_prime: int, top_n: int) -> np.ndarray:
    """Diffusion representations for every entity in the view.

    Inputs are limited to bundle-item structure, warm embedded
    representations, pretrained conditions, and the trained denoiser; no
    user interaction data is read, so cold and warm entities are handled
    identically (warm entities also anchor on their top-n neighbors,
    excluding themselves).
    """
    zc = sp.csr_matrix((np.ones(len(z)), (z.rows, z.cols)), shape=(n_bundles, n_items))
    if view == "bint":
        comp = zc
        n_entities = n_bundles
        conds = cond.bundle_cond
    elif view == "iint":
        comp = zc.T.tocsr()
        n_entities = n_items
        conds = cond.item_cond
    else:
        raise ContractError(f"unknown view {view!r}")
    idx = build_anchor_index(comp, warm_ids, embedded_reps)
    anchors = np.stack([anchor(e, idx, top_n) for e in range(n_entities)])
    return reverse_denoise(anchors, conds, den, s, T_prime)
