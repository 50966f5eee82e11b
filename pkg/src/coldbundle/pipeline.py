"""Run-directory orchestration for the three-stage pipeline.

Every artifact lives under one ``--out`` directory:

    data/        dense TSVs + catalog.json
    split/       train/val/test TSVs + labels.json
    stage1.ckpt  embedding tables
    stage2.ckpt  diffusion representation tables, conditions, denoisers
    stage3.ckpt  gate matrices plus frozen expert tables
    metrics*.json, hits.csv, gates.csv, projection.csv
    manifest.json

Stages are gated by checkpoint tags: stage n refuses to run without the
stage n-1 checkpoint.  All steps are bit-reproducible for a fixed config.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffusion as dif
from . import graph as gr
from . import moe
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Catalog, InteractionSet, Kind, Scenario, ScenarioSplit,
                   load_interactions, load_split, make_split, save_interactions,
                   save_split, synth_blockmodel)
from .errors import ContractError
from .metrics import MetricReport, evaluate, project_2d
from .rng import Rng

log = logging.getLogger(__name__)

SCENARIO_ETA = {"warm_start": 0.0, "all_bundle": 0.3, "cold_start": 0.5}


@dataclass
class RunConfig:
    """Effective configuration; every field is overridable from the CLI."""
    scenario: str = "cold_start"
    seed: int = 0
    data_dir: str | None = None   # dense TSVs; omitted -> synthetic dataset
    synth_users: int = 400
    synth_items: int = 800
    synth_bundles: int = 200
    synth_groups: int = 4
    synth_bundle_size: int = 10
    synth_affinity: float = 0.3
    d: int = 64                   # embedding size
    K: int = 2                    # propagation depth
    T: int = 500                  # diffusion steps
    T_prime: int = 20             # strided sampling steps
    schedule: str = "linear"
    top_n: int = 5                # anchor neighborhood size
    d_c: int = 64                 # condition dimension
    d_time: int = 64
    eta: float | None = None      # pseudo-to-real triple ratio; None -> per-scenario default
    beta_alpha: float = 0.9
    stage1_lr: float = 0.05
    stage1_weight_decay: float = 1e-5
    stage1_epochs: int = 100
    stage1_patience: int = 15
    stage1_batch: int = 512
    cond_epochs: int = 30
    cond_lr: float = 0.05
    diff_epochs: int = 300
    diff_lr: float = 1e-3
    diff_batch: int = 128
    diff_hidden: int | None = None
    stage3_lr: float = 0.02
    stage3_epochs: int = 150
    stage3_batch: int = 4096
    k_eval: int = 20

    def __post_init__(self):
        if self.scenario not in SCENARIO_ETA:
            raise ContractError(f"unknown scenario {self.scenario!r}")
        if self.schedule not in ("linear", "exp", "cosine"):
            raise ContractError(f"unknown schedule {self.schedule!r}")
        for name in ("d", "K", "T", "T_prime", "top_n", "d_c", "d_time", "k_eval"):
            if getattr(self, name) < 1:
                raise ContractError(f"config field {name} must be >= 1")
        if self.eta is not None and self.eta < 0:
            raise ContractError("eta must be >= 0")
        if not 0 < self.beta_alpha:
            raise ContractError("beta_alpha must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def effective_eta(self) -> float:
        return SCENARIO_ETA[self.scenario] if self.eta is None else self.eta


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def update_manifest(out: Path, cfg: RunConfig, artifacts: dict) -> None:
    path = out / "manifest.json"
    current = {"artifacts": {}}
    if path.exists():
        with open(path, "r", encoding="utf-8") as fh:
            current = json.load(fh)
    current["config"] = cfg.to_dict()
    current.setdefault("artifacts", {}).update(artifacts)
    _write_json(path, current)


def ensure_dataset(cfg: RunConfig, out: Path):
    """Materialize data/ (synthesize or copy-load) and return (catalog, x, y, z)."""
    data_dir = out / "data"
    if (data_dir / "catalog.json").exists():
        src = data_dir
    elif cfg.data_dir is not None:
        src = Path(cfg.data_dir)
    else:
        catalog, x, y, z = synth_blockmodel(
            cfg.synth_users, cfg.synth_items, cfg.synth_bundles, cfg.synth_groups,
            cfg.synth_bundle_size, cfg.synth_affinity, cfg.seed)
        data_dir.mkdir(parents=True, exist_ok=True)
        save_interactions(data_dir / "user_bundle.tsv", x)
        save_interactions(data_dir / "user_item.tsv", y)
        save_interactions(data_dir / "bundle_item.tsv", z)
        _write_json(data_dir / "catalog.json", {
            "n_users": catalog.n_users, "n_bundles": catalog.n_bundles,
            "n_items": catalog.n_items})
        update_manifest(out, cfg, {"data": "data"})
        return catalog, x, y, z
    if (src / "catalog.json").exists():
        with open(src / "catalog.json", "r", encoding="utf-8") as fh:
            c = json.load(fh)
        catalog = Catalog(c["n_users"], c["n_bundles"], c["n_items"])
    else:
        catalog = None
    x = load_interactions(src / "user_bundle.tsv", Kind.USER_BUNDLE)
    y = load_interactions(src / "user_item.tsv", Kind.USER_ITEM)
    z = load_interactions(src / "bundle_item.tsv", Kind.BUNDLE_ITEM)
    if catalog is None:
        # No catalog sidecar: infer counts from the largest id seen anywhere.
        n_users = int(max(x.rows.max(initial=-1), y.rows.max(initial=-1))) + 1
        n_bundles = int(max(x.cols.max(initial=-1), z.rows.max(initial=-1))) + 1
        n_items = int(max(y.cols.max(initial=-1), z.cols.max(initial=-1))) + 1
        catalog = Catalog(n_users, n_bundles, n_items)
    for rel in (x, y, z):
        rel.check_bounds(catalog)
    return catalog, x, y, z


def ensure_split(cfg: RunConfig, out: Path) -> ScenarioSplit:
    catalog, x, y, z = ensure_dataset(cfg, out)
    split_dir = out / "split"
    if (split_dir / "labels.json").exists():
        split = load_split(split_dir, y, z, catalog)
        if split.scenario.value != cfg.scenario:
            raise ContractError(
                f"existing split is {split.scenario.value!r}, config wants {cfg.scenario!r}")
        return split
    split = make_split(x, y, z, catalog, Scenario(cfg.scenario), seed=cfg.seed)
    save_split(split, split_dir)
    update_manifest(out, cfg, {"split": "split"})
    return split


def run_stage1(cfg: RunConfig, split: ScenarioSplit, out: Path):
    config = gr.Stage1Config(
        d=cfg.d, K=cfg.K, lr=cfg.stage1_lr, weight_decay=cfg.stage1_weight_decay,
        epochs=cfg.stage1_epochs, patience=cfg.stage1_patience,
        batch_size=cfg.stage1_batch, seed=cfg.seed)
    emb, history = gr.train_stage1(split, config)
    save_checkpoint(out / "stage1.ckpt", "stage1", cfg.to_dict(), {
        "e_user": emb.e_user, "e_bundle": emb.e_bundle, "e_item": emb.e_item})
    update_manifest(out, cfg, {"stage1": "stage1.ckpt"})
    log.info("stage1 done: best val recall %.4f at epoch %d",
             history["best_val_recall"], history["best_epoch"])
    return emb


def _view_reps(cfg: RunConfig, split: ScenarioSplit, emb: gr.PriorEmbeddings):
    cat = split.catalog
    gx = gr.normalize_adjacency(split.train_x, cat.n_users, cat.n_bundles)
    gy = gr.normalize_adjacency(split.y, cat.n_users, cat.n_items)
    return emb.view_reps(gx, gy, split.z)


def _denoiser_tensors(prefix: str, den: dif.Denoiser) -> dict:
    out = {}
    for i, layer in enumerate(den.net.layers):
        out[f"{prefix}_w{i}"] = layer.weight
        out[f"{prefix}_b{i}"] = layer.bias
    return out


def _denoiser_from_tensors(prefix: str, tensors: dict, d: int, d_cond: int,
                           d_time: int) -> dif.Denoiser:
    from .nn import Layer, Mlp
    layers = []
    i = 0
    while f"{prefix}_w{i}" in tensors:
        w = tensors[f"{prefix}_w{i}"]
        b = tensors[f"{prefix}_b{i}"]
        act = "silu" if f"{prefix}_w{i + 1}" in tensors else "identity"
        layers.append(Layer(weight=w.copy(), bias=b.copy(), act=act))
        i += 1
    return dif.Denoiser(net=Mlp(layers), d=d, d_cond=d_cond, d_time=d_time)


def run_stage2(cfg: RunConfig, split: ScenarioSplit, out: Path):
    ck1 = load_checkpoint(out / "stage1.ckpt", expect_stage="stage1")
    emb = gr.PriorEmbeddings(ck1.tensors["e_user"].copy(), ck1.tensors["e_bundle"].copy(),
                             ck1.tensors["e_item"].copy(), K=cfg.K)
    cat = split.catalog
    ru_b, rb, ru_i, ri, rb_i = _view_reps(cfg, split, emb)

    rng = Rng(cfg.seed).derive("stage2")
    cond = dif.pretrain_conditions(
        split.z, cat.n_bundles, cat.n_items,
        dif.ConditionConfig(d_c=cfg.d_c, epochs=cfg.cond_epochs, lr=cfg.cond_lr,
                            seed=cfg.seed),
        rng.derive("cond"))
    s = dif.make_schedule(cfg.schedule, cfg.T)
    dcfg = dif.DiffusionConfig(epochs=cfg.diff_epochs, batch_size=cfg.diff_batch,
                               lr=cfg.diff_lr, d_time=cfg.d_time,
                               hidden=cfg.diff_hidden, seed=cfg.seed)

    warm_b = np.flatnonzero(~split.bundle_bint_cold)
    warm_i = np.flatnonzero(~split.item_cold)
    if warm_b.size == 0 or warm_i.size == 0:
        raise ContractError("no warm entities to train the diffusion experts on")
    den_b = dif.train_diffusion(rb[warm_b], cond.bundle_cond[warm_b], s, dcfg,
                                rng.derive("bint"))
    den_i = dif.train_diffusion(ri[warm_i], cond.item_cond[warm_i], s, dcfg,
                                rng.derive("iint"))
    r_d_bint = dif.generate_all("bint", split.z, cat.n_bundles, cat.n_items,
                                rb, warm_b, cond, den_b, s, cfg.T_prime, cfg.top_n)
    r_d_items = dif.generate_all("iint", split.z, cat.n_bundles, cat.n_items,
                                 ri, warm_i, cond, den_i, s, cfg.T_prime, cfg.top_n)
    tensors = {
        "r_d_bint": r_d_bint, "r_d_items": r_d_items,
        "item_cond": cond.item_cond, "bundle_cond": cond.bundle_cond,
    }
    tensors.update(_denoiser_tensors("den_bint", den_b))
    tensors.update(_denoiser_tensors("den_iint", den_i))
    save_checkpoint(out / "stage2.ckpt", "stage2", cfg.to_dict(), tensors)
    update_manifest(out, cfg, {"stage2": "stage2.ckpt"})
    return r_d_bint, r_d_items


def build_experts(cfg: RunConfig, split: ScenarioSplit, out: Path) -> moe.ExpertOutputs:
    ck1 = load_checkpoint(out / "stage1.ckpt", expect_stage="stage1")
    ck2 = load_checkpoint(out / "stage2.ckpt", expect_stage="stage2")
    emb = gr.PriorEmbeddings(ck1.tensors["e_user"].copy(), ck1.tensors["e_bundle"].copy(),
                             ck1.tensors["e_item"].copy(), K=cfg.K)
    cat = split.catalog
    ru_b, rb, ru_i, ri, rb_i = _view_reps(cfg, split, emb)
    agg = gr.membership_matrix(split.z, cat.n_bundles, cat.n_items)
    bf, itf = moe.cold_features(split)
    return moe.ExpertOutputs(
        ru_bint=ru_b, ru_iint=ru_i,
        r_e_bint=rb, r_d_bint=ck2.tensors["r_d_bint"].copy(),
        r_e_items=ri, r_d_items=ck2.tensors["r_d_items"].copy(),
        agg=agg, bundle_feature=bf, item_feature=itf)


def run_stage3(cfg: RunConfig, split: ScenarioSplit, out: Path):
    experts = build_experts(cfg, split, out)
    base = moe.Stage3Config(eta=cfg.effective_eta, beta_alpha=cfg.beta_alpha,
                            lr=cfg.stage3_lr, epochs=cfg.stage3_epochs,
                            batch_size=cfg.stage3_batch, seed=cfg.seed)
    gp, _ = moe.train_stage3(split, experts, base)
    if base.eta > 0:
        # Companion gate set trained without augmentation, for the ablation.
        gp0, _ = moe.train_stage3(split, experts, dataclasses.replace(base, eta=0.0))
    else:
        gp0 = gp
    tensors = {
        "w_bint": gp.w_bint, "w_iint": gp.w_iint, "w_out": gp.w_out,
        "w_bint_noaug": gp0.w_bint, "w_iint_noaug": gp0.w_iint, "w_out_noaug": gp0.w_out,
    }
    tensors.update(experts.tensors())
    save_checkpoint(out / "stage3.ckpt", "stage3", cfg.to_dict(), tensors)
    update_manifest(out, cfg, {"stage3": "stage3.ckpt"})
    return gp


def load_trained(cfg: RunConfig, split: ScenarioSplit, out: Path):
    """Rebuild (experts, gates, no-aug gates) from the stage-3 checkpoint."""
    ck = load_checkpoint(out / "stage3.ckpt", expect_stage="stage3")
    t = ck.tensors
    cat = split.catalog
    agg = gr.membership_matrix(split.z, cat.n_bundles, cat.n_items)
    experts = moe.ExpertOutputs(
        ru_bint=t["ru_bint"].copy(), ru_iint=t["ru_iint"].copy(),
        r_e_bint=t["r_e_bint"].copy(), r_d_bint=t["r_d_bint"].copy(),
        r_e_items=t["r_e_items"].copy(), r_d_items=t["r_d_items"].copy(),
        agg=agg, bundle_feature=t["bundle_feature"].copy(),
        item_feature=t["item_feature"].copy())
    gp = moe.GateParams(t["w_bint"].copy(), t["w_iint"].copy(), t["w_out"].copy())
    gp0 = moe.GateParams(t["w_bint_noaug"].copy(), t["w_iint_noaug"].copy(),
                         t["w_out_noaug"].copy())
    return experts, gp, gp0


def ablation_scores(experts: moe.ExpertOutputs, gp: moe.GateParams,
                    gp0: moe.GateParams, no_aug=False, no_moe=False,
                    no_diff=False) -> np.ndarray:
    if no_moe and no_aug:
        raise ContractError("--no-moe ignores gates; combining it with --no-aug is ambiguous")
    if no_diff:
        return moe.score_all_no_diff(experts)
    if no_moe:
        return moe.score_all_no_moe(experts)
    return moe.score_all(experts, gp0 if no_aug else gp)


def run_eval(cfg: RunConfig, split: ScenarioSplit, out: Path,
             no_aug=False, no_moe=False, no_diff=False) -> MetricReport:
    experts, gp, gp0 = load_trained(cfg, split, out)
    scores = ablation_scores(experts, gp, gp0, no_aug, no_moe, no_diff)
    report = evaluate(scores, split, k=cfg.k_eval)
    suffix = "".join(f"_{n}" for n, f in
                     (("no_aug", no_aug), ("no_moe", no_moe), ("no_diff", no_diff)) if f)
    fname = f"metrics{suffix}.json"
    payload = report.to_json_dict()
    payload["config"] = cfg.to_dict()
    payload["ablation"] = {"no_aug": no_aug, "no_moe": no_moe, "no_diff": no_diff}
    _write_json(out / fname, payload)
    update_manifest(out, cfg, {fname: fname})
    return report


def write_hits_csv(report: MetricReport, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("situation,hits\n")
        total = 0
        for key in sorted(report.situation_hits):
            fh.write(f"{key},{report.situation_hits[key]}\n")
            total += report.situation_hits[key]
        fh.write(f"total,{total}\n")


def write_gates_csv(experts: moe.ExpertOutputs, gp: moe.GateParams, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("entity_class,id,view,w_embed,w_diff\n")
        for cls, eid, view, we, wd in moe.gate_dump_rows(experts, gp):
            fh.write(f"{cls},{eid},{view},{we:.10f},{wd:.10f}\n")


PROJECTION_TABLES = ("bundle_embed", "bundle_diff", "item_embed", "item_diff")


def write_projection_csv(cfg: RunConfig, split: ScenarioSplit,
                         experts: moe.ExpertOutputs, table: str, path: Path) -> None:
    if table not in PROJECTION_TABLES:
        raise ContractError(f"unknown projection table {table!r}")
    if table.startswith("bundle"):
        reps = experts.r_e_bint if table.endswith("embed") else experts.r_d_bint
        labels = np.where(split.bundle_bint_cold, "cold", "warm").tolist()
    else:
        reps = experts.r_e_items if table.endswith("embed") else experts.r_d_items
        labels = np.where(split.item_cold, "cold", "warm").tolist()
    rows = project_2d(reps, labels, seed=cfg.seed)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,x,y,label\n")
        for i, x, y, label in rows:
            fh.write(f"{i},{x:.10f},{y:.10f},{label}\n")
