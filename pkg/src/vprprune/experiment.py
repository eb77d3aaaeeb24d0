"""End-to-end experiment steps shared by the CLI, the scripts and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import dataset as data
from .config import ExperimentConfig
from .layers import VPRModel, build_model, init_netvlad_centers
from .pruning import PruneSchedule, literal_cluster_count, retained
from .retrieval import EmbeddingMap, ResourceReport, recalls, write_reports_csv
from .trainer import ImpConfig, LossParams, TrainConfig, evaluate, imp_run, train

log = logging.getLogger(__name__)


def desk_config(seed: int = 0, architecture: str = "convap") -> ExperimentConfig:
    """Desk-scale setup: 32 places x 16 views (12 db / 4 query) of 32x32 images, 4 conv blocks up
    to 64 channels. The standard ramp (25 rounds to 90% backbone sparsity) is followed until the
    backbone reaches 50% sparsity.
    """
    cfg = ExperimentConfig()
    cfg.experiment.seed = seed
    cfg.experiment.architecture = architecture
    cfg.experiment.output_dir = f"runs/desk/seed{seed}"
    cfg.schedule.gammas = (0.0, 0.45, 0.9)
    cfg.schedule.stop_sparsity = 0.5
    return cfg.validate()


def make_dataset(cfg: ExperimentConfig) -> data.PlaceDataset:
    d = cfg.dataset
    size = (d.image_size, d.image_size)
    ds = data.generate(d.places, d.views, size, seed=cfg.experiment.seed, aliasing=d.aliasing)
    return data.split(ds, d.db_views, d.query_views, seed=cfg.experiment.seed)


def training_split(ds: data.PlaceDataset) -> data.PlaceDataset:
    """Views used for metric learning: the database views (queries stay unseen)."""
    return ds.subset("database")


def new_model(cfg: ExperimentConfig, ds: data.PlaceDataset | None = None) -> VPRModel:
    h = cfg.head
    model = build_model(cfg.experiment.architecture, cfg.backbone_spec(), seed=cfg.experiment.seed,
                        gem_p=h.gem_p, ap_block=h.ap_block, mixer_blocks=h.mixer_blocks,
                        mix_depth=h.mix_depth or None, clusters=h.clusters, vlad_alpha=h.vlad_alpha)
    if model.arch == "netvlad" and ds is not None:
        init_netvlad_centers(model, training_split(ds).images, seed=cfg.experiment.seed)
    return model


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.epochs, t.lr, t.decay, t.decay_period, t.places_per_batch, t.views_per_place)


def imp_config(cfg: ExperimentConfig) -> ImpConfig:
    i, t = cfg.imp, cfg.train
    return ImpConfig(cfg.schedule.rounds, i.epochs_per_round, i.lr, i.decay, i.decay_period,
                     t.places_per_batch, t.views_per_place)


def loss_params(cfg: ExperimentConfig) -> LossParams:
    lp = cfg.loss
    return LossParams(lp.alpha, lp.beta, lp.base, lp.margin)


def schedule_for(cfg: ExperimentConfig, gamma: float) -> PruneSchedule:
    s = cfg.schedule
    return PruneSchedule(s.rounds, s.backbone_sparsity, gamma, s.stop_sparsity or None)


def map_size(cfg: ExperimentConfig) -> int | None:
    return cfg.dataset.map_size or None


def evaluate_model(model: VPRModel, ds: data.PlaceDataset, cfg: ExperimentConfig, round_idx: int = 0,
                   s_b: float = 0.0, s_a: float = 0.0, timing: bool = True) -> ResourceReport:
    return evaluate(model, ds, round_idx, s_b, s_a, timing=timing, map_size=map_size(cfg),
                    warmup=cfg.eval.warmup, trials=cfg.eval.trials)


def train_dense(cfg: ExperimentConfig, ds: data.PlaceDataset) -> tuple[VPRModel, list[float]]:
    model = new_model(cfg, ds)
    history = train(model, training_split(ds), train_config(cfg), seed=cfg.experiment.seed,
                    loss_params=loss_params(cfg))
    return model, history


@dataclass
class SweepResult:
    gamma: float
    reports: list[ResourceReport]  # round 0 (dense) first
    csv_path: Path | None = None


def prune_sweep(cfg: ExperimentConfig, dense: VPRModel, ds: data.PlaceDataset, gamma: float,
                out_dir: Path | None = None, finetune: bool | None = None, timing: bool = True) -> SweepResult:
    """IMP from ``dense`` (left untouched) at one gamma; optionally writes CSV + checkpoints."""
    finetune = cfg.imp.finetune if finetune is None else finetune
    tag = f"gamma_{gamma:.2f}"
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / tag
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def save_round(t, model, report):
        if ckpt_dir is not None:
            checkpoint.save(model, ckpt_dir / f"round_{t:02d}.vprc")

    reports = [evaluate_model(dense, ds, cfg, timing=timing)]
    model = dense.clone()
    reports += imp_run(model, training_split(ds), ds, schedule_for(cfg, gamma), imp_config(cfg),
                       seed=cfg.experiment.seed, finetune=finetune, loss_params=loss_params(cfg),
                       timing=timing, map_size=map_size(cfg), on_round=save_round)
    result = SweepResult(gamma, reports)
    if out_dir is not None:
        result.csv_path = Path(out_dir) / f"tradeoff_{tag}.csv"
        write_reports_csv(reports, result.csv_path)
        if dense.arch == "netvlad":
            write_cluster_report(reports, dense.head.dense_clusters, ckpt_dir / "clusters.csv")
    return result


def write_cluster_report(reports: list[ResourceReport], dense_clusters: int, path) -> None:
    """Applied cluster count next to the count the literal "K' = r_o K" reading would give."""
    with open(path, "w") as fh:
        fh.write("round,agg_sparsity,clusters_applied,clusters_literal\n")
        for r in reports:
            applied = retained(dense_clusters, r.agg_sparsity)
            literal = literal_cluster_count(r.agg_sparsity, dense_clusters) if r.round else dense_clusters
            fh.write(f"{r.round},{r.agg_sparsity:.10g},{applied},{literal}\n")


def pixel_baseline_recall(ds: data.PlaceDataset) -> float:
    """recall@1 of nearest-neighbour search on raw, mean-centred pixels."""

    def unit(x):
        f = x.reshape(len(x), -1).astype(np.float64)
        f = f - f.mean(axis=1, keepdims=True)
        return f / np.linalg.norm(f, axis=1, keepdims=True)

    db, q = ds.subset("database"), ds.subset("query")
    return recalls(EmbeddingMap(unit(db.images), db.place_ids), unit(q.images), q.place_ids, (1,))[1]


def eval_summary(report: ResourceReport) -> str:
    """One-line summary of the reproducible report fields (latency excluded)."""
    return (f"eval descriptor_dim={report.descriptor_dim} param_count={report.param_count} "
            f"model_mib={report.model_mib:.10g} map_mib={report.map_mib:.10g} "
            f"recall_at_1={report.recall_at_1:.10g} recall_at_5={report.recall_at_5:.10g} "
            f"recall_at_10={report.recall_at_10:.10g}")
