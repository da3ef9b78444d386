"""Desk-scale source -> target transfer experiment (ExPLoRA vs baselines)."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SyntheticDomainSpec, generate, to_float
from .peft import Partition
from .train import RunConfig, pretrain
from .analysis import evaluate_linprobe
from .vit import ViTConfig, ViTModel

log = logging.getLogger(__name__)


@dataclass
class TransferConfig:
    classes: int = 6
    n_source: int = 2000
    n_target_unlabeled: int = 1000
    n_probe_train: int = 600
    n_probe_val: int = 600
    source_iters: int = 600
    source_lr: float = 2e-3
    explora_iters: int = 300
    rank: int = 8
    objective: str = "dino"
    batch_size: int = 16
    data_seed: int = 0
    source_seed: int = 0
    probe_lrs: tuple[float, ...] = (1e-3, 1e-2, 5e-2)
    vit: dict = field(default_factory=lambda: dict(image_size=32, patch_size=8, depth=6, dim=64, heads=4))


@dataclass
class Domains:
    source_unlabeled: np.ndarray
    source_probe: dict
    target_unlabeled: np.ndarray
    target_probe: dict


def make_domains(cfg: TransferConfig) -> Domains:
    def labelled(domain, stream_base):
        spec = SyntheticDomainSpec(domain=domain, classes=cfg.classes, seed=cfg.data_seed)
        xu, _ = generate(spec, cfg.n_source if domain == "source_rgb" else cfg.n_target_unlabeled, stream_base)
        xt, yt = generate(spec, cfg.n_probe_train, stream_base + 1)
        xv, yv = generate(spec, cfg.n_probe_val, stream_base + 2)
        return to_float(xu), {"x_train": to_float(xt), "y_train": yt, "x_val": to_float(xv), "y_val": yv}

    su, sp = labelled("source_rgb", 0)
    tu, tp = labelled("target_spectral", 10)
    return Domains(su, sp, tu, tp)


def train_source(cfg: TransferConfig, domains: Domains, log_fn=None) -> ViTModel:
    """Ordinary full pre-training on the source domain: the stand-in for published weights."""
    vcfg = ViTConfig(**cfg.vit)
    fresh = ViTModel(vcfg, seed=cfg.source_seed)
    run = RunConfig(objective=cfg.objective, partition=Partition.full(vcfg.depth), batch_size=cfg.batch_size,
                    iterations=cfg.source_iters, warmup_iters=max(1, cfg.source_iters // 10),
                    base_lr=cfg.source_lr, seed=cfg.source_seed)
    ckpt = pretrain(fresh, run, domains.source_unlabeled, log_fn=log_fn)
    return ckpt.apply(fresh, "merge")


def probe(model: ViTModel, data: dict, cfg: TransferConfig, seed: int = 0) -> float:
    res = evaluate_linprobe(model, data, lr_grid=cfg.probe_lrs,
                            feature_specs=(("last1", "cls"), ("last1", "meanpool")), seed=seed)
    return res["best_acc"]


def extended_pretrain(source: ViTModel, domains: Domains, cfg: TransferConfig, partition: Partition,
                      seed: int, log_fn=None) -> ViTModel:
    run = RunConfig(objective=cfg.objective, partition=partition, batch_size=cfg.batch_size,
                    iterations=cfg.explora_iters, warmup_iters=max(1, cfg.explora_iters // 10),
                    seed=seed)
    ckpt = pretrain(source, run, domains.target_unlabeled, log_fn=log_fn)
    return ckpt.apply(source, "merge")


def run_transfer(cfg: TransferConfig, seeds=(0, 1, 2, 3, 4), source: ViTModel | None = None,
                 domains: Domains | None = None) -> dict:
    t0 = time.time()
    domains = domains or make_domains(cfg)
    if source is None:
        source = train_source(cfg, domains)
    depth = source.config.depth
    src_on_src = probe(source, domains.source_probe, cfg)
    src_on_tgt = probe(source, domains.target_probe, cfg)
    log.info("source probe: source %.3f target %.3f (%.0fs)", src_on_src, src_on_tgt, time.time() - t0)
    rows = []
    for s in seeds:
        ex = extended_pretrain(source, domains, cfg, Partition(frozenset({depth}), cfg.rank), s)
        lo = extended_pretrain(source, domains, cfg, Partition(frozenset(), cfg.rank), s)
        row = {"seed": s, "explora": probe(ex, domains.target_probe, cfg),
               "lora_only": probe(lo, domains.target_probe, cfg)}
        rows.append(row)
        log.info("seed %d: %s (%.0fs)", s, row, time.time() - t0)
    return {"source_on_source": src_on_src, "source_on_target": src_on_tgt, "seeds": rows,
            "seconds": time.time() - t0}
