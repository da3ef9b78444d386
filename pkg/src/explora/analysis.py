"""Per-block feature statistics and probes used to choose which blocks to unfreeze."""

from __future__ import annotations

import csv
import hashlib
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import archive
from . import autograd as ag
from .autograd import ContractError
from .train import DataError, accuracy, extract_features, train_linear_head
from .vit import ViTModel, weights_digest


@dataclass
class BlockFeatureDump:
    patches: list[np.ndarray]          # per block: [samples, N, d]
    cls: list[np.ndarray]              # per block: [samples, d]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.patches) != len(self.cls):
            raise ContractError("patch and cls lists differ in block count")
        shapes = {p.shape[:2] for p in self.patches}
        if len(shapes) > 1:
            raise ContractError(f"blocks disagree on (samples, N): {shapes}")

    @property
    def depth(self) -> int:
        return len(self.patches)

    def save(self, path) -> None:
        t = {f"patches/{i}": p for i, p in enumerate(self.patches)}
        t.update({f"cls/{i}": c for i, c in enumerate(self.cls)})
        archive.save(path, t, {"kind": "feature_dump", "depth": self.depth, "provenance": self.provenance})

    @classmethod
    def load(cls, path) -> "BlockFeatureDump":
        meta, t = archive.load(path)
        n = meta["depth"]
        return cls([t[f"patches/{i}"] for i in range(n)], [t[f"cls/{i}"] for i in range(n)], meta["provenance"])


def dump_features(model: ViTModel, images: np.ndarray, batch: int = 64, dataset_id: str = "") -> BlockFeatureDump:
    """Raw output of every block for ``images`` (class token split from patch tokens)."""
    per_block: list[list[np.ndarray]] = [[] for _ in model.blocks]
    model.eval()
    with ag.no_grad():
        for i in range(0, len(images), batch):
            out = model(np.asarray(images[i:i + batch], dtype=model.config.np_dtype), collect="all_blocks")
            for b, h in enumerate(out.blocks):
                per_block[b].append(h.astype(np.float64))
    model.train()
    stacked = [np.concatenate(h, axis=0) for h in per_block]
    return BlockFeatureDump([h[:, 1:] for h in stacked], [h[:, 0] for h in stacked],
                            {"model": weights_digest(model)[:16], "dataset": dataset_id})


@dataclass
class SpectralReport:
    mean: np.ndarray          # per block
    variance: np.ndarray      # per block
    top: list[np.ndarray]     # per block, descending

    def table(self) -> str:
        lines = ["block  mean_eig      var_eig       top3"]
        for i, (m, v, t) in enumerate(zip(self.mean, self.variance, self.top), start=1):
            lines.append(f"{i:>5}  {m:<12.6g}  {v:<12.6g}  " + " ".join(f"{x:.4g}" for x in t[:3]))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["block", "mean_eigenvalue", "variance_eigenvalue"])
        for i, (m, v) in enumerate(zip(self.mean, self.variance), start=1):
            w.writerow([i, repr(float(m)), repr(float(v))])
        return buf.getvalue()


def covariance_eigenvalues(rows: np.ndarray, shrinkage: float | None = 1e-6) -> np.ndarray:
    """Eigenvalues (descending) of the sample covariance of ``rows[n, d]``."""
    x = np.asarray(rows, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise DataError("need at least two rows for a covariance")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (n - 1)
    if n < d:
        if shrinkage:
            cov = cov + shrinkage * np.eye(d)
        else:
            warnings.warn(f"covariance is rank deficient ({n} rows < {d} dims)", RuntimeWarning, stacklevel=2)
    return np.linalg.eigvalsh(cov)[::-1]


def block_spectra(dump: BlockFeatureDump, top_k: int = 8, shrinkage: float | None = 1e-6) -> SpectralReport:
    means, variances, tops = [], [], []
    for p in dump.patches:
        ev = covariance_eigenvalues(p.reshape(-1, p.shape[-1]), shrinkage)
        means.append(ev.mean())
        variances.append(ev.var())
        tops.append(ev[:top_k])
    return SpectralReport(np.array(means), np.array(variances), tops)


def recommend_unfreeze(spectra: SpectralReport | np.ndarray, k: int, prefer_deep: bool = True) -> list[int]:
    """The ``k`` blocks (1-based) with the lowest mean eigenvalue; ties go to the deeper block."""
    means = np.asarray(spectra.mean if isinstance(spectra, SpectralReport) else spectra, dtype=np.float64)
    if not 0 <= k <= len(means):
        raise ContractError(f"k={k} outside [0, {len(means)}]")
    idx = np.arange(len(means))
    tie = -idx if prefer_deep else idx
    order = np.lexsort((tie, means))
    return [int(i) + 1 for i in order[:k]]


def _split(n: int, seed: int, frac: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    cut = max(1, int(round(frac * n)))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def position_probe(dump: BlockFeatureDump, block: int, seed: int = 0, lr: float = 5e-2,
                   epochs: int = 100) -> float:
    """Held-out accuracy of predicting each patch's index from its block-``block`` feature."""
    p = dump.patches[block - 1]
    s, n, d = p.shape
    if n < 2:
        raise DataError("position probe needs at least two patches")
    if s < 2:
        raise DataError("position probe needs at least two samples")
    tr, te = _split(s, seed)
    y = np.tile(np.arange(n), s).reshape(s, n)
    head = train_linear_head(p[tr].reshape(-1, d), y[tr].reshape(-1), n, lr, epochs, seed=seed)
    return accuracy(head.predict(p[te].reshape(-1, d)), y[te].reshape(-1))


def class_probe(dump: BlockFeatureDump, block: int, labels: np.ndarray, seed: int = 0, lr: float = 5e-2,
                epochs: int = 100) -> float:
    """Held-out accuracy of predicting the image label from mean-pooled block features."""
    p = dump.patches[block - 1]
    labels = np.asarray(labels)
    if len(labels) != p.shape[0]:
        raise DataError("one label per sample required")
    if p.shape[0] < 2:
        raise DataError("class probe needs at least two samples")
    feats = p.mean(axis=1)
    tr, te = _split(len(labels), seed)
    classes = int(labels.max()) + 1
    head = train_linear_head(feats[tr], labels[tr], classes, lr, epochs, seed=seed)
    return accuracy(head.predict(feats[te]), labels[te])


LINPROBE_LRS = (1e-4, 1e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1)
FEATURE_SPECS = (("last1", "cls"), ("last1", "meanpool"), ("last4_concat", "cls"), ("last4_concat", "meanpool"))


def evaluate_linprobe(model: ViTModel, dataset: dict, feature_specs=FEATURE_SPECS, lr_grid=LINPROBE_LRS,
                      epochs: int = 100, seed: int = 0) -> dict:
    """Train one head per (feature spec, lr) cell; report the best validation accuracy."""
    if not feature_specs or not lr_grid:
        raise ContractError("empty probe grid")
    for k in ("x_train", "y_train", "x_val", "y_val"):
        if k not in dataset:
            raise DataError(f"dataset lacks '{k}'")
    classes = int(max(np.max(dataset["y_train"]), np.max(dataset["y_val"]))) + 1
    cells = []
    for blocks, pool in feature_specs:
        f_tr = extract_features(model, dataset["x_train"], pool, blocks=blocks)
        f_va = extract_features(model, dataset["x_val"], pool, blocks=blocks)
        for lr in lr_grid:
            head = train_linear_head(f_tr, dataset["y_train"], classes, lr, epochs, seed=seed)
            acc = accuracy(head.predict(f_va), dataset["y_val"])
            cells.append({"blocks": blocks, "pool": pool, "lr": lr, "acc": acc, "width": f_tr.shape[1]})
    best = max(cells, key=lambda c: c["acc"])
    return {"best_acc": best["acc"], "best": best, "cells": cells}


def dump_digest(dump: BlockFeatureDump) -> str:
    h = hashlib.sha256()
    for p in dump.patches:
        h.update(p.tobytes())
    return h.hexdigest()[:16]
