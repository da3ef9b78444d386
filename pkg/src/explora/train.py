"""Optimisation, schedules, checkpoints, and the pre-training / fine-tuning loops."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import archive
from . import autograd as ag
from .autograd import ContractError, NumericError, Tensor
from .nn import Linear, Module
from .objectives import (DinoConfig, DinoHead, DinoNet, MAEConfig, dino_step, ema_at, ema_update,
                         mae_step)
from .peft import (CompatibilityError, DeltaWeights, Partition, apply_delta, clone, extract_delta,
                   inject, merge)
from .vit import MAEDecoder, ViTConfig, ViTModel, weights_digest

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Bad labels or dataset layout."""


class TrainingDiverged(NumericError):
    pass


# ---------------------------------------------------------------------------
# schedule and optimiser
# ---------------------------------------------------------------------------

@dataclass
class Schedule:
    base_lr: float
    warmup_iters: int
    total_iters: int


def lr_at(s: Schedule, t: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to 0 at ``total_iters``."""
    if not 0 <= t <= s.total_iters:
        raise ContractError(f"t={t} outside [0, {s.total_iters}]")
    if s.warmup_iters > 0 and t < s.warmup_iters:
        return s.base_lr * t / s.warmup_iters
    span = s.total_iters - s.warmup_iters
    if span <= 0:
        return s.base_lr
    return 0.5 * s.base_lr * (1.0 + math.cos(math.pi * (t - s.warmup_iters) / span))


def lr_for_iter(s: Schedule, i: int) -> float:
    """Learning rate used by training iteration ``i``; iteration 0 gets ``base_lr / warmup``."""
    if s.warmup_iters > 0 and i == 0:
        return s.base_lr / s.warmup_iters
    return lr_at(s, min(i, s.total_iters))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def create(cls, params: dict[str, Tensor], **kw) -> "OptimizerState":
        st = cls(**kw)
        for k, p in params.items():
            if p.requires_grad:
                st.m[k] = np.zeros_like(p.data)
                st.v[k] = np.zeros_like(p.data)
        return st

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray], step: int) -> None:
        for k in list(self.m):
            self.m[k] = tensors[f"m/{k}"].copy()
            self.v[k] = tensors[f"v/{k}"].copy()
        self.step = step


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float,
               weight_decay: float | None = None) -> None:
    """Decoupled-weight-decay Adam update of every parameter holding optimizer state.

    Parameters whose ``.grad`` is None are skipped; frozen parameters are never read.
    """
    wd = state.weight_decay if weight_decay is None else weight_decay
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k in state.m:
        p = params[k]
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {p.shape} for '{k}'")
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = p.data
        if wd:
            new = new - lr * wd * new
        p.data = (new - lr * upd).astype(p.dtype)


def grad_norm(params: dict[str, Tensor]) -> float:
    return float(math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                               for p in params.values() if p.requires_grad and p.grad is not None)))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    norm = grad_norm(params)
    if norm > max_norm > 0:
        s = max_norm / (norm + 1e-6)
        for p in params.values():
            if p.requires_grad and p.grad is not None:
                p.grad = (p.grad * s).astype(p.dtype)
    return norm


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    objective: str = "dino"
    partition: Partition = field(default_factory=lambda: Partition(frozenset({6}), 8))
    batch_size: int = 16
    accum_steps: int = 1
    seed: int = 0
    iterations: int = 300
    warmup_iters: int = 20
    base_lr: float = 2e-3
    weight_decay: float = 0.0
    clip: float = 3.0
    eval_every: int = 0
    log_every: int = 10
    dataset: str = ""
    dtype: str = "float32"
    mae: MAEConfig = field(default_factory=MAEConfig)
    dino: DinoConfig = field(default_factory=lambda: DinoConfig(head_freeze_iters=0))

    def __post_init__(self):
        if self.objective not in ("mae", "dino", "supervised"):
            raise ContractError(f"unknown objective {self.objective!r}")
        if self.batch_size * self.accum_steps <= 0:
            raise ContractError("effective batch size must be positive")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accum_steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["partition"] = self.partition.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "partition" in d and isinstance(d["partition"], dict):
            d["partition"] = Partition.from_dict({**Partition().to_dict(), **d["partition"]})
        if isinstance(d.get("mae"), dict):
            d["mae"] = MAEConfig(**d["mae"])
        if isinstance(d.get("dino"), dict):
            dino = dict(d["dino"])
            for k in ("ibot_mask_range", "global_area", "local_area"):
                if k in dino:
                    dino[k] = tuple(dino[k])
            d["dino"] = DinoConfig(**dino)
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# delta checkpoints and standalone models
# ---------------------------------------------------------------------------

@dataclass
class DeltaCheckpoint:
    delta: DeltaWeights
    meta: dict = field(default_factory=dict)

    def apply(self, base: ViTModel, mode: str = "merge") -> ViTModel:
        check_base(self.meta, base)
        return apply_delta(base, self.delta, mode, seed=self.meta.get("adapter_seed", 0))


def check_base(meta: dict, base: ViTModel) -> None:
    want = meta.get("base_digest")
    if want and want != weights_digest(base):
        raise CompatibilityError("base model weights do not match the digest recorded in the delta "
                                 f"({want[:12]}... vs {weights_digest(base)[:12]}...)")
    cfg = meta.get("vit_config")
    if cfg and cfg != base.config.to_dict():
        raise CompatibilityError(f"base config {base.config.to_dict()} != delta config {cfg}")


def save_delta(path, ckpt: DeltaCheckpoint) -> Path:
    meta = {"kind": "delta", "partition": ckpt.delta.partition.to_dict(), **ckpt.meta}
    return archive.save(path, ckpt.delta.tensors, meta)


def load_delta(path, base: ViTModel | None = None) -> DeltaCheckpoint:
    meta, tensors = archive.load(path)
    if meta.get("kind") != "delta":
        raise archive.ArchiveError(f"{path} is not a delta archive (kind={meta.get('kind')!r})")
    part = Partition.from_dict(meta["partition"])
    ckpt = DeltaCheckpoint(DeltaWeights(part, tensors, meta.get("vit_config", {})),
                           {k: v for k, v in meta.items() if k not in ("kind", "partition")})
    if base is not None:
        check_base(ckpt.meta, base)
    return ckpt


def save_model(path, model: ViTModel, extra_meta: dict | None = None) -> Path:
    if any(getattr(m, "lora", None) is not None for m in model.modules()):
        raise ContractError("merge adapters before saving a standalone model")
    meta = {"kind": "model", "vit_config": model.config.to_dict(), "digest": weights_digest(model),
            **(extra_meta or {})}
    return archive.save(path, model.state_dict(), meta)


def load_model(path) -> ViTModel:
    meta, tensors = archive.load(path)
    if meta.get("kind") != "model":
        raise archive.ArchiveError(f"{path} is not a model archive (kind={meta.get('kind')!r})")
    model = ViTModel(ViTConfig(**meta["vit_config"]))
    model.load_state_dict(tensors)
    model.requires_grad_(False)
    return model


def merge_to_file(base: ViTModel, delta_path, out_path) -> ViTModel:
    ckpt = load_delta(delta_path, base)
    merged = ckpt.apply(base, "merge")
    save_model(out_path, merged, {"base_digest": ckpt.meta.get("base_digest")})
    return merged


# ---------------------------------------------------------------------------
# extended pre-training
# ---------------------------------------------------------------------------

def decoder_partition(fresh: bool, rank: int, depth: int) -> Partition:
    """Decoder trainable set: everything when fresh, else rank-r' Q/V adapters + norms + mask token."""
    if fresh:
        return Partition(frozenset(range(1, depth + 1)), 0,
                         extra_trainable=frozenset({"embed", "mask_token", "pos_embed", "pred"}))
    return Partition(frozenset(), rank, extra_trainable=frozenset({"mask_token"}))


class PretrainSession:
    """Mutable state of one extended pre-training run (resumable)."""

    def __init__(self, base: ViTModel, run: RunConfig, images: np.ndarray,
                 decoder: MAEDecoder | None = None, head: DinoHead | None = None):
        if run.objective not in ("mae", "dino"):
            raise ContractError("pretrain needs objective mae or dino")
        self.run = run
        self.images = np.asarray(images, dtype=base.config.np_dtype)
        if len(self.images) == 0:
            raise DataError("no images to pre-train on")
        self.base_digest = weights_digest(base)
        self.encoder = inject(clone(base), run.partition, seed=run.seed)
        self.schedule = Schedule(run.base_lr, min(run.warmup_iters, run.iterations), run.iterations)
        self.rng = np.random.default_rng(run.seed + 1)
        self.iteration = 0
        self.bad_steps = 0
        self.history: list[dict] = []
        self.fresh_aux = False
        self.teacher = None
        if run.objective == "mae":
            cfg = run.mae
            self.fresh_aux = decoder is None
            dec = decoder if decoder is not None else MAEDecoder(
                base.config, cfg.decoder_dim, cfg.decoder_depth, cfg.decoder_heads, seed=run.seed + 7)
            dec = inject(clone(dec), decoder_partition(self.fresh_aux, cfg.decoder_lora_rank,
                                                         len(dec.blocks)), seed=run.seed + 3)
            self.aux = dec
            self.params = {**{f"encoder.{k}": p for k, p in self.encoder.named_parameters()},
                           **{f"decoder.{k}": p for k, p in dec.named_parameters()}}
        else:
            self.fresh_aux = head is None
            h = head if head is not None else DinoHead(base.config.dim, run.dino, seed=run.seed + 7,
                                                       dtype=base.config.np_dtype)
            h = clone(h).requires_grad_(True)
            self.student = DinoNet(self.encoder, h)
            self.teacher = clone(self.student).requires_grad_(False)
            self.aux = h
            self.params = dict(self.student.named_parameters())
        # head prototypes may later be frozen for a while; they keep their optimiser state
        self.opt = OptimizerState.create(self.params, weight_decay=run.weight_decay)
        self.ema_names = sorted(self.opt.m) if self.teacher is not None else []

    # -- one optimisation step ---------------------------------------------
    def step(self) -> dict:
        run = self.run
        it = self.iteration
        zero_grads(self.params)
        losses, comps = [], {}
        try:
            for _ in range(run.accum_steps):
                idx = self.rng.choice(len(self.images), size=min(run.batch_size, len(self.images)), replace=False)
                batch = self.images[np.sort(idx)]
                if run.objective == "mae":
                    r = mae_step(self.encoder, self.aux, batch, run.mae, self.rng, 1.0 / run.accum_steps)
                else:
                    r = dino_step(self.student, self.teacher, batch, run.dino, self.rng, it, run.iterations,
                                  1.0 / run.accum_steps)
                losses.append(r.loss)
                for k, v in r.components.items():
                    comps[k] = comps.get(k, 0.0) + v / run.accum_steps
        except NumericError as e:
            self.bad_steps += 1
            zero_grads(self.params)
            log.warning("iteration %d: %s", it, e)
            if self.bad_steps >= 3:
                raise TrainingDiverged(f"non-finite loss for 3 consecutive steps (last at iteration {it}): {e}")
            self.iteration += 1
            return {"iter": it, "loss": float("nan")}
        self.bad_steps = 0
        clip = run.clip if run.objective == "dino" else 0.0
        gn = clip_grad_norm(self.params, clip) if clip > 0 else grad_norm(self.params)
        lr = lr_for_iter(self.schedule, it)
        adamw_step(self.params, self.opt, lr)
        zero_grads(self.params)
        if self.teacher is not None:
            ema_update(self.teacher, self.student, ema_at(it, run.iterations, run.dino.ema_lambda),
                       names=self.ema_names)
        self.iteration += 1
        rec = {"iter": it, "loss": float(np.mean(losses)), **comps, "lr": lr, "grad_norm": gn}
        self.history.append(rec)
        return rec

    def run_until(self, stop: int, log_fn: Callable[[dict], None] | None = None) -> None:
        while self.iteration < stop:
            rec = self.step()
            if log_fn and (rec["iter"] % max(self.run.log_every, 1) == 0 or self.iteration == stop):
                log_fn(rec)

    # -- outputs ------------------------------------------------------------
    def checkpoint(self) -> DeltaCheckpoint:
        delta = extract_delta(self.encoder, self.run.partition)
        meta = {
            "iteration": self.iteration,
            "base_digest": self.base_digest,
            "vit_config": self.encoder.config.to_dict(),
            "run_digest": self.run.digest(),
            "objective": self.run.objective,
            "adapter_seed": self.run.seed,
        }
        return DeltaCheckpoint(delta, meta)

    def aux_state(self) -> dict[str, np.ndarray]:
        """Decoder or head weights with adapters merged, for reuse as a later starting point."""
        if self.run.objective == "mae":
            return merge(self.aux).state_dict()
        return self.aux.state_dict()

    # -- resumption ---------------------------------------------------------
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data for k, p in self.params.items() if k in self.opt.m}
        if self.teacher is not None:
            tp = dict(self.teacher.named_parameters())
            out.update({f"teacher/{k}": tp[k].data for k in self.ema_names})
        out.update({f"opt/{k}": v for k, v in self.opt.tensors().items()})
        return out

    def save_state(self, path) -> Path:
        meta = {"kind": "run_state", "iteration": self.iteration, "opt_step": self.opt.step,
                "bad_steps": self.bad_steps, "rng": self.rng.bit_generator.state,
                "run": self.run.to_dict(), "base_digest": self.base_digest}
        return archive.save(path, self.state_tensors(), meta)

    def load_state(self, path) -> None:
        meta, t = archive.load(path)
        if meta.get("kind") != "run_state":
            raise archive.ArchiveError(f"{path} is not a run-state archive")
        if meta["base_digest"] != self.base_digest:
            raise CompatibilityError("run state was produced from a different base model")
        if meta["run"] != json.loads(json.dumps(self.run.to_dict())):
            raise CompatibilityError("run state was produced by a different run config")
        for k in self.opt.m:
            self.params[k].data = t[f"param/{k}"].copy()
        if self.teacher is not None:
            tp = dict(self.teacher.named_parameters())
            for k in self.ema_names:
                tp[k].data = t[f"teacher/{k}"].copy()
        self.opt.load_tensors({k[4:]: v for k, v in t.items() if k.startswith("opt/")}, meta["opt_step"])
        self.rng.bit_generator.state = meta["rng"]
        self.iteration = meta["iteration"]
        self.bad_steps = meta["bad_steps"]


def pretrain(base: ViTModel, run: RunConfig, images: np.ndarray, decoder: MAEDecoder | None = None,
             head: DinoHead | None = None, log_fn: Callable[[dict], None] | None = None,
             resume_from=None, stop_at: int | None = None, state_out=None,
             session_out: list | None = None) -> DeltaCheckpoint:
    """Inject the partition, optimise the objective on ``images``, and return the delta."""
    sess = PretrainSession(base, run, images, decoder, head)
    if resume_from is not None:
        sess.load_state(resume_from)
    sess.run_until(run.iterations if stop_at is None else min(stop_at, run.iterations), log_fn)
    if state_out is not None:
        sess.save_state(state_out)
    if session_out is not None:
        session_out.append(sess)
    return sess.checkpoint()


# ---------------------------------------------------------------------------
# supervised heads, probing, fine-tuning
# ---------------------------------------------------------------------------

def _check_labels(y: np.ndarray, classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise DataError(f"labels must lie in [0, {classes}), got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


@dataclass
class LinearHead:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.mean) / self.std) @ self.weight.T + self.bias

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return self.logits(feats).argmax(axis=1)


def accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(y))) if len(y) else 0.0


def train_linear_head(x_train: np.ndarray, y_train: np.ndarray, classes: int | None = None,
                      lr: float = 1e-2, epochs: int = 100, l2: float = 1e-4, seed: int = 0,
                      standardize: bool = True) -> LinearHead:
    """Full-batch multinomial logistic regression trained with AdamW and a cosine schedule."""
    x = np.asarray(x_train, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise DataError("need at least two training rows")
    classes = int(classes if classes is not None else np.max(y_train) + 1)
    y = _check_labels(y_train, classes)
    mu = x.mean(axis=0) if standardize else np.zeros(x.shape[1])
    sd = x.std(axis=0) + 1e-6 if standardize else np.ones(x.shape[1])
    xs = Tensor((x - mu) / sd)
    rng = np.random.default_rng(seed)
    lin = Linear(x.shape[1], classes, rng, np.float64)
    params = dict(lin.named_parameters())
    opt = OptimizerState.create(params)
    sched = Schedule(lr, 0, epochs)
    for ep in range(epochs):
        with ag.Tape() as tape:
            loss = ag.softmax_ce(lin(xs), y)
            if l2:
                loss = loss + ag.scale(ag.tsum(lin.weight * lin.weight), l2)
        tape.backward(loss)
        adamw_step(params, opt, lr_at(sched, ep))
        zero_grads(params)
    return LinearHead(lin.weight.data.copy(), lin.bias.data.copy(), mu, sd)


def extract_features(model: ViTModel, images: np.ndarray, pool: str = "cls", batch: int = 64,
                     blocks: str = "last1") -> np.ndarray:
    """Frozen features: ``pool`` in {cls, meanpool, both}; ``blocks`` in {last1, last4_concat}."""
    model.eval()
    feats = []
    with ag.no_grad():
        for i in range(0, len(images), batch):
            x = np.asarray(images[i:i + batch], dtype=model.config.np_dtype)
            if blocks == "last1":
                out = model(x)
                layers = [np.concatenate([out.cls.data[:, None], out.patches.data], axis=1)]
            elif blocks == "last4_concat":
                out = model(x, collect="all_blocks")
                g, b = model.norm.weight.data, model.norm.bias.data
                layers = [ag.layer_norm(Tensor(h), Tensor(g), Tensor(b)).data for h in out.blocks[-4:]]
            else:
                raise ContractError(f"unknown block spec {blocks!r}")
            parts = []
            for h in layers:
                if pool == "cls":
                    parts.append(h[:, 0])
                elif pool == "meanpool":
                    parts.append(h[:, 1:].mean(axis=1))
                elif pool == "both":
                    parts.append(np.concatenate([h[:, 0], h[:, 1:].mean(axis=1)], axis=1))
                else:
                    raise ContractError(f"unknown pooling {pool!r}")
            feats.append(np.concatenate(parts, axis=1))
    model.train()
    return np.concatenate(feats, axis=0).astype(np.float64)


@dataclass
class FinetuneConfig:
    mode: str = "linear_probe"          # lora | linear_probe | full
    rank: int = 8
    iterations: int = 200
    batch_size: int = 32
    base_lr: float = 1e-3
    warmup_iters: int = 10
    drop_path: float = 0.2
    pool: str = "cls"
    seed: int = 0
    probe_lr: float = 1e-2
    probe_epochs: int = 100
    classes: int | None = None

    def __post_init__(self):
        if self.mode not in ("lora", "linear_probe", "full"):
            raise ContractError(f"unknown fine-tune mode {self.mode!r}")


@dataclass
class FinetuneResult:
    head: dict[str, np.ndarray]
    adapter_delta: DeltaWeights | None
    metrics: dict[str, float]


def finetune(model: ViTModel, data: dict, cfg: FinetuneConfig) -> FinetuneResult:
    """Supervised adaptation on ``data`` (keys x_train, y_train, x_val, y_val).

    ``lora`` trains fresh rank-r Q/V adapters plus a linear head on the (merged) model,
    ``linear_probe`` trains only a head on frozen features, ``full`` trains everything.
    """
    classes = cfg.classes or int(max(np.max(data["y_train"]), np.max(data["y_val"])) + 1)
    y_tr = _check_labels(data["y_train"], classes)
    y_va = _check_labels(data["y_val"], classes)
    if cfg.mode == "linear_probe":
        f_tr = extract_features(model, data["x_train"], cfg.pool)
        f_va = extract_features(model, data["x_val"], cfg.pool)
        head = train_linear_head(f_tr, y_tr, classes, cfg.probe_lr, cfg.probe_epochs, seed=cfg.seed)
        return FinetuneResult(asdict(head), None, {
            "train_acc": accuracy(head.predict(f_tr), y_tr), "val_acc": accuracy(head.predict(f_va), y_va)})

    base = merge(model) if getattr(model, "_partition", None) is not None else clone(model)
    base._partition = None
    if cfg.mode == "lora":
        part = Partition(frozenset(), cfg.rank, norms_unfrozen=False)
    else:
        part = Partition.full(base.config.depth)
    enc = inject(base, part, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 11)
    head = Linear(base.config.dim, classes, rng, base.config.np_dtype)
    params = {**{f"encoder.{k}": p for k, p in enc.named_parameters()},
              **{f"head.{k}": p for k, p in head.named_parameters()}}
    opt = OptimizerState.create(params)
    sched = Schedule(cfg.base_lr, min(cfg.warmup_iters, cfg.iterations), cfg.iterations)
    x_tr = np.asarray(data["x_train"], dtype=base.config.np_dtype)
    losses = []
    for it in range(cfg.iterations):
        idx = np.sort(rng.choice(len(x_tr), size=min(cfg.batch_size, len(x_tr)), replace=False))
        with ag.Tape() as tape:
            out = enc(x_tr[idx], drop_path=cfg.drop_path, rng=rng)
            feat = out.cls if cfg.pool == "cls" else ag.mean(out.patches, axis=1)
            loss = ag.softmax_ce(head(feat), y_tr[idx])
        tape.backward(loss)
        adamw_step(params, opt, lr_for_iter(sched, it))
        zero_grads(params)
        losses.append(loss.item())

    def predict(x):
        preds = []
        enc.eval()
        with ag.no_grad():
            for i in range(0, len(x), 64):
                out = enc(np.asarray(x[i:i + 64], dtype=base.config.np_dtype))
                feat = out.cls if cfg.pool == "cls" else ag.mean(out.patches, axis=1)
                preds.append(head(feat).data.argmax(axis=1))
        enc.train()
        return np.concatenate(preds)

    metrics = {"train_loss": float(np.mean(losses[-10:])) if losses else float("nan"),
               "train_acc": accuracy(predict(data["x_train"]), y_tr),
               "val_acc": accuracy(predict(data["x_val"]), y_va)}
    return FinetuneResult(head.state_dict(), extract_delta(enc, part), metrics)
