"""Self-supervised objectives: masked reconstruction and self-distillation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import autograd as ag
from .autograd import ContractError, NumericError, Tensor
from .nn import Linear, Module, trunc_normal
from .vit import MAEDecoder, ViTModel, patchify


@dataclass
class MAEConfig:
    mask_ratio: float = 0.75
    decoder_depth: int = 2
    decoder_dim: int = 32
    decoder_heads: int = 4
    decoder_lora_rank: int = 4
    norm_pix: bool = True
    loss_on: str = "masked"

    def __post_init__(self):
        if not 0 < self.mask_ratio < 1:
            raise ContractError("mask_ratio must lie in (0, 1)")
        if self.decoder_lora_rank < 0:
            raise ContractError("decoder_lora_rank must be >= 0")
        if self.loss_on not in ("masked", "visible", "all"):
            raise ContractError(f"loss_on must be masked|visible|all, got {self.loss_on!r}")


@dataclass
class DinoConfig:
    prototypes: int = 256
    head_layers: int = 3
    head_hidden: int = 128
    head_bottleneck: int = 32
    student_temp: float = 0.1
    teacher_temp_warmup: float = 0.04
    teacher_temp: float = 0.07
    teacher_temp_warmup_frac: float = 0.2
    ema_lambda: float = 0.994
    koleo_weight: float = 0.1
    koleo_per_crop: bool = True
    sinkhorn_iters: int = 3
    centering: str = "sinkhorn"
    ibot: bool = True
    ibot_mask_range: tuple[float, float] = (0.1, 0.5)
    ibot_sample_frac: float = 0.5
    n_global: int = 2
    n_local: int = 4
    global_size: int = 32
    local_size: int = 16
    global_area: tuple[float, float] = (0.32, 1.0)
    local_area: tuple[float, float] = (0.05, 0.32)
    # photometric augmentation, applied per crop; works for any channel count
    color_jitter: float = 0.4
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    head_freeze_iters: int = 3000

    def __post_init__(self):
        for name in ("student_temp", "teacher_temp_warmup", "teacher_temp"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if not 0 <= self.ema_lambda <= 1:
            raise ContractError("ema_lambda must lie in [0, 1]")
        for lo, hi in (self.local_area, self.global_area):
            if not 0 < lo < hi <= 1:
                raise ContractError("crop area fractions must satisfy 0 < lo < hi <= 1")
        if self.sinkhorn_iters < 1:
            raise ContractError("sinkhorn_iters must be >= 1")
        if self.centering not in ("sinkhorn", "softmax"):
            raise ContractError(f"unknown centering {self.centering!r}")

    @classmethod
    def full_scale(cls) -> "DinoConfig":
        return cls(prototypes=65536, head_hidden=2048, head_bottleneck=256,
                   global_size=224, local_size=98, n_local=8)


@dataclass
class StepResult:
    loss: float
    components: dict[str, float] = field(default_factory=dict)
    tokens_processed: int = 0


# ---------------------------------------------------------------------------
# MAE
# ---------------------------------------------------------------------------

def mae_mask(num_patches: int, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly choose ``floor(ratio * N)`` masked patches; returns sorted (visible, masked)."""
    if not 0 <= ratio < 1:
        raise ContractError(f"mask ratio must lie in [0, 1), got {ratio}")
    n_mask = int(math.floor(ratio * num_patches))
    perm = rng.permutation(num_patches)
    return np.sort(perm[n_mask:]), np.sort(perm[:n_mask])


def _norm_pix(target: np.ndarray) -> np.ndarray:
    mu = target.mean(axis=-1, keepdims=True)
    ddof = 1 if target.shape[-1] > 1 else 0
    var = target.var(axis=-1, keepdims=True, ddof=ddof)
    return (target - mu) / np.sqrt(var + 1e-6)


def _token_weights(shape: tuple[int, int], masked_idx: np.ndarray, loss_on: str) -> np.ndarray:
    b, n = shape
    masked_idx = np.asarray(masked_idx)
    if masked_idx.dtype == bool:
        w = masked_idx.astype(np.float64).reshape(b, n)
    else:
        w = np.zeros((b, n))
        w[np.arange(b)[:, None], masked_idx.astype(np.int64).reshape(b, -1)] = 1.0
    if loss_on == "visible":
        w = 1.0 - w
    elif loss_on == "all":
        w = np.ones((b, n))
    return w


def mae_loss(pred: Tensor, target: np.ndarray, masked_idx: np.ndarray, norm_pix: bool = True,
             loss_on: str = "masked") -> Tensor:
    """Per-patch MSE averaged over the chosen patch set.

    ``pred`` and ``target`` are ``[B, N, P]``; ``masked_idx`` is ``[B, n_masked]`` indices
    or a boolean ``[B, N]`` mask.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ContractError(f"pred {pred.shape} and target {target.shape} differ")
    if norm_pix:
        target = _norm_pix(target)
    w = _token_weights(pred.shape[:2], masked_idx, loss_on)
    if w.sum() == 0:
        raise ContractError("empty loss set")
    diff = pred - Tensor(target)
    per_tok = ag.mean(diff * diff, axis=-1)
    return ag.tsum(per_tok * Tensor(w.astype(pred.dtype))) / Tensor(np.asarray(w.sum(), dtype=pred.dtype))


def mae_step(encoder: ViTModel, decoder: MAEDecoder, batch: np.ndarray, config: MAEConfig,
             rng: np.random.Generator, loss_scale: float = 1.0, backward: bool = True) -> StepResult:
    """One masked-reconstruction forward/backward; gradients accumulate into ``.grad``."""
    cfg = encoder.config
    batch = np.asarray(batch, dtype=cfg.np_dtype)
    b = batch.shape[0]
    n_total = cfg.num_groups * cfg.num_patches
    vis, msk = zip(*(mae_mask(n_total, config.mask_ratio, rng) for _ in range(b)))
    vis, msk = np.stack(vis), np.stack(msk)
    ids_restore = np.argsort(np.concatenate([vis, msk], axis=1), axis=1)
    masked = np.zeros((b, n_total), dtype=bool)
    masked[np.arange(b)[:, None], msk] = True
    targets = patchify(batch, cfg)

    with ag.Tape() as tape:
        enc = encoder(batch, visible_idx=vis)
        latent = ag.concat([enc.cls.reshape(b, 1, cfg.dim), enc.patches], axis=1)
        preds = decoder(latent, ids_restore)
        n = cfg.num_patches
        total, weight = None, 0
        for g, (p, t) in enumerate(zip(preds, targets)):
            local = masked[:, g * n:(g + 1) * n]
            w = _token_weights((b, n), local, config.loss_on).sum()
            if w == 0:
                continue
            term = mae_loss(p, t, local, config.norm_pix, config.loss_on)
            total = ag.scale(term, w) if total is None else total + ag.scale(term, w)
            weight += w
        if total is None:
            raise ContractError("empty loss set")
        loss = ag.scale(total, 1.0 / weight)
        scaled = ag.scale(loss, loss_scale) if loss_scale != 1.0 else loss
    if backward:
        tape.backward(scaled)
    return StepResult(loss.item(), {"mae": loss.item()}, enc.tokens_processed)


# ---------------------------------------------------------------------------
# self-distillation pieces
# ---------------------------------------------------------------------------

def sinkhorn_center(scores, iters: int = 3, teacher_temp: float = 0.07) -> np.ndarray:
    """Sinkhorn-Knopp centering of teacher scores ``[batch, K]``; rows of the result sum to 1."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if iters < 1:
        raise ContractError("iters must be >= 1")
    if np.isnan(s).any() or np.isposinf(s).any():
        raise NumericError("sinkhorn_center: non-finite scores")
    if np.isneginf(s).all(axis=-1).any():
        raise NumericError("sinkhorn_center: a row is entirely -inf")
    z = s / teacher_temp
    z = z - z[np.isfinite(z)].max()
    q = np.exp(z)
    b, k = q.shape
    q /= q.sum()
    for _ in range(iters):
        q /= q.sum(axis=0, keepdims=True)
        q /= k
        q /= q.sum(axis=1, keepdims=True)
        q /= b
    q *= b
    return q


def softmax_center(scores, teacher_temp: float) -> np.ndarray:
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64) / teacher_temp
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ag.sqrt(ag.tsum(x * x, axis=-1, keepdims=True) + eps)
    return x / norm


def koleo(features: Tensor, eps: float = 1e-8) -> Tensor:
    """Kozachenko-Leonenko spreading term ``-mean_i log d_i`` on L2-normalized rows."""
    if features.ndim != 2 or features.shape[0] < 2:
        raise ContractError("koleo needs a [batch >= 2, d] matrix")
    x = l2_normalize(features)
    xd = x.data.astype(np.float64)
    dots = xd @ xd.T
    np.fill_diagonal(dots, -np.inf)
    nn = dots.argmax(axis=1)
    diff = x - x[nn]
    sq = ag.tsum(diff * diff, axis=-1)
    if (sq.data < eps * eps).any():
        warnings.warn("koleo: duplicate rows, nearest distance clamped", RuntimeWarning, stacklevel=2)
    dist = ag.sqrt(ag.clamp_min(sq, eps * eps))
    return ag.scale(ag.mean(ag.log(dist)), -1.0)


def ema_update(teacher, student, lam: float, names=None) -> None:
    """``teacher <- lam * teacher + (1 - lam) * student`` for the shared (or named) entries."""
    t = dict(teacher.named_parameters()) if isinstance(teacher, Module) else teacher
    s = dict(student.named_parameters()) if isinstance(student, Module) else student
    keys = list(names) if names is not None else list(s)
    if names is None and set(t) != set(s):
        raise _compat(f"parameter trees differ: {sorted(set(t) ^ set(s))[:4]}")
    for k in keys:
        if k not in t or k not in s:
            raise _compat(f"'{k}' missing from one side")
        tv, sv = t[k], s[k]
        ta = tv.data if isinstance(tv, Tensor) else tv
        sa = sv.data if isinstance(sv, Tensor) else sv
        if ta.shape != sa.shape:
            raise _compat(f"'{k}' shape {ta.shape} vs {sa.shape}")
        new = (lam * ta + (1.0 - lam) * sa).astype(ta.dtype)
        if isinstance(tv, Tensor):
            tv.data = new
        else:
            ta[...] = new


def _compat(msg: str):
    from .peft import CompatibilityError
    return CompatibilityError(msg)


def ema_at(t: int, total: int, base: float = 0.994) -> float:
    """Cosine ramp of the EMA rate from ``base`` to 1 over training."""
    if total <= 0:
        return base
    return 1.0 - (1.0 - base) * (math.cos(math.pi * min(t, total) / total) + 1.0) / 2.0


def teacher_temp_at(t: int, total: int, config: DinoConfig) -> float:
    warm = int(config.teacher_temp_warmup_frac * total)
    if warm <= 0 or t >= warm:
        return config.teacher_temp
    return config.teacher_temp_warmup + (config.teacher_temp - config.teacher_temp_warmup) * t / warm


class DinoHead(Module):
    """MLP projector followed by L2 normalisation and weight-normalised prototypes."""

    def __init__(self, d: int, config: DinoConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        dims = [d] + [config.head_hidden] * (config.head_layers - 1) + [config.head_bottleneck]
        self.mlp = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]
        self.prototypes = Tensor(trunc_normal(rng, (config.prototypes, config.head_bottleneck), 0.02, dtype),
                                 requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        for i, lin in enumerate(self.mlp):
            x = lin(x)
            if i < len(self.mlp) - 1:
                x = ag.gelu(x)
        x = l2_normalize(x)
        w = l2_normalize(self.prototypes)
        return ag.matmul(x, ag.transpose(w))


class DinoNet(Module):
    """Backbone + projection head; the unit that student and teacher each hold."""

    def __init__(self, backbone: ViTModel, head: DinoHead):
        self.backbone = backbone
        self.head = head


# ---------------------------------------------------------------------------
# crops
# ---------------------------------------------------------------------------

def _resize(img: np.ndarray, size: int) -> np.ndarray:
    return np.stack([np.asarray(Image.fromarray(c.astype(np.float32), mode="F")
                                .resize((size, size), Image.BICUBIC)) for c in img])


def random_resized_crop(img: np.ndarray, size: int, area: tuple[float, float],
                        rng: np.random.Generator, flip: bool = True) -> np.ndarray:
    """Crop a random region covering ``area`` of ``img`` (C x H x W) and resize it bicubically."""
    _, h, w = img.shape
    total = h * w
    for _ in range(10):
        target = rng.uniform(*area) * total
        aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            break
    else:
        ch = cw = max(1, int(round(math.sqrt(area[1] * total))))
        ch, cw = min(ch, h), min(cw, w)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = img[:, top:top + ch, left:left + cw]
    if flip and rng.random() < 0.5:
        crop = crop[:, :, ::-1]
    out = _resize(crop, size)
    return out.astype(img.dtype)


def photometric(img: np.ndarray, config: DinoConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-channel random gain/offset, then (sometimes) collapse all channels to their mean."""
    c = img.shape[0]
    out = img
    j = config.color_jitter
    if j > 0 and rng.random() < config.jitter_prob:
        gain = rng.uniform(1 - j, 1 + j, c)[:, None, None]
        shift = rng.uniform(-j, j, c)[:, None, None]
        out = out * gain + shift
    if rng.random() < config.grayscale_prob:
        out = np.broadcast_to(out.mean(axis=0, keepdims=True), out.shape)
    return np.ascontiguousarray(out, dtype=img.dtype)


def _view(x, size, area, config, rng):
    return photometric(random_resized_crop(x, size, area, rng), config, rng)


def multicrop(batch: np.ndarray, config: DinoConfig, rng: np.random.Generator):
    """Global and local crop stacks: (list of [B,C,Sg,Sg], list of [B,C,Sl,Sl])."""
    globals_ = [np.stack([_view(x, config.global_size, config.global_area, config, rng) for x in batch])
                for _ in range(config.n_global)]
    locals_ = [np.stack([_view(x, config.local_size, config.local_area, config, rng) for x in batch])
               for _ in range(config.n_local)]
    return globals_, locals_


def ibot_masks(batch: int, num_patches: int, config: DinoConfig, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``[B, N]``: a random half of the samples get a ratio in ``ibot_mask_range``."""
    masks = np.zeros((batch, num_patches), dtype=bool)
    n_masked = int(round(config.ibot_sample_frac * batch))
    chosen = rng.permutation(batch)[:n_masked]
    lo, hi = config.ibot_mask_range
    for i in chosen:
        k = max(1, int(rng.uniform(lo, hi) * num_patches))
        masks[i, rng.permutation(num_patches)[:k]] = True
    return masks


# ---------------------------------------------------------------------------
# self-distillation step
# ---------------------------------------------------------------------------

def dino_cross_entropy(student_logits: list[Tensor], teacher_probs: list[np.ndarray],
                       student_temp: float) -> Tensor:
    """Mean CE over all (teacher view i, student view j != i) pairs."""
    total, pairs = None, 0
    for i, tp in enumerate(teacher_probs):
        for j, sl in enumerate(student_logits):
            if i == j:
                continue
            term = ag.mean(ag.soft_ce(ag.scale(sl, 1.0 / student_temp), tp))
            total = term if total is None else total + term
            pairs += 1
    if total is None:
        raise ContractError("no (teacher, student) view pairs")
    return ag.scale(total, 1.0 / pairs)


def _center(scores: np.ndarray, config: DinoConfig, temp: float) -> np.ndarray:
    if config.centering == "softmax":
        return softmax_center(scores, temp)
    return sinkhorn_center(scores, config.sinkhorn_iters, temp)


def dino_step(student: DinoNet, teacher: DinoNet, batch: np.ndarray, config: DinoConfig,
              rng: np.random.Generator, iteration: int = 0, total_iters: int = 1,
              loss_scale: float = 1.0, backward: bool = True) -> StepResult:
    """One self-distillation forward/backward; student gradients accumulate into ``.grad``."""
    cfg = student.backbone.config
    batch = np.asarray(batch, dtype=cfg.np_dtype)
    b = batch.shape[0]
    student.head.prototypes.requires_grad = iteration >= config.head_freeze_iters
    globals_, locals_ = multicrop(batch, config, rng)
    t_temp = teacher_temp_at(iteration, total_iters, config)
    n_tok = cfg.num_groups * (config.global_size // cfg.patch_size) ** 2
    masks = [ibot_masks(b, n_tok, config, rng) if config.ibot else None for _ in globals_]

    # teacher: global views only, never recorded
    with ag.no_grad():
        t_probs, t_patch = [], []
        for g, m in zip(globals_, masks):
            out = teacher.backbone(g)
            t_probs.append(_center(teacher.head(out.cls).data, config, t_temp))
            if m is not None and m.any():
                t_patch.append(_center(teacher.head(out.patches[m]).data, config, t_temp))
            else:
                t_patch.append(None)

    with ag.Tape() as tape:
        s_logits, koleo_terms, ibot_terms = [], [], []
        for g, m, tp in zip(globals_, masks, t_patch):
            out = student.backbone(g, token_mask=m)
            if tp is not None:
                logits = student.head(ag.concat([out.cls, out.patches[m]], axis=0))
                s_logits.append(logits[:b])
                s_patch = logits[b:]
                ibot_terms.append(ag.mean(ag.soft_ce(ag.scale(s_patch, 1.0 / config.student_temp), tp)))
            else:
                s_logits.append(student.head(out.cls))
            koleo_terms.append(out.cls)
        for loc in locals_:
            s_logits.append(student.head(student.backbone(loc).cls))

        dino = dino_cross_entropy(s_logits, t_probs, config.student_temp)
        total = dino
        comps = {"dino": dino.item(), "ibot": 0.0, "koleo": 0.0}
        if ibot_terms:
            ibot = ag.scale(sum(ibot_terms[1:], ibot_terms[0]), 1.0 / len(ibot_terms))
            total = total + ibot
            comps["ibot"] = ibot.item()
        if config.koleo_weight > 0:
            if config.koleo_per_crop:
                terms = [koleo(c) for c in koleo_terms]
                kl = ag.scale(sum(terms[1:], terms[0]), 1.0 / len(terms))
            else:
                kl = koleo(ag.concat(koleo_terms, axis=0))
            total = total + ag.scale(kl, config.koleo_weight)
            comps["koleo"] = kl.item()
        if not np.isfinite(total.data).all():
            raise NumericError(f"non-finite dino loss: {comps}")
        scaled = ag.scale(total, loss_scale) if loss_scale != 1.0 else total
    if backward:
        tape.backward(scaled)
    return StepResult(total.item(), comps)
