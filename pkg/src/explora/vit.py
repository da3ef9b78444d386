"""Vision transformer encoder, MAE decoder, and parameter accounting."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, NumericError, ContractError
from .nn import Module, Linear, LayerNorm, trunc_normal


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    in_channels: int = 3
    channel_groups: list[list[int]] | None = None
    depth: int = 6
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.channel_groups is not None:
            flat = sorted(c for g in self.channel_groups for c in g)
            if flat != list(range(self.in_channels)):
                raise ContractError(f"channel_groups {self.channel_groups} do not partition "
                                    f"{self.in_channels} channels")

    @property
    def groups(self) -> list[list[int]]:
        return self.channel_groups or [list(range(self.in_channels))]

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def num_tokens(self) -> int:
        return 1 + self.num_groups * self.num_patches

    @property
    def hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        import json
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


VIT_L = dict(image_size=224, patch_size=16, in_channels=3, depth=24, dim=1024, heads=16)
VIT_B = dict(image_size=224, patch_size=16, in_channels=3, depth=12, dim=768, heads=12)
DESK = dict(image_size=32, patch_size=8, in_channels=3, depth=6, dim=64, heads=4)
ARCHS = {"vitl": VIT_L, "vitb": VIT_B, "desk": DESK}


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def _patchify_batch(x: np.ndarray, channels: Sequence[int], p: int) -> np.ndarray:
    b, _, h, w = x.shape
    if h % p or w % p:
        raise ContractError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    sub = x[:, list(channels)]
    sub = sub.reshape(b, len(channels), gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return sub.reshape(b, gh * gw, len(channels) * p * p)


def patchify(image: np.ndarray, config: ViTConfig) -> list[np.ndarray]:
    """Split ``C x H x W`` (or ``B x C x H x W``) into row-major patches, one array per group."""
    image = np.asarray(image)
    single = image.ndim == 3
    x = image[None] if single else image
    if x.shape[1] != config.in_channels:
        raise ContractError(f"expected {config.in_channels} channels, got {x.shape[1]}")
    out = [_patchify_batch(x, g, config.patch_size) for g in config.groups]
    return [o[0] for o in out] if single else out


def unpatchify(patches: Sequence[np.ndarray], config: ViTConfig, size: int | None = None) -> np.ndarray:
    p = config.patch_size
    size = size or config.image_size
    g = size // p
    single = patches[0].ndim == 2
    parts = [q[None] if single else q for q in patches]
    b = parts[0].shape[0]
    img = np.zeros((b, config.in_channels, size, size), dtype=parts[0].dtype)
    for chans, q in zip(config.groups, parts):
        c = len(chans)
        blk = q.reshape(b, g, g, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(b, c, size, size)
        img[:, chans] = blk
    return img[0] if single else img


@lru_cache(maxsize=32)
def _interp_matrix_1d(n_old: int, n_new: int) -> np.ndarray:
    # half-pixel-centred linear interpolation, edge clamped
    m = np.zeros((n_new, n_old))
    for i in range(n_new):
        src = (i + 0.5) * n_old / n_new - 0.5
        src = min(max(src, 0.0), n_old - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_old - 1)
        t = src - lo
        m[i, lo] += 1 - t
        m[i, hi] += t
    return m


def pos_interp_matrix(g_old: int, g_new: int) -> np.ndarray:
    """Bilinear resampling of a ``g_old^2`` positional grid onto ``g_new^2`` cells."""
    m = _interp_matrix_1d(g_old, g_new)
    return np.kron(m, m)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Attention(Module):
    def __init__(self, d: int, heads: int, rng, dtype):
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)
        self._heads = heads

    def __call__(self, x: Tensor, return_scores: bool = False):
        b, t, d = x.shape
        h = self._heads
        dh = d // h

        def split(z):
            return ag.transpose(ag.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), dh ** -0.5)
        attn = ag.softmax(scores, axis=-1)
        y = ag.matmul(attn, v)
        y = ag.reshape(ag.transpose(y, (0, 2, 1, 3)), (b, t, d))
        out = self.o(y)
        return (out, attn.data) if return_scores else (out, None)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng, dtype):
        self.fc1 = Linear(d, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


def _drop_path(branch: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    b = branch.shape[0]
    keep = (rng.random(b) >= rate).astype(branch.dtype) / (1.0 - rate)
    return ag.mul(branch, Tensor(keep.reshape((b,) + (1,) * (branch.ndim - 1))))


class Block(Module):
    def __init__(self, d: int, heads: int, hidden: int, rng, dtype):
        self.norm1 = LayerNorm(d, dtype)
        self.attn = Attention(d, heads, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.mlp = MLP(d, hidden, rng, dtype)

    def __call__(self, x: Tensor, return_scores: bool = False, drop_path: float = 0.0,
                 rng: np.random.Generator | None = None):
        a, scores = self.attn(self.norm1(x), return_scores)
        if drop_path > 0 and self.training:
            a = _drop_path(a, drop_path, rng)
        x = x + a
        m = self.mlp(self.norm2(x))
        if drop_path > 0 and self.training:
            m = _drop_path(m, drop_path, rng)
        return x + m, scores


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

@dataclass
class ViTOutput:
    cls: Tensor                       # [B, d] after the final norm
    patches: Tensor                   # [B, N_kept, d] after the final norm
    blocks: list[np.ndarray] = field(default_factory=list)   # raw block outputs [B, T, d]
    attn: dict[int, np.ndarray] = field(default_factory=dict)  # 1-based block -> [B, H, T, T]
    tokens_processed: int = 0


class ViTModel(Module):
    """Class-token ViT with one patch embedding and positional table per channel group."""

    def __init__(self, config: ViTConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        d = config.dim
        p2 = config.patch_size ** 2
        self.patch_embed = [Linear(len(g) * p2, d, rng, dt) for g in config.groups]
        self.pos_embed = [Tensor(trunc_normal(rng, (1, config.num_patches, d), 0.02, dt), requires_grad=True)
                          for _ in config.groups]
        self.cls_token = Tensor(trunc_normal(rng, (1, 1, d), 0.02, dt), requires_grad=True)
        self.mask_token = Tensor(np.zeros((1, 1, d), dtype=dt), requires_grad=True)
        self.blocks = [Block(d, config.heads, config.hidden, rng, dt) for _ in range(config.depth)]
        self.norm = LayerNorm(d, dt)

    def embed(self, images: np.ndarray) -> Tensor:
        """Patch + positional embedding for all groups: ``[B, G*N, d]`` (no class token)."""
        cfg = self.config
        x = np.asarray(images, dtype=cfg.np_dtype)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2] != x.shape[3]:
            raise ContractError(f"expected images [B, {cfg.in_channels}, S, S], got {x.shape}")
        g_new = x.shape[2] // cfg.patch_size
        parts = []
        for chans, emb, pos in zip(cfg.groups, self.patch_embed, self.pos_embed):
            tok = emb(Tensor(_patchify_batch(x, chans, cfg.patch_size)))
            if g_new != cfg.grid:
                m = Tensor(pos_interp_matrix(cfg.grid, g_new).astype(cfg.np_dtype))
                pos = ag.matmul(m, ag.reshape(pos, (cfg.num_patches, cfg.dim)))
            parts.append(tok + pos)
        return parts[0] if len(parts) == 1 else ag.concat(parts, axis=1)

    def __call__(self, images, **kw) -> ViTOutput:
        return forward(self, images, **kw)


def forward(model: ViTModel, images, collect="final", visible_idx: np.ndarray | None = None,
            token_mask: np.ndarray | None = None, drop_path: float = 0.0,
            rng: np.random.Generator | None = None) -> ViTOutput:
    """Run the encoder.

    ``collect`` is ``"final"``, ``"all_blocks"``, or ``("attn", block)`` with a 1-based
    block index (a list of indices is also accepted). ``visible_idx[B, n]`` keeps only
    those patch tokens (MAE); ``token_mask[B, N]`` swaps masked patch tokens for the
    learned mask token (iBOT).
    """
    cfg = model.config
    x = model.embed(images)
    b = x.shape[0]
    if token_mask is not None:
        m = Tensor(np.asarray(token_mask, dtype=cfg.np_dtype)[..., None])
        x = x + ag.mul(m, model.mask_token - x)
    if visible_idx is not None:
        x = x[np.arange(b)[:, None], np.asarray(visible_idx)]
    cls = ag.broadcast_to(model.cls_token, (b, 1, cfg.dim))
    x = ag.concat([cls, x], axis=1)

    want_attn: set[int] = set()
    if isinstance(collect, tuple) and collect and collect[0] == "attn":
        sel = collect[1]
        want_attn = set(sel) if isinstance(sel, (list, tuple, set)) else {int(sel)}
    keep_blocks = collect == "all_blocks"

    out = ViTOutput(cls=None, patches=None, tokens_processed=x.shape[1] - 1)
    for i, blk in enumerate(model.blocks, start=1):
        try:
            x, scores = blk(x, return_scores=i in want_attn, drop_path=drop_path, rng=rng)
        except NumericError as e:
            raise NumericError(f"block {i}: {e}") from e
        if scores is not None:
            out.attn[i] = scores
        if keep_blocks:
            out.blocks.append(x.data)
    x = model.norm(x)
    out.cls = x[:, 0]
    out.patches = x[:, 1:]
    return out


def cls_attention_map(scores: np.ndarray) -> np.ndarray:
    """Head-averaged class-token attention over patch tokens: ``[B, H, T, T] -> [B, T-1]``."""
    s = np.asarray(scores)
    if s.ndim == 3:
        s = s[None]
    return s[:, :, 0, 1:].mean(axis=1)


def attention_summary(scores, sigma_clip: float = 5.0,
                      stats: tuple[float, float] | None = None) -> np.ndarray:
    """Clip a score map to ``mean +/- sigma_clip * std`` and rescale to [0, 1].

    ``stats`` overrides the (mean, std) pair, e.g. to clip against statistics pooled
    over many maps. A zero-spread map is returned unchanged.
    """
    if sigma_clip <= 0:
        raise ContractError("sigma_clip must be positive")
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    mu, sd = stats if stats is not None else (s.mean(), s.std())
    if sd == 0:
        return s.copy()
    c = np.clip(s, mu - sigma_clip * sd, mu + sigma_clip * sd)
    lo, hi = c.min(), c.max()
    if hi == lo:
        return c
    return (c - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# MAE decoder
# ---------------------------------------------------------------------------

class MAEDecoder(Module):
    def __init__(self, config: ViTConfig, dim: int = 32, depth: int = 2, heads: int = 4, seed: int = 1):
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        self._config = config
        self.embed = Linear(config.dim, dim, rng, dt)
        self.mask_token = Tensor(trunc_normal(rng, (1, 1, dim), 0.02, dt), requires_grad=True)
        self.pos_embed = [Tensor(trunc_normal(rng, (1, config.num_patches, dim), 0.02, dt), requires_grad=True)
                          for _ in config.groups]
        self.blocks = [Block(dim, heads, int(dim * 4), rng, dt) for _ in range(depth)]
        self.norm = LayerNorm(dim, dt)
        p2 = config.patch_size ** 2
        self.pred = [Linear(dim, len(g) * p2, rng, dt) for g in config.groups]

    def __call__(self, latent: Tensor, ids_restore: np.ndarray) -> list[Tensor]:
        """``latent[B, 1+n_vis, d]`` -> per-group predictions ``[B, N, group_channels*p^2]``."""
        cfg = self._config
        x = self.embed(latent)
        b, t, dd = x.shape
        n_total = ids_restore.shape[1]
        vis = x[:, 1:]
        fill = ag.broadcast_to(self.mask_token, (b, n_total - (t - 1), dd))
        full = ag.concat([vis, fill], axis=1)
        full = full[np.arange(b)[:, None], ids_restore]
        pos = self.pos_embed[0] if len(self.pos_embed) == 1 else ag.concat(self.pos_embed, axis=1)
        full = full + pos
        x = ag.concat([x[:, :1], full], axis=1)
        for blk in self.blocks:
            x, _ = blk(x)
        x = self.norm(x)
        n = cfg.num_patches
        return [head(x[:, 1 + g * n:1 + (g + 1) * n]) for g, head in enumerate(self.pred)]


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------

def param_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every encoder parameter, without allocating them."""
    d, h, p2 = config.dim, config.hidden, config.patch_size ** 2
    shapes: dict[str, tuple[int, ...]] = {}
    for g, chans in enumerate(config.groups):
        shapes[f"patch_embed.{g}.weight"] = (d, len(chans) * p2)
        shapes[f"patch_embed.{g}.bias"] = (d,)
    for g in range(config.num_groups):
        shapes[f"pos_embed.{g}"] = (1, config.num_patches, d)
    shapes["cls_token"] = (1, 1, d)
    shapes["mask_token"] = (1, 1, d)
    for i in range(config.depth):
        pre = f"blocks.{i}."
        for ln in ("norm1", "norm2"):
            shapes[pre + ln + ".weight"] = (d,)
            shapes[pre + ln + ".bias"] = (d,)
        for m in ("q", "k", "v", "o"):
            shapes[pre + f"attn.{m}.weight"] = (d, d)
            shapes[pre + f"attn.{m}.bias"] = (d,)
        shapes[pre + "mlp.fc1.weight"] = (h, d)
        shapes[pre + "mlp.fc1.bias"] = (h,)
        shapes[pre + "mlp.fc2.weight"] = (d, h)
        shapes[pre + "mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


TARGET_MODULES = {
    "Q": ("attn.q",), "K": ("attn.k",), "V": ("attn.v",), "O": ("attn.o",),
    "MLP": ("mlp.fc1", "mlp.fc2"),
}


def block_of(name: str) -> int | None:
    """1-based block index of a parameter name, or None for non-block parameters."""
    if name.startswith("blocks."):
        return int(name.split(".")[1]) + 1
    return None


def is_norm(name: str) -> bool:
    return any(p in ("norm", "norm1", "norm2") for p in name.split(".")[:-1])


def classify(name: str, partition) -> str | None:
    """Category of a trainable parameter under ``partition``, or None if frozen."""
    blk = block_of(name)
    if ".lora." in name:
        return "lora"
    if blk is not None and blk in partition.unfrozen_blocks:
        return "block_full"
    if is_norm(name):
        return "norm" if partition.norms_unfrozen else None
    root = name.split(".")[0]
    if name in partition.extra_trainable or root in partition.extra_trainable:
        return "extra"
    return None


def lora_shapes(config: ViTConfig, partition) -> dict[str, tuple[int, ...]]:
    """Shapes of the adapter factors that ``partition`` injects."""
    out: dict[str, tuple[int, ...]] = {}
    if partition.rank <= 0:
        return out
    shapes = param_shapes(config)
    for i in range(config.depth):
        if i + 1 in partition.unfrozen_blocks:
            continue
        for t in sorted(partition.targets):
            for mod in TARGET_MODULES[t]:
                k2, k1 = shapes[f"blocks.{i}.{mod}.weight"]
                out[f"blocks.{i}.{mod}.lora.A"] = (partition.rank, k1)
                out[f"blocks.{i}.{mod}.lora.B"] = (k2, partition.rank)
    return out


def param_count(model_or_config, partition) -> dict:
    """Trainable / frozen scalar counts under ``partition``, broken down by category."""
    config = model_or_config.config if isinstance(model_or_config, ViTModel) else model_or_config
    for u in partition.unfrozen_blocks:
        if not 1 <= u <= config.depth:
            raise ContractError(f"unfrozen block {u} outside 1..{config.depth}")
    by_cat = {"block_full": 0, "lora": 0, "norm": 0, "extra": 0}
    trainable = frozen = 0
    all_shapes = dict(param_shapes(config))
    all_shapes.update(lora_shapes(config, partition))
    for name, shape in all_shapes.items():
        n = int(np.prod(shape))
        cat = classify(name, partition)
        if cat is None:
            frozen += n
        else:
            trainable += n
            by_cat[cat] += n
    return {"trainable": trainable, "frozen": frozen, "by_category": by_cat}


def weights_digest(model: Module) -> str:
    """Stable hash over all parameter names, shapes, and bytes."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
