"""Synthetic source/target image domains, PPM ingestion, and dataset manifests."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.linalg import expm

from . import archive
from .train import DataError

DOMAINS = ("source_rgb", "target_spectral", "target_multispectral")
SHAPES = ("disk", "square", "triangle", "cross", "ring", "bars", "diamond", "crescent")

# pixel normalisation applied when uint8 shards are loaded for the model
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


@dataclass
class SyntheticDomainSpec:
    domain: str = "source_rgb"
    classes: int = 6
    image_size: int = 32
    channels: int | None = None
    seed: int = 0
    # fixed by the domain, not the sample: the same mixer for every image
    mixer_seed: int = 1234
    source_band: tuple[float, float] = (0.06, 0.14)
    target_band: tuple[float, float] = (0.14, 0.22)
    target_gamma: float = 0.8
    mixer_rotation: float = 0.3

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise DataError(f"unknown domain {self.domain!r}; choose from {DOMAINS}")
        if not 2 <= self.classes <= len(SHAPES):
            raise DataError(f"classes must lie in [2, {len(SHAPES)}]")
        if self.channels is None:
            self.channels = 6 if self.domain == "target_multispectral" else 3
        want = 6 if self.domain == "target_multispectral" else 3
        if self.channels != want:
            raise DataError(f"domain {self.domain} has {want} channels")

    def channel_mixer(self) -> np.ndarray:
        """Fixed invertible (orthogonal) mixer for the target domains.

        A cyclic channel shift followed by a small random rotation. A fully random
        rotation wipes out every source-trained feature at the first layer, which
        is a harder shift than the one extended pre-training is meant to bridge.
        The overall sign flip inverts brightness polarity, so the bright-shape
        cue learned on the source domain no longer transfers for free.
        """
        rng = np.random.default_rng(self.mixer_seed)
        a = rng.standard_normal((self.channels, self.channels))
        a = a - a.T
        rot = expm(self.mixer_rotation * a / np.abs(a).max())
        return -np.roll(np.eye(self.channels), 1, axis=0) @ rot


@dataclass
class DatasetManifest:
    root: str
    splits: dict[str, int]
    label_map: dict[str, int]
    shards: dict[str, str]
    checksums: dict[str, str]
    channels: int
    image_size: int
    spec: dict = field(default_factory=dict)

    def save(self) -> Path:
        path = Path(self.root) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        m = cls(**json.loads(path.read_text()))
        m.root = str(path.parent)
        m.verify()
        return m

    def verify(self) -> None:
        for split, shard in self.shards.items():
            f = Path(self.root) / shard
            if not f.exists():
                raise DataError(f"shard {f} for split '{split}' is missing")
            if archive.file_digest(f) != self.checksums[split]:
                raise DataError(f"checksum mismatch for shard {f}")

    def load_split(self, split: str, normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
        _, t = archive.load(Path(self.root) / self.shards[split])
        x = t["images"]
        return (to_float(x) if normalize else x), t["labels"]


def to_float(images_u8: np.ndarray) -> np.ndarray:
    return ((images_u8.astype(np.float32) / 255.0) - PIXEL_MEAN) / PIXEL_STD


# ---------------------------------------------------------------------------
# procedural images
# ---------------------------------------------------------------------------

def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float, rot: float):
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(rot), math.sin(rot)
    u, v = c * dx + s * dy, -s * dx + c * dy
    rad = np.hypot(u, v)
    if kind == "disk":
        return rad <= r
    if kind == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if kind == "triangle":
        return (v <= 0.6 * r) & (v >= -r + 1.7 * np.abs(u))
    if kind == "cross":
        w = 0.32 * r
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if kind == "ring":
        return (rad <= r) & (rad >= 0.55 * r)
    if kind == "bars":
        return (np.abs(u) <= r) & (np.abs(v) <= r) & (np.mod(v + r, 0.66 * r) < 0.33 * r)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if kind == "crescent":
        return (rad <= r) & (np.hypot(u - 0.45 * r, v) > 0.75 * r)
    raise DataError(f"unknown shape {kind}")


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells)).astype(np.float32)
    img = Image.fromarray(coarse, mode="F").resize((size, size), Image.BICUBIC)
    return np.asarray(img, dtype=np.float64)


def render(spec: SyntheticDomainSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    """One float image in [0, 1], shape ``C x S x S``."""
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    kind = SHAPES[label]
    r = rng.uniform(0.22, 0.34) * s
    cy, cx = s / 2 + rng.uniform(-0.1, 0.1, size=2) * s
    mask = _shape_mask(kind, yy, xx, cy, cx, r, rng.uniform(0, 2 * math.pi)).astype(np.float64)

    target = spec.domain != "source_rgb"
    band = spec.target_band if target else spec.source_band
    f = rng.uniform(*band)
    # texture orientation is class-conditional, like the shape
    th = math.pi * label / spec.classes + rng.uniform(-0.12, 0.12)
    tex = 0.5 + 0.5 * np.sin(2 * math.pi * f * (xx * math.cos(th) + yy * math.sin(th)) + rng.uniform(0, 2 * math.pi))
    bg_tex = _smooth_noise(rng, s, 4)

    # the grating covers the whole image; the shape only modulates its contrast
    col_a = rng.uniform(0.0, 0.45, 3)
    col_b = rng.uniform(0.55, 1.0, 3)
    contrast = 0.55 + 0.45 * mask
    img = col_a[:, None, None] + (col_b - col_a)[:, None, None] * (0.5 + contrast * (tex - 0.5))[None]
    img = img + 0.2 * (mask - 0.5)[None] + 0.15 * (bg_tex - 0.5)[None] + rng.normal(0, 0.03, img.shape)
    if spec.domain == "target_multispectral":
        edge = np.abs(np.gradient(mask)[0]) + np.abs(np.gradient(mask)[1])
        extra = np.stack([
            0.2 + 0.6 * mask * tex,
            0.5 * bg_tex + 0.4 * np.clip(edge, 0, 1),
            0.3 + 0.4 * mask * (1 - tex) + rng.normal(0, 0.03, (s, s)),
        ])
        img = np.concatenate([img, extra], axis=0)
    if target:
        q = spec.channel_mixer()
        centred = img - 0.5
        img = 0.5 + np.einsum("ij,jhw->ihw", q, centred)
        img = np.clip(img, 0, 1) ** spec.target_gamma
    return np.clip(img, 0, 1)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255).astype(np.uint8)


def generate(spec: SyntheticDomainSpec, n: int, stream: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``n`` balanced labelled uint8 images; each sample has its own seed so output is order-independent."""
    labels = np.arange(n) % spec.classes
    root = np.random.SeedSequence([spec.seed, stream])
    seeds = root.spawn(n)
    images = np.stack([_quantize(render(spec, int(y), np.random.default_rng(ss))) for y, ss in zip(labels, seeds)])
    perm = np.random.default_rng(root.spawn(1)[0]).permutation(n)
    return images[perm], labels[perm].astype(np.int64)


def gen_data(spec: SyntheticDomainSpec, n_train: int, n_val: int, out_path) -> DatasetManifest:
    if n_train <= 0 or n_val <= 0:
        raise DataError("split sizes must be positive")
    root = Path(out_path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {root}: {e}") from e
    shards, sums = {}, {}
    for stream, (split, n) in enumerate((("train", n_train), ("val", n_val))):
        x, y = generate(spec, n, stream)
        name = f"{split}.expl"
        archive.save(root / name, {"images": x, "labels": y}, {"kind": "dataset", "split": split})
        shards[split] = name
        sums[split] = archive.file_digest(root / name)
    spec_d = asdict(spec)
    man = DatasetManifest(str(root), {"train": n_train, "val": n_val},
                          {SHAPES[i]: i for i in range(spec.classes)}, shards, sums,
                          spec.channels, spec.image_size, spec_d)
    man.save()
    return man


# ---------------------------------------------------------------------------
# portable pixmaps
# ---------------------------------------------------------------------------

def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        out.append(buf[i:j])
        i = j
    return out, i + 1


def read_pnm(path) -> np.ndarray:
    """Binary PPM (P6) or PGM (P5) -> uint8 ``C x H x W``."""
    buf = Path(path).read_bytes()
    (magic, w, h, mx), off = _tokens(buf, 4)
    if magic not in (b"P6", b"P5"):
        raise DataError(f"{path}: unsupported pixmap type {magic!r}")
    if int(mx) > 255:
        raise DataError(f"{path}: 16-bit pixmaps are not supported")
    c = 3 if magic == b"P6" else 1
    w, h = int(w), int(h)
    data = np.frombuffer(buf[off:off + w * h * c], dtype=np.uint8)
    if data.size != w * h * c:
        raise DataError(f"{path}: truncated pixel data")
    return data.reshape(h, w, c).transpose(2, 0, 1).copy()


def write_ppm(path, image: np.ndarray) -> None:
    """Write uint8 ``3 x H x W`` (or ``1 x H x W`` as P5)."""
    img = np.asarray(image, dtype=np.uint8)
    c, h, w = img.shape
    magic = {3: b"P6", 1: b"P5"}.get(c)
    if magic is None:
        raise DataError("pixmaps hold 1 or 3 channels")
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + img.transpose(1, 2, 0).tobytes())


def resize_center_crop(img: np.ndarray, size: int) -> np.ndarray:
    """Resize the shorter side to ``size`` (bicubic, aspect kept) then take the centre crop."""
    c, h, w = img.shape
    scale = size / min(h, w)
    nh, nw = max(size, round(h * scale)), max(size, round(w * scale))
    chans = [np.asarray(Image.fromarray(img[i]).resize((nw, nh), Image.BICUBIC)) for i in range(c)]
    out = np.stack(chans)
    top, left = (nh - size) // 2, (nw - size) // 2
    return out[:, top:top + size, left:left + size]


def ingest_folder(path, out_path, image_size: int = 32) -> DatasetManifest:
    """One sub-directory per class of ``.ppm``/``.pgm`` files -> a single-split dataset."""
    root = Path(path)
    classes = sorted(d.name for d in root.iterdir() if d.is_dir()) if root.is_dir() else []
    files = [(c, f) for c in classes for f in sorted((root / c).iterdir())
             if f.suffix.lower() in (".ppm", ".pgm", ".pnm")]
    if not files:
        raise DataError(f"{path}: no class directories with pixmaps found")
    images, labels, chans = [], [], {}
    for c, f in files:
        img = read_pnm(f)
        chans.setdefault(img.shape[0], []).append(str(f.relative_to(root)))
        images.append(resize_center_crop(img, image_size))
        labels.append(classes.index(c))
    if len(chans) > 1:
        minority = min(chans.values(), key=len)
        raise DataError(f"mixed channel counts {sorted(chans)}; offenders: {minority}")
    x = np.stack(images)
    y = np.asarray(labels, dtype=np.int64)
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    archive.save(out / "train.expl", {"images": x, "labels": y}, {"kind": "dataset", "split": "train"})
    man = DatasetManifest(str(out), {"train": len(y)}, {c: i for i, c in enumerate(classes)},
                          {"train": "train.expl"}, {"train": archive.file_digest(out / "train.expl")},
                          int(x.shape[1]), image_size, {"source": str(root)})
    man.save()
    return man


def dataset_digest(images: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(images).tobytes()).hexdigest()[:16]
