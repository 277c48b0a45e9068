"""Unpaired datasets: a synthetic shapes-to-stripes task with ground-truth masks,
and a plain image-folder loader."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from negcut.errors import InvalidInputError

# all foreground colors have luminance < 0.42, backgrounds > 0.8
PALETTE_A = [(0.70, 0.10, 0.10), (0.10, 0.45, 0.15), (0.15, 0.20, 0.70), (0.50, 0.10, 0.55), (0.60, 0.35, 0.05)]
PALETTE_B = [(0.45, 0.05, 0.05), (0.05, 0.30, 0.30), (0.25, 0.15, 0.45), (0.40, 0.30, 0.05)]
STRIPE_DARK = (0.06, 0.06, 0.06)
BG_A = (0.82, 0.85, 0.90)
BG_B = (0.93, 0.88, 0.78)


@dataclass
class SynthConfig:
    image_size: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    shape_types: tuple = ("rect", "ellipse")
    scale_range: tuple = (0.12, 0.28)  # half-size as a fraction of image size
    stripe_period: int = 6
    n_a: int = 50
    n_b: int = 50
    seed: int = 0

    def __post_init__(self):
        self.shape_types = tuple(self.shape_types)
        self.scale_range = tuple(self.scale_range)

    def validate(self):
        from negcut.errors import ConfigError

        if self.image_size < 8:
            raise ConfigError("image_size", "must be >= 8")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("min_shapes", "need 1 <= min_shapes <= max_shapes")
        if not set(self.shape_types) <= {"rect", "ellipse"}:
            raise ConfigError("shape_types", "supported shapes are 'rect' and 'ellipse'")
        lo, hi = self.scale_range
        if not 0 < lo <= hi < 0.5:
            raise ConfigError("scale_range", "need 0 < lo <= hi < 0.5")
        if self.n_a < 1 or self.n_b < 1:
            raise ConfigError("n_a/n_b", "each domain needs at least one image")
        return self


@dataclass
class SynthSample:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 shape id, 0 = background
    layout: list = field(default_factory=list)


@dataclass
class UnpairedDataset:
    """Two independently indexed image sets in [-1, 1], ``(N, 3, H, W)``."""

    domain_a: torch.Tensor
    domain_b: torch.Tensor
    masks_a: torch.Tensor | None = None
    masks_b: torch.Tensor | None = None
    layouts_a: list | None = None
    layouts_b: list | None = None


def _pixel_grid(size):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="xy")


def shape_region(shape, size):
    """Boolean mask of pixels whose centers fall inside ``shape``."""
    xs, ys = _pixel_grid(size)
    cx, cy = shape["center"]
    a, b = shape["half_size"]
    if shape["type"] == "rect":
        return (np.abs(xs - cx) <= a) & (np.abs(ys - cy) <= b)
    if shape["type"] == "ellipse":
        return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0
    raise InvalidInputError(f"unknown shape type {shape['type']!r}")


def shape_area(shape):
    a, b = shape["half_size"]
    return 4 * a * b if shape["type"] == "rect" else np.pi * a * b


def sample_layout(cfg: SynthConfig, rng: np.random.Generator):
    size = cfg.image_size
    n = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shapes = []
    for _ in range(n):
        kind = cfg.shape_types[int(rng.integers(len(cfg.shape_types)))]
        # integer half sizes and centers keep rectangle edges on pixel boundaries
        a, b = (max(2, int(round(rng.uniform(*cfg.scale_range) * size))) for _ in range(2))
        margin = 2
        cx = int(rng.integers(a + margin, size - a - margin + 1))
        cy = int(rng.integers(b + margin, size - b - margin + 1))
        shapes.append({"type": kind, "center": [cx, cy], "half_size": [a, b]})
    return shapes


def _to_uint8(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def render(layout, size, style, rng: np.random.Generator, stripe_period=6) -> SynthSample:
    """Render a layout as domain "A" (flat fills) or "B" (diagonal stripes)."""
    if style == "A":
        bg, palette = BG_A, PALETTE_A
    elif style == "B":
        bg, palette = BG_B, PALETTE_B
    else:
        raise InvalidInputError(f"unknown style {style!r}")
    img = np.empty((size, size, 3))
    img[:] = bg
    mask = np.zeros((size, size), np.uint8)
    xs, ys = _pixel_grid(size)
    stripes = ((np.floor(xs + ys) // (stripe_period / 2)) % 2).astype(bool)
    for sid, shape in enumerate(layout, start=1):
        region = shape_region(shape, size)
        color = np.array(palette[int(rng.integers(len(palette)))])
        if style == "A":
            img[region] = color
        else:
            img[region & stripes] = color
            img[region & ~stripes] = STRIPE_DARK
        mask[region] = sid
    return SynthSample(image=_to_uint8(img), mask=mask, layout=layout)


def generate_synth_samples(cfg: SynthConfig):
    """Both domains share the layout distribution but are drawn independently."""
    cfg.validate()
    out = {}
    for domain, n, stream in (("A", cfg.n_a, 0), ("B", cfg.n_b, 1)):
        rng = np.random.default_rng([cfg.seed, stream])
        out[domain] = [
            render(sample_layout(cfg, rng), cfg.image_size, domain, rng, cfg.stripe_period) for _ in range(n)
        ]
    return out["A"], out["B"]


def generate_synth_dataset(cfg: SynthConfig, root):
    """Write ``domainA/ domainB/ masksA/ masksB/`` PNGs plus ``manifest.json`` under ``root``."""
    root = Path(root)
    samples_a, samples_b = generate_synth_samples(cfg)
    manifest = {"config": asdict(cfg), "seed": cfg.seed, "layouts": {}}
    for domain, samples in (("A", samples_a), ("B", samples_b)):
        img_dir, mask_dir = root / f"domain{domain}", root / f"masks{domain}"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            Image.fromarray(s.image).save(img_dir / f"{i:05d}.png")
            Image.fromarray(s.mask).save(mask_dir / f"{i:05d}.png")
        manifest["layouts"][domain] = [s.layout for s in samples]
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def to_tensor(images):
    """uint8 ``(N, H, W, 3)`` -> float ``(N, 3, H, W)`` in [-1, 1]."""
    arr = np.asarray(images, dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(0, 3, 1, 2).contiguous()


def to_uint8(images):
    """Inverse of :func:`to_tensor` for one image ``(3, H, W)`` or a batch."""
    arr = images.detach().cpu().double().numpy()
    arr = np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.moveaxis(arr, -3, -1)


def load_image_folder(path, size, return_names=False):
    """Load every decodable image in ``path``, resized to ``size x size`` and scaled to [-1, 1]."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"image folder not found: {path}")
    arrays, names = [], []
    for f in sorted(path.iterdir()):
        if not f.is_file():
            continue
        try:
            with Image.open(f) as im:
                im = im.convert("RGB")
                if im.size != (size, size):
                    im = im.resize((size, size), Image.BILINEAR)
                arrays.append(np.asarray(im))
                names.append(f.name)
        except (UnidentifiedImageError, OSError) as e:
            warnings.warn(f"skipping undecodable image {f}: {e}")
    if not arrays:
        raise InvalidInputError(f"no decodable images in {path}")
    images = to_tensor(np.stack(arrays))
    return (images, names) if return_names else images


def _load_masks(path, names):
    return torch.from_numpy(np.stack([np.asarray(Image.open(Path(path) / n)) for n in names]).astype(np.int64))


def load_synth_dataset(root, size=None) -> UnpairedDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    size = size or manifest["config"]["image_size"]
    a, names_a = load_image_folder(root / "domainA", size, return_names=True)
    b, names_b = load_image_folder(root / "domainB", size, return_names=True)
    return UnpairedDataset(
        domain_a=a,
        domain_b=b,
        masks_a=_load_masks(root / "masksA", names_a),
        masks_b=_load_masks(root / "masksB", names_b),
        layouts_a=manifest["layouts"]["A"],
        layouts_b=manifest["layouts"]["B"],
    )


def synth_dataset_in_memory(cfg: SynthConfig) -> UnpairedDataset:
    """Same content as :func:`generate_synth_dataset` without touching disk."""
    samples_a, samples_b = generate_synth_samples(cfg)
    return UnpairedDataset(
        domain_a=to_tensor(np.stack([s.image for s in samples_a])),
        domain_b=to_tensor(np.stack([s.image for s in samples_b])),
        masks_a=torch.from_numpy(np.stack([s.mask for s in samples_a]).astype(np.int64)),
        masks_b=torch.from_numpy(np.stack([s.mask for s in samples_b]).astype(np.int64)),
        layouts_a=[s.layout for s in samples_a],
        layouts_b=[s.layout for s in samples_b],
    )


def load_dataset(domain_a, domain_b, size) -> UnpairedDataset:
    return UnpairedDataset(domain_a=load_image_folder(domain_a, size), domain_b=load_image_folder(domain_b, size))
