"""Fréchet distance between embedded image sets, synthetic correspondence
scoring, and per-pixel similarity maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from negcut.errors import InvalidInputError, NumericalFailureError
from negcut.sampling import l2_normalize

SYM_TOL = 1e-8
PSD_TOL = 1e-8
PRODUCT_EIG_TOL = 1e-6


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)

    @property
    def dim(self):
        return self.mu.shape[0]

    def validate(self):
        d = self.dim
        if self.mu.ndim != 1 or self.sigma.shape != (d, d):
            raise InvalidInputError(f"mu {self.mu.shape} and sigma {self.sigma.shape} are inconsistent")
        scale = max(1.0, float(np.abs(self.sigma).max(initial=0.0)))
        if np.abs(self.sigma - self.sigma.T).max(initial=0.0) > SYM_TOL * scale:
            raise InvalidInputError("covariance is not symmetric")
        if d and np.linalg.eigvalsh(self.sigma).min() < -PSD_TOL * scale:
            raise InvalidInputError("covariance is not positive semidefinite")
        return self


def gaussian_stats(embeddings) -> GaussianStats:
    """Sample mean and unbiased covariance of ``(n, d)`` embeddings."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise InvalidInputError("need at least two embedded samples")
    mu = e.mean(axis=0)
    c = e - mu
    sigma = c.T @ c / (e.shape[0] - 1)
    return GaussianStats(mu, (sigma + sigma.T) / 2)


def _psd_sqrt(m):
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product root is taken from the eigenvalues of the
    symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, which has the same spectrum.
    """
    if a.dim != b.dim:
        raise InvalidInputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    a.validate()
    b.validate()
    root_a = _psd_sqrt(a.sigma)
    prod = root_a @ b.sigma @ root_a
    ev = np.linalg.eigvalsh((prod + prod.T) / 2)
    scale = float(np.abs(ev).max(initial=0.0))
    if ev.size and ev.min() < -PRODUCT_EIG_TOL * max(scale, np.finfo(float).tiny):
        raise NumericalFailureError(f"covariance product has eigenvalue {ev.min():.3e}")
    tr_root = np.sqrt(np.clip(ev, 0.0, None)).sum()
    diff = a.mu - b.mu
    fd = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_root)
    return max(fd, 0.0)


@dataclass
class FeatureEmbedderConfig:
    """``mode``: "random_conv" (frozen random CNN) or "pixels" (area-downsampled RGB, dim = 3*g*g)."""

    mode: str = "random_conv"
    dim: int = 64
    seed: int = 0

    def validate(self):
        from negcut.errors import ConfigError

        if self.mode not in ("random_conv", "pixels"):
            raise ConfigError("mode", "must be 'random_conv' or 'pixels'")
        if self.dim < 1:
            raise ConfigError("dim", "must be >= 1")
        if self.mode == "pixels":
            g = int(round((self.dim / 3) ** 0.5))
            if 3 * g * g != self.dim:
                raise ConfigError("dim", "pixels mode needs dim = 3*g*g")
        return self


class FeatureEmbedder:
    """Frozen image embedder; never trained."""

    def __init__(self, cfg: FeatureEmbedderConfig | None = None):
        self.cfg = (cfg or FeatureEmbedderConfig()).validate()
        self.net = None
        if self.cfg.mode == "random_conv":
            g = torch.Generator().manual_seed(self.cfg.seed)
            widths = [3, 16, 32, self.cfg.dim]
            layers = []
            for cin, cout in zip(widths, widths[1:]):
                conv = nn.Conv2d(cin, cout, 4, stride=2, padding=1)
                nn.init.normal_(conv.weight, 0.0, (2.0 / (cin * 16)) ** 0.5, generator=g)
                nn.init.normal_(conv.bias, 0.0, 0.1, generator=g)
                layers += [conv, nn.ReLU()]
            self.net = nn.Sequential(*layers).double().eval()
            for p in self.net.parameters():
                p.requires_grad_(False)

    @torch.no_grad()
    def __call__(self, images):
        x = torch.as_tensor(images).double()
        if x.dim() != 4 or x.shape[1] != 3:
            raise InvalidInputError(f"expected (N, 3, H, W) images, got {tuple(x.shape)}")
        if self.cfg.mode == "pixels":
            g = int(round((self.cfg.dim / 3) ** 0.5))
            return torch.nn.functional.adaptive_avg_pool2d(x, g).flatten(1).numpy()
        return self.net(x).mean(dim=(-2, -1)).numpy()


def embed_set(images, cfg: FeatureEmbedderConfig | None = None) -> GaussianStats:
    if len(images) < 2:
        raise InvalidInputError("need at least two images")
    return gaussian_stats(FeatureEmbedder(cfg)(images))


def set_frechet_distance(images_a, images_b, cfg: FeatureEmbedderConfig | None = None) -> float:
    emb = FeatureEmbedder(cfg)
    return frechet_distance(gaussian_stats(emb(images_a)), gaussian_stats(emb(images_b)))


# ---------------------------------------------------------------------------
# correspondence


def luminance(image):
    """Luminance in [0, 255] for a uint8 ``(H, W, 3)`` array or a ``(3, H, W)`` tensor in [-1, 1]."""
    if isinstance(image, torch.Tensor):
        if image.dim() != 3 or image.shape[0] != 3:
            raise InvalidInputError(f"expected a (3, H, W) tensor, got {tuple(image.shape)}")
        arr = (image.detach().double().cpu().numpy() + 1.0) * 127.5
        arr = np.moveaxis(arr, 0, -1)
    else:
        arr = np.asarray(image, dtype=np.float64)
    return arr @ np.array([0.299, 0.587, 0.114])


def otsu_threshold(values, bins=256, value_range=(0.0, 255.0)):
    """Threshold maximizing between-class variance; ``None`` if the input is constant."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.max() - v.min() < 1e-9:
        return None
    hist, edges = np.histogram(v, bins=bins, range=value_range)
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (m0[-1] - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between = np.nan_to_num(between, nan=-1.0)
    return float(edges[int(np.argmax(between)) + 1])


def foreground_mask(image):
    """Otsu split on luminance; the class holding most border pixels is background."""
    lum = luminance(image)
    t = otsu_threshold(lum)
    if t is None:
        return np.zeros(lum.shape, bool)
    above = lum >= t
    border = np.concatenate([above[0], above[-1], above[1:-1, 0], above[1:-1, -1]])
    bg_is_above = border.mean() >= 0.5
    return ~above if bg_is_above else above


def iou(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0


def correspondence_score(source, translated):
    """IoU between the thresholded translation and the source's shape mask.

    ``source`` is a :class:`~negcut.data.SynthSample` or a shape-id mask array.
    """
    mask = getattr(source, "mask", source)
    if mask is None:
        raise InvalidInputError("source has no ground-truth mask")
    mask = np.asarray(mask)
    fg = foreground_mask(translated)
    if fg.shape != mask.shape:
        raise InvalidInputError(f"translated image {fg.shape} is not aligned with mask {mask.shape}")
    return iou(fg, mask > 0)


# ---------------------------------------------------------------------------
# similarity maps


def similarity_map(query_pos, emb_y, emb_x, tau):
    """``exp(q . k_p / tau)`` for every pixel ``p`` of the source embedding map.

    ``emb_y``, ``emb_x`` are ``(M, h, w)``; ``q`` is the normalized translated
    embedding at ``query_pos = (row, col)``.
    """
    if emb_y.shape != emb_x.shape or emb_y.dim() != 3:
        raise InvalidInputError("embedding maps must both be (M, h, w)")
    r, c = query_pos
    h, w = emb_y.shape[-2:]
    if not (0 <= r < h and 0 <= c < w):
        raise InvalidInputError(f"query {query_pos} outside the {h}x{w} map")
    q = l2_normalize(emb_y[:, r, c], dim=0)
    k = l2_normalize(emb_x, dim=0)
    return torch.exp(torch.einsum("m,mhw->hw", q, k) / tau)


@torch.no_grad()
def translate(generator, images, batch_size=8):
    dtype = next(generator.parameters()).dtype
    outs = [generator(images[i:i + batch_size].to(dtype))[0] for i in range(0, len(images), batch_size)]
    return torch.cat(outs).float()


def evaluate_translation(translated, target, masks=None, cfg: FeatureEmbedderConfig | None = None):
    """Fréchet distance of ``translated`` to ``target`` and, given source masks,
    the mean correspondence score."""
    out = {"frechet": set_frechet_distance(translated, target, cfg), "correspondence": None}
    if masks is not None:
        masks = np.asarray(masks)
        if len(masks) != len(translated):
            raise InvalidInputError(f"{len(translated)} translated images but {len(masks)} masks")
        out["correspondence"] = float(np.mean([correspondence_score(m, t) for m, t in zip(masks, translated)]))
    return out
