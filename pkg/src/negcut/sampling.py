"""Query / positive / negative construction for each tap layer."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from negcut.errors import DegenerateInputError, InvalidInputError

NORM_EPS = 1e-12


@dataclass
class PositionSet:
    layer: int
    rows: Tensor
    cols: Tensor

    @property
    def count(self):
        return int(self.rows.numel())

    def flat(self, w):
        return self.rows * w + self.cols


@dataclass
class EmbeddedPatchSet:
    """Unit queries/positives at sampled positions, ``(..., S, M)``, plus the
    un-normalized spatial mean of the source embedding, ``(..., M)``."""

    layer: int
    q: Tensor
    k_pos: Tensor
    ctx_mean: Tensor


@dataclass
class NegativeBank:
    layer: int
    k_neg: Tensor
    noises: Tensor
    raw: Tensor


def l2_normalize(v, dim=-1, eps=NORM_EPS):
    norm = v.norm(dim=dim, keepdim=True)
    if (norm <= eps).any():
        raise DegenerateInputError("cannot normalize a (near) zero vector")
    return v / norm


def sample_positions(h, w, S, rng: torch.Generator | None = None, layer=0) -> PositionSet:
    if S < 1 or S > h * w:
        raise InvalidInputError(f"cannot sample {S} distinct positions from a {h}x{w} map")
    idx = torch.randperm(h * w, generator=rng)[:S]
    return PositionSet(layer=layer, rows=idx // w, cols=idx % w)


def gather_positions(emb, pos: PositionSet):
    """Pick embedding vectors ``(..., S, M)`` out of a map ``(..., M, h, w)``."""
    h, w = emb.shape[-2:]
    if (pos.rows >= h).any() or (pos.cols >= w).any() or (pos.rows < 0).any() or (pos.cols < 0).any():
        raise InvalidInputError("positions fall outside the feature map")
    flat = emb.flatten(-2)
    return flat[..., pos.flat(w)].transpose(-1, -2)


def build_patch_set(emb_y, emb_x, pos: PositionSet) -> EmbeddedPatchSet:
    if emb_y.shape != emb_x.shape:
        raise InvalidInputError(f"embedding maps differ in shape: {tuple(emb_y.shape)} vs {tuple(emb_x.shape)}")
    q = l2_normalize(gather_positions(emb_y, pos))
    k_pos = l2_normalize(gather_positions(emb_x, pos))
    ctx_mean = emb_x.mean(dim=(-2, -1))
    return EmbeddedPatchSet(layer=pos.layer, q=q, k_pos=k_pos, ctx_mean=ctx_mean)


def draw_noise(batch_shape, n, z_dim, rng=None, dtype=torch.float32):
    return torch.randn(*batch_shape, n, z_dim, generator=rng, dtype=dtype)


def build_negative_bank(ctx_mean, neg, n=None, rng=None, noises=None, layer=0) -> NegativeBank:
    """Generate ``n`` negatives from the context vector(s) ``ctx_mean (..., M)``.

    Pass ``noises`` to re-run the generator on a previous draw.
    """
    if noises is None:
        if n is None or n < 1:
            raise InvalidInputError("bank size must be >= 1")
        noises = draw_noise(ctx_mean.shape[:-1], n, neg.z_dim, rng, dtype=ctx_mean.dtype)
    raw = neg(ctx_mean, noises)
    return NegativeBank(layer=layer, k_neg=l2_normalize(raw), noises=noises, raw=raw)


def in_image_negatives(k_pos):
    """For each query s, the positives of every other sampled position: ``(..., S, S-1, M)``."""
    S = k_pos.shape[-2]
    if S < 2:
        raise InvalidInputError("in-image negatives need at least two sampled positions")
    others = torch.tensor([[t for t in range(S) if t != s] for s in range(S)], dtype=torch.long)
    return k_pos[..., others, :]


@dataclass
class HardnessStats:
    values: np.ndarray
    mean: float
    std: float
    quantiles: dict[str, float]

    def summary(self):
        return {"count": int(self.values.size), "mean": self.mean, "std": self.std, **self.quantiles}

    def save(self, stem):
        """Write ``<stem>.txt`` (one similarity per line) and ``<stem>.json`` (summary)."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(stem.with_suffix(".txt"), self.values.reshape(-1), fmt="%.9f")
        stem.with_suffix(".json").write_text(json.dumps(self.summary(), indent=2))


def summarize_similarities(values) -> HardnessStats:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    qs = np.quantile(v, [0.05, 0.25, 0.5, 0.75, 0.95])
    return HardnessStats(
        values=v,
        mean=float(v.mean()),
        std=float(v.std()),
        quantiles={f"q{int(p * 100):02d}": float(x) for p, x in zip([0.05, 0.25, 0.5, 0.75, 0.95], qs)},
    )


def hardness_stats(patch_set: EmbeddedPatchSet, bank: NegativeBank) -> HardnessStats:
    """Cosine similarity of every query with every generated negative (S*N values per image)."""
    q, k = patch_set.q.detach(), bank.k_neg.detach()
    if q.shape[-1] != k.shape[-1]:
        raise InvalidInputError("query and negative dimensions differ")
    sims = (q @ k.transpose(-1, -2)).clamp(-1.0, 1.0)
    return summarize_similarities(sims.cpu().numpy())


def in_image_hardness(patch_set: EmbeddedPatchSet) -> HardnessStats:
    """Same statistic for the in-image negatives (other sampled source positions)."""
    q = patch_set.q.detach()
    negs = in_image_negatives(patch_set.k_pos.detach())
    sims = (q.unsqueeze(-2) * negs).sum(-1).clamp(-1.0, 1.0)
    return summarize_similarities(sims.cpu().numpy())
