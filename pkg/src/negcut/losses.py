"""Scalar objectives: InfoNCE / PatchNCE, diversity, least-squares GAN, and their weighting.

All functions are pure and differentiable in their tensor arguments. Inputs may
carry leading batch dimensions; reductions over those dimensions are means
(the expectation over images).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from negcut.errors import InvalidInputError

DEFAULT_TAU = 0.07


@dataclass
class ContrastiveBatch:
    """Queries, aligned positives and negatives for one image-layer.

    ``k_neg`` is either shared by every query, shape ``(..., N, M)``, or given
    per query, shape ``(..., S, N, M)``.
    """

    q: Tensor
    k_pos: Tensor
    k_neg: Tensor
    tau: float = DEFAULT_TAU

    def validate(self, check_norm=True, atol=1e-6):
        _check_contrastive_shapes(self.q, self.k_pos, self.k_neg)
        _check_tau(self.tau)
        if check_norm:
            for name, v in (("q", self.q), ("k_pos", self.k_pos), ("k_neg", self.k_neg)):
                norms = v.detach().norm(dim=-1)
                if not torch.allclose(norms, torch.ones_like(norms), atol=atol, rtol=0):
                    raise InvalidInputError(f"{name} contains vectors that are not unit norm")
        return self


@dataclass
class GanScores:
    real_scores: Tensor | None = None
    fake_scores: Tensor | None = None


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidInputError("loss weights must be non-negative")


@dataclass
class LossBundle:
    ad_cont: Tensor
    div: Tensor
    gan_g: Tensor
    L_H: Tensor
    L_G: Tensor
    L_N: Tensor
    gan_d: Tensor | None = None

    def scalars(self) -> dict[str, float]:
        out = {
            "ad_cont": self.ad_cont,
            "div": self.div,
            "gan_g": self.gan_g,
            "gan_d": self.gan_d,
            "L_H": self.L_H,
            "L_G": self.L_G,
            "L_N": self.L_N,
        }
        return {k: float(v) for k, v in out.items() if v is not None}


def _check_tau(tau):
    if not (isinstance(tau, (int, float)) and math.isfinite(tau) and tau > 0):
        raise InvalidInputError(f"temperature must be a positive finite number, got {tau!r}")


def _check_finite(**tensors):
    for name, t in tensors.items():
        if not torch.isfinite(t).all():
            raise InvalidInputError(f"{name} contains non-finite values")


def _check_contrastive_shapes(q, k_pos, k_neg):
    if q.dim() < 2:
        raise InvalidInputError("q must have shape (..., S, M)")
    if q.shape != k_pos.shape:
        raise InvalidInputError(f"q {tuple(q.shape)} and k_pos {tuple(k_pos.shape)} differ")
    if q.shape[-2] < 1:
        raise InvalidInputError("need at least one query")
    shared = k_neg.dim() == q.dim()
    per_query = k_neg.dim() == q.dim() + 1
    if not (shared or per_query):
        raise InvalidInputError("k_neg must have shape (..., N, M) or (..., S, N, M)")
    if k_neg.shape[-1] != q.shape[-1]:
        raise InvalidInputError("negative and query dimensions differ")
    if k_neg.shape[-2] < 1:
        raise InvalidInputError("need at least one negative")
    if shared and k_neg.shape[:-2] != q.shape[:-2]:
        raise InvalidInputError("k_neg batch dimensions do not match q")
    if per_query and k_neg.shape[:-2] != q.shape[:-1]:
        raise InvalidInputError("per-query k_neg must have shape (..., S, N, M)")


def info_nce(q, k_pos, k_neg, tau=DEFAULT_TAU, reduction="mean"):
    """InfoNCE of each query against its positive and the negatives.

    Per query: ``logsumexp([q.k+, q.k-_1, ..., q.k-_N] / tau) - q.k+ / tau``.
    ``reduction`` is ``"mean"`` or ``"sum"`` over the S queries of an image;
    leading batch dimensions are then averaged.
    """
    _check_contrastive_shapes(q, k_pos, k_neg)
    _check_tau(tau)
    _check_finite(q=q, k_pos=k_pos, k_neg=k_neg)
    if reduction not in ("mean", "sum"):
        raise InvalidInputError(f"unknown reduction {reduction!r}")

    l_pos = (q * k_pos).sum(-1, keepdim=True)
    if k_neg.dim() == q.dim():
        l_neg = q @ k_neg.transpose(-1, -2)
    else:
        l_neg = (q.unsqueeze(-2) * k_neg).sum(-1)
    logits = torch.cat([l_pos, l_neg], dim=-1) / tau
    # torch.logsumexp subtracts the row max before exponentiating
    per_query = torch.logsumexp(logits, dim=-1) - logits[..., 0]
    per_image = per_query.mean(-1) if reduction == "mean" else per_query.sum(-1)
    return per_image.mean()


def patch_nce(batches: Sequence[ContrastiveBatch], reduction="mean"):
    """Sum of :func:`info_nce` over tap layers."""
    if len(batches) == 0:
        raise InvalidInputError("patch_nce needs at least one layer")
    total = info_nce(batches[0].q, batches[0].k_pos, batches[0].k_neg, batches[0].tau, reduction)
    for b in batches[1:]:
        total = total + info_nce(b.q, b.k_pos, b.k_neg, b.tau, reduction)
    return total


def diversity_loss(out1, out2, dim_power=0.0):
    """Negative L1 distance between two negative-generator outputs (mean over batch dims).

    The per-pair L1 sum is divided by ``M ** dim_power`` for outputs of width M.
    0 gives the plain sum, 1 the per-coordinate mean.
    """
    if out1.shape != out2.shape:
        raise InvalidInputError(f"shape mismatch {tuple(out1.shape)} vs {tuple(out2.shape)}")
    _check_finite(out1=out1, out2=out2)
    if not dim_power >= 0:
        raise InvalidInputError(f"dim_power must be >= 0, got {dim_power}")
    d = (out1 - out2).abs().sum(-1)
    if dim_power:
        d = d / out1.shape[-1] ** dim_power
    return -d.mean()


def bank_diversity_loss(raw, dim_power=0.0):
    """Diversity loss over a bank of outputs ``(..., N, M)``.

    Consecutive noise draws are paired (0 with 1, 2 with 3, ...) and the
    pair losses averaged. Banks with fewer than two entries contribute 0.
    """
    n = raw.shape[-2]
    if n < 2:
        return raw.sum() * 0.0
    m = n - n % 2
    return diversity_loss(raw[..., 0:m:2, :], raw[..., 1:m:2, :], dim_power)


def _nonempty(t, name):
    if t is None or t.numel() == 0:
        raise InvalidInputError(f"{name} is empty")
    _check_finite(**{name: t})


def lsgan_d(scores: GanScores):
    _nonempty(scores.real_scores, "real_scores")
    _nonempty(scores.fake_scores, "fake_scores")
    return ((1.0 - scores.real_scores) ** 2).mean() + (scores.fake_scores ** 2).mean()


def lsgan_g(scores: GanScores):
    _nonempty(scores.fake_scores, "fake_scores")
    return ((1.0 - scores.fake_scores) ** 2).mean()


def assemble_losses(ad_cont, div, gan_g, w: LossWeights | None = None, gan_d=None) -> LossBundle:
    w = w or LossWeights()
    vals = [ad_cont, div, gan_g]
    if not all(math.isfinite(float(v)) for v in vals):
        raise InvalidInputError("loss inputs must be finite")
    return LossBundle(
        ad_cont=ad_cont,
        div=div,
        gan_g=gan_g,
        L_H=ad_cont,
        L_G=ad_cont + w.lambda1 * gan_g,
        L_N=-ad_cont + w.lambda2 * div,
        gan_d=gan_d,
    )
