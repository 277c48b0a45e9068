"""Alternating NEGCUT updates: discriminator, negative generator (ascent), encoder side (descent)."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from negcut import losses as L
from negcut.errors import InvalidInputError, InvariantError, TrainingAborted
from negcut.networks import (
    PARTITIONS,
    DiscriminatorSpec,
    GeneratorSpec,
    NegCutNets,
    NegGenSpec,
    NetworkSpecs,
    RepNetSpec,
    build_networks,
    embed_patches,
    load_checkpoint,
    save_checkpoint,
)
from negcut.sampling import (
    EmbeddedPatchSet,
    build_negative_bank,
    build_patch_set,
    draw_noise,
    hardness_stats,
    in_image_hardness,
    in_image_negatives,
    sample_positions,
)

log = logging.getLogger(__name__)

NEG_SOURCES = ("in_image", "learned")


@dataclass
class TrainConfig:
    """Training hyperparameters. Defaults are the desk-scale preset;
    :meth:`full_scale` gives the full-size settings."""

    lr_g: float = 2e-4
    lr_h: float = 2e-4
    lr_n: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    epochs: int = 20
    decay_epoch: int | None = None  # None -> epochs // 2
    tau: float = L.DEFAULT_TAU
    num_patches: int = 64
    num_negatives: int = 256
    nce_reduction: str = "mean"
    lambda1: float = 1.0
    lambda2: float = 1.0
    # diversity on unit negatives, L1 sum / M**0.65; see README "Diversity term"
    div_on: str = "unit"
    div_dim_power: float = 0.65
    seed: int = 0
    # architecture
    image_size: int = 64
    ngf: int = 16
    n_down: int = 2
    n_blocks: int = 2
    tap_layers: tuple = (1, 5, 9, 11)
    norm: str = "instance"
    embed_dim: int = 256
    rep_hidden: int = 256
    z_dim: int = 32
    neg_hidden: int = 256
    neg_residual: bool = True  # negatives are ctx + MLP([ctx, z])
    ndf: int = 32
    d_layers: int = 3
    # ablations
    use_neg_generator: bool = True
    use_diversity_loss: bool = True
    neg_source: str = "in_image"
    # bookkeeping
    dtype: str = "float32"
    debug: bool = False
    log_every: int = 1
    checkpoint_every: int = 0  # epochs; 0 -> final only
    hardness_every: int = 0

    def __post_init__(self):
        self.tap_layers = tuple(int(t) for t in self.tap_layers)

    def validate(self):
        from negcut.errors import ConfigError

        for name in ("lr_g", "lr_h", "lr_n", "lr_d"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "learning rates must be non-negative")
        if not self.tau > 0:
            raise ConfigError("tau", "must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs", "must be >= 1")
        if not 0 <= self.decay_start <= self.epochs:
            raise ConfigError("decay_epoch", f"must lie in [0, epochs={self.epochs}]")
        for name in ("batch_size", "num_patches", "num_negatives"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1/lambda2", "must be non-negative")
        if self.div_on not in ("raw", "unit"):
            raise ConfigError("div_on", "must be 'raw' or 'unit'")
        if not self.div_dim_power >= 0:
            raise ConfigError("div_dim_power", "must be non-negative")
        if self.neg_source not in NEG_SOURCES:
            raise ConfigError("neg_source", f"must be one of {NEG_SOURCES}")
        if self.nce_reduction not in ("mean", "sum"):
            raise ConfigError("nce_reduction", "must be 'mean' or 'sum'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype", "must be float32 or float64")
        if self.image_size % (2 ** self.n_down):
            raise ConfigError("image_size", f"must be divisible by {2 ** self.n_down}")
        try:
            self.network_specs()
        except InvalidInputError as e:
            raise ConfigError("tap_layers", str(e)) from e
        return self

    @property
    def decay_start(self):
        return self.epochs // 2 if self.decay_epoch is None else self.decay_epoch

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def negative_mode(self):
        return "generator" if self.use_neg_generator else self.neg_source

    @property
    def weights(self):
        return L.LossWeights(self.lambda1, self.lambda2 if self.use_diversity_loss else 0.0)

    def network_specs(self) -> NetworkSpecs:
        kind = {"generator": "mlp", "learned": "learned", "in_image": "none"}[self.negative_mode]
        return NetworkSpecs(
            generator=GeneratorSpec(
                ngf=self.ngf, n_down=self.n_down, n_blocks=self.n_blocks, tap_layers=self.tap_layers, norm=self.norm
            ),
            repnet=RepNetSpec(hidden=self.rep_hidden, out_dim=self.embed_dim),
            neggen=NegGenSpec(z_dim=self.z_dim, hidden=self.neg_hidden, kind=kind, bank_size=self.num_negatives,
                               residual=self.neg_residual),
            discriminator=DiscriminatorSpec(ndf=self.ndf, n_down=self.d_layers, norm=self.norm),
        )

    def to_dict(self):
        d = asdict(self)
        d["tap_layers"] = list(self.tap_layers)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            from negcut.errors import ConfigError

            raise ConfigError(sorted(unknown)[0], "unknown training option")
        return cls(**d)

    @classmethod
    def full_scale(cls, **overrides):
        base = dict(
            epochs=400, decay_epoch=200, image_size=256, ngf=64, n_blocks=9,
            tap_layers=(1, 5, 9, 13, 17), num_patches=256, ndf=64,
        )
        base.update(overrides)
        return cls(**base)


def lr_schedule(epoch, config: TrainConfig):
    """Learning-rate multiplier: 1 until the decay start, then linear to 0 at ``epochs``."""
    total, start = config.epochs, config.decay_start
    if not 0 <= epoch < total:
        raise InvalidInputError(f"epoch {epoch} outside [0, {total})")
    if epoch < start:
        return 1.0
    return 1.0 - (epoch - start) / (total - start)


@dataclass
class StepReport:
    step: int
    epoch: int
    losses: L.LossBundle
    ad_cont_before: float
    hardness: list[dict]
    update_norms: dict[str, float]
    wall_time: float

    def record(self):
        """Deterministic metrics-log record (wall time excluded)."""
        rec = {"step": self.step, "epoch": self.epoch, **self.losses.scalars(), "ad_cont_before": self.ad_cont_before}
        for i, h in enumerate(self.hardness):
            for k, v in h.items():
                rec[f"{k}_l{i}"] = v
        for k, v in self.update_norms.items():
            rec[f"update_{k}"] = v
        return rec


class NegCut:
    """Networks, per-partition Adam optimizers and the step RNG."""

    def __init__(self, config: TrainConfig, nets: NegCutNets | None = None):
        self.config = config
        self.nets = nets if nets is not None else build_networks(
            config.network_specs(), seed=config.seed, dtype=config.torch_dtype
        )
        self.partition = self.nets.partition()
        lrs = {"theta_G": config.lr_g, "theta_H": config.lr_h, "theta_N": config.lr_n, "theta_D": config.lr_d}
        self.base_lr = lrs
        self.optimizers = {}
        for name, params in self.partition.items():
            if params:
                self.optimizers[name] = torch.optim.Adam(
                    list(params.values()), lr=lrs[name], betas=(config.beta1, config.beta2)
                )
        self.rng = torch.Generator().manual_seed(config.seed + 1)
        self.step = 0
        self.epoch = 0

    def set_lr_scale(self, scale):
        for name, opt in self.optimizers.items():
            for group in opt.param_groups:
                group["lr"] = self.base_lr[name] * scale

    def training_state(self):
        return {
            "optimizers": {k: v.state_dict() for k, v in self.optimizers.items()},
            "rng_state": self.rng.get_state(),
            "step": self.step,
            "epoch": self.epoch,
            "train_config": self.config.to_dict(),
        }

    def save(self, path, **extra):
        return save_checkpoint(path, self.nets, {**self.training_state(), **extra})

    @classmethod
    def load(cls, path, config: TrainConfig | None = None):
        nets, payload = load_checkpoint(path)
        config = config or TrainConfig.from_dict(payload["train_config"])
        state = cls(config, nets=nets)
        for k, opt in state.optimizers.items():
            opt.load_state_dict(payload["optimizers"][k])
        state.rng.set_state(payload["rng_state"])
        state.step = payload["step"]
        state.epoch = payload["epoch"]
        return state


# ---------------------------------------------------------------------------
# phase building blocks


def forward_features(nets: NegCutNets, x, config: TrainConfig, rng=None, positions=None):
    """Translate ``x`` and build one :class:`EmbeddedPatchSet` per tap layer.

    Positions are drawn per layer from ``rng`` (shared by the images of the
    batch) unless given explicitly.
    """
    y, taps_x = nets.G(x)
    taps_y, _ = nets.G.encode(y)
    patch_sets, drawn = [], []
    for i, (fx, fy) in enumerate(zip(taps_x, taps_y)):
        emb_x = embed_patches(fx, nets.H[i])
        emb_y = embed_patches(fy, nets.H[i])
        h, w = emb_x.shape[-2:]
        pos = positions[i] if positions is not None else sample_positions(
            h, w, min(config.num_patches, h * w), rng, layer=i
        )
        drawn.append(pos)
        patch_sets.append(build_patch_set(emb_y, emb_x, pos))
    return y, patch_sets, drawn


def draw_step_noise(nets: NegCutNets, config: TrainConfig, batch, rng=None):
    if config.negative_mode == "in_image":
        return None
    z_dim = nets.N[0].z_dim
    return [draw_noise((batch,), config.num_negatives, z_dim, rng, dtype=config.torch_dtype) for _ in nets.N]


def negative_banks(nets: NegCutNets, patch_sets, noises, detach_context=True):
    banks = []
    for i, ps in enumerate(patch_sets):
        ctx = ps.ctx_mean.detach() if detach_context else ps.ctx_mean
        banks.append(build_negative_bank(ctx, nets.N[i], noises=noises[i], layer=i))
    return banks


def adversarial_contrastive(patch_sets, k_negs, config: TrainConfig, detach_queries=False):
    """Sum over layers of InfoNCE; mean over sampled positions and over images."""
    batches = []
    for ps, k_neg in zip(patch_sets, k_negs):
        q, k_pos = (ps.q.detach(), ps.k_pos.detach()) if detach_queries else (ps.q, ps.k_pos)
        if k_neg is None:
            k_neg = in_image_negatives(k_pos)
        batches.append(L.ContrastiveBatch(q, k_pos, k_neg, config.tau))
    return L.patch_nce(batches, reduction=config.nce_reduction)


def diversity_term(banks, config):
    total = banks[0].raw.sum() * 0.0
    for b in banks:
        v = b.raw if config.div_on == "raw" else b.k_neg
        total = total + L.bank_diversity_loss(v, config.div_dim_power)
    return total


def discriminator_loss(nets, y_real, y_fake):
    return L.lsgan_d(L.GanScores(real_scores=nets.D(y_real), fake_scores=nets.D(y_fake)))


def negative_phase_loss(nets, patch_sets, noises, config: TrainConfig):
    """``(L_N, L_AdCont, L_div, banks)``; queries, positives and contexts are constants here."""
    banks = negative_banks(nets, patch_sets, noises, detach_context=True)
    ad = adversarial_contrastive(patch_sets, [b.k_neg for b in banks], config, detach_queries=True)
    lam2 = config.weights.lambda2
    div = diversity_term(banks, config) if config.negative_mode == "generator" and lam2 > 0 else ad * 0.0
    return -ad + lam2 * div, ad, div, banks


def encoder_phase_loss(nets, y, patch_sets, k_negs, config: TrainConfig):
    """``(L_G, L_AdCont, L_gan^G)``; ``k_negs`` are constants (None -> in-image negatives)."""
    k_negs = [None if k is None else k.detach() for k in k_negs]
    ad = adversarial_contrastive(patch_sets, k_negs, config)
    gan_g = L.lsgan_g(L.GanScores(fake_scores=nets.D(y)))
    return ad + config.lambda1 * gan_g, ad, gan_g


def mean_pairwise_l1(raw):
    """Mean L1 distance over distinct pairs of raw negatives ``(..., N, M)``."""
    n = raw.shape[-2]
    if n < 2:
        return 0.0
    d = torch.cdist(raw.detach().double(), raw.detach().double(), p=1)
    return float(d.sum(dim=(-1, -2)).mean() / (n * (n - 1)))


def _check_finite(name, value, report_so_far):
    v = float(torch.as_tensor(value).detach())
    if not math.isfinite(v):
        raise TrainingAborted(f"non-finite {name} ({v}) at step {report_so_far}")


def _check_unit(patch_sets, banks):
    for ps in patch_sets:
        for t in (ps.q, ps.k_pos):
            if not torch.allclose(t.norm(dim=-1), torch.ones((), dtype=t.dtype), atol=1e-6):
                raise InvariantError("non-unit query/positive vector")
    for b in banks or []:
        if not torch.allclose(b.k_neg.norm(dim=-1), torch.ones((), dtype=b.k_neg.dtype), atol=1e-6):
            raise InvariantError("non-unit negative vector")


def _zero_grads(nets):
    for p in nets.parameters():
        p.grad = None


PhaseHook = Callable[[str, "NegCut"], None]


def train_step(x, y_real, state: NegCut, hook: PhaseHook | None = None) -> StepReport:
    """One full NEGCUT update on a batch of source images ``x`` and target images ``y_real``.

    ``hook(phase, state)`` is called after each of "forward", "D", "N", "encoder".
    """
    cfg, nets = state.config, state.nets
    t0 = time.perf_counter()
    dtype = cfg.torch_dtype
    x, y_real = x.to(dtype), y_real.to(dtype)
    before = state.partition.snapshot()
    mode = cfg.negative_mode

    # (1) forward
    y, patch_sets, _ = forward_features(nets, x, cfg, state.rng)
    noises = draw_step_noise(nets, cfg, x.shape[0], state.rng)
    if hook:
        hook("forward", state)

    # (2) discriminator
    _zero_grads(nets)
    gan_d = discriminator_loss(nets, y_real, y.detach())
    _check_finite("gan_d", gan_d, state.step)
    gan_d.backward()
    state.optimizers["theta_D"].step()
    if hook:
        hook("D", state)

    # (3) negative generator: ascend L_AdCont (descend L_N)
    if mode != "in_image":
        _zero_grads(nets)
        loss_n, ad_before, div, _ = negative_phase_loss(nets, patch_sets, noises, cfg)
        _check_finite("L_N", loss_n, state.step)
        loss_n.backward()
        state.optimizers["theta_N"].step()
        with torch.no_grad():
            banks = negative_banks(nets, patch_sets, noises)
        k_negs = [b.k_neg for b in banks]
    else:
        banks = None
        k_negs = [None] * len(patch_sets)
        with torch.no_grad():
            ad_before = adversarial_contrastive(patch_sets, k_negs, cfg)
        div = ad_before * 0.0
    if hook:
        hook("N", state)

    # (4) encoder side: image generator + representation networks
    _zero_grads(nets)
    for p in nets.D.parameters():
        p.requires_grad_(False)
    try:
        loss_g, ad, gan_g = encoder_phase_loss(nets, y, patch_sets, k_negs, cfg)
        _check_finite("L_G", loss_g, state.step)
        loss_g.backward()
    finally:
        for p in nets.D.parameters():
            p.requires_grad_(True)
    state.optimizers["theta_G"].step()
    state.optimizers["theta_H"].step()
    _zero_grads(nets)
    if hook:
        hook("encoder", state)

    if cfg.debug:
        _check_unit(patch_sets, banks)
    state.partition.check(nets)

    bundle = L.assemble_losses(ad.detach(), div.detach(), gan_g.detach(), cfg.weights, gan_d=gan_d.detach())
    hardness = []
    for i, ps in enumerate(patch_sets):
        h = {"hardness_rand_mean": in_image_hardness(ps).mean if ps.q.shape[-2] > 1 else float("nan")}
        if banks is not None:
            hs = hardness_stats(ps, banks[i])
            h.update(hardness_gen_mean=hs.mean, hardness_gen_std=hs.std, neg_l1=mean_pairwise_l1(banks[i].raw))
        hardness.append(h)
    after = state.partition.snapshot()
    update_norms = {}
    for name in PARTITIONS:
        sq = sum(float(((after[name][k] - before[name][k]).double() ** 2).sum()) for k in before[name])
        update_norms[name.replace("theta_", "")] = math.sqrt(sq)

    report = StepReport(
        step=state.step,
        epoch=state.epoch,
        losses=bundle,
        ad_cont_before=float(ad_before.detach()),
        hardness=hardness,
        update_norms=update_norms,
        wall_time=time.perf_counter() - t0,
    )
    for k, v in report.losses.scalars().items():
        _check_finite(k, v, state.step)
    state.step += 1
    return report


# ---------------------------------------------------------------------------
# probes


@torch.no_grad()
def probe_hardness(state: NegCut, images, seed=0):
    """Mean query-negative cosine of generated vs in-image negatives per layer.

    Uses its own RNG, so probing never perturbs training randomness.
    """
    cfg, nets = state.config, state.nets
    rng = torch.Generator().manual_seed(seed)
    gen = [[] for _ in cfg.tap_layers]
    rand = [[] for _ in cfg.tap_layers]
    l1 = [[] for _ in cfg.tap_layers]
    for img in images:
        x = img.unsqueeze(0).to(cfg.torch_dtype)
        _, patch_sets, _ = forward_features(nets, x, cfg, rng)
        noises = draw_step_noise(nets, cfg, 1, rng)
        banks = negative_banks(nets, patch_sets, noises) if noises is not None else None
        for i, ps in enumerate(patch_sets):
            rand[i].append(in_image_hardness(ps).values)
            if banks is not None:
                gen[i].append(hardness_stats(ps, banks[i]).values)
                l1[i].append(mean_pairwise_l1(banks[i].raw))
    out = []
    for i in range(len(cfg.tap_layers)):
        rec = {"rand_mean": float(np.concatenate(rand[i]).mean())}
        if gen[i]:
            rec["gen_mean"] = float(np.concatenate(gen[i]).mean())
            rec["neg_l1"] = float(np.mean(l1[i]))
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    state: NegCut
    reports: list[StepReport] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    metrics_path: Path | None = None


def epoch_order(n, seed, epoch, domain):
    return np.random.default_rng([seed, epoch, domain]).permutation(n)


def _write_nan_dump(out_dir, reports, message):
    path = Path(out_dir) / "nan_dump.json"
    path.write_text(json.dumps({"error": message, "history": [r.record() for r in reports]}, indent=1))
    return path


def train_loop(
    dataset,
    config: TrainConfig,
    out_dir=None,
    resume_from=None,
    max_steps=None,
    stop_after_epoch=None,
    keep_reports=False,
) -> TrainResult:
    """Train on an :class:`~negcut.data.UnpairedDataset`.

    Domains are shuffled independently every epoch with a generator derived from
    ``(seed, epoch, domain)``, so a resumed run sees the same order as an
    uninterrupted one.
    """
    config.validate()
    if len(dataset.domain_a) == 0 or len(dataset.domain_b) == 0:
        raise InvalidInputError("both domains need at least one image")
    state = NegCut.load(resume_from, config) if resume_from else NegCut(config)
    out_dir = Path(out_dir) if out_dir else None
    result = TrainResult(state=state)
    metrics_f = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.metrics_path = out_dir / "metrics.jsonl"
        metrics_f = open(result.metrics_path, "a" if resume_from else "w")
    history = []
    bs = config.batch_size
    n_a, n_b = len(dataset.domain_a), len(dataset.domain_b)
    last_epoch = config.epochs if stop_after_epoch is None else min(config.epochs, stop_after_epoch)
    try:
        for epoch in range(state.epoch, last_epoch):
            state.epoch = epoch
            state.set_lr_scale(lr_schedule(epoch, config))
            order_a = epoch_order(n_a, config.seed, epoch, 0)
            order_b = epoch_order(n_b, config.seed, epoch, 1)
            for i in range(0, n_a, bs):
                if max_steps is not None and state.step >= max_steps:
                    break
                ia = order_a[i:i + bs]
                ib = order_b[np.arange(i, i + len(ia)) % n_b]
                x = dataset.domain_a[torch.as_tensor(ia)]
                y_real = dataset.domain_b[torch.as_tensor(ib)]
                try:
                    report = train_step(x, y_real, state)
                except TrainingAborted as e:
                    if out_dir:
                        e.dump_path = _write_nan_dump(out_dir, history, str(e))
                    raise
                history.append(report)
                if keep_reports:
                    result.reports.append(report)
                if metrics_f and report.step % config.log_every == 0:
                    metrics_f.write(json.dumps(report.record()) + "\n")
                    metrics_f.flush()
            state.epoch = epoch + 1
            done = state.epoch == config.epochs or (max_steps is not None and state.step >= max_steps)
            periodic = config.checkpoint_every and state.epoch % config.checkpoint_every == 0
            if out_dir and (done or periodic or state.epoch == last_epoch):
                path = out_dir / "checkpoints" / f"epoch_{state.epoch:04d}.pt"
                result.checkpoints.append(state.save(path))
            hard = config.hardness_every and state.epoch % config.hardness_every == 0
            if out_dir and (done or hard):
                write_hardness_histograms(state, dataset.domain_a[:1], out_dir / "hardness" / f"epoch_{state.epoch:04d}")
            if done:
                break
    finally:
        if metrics_f:
            metrics_f.close()
    return result


@torch.no_grad()
def collect_hardness(state: NegCut, image, seed=0):
    """Per-layer (generated, in-image) :class:`HardnessStats` for a single image."""
    cfg, nets = state.config, state.nets
    rng = torch.Generator().manual_seed(seed)
    x = image.unsqueeze(0).to(cfg.torch_dtype) if image.dim() == 3 else image.to(cfg.torch_dtype)
    _, patch_sets, _ = forward_features(nets, x, cfg, rng)
    noises = draw_step_noise(nets, cfg, x.shape[0], rng)
    banks = negative_banks(nets, patch_sets, noises) if noises is not None else None
    out = []
    for i, ps in enumerate(patch_sets):
        gen = hardness_stats(ps, banks[i]) if banks is not None else None
        out.append((gen, in_image_hardness(ps)))
    return out


def write_hardness_histograms(state: NegCut, images, stem_dir):
    stem_dir = Path(stem_dir)
    for i, (gen, rand) in enumerate(collect_hardness(state, images[0])):
        if gen is not None:
            gen.save(stem_dir / f"layer{i}_generated")
        rand.save(stem_dir / f"layer{i}_in_image")
