"""Shared fixtures for the training checks: tiny float64 models, phase-gradient
capture, a finite-difference replay of one step, and adversarial-direction probes."""
import copy

import numpy as np
import torch

from negcut import losses as L
from negcut.data import SynthConfig, synth_dataset_in_memory
from negcut.networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    NegGenSpec,
    NetworkSpecs,
    RepNetSpec,
    build_networks,
)
from negcut.training import (
    NegCut,
    TrainConfig,
    adversarial_contrastive,
    diversity_term,
    draw_step_noise,
    forward_features,
    negative_banks,
    train_step,
)

TINY = dict(
    dtype="float64", image_size=8, ngf=2, n_down=1, n_blocks=1, tap_layers=(1, 4), embed_dim=3,
    rep_hidden=4, z_dim=2, neg_hidden=4, num_patches=3, num_negatives=2, ndf=2, d_layers=1,
    tau=0.5,  # keeps the softmax out of saturation with the enlarged weights below
)


def tiny_config(**kw):
    return TrainConfig(**{**TINY, **kw})


def tiny_state(seed=0, **kw):
    """A float64 model small enough for whole-step finite differences."""
    cfg = tiny_config(seed=seed, **kw)
    specs = cfg.network_specs()
    specs = NetworkSpecs(
        generator=GeneratorSpec(
            ngf=cfg.ngf, n_down=cfg.n_down, n_blocks=cfg.n_blocks, tap_layers=cfg.tap_layers,
            norm=cfg.norm, stem_kernel=3,
        ),
        repnet=RepNetSpec(hidden=cfg.rep_hidden, out_dim=cfg.embed_dim),
        neggen=NegGenSpec(z_dim=cfg.z_dim, hidden=cfg.neg_hidden, kind=specs.neggen.kind,
                          bank_size=cfg.num_negatives, residual=cfg.neg_residual),
        discriminator=DiscriminatorSpec(ndf=cfg.ndf, n_down=cfg.d_layers, norm=cfg.norm),
    )
    nets = build_networks(specs, seed=seed, dtype=torch.float64)
    # larger weights than the 0.02 default keep every term well away from round-off
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for p in nets.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.4)
    return NegCut(cfg, nets=nets)


def toy_batch(seed=0, size=8, n=1):
    ds = synth_dataset_in_memory(SynthConfig(image_size=max(size, 8), n_a=n, n_b=n, seed=seed))
    a, b = ds.domain_a, ds.domain_b
    if size < 8:
        a, b = a[..., :size, :size], b[..., :size, :size]
    return a.double(), b.double()


def capture_phase_grads(state):
    """Wrap each optimizer so the gradients it consumes are recorded."""
    grads = {}
    for name, opt in state.optimizers.items():
        params = getattr(state.partition, name)
        orig = opt.step

        def step(*a, _orig=orig, _name=name, _params=params, **k):
            grads[_name] = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                            for n, p in _params.items()}
            return _orig(*a, **k)

        opt.step = step
    return grads


def _phase_snapshots(state):
    snaps = {}

    def hook(phase, st):
        snaps[phase] = copy.deepcopy(st.nets)

    return snaps, hook


def _fd(f, params, eps):
    """Central differences of scalar ``f()`` w.r.t. every entry of every tensor in ``params``."""
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = f()
                flat[i] = orig - eps
                fm = f()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * eps)
            out[name] = g
    return out


def step_gradient_check(state, x, y_real, eps=1e-6):
    """Run one ``train_step`` and compare the gradient each optimizer received
    with central differences of the loss that phase is meant to minimize.

    Returns ``{partition: relative error}`` with the error measured as
    ``max|analytic - fd| / max|fd|``.
    """
    cfg = state.config
    rng_state = state.rng.get_state()
    nets0 = copy.deepcopy(state.nets)
    grads = capture_phase_grads(state)
    snaps, hook = _phase_snapshots(state)
    train_step(x, y_real, state, hook=hook)

    replay = torch.Generator()
    replay.set_state(rng_state)
    with torch.no_grad():
        y0, ps0, positions = forward_features(nets0, x, cfg, replay)
        noises = draw_step_noise(nets0, cfg, x.shape[0], replay)
    errors = {}

    # discriminator: least-squares loss on real targets and the (fixed) translation
    d_net = copy.deepcopy(nets0)
    errors["theta_D"] = _compare(grads["theta_D"], _fd(
        lambda: L.lsgan_d(L.GanScores(d_net.D(y_real), d_net.D(y0))).item(),
        dict(d_net.D.named_parameters()), eps))

    # negative generator: queries, positives and contexts are constants
    n_net = copy.deepcopy(snaps["D"])

    def loss_n():
        banks = negative_banks(n_net, ps0, noises)
        ad = adversarial_contrastive(ps0, [b.k_neg for b in banks], cfg)
        div = diversity_term(banks, cfg) if cfg.weights.lambda2 > 0 else 0.0
        return (-ad + cfg.weights.lambda2 * div).item()

    errors["theta_N"] = _compare(grads["theta_N"], _fd(loss_n, dict(n_net.N.named_parameters()), eps))

    # encoder side: negatives come from the updated generator and are constants
    e_net = copy.deepcopy(snaps["N"])
    with torch.no_grad():
        k_negs = [b.k_neg for b in negative_banks(e_net, ps0, noises)]

    def loss_e():
        y, ps, _ = forward_features(e_net, x, cfg, positions=positions)
        ad = adversarial_contrastive(ps, k_negs, cfg)
        return (ad + cfg.lambda1 * L.lsgan_g(L.GanScores(fake_scores=e_net.D(y)))).item()

    errors["theta_G"] = _compare(grads["theta_G"], _fd(loss_e, dict(e_net.G.named_parameters()), eps))
    errors["theta_H"] = _compare(grads["theta_H"], _fd(loss_e, dict(e_net.H.named_parameters()), eps))
    return errors


def _compare(analytic, fd):
    a = torch.cat([analytic[k].reshape(-1) for k in fd])
    f = torch.cat([fd[k].reshape(-1) for k in fd])
    scale = f.abs().max().item()
    return (a - f).abs().max().item() / max(scale, 1e-12)


def adversarial_direction(state, x, y_real):
    """Change in the adversarial contrastive loss caused by the N update and by
    the representation-network update of one step, with positions and noise held fixed.

    Returns ``(delta_N, delta_H)``.
    """
    cfg = state.config
    rng_state = state.rng.get_state()
    nets0 = copy.deepcopy(state.nets)
    snaps, hook = _phase_snapshots(state)
    train_step(x, y_real, state, hook=hook)
    replay = torch.Generator()
    replay.set_state(rng_state)
    with torch.no_grad():
        _, ps0, positions = forward_features(nets0, x, cfg, replay)
        noises = draw_step_noise(nets0, cfg, x.shape[0], replay)
        before_n = [b.k_neg for b in negative_banks(nets0, ps0, noises)]
        after_n = [b.k_neg for b in negative_banks(snaps["N"], ps0, noises)]
        delta_n = (adversarial_contrastive(ps0, after_n, cfg) - adversarial_contrastive(ps0, before_n, cfg)).item()

        # swap in only the updated representation networks
        h_only = copy.deepcopy(snaps["N"])
        h_only.H.load_state_dict(snaps["encoder"].H.state_dict())
        _, ps_h, _ = forward_features(h_only, x, cfg, positions=positions)
        ad_before = adversarial_contrastive(ps0, after_n, cfg)
        delta_h = (adversarial_contrastive(ps_h, after_n, cfg) - ad_before).item()
    return delta_n, delta_h


def train_reports(dataset, cfg, steps):
    from negcut.training import train_loop

    return train_loop(dataset, cfg, max_steps=steps, keep_reports=True)


def mean_gap(probe):
    return float(np.mean([p["gen_mean"] - p["rand_mean"] for p in probe]))
