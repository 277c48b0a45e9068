"""Image generator, per-layer representation MLPs, negative generators and the
patch discriminator, plus parameter partitioning and checkpoint I/O."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from negcut.errors import InvalidInputError, InvariantError

PARTITIONS = ("theta_G", "theta_H", "theta_N", "theta_D")


@dataclass
class GeneratorSpec:
    """Residual encoder-decoder.

    Encoder layers are numbered over its flattened atomic operations, with the
    input image as layer 0::

        1 stem conv, 2 norm, 3 relu,
        (conv s2, norm, relu) per downsampling stage,
        one index per residual block.

    With ``n_down=2`` and 9 blocks the full-size taps 1, 5, 9, 13, 17 are the
    stem conv, the first down-stage norm, the second down-stage relu and
    residual blocks 4 and 8. The toy default (2 blocks) taps 1, 5, 9, 11.
    """

    in_channels: int = 3
    out_channels: int = 3
    ngf: int = 16
    n_down: int = 2
    n_blocks: int = 2
    tap_layers: tuple[int, ...] = (1, 5, 9, 11)
    norm: str = "instance"
    padding_mode: str = "reflect"
    stem_kernel: int = 7

    def __post_init__(self):
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        if not self.tap_layers:
            raise InvalidInputError("at least one tap layer is required")
        if any(b <= a for a, b in zip(self.tap_layers, self.tap_layers[1:])):
            raise InvalidInputError(f"tap_layers must be strictly increasing: {self.tap_layers}")
        if self.tap_layers[0] < 0 or self.tap_layers[-1] > self.n_encoder_layers:
            raise InvalidInputError(
                f"tap layers must lie in [0, {self.n_encoder_layers}], got {self.tap_layers}"
            )
        if self.norm not in ("instance", "none"):
            raise InvalidInputError(f"unknown norm {self.norm!r}")

    @property
    def n_encoder_layers(self):
        return 3 + 3 * self.n_down + self.n_blocks

    def layer_channels(self, index):
        if index == 0:
            return self.in_channels
        if index <= 3:
            return self.ngf
        stage = min((index - 4) // 3 + 1, self.n_down)
        return self.ngf * 2 ** stage

    def layer_stride(self, index):
        if index <= 3:
            return 1
        return 2 ** min((index - 4) // 3 + 1, self.n_down)

    def tap_channels(self):
        return [self.layer_channels(t) for t in self.tap_layers]

    @classmethod
    def full_scale(cls):
        return cls(ngf=64, n_down=2, n_blocks=9, tap_layers=(1, 5, 9, 13, 17))


@dataclass
class RepNetSpec:
    hidden: int = 256
    out_dim: int = 256


@dataclass
class NegGenSpec:
    """``kind="mlp"``: 3 affine layers on [context || noise].
    ``kind="learned"``: a free bank of ``bank_size`` vectors per layer, not
    conditioned on the image (the no-generator ablation)."""

    z_dim: int = 32
    hidden: int = 256
    kind: str = "mlp"
    bank_size: int = 256
    residual: bool = False  # add the context vector to the MLP output

    def __post_init__(self):
        if self.kind not in ("mlp", "learned", "none"):
            raise InvalidInputError(f"unknown negative generator kind {self.kind!r}")


@dataclass
class DiscriminatorSpec:
    in_channels: int = 3
    ndf: int = 32
    n_down: int = 3
    kernel: int = 4
    norm: str = "instance"

    def score_shape(self, h, w):
        pad = (self.kernel - 1) // 2
        strides = [2 if self.n_down > 0 else 1] + [2] * (self.n_down - 1) + [1, 1]
        for stride in strides:
            h = (h + 2 * pad - self.kernel) // stride + 1
            w = (w + 2 * pad - self.kernel) // stride + 1
        return h, w


def _norm(kind, channels):
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=False, track_running_stats=False)
    return nn.Identity()


class ResnetBlock(nn.Module):
    def __init__(self, dim, norm, padding_mode):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=1, padding_mode=padding_mode),
            _norm(norm, dim),
            nn.ReLU(True),
            nn.Conv2d(dim, dim, 3, padding=1, padding_mode=padding_mode),
            _norm(norm, dim),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        s = spec
        pad = s.stem_kernel // 2
        enc = [
            nn.Conv2d(s.in_channels, s.ngf, s.stem_kernel, padding=pad, padding_mode=s.padding_mode),
            _norm(s.norm, s.ngf),
            nn.ReLU(True),
        ]
        ch = s.ngf
        for _ in range(s.n_down):
            enc += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1, padding_mode=s.padding_mode),
                _norm(s.norm, ch * 2),
                nn.ReLU(True),
            ]
            ch *= 2
        enc += [ResnetBlock(ch, s.norm, s.padding_mode) for _ in range(s.n_blocks)]
        self.encoder = nn.ModuleList(enc)

        dec = []
        for _ in range(s.n_down):
            dec += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                _norm(s.norm, ch // 2),
                nn.ReLU(True),
            ]
            ch //= 2
        dec += [nn.Conv2d(ch, s.out_channels, s.stem_kernel, padding=pad, padding_mode=s.padding_mode), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def _check_input(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise InvalidInputError(
                f"expected (B, {self.spec.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        k = 2 ** self.spec.n_down
        if x.shape[2] % k or x.shape[3] % k:
            raise InvalidInputError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {k}")

    def encode(self, x, tap_layers=None, full=False):
        """Return the features at ``tap_layers`` (and the full encoding if ``full``)."""
        self._check_input(x)
        tap_layers = self.spec.tap_layers if tap_layers is None else tap_layers
        wanted = set(tap_layers)
        last = len(self.encoder) if full else max(tap_layers)
        taps = {}
        h = x
        if 0 in wanted:
            taps[0] = h
        for i, layer in enumerate(self.encoder[:last], start=1):
            h = layer(h)
            if i in wanted:
                taps[i] = h
        return [taps[t] for t in tap_layers], h

    def forward(self, x):
        taps, h = self.encode(x, full=True)
        return self.decoder(h), taps


class RepNet(nn.Module):
    """Two-layer MLP applied independently at every pixel."""

    def __init__(self, in_dim, spec: RepNetSpec):
        super().__init__()
        self.in_dim = in_dim
        self.mlp = nn.Sequential(nn.Linear(in_dim, spec.hidden), nn.ReLU(True), nn.Linear(spec.hidden, spec.out_dim))

    def forward(self, feats):
        """(..., C) vectors -> (..., M)."""
        return self.mlp(feats)


def embed_patches(tap, rep: RepNet):
    """Map a feature map ``(B, C, h, w)`` to an embedding map ``(B, M, h, w)``."""
    if tap.dim() != 4 or tap.shape[1] != rep.in_dim:
        raise InvalidInputError(f"tap shape {tuple(tap.shape)} does not match RepNet input {rep.in_dim}")
    return rep(tap.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class NegGen(nn.Module):
    def __init__(self, ctx_dim, spec: NegGenSpec):
        super().__init__()
        self.ctx_dim = ctx_dim
        self.z_dim = spec.z_dim
        self.residual = spec.residual
        self.mlp = nn.Sequential(
            nn.Linear(ctx_dim + spec.z_dim, spec.hidden),
            nn.ReLU(True),
            nn.Linear(spec.hidden, spec.hidden),
            nn.ReLU(True),
            nn.Linear(spec.hidden, ctx_dim),
        )

    def forward(self, ctx, z):
        """ctx ``(..., M)``, z ``(..., N, Z)`` -> raw negatives ``(..., N, M)``."""
        if ctx.shape[-1] != self.ctx_dim or z.shape[-1] != self.z_dim:
            raise InvalidInputError(
                f"expected ctx dim {self.ctx_dim} and noise dim {self.z_dim}, "
                f"got {ctx.shape[-1]} and {z.shape[-1]}"
            )
        if ctx.shape[:-1] != z.shape[:-2]:
            raise InvalidInputError("context and noise batch dimensions differ")
        ctx = ctx.unsqueeze(-2).expand(*z.shape[:-1], self.ctx_dim)
        out = self.mlp(torch.cat([ctx, z], dim=-1))
        return out + ctx if self.residual else out


def generate_negative(ctx, z, neg: NegGen):
    return neg(ctx, z)


class LearnedNegatives(nn.Module):
    """Free negative vectors updated directly in embedding space."""

    z_dim = 0

    def __init__(self, dim, bank_size):
        super().__init__()
        self.ctx_dim = dim
        self.bank = nn.Parameter(torch.empty(bank_size, dim))

    def forward(self, ctx, z):
        if z.shape[-2] != self.bank.shape[0]:
            raise InvalidInputError(f"learned bank holds {self.bank.shape[0]} vectors, asked for {z.shape[-2]}")
        return self.bank.expand(*ctx.shape[:-1], *self.bank.shape)


class Discriminator(nn.Module):
    """PatchGAN-style discriminator emitting a score map."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        k, pad = spec.kernel, (spec.kernel - 1) // 2
        first_stride = 2 if spec.n_down > 0 else 1
        layers = [nn.Conv2d(spec.in_channels, spec.ndf, k, stride=first_stride, padding=pad), nn.LeakyReLU(0.2, True)]
        ch = spec.ndf
        for i in range(1, spec.n_down):
            nxt = spec.ndf * min(2 ** i, 8)
            layers += [nn.Conv2d(ch, nxt, k, stride=2, padding=pad), _norm(spec.norm, nxt), nn.LeakyReLU(0.2, True)]
            ch = nxt
        nxt = spec.ndf * min(2 ** spec.n_down, 8)
        layers += [
            nn.Conv2d(ch, nxt, k, stride=1, padding=pad),
            _norm(spec.norm, nxt),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(nxt, 1, k, stride=1, padding=pad),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.spec.in_channels:
            raise InvalidInputError(f"expected (B, {self.spec.in_channels}, H, W), got {tuple(x.shape)}")
        return self.model(x)


def init_weights(module, std=0.02, generator=None):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, LearnedNegatives):
            nn.init.normal_(m.bank, 0.0, 1.0, generator=generator)


@dataclass
class NetworkSpecs:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    repnet: RepNetSpec = field(default_factory=RepNetSpec)
    neggen: NegGenSpec = field(default_factory=NegGenSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            generator=GeneratorSpec(**d["generator"]),
            repnet=RepNetSpec(**d["repnet"]),
            neggen=NegGenSpec(**d["neggen"]),
            discriminator=DiscriminatorSpec(**d["discriminator"]),
        )


class NegCutNets(nn.Module):
    def __init__(self, specs: NetworkSpecs):
        super().__init__()
        self.specs = specs
        self.G = Generator(specs.generator)
        m = specs.repnet.out_dim
        self.H = nn.ModuleList(RepNet(c, specs.repnet) for c in specs.generator.tap_channels())
        n_taps = len(specs.generator.tap_layers)
        if specs.neggen.kind == "mlp":
            self.N = nn.ModuleList(NegGen(m, specs.neggen) for _ in range(n_taps))
        elif specs.neggen.kind == "learned":
            self.N = nn.ModuleList(LearnedNegatives(m, specs.neggen.bank_size) for _ in range(n_taps))
        else:
            self.N = nn.ModuleList()
        self.D = Discriminator(specs.discriminator)

    def partition(self) -> "ParamPartition":
        return ParamPartition.from_nets(self)


def build_networks(specs: NetworkSpecs | None = None, seed=0, dtype=torch.float32) -> NegCutNets:
    specs = specs or NetworkSpecs()
    nets = NegCutNets(specs)
    g = torch.Generator().manual_seed(seed)
    for part in (nets.G, nets.H, nets.N, nets.D):
        init_weights(part, generator=g)
    nets.to(dtype)
    nets.partition()  # asserts disjointness
    return nets


@dataclass
class ParamPartition:
    theta_G: dict
    theta_H: dict
    theta_N: dict
    theta_D: dict

    @classmethod
    def from_nets(cls, nets: NegCutNets):
        part = cls(
            theta_G=dict(nets.G.named_parameters()),
            theta_H=dict(nets.H.named_parameters()),
            theta_N=dict(nets.N.named_parameters()),
            theta_D=dict(nets.D.named_parameters()),
        )
        part.check(nets)
        return part

    def items(self):
        return [(name, getattr(self, name)) for name in PARTITIONS]

    def check(self, nets=None):
        seen = {}
        for name, params in self.items():
            for p in params.values():
                if id(p) in seen:
                    raise InvariantError(f"parameter shared between {seen[id(p)]} and {name}")
                seen[id(p)] = name
        if nets is not None:
            everything = {id(p) for p in nets.parameters() if p.requires_grad}
            if everything != set(seen):
                raise InvariantError("parameter partition does not cover every trainable parameter")

    def snapshot(self):
        return {name: {k: v.detach().clone() for k, v in params.items()} for name, params in self.items()}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save_checkpoint(path, nets: NegCutNets, extra: dict | None = None):
    """Write all four parameter sets plus network specs; ``extra`` holds training state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "theta_G": nets.G.state_dict(),
        "theta_H": nets.H.state_dict(),
        "theta_N": nets.N.state_dict(),
        "theta_D": nets.D.state_dict(),
        "specs": nets.specs.to_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)
    manifest = {
        "file": path.name,
        "sha256": _sha256(path),
        "specs": nets.specs.to_dict(),
        "shapes": {
            name: {k: list(v.shape) for k, v in payload[name].items()} for name in PARTITIONS
        },
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path, verify=True):
    """Returns ``(nets, payload)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if verify and manifest_path(path).exists():
        expected = json.loads(manifest_path(path).read_text())["sha256"]
        if _sha256(path) != expected:
            raise InvalidInputError(f"checkpoint {path} does not match its manifest hash")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    specs = NetworkSpecs.from_dict(payload["specs"])
    nets = NegCutNets(specs)
    dtype = next(iter(payload["theta_G"].values())).dtype
    nets.to(dtype)
    nets.G.load_state_dict(payload["theta_G"])
    nets.H.load_state_dict(payload["theta_H"])
    nets.N.load_state_dict(payload["theta_N"])
    nets.D.load_state_dict(payload["theta_D"])
    return nets, payload
