"""Encoder-decoder generator mapping a fixed noise map to a frame and six flow fields.

The network is a DIP-style skip architecture: six stride-2 encoder blocks,
six nearest-upsampling decoder blocks, and a 4-channel 1x1 projection from the
input of every encoder block to the matching decoder block.  A 3D variant
replaces every convolution with its volumetric counterpart so that a stack of
consecutive noise maps can be processed as one volume.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PAPER_ENCODER_CHANNELS = (16, 16, 32, 32, 64, 64, 128, 128, 128, 128, 128, 128)

# Channel order of the flow head: offsets j - i for the six predicted flows.
FLOW_OFFSETS = (1, -1, 3, -3, 5, -5)

NUM_BLOCKS = 6
DOWNSAMPLE = 2 ** NUM_BLOCKS


class InvalidArchitecture(ValueError):
    pass


class InvalidInputSize(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    variant: str = "conv2d"
    encoder_channels: tuple[int, ...] = PAPER_ENCODER_CHANNELS
    encoder_kernel: int = 5
    decoder_kernel: int = 3
    skip_channels: int = 4
    skip_kernel: int = 1
    temporal_kernel: int = 3
    leaky_slope: float = 0.2
    flow_head: bool = True
    channel_scale: Fraction = field(default=Fraction(1))

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "channel_scale", Fraction(self.channel_scale).limit_denominator(1000))

    def validate(self) -> None:
        if self.variant not in ("conv2d", "conv3d"):
            raise InvalidArchitecture(f"invalid architecture: unknown variant {self.variant!r}")
        if len(self.encoder_channels) != 2 * NUM_BLOCKS:
            raise InvalidArchitecture(
                f"invalid architecture: expected {2 * NUM_BLOCKS} encoder layers, got {len(self.encoder_channels)}"
            )
        for a, b in zip(self.encoder_channels[::2], self.encoder_channels[1::2]):
            if a != b:
                raise InvalidArchitecture("invalid architecture: both layers of a block must share a width")
        if any(c <= 0 for c in self.encoder_channels) or self.channel_scale <= 0:
            raise InvalidArchitecture("invalid architecture: channel counts must be positive")
        for k in (self.encoder_kernel, self.decoder_kernel, self.skip_kernel, self.temporal_kernel):
            if k < 1 or k % 2 == 0:
                raise InvalidArchitecture("invalid architecture: kernel sizes must be odd and positive")
        if self.skip_channels < 0:
            raise InvalidArchitecture("invalid architecture: negative skip width")

    def widths(self) -> tuple[int, ...]:
        """Encoder widths after applying the channel scale factor."""
        return tuple(max(1, int(round(c * self.channel_scale))) for c in self.encoder_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_scale"] = str(self.channel_scale)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        d["channel_scale"] = Fraction(d["channel_scale"])
        d["encoder_channels"] = tuple(d["encoder_channels"])
        return cls(**d)


class GeneratorOutput(NamedTuple):
    image: torch.Tensor  # (B, 3, H, W), values in (0, 1)
    flows: torch.Tensor | None  # (B, 6, 2, H, W) ordered as FLOW_OFFSETS


def _conv(spec: GeneratorSpec, cin: int, cout: int, k: int, stride: int = 1, temporal: int | None = None) -> nn.Module:
    if spec.variant == "conv3d":
        kt = spec.temporal_kernel if temporal is None else temporal
        return nn.Conv3d(cin, cout, (kt, k, k), stride=(1, stride, stride), padding=(kt // 2, k // 2, k // 2))
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class _SafeBatchNorm:
    """Batch norm that normalizes with accumulated statistics when a batch
    holds a single value per channel (one frame at a 1x1 bottleneck)."""

    def forward(self, x):
        if self.training and x.numel() // x.shape[1] == 1:
            return F.batch_norm(
                x, self.running_mean, self.running_var, self.weight, self.bias, False, 0.0, self.eps
            )
        return super().forward(x)


class BatchNorm2d(_SafeBatchNorm, nn.BatchNorm2d):
    pass


class BatchNorm3d(_SafeBatchNorm, nn.BatchNorm3d):
    pass


def _norm(spec: GeneratorSpec, c: int) -> nn.Module:
    return BatchNorm3d(c) if spec.variant == "conv3d" else BatchNorm2d(c)


def _unit(spec, cin, cout, k, stride=1, temporal=None) -> nn.Sequential:
    return nn.Sequential(
        _conv(spec, cin, cout, k, stride, temporal),
        _norm(spec, cout),
        nn.LeakyReLU(spec.leaky_slope),
    )


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        widths = spec.widths()
        enc_w = widths[1::2]  # output width of each encoder block
        dec = tuple(reversed(widths))

        self.encoder = nn.ModuleList()
        self.skips = nn.ModuleList()
        cin = 1
        for b in range(NUM_BLOCKS):
            w = widths[2 * b]
            self.encoder.append(
                nn.Sequential(
                    _unit(spec, cin, w, spec.encoder_kernel, stride=2),
                    _unit(spec, w, widths[2 * b + 1], spec.encoder_kernel),
                )
            )
            if spec.skip_channels:
                self.skips.append(_unit(spec, cin, spec.skip_channels, spec.skip_kernel, temporal=1))
            cin = enc_w[b]

        self.decoder = nn.ModuleList()
        for b in range(NUM_BLOCKS):
            c1, c2 = dec[2 * b], dec[2 * b + 1]
            self.decoder.append(
                nn.Sequential(
                    _unit(spec, cin + spec.skip_channels, c1, spec.decoder_kernel),
                    _unit(spec, c1, c2, spec.decoder_kernel),
                )
            )
            cin = c2

        self.image_head = _conv(spec, cin, 3, 1, temporal=1)
        self.flow_head = _conv(spec, cin, 2 * len(FLOW_OFFSETS), 1, temporal=1) if spec.flow_head else None

    def _trunk(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        skips = []
        for b, block in enumerate(self.encoder):
            skips.append(self.skips[b](x) if self.spec.skip_channels else None)
            x = block(x)
        return x, skips

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self._trunk(x)[0]

    def forward(self, x: torch.Tensor) -> GeneratorOutput:
        _check_size(x)
        x, skips = self._trunk(x)
        scale = (1, 2, 2) if self.spec.variant == "conv3d" else (2, 2)
        for b, block in enumerate(self.decoder):
            x = F.interpolate(x, scale_factor=scale, mode="nearest")
            s = skips[NUM_BLOCKS - 1 - b]
            if s is not None:
                x = torch.cat([x, s], dim=1)
            x = block(x)
        image = torch.sigmoid(self.image_head(x))
        flows = None
        if self.flow_head is not None:
            f = self.flow_head(x)
            flows = f.unflatten(1, (len(FLOW_OFFSETS), 2))
        return GeneratorOutput(image, flows)


def _check_size(x: torch.Tensor) -> None:
    h, w = x.shape[-2:]
    if h % DOWNSAMPLE or w % DOWNSAMPLE or h == 0 or w == 0:
        raise InvalidInputSize(f"invalid input size: {h}x{w} is not divisible by {DOWNSAMPLE}")


def _lecun_init(model: nn.Module, generator: torch.Generator) -> None:
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator, dtype=m.weight.dtype) / math.sqrt(fan_in))
                m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            m.reset_parameters()
            m.reset_running_stats()


def build_generator(spec: GeneratorSpec, seed: int, dtype: torch.dtype = torch.float32) -> Generator:
    """Build a generator with fan-in scaled normal weights drawn from ``seed``."""
    model = Generator(spec).to(dtype)
    g = torch.Generator().manual_seed(int(seed))
    _lecun_init(model, g)
    model.seed = int(seed)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: Generator, noise: torch.Tensor, mode: str = "infer") -> GeneratorOutput:
    """Run the 2D generator on a batch of noise maps shaped (B, 1, H, W)."""
    if model.spec.variant != "conv2d":
        raise InvalidArchitecture("invalid architecture: forward expects the conv2d variant; use forward_3d")
    _set_mode(model, mode)
    if noise.dim() == 3:
        noise = noise.unsqueeze(0)
    if mode == "infer":
        with torch.no_grad():
            return model(noise)
    return model(noise)


def forward_3d(model: Generator, noise_batch: torch.Tensor, mode: str = "infer") -> GeneratorOutput:
    """Run the 3D generator on N consecutive noise maps (N, 1, H, W) as one depth-N volume.

    Returns images shaped (N, 3, H, W) like the 2D path.
    """
    if model.spec.variant != "conv3d":
        raise InvalidArchitecture("invalid architecture: forward_3d needs the conv3d variant")
    _set_mode(model, mode)
    vol = noise_batch.permute(1, 0, 2, 3).unsqueeze(0)  # (1, 1, N, H, W)
    with torch.set_grad_enabled(mode == "train"):
        out = model(vol)
    image = out.image[0].permute(1, 0, 2, 3)
    flows = None
    if out.flows is not None:
        flows = out.flows[0].permute(2, 0, 1, 3, 4)  # (6, 2, N, H, W) -> (N, 6, 2, H, W)
    return GeneratorOutput(image, flows)


def _set_mode(model: nn.Module, mode: str) -> None:
    if mode == "train":
        model.train()
    elif mode == "infer":
        model.eval()
    else:
        raise ValueError(f"unknown mode {mode!r}")


def recalibrate_batchnorm(model: Generator, noise: torch.Tensor) -> None:
    """Set the normalization statistics used at inference to the exact batch
    statistics of one training-mode pass over every frame of ``noise`` (T, 1, H, W).

    Training normalizes with biased per-batch statistics, while the running
    averages are unbiased and trail the weights.  On the few-pixel layers near
    the bottleneck the difference is large enough to change the output.
    Layers that see a single value per channel already normalize with their
    stored statistics and are left alone.
    """
    def capture(module, inputs, output):
        # runs after the module's own momentum update, so it has the last word
        x = inputs[0]
        n = x.numel() // x.shape[1]
        if n > 1:
            dims = [d for d in range(x.dim()) if d != 1]
            module.running_mean.copy_(x.mean(dims))
            module.running_var.copy_(x.var(dims, unbiased=False))

    hooks = [
        m.register_forward_hook(capture)
        for m in model.modules()
        if isinstance(m, nn.modules.batchnorm._BatchNorm) and m.track_running_stats
    ]
    model.train()
    try:
        with torch.no_grad():
            if model.spec.variant == "conv3d":
                model(noise.permute(1, 0, 2, 3).unsqueeze(0))
            else:
                model(noise)
    finally:
        for h in hooks:
            h.remove()
    model.eval()


def temporal_receptive_field(spec: GeneratorSpec) -> int:
    """Longest temporal extent seen by one output frame of the 3D variant.

    Every temporal-k convolution on the encoder-decoder trunk widens the
    receptive field by k - 1; skips and heads are temporally 1-wide.
    """
    trunk_layers = 2 * NUM_BLOCKS * 2
    return 1 + trunk_layers * (spec.temporal_kernel - 1)


# ---------------------------------------------------------------- noise maps


@dataclass
class NoiseMapSet:
    maps: torch.Tensor  # (T, 1, H, W)
    seed: int

    def __len__(self) -> int:
        return self.maps.shape[0]

    def __getitem__(self, idx):
        return self.maps[idx]


def make_noise_maps(T: int, H: int, W: int, seed: int, dtype: torch.dtype = torch.float32) -> NoiseMapSet:
    if T < 1:
        raise ValueError("need at least one frame")
    g = torch.Generator().manual_seed(int(seed))
    maps = torch.rand((T, 1, H, W), generator=g, dtype=torch.float64) * 0.1
    return NoiseMapSet(maps.to(dtype), int(seed))


# ---------------------------------------------------------------- analysis


def encoder_features(model: Generator, noise: torch.Tensor) -> torch.Tensor:
    """Bottleneck features (C, H/64, W/64) of one noise map in inference mode."""
    _check_size(noise)
    if noise.dim() == 3:
        noise = noise.unsqueeze(0)
    model.eval()
    with torch.no_grad():
        if model.spec.variant == "conv3d":
            vol = noise.permute(1, 0, 2, 3).unsqueeze(0)
            return model.encode(vol)[0].permute(1, 0, 2, 3)[0]
        return model.encode(noise)[0]


def cosine_similarity_grid(reference: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between a (C,) vector and every cell of a (C, h, w) grid."""
    ref = reference.reshape(-1, 1, 1).to(torch.float64)
    feats = features.to(torch.float64)
    dots = (feats * ref).sum(0)
    norms = feats.norm(dim=0) * ref.norm()
    sim = dots / norms.clamp_min(1e-12)
    return sim.clamp(-1.0, 1.0)


def feature_similarity_map(
    model: Generator,
    noise: NoiseMapSet,
    reference: tuple[int, tuple[int, int]],
    frames: Sequence[int],
) -> dict[int, np.ndarray]:
    """Per-frame cosine similarity of every latent cell to a reference cell.

    ``reference`` is ``(frame index, (row, col))`` with 0-based indices into
    the noise set and the latent grid.
    """
    ref_frame, (r, c) = reference
    if not 0 <= ref_frame < len(noise):
        raise IndexError(f"invalid reference: frame {ref_frame} out of range")
    ref_feats = encoder_features(model, noise[ref_frame])
    _, h, w = ref_feats.shape
    if not (0 <= r < h and 0 <= c < w):
        raise IndexError(f"invalid reference: cell ({r}, {c}) outside the {h}x{w} latent grid")
    vec = ref_feats[:, r, c]
    out = {}
    for f in frames:
        feats = ref_feats if f == ref_frame else encoder_features(model, noise[f])
        sim = cosine_similarity_grid(vec, feats)
        if f == ref_frame:
            sim[r, c] = 1.0
        out[f] = sim.numpy()
    return out


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: Generator, path: str | Path, **extra) -> None:
    """Atomically write spec, seed, weights, and normalization statistics."""
    path = Path(path)
    payload = {
        "spec": model.spec.to_dict(),
        "seed": getattr(model, "seed", None),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "state_dict": model.state_dict(),
        **extra,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[Generator, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    spec = GeneratorSpec.from_dict(payload["spec"])
    model = Generator(spec).to(getattr(torch, payload.get("dtype", "float32")))
    model.load_state_dict(payload["state_dict"])
    model.seed = payload.get("seed")
    model.eval()
    return model, payload
