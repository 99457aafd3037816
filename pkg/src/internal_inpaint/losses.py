"""Mask-gated loss terms and their weighted sum.

Every squared norm is normalized by the number of elements of its operand
(a mean, not a sum), so the default weights carry over between resolutions.
Tensors are channel-first: frames (..., 3, H, W), flows (..., 2, H, W),
masks (..., H, W).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import torch
import torch.nn.functional as F

from .flow_ops import ShapeMismatch, backward_warp

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss in term {term!r}: {value}")
        self.term = term
        self.value = value


class ExtractorUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    image: float = 1.0
    flow: float = 0.1
    consistency: float = 1.0
    perceptual: float = 0.01

    def __post_init__(self):
        for k, v in self.as_dict().items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and non-negative, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {"image": self.image, "flow": self.flow, "consistency": self.consistency, "perceptual": self.perceptual}


TERMS = ("image", "flow", "consistency", "perceptual")


def _check(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch in {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def _gate(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if mask.shape[-2:] != like.shape[-2:]:
        raise ShapeMismatch(f"shape mismatch: mask {tuple(mask.shape)} vs {tuple(like.shape)}")
    return mask.unsqueeze(-3).to(like.dtype)


def image_generation_loss(generated: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    _check(generated, target, "image loss")
    m = _gate(mask, generated)
    return (m * (generated - target)).pow(2).mean()


def flow_generation_loss(
    generated: torch.Tensor, target: torch.Tensor, occlusion: torch.Tensor, reliable: torch.Tensor
) -> torch.Tensor:
    _check(generated, target, "flow loss")
    _check(occlusion, reliable, "flow loss gates")
    g = _gate(occlusion * reliable, generated)
    return (g * (generated - target)).pow(2).mean()


def consistency_loss(
    frame_i: torch.Tensor,
    frame_j: torch.Tensor,
    flow_ij: torch.Tensor,
    reliable: torch.Tensor,
    occlusion: torch.Tensor | None = None,
) -> torch.Tensor:
    """Penalize disagreement between frame i and frame j warped back by the generated flow,
    only where the flow is not reliable (holes).  ``occlusion`` optionally gates further."""
    _check(frame_i, frame_j, "consistency loss")
    if flow_ij.shape[-2:] != frame_i.shape[-2:]:
        raise ShapeMismatch(f"shape mismatch: flow {tuple(flow_ij.shape)} vs frame {tuple(frame_i.shape)}")
    gate = 1.0 - reliable
    if occlusion is not None:
        gate = gate * occlusion
    warped = backward_warp(frame_j, flow_ij)
    return (_gate(gate, frame_i) * (warped - frame_i)).pow(2).mean()


class FeatureExtractor(Protocol):
    """Fixed feature network returning one feature map per loss layer."""

    def extract(self, image: torch.Tensor) -> Sequence[torch.Tensor]:
        ...


class IdentityExtractor:
    """Single-layer extractor returning its input; for tests."""

    def extract(self, image):
        return [image]


class VGG16Extractor:
    """relu1_2, relu2_2 and relu3_3 of an ImageNet-pretrained VGG16.

    Weights are read from ``weights_path`` if given, otherwise fetched through
    torch.hub (which reuses its local cache when the file is already there).
    """

    LAYER_ENDS = (4, 9, 16)  # indices after relu1_2, relu2_2, relu3_3 in vgg16.features

    def __init__(self, weights_path: str | None = None):
        try:
            import torchvision
        except ImportError as e:
            raise ExtractorUnavailable("extractor unavailable: torchvision is not installed") from e
        net = torchvision.models.vgg16(weights=None)
        try:
            if weights_path is not None:
                state = torch.load(weights_path, map_location="cpu", weights_only=True)
            else:
                weights = torchvision.models.VGG16_Weights.IMAGENET1K_V1
                state = torch.hub.load_state_dict_from_url(weights.url, progress=False, check_hash=False)
        except Exception as e:
            raise ExtractorUnavailable(f"extractor unavailable: could not load VGG16 weights ({e})") from e
        net.load_state_dict(state)
        self.features = net.features[: self.LAYER_ENDS[-1]].eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.mean = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
        self.std = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)

    def extract(self, image):
        squeeze = image.dim() == 3
        x = image.unsqueeze(0) if squeeze else image
        self.features.to(x.dtype)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out, start = [], 0
        for end in self.LAYER_ENDS:
            x = self.features[start:end](x)
            out.append(x[0] if squeeze else x)
            start = end
        return out


def perceptual_loss(
    generated: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, extractor: FeatureExtractor | None
) -> torch.Tensor:
    """Sum over layers of the mask-weighted squared feature difference.

    The mask is resized bilinearly to each layer's resolution and used as a
    continuous weight.
    """
    _check(generated, target, "perceptual loss")
    if extractor is None:
        log.warning("perceptual loss requested without a feature extractor; term is zero")
        return generated.new_zeros(())
    try:
        feats_g = extractor.extract(generated)
        with torch.no_grad():
            feats_t = extractor.extract(target)
    except ExtractorUnavailable:
        raise
    except Exception as e:
        raise ExtractorUnavailable(f"extractor unavailable: {e}") from e
    total = generated.new_zeros(())
    m = mask.to(generated.dtype)
    for fg, ft in zip(feats_g, feats_t):
        size = fg.shape[-2:]
        if size == m.shape[-2:]:
            w = m
        else:
            flat = m.reshape(-1, 1, *m.shape[-2:])
            w = F.interpolate(flat, size=size, mode="bilinear", align_corners=False).reshape(*m.shape[:-2], *size)
        total = total + (_gate(w, fg) * (fg - ft)).pow(2).mean()
    return total


def total_loss(parts: dict[str, torch.Tensor | float], weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted sum of the available terms; missing terms count as zero."""
    w = weights.as_dict()
    total = None
    for term in TERMS:
        if term not in parts:
            continue
        v = parts[term]
        fv = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(fv):
            raise NonFiniteLoss(term, fv)
        contrib = w[term] * v
        total = contrib if total is None else total + contrib
    if total is None:
        return torch.zeros(())
    return total if isinstance(total, torch.Tensor) else torch.tensor(float(total))
