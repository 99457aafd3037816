"""Flow-dependent geometry: backward warping, occlusion checks and flow providers.

Flows are stored as (..., 2, H, W) tensors for computation, channel 0 being
the horizontal displacement u and channel 1 the vertical displacement v, in
pixels.  On disk and at the numpy boundary they are (H, W, 2) arrays.
"""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import uniform_filter

from .video_io import flow_filename, read_flo, write_flo

log = logging.getLogger(__name__)

OCCLUSION_ALPHA = 0.01
OCCLUSION_BETA = 0.5


class ShapeMismatch(ValueError):
    pass


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(x))


def hwc_to_chw(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(np.asarray(x), -1, 0)))


def chw_to_hwc(x: torch.Tensor) -> np.ndarray:
    return np.moveaxis(x.detach().cpu().numpy(), 0, -1)


def backward_warp(image: torch.Tensor, flow: torch.Tensor, border: str = "border") -> torch.Tensor:
    """Sample ``image`` at ``p + flow(p)`` with bilinear interpolation.

    ``image`` is (C, H, W) or (B, C, H, W); ``flow`` is (2, H, W) or
    (B, 2, H, W).  ``border`` is ``"border"`` (clamp to edge, default),
    ``"zeros"`` or ``"reflection"``.  Differentiable in both arguments.
    """
    image, flow = _as_tensor(image), _as_tensor(flow)
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    if flow.dim() == 3:
        flow = flow.unsqueeze(0)
    if flow.shape[1] != 2 or image.shape[-2:] != flow.shape[-2:] or flow.shape[0] not in (1, image.shape[0]):
        raise ShapeMismatch(f"shape mismatch: image {tuple(image.shape)} vs flow {tuple(flow.shape)}")
    flow = flow.to(image.dtype)
    b, _, h, w = image.shape
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=image.dtype), torch.arange(w, dtype=image.dtype), indexing="ij"
    )
    x = xs + flow[:, 0]
    y = ys + flow[:, 1]
    # align_corners=True maps -1/+1 onto the centers of the outer pixels
    gx = 2.0 * x / max(w - 1, 1) - 1.0
    gy = 2.0 * y / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1).expand(b, h, w, 2)
    out = F.grid_sample(image, grid, mode="bilinear", padding_mode=border, align_corners=True)
    return out[0] if squeeze else out


def forward_backward_occlusion(
    flow_ij: torch.Tensor,
    flow_ji: torch.Tensor,
    alpha: float = OCCLUSION_ALPHA,
    beta: float = OCCLUSION_BETA,
) -> torch.Tensor:
    """1 where the forward flow is confirmed by the backward flow, else 0.

    A pixel p is reliable when
    |F_ij(p) + F_ji(p + F_ij(p))|^2 <= alpha * (|F_ij(p)|^2 + |F_ji(p + F_ij(p))|^2) + beta.
    """
    flow_ij, flow_ji = _as_tensor(flow_ij), _as_tensor(flow_ji)
    if flow_ij.shape != flow_ji.shape:
        raise ShapeMismatch(f"shape mismatch: {tuple(flow_ij.shape)} vs {tuple(flow_ji.shape)}")
    back = backward_warp(flow_ji, flow_ij)
    residual = (flow_ij + back).pow(2).sum(-3)
    bound = alpha * (flow_ij.pow(2).sum(-3) + back.pow(2).sum(-3)) + beta
    return (residual <= bound).to(flow_ij.dtype)


def binarize(x: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    return (x >= threshold).to(x.dtype)


def reliable_flow_mask(mask_i: torch.Tensor, mask_j: torch.Tensor, flow_ij: torch.Tensor) -> torch.Tensor:
    """Known pixels of frame i whose flow target is also known in frame j."""
    mask_i, mask_j, flow_ij = _as_tensor(mask_i), _as_tensor(mask_j), _as_tensor(flow_ij)
    if mask_i.shape != mask_j.shape or mask_i.shape[-2:] != flow_ij.shape[-2:]:
        raise ShapeMismatch(
            f"shape mismatch: masks {tuple(mask_i.shape)}, {tuple(mask_j.shape)}, flow {tuple(flow_ij.shape)}"
        )
    warped = backward_warp(mask_j.unsqueeze(-3).to(flow_ij.dtype), flow_ij).squeeze(-3)
    return mask_i.to(flow_ij.dtype) * binarize(warped)


# ---------------------------------------------------------------- block matching


def _displacements(radius: int) -> list[tuple[int, int]]:
    """All (dx, dy) within +-radius, ordered by squared length, then row-major."""
    d = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(d, key=lambda t: t[0] * t[0] + t[1] * t[1])  # stable sort keeps row-major ties


def block_matching_flow(frame_i: np.ndarray, frame_j: np.ndarray, patch: int = 7, radius: int = 4) -> np.ndarray:
    """Exhaustive SSD block matching from frame i to frame j.

    Frames are (H, W) or (H, W, C) arrays.  Returns an (H, W, 2) float32 flow.
    Samples outside frame j are clamped to the edge.  Ties go to the shortest
    displacement, then to row-major order over (dy, dx).
    """
    if patch < 1 or patch % 2 == 0:
        raise ValueError("patch must be odd")
    if radius < 1:
        raise ValueError("radius must be >= 1")
    a = np.asarray(frame_i, dtype=np.float64)
    b = np.asarray(frame_j, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    r = radius
    padded = np.pad(b, ((r, r), (r, r), (0, 0)), mode="edge")

    best = np.full((h, w), np.inf)
    flow = np.zeros((h, w, 2), dtype=np.float32)
    for dx, dy in _displacements(r):
        shifted = padded[r + dy:r + dy + h, r + dx:r + dx + w]
        sq = ((a - shifted) ** 2).sum(-1)
        ssd = uniform_filter(sq, size=patch, mode="nearest")
        better = ssd < best
        best = np.where(better, ssd, best)
        flow[better] = (dx, dy)
    return flow


# ---------------------------------------------------------------- providers


class FlowProvider(Protocol):
    """Estimates the forward and backward flow between two frames."""

    provider_id: str

    def estimate(self, frame_i: np.ndarray, frame_j: np.ndarray, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
        ...


class BlockMatchingProvider:
    """Self-contained provider; needs no external flow network."""

    def __init__(self, patch: int = 7, radius: int = 12):
        self.patch = patch
        self.radius = radius
        self.provider_id = f"block-match-p{patch}-r{radius}"

    def estimate(self, frame_i, frame_j, i=None, j=None):
        return (
            block_matching_flow(frame_i, frame_j, self.patch, self.radius),
            block_matching_flow(frame_j, frame_i, self.patch, self.radius),
        )


class PrecomputedProvider:
    """Reads flows produced by an external estimator from ``.flo`` files.

    The directory holds ``flow_{i:04d}_{j:04d}.flo`` with 1-based indices,
    the same naming the trainer uses for its own outputs.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.provider_id = f"precomputed-{self.directory.resolve()}"

    def estimate(self, frame_i, frame_j, i: int, j: int):
        fwd = read_flo(self.directory / flow_filename(i + 1, j + 1))
        bwd = read_flo(self.directory / flow_filename(j + 1, i + 1))
        return fwd, bwd


def make_provider(name: str) -> FlowProvider:
    """``block-match`` or ``block-match:<patch>:<radius>`` or ``precomputed:<dir>``."""
    if name.startswith("precomputed:"):
        return PrecomputedProvider(name.split(":", 1)[1])
    if name == "block-match" or name.startswith("block-match:"):
        parts = name.split(":")[1:]
        kw = {}
        if parts:
            kw["patch"] = int(parts[0])
        if len(parts) > 1:
            kw["radius"] = int(parts[1])
        return BlockMatchingProvider(**kw)
    raise ValueError(f"unknown flow provider {name!r}")


def estimate_pair(
    provider: FlowProvider,
    frames: np.ndarray,
    i: int,
    j: int,
    cache_dir: str | Path | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward/backward flow between frames i and j (0-based), cached on disk if asked."""
    if cache_dir is None:
        return provider.estimate(frames[i], frames[j], i, j)
    key = hashlib.sha1(provider.provider_id.encode()).hexdigest()[:12]
    d = Path(cache_dir) / key
    d.mkdir(parents=True, exist_ok=True)
    fp, bp = d / flow_filename(i + 1, j + 1), d / flow_filename(j + 1, i + 1)
    if fp.exists() and bp.exists():
        return read_flo(fp), read_flo(bp)
    fwd, bwd = provider.estimate(frames[i], frames[j], i, j)
    for arr, p in ((fwd, fp), (bwd, bp)):
        tmp = p.with_name(p.name + ".tmp")
        write_flo(arr, tmp)
        tmp.replace(p)
    return fwd, bwd
