"""Experiment drivers built on the trainer and the metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import metrics
from .config import TrainConfig
from .flow_ops import FlowProvider
from .trainer import composite_output, generate, train
from .video_io import MaskSequence, VideoSequence

log = logging.getLogger(__name__)


def partition_clips(T: int, k: int) -> list[range]:
    """Consecutive clips of length k (the last one may be shorter)."""
    if k < 1:
        raise ValueError("window length must be >= 1")
    return [range(s, min(s + k, T)) for s in range(0, T, k)]


@dataclass
class InpaintOutcome:
    generated: np.ndarray  # (T, H, W, 3)
    composite: np.ndarray  # (T, H, W, 3)
    flows: np.ndarray | None  # (T, 6, H, W, 2)


def inpaint(video: VideoSequence, masks: MaskSequence, config: TrainConfig, provider: FlowProvider | None, **kw) -> InpaintOutcome:
    """Train on one video and return generated and composited frames."""
    result = train(video, masks, config, provider, **kw)
    images, flows = generate(result)
    gen = images.permute(0, 2, 3, 1).numpy().astype(np.float32)
    comp = composite_output(gen, video.frames, masks.masks)
    fl = flows.permute(0, 1, 3, 4, 2).numpy() if flows is not None else None
    return InpaintOutcome(gen, comp, fl)


@dataclass
class WindowRow:
    k: int
    clips: int
    full_psnr: float
    full_ssim: float
    nonhole_psnr: float
    nonhole_ssim: float
    consistency_psnr: float | None
    consistency_ssim: float | None


def window_length_experiment(
    video: VideoSequence,
    masks: MaskSequence,
    k_values: Sequence[int],
    config: TrainConfig,
    provider: FlowProvider | None,
    ground_truth: np.ndarray | None = None,
    patch: int = 50,
    search: int = 20,
) -> list[WindowRow]:
    """Inpaint each length-k clip independently and score the reassembled video.

    Full-frame scores use the composited output; non-hole scores use the raw
    generated frames on the known region.  ``ground_truth`` defaults to the
    input video.
    """
    if not k_values:
        raise ValueError("no window lengths")
    T = video.T
    gt = video.frames if ground_truth is None else np.asarray(ground_truth)
    rows = []
    for k in k_values:
        if not 1 <= k <= T:
            raise ValueError(f"window length {k} outside [1, {T}]")
        gen = np.empty_like(video.frames)
        comp = np.empty_like(video.frames)
        clips = partition_clips(T, k)
        for clip in clips:
            sl = slice(clip.start, clip.stop)
            out = inpaint(VideoSequence(video.frames[sl]), MaskSequence(masks.masks[sl]), config, provider)
            gen[sl], comp[sl] = out.generated, out.composite
        full_p = [metrics.psnr(comp[t], gt[t]) for t in range(T)]
        full_s = [metrics.ssim(comp[t], gt[t]) for t in range(T)]
        known = masks.masks == 1
        nh_p = [metrics.masked_psnr(gen[t], gt[t], known[t]) for t in range(T)]
        nh_s = [metrics.masked_ssim(gen[t], gt[t], known[t]) for t in range(T)]
        tc = metrics.temporal_consistency(comp, masks.masks, patch, search) if T > 1 else (None, None)
        rows.append(
            WindowRow(
                k, len(clips),
                float(np.mean(full_p)), float(np.mean(full_s)),
                _mean(nh_p), _mean(nh_s),
                tc[0], tc[1],
            )
        )
        log.info("window k=%d: %s", k, rows[-1])
    return rows


def _mean(xs) -> float:
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else math.nan


def format_window_table(rows: Sequence[WindowRow]) -> str:
    head = "k\tclips\tfull_psnr\tfull_ssim\tnonhole_psnr\tnonhole_ssim\tconsistency_psnr\tconsistency_ssim"
    lines = [head]
    for r in rows:
        vals = [r.k, r.clips, r.full_psnr, r.full_ssim, r.nonhole_psnr, r.nonhole_ssim, r.consistency_psnr, r.consistency_ssim]
        lines.append("\t".join("NA" if v is None else (repr(v) if isinstance(v, float) else str(v)) for v in vals))
    return "\n".join(lines) + "\n"
