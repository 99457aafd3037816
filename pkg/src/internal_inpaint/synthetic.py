"""Synthetic test videos with known ground truth."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .video_io import MaskSequence, VideoSequence


def smooth_texture(height: int, width: int, rng: np.random.Generator, sigmas=(1.5, 4.0, 10.0)) -> np.ndarray:
    """Colored multi-scale noise texture in [0.05, 0.95], shape (H, W, 3)."""
    tex = np.zeros((height, width, 3))
    for s in sigmas:
        layer = gaussian_filter(rng.standard_normal((height, width, 3)), sigma=(s, s, 0), mode="wrap")
        tex += layer / (layer.std() + 1e-12)
    tex -= tex.min()
    tex /= tex.max()
    return 0.05 + 0.9 * tex


def translating_video(
    T: int = 16,
    size: tuple[int, int] = (64, 64),
    shift: tuple[int, int] = (2, 0),
    hole: int = 12,
    seed: int = 0,
) -> tuple[VideoSequence, MaskSequence]:
    """A textured background panning by ``shift`` (dx, dy) pixels per frame, with a
    static square hole of side ``hole`` in the middle (0 = hole in the masks).

    Content at frame t appears at ``p - shift`` in frame t+1, so the true flow
    from frame t to t+1 is ``-shift``.
    """
    H, W = size
    dx, dy = shift
    rng = np.random.default_rng(seed)
    pad_x, pad_y = abs(dx) * (T - 1), abs(dy) * (T - 1)
    canvas = smooth_texture(H + pad_y, W + pad_x, rng)
    frames = []
    for t in range(T):
        x0 = dx * t if dx >= 0 else pad_x + dx * t
        y0 = dy * t if dy >= 0 else pad_y + dy * t
        frames.append(canvas[y0:y0 + H, x0:x0 + W])
    masks = np.ones((T, H, W), dtype=np.float32)
    if hole:
        y, x = (H - hole) // 2, (W - hole) // 2
        masks[:, y:y + hole, x:x + hole] = 0.0
    return VideoSequence(np.stack(frames).astype(np.float32)), MaskSequence(masks)
