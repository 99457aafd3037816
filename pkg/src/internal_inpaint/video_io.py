"""Frame, mask and flow I/O.

Frames are directories of lossless images read in lexical order.  Flows use
the Middlebury ``.flo`` layout: magic ``PIEH``, int32 width and height, then
row-major interleaved float32 (u, v), all little-endian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib.colors import hsv_to_rgb
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm", ".jpg", ".jpeg", ".webp"}
FLO_MAGIC = b"PIEH"
SIZE_MULTIPLE = 64


class VideoIOError(ValueError):
    pass


@dataclass
class VideoSequence:
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4 or f.shape[-1] != 3 or f.shape[0] < 1:
            raise VideoIOError(f"frames must be (T, H, W, 3), got {f.shape}")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise VideoIOError("intensities outside [0, 1]")
        self.frames = f

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def __len__(self):
        return self.T

    def __getitem__(self, idx):
        return self.frames[idx]


@dataclass
class MaskSequence:
    masks: np.ndarray  # (T, H, W) float32 in {0, 1}; 1 = known

    def __post_init__(self):
        m = np.asarray(self.masks, dtype=np.float32)
        if m.ndim != 3:
            raise VideoIOError(f"masks must be (T, H, W), got {m.shape}")
        if not np.isin(m, (0.0, 1.0)).all():
            raise VideoIOError("masks must be strictly binary")
        self.masks = m

    @property
    def T(self) -> int:
        return self.masks.shape[0]

    def __len__(self):
        return self.T

    def __getitem__(self, idx):
        return self.masks[idx]


def check_size(target_size: tuple[int, int]) -> None:
    h, w = target_size
    if h <= 0 or w <= 0 or h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
        raise VideoIOError(f"invalid size {h}x{w}: height and width must be multiples of {SIZE_MULTIPLE}")


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise VideoIOError(f"no frames: {directory} is not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise VideoIOError(f"no frames in {directory}")
    return files


def _read_image(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert(mode))
    except (UnidentifiedImageError, OSError) as e:
        raise VideoIOError(f"decode failure: {path}") from e
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float32) / scale


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resample with half-pixel centers and no antialiasing; img is (H, W, C)."""
    if img.shape[:2] == tuple(size):
        return img.copy()
    t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)[None].to(torch.float64)
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False, antialias=False)
    return out[0].permute(1, 2, 0).numpy().astype(np.float32)


def resize_and_crop(img: np.ndarray, target_size: tuple[int, int]) -> np.ndarray:
    """Scale to the smallest size covering ``target_size`` (aspect kept), then center crop."""
    th, tw = target_size
    h, w = img.shape[:2]
    s = max(th / h, tw / w)
    nh, nw = max(th, int(round(h * s))), max(tw, int(round(w * s)))
    img = resize_bilinear(img, (nh, nw))
    y0, x0 = (nh - th) // 2, (nw - tw) // 2
    return img[y0:y0 + th, x0:x0 + tw]


def load_video(directory: str | Path, target_size: tuple[int, int]) -> VideoSequence:
    check_size(target_size)
    frames = []
    for p in list_images(directory):
        img = resize_and_crop(_read_image(p, "RGB"), target_size)
        frames.append(np.clip(img, 0.0, 1.0))
    return VideoSequence(np.stack(frames))


def load_masks(directory: str | Path, target_size: tuple[int, int], expected_count: int | None = None) -> MaskSequence:
    """Load a mask sequence (white = known region), binarized at 0.5 after resizing."""
    check_size(target_size)
    files = list_images(directory)
    if expected_count is not None and len(files) != expected_count:
        raise VideoIOError(f"length mismatch: {len(files)} masks for {expected_count} frames")
    masks = []
    for p in files:
        m = resize_and_crop(_read_image(p, "L")[..., None], target_size)[..., 0]
        masks.append((m >= 0.5).astype(np.float32))
    seq = MaskSequence(np.stack(masks))
    empty = [i + 1 for i in range(seq.T) if not seq.masks[i].any()]
    if empty:
        log.warning("masks with no known pixels (full-frame hole) at frames %s", empty)
    return seq


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_frame(img: np.ndarray, path: str | Path) -> None:
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def save_video(frames, directory: str | Path, prefix: str = "frame") -> list[Path]:
    """Write frames as ``{prefix}_0001.png`` etc. (1-based, lexically ordered)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames, start=1):
        p = directory / f"{prefix}_{i:04d}.png"
        save_frame(np.asarray(f), p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------- .flo files


class FlowFileError(ValueError):
    pass


def write_flo(flow: np.ndarray, path: str | Path) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FlowFileError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FLO_MAGIC:
        raise FlowFileError(f"not a flow file: {path}")
    if len(data) < 12:
        raise FlowFileError(f"corrupt flow file: {path} has no header")
    w, h = np.frombuffer(data, dtype="<i4", count=2, offset=4)
    expected = 12 + 8 * int(w) * int(h)
    if w < 0 or h < 0 or len(data) != expected:
        raise FlowFileError(f"corrupt flow file: {path} has {len(data)} bytes, expected {expected}")
    flow = np.frombuffer(data, dtype="<f4", offset=12).reshape(int(h), int(w), 2)
    return flow.astype(np.float32)


def visualize_flow(flow: np.ndarray, max_magnitude: float) -> np.ndarray:
    """HSV color coding: hue = direction, value = magnitude / max_magnitude (clipped)."""
    if not max_magnitude > 0:
        raise ValueError("max_magnitude must be positive")
    u = flow[..., 0].astype(np.float64)
    v = flow[..., 1].astype(np.float64)
    hue = np.mod(np.degrees(np.arctan2(v, u)), 360.0) / 360.0
    val = np.minimum(np.hypot(u, v) / max_magnitude, 1.0)
    hsv = np.stack([hue, np.ones_like(hue), val], axis=-1)
    return hsv_to_rgb(hsv).astype(np.float32)


def flow_filename(i: int, j: int) -> str:
    """File name for the flow from frame i to frame j (1-based indices)."""
    return f"flow_{i:04d}_{j:04d}.flo"


def is_finite_flow(flow: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(flow)))

