"""Evaluation metrics: PSNR/SSIM, hole-region temporal consistency, video complexity.

Frames are numpy arrays (H, W, 3) or (H, W) with values in [0, 1]; videos are
(T, H, W, 3); masks are (T, H, W) with 1 = known region, 0 = hole.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.ndimage import correlate1d

PSNR_CAP = 50.0
MSE_FLOOR = 1e-5
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class MetricError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr_from_mse(mse: float) -> float:
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def psnr(a, b) -> float:
    """PSNR in dB on unit dynamic range, capped at 50 dB."""
    a, b = _pair(a, b)
    return psnr_from_mse(float(np.mean((a - b) ** 2)))


def masked_psnr(a, b, region) -> float | None:
    """PSNR over pixels where ``region`` is true; None if the region is empty."""
    a, b = _pair(a, b)
    region = np.asarray(region, dtype=bool)
    if region.shape != a.shape[:2]:
        raise MetricError(f"shape mismatch: region {region.shape} vs frame {a.shape}")
    if not region.any():
        return None
    return psnr_from_mse(float(np.mean((a[region] - b[region]) ** 2)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = correlate1d(x, g, axis=0, mode="reflect")
    y = correlate1d(y, g, axis=1, mode="reflect")
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim_map(a, b, win_size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Per-position, per-channel SSIM over every fully-contained window.

    Output is (H - win + 1, W - win + 1, C); position (y, x) belongs to the
    window centered on pixel (y + win // 2, x + win // 2).
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if win_size % 2 == 0 or win_size < 1:
        raise MetricError("window size must be odd")
    if a.shape[0] < win_size or a.shape[1] < win_size:
        raise MetricError(f"frame too small: {a.shape[:2]} for a {win_size}x{win_size} window")
    g = gaussian_window(win_size, sigma)
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b, win_size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    return float(np.mean(ssim_map(a, b, win_size, sigma)))


def masked_ssim(a, b, region, win_size: int = SSIM_WINDOW) -> float | None:
    """Mean SSIM over windows whose center pixel lies in ``region``."""
    m = ssim_map(a, b, win_size)
    r = win_size // 2
    region = np.asarray(region, dtype=bool)[r:r + m.shape[0], r:r + m.shape[1]]
    if not region.any():
        return None
    return float(np.mean(m[region]))


# ---------------------------------------------------------------- temporal consistency


def hole_patches(mask: np.ndarray, patch: int) -> list[tuple[int, int]]:
    """Top-left corners of patches on a stride patch/2 grid whose center is in the hole."""
    H, W = mask.shape
    stride = max(1, patch // 2)
    c = patch // 2
    return [
        (y, x)
        for y in range(0, H - patch + 1, stride)
        for x in range(0, W - patch + 1, stride)
        if mask[y + c, x + c] == 0
    ]


def patch_ssim_window(patch: int) -> int:
    w = min(SSIM_WINDOW, patch)
    return w if w % 2 else w - 1


@dataclass
class PatchMatch:
    frame: int
    corner: tuple[int, int]
    psnr: float
    psnr_offset: tuple[int, int]  # (dy, dx)
    ssim: float
    ssim_offset: tuple[int, int]


def match_patch(ref: np.ndarray, nxt: np.ndarray, y: int, x: int, patch: int, search: int, win: int):
    """Best PSNR and best SSIM of ``ref`` against patches of ``nxt`` within +-search.

    Offsets are scanned row-major (dy outer, dx inner); the first maximum wins.
    """
    H, W = nxt.shape[:2]
    best_p, best_s = -math.inf, -math.inf
    off_p = off_s = (0, 0)
    for dy in range(-search, search + 1):
        yy = y + dy
        if yy < 0 or yy + patch > H:
            continue
        for dx in range(-search, search + 1):
            xx = x + dx
            if xx < 0 or xx + patch > W:
                continue
            cand = nxt[yy:yy + patch, xx:xx + patch]
            p = psnr(ref, cand)
            s = ssim(ref, cand, win)
            if p > best_p:
                best_p, off_p = p, (dy, dx)
            if s > best_s:
                best_s, off_s = s, (dy, dx)
    return best_p, off_p, best_s, off_s


def temporal_consistency(
    video, masks, patch: int = 50, search: int = 20, details: bool = False
):
    """Average best-match PSNR and SSIM of hole patches against the next frame.

    Returns ``(psnr_score, ssim_score)``, both None if no hole patch exists;
    with ``details=True`` also the list of PatchMatch records.
    """
    video = np.asarray(video, dtype=np.float64)
    masks = np.asarray(masks)
    if video.shape[0] < 2:
        raise MetricError("video too short: temporal consistency needs at least 2 frames")
    if masks.shape != video.shape[:3]:
        raise MetricError(f"shape mismatch: masks {masks.shape} vs video {video.shape}")
    win = patch_ssim_window(patch)
    matches = []
    for t in range(video.shape[0] - 1):
        for (y, x) in hole_patches(masks[t], patch):
            ref = video[t, y:y + patch, x:x + patch]
            bp, op, bs, os_ = match_patch(ref, video[t + 1], y, x, patch, search, win)
            matches.append(PatchMatch(t, (y, x), bp, op, bs, os_))
    if not matches:
        scores = (None, None)
    else:
        scores = (float(np.mean([m.psnr for m in matches])), float(np.mean([m.ssim for m in matches])))
    return (*scores, matches) if details else scores


# ---------------------------------------------------------------- video complexity


def flow_gradient_magnitude(flow: np.ndarray) -> np.ndarray:
    """Per-pixel magnitude of the forward-difference Jacobian of an (H, W, 2) flow."""
    f = np.asarray(flow, dtype=np.float64)
    gx = f[:-1, 1:] - f[:-1, :-1]
    gy = f[1:, :-1] - f[:-1, :-1]
    return np.sqrt((gx ** 2).sum(-1) + (gy ** 2).sum(-1))


def video_complexity(video, flows: Sequence[np.ndarray]) -> tuple[float, float, float]:
    """(score, appearance, motion): appearance is the population std of per-frame mean
    intensity, motion the mean flow-gradient magnitude over the adjacent-frame flows."""
    video = np.asarray(video, dtype=np.float64)
    if video.shape[0] < 2:
        raise MetricError("video too short: complexity needs at least 2 frames")
    if len(flows) < 1:
        raise MetricError("complexity needs at least one flow field")
    means = video.reshape(video.shape[0], -1).mean(axis=1)
    appearance = float(np.std(means))
    motion = float(np.mean([flow_gradient_magnitude(f).mean() for f in flows]))
    return appearance + motion, appearance, motion


def split_by_complexity(scores: dict[str, float]) -> tuple[list[str], list[str]]:
    """Split videos into (simple, complex) halves by complexity score."""
    names = sorted(scores, key=lambda n: (scores[n], n))
    half = len(names) // 2
    return names[:half], names[half:]


# ---------------------------------------------------------------- FID hook


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two (n, d) feature sets."""
    mu_a, mu_b = feats_a.mean(0), feats_b.mean(0)
    cov_a = np.atleast_2d(np.cov(feats_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(feats_b, rowvar=False))
    covmean = linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a + cov_b - 2 * covmean))


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    name: str = "video"
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    hole_psnr: list[float | None] = field(default_factory=list)
    hole_ssim: list[float | None] = field(default_factory=list)
    consistency_psnr: float | None = None
    consistency_ssim: float | None = None
    complexity: float | None = None
    appearance: float | None = None
    motion: float | None = None
    fid: float | None = None

    def summary(self) -> dict[str, float | None]:
        def mean(xs):
            xs = [x for x in xs if x is not None]
            return float(np.mean(xs)) if xs else None

        return {
            "psnr": mean(self.psnr),
            "ssim": mean(self.ssim),
            "hole_psnr": mean(self.hole_psnr),
            "hole_ssim": mean(self.hole_ssim),
            "consistency_psnr": self.consistency_psnr,
            "consistency_ssim": self.consistency_ssim,
            "complexity": self.complexity,
            "appearance": self.appearance,
            "motion": self.motion,
            "fid": self.fid,
        }

    def rows(self) -> list[tuple[str, str, str, str]]:
        """(metric, scope, frame, value) rows; frame is 1-based or ``all``."""
        out = []
        for metric, scope, values in (
            ("psnr", "full", self.psnr),
            ("ssim", "full", self.ssim),
            ("psnr", "hole", self.hole_psnr),
            ("ssim", "hole", self.hole_ssim),
        ):
            for i, v in enumerate(values, start=1):
                out.append((metric, scope, str(i), _fmt(v)))
        s = self.summary()
        for key, (metric, scope) in {
            "psnr": ("psnr", "full"),
            "ssim": ("ssim", "full"),
            "hole_psnr": ("psnr", "hole"),
            "hole_ssim": ("ssim", "hole"),
            "consistency_psnr": ("consistency_psnr", "hole"),
            "consistency_ssim": ("consistency_ssim", "hole"),
            "complexity": ("complexity", "video"),
            "appearance": ("appearance", "video"),
            "motion": ("motion", "video"),
            "fid": ("fid", "full"),
        }.items():
            out.append((metric, scope, "all", _fmt(s[key])))
        return out

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(("metric", "scope", "frame", "value"))
        w.writerows(self.rows())
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"Metrics for {self.name}", "", f"{'frame':>5}  {'PSNR':>7}  {'SSIM':>7}  {'holePSNR':>8}  {'holeSSIM':>8}"]
        for i in range(len(self.psnr)):
            lines.append(
                f"{i + 1:>5}  {self.psnr[i]:7.3f}  {self.ssim[i]:7.4f}  "
                f"{_fmt(self.hole_psnr[i], '8.3f'):>8}  {_fmt(self.hole_ssim[i], '8.4f'):>8}"
            )
        lines.append("")
        for k, v in self.summary().items():
            lines.append(f"{k:>18}: {_fmt(v, '.4f')}")
        return "\n".join(lines) + "\n"


def _fmt(v, spec: str = "r") -> str:
    if v is None:
        return "NA"
    return repr(float(v)) if spec == "r" else format(v, spec)


def evaluate_video(
    result,
    ground_truth,
    masks,
    flows: Sequence[np.ndarray] | None = None,
    patch: int = 50,
    search: int = 20,
    fid_features: Callable[[np.ndarray], np.ndarray] | None = None,
    name: str = "video",
) -> MetricsReport:
    """Frame-wise PSNR/SSIM (full and hole-only), temporal consistency of the
    result, and complexity of the ground truth when flows are supplied."""
    result = np.asarray(result, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    masks = np.asarray(masks)
    if result.shape != gt.shape:
        raise MetricError(f"length mismatch: result {result.shape} vs ground truth {gt.shape}")
    if masks.shape != result.shape[:3]:
        raise MetricError(f"length mismatch: masks {masks.shape} vs frames {result.shape}")
    rep = MetricsReport(name=name)
    for t in range(result.shape[0]):
        hole = masks[t] == 0
        rep.psnr.append(psnr(result[t], gt[t]))
        rep.ssim.append(ssim(result[t], gt[t]))
        rep.hole_psnr.append(masked_psnr(result[t], gt[t], hole))
        rep.hole_ssim.append(masked_ssim(result[t], gt[t], hole))
    if result.shape[0] >= 2:
        rep.consistency_psnr, rep.consistency_ssim = temporal_consistency(result, masks, patch, search)
        if flows:
            rep.complexity, rep.appearance, rep.motion = video_complexity(gt, flows)
    if fid_features is not None:
        rep.fid = frechet_distance(fid_features(result), fid_features(gt))
    return rep


def aggregate(reports: Sequence[MetricsReport]) -> dict[str, float | None]:
    """Per-video means, then the mean across videos."""
    summaries = [r.summary() for r in reports]
    out = {}
    for key in summaries[0] if summaries else ():
        vals = [s[key] for s in summaries if s[key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out
