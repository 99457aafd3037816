import itertools
import math

import numpy as np
import pytest

import oracles
from internal_inpaint.metrics import (
    MetricError,
    aggregate,
    evaluate_video,
    flow_gradient_magnitude,
    frechet_distance,
    masked_psnr,
    masked_ssim,
    psnr,
    split_by_complexity,
    ssim,
    temporal_consistency,
    video_complexity,
)


@pytest.mark.parametrize("mse, expected", [(1e-2, 20.0), (1e-4, 40.0)])
def test_psnr_spot_values(mse, expected):
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), math.sqrt(mse))
    assert psnr(a, b) == pytest.approx(expected, abs=1e-9)


def test_psnr_cap():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == 50.0
    assert psnr(a, a + 1e-3) == 50.0  # MSE 1e-6 < 1e-5


def test_psnr_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.random((5, 6, 3)), rng.random((5, 6, 3))
    assert psnr(a, b) == pytest.approx(oracles.psnr_scalar(a, b), abs=1e-12)


def test_masked_psnr():
    a = np.zeros((4, 4, 3))
    b = a.copy()
    b[:2] = 0.1
    region = np.zeros((4, 4), bool)
    region[:2] = True
    assert masked_psnr(a, b, region) == pytest.approx(20.0)
    assert masked_psnr(a, b, ~region) == 50.0
    assert masked_psnr(a, b, np.zeros((4, 4), bool)) is None


def test_ssim_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    for shape in ((14, 13, 3), (12, 12)):
        a = rng.random(shape)
        b = np.clip(a + rng.normal(0, 0.1, shape), 0, 1)
        assert ssim(a, b) == pytest.approx(oracles.ssim_scalar(a, b), abs=1e-6)


def test_ssim_small_window_matches_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    assert ssim(a, b, 7) == pytest.approx(oracles.ssim_scalar(a, b, win=7), abs=1e-6)


def test_ssim_properties():
    rng = np.random.default_rng(3)
    a = rng.random((16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    b = rng.random((16, 16, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    with pytest.raises(MetricError, match="frame too small"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_masked_ssim_uses_window_centers():
    rng = np.random.default_rng(4)
    a = rng.random((20, 20))
    b = a.copy()
    b[:, 12:] = rng.random((20, 8))
    left = np.zeros((20, 20), bool)
    left[:, :7] = True  # centers in columns 5 and 6; their windows reach column 11
    assert masked_ssim(a, b, left) == pytest.approx(1.0, abs=1e-12)
    assert masked_ssim(a, b, np.zeros((20, 20), bool)) is None


def _tc_brute_force(video, masks, patch, search):
    """Exhaustive consistency score written independently of the library loops."""
    T, H, W = masks.shape
    stride = patch // 2
    c = patch // 2
    win = min(11, patch)
    win = win if win % 2 else win - 1
    ps, ss = [], []
    for t in range(T - 1):
        for y, x in itertools.product(range(0, H - patch + 1, stride), range(0, W - patch + 1, stride)):
            if masks[t, y + c, x + c] != 0:
                continue
            ref = video[t, y:y + patch, x:x + patch]
            cands = []
            for dy, dx in itertools.product(range(-search, search + 1), repeat=2):
                yy, xx = y + dy, x + dx
                if 0 <= yy <= H - patch and 0 <= xx <= W - patch:
                    cands.append(video[t + 1, yy:yy + patch, xx:xx + patch])
            ps.append(max(oracles.psnr_scalar(ref, cd) for cd in cands))
            ss.append(max(oracles.ssim_scalar(ref, cd, win=win) for cd in cands))
    return sum(ps) / len(ps), sum(ss) / len(ss)


def test_temporal_consistency_brute_force():
    rng = np.random.default_rng(5)
    video = rng.random((3, 16, 16, 3))
    video[1] = np.roll(video[0], (1, -2), axis=(0, 1)) * 0.9 + 0.05
    masks = np.ones((3, 16, 16))
    masks[:, 5:11, 4:12] = 0
    got = temporal_consistency(video, masks, patch=8, search=4)
    want = _tc_brute_force(video, masks, 8, 4)
    assert got[0] == pytest.approx(want[0], abs=1e-9)
    assert got[1] == pytest.approx(want[1], abs=1e-9)


def test_temporal_consistency_finds_translation():
    rng = np.random.default_rng(6)
    canvas = rng.random((40, 40, 3))
    video = np.stack([canvas[8:32, 8:32], canvas[8 + 2:32 + 2, 8 - 3:32 - 3]])
    masks = np.ones((2, 24, 24))
    masks[:, 8:16, 8:16] = 0
    p, s, details = temporal_consistency(video, masks, patch=8, search=4, details=True)
    assert p == 50.0 and s == pytest.approx(1.0)
    assert all(m.psnr_offset == (-2, 3) for m in details)


def test_temporal_consistency_edge_cases():
    with pytest.raises(MetricError, match="video too short"):
        temporal_consistency(np.zeros((1, 16, 16, 3)), np.zeros((1, 16, 16)), 8, 4)
    assert temporal_consistency(np.zeros((2, 16, 16, 3)), np.ones((2, 16, 16)), 8, 4) == (None, None)


def test_video_complexity_hand_value():
    # per-frame means 0.1, 0.2, 0.3 -> population std sqrt(2/3) * 0.1 = 0.08165
    video = np.stack([np.full((4, 4, 3), v) for v in (0.1, 0.2, 0.3)])
    flows = [np.zeros((4, 4, 2)), np.zeros((4, 4, 2))]
    score, app, motion = video_complexity(video, flows)
    assert app == pytest.approx(0.0816496580927726, abs=1e-12)
    assert motion == 0.0 and score == app


def test_flow_gradient_magnitude_hand_value():
    f = np.zeros((3, 3, 2))
    f[..., 0] = np.arange(3)[None, :]  # u grows by 1 per column
    f[..., 1] = 2 * np.arange(3)[:, None]  # v grows by 2 per row
    np.testing.assert_allclose(flow_gradient_magnitude(f), np.full((2, 2), math.sqrt(5)))


def test_split_by_complexity():
    simple, complex_ = split_by_complexity({"a": 3.0, "b": 1.0, "c": 2.0, "d": 0.5})
    assert simple == ["d", "b"] and complex_ == ["c", "a"]


def test_frechet_distance():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(500, 3))
    assert frechet_distance(x, x) == pytest.approx(0.0, abs=1e-8)
    # same covariance, shifted mean -> squared mean difference
    assert frechet_distance(x, x + 2.0) == pytest.approx(12.0, abs=1e-8)


def test_evaluate_video_and_aggregate():
    rng = np.random.default_rng(8)
    gt = rng.random((3, 16, 16, 3))
    res = gt.copy()
    masks = np.ones((3, 16, 16))
    masks[:, 4:12, 4:12] = 0
    res[:, 4:12, 4:12] += 0.1
    rep = evaluate_video(res, gt, masks, patch=8, search=2)
    assert rep.hole_psnr == pytest.approx([20.0] * 3)
    assert len(rep.psnr) == 3
    assert rep.consistency_psnr is not None
    assert "psnr\thole\t1\t" in rep.to_tsv()
    agg = aggregate([rep, rep])
    assert agg["hole_psnr"] == pytest.approx(20.0)
    with pytest.raises(MetricError, match="length mismatch"):
        evaluate_video(res[:2], gt, masks)
