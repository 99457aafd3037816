import json

import numpy as np
import pytest
from PIL import Image

from internal_inpaint import cli
from internal_inpaint.synthetic import translating_video
from internal_inpaint.trainer import TrainingDiverged
from internal_inpaint.video_io import read_flo, save_video

TINY = ["--channel-scale", "1/16", "--epochs", "1", "--set", "inner_iterations=2", "--set", "batch_size=3"]


def _png(path):
    return np.asarray(Image.open(path))


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    root = tmp_path_factory.mktemp("inputs")
    video, masks = translating_video(T=6, shift=(1, 0), seed=0)
    save_video(video.frames, root / "vid")
    save_video(masks.masks, root / "mask")
    save_video(np.ones_like(masks.masks), root / "nohole")
    save_video(masks.masks[:4], root / "short_mask")
    return root


@pytest.fixture(scope="module")
def run(inputs, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "out"
    assert cli.main(["inpaint", str(inputs / "vid"), str(inputs / "mask"), str(out), *TINY]) == 0
    return out


def test_inpaint_layout(run):
    assert len(list((run / "generated").glob("frame_*.png"))) == 6
    assert len(list((run / "composite").glob("frame_*.png"))) == 6
    flows = sorted(p.name for p in (run / "flows").glob("*.flo"))
    assert len(flows) == 36
    assert "frame_0001_offset_+1.flo" in flows and "frame_0006_offset_-5.flo" in flows
    assert read_flo(run / "flows" / "frame_0003_offset_-3.flo").shape == (64, 64, 2)
    assert (run / "checkpoints" / "model.pt").is_file()
    assert (run / "losses.tsv").read_text().startswith("epoch\tbatch\titeration\tterm\tvalue\n")


def test_inpaint_manifest(run):
    m = json.loads((run / "manifest.json").read_text())
    assert m["command"] == "inpaint"
    assert "channel_scale = 1/16" in m["config"]
    assert len(m["config_hash"]) == 40
    assert set(m["seeds"]) == {"root", "init", "noise", "shuffle_epoch0"}
    assert m["outputs"]["composite"].endswith("composite")


def test_composite_keeps_known_pixels(run, inputs):
    known = _png(inputs / "mask" / "frame_0002.png") > 127
    comp = _png(run / "composite" / "frame_0002.png")
    src = _png(inputs / "vid" / "frame_0002.png")
    np.testing.assert_array_equal(comp[known], src[known])


def test_no_hole_masks_warn(inputs, tmp_path, capsys):
    assert cli.main(["inpaint", str(inputs / "vid"), str(inputs / "nohole"), str(tmp_path), "--mode", "DIP-Vid", *TINY]) == 0
    assert "no hole pixels" in capsys.readouterr().err


@pytest.mark.parametrize(
    "extra, code, message",
    [
        (["--size", "50x64"], cli.EXIT_CONFIG, "multiples of 64"),
        (["--set", "bogus=1"], cli.EXIT_CONFIG, "unknown config key"),
        (["--set", "novalue"], cli.EXIT_CONFIG, "KEY=VALUE"),
        (["--channel-scale", "x/2"], cli.EXIT_CONFIG, "invalid channel scale"),
    ],
)
def test_inpaint_config_errors(inputs, tmp_path, capsys, extra, code, message):
    rc = cli.main(["inpaint", str(inputs / "vid"), str(inputs / "mask"), str(tmp_path / "o"), *extra])
    err = capsys.readouterr().err.strip().splitlines()
    assert rc == code
    assert err[-1].startswith("error: config:") and message in err[-1]


def test_inpaint_io_errors(inputs, tmp_path, capsys):
    rc = cli.main(["inpaint", str(tmp_path / "missing"), str(inputs / "mask"), str(tmp_path / "o")])
    assert rc == cli.EXIT_IO and "no frames" in capsys.readouterr().err
    rc = cli.main(["inpaint", str(inputs / "vid"), str(inputs / "short_mask"), str(tmp_path / "o")])
    assert rc == cli.EXIT_IO and "length mismatch" in capsys.readouterr().err


def test_divergence_exit_code(inputs, tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise TrainingDiverged(12, "flow", float("nan"))

    monkeypatch.setattr(cli, "train", boom)
    rc = cli.main(["inpaint", str(inputs / "vid"), str(inputs / "mask"), str(tmp_path / "o"), *TINY])
    assert rc == cli.EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_config_file_and_flag_precedence(inputs, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("mode = DIP-Vid\nseed = 7\n# comment\nepochs = 3\n")
    parser = cli.build_parser()
    args = parser.parse_args(["inpaint", "v", "m", "o", "--config", str(cfg), "--epochs", "1"])
    config, text = cli._resolve_config(args)
    assert config.mode == "DIP-Vid" and config.seed == 7 and config.epochs == 1
    assert "epochs = 1" in text


def test_evaluate_writes_reports(run, inputs, tmp_path, capsys):
    out = tmp_path / "ev"
    rc = cli.main(["evaluate", str(run / "composite"), str(inputs / "vid"), str(inputs / "mask"),
                   "--out", str(out), "--patch", "8", "--search", "4", "--complexity"])
    assert rc == 0
    tsv = (out / "metrics.tsv").read_text()
    assert "psnr\thole\t1\t" in tsv
    assert "complexity" in tsv
    assert "consistency_psnr" in capsys.readouterr().out


def test_visualize(run, tmp_path):
    out = tmp_path / "vis"
    assert cli.main(["visualize", str(run), "--out", str(out), "--row", "10", "--reference", "2,0,0"]) == 0
    assert len(list((out / "flow_color").glob("*.png"))) == 36
    stack = _png(out / "row_stack_0010.png")
    assert stack.shape == (6, 64, 3)
    np.testing.assert_array_equal(stack[2], _png(run / "composite" / "frame_0003.png")[10])
    overlay = Image.open(out / "similarity" / "frame_0002.png")
    assert overlay.mode == "RGBA"
    assert np.asarray(overlay)[0, 0, 3] == 255  # the reference cell itself


def test_visualize_missing_artifacts(run, tmp_path, capsys):
    assert cli.main(["visualize", str(tmp_path)]) == cli.EXIT_IO
    assert "manifest.json" in capsys.readouterr().err
    (tmp_path / "manifest.json").write_text("{}")
    assert cli.main(["visualize", str(tmp_path)]) == cli.EXIT_IO
    err = capsys.readouterr().err
    assert "composite" in err and "checkpoints" in err


def test_row_stack_and_overlay_helpers():
    frames = np.random.default_rng(0).random((4, 8, 8, 3))
    np.testing.assert_array_equal(cli.row_stack(frames, 3)[1], frames[1, 3])
    with pytest.raises(ValueError):
        cli.row_stack(frames, 8)
    rgba = cli.similarity_overlay(frames[0], np.array([[-0.5, 0.25], [1.5, 1.0]]))
    assert rgba.shape == (8, 8, 4)
    assert rgba[0, 0, 3] == 0.0 and rgba[0, 7, 3] == 0.25 and rgba[7, 0, 3] == 1.0


@pytest.fixture(scope="module")
def compose_inputs(tmp_path_factory):
    root = tmp_path_factory.mktemp("compose")
    for i, T in enumerate((64, 20, 61)):
        v, _ = translating_video(T=T, shift=(1, 0), seed=i)
        save_video(v.frames, root / "bgs" / f"bg{i}")
    for i, hole in enumerate((10, 20)):
        _, m = translating_video(T=7, hole=hole)
        save_video(m.masks, root / "ms" / f"m{i}")
    return root


def _compose(root, out, seed):
    return cli.main(["compose", str(root / "bgs"), str(root / "ms"), str(out), "--size", "64x64", "--seed", str(seed)])


def test_compose(compose_inputs, tmp_path, capsys):
    out = tmp_path / "c"
    assert _compose(compose_inputs, out, 3) == 0
    assert "skipping bg1" in capsys.readouterr().err
    videos = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert videos == [f"bg{b}_{k}" for b in (0, 2) for k in range(1, 6)]
    d = out / "bg0_1"
    assert len(list((d / "gt").glob("*.png"))) == 60
    src = json.loads((d / "source.json").read_text())
    assert 1 <= src["segment_start"] <= 5
    gt, mask, inp = (_png(d / sub / "frame_0009.png") for sub in ("gt", "masks", "input"))
    np.testing.assert_array_equal(inp[mask > 127], gt[mask > 127])
    assert (inp[mask < 128] == 0).all()


def test_compose_is_seeded(compose_inputs, tmp_path):
    sources = {}
    for tag, seed in (("a", 5), ("b", 5)):
        assert _compose(compose_inputs, tmp_path / tag, seed) == 0
        sources[tag] = [json.loads(p.read_text()) for p in sorted((tmp_path / tag).glob("*/source.json"))]
    assert sources["a"] == sources["b"]
    np.testing.assert_array_equal(_png(tmp_path / "a/bg2_3/input/frame_0030.png"),
                                  _png(tmp_path / "b/bg2_3/input/frame_0030.png"))


def test_window_experiment(inputs, tmp_path, capsys):
    out = tmp_path / "w"
    rc = cli.main(["window-experiment", str(inputs / "vid"), str(inputs / "mask"), str(out),
                   "--k-list", "3,6", "--patch", "8", "--search", "4", *TINY])
    assert rc == 0
    lines = (out / "window_table.tsv").read_text().splitlines()
    assert lines[0].startswith("k\tclips") and [ln.split("\t")[:2] for ln in lines[1:]] == [["3", "2"], ["6", "1"]]
    capsys.readouterr()
    assert cli.main(["window-experiment", str(inputs / "vid"), str(inputs / "mask"), str(out), "--k-list", ""]) == cli.EXIT_CONFIG
    assert "no window lengths" in capsys.readouterr().err
