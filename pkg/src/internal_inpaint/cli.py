"""Command-line entry point.

    internal-inpaint inpaint VIDEO_DIR MASK_DIR OUT_DIR [options]
    internal-inpaint compose BACKGROUNDS_DIR MASKS_DIR OUT_DIR [--seed S]
    internal-inpaint evaluate RESULT_DIR GT_DIR MASK_DIR [--out DIR]
    internal-inpaint visualize RUN_DIR [--row R] [--reference F,R,C]
    internal-inpaint window-experiment VIDEO_DIR MASK_DIR OUT_DIR --k-list 1,3,5

Every command writes ``manifest.json`` next to its outputs.  Exit status is 0
only when all outputs were written; failures print one ``error:`` line.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .config import (
    SEED_COMPOSE,
    SEED_INIT,
    SEED_NOISE,
    SEED_SHUFFLE,
    ConfigError,
    TrainConfig,
    build_config,
    content_hash,
    derive_seed,
    parse_size,
    read_config_file,
)
from .experiments import format_window_table, window_length_experiment
from .flow_ops import make_provider
from .generator import FLOW_OFFSETS, NoiseMapSet, feature_similarity_map, load_checkpoint, save_checkpoint
from .trainer import TrainingDiverged, VideoTooShort, composite_output, format_loss_log, generate, train
from .video_io import (
    FlowFileError,
    VideoIOError,
    check_size,
    list_images,
    load_masks,
    load_video,
    read_flo,
    save_frame,
    save_video,
    visualize_flow,
    write_flo,
)

log = logging.getLogger("internal_inpaint")

EXIT_FAILURE, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 1, 2, 3, 4

SEGMENT_LENGTH = 60
MASKS_PER_VIDEO = 5


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------- helpers


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _resolve_config(args) -> tuple[TrainConfig, str]:
    """Defaults < --config file < flags.  Returns the config and its canonical text."""
    pairs = read_config_file(args.config) if args.config else {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    if args.paper_scale:
        pairs["paper_scale"] = "true"
    overrides = {
        "mode": args.mode,
        "seed": args.seed,
        "size": parse_size(args.size) if args.size else None,
        "channel_scale": _parse_fraction(args.channel_scale) if args.channel_scale else None,
        "flow_provider": args.flow_provider,
        "epochs": args.epochs,
    }
    config = build_config(pairs, overrides)
    try:
        check_size(config.size)
    except VideoIOError as e:
        raise ConfigError(str(e)) from e
    return config, config.to_text()


def _parse_fraction(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"invalid channel scale {text!r}") from e


def _write_manifest(out_dir: Path, command: str, argv, config_path, config_text, inputs, outputs, seeds, started):
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config_path": str(config_path) if config_path else None,
        "config": config_text,
        "config_hash": content_hash(config_text) if config_text is not None else None,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seeds": seeds,
        "started": started,
        "finished": _now(),
    }
    path = out_dir / "manifest.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def _seed_table(config: TrainConfig) -> dict:
    s = config.seed
    return {
        "root": s,
        "init": derive_seed(s, SEED_INIT),
        "noise": derive_seed(s, SEED_NOISE),
        "shuffle_epoch0": derive_seed(s, SEED_SHUFFLE, 0),
    }


def _provider_for(config: TrainConfig):
    return make_provider(config.flow_provider) if config.mode == "DIP-Vid-Flow" else None


def _frame_size(directory) -> tuple[int, int]:
    from PIL import Image

    with Image.open(list_images(directory)[0]) as im:
        return im.height, im.width


# ---------------------------------------------------------------- inpaint


def cmd_inpaint(args) -> int:
    started = _now()
    config, config_text = _resolve_config(args)
    out = Path(args.out_dir)
    video = load_video(args.video_dir, config.size)
    masks = load_masks(args.mask_dir, config.size, expected_count=video.T)
    if masks.masks.min() == 1:
        log.warning("masks contain no hole pixels; the composite will equal the input")
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    result = train(
        video,
        masks,
        config,
        _provider_for(config),
        checkpoint_dir=ckpt_dir,
        flow_cache=out / "flow_cache" if config.mode == "DIP-Vid-Flow" else None,
        progress=log.info,
    )
    images, flows = generate(result)
    gen = images.permute(0, 2, 3, 1).numpy()
    comp = composite_output(gen, video.frames, masks.masks)

    outputs = {"generated": out / "generated", "composite": out / "composite", "losses": out / "losses.tsv"}
    save_video(gen, outputs["generated"])
    save_video(comp, outputs["composite"])
    outputs["losses"].write_text(format_loss_log(result.history))
    if flows is not None:
        outputs["flows"] = out / "flows"
        outputs["flows"].mkdir(exist_ok=True)
        fl = flows.permute(0, 1, 3, 4, 2).numpy()
        for i in range(fl.shape[0]):
            for k, off in enumerate(FLOW_OFFSETS):
                write_flo(fl[i, k], outputs["flows"] / generated_flow_name(i + 1, off))
    for i, model in enumerate(result.models):
        name = "model.pt" if len(result.models) == 1 else f"model_{i + 1:04d}.pt"
        save_checkpoint(model, ckpt_dir / name, noise=result.noise.maps, noise_seed=result.noise.seed, mode=config.mode)
    outputs["checkpoints"] = ckpt_dir

    _write_manifest(
        out, "inpaint", sys.argv, args.config, config_text,
        {"video": args.video_dir, "masks": args.mask_dir}, outputs, _seed_table(config), started,
    )
    log.info("wrote %d frames to %s", video.T, out)
    return 0


def generated_flow_name(frame: int, offset: int) -> str:
    """File name of the generated flow for 1-based ``frame`` toward ``frame + offset``."""
    return f"frame_{frame:04d}_offset_{offset:+d}.flo"


# ---------------------------------------------------------------- compose


def _subdirs(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise VideoIOError(f"no frames: {d} is not a directory")
    subs = sorted(p for p in d.iterdir() if p.is_dir())
    if not subs:
        raise VideoIOError(f"no frames: {d} has no sequence subdirectories")
    return subs


def cmd_compose(args) -> int:
    started = _now()
    size = parse_size(args.size)
    out = Path(args.out_dir)
    backgrounds = _subdirs(args.backgrounds_dir)
    mask_dirs = _subdirs(args.masks_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, skipped = [], []
    for b_index, bg in enumerate(backgrounds):
        frames = list_images(bg)
        if len(frames) < args.segment:
            log.warning("skipping %s: %d frames, need %d", bg.name, len(frames), args.segment)
            skipped.append(bg.name)
            continue
        rng = np.random.default_rng(derive_seed(args.seed, SEED_COMPOSE, b_index))
        start = int(rng.integers(0, len(frames) - args.segment + 1))
        picks = rng.choice(len(mask_dirs), size=args.masks_per_video, replace=len(mask_dirs) < args.masks_per_video)
        video = load_video(bg, size)
        segment = video.frames[start:start + args.segment]
        for k, m_index in enumerate(picks):
            seq = load_masks(mask_dirs[m_index], size)
            # shorter mask sequences are cycled to cover the segment
            idx = np.arange(args.segment) % seq.T
            masks = seq.masks[idx]
            name = f"{bg.name}_{k + 1}"
            dest = out / name
            save_video(segment, dest / "gt")
            save_video(masks, dest / "masks")
            save_video(segment * masks[..., None], dest / "input")
            (dest / "source.json").write_text(
                json.dumps(
                    {"background": bg.name, "segment_start": start + 1, "segment_length": args.segment,
                     "mask_sequence": mask_dirs[m_index].name},
                    indent=2,
                )
                + "\n"
            )
            written.append(name)
    _write_manifest(
        out, "compose", sys.argv, None, None,
        {"backgrounds": args.backgrounds_dir, "masks": args.masks_dir},
        {"videos": out, "count": len(written)},
        {"root": args.seed, "per_background": [derive_seed(args.seed, SEED_COMPOSE, i) for i in range(len(backgrounds))]},
        started,
    )
    log.info("composed %d videos (%d backgrounds skipped)", len(written), len(skipped))
    return 0


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    started = _now()
    size = parse_size(args.size) if args.size else _frame_size(args.result_dir)
    result = load_video(args.result_dir, size)
    gt = load_video(args.gt_dir, size)
    masks = load_masks(args.mask_dir, size)
    if not (result.T == gt.T == masks.T):
        raise metrics.MetricError(f"length mismatch: result {result.T}, ground truth {gt.T}, masks {masks.T} frames")
    flows = None
    if args.complexity:
        provider = make_provider(args.flow_provider or "block-match")
        flows = [provider.estimate(gt.frames[t], gt.frames[t + 1], t, t + 1)[0] for t in range(gt.T - 1)]
    report = metrics.evaluate_video(
        result.frames, gt.frames, masks.masks, flows=flows, patch=args.patch, search=args.search,
        name=Path(args.result_dir).name,
    )
    out = Path(args.out) if args.out else Path(args.result_dir).parent / "evaluation"
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.tsv").write_text(report.to_tsv())
    table = report.to_table()
    (out / "metrics.txt").write_text(table)
    print(table, end="")
    _write_manifest(
        out, "evaluate", sys.argv, None, None,
        {"result": args.result_dir, "ground_truth": args.gt_dir, "masks": args.mask_dir},
        {"tsv": out / "metrics.tsv", "table": out / "metrics.txt"}, {}, started,
    )
    return 0


# ---------------------------------------------------------------- visualize


def _read_manifest(run: Path) -> dict:
    path = run / "manifest.json"
    if not path.is_file():
        raise MissingArtifact(f"missing artifacts in {run}: manifest.json")
    return json.loads(path.read_text())


def row_stack(frames: np.ndarray, row: int) -> np.ndarray:
    """Stack row ``row`` of every frame: (T, W, 3), one frame per image row."""
    if not 0 <= row < frames.shape[1]:
        raise ValueError(f"row {row} outside [0, {frames.shape[1]})")
    return np.ascontiguousarray(frames[:, row])


def similarity_overlay(frame: np.ndarray, similarity: np.ndarray) -> np.ndarray:
    """RGBA image: the frame with opacity given by the (clipped) similarity grid, upsampled by repetition."""
    h, w = frame.shape[:2]
    gh, gw = similarity.shape
    alpha = np.clip(similarity, 0.0, 1.0).repeat(h // gh, axis=0).repeat(w // gw, axis=1)
    return np.concatenate([frame, alpha[..., None]], axis=-1)


def cmd_visualize(args) -> int:
    started = _now()
    run = Path(args.run_dir)
    _read_manifest(run)
    comp_dir = run / "composite"
    missing = [p.name for p in (comp_dir, run / "checkpoints") if not p.exists()]
    if missing:
        raise MissingArtifact(f"missing artifacts in {run}: {', '.join(missing)}")
    frames = load_video(comp_dir, _frame_size(comp_dir)).frames
    T, H, W, _ = frames.shape
    out = Path(args.out) if args.out else run / "visualize"
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}

    flow_dir = run / "flows"
    if flow_dir.is_dir():
        files = sorted(flow_dir.glob("*.flo"))
        if not files:
            raise MissingArtifact(f"missing artifacts in {run}: flows/*.flo")
        fields = [read_flo(p) for p in files]
        max_mag = args.max_flow or max(float(np.sqrt((f ** 2).sum(-1)).max()) for f in fields) or 1.0
        color_dir = out / "flow_color"
        color_dir.mkdir(exist_ok=True)
        for p, f in zip(files, fields):
            save_frame(visualize_flow(f, max_mag), color_dir / (p.stem + ".png"))
        outputs["flow_color"] = color_dir
    else:
        log.info("no generated flows in %s; skipping flow colors", run)

    row = H // 2 if args.row is None else args.row
    save_frame(row_stack(frames, row), out / f"row_stack_{row:04d}.png")
    outputs["row_stack"] = out / f"row_stack_{row:04d}.png"

    model_path = run / "checkpoints" / "model.pt"
    if model_path.is_file():
        model, payload = load_checkpoint(model_path)
        noise = NoiseMapSet(payload["noise"], payload["noise_seed"])
        ref_frame, ref_row, ref_col = args.reference
        sims = feature_similarity_map(model, noise, (ref_frame - 1, (ref_row, ref_col)), range(T))
        sim_dir = out / "similarity"
        sim_dir.mkdir(exist_ok=True)
        for t in range(T):
            save_frame(similarity_overlay(frames[t], sims[t]), sim_dir / f"frame_{t + 1:04d}.png")
        outputs["similarity"] = sim_dir
    else:
        log.warning("no single video model in %s (frame-wise runs have one model per frame); skipping similarity", run)

    _write_manifest(out, "visualize", sys.argv, None, None, {"run": run}, outputs, {}, started)
    return 0


def _parse_reference(text: str) -> tuple[int, int, int]:
    try:
        f, r, c = (int(x) for x in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected FRAME,ROW,COL, got {text!r}") from e
    return f, r, c


# ---------------------------------------------------------------- window experiment


def _parse_k_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def cmd_window_experiment(args) -> int:
    started = _now()
    if not args.k_list:
        raise ConfigError("no window lengths given (--k-list)")
    config, config_text = _resolve_config(args)
    video = load_video(args.video_dir, config.size)
    masks = load_masks(args.mask_dir, config.size, expected_count=video.T)
    gt = load_video(args.ground_truth, config.size).frames if args.ground_truth else None
    rows = window_length_experiment(
        video, masks, args.k_list, config, _provider_for(config), gt, patch=args.patch, search=args.search
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = format_window_table(rows)
    (out / "window_table.tsv").write_text(table)
    print(table, end="")
    _write_manifest(
        out, "window-experiment", sys.argv, args.config, config_text,
        {"video": args.video_dir, "masks": args.mask_dir, "ground_truth": args.ground_truth},
        {"table": out / "window_table.tsv"}, _seed_table(config), started,
    )
    return 0


# ---------------------------------------------------------------- parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value run configuration file")
    p.add_argument("--mode", choices=("DIP", "DIP-Vid", "DIP-Vid-3DCN", "DIP-Vid-Flow"))
    p.add_argument("--seed", type=int, help="root seed for every random stream")
    p.add_argument("--size", help="working resolution HxW (multiples of 64)")
    p.add_argument("--channel-scale", help="generator width factor, e.g. 1/4 (1 = full width)")
    p.add_argument("--flow-provider", help="block-match[:PATCH:RADIUS] or precomputed:<dir>")
    p.add_argument("--epochs", type=int)
    p.add_argument("--paper-scale", action="store_true", help="full-size defaults (192x384, width 1, M=100, E=20)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="internal-inpaint", description="Internal-learning video inpainting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inpaint", help="fit a generator to one masked video and write the result")
    p.add_argument("video_dir")
    p.add_argument("mask_dir")
    p.add_argument("out_dir")
    _add_config_flags(p)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("compose", help="build masked test videos from backgrounds and mask sequences")
    p.add_argument("backgrounds_dir", help="one subdirectory of frames per background video")
    p.add_argument("masks_dir", help="one subdirectory of mask frames per mask sequence")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="192x384")
    p.add_argument("--segment", type=int, default=SEGMENT_LENGTH)
    p.add_argument("--masks-per-video", type=int, default=MASKS_PER_VIDEO)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("evaluate", help="PSNR/SSIM, hole-only scores and temporal consistency")
    p.add_argument("result_dir")
    p.add_argument("gt_dir")
    p.add_argument("mask_dir")
    p.add_argument("--out", help="report directory (default: <result_dir>/../evaluation)")
    p.add_argument("--size", help="evaluation resolution HxW (default: size of the result frames)")
    p.add_argument("--patch", type=int, default=50)
    p.add_argument("--search", type=int, default=20)
    p.add_argument("--complexity", action="store_true", help="also score video complexity from estimated flows")
    p.add_argument("--flow-provider", help="provider for --complexity (default block-match)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", help="flow colors, fixed-row stack and feature-similarity overlays")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.add_argument("--row", type=int, help="row for the temporal stack (default: middle row)")
    p.add_argument("--reference", type=_parse_reference, default=(1, 0, 0), help="FRAME,ROW,COL latent cell (frame 1-based)")
    p.add_argument("--max-flow", type=float, help="flow magnitude mapped to full saturation")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("window-experiment", help="inpaint consecutive clips of length k and score the result")
    p.add_argument("video_dir")
    p.add_argument("mask_dir")
    p.add_argument("out_dir")
    p.add_argument("--k-list", type=_parse_k_list, required=True, help="comma-separated window lengths")
    p.add_argument("--ground-truth", help="frames to score against (default: the input video)")
    p.add_argument("--patch", type=int, default=50)
    p.add_argument("--search", type=int, default=20)
    _add_config_flags(p)
    p.set_defaults(func=cmd_window_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s: %(message)s", force=True)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (VideoIOError, FlowFileError, MissingArtifact, OSError) as e:
        print(f"error: I/O: {e}", file=sys.stderr)
        return EXIT_IO
    except TrainingDiverged as e:
        print(f"error: {e}; last checkpoint kept", file=sys.stderr)
        return EXIT_DIVERGED
    except (metrics.MetricError, VideoTooShort, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
