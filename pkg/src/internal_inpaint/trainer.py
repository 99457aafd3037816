"""Per-video optimization of the generator.

A video is fitted by one generator (or, in frame-wise DIP mode, one generator
per frame).  Video modes iterate over curriculum batches: N frames spaced by a
fixed interval t in one direction, each optimized for M consecutive Adam
steps before moving to the next batch.
"""

from __future__ import annotations

import copy
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import flow_ops
from .config import SEED_INIT, SEED_NOISE, SEED_SHUFFLE, TrainConfig, derive_seed
from .generator import (
    FLOW_OFFSETS,
    Generator,
    GeneratorSpec,
    NoiseMapSet,
    build_generator,
    forward_3d,
    load_checkpoint,
    make_noise_maps,
    recalibrate_batchnorm,
    save_checkpoint,
)
from .losses import (
    FeatureExtractor,
    IdentityExtractor,
    NonFiniteLoss,
    VGG16Extractor,
    consistency_loss,
    flow_generation_loss,
    image_generation_loss,
    perceptual_loss,
    total_loss,
)
from .video_io import MaskSequence, VideoSequence

log = logging.getLogger(__name__)

FORWARD, BACKWARD = "forward", "backward"


class VideoTooShort(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, term: str, value: float):
        super().__init__(f"training diverged at iteration {iteration}: non-finite {term} loss ({value})")
        self.iteration = iteration
        self.term = term


# ---------------------------------------------------------------- batches


@dataclass(frozen=True)
class BatchSpec:
    start: int  # 0-based frame index
    interval: int
    direction: str
    members: tuple[int, ...]

    @property
    def step(self) -> int:
        return self.interval if self.direction == FORWARD else -self.interval

    def label(self) -> str:
        """1-based description used in logs."""
        return f"start={self.start + 1} t={self.interval} {self.direction}"


def make_batch(start: int, interval: int, direction: str, n: int) -> BatchSpec:
    sign = 1 if direction == FORWARD else -1
    return BatchSpec(start, interval, direction, tuple(start + sign * interval * k for k in range(n)))


def all_batches(T: int, N: int, intervals: Iterable[int], directions=(FORWARD, BACKWARD)) -> list[BatchSpec]:
    """Every valid (start, interval, direction) placement, in canonical order."""
    specs = []
    for t in sorted(set(intervals)):
        span = t * (N - 1)
        for d in directions:
            for s in range(T):
                end = s + span if d == FORWARD else s - span
                if 0 <= end < T:
                    specs.append(make_batch(s, t, d, N))
    return specs


def enumerate_batches(
    T: int, N: int, intervals: Iterable[int], seed: int, directions=(FORWARD, BACKWARD)
) -> list[BatchSpec]:
    """All batch placements for one epoch, shuffled by ``seed``."""
    if N < 1:
        raise ValueError("batch size must be >= 1")
    if T < N:
        raise VideoTooShort(f"video too short: {T} frames for batch size {N}")
    specs = all_batches(T, N, intervals, directions)
    order = np.random.default_rng(seed).permutation(len(specs))
    return [specs[k] for k in order]


# ---------------------------------------------------------------- data


@dataclass
class FlowTargets:
    """Known-region flow supervision keyed by 0-based (i, j)."""

    flow: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)  # (2, H, W)
    occlusion: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)  # (H, W)
    reliable: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)  # (H, W)

    def stack(self, pairs, dtype):
        f = torch.stack([self.flow[p] for p in pairs]).to(dtype)
        o = torch.stack([self.occlusion[p] for p in pairs]).to(dtype)
        r = torch.stack([self.reliable[p] for p in pairs]).to(dtype)
        return f, o, r


def masked_frames(video: VideoSequence, masks: MaskSequence) -> np.ndarray:
    """The observed input: frames with their holes zeroed."""
    return video.frames * masks.masks[..., None]


def precompute_flows(
    video: VideoSequence,
    masks: MaskSequence,
    provider: flow_ops.FlowProvider,
    intervals: Iterable[int],
    cache_dir: str | Path | None = None,
) -> FlowTargets:
    """Flow targets, occlusion maps and reliable-flow masks for every pair |i - j| in intervals.

    Flows are estimated once from the observed (masked) input frames, so hole
    content never influences them.
    """
    frames = masked_frames(video, masks)
    targets = FlowTargets()
    T = video.T
    for t in sorted(set(intervals)):
        for i in range(T - t):
            j = i + t
            fwd, bwd = flow_ops.estimate_pair(provider, frames, i, j, cache_dir)
            f_ij = flow_ops.hwc_to_chw(np.asarray(fwd, dtype=np.float32))
            f_ji = flow_ops.hwc_to_chw(np.asarray(bwd, dtype=np.float32))
            for a, b, fa, fb in ((i, j, f_ij, f_ji), (j, i, f_ji, f_ij)):
                targets.flow[(a, b)] = fa
                targets.occlusion[(a, b)] = flow_ops.forward_backward_occlusion(fa, fb)
                targets.reliable[(a, b)] = flow_ops.reliable_flow_mask(
                    torch.from_numpy(masks.masks[a]), torch.from_numpy(masks.masks[b]), fa
                )
    return targets


@dataclass
class TrainData:
    frames: torch.Tensor  # (T, 3, H, W)
    masks: torch.Tensor  # (T, H, W)
    noise: NoiseMapSet
    flows: FlowTargets | None = None
    extractor: FeatureExtractor | None = None


def make_extractor(name: str) -> FeatureExtractor | None:
    if name in ("", "none"):
        return None
    if name == "identity":
        return IdentityExtractor()
    if name == "vgg16":
        return VGG16Extractor()
    if name.startswith("vgg16:"):
        return VGG16Extractor(name.split(":", 1)[1])
    raise ValueError(f"unknown perceptual extractor {name!r}")


# ---------------------------------------------------------------- state


@dataclass
class LossRecord:
    epoch: int
    batch: int
    iteration: int
    term: str
    value: float


@dataclass
class TrainState:
    model: Generator
    optimizer: torch.optim.Optimizer
    epoch: int = 0  # completed epochs
    batch: int = 0  # completed batches within the current epoch
    iteration: int = 0  # optimizer steps taken
    rollbacks: int = 0
    history: list[LossRecord] = field(default_factory=list)

    def snapshot(self) -> dict:
        return {
            "model": copy.deepcopy(self.model.state_dict()),
            "optimizer": copy.deepcopy(self.optimizer.state_dict()),
            "iteration": self.iteration,
            "history_len": len(self.history),
        }

    def restore(self, snap: dict) -> None:
        self.model.load_state_dict(snap["model"])
        self.optimizer.load_state_dict(snap["optimizer"])
        self.iteration = snap["iteration"]
        del self.history[snap["history_len"]:]

    def save(self, path: str | Path, config: TrainConfig, order: list[BatchSpec] | None = None) -> None:
        save_checkpoint(
            self.model,
            path,
            optimizer=self.optimizer.state_dict(),
            counters={"epoch": self.epoch, "batch": self.batch, "iteration": self.iteration, "rollbacks": self.rollbacks},
            history=[(r.epoch, r.batch, r.iteration, r.term, r.value) for r in self.history],
            config=config.to_text(),
            order=[(b.start, b.interval, b.direction, b.members) for b in order] if order else None,
        )


def make_optimizer(model: Generator, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)


def generator_spec(config: TrainConfig) -> GeneratorSpec:
    return GeneratorSpec(
        variant="conv3d" if config.mode == "DIP-Vid-3DCN" else "conv2d",
        flow_head=config.mode == "DIP-Vid-Flow",
        channel_scale=config.channel_scale,
    )


def new_state(config: TrainConfig, seed: int, dtype=torch.float32) -> TrainState:
    model = build_generator(generator_spec(config), seed, dtype)
    return TrainState(model, make_optimizer(model, config))


def load_state(path: str | Path, config: TrainConfig) -> tuple[TrainState, list[BatchSpec] | None]:
    """Rebuild a TrainState from a checkpoint, plus the batch order it was saved in (if any)."""
    model, payload = load_checkpoint(path)
    model.train()
    opt = make_optimizer(model, config)
    opt.load_state_dict(payload["optimizer"])
    c = payload["counters"]
    state = TrainState(model, opt, c["epoch"], c["batch"], c["iteration"], c["rollbacks"])
    state.history = [LossRecord(*r) for r in payload["history"]]
    order = payload.get("order")
    if order is not None:
        order = [BatchSpec(s, t, d, tuple(m)) for s, t, d, m in order]
    return state, order


# ---------------------------------------------------------------- inner loop


def batch_losses(model: Generator, batch: BatchSpec, data: TrainData, config: TrainConfig, output: list | None = None):
    """Forward the batch in training mode and compute the loss terms its mode uses.

    If ``output`` is a list, the generator output is appended to it.
    """
    idx = list(batch.members)
    noise = data.noise.maps[idx]
    if model.spec.variant == "conv3d":
        out = forward_3d(model, noise, mode="train")
    else:
        model.train()
        out = model(noise)
    if output is not None:
        output.append(out)
    target, mask = data.frames[idx], data.masks[idx]
    parts = {"image": image_generation_loss(out.image, target, mask)}
    if config.mode != "DIP-Vid-Flow":
        return parts

    if len(idx) > 1:
        k = FLOW_OFFSETS.index(batch.step)
        pairs = list(zip(idx[:-1], idx[1:]))
        gen_flow = out.flows[:-1, k]
        f, o, r = data.flows.stack(pairs, gen_flow.dtype)
        parts["flow"] = flow_generation_loss(gen_flow, f, o, r)
        parts["consistency"] = consistency_loss(
            out.image[:-1], out.image[1:], gen_flow, r, o if config.consistency_occlusion_gate else None
        )
    if data.extractor is not None:
        parts["perceptual"] = perceptual_loss(out.image, target, mask, data.extractor)
    return parts


class _Rollback(Exception):
    pass


def train_batch(
    state: TrainState,
    batch: BatchSpec,
    data: TrainData,
    config: TrainConfig,
    M: int | None = None,
    guard: bool = False,
) -> TrainState:
    """M consecutive (forward, loss, backward, Adam step) cycles on one batch."""
    M = config.inner_iterations if M is None else M
    totals: list[float] = []
    for m in range(M):
        parts = batch_losses(state.model, batch, data, config)
        try:
            loss = total_loss(parts, config.weights)
        except NonFiniteLoss as e:
            raise TrainingDiverged(state.iteration + 1, e.term, e.value) from e
        value = float(loss.detach())
        if guard and len(totals) >= config.guard_min_history:
            med = statistics.median(totals[-config.guard_window:])
            if value > config.guard_factor * med:
                log.warning(
                    "loss %.4g exceeds %gx trailing median %.4g in batch %s; rolling back",
                    value, config.guard_factor, med, batch.label(),
                )
                raise _Rollback()
        totals.append(value)
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        state.optimizer.step()
        state.iteration += 1
        for term, v in parts.items():
            state.history.append(LossRecord(state.epoch + 1, state.batch + 1, state.iteration, term, float(v.detach())))
        state.history.append(LossRecord(state.epoch + 1, state.batch + 1, state.iteration, "total", value))
    return state


# ---------------------------------------------------------------- training


@dataclass
class DipSnapshot:
    iteration: int
    loss: float
    image: torch.Tensor  # (3, H, W)
    state_dict: dict


@dataclass
class TrainResult:
    config: TrainConfig
    noise: NoiseMapSet
    models: list[Generator]
    history: list[LossRecord]
    flows: FlowTargets | None = None
    dip_snapshots: list[DipSnapshot] | None = None
    dip_records: list[list[tuple[int, float]]] | None = None
    steps: int = 0


def to_tensors(video: VideoSequence, masks: MaskSequence, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    frames = torch.from_numpy(np.ascontiguousarray(video.frames.transpose(0, 3, 1, 2))).to(dtype)
    return frames, torch.from_numpy(masks.masks).to(dtype)


def train(
    video: VideoSequence,
    masks: MaskSequence,
    config: TrainConfig,
    flow_provider: flow_ops.FlowProvider | None = None,
    *,
    checkpoint_dir: str | Path | None = None,
    flow_cache: str | Path | None = None,
    extractor: FeatureExtractor | None = None,
    dtype=torch.float32,
    progress: Callable[[str], None] | None = None,
    resume: str | Path | None = None,
) -> TrainResult:
    """Fit the generator(s) of ``config.mode`` to one masked video.

    ``resume`` names a checkpoint written by a previous run of the same
    configuration; training continues from its counters (video modes only).
    """
    if video.frames.shape[:3] != masks.masks.shape:
        raise ValueError(f"shape mismatch: video {video.frames.shape[:3]} vs masks {masks.masks.shape}")
    T, H, W = masks.masks.shape
    noise = make_noise_maps(T, H, W, derive_seed(config.seed, SEED_NOISE), dtype)
    frames, mask_t = to_tensors(video, masks, dtype)
    if extractor is None and config.mode == "DIP-Vid-Flow":
        extractor = make_extractor(config.perceptual)
    if extractor is None and config.mode == "DIP-Vid-Flow" and config.weights.perceptual > 0:
        report = log.info if config.perceptual == "none" else log.warning
        report("no perceptual feature extractor configured; perceptual term disabled")

    if config.mode == "DIP":
        if resume is not None:
            raise ValueError("resuming is supported for video modes only")
        return _train_dip(frames, mask_t, noise, config, dtype, progress)

    flows = None
    if config.mode == "DIP-Vid-Flow" and T > 1:
        if flow_provider is None:
            raise ValueError("DIP-Vid-Flow needs a flow provider")
        flows = precompute_flows(video, masks, flow_provider, config.intervals, flow_cache)
    data = TrainData(frames, mask_t, noise, flows, extractor)
    return _train_video(data, config, dtype, checkpoint_dir, progress, resume)


def _batch_plan(T: int, config: TrainConfig) -> tuple[int, tuple[int, ...], tuple[str, ...]]:
    N = config.batch_size
    if T < N:
        log.warning("video too short: %d frames for batch size %d; using batch size %d", T, N, T)
        N = T
    if config.mode == "DIP-Vid-Flow":
        return N, config.intervals, (FORWARD, BACKWARD)
    # image-only modes use plain consecutive batches; direction carries no information
    return N, (1,), (FORWARD,)


def _train_video(data: TrainData, config: TrainConfig, dtype, checkpoint_dir, progress, resume=None) -> TrainResult:
    T = data.frames.shape[0]
    N, intervals, directions = _batch_plan(T, config)
    saved_order = None
    if resume is not None:
        state, saved_order = load_state(resume, config)
    else:
        state = new_state(config, derive_seed(config.seed, SEED_INIT), dtype)
    ckpt = Path(checkpoint_dir) / "checkpoint.pt" if checkpoint_dir is not None else None

    for epoch in range(state.epoch, config.epochs):
        state.epoch = epoch
        if saved_order is not None:
            order, saved_order = saved_order, None
        else:
            order = enumerate_batches(T, N, intervals, derive_seed(config.seed, SEED_SHUFFLE, epoch), directions)
            state.batch = 0
        reshuffles = 0
        while state.batch < len(order):
            batch = order[state.batch]
            snap = state.snapshot()
            guard = state.rollbacks < config.max_rollbacks
            try:
                train_batch(state, batch, data, config, guard=guard)
            except _Rollback:
                state.restore(snap)
                state.rollbacks += 1
                reshuffles += 1
                rest = order[state.batch:]
                perm = np.random.default_rng(derive_seed(config.seed, SEED_SHUFFLE, epoch, reshuffles)).permutation(len(rest))
                order[state.batch:] = [rest[k] for k in perm]
                continue
            except TrainingDiverged:
                if ckpt is not None:
                    state.save(ckpt, config, order)
                raise
            state.batch += 1
        if progress is not None:
            last = [r.value for r in state.history if r.term == "total"][-1:]
            progress(f"epoch {epoch + 1}/{config.epochs} done, last loss {last[0] if last else float('nan'):.5f}")
        if ckpt is not None:
            state.epoch = epoch + 1
            state.batch = 0
            state.save(ckpt, config)
    state.epoch = config.epochs
    if state.iteration:
        recalibrate_batchnorm(state.model, data.noise.maps)
    return TrainResult(config, data.noise, [state.model], state.history, data.flows, steps=state.iteration)


def _train_dip(frames, masks, noise, config: TrainConfig, dtype, progress) -> TrainResult:
    """Independent per-frame generators; keep the lowest-loss snapshot of each."""
    models, snaps, records, history = [], [], [], []
    steps = 0
    for i in range(frames.shape[0]):
        state = new_state(config, derive_seed(config.seed, SEED_INIT, i), dtype)
        batch = make_batch(i, 1, FORWARD, 1)
        data = TrainData(frames, masks, noise)
        best: DipSnapshot | None = None
        rec = []
        for it in range(1, config.dip_iterations + 1):
            out = []
            parts = batch_losses(state.model, batch, data, config, out)
            loss = total_loss(parts, config.weights)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDiverged(it, "image", value)
            if it % config.dip_snapshot_every == 0:
                rec.append((it, value))
                if best is None or value < best.loss:
                    image = out[0].image[0].detach().clone()
                    best = DipSnapshot(it, value, image, copy.deepcopy(state.model.state_dict()))
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            state.optimizer.step()
            steps += 1
            history.append(LossRecord(i + 1, 1, it, "image", value))
        if best is not None:
            state.model.load_state_dict(best.state_dict)
        models.append(state.model)
        snaps.append(best)
        records.append(rec)
        if progress is not None:
            progress(f"frame {i + 1}/{frames.shape[0]} done, best loss {best.loss if best else float('nan'):.5f}")
    return TrainResult(config, noise, models, history, None, snaps, records, steps)


# ---------------------------------------------------------------- inference


def infer_video(model: Generator, noise: NoiseMapSet) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Generate every frame in inference mode: images (T, 3, H, W), flows (T, 6, 2, H, W) or None."""
    model.eval()
    with torch.no_grad():
        if model.spec.variant == "conv3d":
            out = forward_3d(model, noise.maps, mode="infer")
            return out.image, out.flows
        images, flows = [], []
        for i in range(len(noise)):
            out = model(noise.maps[i:i + 1])
            images.append(out.image[0])
            if out.flows is not None:
                flows.append(out.flows[0])
    return torch.stack(images), (torch.stack(flows) if flows else None)


def generate(result: TrainResult) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Final generated frames (and flows) of a training run."""
    if result.config.mode == "DIP":
        images = []
        for i, model in enumerate(result.models):
            snap = result.dip_snapshots[i] if result.dip_snapshots else None
            if snap is not None:
                images.append(snap.image)
            else:
                images.append(infer_video(model, NoiseMapSet(result.noise.maps[i:i + 1], result.noise.seed))[0][0])
        return torch.stack(images), None
    return infer_video(result.models[0], result.noise)


def composite_output(generated, original, mask):
    """Known pixels from the input, hole pixels from the generator.

    Works on numpy arrays or tensors; frames are (..., H, W, 3) for numpy and
    (..., 3, H, W) for tensors, masks (..., H, W).
    """
    if isinstance(generated, torch.Tensor):
        if generated.shape != original.shape or generated.shape[-2:] != mask.shape[-2:]:
            raise ValueError(f"shape mismatch: {tuple(generated.shape)}, {tuple(original.shape)}, {tuple(mask.shape)}")
        m = mask.unsqueeze(-3).to(torch.bool)
        return torch.where(m, original, generated)
    generated, original, mask = np.asarray(generated), np.asarray(original), np.asarray(mask)
    if generated.shape != original.shape or generated.shape[:-1] != mask.shape:
        raise ValueError(f"shape mismatch: {generated.shape}, {original.shape}, {mask.shape}")
    return np.where(mask[..., None].astype(bool), original, generated)


def total_steps(T: int, config: TrainConfig) -> int:
    """Optimizer steps a video-mode run takes (ignoring rollbacks)."""
    if config.mode == "DIP":
        return T * config.dip_iterations
    N, intervals, directions = _batch_plan(T, config)
    return config.epochs * len(all_batches(T, N, intervals, directions)) * config.inner_iterations


def format_loss_log(history: Iterable[LossRecord]) -> str:
    lines = ["epoch\tbatch\titeration\tterm\tvalue"]
    lines += [f"{r.epoch}\t{r.batch}\t{r.iteration}\t{r.term}\t{r.value!r}" for r in history]
    return "\n".join(lines) + "\n"
