"""Optimizers, learning-rate schedules, and the training loops.

Pre-training teaches the network to invert procedural composites against
their pseudo alphas; fine-tuning starts from a saved checkpoint (whole net
or encoder only) and trains on the labeled toy matting set, evaluating on
its held-out split. Both loops are bit-reproducible from (seed, config) in
single-worker mode; extra workers only prefetch samples by index, so the
consumed sequence never depends on thread timing.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import engine, losses, metrics, model as nets, synth
from .data import (BG_VALUE_RANGE, TEXTURE_KINDS, ToyMattingItem,
                   procedural_texture, shade_to_range, toy_matting_dataset,
                   train_test_split)
from .engine import NonFiniteError, Parameter
from .losses import LossBreakdown, LossWeights
from .metrics import EvalResult
from .model import LOAD_STAGES, MattingNet, ModelConfig
from .synth import (CompositeSample, PretextConfig, SampleBatch, Trimap,
                    TrimapRatios, derive_seed)

TRAIN_LOG_NAME = "train_log.csv"
EVAL_LOG_NAME = "eval_log.csv"
CHECKPOINT_NAME = "model.ckpt"
RUN_CONFIG_NAME = "run_config.json"
ABLATION_CSV_NAME = "ablation.csv"

GRAD_CLIP_NORM = 5.0
OPTIM_STEP_KEY = "optim.step"

# Independent per-purpose rng streams, keyed as default_rng([seed, stream]).
_STREAM_MODEL_INIT = 0x4D4F44
_STREAM_BATCH_PICK = 0x465442
_STREAM_BATCH_ITEM = 0x465449
_STREAM_EVAL_TASK = 0x45564C


# --------------------------------------------------------------------------
# Optimizer


@dataclass(frozen=True)
class OptimConfig:
    """Adam-family optimizer settings. ``adamw`` applies decoupled weight
    decay (p -= lr*wd*p) before the Adam delta; ``adam`` applies none."""

    kind: str = "adamw"
    base_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"optimizer kind must be adam or adamw, got {self.kind!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


# The pretraining base lr is tuned for the default desk budget (batch 8,
# 2000 steps): at this batch size the loss is still descending steeply at
# the end of the budget for any smaller rate.
PRETRAIN_OPTIM = OptimConfig(kind="adamw", base_lr=3e-3, beta1=0.9, beta2=0.95,
                             weight_decay=0.05)
FINETUNE_OPTIM = OptimConfig(kind="adam", base_lr=3e-4, beta1=0.5, beta2=0.999,
                             weight_decay=0.0)


@dataclass
class OptimState:
    """First/second moments per parameter plus the completed-step count."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def fresh(cls, params: Sequence[Parameter]) -> "OptimState":
        return cls(step=0,
                   m={p.name: np.zeros_like(p.values) for p in params},
                   v={p.name: np.zeros_like(p.values) for p in params})

    def to_entries(self) -> dict[str, np.ndarray]:
        """Checkpoint entries under the ``optim.`` prefix (step included, as
        a one-element array; float32 holds these step counts exactly)."""
        entries = {OPTIM_STEP_KEY: np.array([self.step], dtype=np.float32)}
        for name, arr in self.m.items():
            entries[f"optim.m.{name}"] = arr
        for name, arr in self.v.items():
            entries[f"optim.v.{name}"] = arr
        return entries

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray],
                     params: Sequence[Parameter]) -> "OptimState":
        if OPTIM_STEP_KEY not in entries:
            raise ValueError("checkpoint holds no optimizer state; cannot resume")
        state = cls.fresh(params)
        state.step = int(entries[OPTIM_STEP_KEY][0])
        for p in params:
            for moments in (state.m, state.v):
                key = ("optim.m." if moments is state.m else "optim.v.") + p.name
                if key not in entries:
                    raise ValueError(f"checkpoint optimizer state lacks {key}")
                arr = entries[key]
                if arr.shape != p.values.shape:
                    raise ValueError(
                        f"{key}: shape {arr.shape} != parameter {p.values.shape}")
                moments[p.name] = arr.astype(p.values.dtype, copy=True)
        return state


def optimizer_step(params: Sequence[Parameter], grads: Sequence[np.ndarray],
                   state: OptimState, config: OptimConfig, lr: float) -> None:
    """One bias-corrected Adam/AdamW update, in place, in float32."""
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if g is None:
            raise ValueError(f"missing gradient for parameter {p.name}")
        if g.shape != p.values.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter "
                             f"{p.name} shape {p.values.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name}")
    state.step += 1
    t = state.step
    correction1 = 1.0 - config.beta1 ** t
    correction2 = 1.0 - config.beta2 ** t
    for p, g in zip(params, grads):
        g = g.astype(p.values.dtype, copy=False)
        m, v = state.m[p.name], state.v[p.name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        if config.kind == "adamw" and config.weight_decay:
            p.tensor.values *= 1.0 - lr * config.weight_decay
        p.tensor.values -= lr * (m / correction1) / (np.sqrt(v / correction2)
                                                     + config.eps)


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most
    max_norm; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                          for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# --------------------------------------------------------------------------
# Learning-rate schedule


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    warmup_steps: int = 0
    floor_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 <= warmup_steps < total_steps, got "
                f"{self.warmup_steps} / {self.total_steps}")
        if self.floor_lr < 0:
            raise ValueError(f"floor_lr must be >= 0, got {self.floor_lr}")


def lr_at(step: int, schedule: ScheduleConfig, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to floor_lr.

    Continuous at the junction: warmup ends at base_lr*(warmup)/warmup and
    the cosine starts at cos(0) = 1, i.e. exactly base_lr.
    """
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(
            f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return base_lr * (step + 1) / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / span
    return schedule.floor_lr + 0.5 * (base_lr - schedule.floor_lr) * (
        1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------
# Run configuration


def default_pretext_config() -> PretextConfig:
    """Desk-scale pretext defaults: 64x64 samples on an 8x8 cell grid."""
    return PretextConfig(size=64, grid=8)


@dataclass
class RunConfig:
    """Everything one training run depends on.

    The optimizer and schedule default per mode (AdamW 0.9/0.95 with decay
    0.05 for pretraining, Adam 0.5/0.999 without decay for fine-tuning;
    warmup defaults to 10% of the step budget). ``resume`` restarts an
    interrupted run bit-exactly from a checkpoint that carries optimizer
    state; plain ``init="checkpoint"`` loads weights only.
    """

    mode: str
    out_dir: Path
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    workers: int = 1
    pretext: PretextConfig = field(default_factory=default_pretext_config)
    model: ModelConfig | None = None
    use_trimap_input: bool = True
    optim: OptimConfig | None = None
    schedule: ScheduleConfig | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    levels: int = 5
    init: str = "random"
    init_checkpoint: Path | None = None
    load_stage: str = "encoder_decoder"
    resume: bool = False
    eval_every: int = 0
    checkpoint_every: int = 0
    dataset_size: int = 40
    dataset_seed: int = 7
    image_size: int = 64

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"mode must be pretrain or finetune, got {self.mode!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.init not in ("random", "checkpoint"):
            raise ValueError(f"init must be random or checkpoint, got {self.init!r}")
        if self.init == "checkpoint" and self.init_checkpoint is None:
            raise ValueError("init='checkpoint' requires init_checkpoint")
        if self.load_stage not in LOAD_STAGES:
            raise ValueError(f"load_stage must be one of {sorted(LOAD_STAGES)}, "
                             f"got {self.load_stage!r}")
        if self.resume:
            if self.init != "checkpoint":
                raise ValueError("resume requires init='checkpoint'")
            if self.load_stage != "encoder_decoder":
                raise ValueError("resume requires load_stage='encoder_decoder'")

    def resolved_model(self) -> ModelConfig:
        wanted = 6 if self.use_trimap_input else 3
        if self.model is None:
            return ModelConfig(input_channels=wanted)
        if self.model.input_channels != wanted:
            raise ValueError(
                f"model.input_channels={self.model.input_channels} conflicts "
                f"with use_trimap_input={self.use_trimap_input} (wants {wanted})")
        return self.model

    def resolved_optim(self) -> OptimConfig:
        if self.optim is not None:
            return self.optim
        return PRETRAIN_OPTIM if self.mode == "pretrain" else FINETUNE_OPTIM

    def resolved_schedule(self) -> ScheduleConfig:
        return self.schedule or ScheduleConfig(total_steps=self.steps,
                                               warmup_steps=self.steps // 10)


@dataclass
class StepLog:
    step: int
    lr: float
    breakdown: LossBreakdown


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    history: list[StepLog]
    eval_log_path: Path | None = None
    eval_history: list[tuple[int, EvalResult]] = field(default_factory=list)

    @property
    def final_eval(self) -> EvalResult | None:
        return self.eval_history[-1][1] if self.eval_history else None


# --------------------------------------------------------------------------
# Shared loop plumbing


def _write_run_config(out_dir: Path, run: RunConfig) -> None:
    blob = json.dumps(asdict(run), indent=2, default=str, sort_keys=False)
    (out_dir / RUN_CONFIG_NAME).write_text(blob + "\n")


def _prepare_net(run: RunConfig) -> tuple[MattingNet, OptimState, int]:
    """Build, optionally load, and pair the net with optimizer state.

    Returns (net, state, start_step); start_step is nonzero only when
    resuming, so the sample-index and lr streams continue where they left
    off.
    """
    config = run.resolved_model()
    net = nets.build(config, np.random.default_rng([run.seed, _STREAM_MODEL_INIT]))
    state = OptimState.fresh(net.parameters())
    start_step = 0
    if run.init == "checkpoint":
        ckpt = nets.load_checkpoint(run.init_checkpoint)
        nets.load_parameters(net, ckpt.entries, stage=run.load_stage)
        if run.resume:
            state = OptimState.from_entries(ckpt.entries, net.parameters())
            start_step = state.step
            if start_step >= run.steps:
                raise ValueError(
                    f"checkpoint already covers {start_step} steps; "
                    f"nothing to resume within a {run.steps}-step budget")
    return net, state, start_step


def _prefetched(make, indices, workers: int) -> Iterator:
    """Yield make(i) in index order; extra workers only prefetch ahead."""
    if workers <= 1:
        yield from map(make, indices)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        it = iter(indices)
        for i in itertools.islice(it, 2 * workers):
            pending.append(pool.submit(make, i))
        for i in it:
            ready = pending.popleft()
            pending.append(pool.submit(make, i))
            yield ready.result()
        while pending:
            yield pending.popleft().result()


def train_step(net: MattingNet, batch: SampleBatch, state: OptimState,
               optim: OptimConfig, lr: float,
               weights: LossWeights, levels: int) -> LossBreakdown:
    """Forward, copy-rule merge, loss, backward, clip, optimizer update."""
    onehot = batch.one_hot() if net.config.input_channels == 6 else None
    pred = net.forward(batch.images_nchw(), onehot)
    merged = nets.merge_with_copy_rule(pred, batch.trimap)
    loss, breakdown = losses.total_loss(merged, batch, weights, levels=levels)
    net.zero_grads()
    engine.backward(loss)
    params = net.parameters()
    grads = [p.tensor.grad for p in params]
    clip_global_norm(grads, GRAD_CLIP_NORM)
    optimizer_step(params, grads, state, optim, lr)
    return breakdown


def _save_with_state(net: MattingNet, state: OptimState, path: Path) -> None:
    net.save(path, extra_entries=state.to_entries())


# --------------------------------------------------------------------------
# Pre-training


def pretext_sample_for_index(run: RunConfig, index: int) -> CompositeSample:
    """The index-th pretext sample of a run; pure in (run.seed, config)."""
    return synth.procedural_pretext_sample(derive_seed(run.seed, index),
                                           run.pretext)


def pretrain(run: RunConfig) -> TrainResult:
    """Train on procedural pretext samples; logs per-step losses and writes
    a final checkpoint (plus periodic ones when checkpoint_every > 0)."""
    if run.mode != "pretrain":
        raise ValueError(f"pretrain() called with mode {run.mode!r}")
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_config(out_dir, run)
    net, state, start_step = _prepare_net(run)
    optim, schedule = run.resolved_optim(), run.resolved_schedule()
    sample_indices = range(start_step * run.batch_size,
                           run.steps * run.batch_size)
    stream = _prefetched(lambda i: pretext_sample_for_index(run, i),
                         sample_indices, run.workers)
    log_path = out_dir / TRAIN_LOG_NAME
    checkpoint_path = out_dir / CHECKPOINT_NAME
    history: list[StepLog] = []
    with open(log_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("step", "lr") + LossBreakdown.CSV_FIELDS)
        for step in range(start_step, run.steps):
            batch = SampleBatch.from_samples(
                itertools.islice(stream, run.batch_size))
            lr = lr_at(step, schedule, optim.base_lr)
            try:
                breakdown = train_step(net, batch, state, optim, lr,
                                       run.loss_weights, run.levels)
            except NonFiniteError as exc:
                raise NonFiniteError(f"aborted at step {step}: {exc}") from exc
            writer.writerow((step, lr, breakdown.l1, breakdown.comp,
                             breakdown.lap, breakdown.total))
            history.append(StepLog(step, lr, breakdown))
            if run.checkpoint_every and (step + 1) % run.checkpoint_every == 0 \
                    and step + 1 < run.steps:
                _save_with_state(net, state,
                                 out_dir / f"checkpoint_step{step + 1:06d}.ckpt")
    _save_with_state(net, state, checkpoint_path)
    return TrainResult(checkpoint_path=checkpoint_path, log_path=log_path,
                       history=history)


# --------------------------------------------------------------------------
# Fine-tuning


def composite_item(item: ToyMattingItem, rng: np.random.Generator) -> CompositeSample:
    """Composite a labeled item over a random procedural background (shaded
    dark, like every background source), with a trimap derived from the
    ground-truth alpha."""
    size = item.gt_alpha.shape[0]
    kind = TEXTURE_KINDS[int(rng.integers(0, len(TEXTURE_KINDS)))]
    background = shade_to_range(procedural_texture(kind, size, rng),
                                BG_VALUE_RANGE)
    trimap = synth.make_finetune_trimap(item.gt_alpha, rng)
    fused = synth.composite(item.fg, background, item.gt_alpha)
    return CompositeSample(fused=fused, foreground=item.fg,
                           background=background, alpha=item.gt_alpha,
                           trimap=trimap, seed=item.index)


def predict_alpha(net: MattingNet, fused: np.ndarray, trimap) -> np.ndarray:
    """(H,W) float32 alpha for one image: pad so the net divides the input,
    forward, copy-rule merge, unpad."""
    labels = trimap.labels if hasattr(trimap, "labels") else np.asarray(trimap)
    multiple = max(metrics.PAD_MULTIPLE, net.config.spatial_multiple)
    image, original = metrics.pad_to_multiple(np.asarray(fused), multiple)
    padded_labels, _ = metrics.pad_to_multiple(labels, multiple)
    batch = np.ascontiguousarray(image.transpose(2, 0, 1))[None]
    onehot = (Trimap(padded_labels).one_hot()[None]
              if net.config.input_channels == 6 else None)
    pred = net.forward(batch, onehot)
    merged = nets.merge_with_copy_rule(pred, padded_labels)
    return metrics.unpad(merged.values[0, 0].astype(np.float32), original)


def evaluate_model(net: MattingNet, samples: Sequence[CompositeSample]) -> EvalResult:
    """Mean alpha-matting metrics over fixed evaluation composites."""
    if not samples:
        raise ValueError("cannot evaluate on zero samples")
    results = [metrics.evaluate(predict_alpha(net, s.fused, s.trimap),
                                s.alpha, s.trimap) for s in samples]
    return EvalResult(
        sad=float(np.mean([r.sad for r in results])),
        mse=float(np.mean([r.mse for r in results])),
        grad=float(np.mean([r.grad for r in results])),
        conn=float(np.mean([r.conn for r in results])),
        unknown_pixel_count=sum(r.unknown_pixel_count for r in results))


def finetune(run: RunConfig) -> TrainResult:
    """Fine-tune on the labeled toy set and track held-out metrics.

    Training batches are drawn (with replacement) from the train split and
    re-composited over fresh backgrounds each step; evaluation composites
    are fixed by dataset_seed alone, so runs that differ only in run seed
    or initialization face the identical held-out task.
    """
    if run.mode != "finetune":
        raise ValueError(f"finetune() called with mode {run.mode!r}")
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_config(out_dir, run)
    items = toy_matting_dataset(run.dataset_size, run.image_size,
                                run.dataset_seed)
    train_items, held_out = train_test_split(items)
    if not train_items or not held_out:
        raise ValueError(
            f"dataset_size={run.dataset_size} leaves an empty split")
    eval_samples = [
        composite_item(item, np.random.default_rng(
            [run.dataset_seed, _STREAM_EVAL_TASK, item.index]))
        for item in held_out]
    net, state, start_step = _prepare_net(run)
    optim, schedule = run.resolved_optim(), run.resolved_schedule()

    def batch_for_step(step: int) -> SampleBatch:
        picks = np.random.default_rng(
            [run.seed, _STREAM_BATCH_PICK, step]).integers(
                0, len(train_items), size=run.batch_size)
        samples = [
            composite_item(train_items[int(k)], np.random.default_rng(
                [run.seed, _STREAM_BATCH_ITEM, step, slot]))
            for slot, k in enumerate(picks)]
        return SampleBatch.from_samples(samples)

    log_path = out_dir / TRAIN_LOG_NAME
    eval_log_path = out_dir / EVAL_LOG_NAME
    checkpoint_path = out_dir / CHECKPOINT_NAME
    history: list[StepLog] = []
    eval_history: list[tuple[int, EvalResult]] = []
    batches = _prefetched(batch_for_step, range(start_step, run.steps),
                          run.workers)
    with open(log_path, "w", newline="") as handle, \
            open(eval_log_path, "w", newline="") as eval_handle:
        writer = csv.writer(handle)
        writer.writerow(("step", "lr") + LossBreakdown.CSV_FIELDS)
        eval_writer = csv.writer(eval_handle)
        eval_writer.writerow(("step", "sad", "mse", "grad", "conn"))
        for step in range(start_step, run.steps):
            batch = next(batches)
            lr = lr_at(step, schedule, optim.base_lr)
            try:
                breakdown = train_step(net, batch, state, optim, lr,
                                       run.loss_weights, run.levels)
            except NonFiniteError as exc:
                raise NonFiniteError(f"aborted at step {step}: {exc}") from exc
            writer.writerow((step, lr, breakdown.l1, breakdown.comp,
                             breakdown.lap, breakdown.total))
            history.append(StepLog(step, lr, breakdown))
            due = run.eval_every and (step + 1) % run.eval_every == 0
            if due or step + 1 == run.steps:
                result = evaluate_model(net, eval_samples)
                eval_writer.writerow((step + 1, result.sad, result.mse,
                                      result.grad, result.conn))
                eval_history.append((step + 1, result))
            if run.checkpoint_every and (step + 1) % run.checkpoint_every == 0 \
                    and step + 1 < run.steps:
                _save_with_state(net, state,
                                 out_dir / f"checkpoint_step{step + 1:06d}.ckpt")
    _save_with_state(net, state, checkpoint_path)
    return TrainResult(checkpoint_path=checkpoint_path, log_path=log_path,
                       history=history, eval_log_path=eval_log_path,
                       eval_history=eval_history)


# --------------------------------------------------------------------------
# Unknown-ratio ablation


@dataclass(frozen=True)
class AblationRow:
    theta: float
    sad: float
    mse: float


def ablate_unknown_ratio(thetas: Sequence[float], pretrain_template: RunConfig,
                         finetune_template: RunConfig) -> list[AblationRow]:
    """Pretrain + finetune once per unknown-region ratio theta (foreground
    and background each take (1-theta)/2) and tabulate the final held-out
    SAD/MSE into <pretrain_out>/ablation.csv."""
    if not thetas:
        raise ValueError("need at least one theta")
    root = Path(pretrain_template.out_dir)
    rows = []
    for theta in thetas:
        ratios = TrimapRatios(theta, (1.0 - theta) / 2.0, (1.0 - theta) / 2.0)
        tag = f"theta_{theta:g}"
        pre_run = replace(
            pretrain_template, out_dir=root / tag / "pretrain",
            pretext=replace(pretrain_template.pretext, ratios=ratios))
        pre_result = pretrain(pre_run)
        ft_run = replace(
            finetune_template, out_dir=root / tag / "finetune",
            init="checkpoint", init_checkpoint=pre_result.checkpoint_path,
            resume=False)
        ft_result = finetune(ft_run)
        final = ft_result.final_eval
        rows.append(AblationRow(theta=float(theta), sad=final.sad,
                                mse=final.mse))
    with open(root / ABLATION_CSV_NAME, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("theta", "sad", "mse"))
        for row in rows:
            writer.writerow((row.theta, row.sad, row.mse))
    return rows
