"""Optimisation: AdamW, the one-cycle schedule, value clipping, the two-phase
flow freeze and the training loop with checkpoint/resume."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import write_kv
from .data.augment import AugmentConfig, augment
from .data.synth import FrameSequence
from .errors import NumericError, StateError, UsageError
from .layers import ParamStore
from .loss import LossBreakdown, frame_terms, total_loss
from .metrics import MetricReport, evaluate_video, mean_report
from .model import ContextMotionNet
from .rng import derive_seed, make_rng
from .tensor import PRECISIONS, Tensor

log = logging.getLogger(__name__)

FLOW_PREFIX = "flow."


@dataclass
class Schedule:
    max_lr: float = 1e-4
    total_steps: int = 1000
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def min_lr(self) -> float:
        return self.initial_lr / self.final_div_factor


def _cos_blend(start: float, end: float, pct: float) -> float:
    # written so pct=0 gives start and pct=1 gives end with no rounding
    c = math.cos(math.pi * pct)
    return start * (1.0 + c) / 2.0 + end * (1.0 - c) / 2.0


def onecycle_lr(step: int, sched: Schedule) -> float:
    total = sched.total_steps
    if total < 1:
        raise UsageError("schedule needs total_steps >= 1")
    if not 0 <= step <= total:
        raise UsageError(f"step {step} outside [0, {total}]")
    peak = sched.pct_start * total
    if step <= peak:
        return _cos_blend(sched.initial_lr, sched.max_lr, step / peak if peak > 0 else 1.0)
    return _cos_blend(sched.max_lr, sched.min_lr, (step - peak) / (total - peak))


def clip_gradients(grads: dict[str, np.ndarray], bound: float = 1.0) -> dict[str, np.ndarray]:
    """Elementwise clamp to ``[-bound, bound]``."""
    return {k: np.clip(g, -bound, bound) for k, g in grads.items()}


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2


@dataclass
class OptimizerState:
    hyper: AdamW = field(default_factory=AdamW)
    step: int = 0
    m1: dict[str, np.ndarray] = field(default_factory=dict)
    m2: dict[str, np.ndarray] = field(default_factory=dict)
    # per-parameter update count, so parameters unfrozen mid-run get a fresh
    # bias correction
    t: dict[str, int] = field(default_factory=dict)


def adamw_step(params: ParamStore, grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float) -> None:
    """One decoupled-weight-decay Adam update in place.

    Frozen parameters and parameters without a gradient are left alone;
    biases are not decayed.
    """
    hp = state.hyper
    for name, p in params.items():
        if p.frozen or name not in grads:
            continue
        theta = p.tensor.data
        g = grads[name]
        if g.shape != theta.shape:
            raise StateError(f"{name}: gradient {g.shape} vs parameter {theta.shape}")
        m1 = state.m1.get(name)
        m2 = state.m2.get(name)
        if m1 is None:
            m1 = np.zeros_like(theta)
            m2 = np.zeros_like(theta)
        if m1.shape != theta.shape or m2.shape != theta.shape:
            raise StateError(f"{name}: moment shape does not match parameter {theta.shape}")
        t = state.t.get(name, 0) + 1
        m1 = hp.beta1 * m1 + (1.0 - hp.beta1) * g
        m2 = hp.beta2 * m2 + (1.0 - hp.beta2) * (g * g)
        m1_hat = m1 / (1.0 - hp.beta1 ** t)
        m2_hat = m2 / (1.0 - hp.beta2 ** t)
        wd = 0.0 if name.endswith(".bias") else hp.weight_decay
        update = m1_hat / (np.sqrt(m2_hat) + hp.eps) + wd * theta
        p.tensor.data = (theta - lr * update).astype(theta.dtype)
        state.m1[name], state.m2[name], state.t[name] = m1, m2, t
    state.step += 1


# -- batches --------------------------------------------------------------

@dataclass
class Batch:
    frames: list[Tensor]
    alpha: list[Tensor]
    fg: list[Tensor]
    flow: list[Tensor]
    seed: int = 0


def stack_sequences(seqs: list[FrameSequence], precision: str = "single", seed: int = 0) -> Batch:
    """Stack equal-length sequences on the batch axis, one Tensor per frame."""
    dt = PRECISIONS[precision]
    n = len(seqs[0])

    def col(attr: str, t: int) -> Tensor:
        return Tensor(np.stack([getattr(s, attr)[t] for s in seqs]).astype(dt))

    has_flow = all(s.flow is not None for s in seqs)
    return Batch(
        frames=[col("frames", t) for t in range(n)],
        alpha=[col("alpha", t) for t in range(n)],
        fg=[col("fg", t) for t in range(n)],
        flow=[col("flow", t) for t in range(n)] if has_flow else [],
        seed=seed,
    )


def sequence_loss(model: ContextMotionNet, batch: Batch) -> LossBreakdown:
    ro = model.rollout(batch.frames, batch.flow or None)
    terms = [frame_terms(o.alpha, o.foreground, a, f)
             for o, a, f in zip(ro.outputs, batch.alpha, batch.fg)]
    return total_loss(terms)


# -- training loop --------------------------------------------------------

@dataclass
class TrainConfig:
    total_steps: int = 1000
    batch_size: int = 1
    phase_split: float = 0.5
    crop: int = 64
    augment: bool = True
    seed: int = 0
    ckpt_every: int = 0
    max_lr: float = 1e-4
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    weight_decay: float = 1e-2
    clip: float = 1.0

    KEYS = {
        "train.steps": "total_steps",
        "train.batch": "batch_size",
        "train.phase_split": "phase_split",
        "train.crop": "crop",
        "train.augment": "augment",
        "train.seed": "seed",
        "train.ckpt_every": "ckpt_every",
        "train.max_lr": "max_lr",
        "train.pct_start": "pct_start",
        "train.div_factor": "div_factor",
        "train.final_div_factor": "final_div_factor",
        "train.weight_decay": "weight_decay",
        "train.clip": "clip",
    }

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1:
            raise UsageError("train.steps and train.batch must be >= 1")
        if not 0.0 <= self.phase_split <= 1.0:
            raise UsageError("train.phase_split must lie in [0, 1]")

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.max_lr, self.total_steps, self.pct_start, self.div_factor,
                        self.final_div_factor)

    @property
    def split_step(self) -> int:
        return int(round(self.phase_split * self.total_steps))

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, attr in cls.KEYS.items():
            if key in kv:
                raw = kv[key]
                kind = types[attr]
                if kind in (bool, "bool"):
                    kwargs[attr] = raw.lower() in ("1", "true", "yes", "on")
                elif kind in (int, "int"):
                    kwargs[attr] = int(raw)
                else:
                    kwargs[attr] = float(raw)
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, str]:
        return {key: str(getattr(self, attr)) for key, attr in self.KEYS.items()}


def format_log_line(step: int, lr: float, values: dict[str, float]) -> str:
    return " ".join([str(step), repr(lr)] + [repr(values[k]) for k in ("loss", "l1a", "lap", "l1fg")])


class Trainer:
    """Owns the model parameters' optimizer state and the step counter.

    Every random choice is derived from ``(cfg.seed, step)``, so a run resumed
    from a checkpoint replays the remaining steps exactly.
    """

    def __init__(self, model: ContextMotionNet, sequences: list[FrameSequence], cfg: TrainConfig,
                 out_dir=None, log_fn: Callable[[str], None] | None = None,
                 aug_cfg: AugmentConfig | None = None):
        if not sequences:
            raise UsageError("training needs at least one sequence")
        self.model = model
        self.sequences = sequences
        self.cfg = cfg
        self.sched = cfg.schedule
        self.opt = OptimizerState(AdamW(weight_decay=cfg.weight_decay))
        self.step = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log_fn = log_fn
        self.aug_cfg = aug_cfg or AugmentConfig()
        self.history: list[dict[str, float]] = []

    def apply_phase(self, step: int) -> None:
        frozen = step < self.cfg.split_step
        self.model.params.set_frozen(FLOW_PREFIX, frozen)

    def batch_for(self, step: int) -> Batch:
        cfg = self.cfg
        rng = make_rng(cfg.seed, "batch", step)
        picks = rng.integers(0, len(self.sequences), size=cfg.batch_size)
        seqs = []
        for b, idx in enumerate(picks):
            seq = self.sequences[int(idx)]
            if cfg.augment:
                seq = augment(seq, derive_seed(cfg.seed, "augment", step, b), cfg.crop, self.aug_cfg)
            seqs.append(seq)
        return stack_sequences(seqs, self.model.precision, derive_seed(cfg.seed, "batch", step))

    def _dump_failure(self, step: int, batch: Batch, values: dict) -> Path | None:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"nonfinite_step{step:06d}.txt"
        write_kv(path, {"step": step, "batch_seed": batch.seed, "root_seed": self.cfg.seed,
                        **{k: repr(v) for k, v in values.items()}})
        return path

    def train_step(self) -> dict[str, float]:
        step = self.step
        if step >= self.cfg.total_steps:
            raise UsageError("training already finished")
        self.apply_phase(step)
        lr = onecycle_lr(step, self.sched)
        batch = self.batch_for(step)
        tape = T.Tape()
        try:
            with tape:
                losses = sequence_loss(self.model, batch)
        except NumericError as exc:
            where = self._dump_failure(step, batch, {})
            raise NumericError(f"non-finite value at step {step} (batch seed {batch.seed}): {exc}; "
                               f"dump: {where}") from exc
        values = losses.values()
        if not all(math.isfinite(v) for v in values.values()):
            where = self._dump_failure(step, batch, values)
            raise NumericError(f"non-finite loss at step {step} (batch seed {batch.seed}); dump: {where}")
        leaf_grads = tape.backward(losses.total)
        grads = {}
        for name, t in self.model.params.trainable():
            g = leaf_grads.get(t)
            if g is not None:
                grads[name] = g
        if not all(np.isfinite(g).all() for g in grads.values()):
            where = self._dump_failure(step, batch, values)
            raise NumericError(f"non-finite gradient at step {step} (batch seed {batch.seed}); dump: {where}")
        grads = clip_gradients(grads, self.cfg.clip)
        adamw_step(self.model.params, grads, self.opt, lr)
        self.step += 1
        record = {"step": step, "lr": lr, **values}
        self.history.append(record)
        if self.log_fn is not None:
            self.log_fn(format_log_line(step, lr, values))
        if self.cfg.ckpt_every and self.step % self.cfg.ckpt_every == 0 and self.out_dir is not None:
            self.save(self.out_dir / f"ckpt_{self.step:06d}.cmck")
        return record

    def run(self, until: int | None = None, callback=None) -> list[dict[str, float]]:
        stop = self.cfg.total_steps if until is None else min(until, self.cfg.total_steps)
        while self.step < stop:
            rec = self.train_step()
            if callback is not None:
                callback(self, rec)
        return self.history

    def save(self, path) -> None:
        self.out_dir and self.out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint.save(path, self.model.params, self.opt, self.step, self.cfg.seed)

    def resume(self, path) -> None:
        step, seed = checkpoint.load(path, self.model.params, self.opt)
        if seed != self.cfg.seed:
            raise StateError(f"checkpoint seed {seed} differs from configured seed {self.cfg.seed}")
        self.step = step


def train_loop(model: ContextMotionNet, sequences: list[FrameSequence], cfg: TrainConfig,
               out_dir=None, log_path=None) -> Trainer:
    """Run a full training job, writing the per-step log and checkpoints."""
    handle = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        def emit(line: str) -> None:
            if handle is not None:
                handle.write(line + "\n")
                handle.flush()
            log.debug(line)

        trainer = Trainer(model, sequences, cfg, out_dir, emit)
        trainer.run()
        if out_dir is not None:
            trainer.save(Path(out_dir) / "final.cmck")
        return trainer
    finally:
        if handle is not None:
            handle.close()


# -- flow supervision and evaluation ------------------------------------

def flow_epe(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel endpoint error of (.., 2, H, W) flows."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return np.sqrt(np.sum(d * d, axis=-3))


def train_flow(model: ContextMotionNet, sequences: list[FrameSequence], steps: int,
               max_lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Fit only the tiny flow network to ground-truth flow with an L1 loss."""
    if model.flow_net is None:
        raise UsageError("model has no tiny flow network")
    params = model.params
    names = [n for n in params.names() if n.startswith(FLOW_PREFIX)]
    opt = OptimizerState(AdamW(weight_decay=0.0))
    sched = Schedule(max_lr=max_lr, total_steps=steps)
    dt = PRECISIONS[model.precision]
    pairs = []
    for seq in sequences:
        for t in range(1, len(seq)):
            pairs.append((seq.frames[t], seq.frames[t - 1], seq.flow[t]))
    cur = Tensor(np.stack([p[0] for p in pairs]).astype(dt))
    prev = Tensor(np.stack([p[1] for p in pairs]).astype(dt))
    gt = Tensor(np.stack([p[2] for p in pairs]).astype(dt))
    history = []
    for step in range(steps):
        tape = T.Tape()
        with tape:
            loss = T.l1_against(model.flow_net(cur, prev), gt)
        leaf = tape.backward(loss)
        grads = {n: leaf[params[n]] for n in names if params[n] in leaf}
        adamw_step(params, clip_gradients(grads), opt, onecycle_lr(step, sched))
        history.append(loss.item())
    return history


def predict_sequence(model: ContextMotionNet, seq: FrameSequence) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Alpha and foreground predictions, each (C, H, W), for one sequence."""
    dt = PRECISIONS[model.precision]
    frames = [Tensor(f[None].astype(dt)) for f in seq.frames]
    flows = [Tensor(f[None].astype(dt)) for f in seq.flow] if seq.flow is not None else None
    with T.no_grad():
        ro = model.rollout(frames, flows)
    alphas = [o.alpha.data[0].astype(np.float64) for o in ro.outputs]
    fgs = [np.clip(o.foreground.data[0].astype(np.float64), 0.0, 1.0) for o in ro.outputs]
    return alphas, fgs


def evaluate_sequences(model: ContextMotionNet, sequences: list[FrameSequence]) -> tuple[MetricReport, list[MetricReport]]:
    per_video = []
    for seq in sequences:
        alphas, fgs = predict_sequence(model, seq)
        per_video.append(evaluate_video(alphas, seq.alpha, fgs, seq.fg))
    return mean_report(per_video), per_video
