"""AdamW with decoupled decay, warmup+cosine schedule, clipping, early stop,
and the full training loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .metrics import evaluate, mse_loss
from .model import ModalityBundle, modality_dropout, save_checkpoint
from .tensor import NumericError, Tensor


# -- AdamW -------------------------------------------------------------------


@dataclass
class AdamWState:
    """First/second moment buffers keyed by parameter name, plus hypers."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    no_decay: frozenset = frozenset()

    @classmethod
    def init(cls, named_params, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8, weight_decay: float = 0.01,
             no_decay=()) -> "AdamWState":
        m = {name: np.zeros_like(p.data) for name, p in named_params}
        v = {name: np.zeros_like(p.data) for name, p in named_params}
        return cls(m=m, v=v, beta1=beta1, beta2=beta2, eps=eps,
                   weight_decay=weight_decay, no_decay=frozenset(no_decay))


def adamw_step(named_params, state: AdamWState, lr: float) -> None:
    """One bias-corrected AdamW update at learning rate ``lr``.

    Weight decay is decoupled and applied to the pre-update parameter value;
    names in ``state.no_decay`` are exempt. A parameter with no gradient
    buffer is treated as having a zero gradient (its moments still decay).
    Non-finite gradients abort before any parameter changes.
    """
    updates = []
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        updates.append((name, p, g))
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p, g in updates:
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step_dir = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        decay = state.weight_decay if name not in state.no_decay else 0.0
        p.data = p.data - lr * step_dir - lr * decay * p.data


def clip_global_norm(grads, threshold: float) -> float:
    """Scale a set of gradient arrays so their joint L2 norm is at most
    ``threshold``; returns the factor applied (1.0 when under). Non-finite
    gradients raise before any scaling."""
    if threshold <= 0.0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    grads = list(grads)
    total = 0.0
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in clip_global_norm")
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm <= threshold:
        return 1.0
    factor = threshold / norm
    for g in grads:
        g *= factor
    return factor


# -- schedule ----------------------------------------------------------------


@dataclass
class Schedule:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr``."""

    warmup_steps: int
    total_steps: int
    base_lr: float
    min_lr: float = 0.0

    def __post_init__(self):
        if self.warmup_steps <= 0:
            raise ValueError("warmup_steps must be positive")
        if self.total_steps < self.warmup_steps:
            raise ValueError("total_steps must be >= warmup_steps")
        if self.base_lr <= 0.0 or self.min_lr < 0.0:
            raise ValueError("learning rates must be positive (min >= 0)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def lr_at(schedule: Schedule, step: int) -> float:
    """Learning rate at an integer step. ``lr_at(0) == 0``, warmup ends
    exactly at ``base_lr``, steps past the horizon hold ``min_lr``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    s = schedule
    if step == s.warmup_steps:
        return s.base_lr  # exact, independent of float rounding
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    if step >= s.total_steps:
        return s.min_lr
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.min_lr + (s.base_lr - s.min_lr) * 0.5 * (
        1.0 + math.cos(math.pi * progress))


# -- early stopping ----------------------------------------------------------


@dataclass
class EarlyStopper:
    """Stop when the monitored value has not strictly improved for
    ``patience`` consecutive epochs. Ties do not count as improvement."""

    patience: int
    best: float = float("-inf")
    since_improvement: int = 0
    best_epoch: int = 0

    def update(self, value: float, epoch: int) -> bool:
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.since_improvement = 0
            return True
        self.since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_improvement >= self.patience

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# -- train loop --------------------------------------------------------------


@dataclass
class TrainSettings:
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    base_lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_threshold: float = 100.0
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError(
                "batch_size, max_epochs, and patience must be >= 1")
        if self.base_lr <= 0.0:
            raise ValueError("base_lr must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train options: {sorted(unknown)}")
        settings = cls(**d)
        settings.validate()
        return settings


@dataclass
class TrainState:
    """Everything needed to resume training mid-run bit-for-bit."""

    adamw: AdamWState
    schedule: Schedule
    stopper: EarlyStopper
    rng: np.random.Generator
    epoch: int = 0

    def to_meta(self) -> dict:
        return {
            "epoch": self.epoch,
            "adamw": {
                "step": self.adamw.step,
                "beta1": self.adamw.beta1,
                "beta2": self.adamw.beta2,
                "eps": self.adamw.eps,
                "weight_decay": self.adamw.weight_decay,
                "no_decay": sorted(self.adamw.no_decay),
            },
            "schedule": self.schedule.to_dict(),
            "stopper": self.stopper.to_dict(),
            "rng": self.rng.bit_generator.state,
        }

    def moment_arrays(self):
        out = []
        for name, arr in self.adamw.m.items():
            out.append((f"opt.m.{name}", arr))
        for name, arr in self.adamw.v.items():
            out.append((f"opt.v.{name}", arr))
        return out

    @classmethod
    def from_meta(cls, meta: dict, arrays: dict) -> "TrainState":
        ad = meta["adamw"]
        m = {}
        v = {}
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                m[key[len("opt.m."):]] = arr
            elif key.startswith("opt.v."):
                v[key[len("opt.v."):]] = arr
        adamw = AdamWState(
            m=m, v=v, step=int(ad["step"]), beta1=ad["beta1"],
            beta2=ad["beta2"], eps=ad["eps"],
            weight_decay=ad["weight_decay"],
            no_decay=frozenset(ad["no_decay"]),
        )
        schedule = Schedule(**meta["schedule"])
        stopper = EarlyStopper(**meta["stopper"])
        rng = np.random.default_rng(0)
        rng.bit_generator.state = meta["rng"]
        return cls(adamw=adamw, schedule=schedule, stopper=stopper,
                   rng=rng, epoch=int(meta["epoch"]))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    rho_per_dim: list
    mean_rho: float
    lr: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_mean_rho: float = float("-inf")
    stopped_early: bool = False
    wall_time_s: float = 0.0

    def write_csv(self, path) -> None:
        n_dims = len(self.epochs[0].rho_per_dim) if self.epochs else 0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "train_loss", "lr"]
                + [f"val_rho_{j}" for j in range(n_dims)]
                + ["val_mean_rho"])
            for row in self.epochs:
                writer.writerow(
                    [row.epoch, repr(row.train_loss), repr(row.lr)]
                    + [repr(r) for r in row.rho_per_dim]
                    + [repr(row.mean_rho)])

    @staticmethod
    def header() -> str:
        return "epoch  train_loss   lr           val_mean_rho"

    @staticmethod
    def format_row(row: EpochStats) -> str:
        return (f"{row.epoch:>5d}  {row.train_loss:<11.6f}  "
                f"{row.lr:<11.3e}  {row.mean_rho:+.4f}")

    def summary(self) -> str:
        tail = "stopped early" if self.stopped_early else "ran to the horizon"
        return (f"best epoch {self.best_epoch} "
                f"(val mean rho {self.best_mean_rho:+.4f}); {tail}; "
                f"{self.wall_time_s:.1f}s")

    def format(self) -> str:
        return "\n".join(
            [self.header()]
            + [self.format_row(row) for row in self.epochs]
            + [self.summary()])


def init_train_state(model, n_train: int,
                     settings: TrainSettings) -> TrainState:
    """Fresh optimizer/schedule/stopper/RNG state for a planned run.

    The schedule horizon always spans ``settings.max_epochs`` so that a run
    split across resumes sees the same learning-rate curve as an
    uninterrupted one. Warmup spans the first epoch.
    """
    steps_per_epoch = math.ceil(n_train / settings.batch_size)
    schedule = Schedule(
        warmup_steps=steps_per_epoch,
        total_steps=steps_per_epoch * settings.max_epochs,
        base_lr=settings.base_lr,
        min_lr=settings.min_lr,
    )
    adamw = AdamWState.init(
        model.named_parameters(), beta1=settings.beta1, beta2=settings.beta2,
        eps=settings.eps, weight_decay=settings.weight_decay,
        no_decay=model.no_decay_names(),
    )
    return TrainState(
        adamw=adamw, schedule=schedule,
        stopper=EarlyStopper(patience=settings.patience),
        rng=np.random.default_rng(settings.seed), epoch=0,
    )


def _check_targets(records, label: str) -> None:
    for rec in records:
        tgt = getattr(rec, "target", None)
        if tgt is None or not np.all(np.isfinite(np.asarray(tgt))):
            raise ValueError(
                f"{label} record {getattr(rec, 'id', '?')} lacks a finite "
                f"target"
            )


def train_loop(model, train_records, val_records, settings: TrainSettings,
               *, state: TrainState = None, run_epochs: int = None,
               checkpoint_path=None, on_epoch=None) -> TrainReport:
    """Train with shuffled minibatches, modality dropout, clipping, AdamW,
    and per-epoch validation; early-stops on validation mean correlation.

    ``run_epochs`` caps how many epochs this call executes (default: to the
    ``settings.max_epochs`` horizon); pass the returned state back in (via a
    checkpoint) to continue a capped run identically to an uninterrupted one.
    When ``checkpoint_path`` is given, the best-so-far model and state are
    saved there each time validation improves. ``on_epoch``, if given, is
    called with each epoch's ``EpochStats`` as it finishes (the CLI uses it
    for live progress).
    """
    settings.validate()
    train_records = list(train_records)
    val_records = list(val_records)
    if not train_records:
        raise ValueError("train_loop needs at least one training record")
    _check_targets(train_records, "train")
    _check_targets(val_records, "val")
    params = model.named_parameters()
    if state is None:
        state = init_train_state(model, len(train_records), settings)
    else:
        expected = {name for name, _ in params}
        if set(state.adamw.m) != expected:
            raise ValueError(
                "resumed state does not match the model's parameters")
    report = TrainReport()
    start = time.perf_counter()
    c = model.config
    n = len(train_records)
    target_epochs = settings.max_epochs if run_epochs is None else run_epochs
    stop_epoch = min(target_epochs, settings.max_epochs)
    while state.epoch < stop_epoch and not state.stopper.should_stop:
        epoch = state.epoch + 1
        perm = state.rng.permutation(n)
        sum_sq = 0.0
        n_entries = 0
        lr = 0.0
        for bi, lo in enumerate(range(0, n, settings.batch_size)):
            chunk = perm[lo:lo + settings.batch_size]
            bundles = [ModalityBundle.from_record(train_records[i])
                       for i in chunk]
            bundles = [
                modality_dropout(b, c.modality_dropout_p, state.rng)
                for b in bundles
            ]
            batch = data_mod.collate(
                bundles, d_audio=c.d_audio_in, d_vision=c.d_vision_in,
                d_text=c.d_text_in, n_targets=c.n_targets,
                max_audio_len=c.max_audio_len,
                max_vision_len=c.max_vision_len)
            model.zero_grad()
            pred = model.forward_batch(batch, train=True, rng=state.rng)
            loss = mse_loss(pred, Tensor(batch.target))
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            clip_global_norm(
                [p.grad for _, p in params if p.grad is not None],
                settings.clip_threshold)
            lr = lr_at(state.schedule, state.adamw.step + 1)
            adamw_step(params, state.adamw, lr)
            model.check_finite()
            sum_sq += loss_val * pred.size
            n_entries += pred.size
        result = evaluate(model, val_records, settings.batch_size)
        state.epoch = epoch
        improved = state.stopper.update(result.mean_rho, epoch)
        stats = EpochStats(
            epoch=epoch, train_loss=sum_sq / n_entries,
            rho_per_dim=result.rho_per_dim, mean_rho=result.mean_rho,
            lr=lr)
        report.epochs.append(stats)
        if improved and checkpoint_path is not None:
            save_checkpoint(model, state, checkpoint_path)
        if on_epoch is not None:
            on_epoch(stats)
        if state.stopper.should_stop:
            report.stopped_early = True
    report.best_epoch = state.stopper.best_epoch
    report.best_mean_rho = state.stopper.best
    report.wall_time_s = time.perf_counter() - start
    return report
