"""Supervised pretraining and teacher-student self-training.

The self-training loop follows the usual recipe for unlabeled stereo:

1. the teacher predicts on the clean pair at three input scales;
2. multi-resolution variance and late-iteration deltas are mapped to
   per-pixel reliability weights;
3. the student predicts on a strongly augmented copy of the pair and is
   optimised on the weighted L1 distance to the teacher's original-scale
   prediction;
4. every ``ema_interval`` student steps the teacher moves towards the student
   by an exponential moving average.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .augment import AugmentConfig, strong_augment
from .core import (DisparityMap, MultiScalePredictions, PredictionTrace, StereoSample,
                   resize_disparity_tensor, resize_image, scaled_size)
from .filters import CsfConfig, csf_weights, soft_weighted_loss
from .metrics import EvalReport, evaluate_many
from .model import (IterativeStereoNet, ModelConfig, check_same_structure, init_parameters,
                    save_checkpoint, supervised_sequence_loss)

logger = logging.getLogger(__name__)


@dataclass
class SelfTrainConfig:
    scale_high: float = 2.0
    scale_low: float = 0.5
    ema_lambda: float = 0.99
    # None disables teacher refresh entirely
    ema_interval: Optional[int] = 100
    lr_pretrain: float = 2e-4
    lr_selftrain: float = 1e-4
    steps_pretrain: int = 2000
    steps_selftrain: int = 1000
    batch_size: int = 4
    weight_decay: float = 1e-5
    warmup_fraction: float = 0.05
    final_lr_factor: float = 0.01
    grad_clip: float = 1.0
    sequence_gamma: float = 0.9
    pretrain_augment: bool = False
    csf: CsfConfig = field(default_factory=CsfConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.csf, dict):
            self.csf = CsfConfig(**self.csf)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if not 0.0 < self.ema_lambda <= 1.0:
            raise ValueError("ema_lambda must lie in (0, 1]")
        if self.ema_interval is not None and self.ema_interval < 1:
            raise ValueError("ema_interval must be >= 1 (or None for never)")
        if not self.scale_high >= 1.0 >= self.scale_low > 0:
            raise ValueError("need scale_high >= 1 >= scale_low > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class MetricsLog:
    """Line-delimited ``key=value`` records, mirrored in memory."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **record):
        self.records.append(record)
        if self.path:
            with self.path.open("a") as f:
                f.write(" ".join(f"{k}={_fmt(v)}" for k, v in record.items()) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_metrics_log(path) -> list[dict]:
    """Inverse of ``MetricsLog``: numbers come back as int/float, the rest as str."""
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append({k: _parse_value(v) for k, v in (tok.split("=", 1) for tok in line.split())})
    return records


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

def collate(samples: Sequence[StereoSample], dtype=torch.float32):
    def images(attr):
        return torch.from_numpy(np.stack([getattr(s, attr) for s in samples])).permute(0, 3, 1, 2).to(dtype)

    left, right = images("left"), images("right")
    if left.shape[1] == 1:
        left, right = left.expand(-1, 3, -1, -1), right.expand(-1, 3, -1, -1)
    batch = {"left": left, "right": right}
    if all(s.has_gt for s in samples):
        batch["gt"] = torch.from_numpy(np.stack([s.gt_disparity.values for s in samples]))[:, None].to(dtype)
        batch["valid"] = torch.from_numpy(np.stack([s.validity for s in samples]))[:, None]
    return batch


def batch_order(n: int, batch_size: int, steps: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches for ``steps`` steps, reshuffling at every epoch boundary."""
    out, perm, pos = [], rng.permutation(n), 0
    for _ in range(steps):
        idx = []
        while len(idx) < batch_size:
            if pos == n:
                perm, pos = rng.permutation(n), 0
            take = min(batch_size - len(idx), n - pos)
            idx.extend(perm[pos:pos + take])
            pos += take
        out.append(np.asarray(idx))
    return out


def make_optimizer(model: nn.Module, lr: float, steps: int, config: SelfTrainConfig):
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=config.weight_decay)
    if steps <= 0:
        return optimizer, None
    # div_factor * final_div_factor sets the last lr relative to the peak
    div = 25.0
    scheduler = torch.optim.lr_scheduler.OneCycleLR(
        optimizer, max_lr=lr, total_steps=steps + 1, pct_start=config.warmup_fraction,
        cycle_momentum=False, anneal_strategy="linear", div_factor=div,
        final_div_factor=1.0 / (config.final_lr_factor * div))
    return optimizer, scheduler


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@torch.no_grad()
def predict(model: IterativeStereoNet, samples: Sequence[StereoSample], n_iters=None,
            batch_size: int = 8) -> list[np.ndarray]:
    was_training = model.training
    model.eval()
    out = []
    try:
        for i in range(0, len(samples), batch_size):
            batch = collate(samples[i:i + batch_size])
            preds = model(batch["left"], batch["right"], n_iters)
            out.extend(p[0].numpy() for p in preds[-1])
    finally:
        model.train(was_training)
    return out


def evaluate_model(model: IterativeStereoNet, samples: Sequence[StereoSample], n_iters=None) -> EvalReport:
    samples = [s for s in samples if s.has_gt]
    if not samples:
        raise ValueError("no labeled samples to evaluate")
    preds = predict(model, samples, n_iters)
    return evaluate_many(preds, [s.gt_disparity.values for s in samples], [s.validity for s in samples])


# --------------------------------------------------------------------------
# pretraining
# --------------------------------------------------------------------------

def pretrain(labeled: Sequence[StereoSample], model_config: ModelConfig, config: SelfTrainConfig,
             log: Optional[MetricsLog] = None, checkpoint_path=None,
             model: Optional[IterativeStereoNet] = None) -> IterativeStereoNet:
    """Supervised training on labeled pairs with the sequence L1 loss."""
    if not labeled:
        raise ValueError("pretraining needs a non-empty labeled set")
    if any(not s.has_gt for s in labeled):
        raise ValueError("every pretraining sample needs ground truth")
    torch.manual_seed(config.seed)
    model = model if model is not None else init_parameters(model_config, config.seed)
    log = log or MetricsLog()
    steps = config.steps_pretrain
    rng = np.random.default_rng([config.seed, 1])
    aug_rng = np.random.default_rng([config.seed, 2])
    optimizer, scheduler = make_optimizer(model, config.lr_pretrain, steps, config)
    model.train()
    loss_value = float("nan")
    for step, idx in enumerate(batch_order(len(labeled), config.batch_size, steps, rng), start=1):
        samples = [labeled[i] for i in idx]
        if config.pretrain_augment:
            samples = [strong_augment(s, config.augment, aug_rng) for s in samples]
        batch = collate(samples)
        preds = model(batch["left"], batch["right"])
        loss = supervised_sequence_loss(preds, batch["gt"], batch["valid"], config.sequence_gamma)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise FloatingPointError(f"non-finite pretraining loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        scheduler.step()
        log.write(phase="pretrain", step=step, loss=loss_value, lr=optimizer.param_groups[0]["lr"])
    log.write(event="done", phase="pretrain", steps=max(steps, 0), final_loss=loss_value)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, phase="pretrain", steps=max(steps, 0))
    return model


# --------------------------------------------------------------------------
# teacher
# --------------------------------------------------------------------------

@torch.no_grad()
def teacher_forward(teacher: IterativeStereoNet, left: torch.Tensor, right: torch.Tensor,
                    config: SelfTrainConfig, n_iters=None) -> dict:
    """Teacher predictions at three input scales, resized back to the input shape.

    Returns ``p_high``/``p_orig``/``p_low`` (B, 1, H, W) and ``trace``, the
    stacked original-scale iterates (n, B, 1, H, W).
    """
    teacher.eval()
    H, W = left.shape[-2:]
    trace = teacher(left, right, n_iters)
    out = {"p_orig": trace[-1], "trace": torch.stack(trace)}
    for key, s in (("p_high", config.scale_high), ("p_low", config.scale_low)):
        if s == 1.0:
            out[key] = trace[-1]
            continue
        size = scaled_size((H, W), s)
        pred = teacher(resize_image(left, s), resize_image(right, s), n_iters)[-1]
        assert pred.shape[-2:] == size
        out[key] = resize_disparity_tensor(pred, W, H)
    return out


def teacher_predict(teacher: IterativeStereoNet, sample: StereoSample, config: SelfTrainConfig,
                    n_iters=None) -> tuple[MultiScalePredictions, PredictionTrace]:
    """Single-sample teacher inference with native-resolution scale outputs."""
    batch = collate([sample])
    left, right = batch["left"], batch["right"]
    teacher.eval()
    with torch.no_grad():
        trace = teacher(left, right, n_iters)
        native = {}
        for key, s in (("p_high", config.scale_high), ("p_low", config.scale_low)):
            native[key] = trace[-1] if s == 1.0 else teacher(resize_image(left, s), resize_image(right, s), n_iters)[-1]
    ms = MultiScalePredictions(
        p_high=DisparityMap(native["p_high"][0, 0].numpy()),
        p_orig=DisparityMap(trace[-1][0, 0].numpy()),
        p_low=DisparityMap(native["p_low"][0, 0].numpy()),
        scale_high=config.scale_high, scale_low=config.scale_low)
    return ms, PredictionTrace(tuple(DisparityMap(p[0, 0].numpy()) for p in trace))


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, lam: float) -> nn.Module:
    """In place: teacher <- lam * teacher + (1 - lam) * student; buffers are copied."""
    check_same_structure(teacher, student)
    sp = dict(student.named_parameters())
    for name, p in teacher.named_parameters():
        p.mul_(lam).add_(sp[name].detach(), alpha=1.0 - lam)
    sb = dict(student.named_buffers())
    for name, b in teacher.named_buffers():
        b.copy_(sb[name])
    return teacher


# --------------------------------------------------------------------------
# self-training
# --------------------------------------------------------------------------

@dataclass
class TeacherStudentState:
    teacher: IterativeStereoNet
    student: IterativeStereoNet
    optimizer: torch.optim.Optimizer
    scheduler: Optional[object]
    k: int = 0

    def checkpoint(self) -> dict:
        return {
            "teacher": self.teacher.state_dict(),
            "student": self.student.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict() if self.scheduler else None,
            "k": self.k,
        }


def init_state(init_model: IterativeStereoNet, config: SelfTrainConfig, steps: Optional[int] = None) -> TeacherStudentState:
    """Teacher and student both start from ``init_model``'s weights."""
    teacher = copy.deepcopy(init_model)
    student = copy.deepcopy(init_model)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    student.train()
    steps = config.steps_selftrain if steps is None else steps
    optimizer, scheduler = make_optimizer(student, config.lr_selftrain, steps, config)
    return TeacherStudentState(teacher, student, optimizer, scheduler)


def dump_diagnostics(path, **arrays):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **{k: (v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v))
                      for k, v in arrays.items()})


class SelfTrainer:
    """Runs self-training steps over a fixed unlabeled set.

    Teacher outputs only change when the teacher does, so they are cached per
    sample and dropped at every EMA update.
    """

    def __init__(self, state: TeacherStudentState, unlabeled: Sequence[StereoSample],
                 config: SelfTrainConfig, log: Optional[MetricsLog] = None,
                 diagnostics_dir=None, n_iters=None):
        self.state = state
        self.unlabeled = list(unlabeled)
        self.config = config
        self.log = log or MetricsLog()
        self.diagnostics_dir = Path(diagnostics_dir) if diagnostics_dir else Path(".")
        self.n_iters = n_iters
        self.aug_rng = np.random.default_rng([config.seed, 3])
        self._cache: dict[int, dict] = {}
        self.ema_events = 0

    def teacher_targets(self, indices) -> dict:
        missing = [int(i) for i in indices if int(i) not in self._cache]
        if missing:
            batch = collate([self.unlabeled[i] for i in missing])
            out = teacher_forward(self.state.teacher, batch["left"], batch["right"], self.config,
                                  self.n_iters)
            maps = csf_weights(out["p_high"], out["p_orig"], out["p_low"], out["trace"], self.config.csf)
            for j, i in enumerate(missing):
                self._cache[i] = {"p_orig": out["p_orig"][j], **{k: v[j] for k, v in maps.items()}}
        entries = [self._cache[int(i)] for i in indices]
        return {k: torch.stack([e[k] for e in entries]) for k in entries[0]}

    def step(self, indices) -> dict:
        state, config = self.state, self.config
        targets = self.teacher_targets(indices)
        augmented = [strong_augment(self.unlabeled[int(i)], config.augment, self.aug_rng) for i in indices]
        batch = collate(augmented)
        state.student.train()
        pred = state.student(batch["left"], batch["right"], self.n_iters)[-1]
        weight = targets["weight"].to(pred.dtype)
        loss = soft_weighted_loss(pred, targets["p_orig"], weight)
        if not torch.isfinite(loss):
            path = self.diagnostics_dir / f"diagnostics_step{state.k + 1}.npz"
            dump_diagnostics(path, left=batch["left"], right=batch["right"], pred=pred.detach(),
                             **targets)
            raise FloatingPointError(f"non-finite self-training loss at step {state.k + 1}; "
                                     f"diagnostics written to {path}")
        state.optimizer.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(state.student.parameters(), config.grad_clip)
        state.optimizer.step()
        lr = state.optimizer.param_groups[0]["lr"]
        if state.scheduler is not None and state.scheduler.last_epoch + 1 < state.scheduler.total_steps:
            state.scheduler.step()
        state.k += 1
        w_soft = targets["w_soft"]
        metrics = {
            "step": state.k,
            "loss": float(loss.item()),
            "w_mean": float(w_soft.mean()),
            "w_low_frac": float((w_soft < 0.1).float().mean()),
            "lr": float(lr),
        }
        self.log.write(phase="selftrain", **metrics)
        K = config.ema_interval
        if K is not None and state.k % K == 0:
            ema_update(state.teacher, state.student, config.ema_lambda)
            self._cache.clear()
            self.ema_events += 1
            self.log.write(event="ema", step=state.k)
        return metrics


def selftrain_step(trainer: SelfTrainer, indices) -> tuple[TeacherStudentState, dict]:
    metrics = trainer.step(indices)
    return trainer.state, metrics


def run_selftraining(unlabeled: Sequence[StereoSample], init_model: IterativeStereoNet,
                     config: SelfTrainConfig, log: Optional[MetricsLog] = None,
                     eval_samples: Optional[Sequence[StereoSample]] = None, eval_every: int = 0,
                     checkpoint_path=None, callback: Optional[Callable] = None,
                     checkpoint_every: int = 0) -> IterativeStereoNet:
    """Self-train from ``init_model`` on unlabeled pairs; returns the student.

    With ``checkpoint_every`` > 0 the full state is also written every that many
    steps, overwriting ``checkpoint_path``.
    """
    if not unlabeled:
        raise ValueError("self-training needs a non-empty unlabeled set")
    torch.manual_seed(config.seed)
    state = init_state(init_model, config)
    log = log or MetricsLog()
    diag_dir = Path(checkpoint_path).parent if checkpoint_path else None
    trainer = SelfTrainer(state, unlabeled, config, log, diag_dir)
    rng = np.random.default_rng([config.seed, 4])
    order = batch_order(len(unlabeled), config.batch_size, config.steps_selftrain, rng)
    for idx in order:
        metrics = trainer.step(idx)
        if eval_samples and eval_every and state.k % eval_every == 0:
            report = evaluate_model(state.student, eval_samples)
            log.write(event="eval", step=state.k, epe=report.epe, d1=report.d1)
        if callback:
            callback(trainer, metrics)
        if checkpoint_path and checkpoint_every and state.k % checkpoint_every == 0:
            _save_selftrain(checkpoint_path, state, config)
    if checkpoint_path:
        _save_selftrain(checkpoint_path, state, config)
    return state.student


def _save_selftrain(path, state: TeacherStudentState, config: SelfTrainConfig):
    save_checkpoint(path, state.student, phase="selftrain",
                    train_state=state.checkpoint(), selftrain_config=_plain(config))


def _plain(config) -> dict:
    return asdict(config)
