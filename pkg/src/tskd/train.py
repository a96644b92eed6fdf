"""Optimizers, the cosine schedule, and the four training procedures.

Every procedure runs through :func:`train_loop`, so finetuning is exactly
distillation with no teacher: with ``alpha=0`` and no synthetic data the two
consume the same random stream and produce bit-identical trajectories.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericOverflowError, Tensor
from .data import (
    AugmentationSpec,
    AugmentedDataset,
    LabeledDataset,
    TaskSplits,
    apply_augmentation,
    sample_batch,
)
from .losses import LossConfig, argmax_lowest, combine, distillation_term, kd_loss, task_loss
from .models import EncoderSpec, Head, HeadSpec, Model, build_encoder, checksum, set_frozen


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


@dataclass
class OptimizerSpec:
    kind: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self) -> None:
        if self.kind not in ("sgd-momentum", "adamw"):
            raise ContractError(f"unknown optimizer {self.kind!r}")
        # lr == 0 is accepted so that "no-op" runs can be expressed
        if not self.lr >= 0 or self.weight_decay < 0:
            raise ContractError("lr and weight_decay must be non-negative")
        if not 0 <= self.momentum < 1 or not all(0 <= b < 1 for b in self.betas):
            raise ContractError("momentum and betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ContractError("eps must be positive")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    scheduler: str = "cosine"
    loss: LossConfig = field(default_factory=lambda: LossConfig(kind="task-only"))
    seed: int = 0
    use_synthetic_for_kd: bool = False
    use_synthetic_for_task: bool = False
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec.identity)
    strict_batches: bool = False
    grad_clip: float | None = None

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.scheduler not in ("cosine", "constant"):
            raise ContractError(f"unknown scheduler {self.scheduler!r}")
        self.optimizer.validate()
        self.loss.validate()
        self.augmentation.validate()


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        return lr0
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def init_optimizer_state(params: list[np.ndarray], spec: OptimizerSpec) -> dict:
    state = {"t": 0, "m": [np.zeros_like(p) for p in params]}
    if spec.kind == "adamw":
        state["v"] = [np.zeros_like(p) for p in params]
    return state


def optimizer_step(params, grads, spec: OptimizerSpec, state: dict | None, lr_t: float):
    """One update; returns fresh parameter arrays and the advanced state.

    SGD: ``v <- m*v + g (+ wd*p)``, ``p <- p - lr*v``.
    AdamW: bias-corrected moments, ``p <- p - lr*mhat/(sqrt(vhat)+eps) - lr*wd*p``.
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if state is None:
        state = init_optimizer_state(params, spec)
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ContractError("params and grads disagree in shape")
    t = state["t"] + 1
    new_params, new_m, new_v = [], [], []
    if spec.kind == "sgd-momentum":
        for p, g, v in zip(params, grads, state["m"]):
            if spec.weight_decay:
                g = g + spec.weight_decay * p
            v = spec.momentum * v + g
            new_m.append(v)
            new_params.append(p - lr_t * v)
        return new_params, {"t": t, "m": new_m}
    b1, b2 = spec.betas
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params.append(p - lr_t * (m_hat / (np.sqrt(v_hat) + spec.eps)) - lr_t * spec.weight_decay * p)
        new_m.append(m)
        new_v.append(v)
    return new_params, {"t": t, "m": new_m, "v": new_v}


# ---------------------------------------------------------------------------
# inference helpers


def predict_logits(model: Model, features) -> np.ndarray:
    """Forward pass without recording anything."""
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    h = x
    for mlp in (model.encoder, model.head):
        n_layers = len(mlp.params) // 2
        for i in range(n_layers):
            h = (h @ mlp.params[2 * i].data) + mlp.params[2 * i + 1].data
            if i < n_layers - 1:
                if mlp.activation == "relu":
                    h = np.where(h > 0, h, 0.0)
                else:
                    h = ad.gelu(Tensor(h)).data
    return h


def evaluate(model: Model, dataset: LabeledDataset) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) is the label."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    pred = argmax_lowest(predict_logits(model, dataset.features))
    return float(np.mean(pred == dataset.labels))


# ---------------------------------------------------------------------------
# the loop


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    steps: int = 0
    synthetic_in_task: int = 0
    synthetic_in_kd: int = 0
    label_rows_in_loss: int = 0
    teacher_checksums: list[str] = field(default_factory=list)
    batch_hash_mismatches: int = 0
    mixup_partner_violations: int = 0

    def write(self, path: str | Path) -> Path:
        """Per-epoch metric log, one JSON record per line."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records))
        return path


def _digest(arr: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).digest()


def train_loop(
    model: Model,
    dsd: AugmentedDataset,
    cfg: TrainConfig,
    teacher: Model | None = None,
    val: LabeledDataset | None = None,
    audit: bool = False,
) -> tuple[Model, RunLog]:
    """Train a copy of ``model`` and return it with its log.

    Each step draws one batch, applies one augmentation draw, and feeds that
    same array to the teacher and the student. The task loss only sees
    original rows unless ``cfg.use_synthetic_for_task`` is set.
    """
    cfg.validate()
    model = model.copy()
    log = RunLog()
    loss_cfg = cfg.loss
    alpha = loss_cfg.effective_alpha
    if loss_cfg.uses_teacher and teacher is None:
        raise ContractError(f"loss kind {loss_cfg.kind!r} needs a teacher")
    if teacher is not None and teacher.num_classes != model.num_classes:
        raise ContractError(f"teacher has {teacher.num_classes} outputs, student {model.num_classes}")
    teacher_sum = checksum(teacher.parameters) if teacher is not None else None
    if teacher_sum:
        log.teacher_checksums.append(teacher_sum)

    rng = np.random.default_rng(cfg.seed)
    params = model.trainable_parameters()
    state = init_optimizer_state([p.data for p in params], cfg.optimizer)
    k = model.num_classes
    n_orig = len(dsd.originals)
    steps_per_epoch = math.ceil(n_orig / cfg.batch_size) if n_orig else 0
    total = cfg.epochs * steps_per_epoch
    use_syn = cfg.use_synthetic_for_kd or cfg.use_synthetic_for_task
    allow_mixup = loss_cfg.kind not in ("hard-label-kd", "dkd")
    lr0 = cfg.optimizer.lr
    step = 0

    for epoch in range(cfg.epochs):
        task_sum = kd_sum = 0.0
        task_n = kd_n = 0
        lr = lr0
        for _ in range(steps_per_epoch):
            lr = cosine_lr(step, total, lr0) if cfg.scheduler == "cosine" else lr0
            batch = sample_batch(dsd, cfg.batch_size, use_syn, rng, cfg.strict_batches)
            aug = apply_augmentation(batch, cfg.augmentation, rng, k, allow_mixup)
            partners = aug.mixup_partner
            log.mixup_partner_violations += int(
                np.sum(aug.synthetic & (partners >= 0)) + np.sum((partners >= 0) & aug.synthetic[np.maximum(partners, 0)])
            )
            try:
                student_in = Tensor(aug.features)
                logits = model(student_in)

                if cfg.use_synthetic_for_task:
                    task_rows = np.flatnonzero(aug.labelled)
                    if np.any(aug.synthetic & ~aug.labelled):
                        raise ContractError("unlabelled synthetic samples cannot feed the task loss")
                else:
                    task_rows = np.flatnonzero(~aug.synthetic)
                task = None
                if alpha < 1.0 and task_rows.size:
                    log.synthetic_in_task += int(aug.synthetic[task_rows].sum())
                    log.label_rows_in_loss += int(task_rows.size)
                    if task_rows.size == len(batch):
                        task = task_loss(logits, aug.targets)
                    else:
                        task = task_loss(ad.take_rows(logits, task_rows), aug.targets[task_rows])
                    task_sum += task.item()
                    task_n += 1

                distill = None
                if teacher is not None:
                    teacher_in = aug.features
                    t_logits = predict_logits(teacher, teacher_in)
                    if audit and _digest(teacher_in) != _digest(student_in.data):
                        log.batch_hash_mismatches += 1
                    kd_rows = (
                        np.arange(len(batch)) if cfg.use_synthetic_for_kd else np.flatnonzero(~aug.synthetic)
                    )
                    log.synthetic_in_kd += int(aug.synthetic[kd_rows].sum())
                    if alpha > 0.0 and kd_rows.size:
                        full = kd_rows.size == len(batch)
                        s_rows = logits if full else ad.take_rows(logits, kd_rows)
                        t_rows = t_logits if full else t_logits[kd_rows]
                        hard = None
                        if loss_cfg.kind == "dkd":
                            hard = np.where(
                                aug.labelled[kd_rows], batch.labels[kd_rows], argmax_lowest(t_rows)
                            )
                            log.label_rows_in_loss += int(aug.labelled[kd_rows].sum())
                        distill = distillation_term(s_rows, t_rows, loss_cfg, hard)
                        kd_sum += distill.item()
                        kd_n += 1
                    elif kd_rows.size:
                        kd_sum += kd_loss(Tensor(logits.data[kd_rows]), t_logits[kd_rows], loss_cfg.temperature).item()
                        kd_n += 1

                if teacher is None:
                    loss = task
                else:
                    loss = combine(task, distill, alpha) if (task is not None or distill is not None) else None
                if loss is None:
                    step += 1
                    continue
                for p in params:
                    p.grad = None
                ad.backward(loss)
            except NumericOverflowError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            if not all(np.isfinite(g).all() for g in grads):
                raise TrainingDiverged(step, "non-finite gradient")
            if cfg.grad_clip:
                norm = math.sqrt(float(np.sum([np.sum(g * g) for g in grads])))
                if norm > cfg.grad_clip:
                    grads = [g * (cfg.grad_clip / norm) for g in grads]
            new, state = optimizer_step([p.data for p in params], grads, cfg.optimizer, state, lr)
            for p, arr in zip(params, new):
                p.data = arr
                p.grad = None
            step += 1

        if teacher is not None:
            now = checksum(teacher.parameters)
            if now != teacher_sum:
                raise AssertionError("teacher parameters changed during distillation")
            log.teacher_checksums.append(now)
        log.records.append(
            {
                "epoch": epoch,
                "lr": lr,
                "task_loss": task_sum / task_n if task_n else None,
                "kd_loss": kd_sum / kd_n if kd_n else None,
                "val_accuracy": evaluate(model, val) if val is not None and len(val) else None,
            }
        )
    log.steps = step
    return model, log


# ---------------------------------------------------------------------------
# procedures


def _splits(task) -> tuple[LabeledDataset, LabeledDataset | None]:
    if isinstance(task, TaskSplits):
        return task.train, task.val
    return task, None


def pretrain_encoder(corpus: LabeledDataset, spec: EncoderSpec, cfg: TrainConfig):
    """Supervised stand-in pretraining: fit the encoder through a throwaway linear head."""
    encoder = build_encoder(spec, cfg.seed)
    head = Head(HeadSpec("linear", spec.output_dim, corpus.num_classes), cfg.seed + 1)
    model = Model(encoder, head, encoder_frozen=False)
    task_cfg = _with_loss(cfg, LossConfig(kind="task-only"))
    trained, _ = train_loop(model, AugmentedDataset.plain(corpus), task_cfg)
    return trained.encoder


def _with_loss(cfg: TrainConfig, loss: LossConfig) -> TrainConfig:
    return replace(cfg, loss=loss)


def probe(encoder, task, head: HeadSpec, cfg: TrainConfig, audit: bool = False):
    """Train only a fresh head on top of a frozen copy of ``encoder``."""
    if cfg.loss.kind != "task-only":
        raise ContractError("probing optimizes the task loss only")
    train, val = _splits(task)
    model = Model(copy.deepcopy(encoder), Head(head, cfg.seed), encoder_frozen=True)
    before = checksum(model.encoder)
    trained, log = train_loop(model, AugmentedDataset.plain(train), cfg, val=val, audit=audit)
    if checksum(trained.encoder) != before:
        raise AssertionError("frozen encoder changed during probing")
    return trained, log


def finetune(model: Model, task, cfg: TrainConfig, dsd: AugmentedDataset | None = None, audit: bool = False):
    """Update every parameter on the task loss. ``dsd`` supplies labelled synthetics for ablations."""
    if cfg.loss.kind != "task-only":
        raise ContractError("finetuning optimizes the task loss only")
    if model.encoder_frozen:
        raise ContractError("finetuning needs an unfrozen encoder")
    train, val = _splits(task)
    return train_loop(model, dsd if dsd is not None else AugmentedDataset.plain(train), cfg, val=val, audit=audit)


def distill(
    student: Model,
    teacher: Model,
    dsd: AugmentedDataset,
    cfg: TrainConfig,
    val: LabeledDataset | None = None,
    audit: bool = False,
):
    """Task-specific distillation from a fixed teacher into ``student``."""
    if teacher.num_classes != student.num_classes:
        raise ContractError("teacher and student disagree on the number of classes")
    teacher = teacher.copy()
    set_frozen(teacher, True)
    for p in teacher.head.params:
        p.requires_grad = False
    return train_loop(student, dsd, cfg, teacher=teacher, val=val, audit=audit)
