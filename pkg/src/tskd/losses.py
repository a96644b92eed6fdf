"""Task cross-entropy, temperature-scaled KD, and the alternative distillation losses.

All losses reduce with a batch mean. Teacher logits are always consumed as
constants: they are detached before entering the graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

LOSS_KINDS = ("task-only", "kd", "combined", "hard-label-kd", "dkd")


@dataclass
class LossConfig:
    kind: str = "combined"
    temperature: float = 2.0
    alpha: float = 0.5
    dkd_alpha: float = 1.0
    dkd_beta: float = 2.0
    # "forward": KL(teacher || student); "reverse": KL(student || teacher)
    kd_direction: str = "forward"

    def validate(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ContractError(f"unknown loss kind {self.kind!r}")
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        if self.kd_direction not in ("forward", "reverse"):
            raise ContractError(f"unknown kd_direction {self.kd_direction!r}")

    @property
    def uses_teacher(self) -> bool:
        return self.kind != "task-only"

    @property
    def effective_alpha(self) -> float:
        if self.kind == "task-only":
            return 0.0
        if self.kind == "kd":
            return 1.0
        return self.alpha


def _const(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: student {a.shape} vs teacher {b.shape}")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def task_loss(logits: Tensor, targets) -> Tensor:
    """Batch-mean cross-entropy against label distributions (one-hot or mixed)."""
    q = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if q.shape != logits.shape:
        raise DimensionError(f"targets {q.shape} do not match logits {logits.shape}")
    if not np.allclose(q.sum(axis=-1), 1.0, rtol=0.0, atol=1e-9) or (q < 0).any():
        raise ContractError("each target row must be a probability distribution")
    logp = ad.log_softmax(logits)
    per_sample = ad.scale(ad.sum(ad.mul(logp, Tensor(q)), axis=-1), -1.0)
    return ad.mean(per_sample)


def kd_loss(student_logits: Tensor, teacher_logits, T: float, direction: str = "forward") -> Tensor:
    """Batch mean of ``T^2 * KL(p_t || p_s)`` at temperature ``T``.

    ``direction="reverse"`` swaps the arguments to ``KL(p_s || p_t)``.
    """
    teacher = _const(teacher_logits)
    _check_same_shape(student_logits, teacher)
    if not T > 0:
        raise ContractError("temperature must be positive")
    inv_t = 1.0 / T
    log_ps = ad.log_softmax(ad.scale(student_logits, inv_t))
    log_pt = ad.log_softmax(ad.scale(teacher, inv_t))
    if direction == "forward":
        pt = Tensor(np.exp(log_pt.data))
        kl = ad.sum(ad.mul(pt, ad.sub(log_pt, log_ps)), axis=-1)
    elif direction == "reverse":
        ps = ad.exp(log_ps)
        kl = ad.sum(ad.mul(ps, ad.sub(log_ps, log_pt)), axis=-1)
    else:
        raise ContractError(f"unknown kd direction {direction!r}")
    return ad.scale(ad.mean(kl), T * T)


def combine(task: Tensor | None, distill: Tensor | None, alpha: float) -> Tensor:
    """``(1 - alpha) * task + alpha * distill``; a missing term contributes nothing."""
    terms = []
    if task is not None:
        terms.append(ad.scale(task, 1.0 - alpha))
    if distill is not None:
        terms.append(ad.scale(distill, alpha))
    if not terms:
        raise ContractError("combined loss needs at least one term")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def combined_loss(student_logits: Tensor, teacher_logits, targets, cfg: LossConfig) -> Tensor:
    """Convex combination of task CE and KD on one shared set of rows."""
    cfg.validate()
    task = task_loss(student_logits, targets)
    kd = kd_loss(student_logits, teacher_logits, cfg.temperature, cfg.kd_direction)
    return combine(task, kd, cfg.alpha)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


def hard_label_kd(student_logits: Tensor, teacher_logits) -> Tensor:
    teacher = _const(teacher_logits)
    _check_same_shape(student_logits, teacher)
    targets = one_hot(argmax_lowest(teacher.data), student_logits.shape[-1])
    return task_loss(student_logits, targets)


def dkd_loss(
    student_logits: Tensor,
    teacher_logits,
    hard_labels,
    T: float = 2.0,
    dkd_alpha: float = 1.0,
    dkd_beta: float = 2.0,
) -> Tensor:
    """Decoupled KD: weighted target/non-target binary KL plus non-target KL, both times T^2."""
    teacher = _const(teacher_logits)
    _check_same_shape(student_logits, teacher)
    b, k = student_logits.shape
    if k < 2:
        raise ContractError("DKD needs at least two classes")
    labels = np.asarray(hard_labels, dtype=np.int64)
    gt = one_hot(labels, k)
    other = 1.0 - gt
    inv_t = 1.0 / T

    ps = ad.softmax(ad.scale(student_logits, inv_t))
    pt = np.exp(ad._log_softmax_np(teacher.data * inv_t))

    # binary (target, non-target) masses
    ps_t = ad.sum(ad.mul(ps, Tensor(gt)), axis=-1)
    ps_o = ad.sum(ad.mul(ps, Tensor(other)), axis=-1)
    pt_t = (pt * gt).sum(axis=-1)
    pt_o = (pt * other).sum(axis=-1)
    tckd_rows = ad.add(
        ad.mul(Tensor(pt_t), ad.sub(Tensor(np.log(np.maximum(pt_t, ad.LOG_CLAMP))), ad.log(ps_t))),
        ad.mul(Tensor(pt_o), ad.sub(Tensor(np.log(np.maximum(pt_o, ad.LOG_CLAMP))), ad.log(ps_o))),
    )
    tckd = ad.scale(ad.mean(tckd_rows), T * T)

    # non-target distributions: mask the target logit out before the softmax
    mask = gt * 1000.0
    log_ps_nt = ad.log_softmax(ad.sub(ad.scale(student_logits, inv_t), Tensor(mask)))
    log_pt_nt = ad._log_softmax_np(teacher.data * inv_t - mask)
    pt_nt = np.exp(log_pt_nt) * other
    nckd_rows = ad.sum(ad.mul(Tensor(pt_nt), ad.sub(Tensor(log_pt_nt * other), ad.mul(log_ps_nt, Tensor(other)))), axis=-1)
    nckd = ad.scale(ad.mean(nckd_rows), T * T)

    return ad.add(ad.scale(tckd, dkd_alpha), ad.scale(nckd, dkd_beta))


def distillation_term(
    student_logits: Tensor, teacher_logits, cfg: LossConfig, hard_labels=None
) -> Tensor:
    """The distillation loss selected by ``cfg.kind``."""
    if cfg.kind in ("kd", "combined"):
        return kd_loss(student_logits, teacher_logits, cfg.temperature, cfg.kd_direction)
    if cfg.kind == "hard-label-kd":
        return hard_label_kd(student_logits, teacher_logits)
    if cfg.kind == "dkd":
        if hard_labels is None:
            raise ContractError("DKD needs hard labels")
        return dkd_loss(
            student_logits, teacher_logits, hard_labels, cfg.temperature, cfg.dkd_alpha, cfg.dkd_beta
        )
    raise ContractError(f"loss kind {cfg.kind!r} has no distillation term")
