"""Self-taught knowledge distillation: the unpruned model teaches its pruned self."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset
from .engine import forward, softmax_cross_entropy, to_torch
from .ir import Graph, WeightStore, require_valid
from .regularize import TrainConfig, train_loop


@dataclass
class KDConfig:
    temperature: float = 5.0
    soft_weight: float = 1.0
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.01
    schedule: str = "step"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_scales: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.soft_weight < 0:
            raise ValueError("soft_weight must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)


def kd_divergence(student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """Mean over the batch of KL(softmax(t/T) || softmax(s/T))."""
    log_p = F.log_softmax(teacher_logits.detach() / temperature, dim=1)
    log_q = F.log_softmax(student_logits / temperature, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()


def kd_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    labels: torch.Tensor,
    cfg: KDConfig,
) -> torch.Tensor:
    """CE(student, labels) + w·T²·KL(teacher_T ‖ student_T); the teacher is a constant."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    if cfg.temperature <= 0:
        raise ValueError("temperature must be positive")
    hard = softmax_cross_entropy(student_logits, labels)
    if cfg.soft_weight == 0:
        return hard
    t = cfg.temperature
    return hard + cfg.soft_weight * t * t * kd_divergence(student_logits, teacher_logits, t)


class Teacher:
    """Eval-mode forward of a frozen model, cached per input batch object."""

    def __init__(self, g: Graph, w: WeightStore):
        require_valid(g, w)
        self.g = g
        self.tw = to_torch(w, torch.float32)
        self._key = None
        self._logits = None

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self._key is not x:
            with torch.no_grad():
                self._logits, _ = forward(self.g, self.tw, x, "eval")
            self._key = x
        return self._logits


def finetune(
    g_pruned: Graph,
    w_pruned: WeightStore,
    g_teacher: Graph | None,
    w_teacher: WeightStore | None,
    data: Dataset,
    cfg: KDConfig,
    use_kd: bool,
    seed: int,
    epoch_hook: Callable[[int, dict], None] | None = None,
) -> tuple[WeightStore, list[dict]]:
    """Trains the pruned model with KD (or plain cross-entropy when ``use_kd`` is off).

    The teacher's weights are converted to fresh tensors, so the caller's
    store is never written.
    """
    tc = TrainConfig(
        cfg.epochs, cfg.batch_size, cfg.lr, cfg.schedule, cfg.momentum, cfg.weight_decay, decay_scales=cfg.decay_scales
    )
    if not use_kd:
        return train_loop(g_pruned, w_pruned, data, tc, seed, epoch_hook=epoch_hook)
    if g_teacher is None or w_teacher is None:
        raise ValueError("KD finetuning needs a teacher")
    teacher = Teacher(g_teacher, w_teacher)

    def batch_loss(batch):
        return lambda logits, labels: kd_loss(logits, teacher(batch.inputs), labels, cfg)

    def kl_stat(w, rec):
        return {"kl_to_teacher": mean_kl(g_pruned, w, teacher, data.x_test, cfg.temperature)}

    return train_loop(g_pruned, w_pruned, data, tc, seed, batch_loss=batch_loss, epoch_hook=epoch_hook, on_epoch=kl_stat)


def mean_kl(g: Graph, w: WeightStore, teacher: Teacher, x: np.ndarray, temperature: float, batch_size: int = 500) -> float:
    tw = to_torch(w)
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb = torch.from_numpy(np.ascontiguousarray(x[i : i + batch_size]))
            s, _ = forward(g, tw, xb, "eval")
            total += float(kd_divergence(s, teacher(xb), temperature)) * len(xb)
    return total / len(x)
