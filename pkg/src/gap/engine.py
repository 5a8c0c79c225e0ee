"""Dense-tensor execution of IR graphs on top of torch, plus the SGD optimizer.

Weights live as numpy float32 arrays in a ``WeightStore``; training converts
them once to torch tensors (``to_torch``) and back (``to_numpy``).  Reverse-mode
gradients come from torch autograd; the sparsity regularizers contribute
explicit subgradients on top (see ``gap.regularize``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .ir import ADD_KINDS, BN_KINDS, CONV_KINDS, DEFAULT_EPS, Graph, WeightStore

BN_MOMENTUM = 0.9
TRAINABLE = {"kernel", "bias", "gamma", "beta", "weight", "scale"}

TorchWeights = dict[int, dict[str, torch.Tensor]]


class NumericError(ArithmeticError):
    pass


def _finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values produced by {what}")
    return t


def conv2d(
    x: torch.Tensor,
    k: torch.Tensor,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    if x.dim() != 4 or k.dim() != 4:
        raise ValueError("conv2d expects N×C×H×W input and O×I×kh×kw kernel")
    if x.shape[1] != k.shape[1] * groups:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {k.shape[1]}×{groups} groups")
    oh = (x.shape[2] + 2 * padding - k.shape[2]) // stride + 1
    ow = (x.shape[3] + 2 * padding - k.shape[3]) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("conv2d output dims must be positive")
    return _finite(F.conv2d(x, k, bias, stride=stride, padding=padding, groups=groups), "conv2d")


def batch_norm(
    z: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    mean: torch.Tensor,
    var: torch.Tensor,
    eps: float = DEFAULT_EPS,
    training: bool = False,
    momentum: float = BN_MOMENTUM,
) -> torch.Tensor:
    """Per-channel normalization.  In training mode ``mean``/``var`` are updated in place."""
    c = z.shape[1]
    if not (gamma.numel() == beta.numel() == mean.numel() == var.numel() == c):
        raise ValueError("batch_norm parameter length differs from channel count")
    shape = (1, c) + (1,) * (z.dim() - 2)
    dims = [0] + list(range(2, z.dim()))
    if training:
        mu = z.mean(dim=dims)
        sig2 = z.var(dim=dims, unbiased=False)
        with torch.no_grad():
            n = z.numel() // c
            mean.mul_(momentum).add_((1 - momentum) * mu.detach())
            var.mul_(momentum).add_((1 - momentum) * sig2.detach() * n / max(n - 1, 1))
    else:
        mu, sig2 = mean, var
    denom = sig2 + eps
    if bool((denom <= 0).any()):
        raise NumericError("batch_norm: variance + eps must be positive")
    out = (z - mu.reshape(shape)) / torch.sqrt(denom).reshape(shape) * gamma.reshape(shape) + beta.reshape(shape)
    return _finite(out, "batch_norm")


def softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    k = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise ValueError(f"label out of range [0, {k})")
    shifted = logits - logits.max(dim=1, keepdim=True).values.detach()
    logp = shifted - torch.logsumexp(shifted, dim=1, keepdim=True)
    return -logp.gather(1, labels.long().reshape(-1, 1)).mean()


def _pool(x: torch.Tensor, pool: dict | None) -> torch.Tensor:
    if not pool:
        return x
    k = pool["kernel"]
    s = pool.get("stride", k)
    p = pool.get("padding", 0)
    if pool.get("mode", "avg") == "max":
        return F.max_pool2d(x, k, s, p)
    return F.avg_pool2d(x, k, s, p)


# ---------------------------------------------------------------- weights


def to_torch(w: WeightStore, dtype: torch.dtype = torch.float32, requires_grad: bool = False) -> TorchWeights:
    out: TorchWeights = {}
    for vid, d in w.items():
        out[vid] = {}
        for name, arr in d.items():
            t = torch.tensor(np.asarray(arr), dtype=dtype)
            if requires_grad and name in TRAINABLE:
                t.requires_grad_(True)
            out[vid][name] = t
    return out


def to_numpy(tw: TorchWeights) -> WeightStore:
    return {
        vid: {k: t.detach().to(torch.float32).numpy().copy() for k, t in d.items()} for vid, d in tw.items()
    }


def trainable(tw: TorchWeights) -> Iterable[tuple[int, str, torch.Tensor]]:
    for vid in sorted(tw):
        for name in sorted(tw[vid]):
            if name in TRAINABLE:
                yield vid, name, tw[vid][name]


# ---------------------------------------------------------------- forward


@dataclass
class Batch:
    inputs: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self) -> None:
        if not isinstance(self.inputs, torch.Tensor):
            self.inputs = torch.from_numpy(np.ascontiguousarray(self.inputs))
        if not isinstance(self.labels, torch.Tensor):
            self.labels = torch.from_numpy(np.asarray(self.labels, dtype=np.int64))


def forward(
    g: Graph,
    w: WeightStore | TorchWeights,
    x: torch.Tensor | np.ndarray,
    mode: str = "eval",
    keep: bool = False,
    bn_momentum: float = BN_MOMENTUM,
) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Runs the graph in topological order and returns (logits, activations).

    ``activations`` holds every vertex output when ``keep`` is set, otherwise
    only the logits.  Numpy weights are converted on the fly (eval use).
    ``bn_momentum`` sets how much of the running statistics survives each
    training-mode batch.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    tw = w if _is_torch(w) else to_torch(w)
    if not isinstance(x, torch.Tensor):
        x = torch.from_numpy(np.ascontiguousarray(x))
    dtype = _dtype_of(tw, x.dtype)
    x = x.to(dtype)
    if tuple(x.shape[1:]) != tuple(g.input_shape):
        raise ValueError(f"batch shape {tuple(x.shape[1:])} does not match graph input {g.input_shape}")
    training = mode == "train"
    acts: dict[int, torch.Tensor] = {}
    consumers = {v.id: len(g.out_edges(v.id)) for v in g.vertices}
    for vid in g.topo_order():
        v = g.vertex(vid)
        ins = [acts[e.src] for e in g.in_edges(vid)]
        if not keep:
            for e in g.in_edges(vid):
                consumers[e.src] -= 1
                if consumers[e.src] == 0:
                    del acts[e.src]
        acts[vid] = _run_vertex(v, tw.get(vid, {}), ins, x, training, bn_momentum)
    out = acts[g.output_id]
    return out, acts


def _is_torch(w) -> bool:
    for d in w.values():
        for t in d.values():
            return isinstance(t, torch.Tensor)
    return False


def _dtype_of(tw: TorchWeights, fallback: torch.dtype) -> torch.dtype:
    for d in tw.values():
        for t in d.values():
            return t.dtype
    return fallback if fallback.is_floating_point else torch.float32


def _operands(v, ins: list[torch.Tensor]) -> list[torch.Tensor]:
    srcs = v.attrs.get("src_channels")
    if srcs is None:
        return ins
    return [t[:, c : c + 1] for t, c in zip(ins, srcs)]


def _run_vertex(
    v, p: dict[str, torch.Tensor], ins: list[torch.Tensor], x: torch.Tensor, training: bool, bn_momentum: float = BN_MOMENTUM
):
    k = v.kind
    a = v.attrs
    if k == "Input":
        return x
    if k in ADD_KINDS:
        ops = _operands(v, ins)
        out = ops[0]
        for o in ops[1:]:
            out = out + o
        return torch.relu(out) if a.get("relu") else out
    if k == "BNChannel":
        z = _operands(v, ins)[0]
    else:
        z = ins[0] if len(ins) == 1 else torch.cat(ins, dim=1)
    if k in CONV_KINDS:
        groups = a.get("groups", 1)
        if k == "ConvFilter" and groups > 1:
            width = a["in_channels"] // groups
            gi = a["group_index"]
            z = z[:, gi * width : (gi + 1) * width]
            groups = 1
        out = conv2d(z, p["kernel"], a.get("stride", 1), a.get("padding", 0), groups, p.get("bias"))
        return _pool(out, a.get("pool"))
    if k in BN_KINDS:
        out = batch_norm(z, p["gamma"], p["beta"], p["mean"], p["var"], a.get("eps", DEFAULT_EPS), training, bn_momentum)
        if a.get("relu"):
            out = torch.relu(out)
        return _pool(out, a.get("pool"))
    if k == "Activation":
        return torch.relu(z)
    if k == "Concat":
        return z
    if k == "GlobalPool":
        return z.mean(dim=(2, 3))
    if k == "FC":
        return _finite(F.linear(z, p["weight"], p["bias"]), "FC")
    if k == "EdgeScale":
        return z * p["scale"].reshape(())
    if k == "Output":
        return z
    raise ValueError(f"cannot execute vertex kind {k}")


def predict(g: Graph, w: WeightStore, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    tw = to_torch(w)
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            logits, _ = forward(g, tw, x[i : i + batch_size], "eval")
            outs.append(logits.numpy())
    return np.concatenate(outs) if outs else np.zeros((0, 0), np.float32)


def evaluate(g: Graph, w: WeightStore, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> dict[str, float]:
    logits = predict(g, w, x, batch_size)
    loss = float(softmax_cross_entropy(torch.from_numpy(logits), torch.from_numpy(np.asarray(y))))
    acc = float(np.mean(logits.argmax(1) == y))
    return {"accuracy": acc, "loss": loss}


# ---------------------------------------------------------------- losses and gradients

# An explicit penalty returns (value, {(vid, name): gradient array}).
Penalty = Callable[[TorchWeights], tuple[float, dict[tuple[int, str], np.ndarray], dict[str, float]]]


@dataclass
class LossSpec:
    """What ``loss_and_grads`` optimizes.

    ``data_loss`` maps (logits, labels) to a scalar; the default is plain
    cross-entropy.  ``penalty`` adds explicit (sub)gradients, e.g. sparsity terms.
    """

    data_loss: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] | None = None
    penalty: Penalty | None = None
    weight_decay: float = 0.0
    mode: str = "train"
    breakdown: dict[str, float] = field(default_factory=dict)


def decayed(g: Graph, vid: int, name: str, decay_scales: bool = False) -> bool:
    kind = g.vertex(vid).kind
    if name == "kernel" and kind in CONV_KINDS:
        return True
    if name == "weight" and kind == "FC":
        return True
    return decay_scales and name in ("gamma", "scale")


def loss_and_grads(
    g: Graph, w: TorchWeights, batch: Batch, spec: LossSpec | None = None
) -> tuple[float, dict[tuple[int, str], torch.Tensor], dict[str, float]]:
    """Total objective and gradients for every trainable tensor.

    The weight-decay gradient is left to the optimizer; its value is still
    reported in the breakdown so that ``total`` equals the sum of the parts.
    """
    spec = spec or LossSpec()
    for _, _, t in trainable(w):
        t.grad = None
        t.requires_grad_(True)
    logits, _ = forward(g, w, batch.inputs, spec.mode)
    fn = spec.data_loss or softmax_cross_entropy
    data = fn(logits, batch.labels)
    if not bool(torch.isfinite(data)):
        raise NumericError("non-finite loss")
    data.backward()
    grads = {}
    for vid, name, t in trainable(w):
        grads[(vid, name)] = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
    parts = {"data_loss": float(data.detach())}
    if spec.penalty is not None:
        value, pgrads, pparts = spec.penalty(w)
        for key, gr in pgrads.items():
            grads[key] = grads[key] + torch.as_tensor(gr, dtype=grads[key].dtype)
        parts.update(pparts)
    if spec.weight_decay:
        wd = 0.0
        for vid, name, t in trainable(w):
            if decayed(g, vid, name):
                wd += float((t.detach().double() ** 2).sum())
        parts["weight_decay"] = 0.5 * spec.weight_decay * wd
    total = sum(parts.values())
    parts["total"] = total
    return total, grads, parts


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_scales: bool = False
    buffers: dict[tuple[int, str], torch.Tensor] = field(default_factory=dict)


def sgd_nesterov_step(
    g: Graph, w: TorchWeights, grads: dict[tuple[int, str], torch.Tensor], state: OptimizerState
) -> None:
    """In-place Nesterov update: v <- m v - lr d;  theta <- theta + m v - lr d."""
    m, lr = state.momentum, state.lr
    with torch.no_grad():
        for (vid, name), gr in grads.items():
            t = w[vid][name]
            if gr.shape != t.shape:
                raise ValueError(f"gradient shape {tuple(gr.shape)} differs from parameter {tuple(t.shape)}")
            d = gr
            if state.weight_decay and decayed(g, vid, name, state.decay_scales):
                d = d + state.weight_decay * t
            v = state.buffers.get((vid, name))
            if v is None:
                v = torch.zeros_like(t)
            v = m * v - lr * d
            state.buffers[(vid, name)] = v
            t.add_(m * v - lr * d)
