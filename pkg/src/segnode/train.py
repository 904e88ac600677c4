"""Loss, metric, optimisers, and the training / evaluation loops."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .adjoint import adjoint_backward
from .autodiff import ParamStore, Tape, Tensor, backward, vjp
from .data import SynthSample, stack
from .model import BaselineModel, SegNodeModel
from .ode import OdeState, SolverError, integrate, integrate_trajectory

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# loss and metric


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, ignore_index: Optional[int] = None) -> Tensor:
    """Mean per-pixel cross-entropy over non-ignored pixels.

    ``logits`` is (N, K, H, W), ``labels`` integer (N, H, W).
    """
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    lv = labels[valid]
    if lv.size and (lv.min() < 0 or lv.max() >= k):
        raise ValueError(f"label values must lie in [0, {k - 1}]")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    count = max(int(valid.sum()), 1)
    loss = -(picked * valid).sum() / count

    def vjp_fn(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (grad - onehot) * (valid[:, None] / count)
        return (grad * g,)

    return ad.record(np.asarray(loss, dtype=x.dtype), (logits,), vjp_fn, saved=(logp,))


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_index: Optional[int] = None) -> np.ndarray:
    """Rows are ground-truth classes, columns predicted classes."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if ignore_index is not None:
        keep = gt != ignore_index
        pred, gt = pred[keep], gt[keep]
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(
        num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-class IoU (NaN for classes absent from prediction and ground truth) and their mean."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    present = ~np.isnan(iou)
    return (float(iou[present].mean()) if present.any() else float("nan")), iou


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int,
         ignore_index: Optional[int] = None) -> tuple[float, np.ndarray]:
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_index))


# --------------------------------------------------------------------------
# schedule and optimisers


def poly_lr(base: float, progress: float, power: float = 0.9) -> float:
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    return base * (1.0 - progress) ** power


class SGD:
    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: Mapping[str, np.ndarray], lr: float) -> None:
        for name, t in params.items():
            if name not in grads:
                raise KeyError(f"missing gradient for {name}")
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v.astype(t.dtype, copy=False)
            t.data = (t.data - lr * v).astype(t.dtype, copy=False)


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: Mapping[str, np.ndarray], lr: float) -> None:
        missing = [n for n in params if n not in grads]
        if missing:
            raise KeyError(f"missing gradient for {missing[0]}")
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, t in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(t.data))
            v = self.v.get(name, np.zeros_like(t.data))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            theta = t.data * (1.0 - lr * self.weight_decay)
            theta = theta - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            t.data = theta.astype(t.dtype, copy=False)


def make_optimizer(kind: str, momentum: float = 0.9, weight_decay: float = 0.0):
    if kind == "sgd":
        return SGD(momentum=momentum, weight_decay=weight_decay)
    if kind == "adamw":
        return AdamW(weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 4
    total_steps: int = 600
    lr_power: float = 0.9
    grad_mode: str = "adjoint"
    clip_norm: float = 0.0  # global gradient-norm cap; 0 disables
    seed: int = 0

    @classmethod
    def for_model(cls, kind: str, **overrides) -> "TrainConfig":
        """SegNode: SGD 0.1 / momentum 0.9 / no decay, gradient norm capped at 1.
        Baseline: AdamW 1e-4 / decay 0.05.
        """
        if kind == "segnode":
            base = dict(optimizer="sgd", lr=0.1, momentum=0.9, weight_decay=0.0, grad_mode="adjoint",
                        clip_norm=1.0)
        elif kind == "baseline":
            base = dict(optimizer="adamw", lr=1e-4, weight_decay=0.05, grad_mode="direct")
        else:
            raise ValueError(f"unknown model kind {kind!r}")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# gradients of the full network


@dataclass
class StepResult:
    loss: float
    grads: dict
    nfe_forward: int = 0
    nfe_backward: int = 0


def loss_and_grads(model, images: np.ndarray, labels: np.ndarray, grad_mode: str = "adjoint",
                   ignore_index: Optional[int] = None) -> StepResult:
    """Loss and per-name parameter gradients for one batch.

    ``adjoint`` (SegNode only): the stem/projection and the heads are
    recorded on their own tapes; the ODE body is solved without a tape and
    differentiated with the adjoint method.  ``direct``: the whole forward
    pass, solver steps included, is recorded on one tape.
    """
    x = Tensor(images.astype(model.dtype, copy=False))
    if grad_mode == "direct" or isinstance(model, BaselineModel):
        with Tape() as tape:
            logits = model.forward(x)
            loss = cross_entropy_loss(logits, labels, ignore_index)
        grads = model.params.named(backward(loss, tape))
        nfe = model.last_stats.nfe if isinstance(model, SegNodeModel) else 0
        return StepResult(loss.item(), grads, nfe, 0)
    if grad_mode != "adjoint":
        raise ValueError(f"unknown grad mode {grad_mode!r}")
    with Tape() as enc_tape:
        s0 = model.encode(x)
    sT, fstats = integrate(model.dynamics, s0.detach(), model.solver)
    with Tape() as head_tape:
        hT = OdeState([Tensor(p.data, requires_grad=True) for p in sT.parts])
        logits = model.heads_forward(hT, images.shape[2:])
        loss = cross_entropy_loss(logits, labels, ignore_index)
    head_grads = backward(loss, head_tape)
    dL_dhT = OdeState([Tensor(head_grads.of(p)) for p in hT.parts])
    dL_dh0, body_grads, bstats = adjoint_backward(model.dynamics, model.body_params, sT, dL_dhT,
                                                  model.solver)
    enc_grads = vjp(enc_tape, s0.parts, [p.data for p in dL_dh0.parts])
    grads = {}
    for name, t in model.params.items():
        if name in body_grads:
            grads[name] = body_grads[name]
        elif t in head_grads:
            grads[name] = head_grads[t]
        else:
            grads[name] = enc_grads.of(t)
    return StepResult(loss.item(), grads, fstats.nfe, bstats.nfe)


# --------------------------------------------------------------------------
# loops


@dataclass
class HistoryRecord:
    step: int
    loss: float
    lr: float
    grad_norm: float
    nfe_forward: int
    nfe_backward: int

    def format(self) -> str:
        return (f"step={self.step} loss={self.loss!r} lr={self.lr!r} grad_norm={self.grad_norm!r} "
                f"nfe_forward={self.nfe_forward} nfe_backward={self.nfe_backward}")


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    """L2 norm over all gradient entries, summed in f64 in name order."""
    return float(np.sqrt(sum(float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1)
                                          .astype(np.float64))) for g in grads.values())))


def clip_grads(grads: Mapping[str, np.ndarray], factor: float) -> dict:
    return {n: (g * factor).astype(g.dtype, copy=False) for n, g in grads.items()}


def batch_schedule(n_samples: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Index batches from consecutive seeded permutations of the dataset."""
    rng = np.random.default_rng(seed)
    order: list[int] = []
    batches = []
    for _ in range(steps):
        while len(order) < batch_size:
            order.extend(rng.permutation(n_samples).tolist())
        batches.append(np.array(order[:batch_size]))
        del order[:batch_size]
    return batches


def train(model, samples: Sequence[SynthSample], tcfg: TrainConfig, log_every: int = 0
          ) -> list[HistoryRecord]:
    """Optimise ``model`` in place and return the per-step history."""
    images, labels = stack(samples)
    opt = make_optimizer(tcfg.optimizer, tcfg.momentum, tcfg.weight_decay)
    history = []
    start = time.perf_counter()
    for step, idx in enumerate(batch_schedule(len(samples), tcfg.batch_size, tcfg.total_steps,
                                              tcfg.seed)):
        try:
            res = loss_and_grads(model, images[idx], labels[idx], tcfg.grad_mode)
        except SolverError as exc:
            raise FloatingPointError(f"solver failed at step {step}: {exc}") from exc
        if not np.isfinite(res.loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        gnorm = global_norm(res.grads)
        if tcfg.clip_norm > 0 and gnorm > tcfg.clip_norm:
            res.grads = clip_grads(res.grads, tcfg.clip_norm / gnorm)
        lr = poly_lr(tcfg.lr, step / tcfg.total_steps, tcfg.lr_power)
        opt.step(model.params, res.grads, lr)
        history.append(HistoryRecord(step, res.loss, lr, gnorm, res.nfe_forward, res.nfe_backward))
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f lr %.4g (%.1fs)", step, res.loss, lr,
                     time.perf_counter() - start)
    return history


@dataclass
class EvalReport:
    miou: float
    per_class: np.ndarray
    confusion: np.ndarray = field(repr=False)

    @property
    def error(self) -> float:
        return 1.0 - self.miou

    def format(self) -> str:
        lines = []
        for c, v in enumerate(self.per_class):
            lines.append(f"class={c} iou={'nan' if np.isnan(v) else repr(float(v))}")
        lines.append(f"miou={self.miou!r}")
        return "\n".join(lines) + "\n"


def predict(model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Argmax labels (ties go to the lowest class index)."""
    out = []
    for i in range(0, len(images), batch_size):
        logits = model.forward(Tensor(images[i:i + batch_size].astype(model.dtype, copy=False)))
        out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out)


def evaluate(model, samples: Sequence[SynthSample], batch_size: int = 8) -> EvalReport:
    images, labels = stack(samples)
    k = model.cfg.num_classes
    cm = confusion_matrix(predict(model, images, batch_size), labels, k)
    value, iou = iou_from_confusion(cm)
    return EvalReport(value, iou, cm)


@dataclass
class TrajectoryRow:
    time: float
    error: float
    miou: float
    nfe: int

    def format(self) -> str:
        return f"time={self.time!r} error={self.error!r} miou={self.miou!r} nfe={self.nfe}"


def trajectory_predictions(model: SegNodeModel, images: np.ndarray, times: Sequence[float]
                           ) -> tuple[list[np.ndarray], list[int]]:
    """Argmax label maps for a batch decoded from the ODE state at each time."""
    s0 = model.encode(Tensor(images.astype(model.dtype, copy=False)))
    states, nfes = integrate_trajectory(model.dynamics, s0, model.solver, times, with_nfe=True)
    preds = [np.argmax(model.heads_forward(s, images.shape[2:]).data, axis=1) for s in states]
    return preds, nfes


def trajectory_eval(model: SegNodeModel, samples: Sequence[SynthSample], times: Sequence[float],
                    batch_size: int = 8) -> list[TrajectoryRow]:
    """Error (1 - mIoU over the whole set) of the solution at each time."""
    images, labels = stack(samples)
    k = model.cfg.num_classes
    cms = [np.zeros((k, k), dtype=np.int64) for _ in times]
    nfes = [0] * len(times)
    for i in range(0, len(images), batch_size):
        preds, nfes = trajectory_predictions(model, images[i:i + batch_size], times)
        for j, p in enumerate(preds):
            cms[j] += confusion_matrix(p, labels[i:i + batch_size], k)
    rows = []
    for t, cm, n in zip(times, cms, nfes):
        value, _ = iou_from_confusion(cm)
        rows.append(TrajectoryRow(float(t), 1.0 - value, value, n))
    return rows
