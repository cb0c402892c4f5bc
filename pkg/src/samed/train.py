"""Customisation loop: CE + Dice on downsampled labels, warmup/decay, AdamW."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import SegSample, augment
from .tensor import Tensor

log = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "sgd")
SCHEDULES = ("warmup_decay", "constant")
DECAYS = ("linear", "poly")

# training-strategy ablation: name -> (schedule, optimizer)
STRATEGIES = {
    "none": ("constant", "sgd"),
    "warmup": ("warmup_decay", "sgd"),
    "warmup_adamw": ("warmup_decay", "adamw"),
}


class NumericError(RuntimeError):
    """Non-finite loss during training."""


@dataclass
class TrainConfig:
    ce_weight: float = 0.2
    dice_weight: float = 0.8
    base_lr: float = 0.005
    warmup_period: int = 250
    max_iterations: int = 18600
    early_stop_iter: int = 14880
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.1
    eps: float = 1e-8
    optimizer: str = "adamw"
    schedule: str = "warmup_decay"
    decay: str = "linear"
    sgd_momentum: float = 0.9
    sgd_weight_decay: float = 1e-4
    dice_include_background: bool = True
    augment: bool = True
    seed: int = 7

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.decay not in DECAYS:
            raise ValueError(f"decay must be one of {DECAYS}")
        if self.early_stop_iter > self.max_iterations:
            raise ValueError("early_stop_iter exceeds max_iterations")
        if self.schedule == "warmup_decay" and self.early_stop_iter and \
                self.warmup_period >= self.early_stop_iter:
            raise ValueError("warmup_period must end before early_stop_iter")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys {sorted(unknown)}; valid: {sorted(known)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _labels_at(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == logits.ndim - 2:
        labels = labels[None]
    h, w = logits.shape[-3:-1]
    if labels.shape[-2:] != (h, w):
        labels = T.nearest_downsample(labels, (h, w))
    return labels


def ce_dice_terms(logits: Tensor, labels, eps: float = 1e-5, include_background: bool = True
                  ) -> tuple[Tensor, Tensor]:
    """Cross-entropy and soft-Dice terms for logits (B, h, w, k).

    ``labels`` (B, H, W) are nearest-downsampled to (h, w) first. CE is the
    mean per-pixel negative log-likelihood; Dice is 1 minus the class-mean of
    (2 sum(p g) + eps) / (sum(p) + sum(g) + eps), sums running over the batch.
    """
    if logits.ndim == 3:
        logits = T.reshape(logits, (1,) + logits.shape)
    k = logits.shape[-1]
    labels = _labels_at(logits, labels)
    g = T.one_hot(labels, k, dtype=logits.dtype)
    n_pix = labels.size
    ce = T.scale(T.sum(T.mul(T.log_softmax(logits, axis=-1), g)), -1.0 / n_pix)

    probs = T.softmax(logits, axis=-1)
    axes = (0, 1, 2)
    inter = T.sum(T.mul(probs, g), axis=axes)
    denom = T.add(T.sum(probs, axis=axes), Tensor(g.data.sum(axis=axes) + eps))
    ratio = T.div(T.add_scalar(T.scale(inter, 2.0), eps), denom)
    if not include_background:
        ratio = T.take(ratio, 1, k, axis=0)
    dice = T.add_scalar(T.neg(T.mean(ratio)), 1.0)
    return ce, dice


def segmentation_loss(logits: Tensor, labels, ce_weight: float = 0.2, dice_weight: float = 0.8,
                      include_background: bool = True) -> Tensor:
    ce, dice = ce_dice_terms(logits, labels, include_background=include_background)
    return T.add(T.scale(ce, ce_weight), T.scale(dice, dice_weight))


# ---------------------------------------------------------------------------
# schedule and optimisers
# ---------------------------------------------------------------------------


def lr_at(t: int, base_lr: float, warmup: int, max_iter: int, decay: str = "linear") -> float:
    """Linear warmup to ``base_lr`` at ``warmup``, then decay.

    ``linear``: base_lr * (1 - (t - warmup) / max_iter).
    ``poly``: base_lr * (1 - (t - warmup) / max_iter) ** 0.9.
    """
    if t <= warmup:
        return t * base_lr / warmup
    frac = 1 - (t - warmup) / max_iter
    if decay == "poly":
        return base_lr * frac ** 0.9
    return base_lr * frac


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, weight_decay=0.1, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.weight_decay, self.eps = beta1, beta2, weight_decay, eps
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for n, p in self.params.items():
            if not p.requires_grad:
                raise RuntimeError(f"optimizer step on frozen parameter {n}")
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1 - lr * self.weight_decay) - lr * update).astype(p.dtype, copy=False)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict, momentum=0.9, weight_decay=1e-4):
        self.params = params
        self.momentum, self.weight_decay = momentum, weight_decay
        self.buf = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for n, p in self.params.items():
            if not p.requires_grad:
                raise RuntimeError(f"optimizer step on frozen parameter {n}")
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            b = self.buf[n]
            b *= self.momentum
            b += g + self.weight_decay * p.data
            p.data = (p.data - lr * b).astype(p.dtype, copy=False)

    def state(self) -> dict:
        return {"t": self.t, "buf": self.buf}


def adamw_step(params: dict, opt: AdamW, lr: float) -> None:
    opt.step(lr)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    iteration: int = 0
    optimizer: object = None
    rng_state: dict = field(default_factory=dict)
    log: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "lr", "ce", "dice", "total"])
        for it, lr, ce, dice, total in self.log:
            w.writerow([it, repr(lr), repr(ce), repr(dice), repr(total)])
        return buf.getvalue()


def make_optimizer(params: dict, cfg: TrainConfig):
    if cfg.optimizer == "adamw":
        return AdamW(params, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.eps)
    return SGD(params, cfg.sgd_momentum, cfg.sgd_weight_decay)


def schedule_lr(t: int, cfg: TrainConfig) -> float:
    if cfg.schedule == "constant":
        return cfg.base_lr
    return lr_at(t, cfg.base_lr, cfg.warmup_period, cfg.max_iterations, cfg.decay)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i : i + batch_size]


def train(model, samples: list[SegSample], cfg: TrainConfig, iterations: int | None = None,
          callback=None) -> TrainState:
    """Run ``iterations`` (default ``cfg.early_stop_iter``) optimisation steps in place.

    Iteration ``t`` (1-based) uses learning rate ``schedule_lr(t)``. Batches
    come from seeded per-epoch shuffles of ``samples``.
    """
    if not samples:
        raise ValueError("training set is empty")
    n_iter = cfg.early_stop_iter if iterations is None else iterations
    params = model.trainable_parameters()
    opt = make_optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    state = TrainState(optimizer=opt)
    batches = _batches(len(samples), min(cfg.batch_size, len(samples)), rng)
    dtype = model.dtype
    for t in range(1, n_iter + 1):
        idx = next(batches)
        chosen = [samples[i] for i in idx]
        if cfg.augment:
            chosen = [augment(s, rng) for s in chosen]
        x = Tensor(np.stack([s.image for s in chosen]).astype(dtype))
        y = np.stack([s.label for s in chosen])
        lr = schedule_lr(t, cfg)
        model.zero_grad()
        # a diverging run is reported below as NumericError, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"), T.GradTape() as tape:
            ce, dice = ce_dice_terms(model(x), y, include_background=cfg.dice_include_background)
            loss = T.add(T.scale(ce, cfg.ce_weight), T.scale(dice, cfg.dice_weight))
        total = loss.item()
        if not math.isfinite(total):
            raise NumericError(f"non-finite loss {total} at iteration {t} (lr={lr!r})")
        tape.backward(loss)
        opt.step(lr)
        state.iteration = t
        state.log.append((t, float(lr), ce.item(), dice.item(), total))
        if callback is not None:
            callback(state)
        elif t % 100 == 0:
            log.info("iter %d lr %.3g loss %.4f (ce %.4f dice %.4f)", t, lr, total, ce.item(), dice.item())
    state.rng_state = rng.bit_generator.state
    return state
