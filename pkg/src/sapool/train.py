"""SGD training loop, evaluation and the per-epoch CSV report."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .data import Dataset
from .errors import NumericError
from .nn import Module, Parameter
from .profile import activation_memory_profile
from .pruning import PruneState, apply_mask, prune_cycle, update_momentum
from .tensor import Tensor

REPORT_HEADER = ("epoch", "train_loss", "train_acc", "test_acc", "wall_ms", "peak_act_bytes", "seed")


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    cosine: bool = True
    warmup_steps: int = 0


class SGD:
    """Heavy-ball SGD: buf = m*buf + (g + wd*p); p -= lr*buf."""

    def __init__(self, params: list[Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._bufs: dict[int, np.ndarray] = {}

    def momentum_buffer(self, p: Parameter) -> np.ndarray | None:
        return self._bufs.get(id(p))

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self._bufs.get(id(p))
            if buf is None or self.momentum == 0:
                buf = g.copy()
            else:
                buf *= self.momentum
                buf += g
            self._bufs[id(p)] = buf
            p.data -= lr * buf

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(step: int, total: int, cfg: OptimConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if not cfg.cosine or total <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total))


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    wall_ms: int
    peak_act_bytes: int
    seed: int


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)  # per step

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow(
                [r.epoch, f"{r.train_loss:.8f}", f"{r.train_acc:.6f}", f"{r.test_acc:.6f}", r.wall_ms, r.peak_act_bytes, r.seed]
            )
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())

    @property
    def final_test_acc(self) -> float:
        return self.rows[-1].test_acc if self.rows else float("nan")


def first_nonfinite_layer(net: Module, x: np.ndarray) -> str:
    """Re-run the forward pass and name the first module whose output is non-finite."""
    names = {id(m): (n or type(m).__name__) for n, m in net.named_modules()}
    found: list[str] = []
    params = [n for n, p in net.named_parameters() if not np.all(np.isfinite(p.data))]
    if params:
        return f"parameter {params[0]}"

    def hook(mod, args, out):
        if not found and isinstance(out, Tensor) and not np.all(np.isfinite(out.data)):
            found.append(names.get(id(mod), type(mod).__name__))

    remove = nn.add_module_hook(hook)
    try:
        with T.no_grad():
            net(T.Tensor(x))
    finally:
        remove()
    # hooks fire innermost-first, so the first hit is the deepest offending layer
    return found[0] if found else "loss"


def predict(logits: np.ndarray) -> np.ndarray:
    """Top-1 class; np.argmax returns the lowest index among ties."""
    return np.argmax(logits, axis=-1)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(logits) == np.asarray(labels)))


def evaluate(net: Module, dataset: Dataset, batch_size: int = 256) -> float:
    was = net.training
    net.eval()
    correct = 0
    try:
        with T.no_grad():
            for xb, yb in dataset.batches(batch_size, shuffle=False, dtype=T.default_dtype()):
                correct += int(np.sum(predict(net(T.Tensor(xb)).data) == yb))
    finally:
        net.train(was)
    return correct / max(len(dataset), 1)


def train(
    net: Module,
    train_set: Dataset,
    test_set: Dataset | None,
    optim: OptimConfig,
    epochs: int,
    seed: int,
    prune: PruneState | None = None,
    max_steps: int | None = None,
    timing: bool = False,
    on_epoch: Callable[[EpochRow], None] | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainReport:
    """Train with cross-entropy; deterministic for a given seed.

    With ``prune`` set, one prune/regrow cycle runs at the start of every
    epoch and masks are re-applied after every optimiser step.  A non-finite
    loss aborts with :class:`NumericError` naming the first offending layer.
    ``wall_ms`` is only measured when ``timing`` is on, so that reports stay
    byte-identical across runs by default.
    """
    opt = SGD(net.parameters(), optim.momentum, optim.weight_decay)
    dtype = T.default_dtype()
    steps_per_epoch = math.ceil(len(train_set) / optim.batch_size)
    total = steps_per_epoch * epochs if max_steps is None else min(max_steps, steps_per_epoch * epochs)
    peak = activation_memory_profile(net, (optim.batch_size,) + train_set.shape).peak_bytes
    report = TrainReport()
    step = 0
    net.train()
    for epoch in range(epochs):
        t0 = time.perf_counter()
        if prune is not None:
            prune_cycle(prune, epoch, opt)
        loss_sum, correct, seen = 0.0, 0, 0
        for xb, yb in train_set.batches(optim.batch_size, seed, epoch, dtype=dtype):
            if max_steps is not None and step >= max_steps:
                break
            logits = net(T.Tensor(xb))
            loss = T.cross_entropy(logits, yb)
            lv = float(loss.data)
            if not math.isfinite(lv) or not np.all(np.isfinite(logits.data)):
                where = first_nonfinite_layer(net, xb)
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}; first non-finite layer: {where}")
            opt.zero_grad()
            loss.backward()
            if prune is not None:
                update_momentum(prune)
            opt.step(lr_at(step, total, optim))
            if prune is not None:
                apply_mask(prune, opt)
            report.losses.append(lv)
            if on_step is not None:
                on_step(step, lv)
            loss_sum += lv * len(yb)
            correct += int(np.sum(predict(logits.data) == yb))
            seen += len(yb)
            step += 1
        test_acc = evaluate(net, test_set) if test_set is not None else float("nan")
        row = EpochRow(
            epoch,
            loss_sum / max(seen, 1),
            correct / max(seen, 1),
            test_acc,
            int(round((time.perf_counter() - t0) * 1000)) if timing else 0,
            int(peak),
            seed,
        )
        report.rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if max_steps is not None and step >= max_steps:
            break
    return report
