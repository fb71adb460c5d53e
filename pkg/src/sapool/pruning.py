"""Channel pruning by F-norm ranking with momentum-guided regrowth.

Each pruned layer is a 4-D conv weight ``[M, N, h, w]``; a channel ``c`` is
the ``[:, c, :, :]`` slice.  One cycle per fine-tune epoch:

1. ``prune_step`` masks the lowest-scoring active channels of every layer:
   the excess above the layer's target plus a rewiring share ``p_i``.
2. ``regrow_step`` re-enables as many channels as were rewired, split over
   layers by their normalised momentum magnitude and, inside a layer, picking
   the masked channels with the largest accumulated momentum.  Regrown
   channels restart from zero weights.
3. ``apply_mask`` runs after every optimiser step to keep masked weights at 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ScheduleError
from .nn import Conv2d, Module, Parameter


def channel_score(weight: np.ndarray, c: int) -> float:
    """Squared Frobenius norm of the [M, h*w] sub-matrix of input channel ``c``."""
    if not 0 <= c < weight.shape[1]:
        raise ContractError(f"channel {c} out of range for weight with {weight.shape[1]} input channels")
    sub = weight[:, c]
    return float(np.sum(sub * sub))


def channel_scores(weight: np.ndarray) -> np.ndarray:
    return np.sum(weight * weight, axis=(0, 2, 3))


def cosine_rate(epoch: int, epochs: int, start: float = 0.3, end: float = 0.0) -> float:
    if epochs <= 1:
        return start
    frac = min(max(epoch / (epochs - 1), 0.0), 1.0)
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def apportion(weights, budget: int, caps=None) -> np.ndarray:
    """Split an integer ``budget`` proportionally to ``weights``.

    Largest-remainder rounding (ties to the lowest index); allocations never
    exceed ``caps`` and capped surplus is redistributed over the rest.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = len(w)
    caps = np.full(n, max(int(budget), 0), dtype=np.int64) if caps is None else np.asarray(caps, dtype=np.int64)
    alloc = np.zeros(n, dtype=np.int64)
    budget = int(min(budget, caps.sum()))
    while budget > 0:
        open_ = alloc < caps
        ww = np.where(open_, w, 0.0)
        if ww.sum() <= 0:
            ww = open_.astype(np.float64)
        quota = budget * ww / ww.sum()
        base = np.minimum(np.floor(quota).astype(np.int64), caps - alloc)
        left = budget - int(base.sum())
        rem = np.where(open_ & (alloc + base < caps), quota - np.floor(quota), -1.0)
        order = sorted(range(n), key=lambda i: (-rem[i], i))
        extra = np.zeros(n, dtype=np.int64)
        for i in order:
            if left == 0 or rem[i] < 0:
                break
            extra[i] = 1
            left -= 1
        step = base + extra
        if step.sum() == 0:
            break
        alloc += step
        budget -= int(step.sum())
    return alloc


@dataclass
class PruneState:
    params: dict[str, Parameter]
    masks: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    targets: dict[str, int]
    ratio: float = 2.0
    rate_start: float = 0.3
    epochs: int = 1
    beta: float = 0.9
    balance: str = "per_layer"
    pruned: dict[str, int] = field(default_factory=dict)
    excess: dict[str, int] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    def rate(self, epoch: int) -> float:
        return cosine_rate(epoch, self.epochs, self.rate_start, 0.0)

    def active_counts(self) -> dict[str, int]:
        return {k: int(m.sum()) for k, m in self.masks.items()}

    def total_target(self) -> int:
        return sum(self.targets.values())


def prunable_layers(net: Module, stage: int = 0) -> dict[str, Parameter]:
    """Regular (non-depthwise) conv weights inside the blocks of one stage."""
    stage_mod = net.stages[stage]
    prefix = f"stage{stage + 1}"
    out = {}
    for name, mod in stage_mod.named_modules(prefix):
        if isinstance(mod, Conv2d) and mod.weight.shape[1] > 1 and ".pool" not in name:
            out[f"{name}.weight"] = mod.weight
    return out


def init_prune_state(
    params: dict[str, Parameter], ratio: float = 2.0, epochs: int = 1, rate_start: float = 0.3, balance: str = "per_layer"
) -> PruneState:
    if ratio < 1:
        raise ScheduleError(f"pruning ratio must be >= 1, got {ratio}")
    if balance not in ("per_layer", "global"):
        raise ContractError(f"balance must be 'per_layer' or 'global', got {balance!r}")
    masks = {k: np.ones(p.shape[1], dtype=bool) for k, p in params.items()}
    mom = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}
    targets = {k: max(1, math.ceil(p.shape[1] / ratio)) for k, p in params.items()}
    return PruneState(dict(params), masks, mom, targets, ratio, rate_start, epochs, balance=balance)


def update_momentum(state: PruneState) -> None:
    """Accumulate raw gradients (masked channels included) for regrowth ranking."""
    for k, p in state.params.items():
        if p.grad is not None:
            state.momentum[k] *= state.beta
            state.momentum[k] += p.grad


def prune_step(state: PruneState, epoch: int) -> PruneState:
    rate = state.rate(epoch)
    state.pruned, state.excess = {}, {}
    for k, p in state.params.items():
        mask = state.masks[k]
        active = np.flatnonzero(mask)
        excess = max(len(active) - state.targets[k], 0)
        rewire = int(round(rate * (len(active) - excess)))
        count = excess + rewire
        if count > len(active) or (count == len(active) and count > 0):
            raise ScheduleError(f"{k}: cannot prune {count} of {len(active)} active channels")
        if count:
            scores = channel_scores(p.data)[active]
            order = sorted(range(len(active)), key=lambda i: (scores[i], active[i]))
            drop = active[order[:count]]
            mask[drop] = False
        state.pruned[k] = count
        state.excess[k] = excess
    apply_mask(state)
    return state


def regrow_step(state: PruneState, epoch: int) -> PruneState:
    names = list(state.params)
    budget = sum(state.pruned.values()) - sum(state.excess.values())
    record = {"epoch": epoch, "rate": state.rate(epoch), "budget": budget, "regrown": {}}
    if budget > 0:
        importance = []
        for k in names:
            mom = np.abs(state.momentum[k])
            importance.append(float(mom[:, state.masks[k]].sum()))
        total = sum(importance)
        importance = [v / total for v in importance] if total > 0 else [1.0] * len(names)
        if state.balance == "per_layer":
            caps = [state.targets[k] - int(state.masks[k].sum()) for k in names]
        else:
            caps = [int((~state.masks[k]).sum()) for k in names]
        alloc = apportion(importance, budget, np.maximum(caps, 0))
        for k, r in zip(names, alloc):
            if r == 0:
                continue
            masked = np.flatnonzero(~state.masks[k])
            strength = np.abs(state.momentum[k]).sum(axis=(0, 2, 3))[masked]
            order = sorted(range(len(masked)), key=lambda i: (-strength[i], masked[i]))
            grow = masked[order[:r]]
            state.masks[k][grow] = True
            state.params[k].data[:, grow] = 0.0
            record["regrown"][k] = [int(c) for c in grow]
    record["active"] = state.active_counts()
    state.history.append(record)
    return state


def apply_mask(state: PruneState, optimizer=None) -> None:
    """Zero masked channels' weights, and their optimiser momentum if given."""
    for k, p in state.params.items():
        off = ~state.masks[k]
        if not off.any():
            continue
        p.data[:, off] = 0.0
        if optimizer is not None:
            buf = optimizer.momentum_buffer(p)
            if buf is not None:
                buf[:, off] = 0.0


def prune_cycle(state: PruneState, epoch: int, optimizer=None) -> PruneState:
    prune_step(state, epoch)
    regrow_step(state, epoch)
    apply_mask(state, optimizer)
    return state
