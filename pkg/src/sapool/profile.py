"""Analytic FLOPs and activation-memory accounting.

Both run one forward pass (no gradients, eval mode) and attribute each
primitive to the innermost module executing it.  Conventions: one
multiply-accumulate is 2 FLOPs; a conv costs 2*k*k*Cin*Cout*H'*W'; a matmul
costs 2*M*K*N per batch entry; any other arithmetic primitive costs one FLOP
per output element (reductions: per input element); shape-only ops are free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .nn import Module
from .tensor import Tensor

SHAPE_OPS = {"reshape", "transpose", "getitem", "concat"}
REDUCTION_OPS = {"tsum", "mean", "window_sum", "avg_pool2d", "max_pool2d"}
BILINEAR_FLOPS_PER_OUTPUT = 8  # 4 taps, one MAC each


@dataclass
class FlopReport:
    per_layer: dict[str, int] = field(default_factory=dict)
    per_op: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())

    def under(self, prefix: str) -> int:
        """FLOPs of every layer whose name equals or starts with ``prefix.``."""
        return sum(v for k, v in self.per_layer.items() if k == prefix or k.startswith(prefix + "."))

    def add(self, layer: str, op: str, flops: int) -> None:
        self.per_layer[layer] = self.per_layer.get(layer, 0) + flops
        self.per_op[op] = self.per_op.get(op, 0) + flops


def op_flops(op: str, parents, out: Tensor, active_in: int | None = None) -> int:
    if op in SHAPE_OPS:
        return 0
    if op == "conv2d":
        cout, cin, kh, kw = parents[1].shape
        if active_in is not None:
            cin = active_in
        b, _, ho, wo = out.shape
        return 2 * kh * kw * cin * cout * ho * wo * b
    if op == "depthwise_conv2d":
        c, _, kh, kw = parents[1].shape
        b, _, ho, wo = out.shape
        return 2 * kh * kw * c * ho * wo * b
    if op == "matmul":
        k = parents[0].shape[-1]
        return 2 * k * out.size
    if op == "linear":
        return 2 * parents[1].shape[1] * out.size
    if op == "bilinear_upsample":
        return BILINEAR_FLOPS_PER_OUTPUT * out.size
    if op in REDUCTION_OPS:
        return parents[0].size
    return out.size


def _names(net: Module) -> dict[int, str]:
    return {id(m): (name or type(m).__name__) for name, m in net.named_modules()}


def _innermost(names: dict[int, str]) -> str:
    for mod in reversed(nn.CALL_STACK):
        if id(mod) in names:
            return names[id(mod)]
    return "<top>"


def _probe_input(net: Module, input_shape) -> Tensor:
    return T.zeros(tuple(input_shape))


def _run_eval(net: Module, x: Tensor) -> None:
    was = net.training
    net.eval()
    try:
        with T.no_grad():
            net(x)
    finally:
        net.train(was)


def count_flops(net: Module, input_shape, masks: dict | None = None, effective: bool = False) -> FlopReport:
    """Per-layer FLOPs for one forward pass at ``input_shape``.

    The default (architectural) count ignores pruning masks.  With
    ``effective=True`` and ``masks`` mapping parameter names to boolean input
    channel masks, convs using a masked weight are charged only for their
    active input channels.
    """
    names = _names(net)
    active: dict[int, int] = {}
    if effective and masks:
        params = dict(net.named_parameters())
        for pname, m in masks.items():
            if pname in params:
                active[id(params[pname])] = int(np.sum(m))
    report = FlopReport()

    def hook(op, parents, out):
        a = active.get(id(parents[1])) if op == "conv2d" else None
        report.add(_innermost(names), op, op_flops(op, parents, out, a))

    # the probe input's values do not change the count, so zeros are enough
    x = _probe_input(net, input_shape)
    with T.op_hook(hook):
        _run_eval(net, x)
    return report


@dataclass
class LayerActivation:
    name: str
    shape: tuple
    bytes: int


@dataclass
class MemoryProfile:
    layers: list[LayerActivation]
    peak_bytes: int
    input_bytes: int

    def stage_bytes(self, prefix: str) -> int:
        return sum(l.bytes for l in self.layers if l.name == prefix or l.name.startswith(prefix + "."))

    def stage_peak(self, prefix: str) -> int:
        sizes = [l.bytes for l in self.layers if l.name == prefix or l.name.startswith(prefix + ".")]
        return max(sizes, default=0)

    def total_bytes(self) -> int:
        return sum(l.bytes for l in self.layers)


def activation_memory_profile(net: Module, input_shape, itemsize: int | None = None) -> MemoryProfile:
    """Output bytes of every leaf module in execution order and the peak live set.

    Under sequential execution a layer needs its input and output resident at
    once, so the live set of layer i is in_bytes(i) + out_bytes(i); the peak
    is the maximum over layers.
    """
    names = _names(net)
    width = itemsize or np.dtype(T.default_dtype()).itemsize
    layers: list[LayerActivation] = []
    live: list[int] = []

    def hook(mod, args, out):
        if mod._modules or not isinstance(out, Tensor):
            return
        in_bytes = sum(a.size * width for a in args if isinstance(a, Tensor))
        ob = out.size * width
        layers.append(LayerActivation(names.get(id(mod), type(mod).__name__), tuple(out.shape), ob))
        live.append(in_bytes + ob)

    remove = nn.add_module_hook(hook)
    try:
        _run_eval(net, _probe_input(net, input_shape))
    finally:
        remove()
    in_bytes = int(np.prod(input_shape)) * width
    return MemoryProfile(layers, max(live, default=in_bytes), in_bytes)
