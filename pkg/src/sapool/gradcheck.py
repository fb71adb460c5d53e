"""Central finite-difference gradient checks (64-bit)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

REL_FLOOR = 1e-8
ZERO_TOL = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / (|numeric| + 1e-8)."""
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + REL_FLOOR)))


def numerical_gradient(fn: Callable[[], float], t: Tensor, step: float = 1e-4) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every element of ``t``.

    Two central quotients at ``step`` and ``step/2`` are combined by Richardson
    extrapolation, which cancels the h^2 error term.  That allows a step large
    enough to keep round-off small even for gradients near 1e-5.
    """
    grad = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    out = grad.reshape(-1)

    def quotient(i: int, h: float) -> float:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        return (fp - fm) / (2 * h)

    for i in range(flat.size):
        out[i] = (4 * quotient(i, step / 2) - quotient(i, step)) / 3
    return grad


@dataclass
class GradResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def check_gradients(
    build: Callable[[], Tensor],
    tensors: dict[str, Tensor],
    step: float = 1e-4,
    tol: float = 1e-5,
    seed: int = 0,
    zero: Sequence[str] = (),
) -> list[GradResult]:
    """Compare backprop against finite differences for each named tensor.

    Tensors named in ``zero`` have an exactly-zero true gradient (a later
    normalisation cancels them); the relative error is meaningless there, so
    both gradients are required to be below ``ZERO_TOL`` in absolute value.

    ``build`` recomputes the output from the current tensor values.  The
    scalar under test is ``sum(output * R)`` for a fixed random ``R`` so that
    every output element contributes a distinct weight.
    """
    with T.precision("f64"):
        out0 = build()
        proj = np.random.default_rng(seed).normal(size=out0.shape)

        def loss() -> Tensor:
            return T.tsum(T.mul(build(), proj))

        for t in tensors.values():
            t.grad = None
        l = loss()
        l.backward()
        analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros(t.shape)) for k, t in tensors.items()}
        results = []
        with T.no_grad():
            for name, t in tensors.items():
                num = numerical_gradient(lambda: float(loss().data), t, step)
                if name in zero:
                    worst = float(max(np.abs(analytic[name]).max(), np.abs(num).max()))
                    results.append(GradResult(f"{name}[zero]", worst, ZERO_TOL))
                else:
                    results.append(GradResult(name, relative_error(analytic[name], num), tol))
    return results


def op_suite(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    """(name, build, inputs) for every differentiable primitive, several shapes each."""
    from .attention import MultiHeadSelfAttention, scaled_dot_attention
    from .pooling import weighted_pool

    rng = np.random.default_rng(seed)
    cases = []

    def leaf(*shape, positive=False, scale=1.0):
        data = rng.normal(size=shape) * scale
        if positive:
            data = np.abs(data) + 0.5
        return Tensor(data, requires_grad=True, dtype=np.float64)

    with T.precision("f64"):
        for shape in [(3,), (2, 3), (2, 3, 4)]:
            a, b = leaf(*shape), leaf(*shape)
            bb = leaf(*shape[-1:])
            p = leaf(*shape, positive=True)
            cases += [
                (f"add{shape}", lambda a=a, bb=bb: T.add(a, bb), {"a": a, "b": bb}),
                (f"sub{shape}", lambda a=a, b=b: T.sub(a, b), {"a": a, "b": b}),
                (f"mul{shape}", lambda a=a, b=b: T.mul(a, b), {"a": a, "b": b}),
                (f"div{shape}", lambda a=a, p=p: T.div(a, p), {"a": a, "b": p}),
                (f"pow{shape}", lambda p=p: T.power(p, 1.5), {"a": p}),
                (f"exp{shape}", lambda a=a: T.exp(a), {"a": a}),
                (f"log{shape}", lambda p=p: T.log(p), {"a": p}),
                (f"sigmoid{shape}", lambda a=a: T.sigmoid(a), {"a": a}),
                (f"relu{shape}", lambda a=a: T.relu(a), {"a": a}),
                (f"sum{shape}", lambda a=a: T.tsum(a, axis=-1), {"a": a}),
                (f"mean{shape}", lambda a=a: T.mean(a, axis=0), {"a": a}),
                (f"softmax{shape}", lambda a=a: T.softmax(a), {"a": a}),
                (f"log_softmax{shape}", lambda a=a: T.log_softmax(a), {"a": a}),
            ]
        for m, k, n in [(1, 2, 1), (3, 4, 2), (5, 3, 6)]:
            a, b = leaf(m, k), leaf(k, n)
            cases.append((f"matmul({m}x{k}@{k}x{n})", lambda a=a, b=b: T.matmul(a, b), {"a": a, "b": b}))
        for shape in [(2, 3), (4, 5), (2, 3, 4)]:
            x, g, bt = leaf(*shape), leaf(shape[-1]), leaf(shape[-1])
            cases.append((f"layernorm{shape}", lambda x=x, g=g, bt=bt: T.layernorm(x, g, bt), {"x": x, "gamma": g, "beta": bt}))
        for (B, C, H, W, Co, k, s, pad) in [(1, 2, 6, 6, 3, 3, 2, 1), (2, 1, 5, 5, 2, 3, 1, 0), (1, 3, 4, 4, 2, 2, 2, 0), (2, 2, 4, 4, 3, 1, 1, 0)]:
            x, w, b = leaf(B, C, H, W), leaf(Co, C, k, k), leaf(Co)
            cases.append(
                (
                    f"conv2d(x{(B, C, H, W)},k={k},s={s},p={pad})",
                    lambda x=x, w=w, b=b, s=s, pad=pad: T.conv2d(x, w, b, s, pad),
                    {"x": x, "w": w, "b": b},
                )
            )
        for (B, C, H, k, s, pad) in [(1, 2, 5, 3, 1, 1), (2, 3, 6, 3, 2, 1), (1, 1, 4, 2, 2, 0)]:
            x, w = leaf(B, C, H, H), leaf(C, 1, k, k)
            cases.append(
                (f"depthwise_conv2d(x{(B, C, H, H)},k={k},s={s})", lambda x=x, w=w, s=s, pad=pad: T.depthwise_conv2d(x, w, None, s, pad), {"x": x, "w": w})
            )
        for shape, training in [((2, 3, 3, 3), True), ((4, 2, 2, 2), True), ((2, 3, 3, 3), False)]:
            x, g, bt = leaf(*shape), leaf(shape[1]), leaf(shape[1])
            rm, rv = rng.normal(size=shape[1]), np.abs(rng.normal(size=shape[1])) + 0.5

            def bn(x=x, g=g, bt=bt, rm=rm, rv=rv, training=training):
                return T.batchnorm2d(x, g, bt, rm.copy(), rv.copy(), training)

            cases.append((f"batchnorm2d{shape},{'train' if training else 'eval'}", bn, {"x": x, "gamma": g, "beta": bt}))
        for shape, size in [((1, 1, 2, 2), (4, 4)), ((2, 3, 3, 2), (5, 7)), ((1, 2, 4, 4), (8, 8))]:
            x = leaf(*shape)
            cases.append((f"bilinear_upsample{shape}->{size}", lambda x=x, size=size: T.bilinear_upsample(x, size), {"x": x}))
        for shape, s in [((1, 1, 4, 4), 2), ((2, 3, 6, 6), 3), ((1, 2, 8, 8), 4)]:
            x = leaf(*shape)
            pi = leaf(*shape, positive=True)
            cases += [
                (f"avg_pool2d{shape},s={s}", lambda x=x, s=s: T.avg_pool2d(x, s), {"x": x}),
                (f"max_pool2d{shape},s={s}", lambda x=x, s=s: T.max_pool2d(x, s), {"x": x}),
                (f"weighted_pool{shape},s={s}", lambda x=x, pi=pi, s=s: weighted_pool(x, pi, s), {"x": x, "pi": pi}),
            ]
        for n, dk in [(1, 2), (3, 2), (4, 3)]:
            q, k, v = leaf(n, dk), leaf(n, dk), leaf(n, dk)
            cases.append((f"scaled_dot_attention(N={n},dk={dk})", lambda q=q, k=k, v=v: scaled_dot_attention(q, k, v), {"q": q, "k": k, "v": v}))
        x = leaf(3, 4)
        msa = MultiHeadSelfAttention(4, 2, rng=rng).to(np.float64)
        msa_inputs = {"x": x, **dict(msa.named_parameters())}
        cases.append(("msa_forward(N=3,D=4,m=2)", lambda x=x, msa=msa: msa(x), msa_inputs))
        logits = leaf(4, 3)
        labels = np.array([0, 2, 1, 2])
        cases.append(("cross_entropy(4x3)", lambda logits=logits: T.cross_entropy(logits, labels), {"logits": logits}))
    return cases


def run_op_suite(seed: int = 0, tol: float = 1e-5) -> list[GradResult]:
    results = []
    for name, build, inputs in op_suite(seed):
        for r in check_gradients(build, inputs, tol=tol, seed=seed):
            results.append(GradResult(f"{name}[{r.name}]", r.max_rel_err, tol))
    return results


def layer_gradcheck(
    layer, x: Tensor, tol: float = 1e-5, seed: int = 0, zero: Sequence[str] = ()
) -> list[GradResult]:
    """Check d/dx and d/dparam for a module at its current train/eval mode."""
    layer.to(np.float64)
    inputs = {"input": x}
    inputs.update(dict(layer.named_parameters()))
    return check_gradients(lambda: layer(x), inputs, tol=tol, seed=seed, zero=zero)
