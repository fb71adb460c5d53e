"""Finite-difference checks of whole layers, built from a run configuration."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import tensor as T
from .backbone import BasicBlock, InvertedResidual
from .gradcheck import GradResult, layer_gradcheck
from .nn import BatchNorm2d, Module
from .pooling import LipPool, SelfAttentivePool, SelfAttentivePoolConfig, StridedConvPool
from .tensor import Tensor

SAP_CHECK_SHAPE = (1, 4, 8, 8)


def randomize_bn_stats(layer: Module, rng: np.random.Generator) -> None:
    for _, m in layer.named_modules():
        if isinstance(m, BatchNorm2d):
            m.running_mean[...] = rng.normal(size=m.running_mean.shape)
            m.running_var[...] = rng.uniform(0.5, 2.0, size=m.running_var.shape)


def zero_gradient_params(cfg: SelfAttentivePoolConfig, training: bool) -> list[str]:
    """SAP parameters whose effect is cancelled exactly, so their gradient is 0.

    A train-mode BN removes any per-channel constant added before it.  When
    pi = exp(r) without a sigmoid, a per-channel constant in r scales pi by a
    factor that the weighted pool's normalisation divides out.
    """
    scale_free = cfg.exp and not cfg.sigmoid
    names = []
    if training and cfg.bn1:
        names.append("embed.bias")
    # per-channel constants reaching the restore path: its conv bias and, post-norm, LN's beta
    constants = ["restore_conv.bias"] + ([] if cfg.pre_norm else ["msa.norm.beta"])
    if (training and cfg.bn2) or scale_free:
        names += constants
    if cfg.bn2 and scale_free:
        names.append("bn2.beta")
    return names


def sap_layer_checks(cfg: SelfAttentivePoolConfig, seed: int = 0, tol: float = 1e-5) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    with T.precision("f64"):
        layer = SelfAttentivePool(SAP_CHECK_SHAPE[1], SAP_CHECK_SHAPE[2:], cfg, rng=rng, name="sap").to(np.float64)
        x = Tensor(rng.normal(size=SAP_CHECK_SHAPE), requires_grad=True)
        results = []
        for r in layer_gradcheck(layer.train(), x, tol, seed, zero=zero_gradient_params(cfg, True)):
            results.append(GradResult(f"sap[train].{r.name}", r.max_rel_err, r.tol))
        randomize_bn_stats(layer, rng)
        for r in layer_gradcheck(layer.eval(), x, tol, seed, zero=zero_gradient_params(cfg, False)):
            results.append(GradResult(f"sap[eval].{r.name}", r.max_rel_err, r.tol))
        layer.train()
    return results


def _module_checks(label: str, layer: Module, shape, seed: int, tol: float, zero=()) -> list[GradResult]:
    rng = np.random.default_rng(seed + 1)
    with T.precision("f64"):
        layer.to(np.float64)
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        return [
            GradResult(f"{label}.{r.name}", r.max_rel_err, r.tol) for r in layer_gradcheck(layer, x, tol, seed, zero)
        ]


def run_layer_suite(run_cfg, tol: float = 1e-5) -> list[GradResult]:
    """End-to-end SAP with the configured toggles plus every other layer kind."""
    seed = run_cfg.run.seed
    base = run_cfg.sap_configs(1)[0]
    sap_cfg = replace(base, patch_size=2, channel_ratio=1.0, num_heads=2, stride=2)
    rng = np.random.default_rng(seed)
    results = sap_layer_checks(sap_cfg, seed, tol)
    # exp(logit + b) scales each channel's weights by e^b, which the pool normalises away
    results += _module_checks("lip", LipPool(4, 2, rng=rng), SAP_CHECK_SHAPE, seed, tol, zero=("logit.bias",))
    results += _module_checks("strided", StridedConvPool(4, 2, rng=rng), SAP_CHECK_SHAPE, seed, tol)
    results += _module_checks("basic_block", BasicBlock(3, 4, rng=rng), (2, 3, 5, 5), seed, tol)
    results += _module_checks("inverted_residual", InvertedResidual(4, 4, 2, rng=rng), (2, 4, 5, 5), seed, tol)
    return results
