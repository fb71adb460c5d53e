"""Config-driven construction of datasets, models and training runs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import Backbone, tiny_mobilenet, tiny_mobilenet_stages, tiny_resnet, tiny_resnet_stages
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, load_cifar_binary, load_idx, synth_nonlocal_dataset
from .errors import ConfigError, FormatError
from .pruning import PruneState, init_prune_state, prunable_layers
from .train import OptimConfig, TrainReport, train


def _existing(cfg: RunConfig, p: str, key: str) -> Path:
    if not p:
        raise ConfigError(f"data.{key} is required for data.kind = {cfg.data.kind}")
    path = cfg.path(p)
    if not path.is_file():
        raise ConfigError(f"data.{key}: file not found: {path}")
    return path


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.kind == "idx":
        train_set = load_idx(_existing(cfg, d.train_images, "train_images"), _existing(cfg, d.train_labels, "train_labels"))
        test_set = load_idx(
            _existing(cfg, d.test_images, "test_images"), _existing(cfg, d.test_labels, "test_labels"), split="test"
        )
    elif d.kind == "cifar":
        if not d.train_files or not d.test_files:
            raise ConfigError("data.train_files and data.test_files are required for data.kind = cifar")
        train_set = load_cifar_binary([_existing(cfg, f, "train_files") for f in d.train_files])
        test_set = load_cifar_binary([_existing(cfg, f, "test_files") for f in d.test_files], split="test")
    else:
        train_set = synth_nonlocal_dataset(d.synth_train, d.synth_seed, layout=d.synth_layout)
        test_set = synth_nonlocal_dataset(d.synth_test, d.synth_seed + 1, split="test", layout=d.synth_layout)
    if d.train_size:
        train_set = train_set.take(d.train_size)
    if d.test_size:
        test_set = test_set.take(d.test_size)
    train_set, test_set = train_set.pad(d.pad), test_set.pad(d.pad)
    if train_set.shape != test_set.shape:
        raise FormatError(f"train images {train_set.shape} and test images {test_set.shape} differ in shape")
    if d.normalize:
        mean, std = train_set.fit_normalization()
        train_set, test_set = train_set.with_normalization(mean, std), test_set.with_normalization(mean, std)
    return train_set, test_set


def data_geometry(cfg: RunConfig) -> tuple[int, tuple[int, int], int]:
    """(channels, (H, W), classes) without reading pixel data when avoidable."""
    d = cfg.data
    if d.kind == "synth":
        return 1, (32 + 2 * d.pad, 32 + 2 * d.pad), 2
    if d.kind == "cifar":
        return 3, (32 + 2 * d.pad, 32 + 2 * d.pad), 10
    train_set, _ = load_datasets(cfg)
    c, h, w = train_set.shape
    return c, (h, w), train_set.num_classes


def build_model(cfg: RunConfig, in_channels: int, input_hw: tuple[int, int], num_classes: int) -> Backbone:
    m = cfg.model
    if m.backbone == "tiny_resnet":
        n_sites = 1 + len(tiny_resnet_stages(m.width))
        factory = tiny_resnet
    else:
        n_sites = 1 + sum(s.pool_stride is not None for s in tiny_mobilenet_stages(m.width))
        factory = tiny_mobilenet
    net = factory(
        m.pool,
        s1=m.s1,
        placement=cfg.placement,
        width=m.width,
        in_channels=in_channels,
        num_classes=num_classes,
        input_hw=input_hw,
        sap_configs=cfg.sap_configs(n_sites),
        seed=cfg.run.seed,
    )
    if cfg.run.precision == "f64":
        net.to(np.float64)
    return net


def optim_config(cfg: RunConfig, lr: float | None = None) -> OptimConfig:
    o = cfg.optim
    return OptimConfig(
        lr=o.lr if lr is None else lr,
        momentum=o.momentum,
        weight_decay=o.weight_decay,
        batch_size=o.batch_size,
        cosine=o.cosine,
        warmup_steps=o.warmup_steps,
    )


def save_model(path, net: Backbone, prune: PruneState | None = None) -> None:
    save_checkpoint(path, net.state_dict(), dict(prune.masks) if prune is not None else None)


def load_model(path, net: Backbone) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    tensors, masks = load_checkpoint(p)
    try:
        net.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint {path} does not match the configured model: {exc}") from None
    return masks


@dataclass
class RunResult:
    net: Backbone
    report: TrainReport
    prune: PruneState | None = None
    test_acc: float = float("nan")


def run_training(cfg: RunConfig, datasets: tuple[Dataset, Dataset] | None = None, max_steps: int | None = None, **kw) -> RunResult:
    with T.precision(cfg.run.precision):
        train_set, test_set = datasets or load_datasets(cfg)
        c, h, w = train_set.shape
        net = build_model(cfg, c, (h, w), train_set.num_classes)
        report = train(
            net, train_set, test_set, optim_config(cfg), cfg.optim.epochs, cfg.run.seed,
            max_steps=max_steps, timing=cfg.run.timing, **kw,
        )
    return RunResult(net, report, test_acc=report.final_test_acc)


def run_prune_finetune(
    cfg: RunConfig, pretrained: str | Path, datasets: tuple[Dataset, Dataset] | None = None, **kw
) -> RunResult:
    with T.precision(cfg.run.precision):
        train_set, test_set = datasets or load_datasets(cfg)
        c, h, w = train_set.shape
        net = build_model(cfg, c, (h, w), train_set.num_classes)
        load_model(pretrained, net)
        p = cfg.prune
        if p.stage > len(net.stages):
            raise ConfigError(f"prune.stage {p.stage} exceeds the backbone's {len(net.stages)} stages")
        state = init_prune_state(prunable_layers(net, p.stage - 1), p.ratio, p.epochs, p.rate, p.balance)
        report = train(
            net, train_set, test_set, optim_config(cfg, lr=p.lr), p.epochs, cfg.run.seed,
            prune=state, timing=cfg.run.timing, **kw,
        )
    return RunResult(net, report, state, report.final_test_acc)
