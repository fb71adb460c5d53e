"""Desk-scale staged CNN backbones with pluggable downsampling.

A backbone is a stem, a first pooling site with stride ``s1``, an ordered
list of stages and a global-average-pool + linear head.  Each stage may own
one pooling site.  With ``outer`` placement a stage pools after its last
block; with ``inner`` placement it pools after its first block.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, Linear, Module, Parameter, kaiming_uniform
from .pooling import POOL_METHODS, SelfAttentivePoolConfig, make_pool
from .rng import RngState
from .tensor import Tensor

PLACEMENTS = ("inner", "outer")


@dataclass
class StageSpec:
    num_blocks: int
    channels: int
    kind: str = "basic"  # "basic" residual or "inverted" residual
    expansion: int = 6
    pool_stride: int | None = 2
    sap: SelfAttentivePoolConfig | None = None

    def __post_init__(self):
        if self.num_blocks < 1 or self.channels < 1:
            raise ConfigError(f"stage needs positive blocks and channels, got {self.num_blocks}, {self.channels}")
        if self.kind not in ("basic", "inverted"):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.pool_stride is not None and self.pool_stride < 1:
            raise ConfigError(f"pool stride must be >= 1, got {self.pool_stride}")


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel=3, stride=1, padding=1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = Parameter(kaiming_uniform(rng, (channels, 1, kernel, kernel), kernel * kernel))

    def forward(self, x):
        return T.depthwise_conv2d(x, self.weight, None, self.stride, self.padding)


class ConvBN(Module):
    def __init__(self, cin, cout, kernel, relu=True, rng=None):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, padding=kernel // 2, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.relu = relu

    def forward(self, x):
        y = self.bn(self.conv(x))
        return T.relu(y) if self.relu else y


class BasicBlock(Module):
    def __init__(self, cin, cout, rng=None):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, padding=1, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, padding=1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(cout)
        self.shortcut = ConvBN(cin, cout, 1, relu=False, rng=rng) if cin != cout else None

    def forward(self, x):
        y = T.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.shortcut is None else self.shortcut(x)
        return T.relu(T.add(y, skip))


class InvertedResidual(Module):
    """1x1 expand -> 3x3 depthwise -> 1x1 linear projection (ReLU activations)."""

    def __init__(self, cin, cout, expansion=6, rng=None):
        super().__init__()
        hidden = cin * expansion
        self.expand = ConvBN(cin, hidden, 1, rng=rng) if expansion != 1 else None
        self.dw = DepthwiseConv2d(hidden, 3, rng=rng)
        self.dw_bn = BatchNorm2d(hidden)
        self.project = ConvBN(hidden, cout, 1, relu=False, rng=rng)
        self.residual = cin == cout

    def forward(self, x):
        y = self.expand(x) if self.expand is not None else x
        y = T.relu(self.dw_bn(self.dw(y)))
        y = self.project(y)
        return T.add(y, x) if self.residual else y


class Stage(Module):
    def __init__(self, blocks: list[Module], pool: Module | None, placement: str):
        super().__init__()
        self.blocks = blocks
        for i, b in enumerate(blocks):
            setattr(self, f"block{i}", b)
        self.pool = pool
        self.placement = placement
        self.block_shapes: list[tuple] = []

    def forward(self, x):
        self.block_shapes = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            self.block_shapes.append(x.shape)
            if self.pool is not None and self.placement == "inner" and i == 0:
                x = self.pool(x)
        if self.pool is not None and self.placement == "outer":
            x = self.pool(x)
        return x


class Backbone(Module):
    def __init__(self, stem, stem_pool, stages, head, placement, pool_method, input_hw, in_channels):
        super().__init__()
        self.stem = stem
        self.stem_pool = stem_pool
        self.stages = stages
        for i, s in enumerate(stages):
            setattr(self, f"stage{i + 1}", s)
        self.head = head
        self.placement = placement
        self.pool_method = pool_method
        self.input_hw = tuple(input_hw)
        self.in_channels = in_channels

    @property
    def num_classes(self) -> int:
        return self.head.weight.shape[0]

    def pool_sites(self) -> list[tuple[str, Module]]:
        """Pooling layers in execution order, named pool0, pool1, ..."""
        sites = [self.stem_pool] + [s.pool for s in self.stages if s.pool is not None]
        return [(f"pool{i}", p) for i, p in enumerate(sites)]

    def pool_site_paths(self) -> dict[str, str]:
        """Pool site id -> module path (e.g. pool1 -> stage1.pool)."""
        paths = {id(m): name for name, m in self.named_modules()}
        return {site: paths[id(m)] for site, m in self.pool_sites()}

    def features(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels or tuple(x.shape[2:]) != self.input_hw:
            raise DimensionError(
                f"backbone expects [B,{self.in_channels},{self.input_hw[0]},{self.input_hw[1]}], got {x.shape}"
            )
        x = self.stem_pool(self.stem(x))
        for stage in self.stages:
            x = stage(x)
        return x

    def forward(self, x: Tensor) -> Tensor:
        f = self.features(x)
        pooled = T.mean(f, axis=(2, 3))
        return self.head(pooled)


def _make_divisible(v: float, divisor: int = 8) -> int:
    new = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new < 0.9 * v:
        new += divisor
    return new


def _sap_for_site(configs, site: int, stage_cfg: SelfAttentivePoolConfig | None) -> SelfAttentivePoolConfig:
    if stage_cfg is not None:
        return stage_cfg
    if configs is None:
        return SelfAttentivePoolConfig()
    if isinstance(configs, SelfAttentivePoolConfig):
        return configs
    if site >= len(configs):
        return configs[-1]
    return configs[site]


def preflight(
    stages: list[StageSpec],
    placement: str,
    pool_method: str,
    s1: int,
    input_hw: tuple[int, int],
    stem_channels: int,
    sap_configs=None,
) -> list[tuple[int, int]]:
    """Check every pooling site divides its input; return per-site input sizes."""
    h, w = input_hw
    sites = []

    def check(site, label, stride, channels, stage_cfg=None):
        nonlocal h, w
        if h % stride or w % stride:
            raise ConfigError(f"{label}: resolution {h}x{w} not divisible by pool stride {stride}")
        if pool_method == "sap":
            cfg = replace(_sap_for_site(sap_configs, site, stage_cfg), stride=stride)
            cfg.validate(channels, (h, w), label)
        sites.append((h, w))
        h, w = h // stride, w // stride

    check(0, "stem pool (s1)", s1, stem_channels)
    site = 1
    for i, st in enumerate(stages):
        if st.pool_stride is not None:
            check(site, f"stage {i + 1}", st.pool_stride, st.channels, st.sap)
            site += 1
    return sites


def build_backbone(
    stages: list[StageSpec],
    placement: str = "outer",
    pool_method: str = "strided",
    s1: int = 1,
    *,
    in_channels: int = 3,
    num_classes: int = 10,
    input_hw: tuple[int, int] = (32, 32),
    stem_channels: int | None = None,
    sap_configs=None,
    seed: int = 0,
) -> Backbone:
    """Assemble a backbone; every downsampling site uses ``pool_method``.

    ``sap_configs`` is one :class:`SelfAttentivePoolConfig` or a list with one
    entry per pooling site (the last entry repeats).
    """
    if placement not in PLACEMENTS:
        raise ConfigError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
    if pool_method not in POOL_METHODS:
        raise ConfigError(f"pooling method must be one of {POOL_METHODS}, got {pool_method!r}")
    if s1 < 1:
        raise ConfigError(f"s1 must be >= 1, got {s1}")
    stem_channels = stem_channels or stages[0].channels
    site_hw = preflight(stages, placement, pool_method, s1, input_hw, stem_channels, sap_configs)

    rs = RngState(seed)
    # separate streams so swapping the pooling method leaves other weights unchanged
    body_rng = rs.fork(1).generator()
    pool_rng = rs.fork(2).generator()

    stem = ConvBN(in_channels, stem_channels, 3, rng=body_rng)
    stem_pool = make_pool(
        pool_method, stem_channels, s1, site_hw[0], _sap_for_site(sap_configs, 0, None), rng=pool_rng, name="pool0"
    )
    built = []
    cin = stem_channels
    site = 1
    for i, st in enumerate(stages):
        blocks = []
        for b in range(st.num_blocks):
            c_in = cin if b == 0 else st.channels
            if st.kind == "basic":
                blocks.append(BasicBlock(c_in, st.channels, rng=body_rng))
            else:
                blocks.append(InvertedResidual(c_in, st.channels, st.expansion, rng=body_rng))
        pool = None
        if st.pool_stride is not None:
            pool = make_pool(
                pool_method,
                st.channels,
                st.pool_stride,
                site_hw[site],
                _sap_for_site(sap_configs, site, st.sap),
                rng=pool_rng,
                name=f"pool{site}",
            )
            site += 1
        built.append(Stage(blocks, pool, placement))
        cin = st.channels
    head = Linear(cin, num_classes, rng=body_rng)
    return Backbone(stem, stem_pool, built, head, placement, pool_method, input_hw, in_channels)


def tiny_resnet_stages(width: float = 1.0) -> list[StageSpec]:
    chans = [16, 32, 64]
    return [StageSpec(2, max(1, int(round(c * width))), "basic", pool_stride=2) for c in chans]


def tiny_mobilenet_stages(width: float = 1.0) -> list[StageSpec]:
    chans = [16, 24, 32, 64]
    strides = [None, 2, 2, 2]
    return [
        StageSpec(2, _make_divisible(c * width), "inverted", expansion=6, pool_stride=s) for c, s in zip(chans, strides)
    ]


# default patch sizes per pooling site: large patches early, 1 later
DEFAULT_PATCH_SCHEDULE = (4, 2, 1, 1)
DEFAULT_CHANNEL_RATIO = 0.25


def default_sap_configs(n_sites: int = 4, **overrides) -> list[SelfAttentivePoolConfig]:
    sched = list(DEFAULT_PATCH_SCHEDULE) + [1] * max(0, n_sites - len(DEFAULT_PATCH_SCHEDULE))
    return [
        SelfAttentivePoolConfig(patch_size=p, channel_ratio=DEFAULT_CHANNEL_RATIO, num_heads=2, **overrides)
        for p in sched[:n_sites]
    ]


def tiny_resnet(pool_method="strided", s1=1, placement="outer", width=1.0, **kw) -> Backbone:
    stages = tiny_resnet_stages(width)
    kw.setdefault("sap_configs", default_sap_configs(1 + len(stages)))
    return build_backbone(stages, placement, pool_method, s1, **kw)


def tiny_mobilenet(pool_method="strided", s1=1, placement="inner", width=1.0, **kw) -> Backbone:
    stages = tiny_mobilenet_stages(width)
    kw.setdefault("sap_configs", default_sap_configs(1 + sum(s.pool_stride is not None for s in stages)))
    kw.setdefault("stem_channels", stages[0].channels)
    return build_backbone(stages, placement, pool_method, s1, **kw)
