"""Downsampling layers sharing one contract: [B,C,H,W] -> [B,C,H/s,W/s].

``SelfAttentivePool`` weights each activation by a non-local importance map
built from patch tokens; ``LipPool`` uses a local 1x1 logit module instead.
Both reduce windows with the normalised weighted average of
:func:`weighted_pool`.  Strided convolution, average and max pooling are the
plain baselines.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .attention import MultiHeadSelfAttention, PositionalEncoding, add_positional
from .errors import ConfigError, ContractError, DimensionError
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor

POOL_METHODS = ("sap", "lip", "strided", "avg", "max")


def weighted_pool(x: Tensor, pi: Tensor, s: int) -> Tensor:
    """Per s x s window: sum(pi * x) / sum(pi)."""
    if x.shape != pi.shape:
        raise DimensionError(f"weighted_pool: activation {x.shape} and weights {pi.shape} differ")
    if x.ndim != 4 or s < 1 or x.shape[2] % s or x.shape[3] % s:
        raise DimensionError(f"weighted_pool: spatial size {x.shape[2:]} not divisible by stride {s}")
    if T.is_debug() and not np.all(pi.data > 0):
        raise ContractError("weighted_pool: importance map must be strictly positive")
    if s == 1:
        # every window holds one element, so the ratio is x itself
        return x
    return T.div(T.window_sum(T.mul(pi, x), s), T.window_sum(pi, s))


@dataclass
class SelfAttentivePoolConfig:
    patch_size: int = 2
    channel_ratio: float = 1.0
    num_heads: int = 2
    stride: int = 2
    bn1: bool = True
    bn2: bool = True
    exp: bool = True
    pe: bool = True
    sigmoid: bool = True
    pre_norm: bool = False

    TOGGLES = ("bn1", "bn2", "exp", "pe", "sigmoid")

    def embed_dim(self, channels: int) -> int:
        d = self.channel_ratio * channels
        if d <= 0 or abs(d - round(d)) > 1e-9:
            raise ConfigError(f"channel_ratio {self.channel_ratio} x {channels} channels is not a positive integer")
        d = int(round(d))
        if d % self.num_heads:
            raise ConfigError(f"embedding dim {d} not divisible by num_heads {self.num_heads}")
        return d

    def validate(self, channels: int, hw: tuple[int, int] | None = None, layer: str = "sap") -> None:
        for f in ("patch_size", "num_heads", "stride"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{layer}: {f} must be positive, got {getattr(self, f)}")
        self.embed_dim(channels)
        if hw is not None:
            h, w = hw
            if h % self.patch_size or w % self.patch_size:
                raise ConfigError(f"{layer}: input {h}x{w} not divisible by patch size {self.patch_size}")
            if h % self.stride or w % self.stride:
                raise ConfigError(f"{layer}: input {h}x{w} not divisible by pool stride {self.stride}")

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class SelfAttentivePool(Module):
    """Patch embedding -> MSA -> spatial-channel restoration -> weighted pool."""

    def __init__(
        self,
        channels: int,
        input_hw: tuple[int, int],
        config: SelfAttentivePoolConfig | None = None,
        rng: np.random.Generator | None = None,
        name: str = "sap",
    ):
        super().__init__()
        config = config or SelfAttentivePoolConfig()
        config.validate(channels, input_hw, name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config, self.channels, self.input_hw, self.name = config, channels, tuple(input_hw), name
        ep = config.patch_size
        dim = config.embed_dim(channels)
        self.dim = dim
        self.embed = Conv2d(channels, dim, ep, stride=ep, rng=rng)
        self.bn1 = BatchNorm2d(dim)
        n_tokens = (input_hw[0] // ep) * (input_hw[1] // ep)
        self.pos = PositionalEncoding(n_tokens, dim, rng=rng)
        self.msa = MultiHeadSelfAttention(dim, config.num_heads, rng=rng, pre_norm=config.pre_norm)
        self.restore_conv = Conv2d(dim, channels, 1, rng=rng)
        self.bn2 = BatchNorm2d(channels)
        self.last_pi: np.ndarray | None = None

    @property
    def stride(self) -> int:
        return self.config.stride

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"{self.name}: expected [B,{self.channels},H,W], got {x.shape}")
        ep, s = self.config.patch_size, self.config.stride
        h, w = x.shape[2:]
        if h % ep or w % ep:
            raise ConfigError(f"{self.name}: input {x.shape} not divisible by patch size {ep}")
        if h % s or w % s:
            raise DimensionError(f"{self.name}: input {x.shape} not divisible by stride {s}")

    def patch_embed(self, x: Tensor) -> Tensor:
        """[B,C,H,W] -> row-major token sequence [B, H*W/ep^2, D]."""
        self._check_input(x)
        y = self.embed(x)
        if self.config.bn1:
            y = self.bn1(y)
        y = T.relu(y)
        B, D, h, w = y.shape
        tokens = T.reshape(T.transpose(y, (0, 2, 3, 1)), (B, h * w, D))
        if self.config.pe:
            tokens = add_positional(tokens, self.pos)
        return tokens

    def restore(self, tokens: Tensor, target: tuple[int, int]) -> Tensor:
        """Token sequence -> importance map pi with the input's [B,C,H,W] shape."""
        ep = self.config.patch_size
        H, W = target
        h, w = H // ep, W // ep
        B, N, D = tokens.shape
        if N != h * w:
            raise DimensionError(f"{self.name}: {N} tokens cannot be restored to a {h}x{w} patch grid")
        grid = T.transpose(T.reshape(tokens, (B, h, w, D)), (0, 3, 1, 2))
        up = T.bilinear_upsample(grid, (H, W))
        r = self.restore_conv(up)
        if self.config.bn2:
            r = self.bn2(r)
        if self.config.sigmoid:
            r = T.sigmoid(r)
        if self.config.exp:
            r = T.exp(r)
        return r

    def importance(self, x: Tensor) -> Tensor:
        return self.restore(self.msa(self.patch_embed(x)), x.shape[2:])

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        if self.config.stride == 1:
            # windows are single elements: the output is x whatever pi is
            return x
        pi = self.importance(x)
        self.last_pi = pi.data
        return weighted_pool(x, pi, self.config.stride)


class LipPool(Module):
    """Local importance pooling with a single 1x1 logit convolution."""

    def __init__(self, channels: int, stride: int, rng=None, name: str = "lip"):
        super().__init__()
        self.channels, self.stride, self.name = channels, stride, name
        self.logit = Conv2d(channels, channels, 1, rng=rng)

    def importance(self, x: Tensor) -> Tensor:
        return T.exp(self.logit(x))

    def forward(self, x: Tensor) -> Tensor:
        if self.stride == 1:
            return x
        return weighted_pool(x, self.importance(x), self.stride)


class StridedConvPool(Module):
    def __init__(self, channels: int, stride: int, rng=None, name: str = "strided"):
        super().__init__()
        self.channels, self.stride, self.name = channels, stride, name
        self.conv = Conv2d(channels, channels, 3, stride=stride, padding=1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        T._check_windows(x, self.stride, self.name)
        return self.conv(x)


class AvgPool(Module):
    def __init__(self, channels: int, stride: int, name: str = "avg"):
        super().__init__()
        self.channels, self.stride, self.name = channels, stride, name

    def forward(self, x: Tensor) -> Tensor:
        return T.avg_pool2d(x, self.stride)


class MaxPool(Module):
    def __init__(self, channels: int, stride: int, name: str = "max"):
        super().__init__()
        self.channels, self.stride, self.name = channels, stride, name

    def forward(self, x: Tensor) -> Tensor:
        return T.max_pool2d(x, self.stride)


def make_pool(
    method: str,
    channels: int,
    stride: int,
    input_hw: tuple[int, int],
    sap: SelfAttentivePoolConfig | None = None,
    rng: np.random.Generator | None = None,
    name: str = "pool",
) -> Module:
    if method == "sap":
        cfg = SelfAttentivePoolConfig(**{**(sap.as_dict() if sap else {}), "stride": stride})
        return SelfAttentivePool(channels, input_hw, cfg, rng=rng, name=name)
    if method == "lip":
        return LipPool(channels, stride, rng=rng, name=name)
    if method == "strided":
        return StridedConvPool(channels, stride, rng=rng, name=name)
    if method == "avg":
        return AvgPool(channels, stride, name=name)
    if method == "max":
        return MaxPool(channels, stride, name=name)
    raise ConfigError(f"unknown pooling method {method!r}; expected one of {POOL_METHODS}")


# functional aliases matching the layer names used elsewhere


def patch_embed(x: Tensor, layer: SelfAttentivePool) -> Tensor:
    return layer.patch_embed(x)


def restore(tokens: Tensor, layer: SelfAttentivePool, target: tuple[int, int]) -> Tensor:
    return layer.restore(tokens, target)


def sap_forward(x: Tensor, layer: SelfAttentivePool) -> Tensor:
    return layer(x)


def lip_forward(x: Tensor, layer: LipPool) -> Tensor:
    return layer(x)


def stridedconv_forward(x: Tensor, layer: StridedConvPool) -> Tensor:
    return layer(x)


def avg_forward(x: Tensor, s: int) -> Tensor:
    return T.avg_pool2d(x, s)


def max_forward(x: Tensor, s: int) -> Tensor:
    return T.max_pool2d(x, s)
