"""Run configuration: flat ``key = value`` text grouped in ``[section]`` blocks.

Every key is optional; unknown sections or keys are rejected so typos do not
silently fall back to defaults.  ``RunConfig.to_text`` emits the full
effective configuration, which ``RunConfig.from_text`` reads back unchanged.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import LAYOUTS
from .errors import ConfigError
from .pooling import POOL_METHODS, SelfAttentivePoolConfig

BACKBONES = ("tiny_resnet", "tiny_mobilenet")
DATA_KINDS = ("idx", "cifar", "synth")
S1_VALUES = (1, 2, 4)
PATCH_VALUES = (1, 2, 4, 8)


@dataclass
class ModelSection:
    backbone: str = "tiny_resnet"
    width: float = 1.0
    pool: str = "sap"
    placement: str = "auto"  # outer for tiny_resnet, inner for tiny_mobilenet
    s1: int = 1


@dataclass
class SapSection:
    patch_sizes: tuple[int, ...] = (4, 2, 1, 1)
    channel_ratios: tuple[float, ...] = (0.25,)
    heads: int = 2
    bn1: bool = True
    bn2: bool = True
    exp: bool = True
    pe: bool = True
    sigmoid: bool = True
    pre_norm: bool = False


@dataclass
class DataSection:
    kind: str = "idx"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_files: tuple[str, ...] = ()
    test_files: tuple[str, ...] = ()
    train_size: int = 0  # 0 = all
    test_size: int = 0
    pad: int = 0
    normalize: bool = True
    synth_train: int = 10000
    synth_test: int = 2000
    synth_seed: int = 0
    synth_layout: str = "mixed"


@dataclass
class OptimSection:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 10
    cosine: bool = True
    warmup_steps: int = 0


@dataclass
class PruneSection:
    ratio: float = 2.0
    rate: float = 0.3
    epochs: int = 3
    lr: float = 0.01
    balance: str = "per_layer"
    stage: int = 1


@dataclass
class RunSection:
    seed: int = 0
    precision: str = "f32"
    timing: bool = False


SECTIONS = {
    "model": ModelSection,
    "sap": SapSection,
    "data": DataSection,
    "optim": OptimSection,
    "prune": PruneSection,
    "run": RunSection,
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse(kind, text: str):
    text = text.strip()
    if kind is bool:
        return _parse_bool(text)
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text
    item = {"tuple[int, ...]": int, "tuple[float, ...]": float, "tuple[str, ...]": str}[kind]
    return tuple(item(p.strip()) for p in text.split(",") if p.strip())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _kind(f) -> object:
    return {"bool": bool, "int": int, "float": float, "str": str}.get(f.type, f.type)


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    sap: SapSection = field(default_factory=SapSection)
    data: DataSection = field(default_factory=DataSection)
    optim: OptimSection = field(default_factory=OptimSection)
    prune: PruneSection = field(default_factory=PruneSection)
    run: RunSection = field(default_factory=RunSection)
    base_dir: str = field(default=".", compare=False)

    # -- text round trip -----------------------------------------------------
    @classmethod
    def from_text(cls, text: str, base_dir: str = ".") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparseable config: {exc}".replace("\n", " ")) from None
        cfg = cls(base_dir=base_dir)
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
            target = getattr(cfg, section)
            known = {f.name: f for f in fields(target)}
            updates = {}
            for key, raw in cp.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")
                try:
                    updates[key] = _parse(_kind(known[key]), raw)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: {exc}") from None
            setattr(cfg, section, replace(target, **updates))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(p.read_text(), base_dir=str(p.resolve().parent))

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            sec = getattr(self, name)
            for f in fields(sec):
                lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def override(self, seed: int | None = None, precision: str | None = None) -> "RunConfig":
        run = self.run
        if seed is not None:
            run = replace(run, seed=seed)
        if precision is not None:
            run = replace(run, precision=precision)
        out = replace(self, run=run)
        out.validate()
        return out

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    # -- validation ------------------------------------------------------------
    @property
    def placement(self) -> str:
        if self.model.placement != "auto":
            return self.model.placement
        return "outer" if self.model.backbone == "tiny_resnet" else "inner"

    def sap_configs(self, n_sites: int) -> list[SelfAttentivePoolConfig]:
        s = self.sap
        out = []
        for i in range(n_sites):
            ps = s.patch_sizes[min(i, len(s.patch_sizes) - 1)]
            cr = s.channel_ratios[min(i, len(s.channel_ratios) - 1)]
            out.append(
                SelfAttentivePoolConfig(
                    patch_size=ps, channel_ratio=cr, num_heads=s.heads, bn1=s.bn1, bn2=s.bn2,
                    exp=s.exp, pe=s.pe, sigmoid=s.sigmoid, pre_norm=s.pre_norm,
                )
            )
        return out

    def validate(self) -> None:
        m, s, d, o, p, r = self.model, self.sap, self.data, self.optim, self.prune, self.run

        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(m.backbone in BACKBONES, f"model.backbone must be one of {BACKBONES}, got {m.backbone!r}")
        need(m.pool in POOL_METHODS, f"model.pool must be one of {POOL_METHODS}, got {m.pool!r}")
        need(m.placement in ("auto", "inner", "outer"), f"model.placement must be auto, inner or outer, got {m.placement!r}")
        need(m.s1 in S1_VALUES, f"model.s1 must be one of {S1_VALUES}, got {m.s1}")
        need(m.width > 0, f"model.width must be positive, got {m.width}")
        need(len(s.patch_sizes) > 0, "sap.patch_sizes must list at least one value")
        for ps in s.patch_sizes:
            need(ps in PATCH_VALUES, f"sap.patch_sizes entries must be in {PATCH_VALUES}, got {ps}")
        need(len(s.channel_ratios) > 0, "sap.channel_ratios must list at least one value")
        for cr in s.channel_ratios:
            need(0 < cr <= 4, f"sap.channel_ratios entries must be in (0, 4], got {cr}")
        need(s.heads >= 1, f"sap.heads must be >= 1, got {s.heads}")
        need(d.kind in DATA_KINDS, f"data.kind must be one of {DATA_KINDS}, got {d.kind!r}")
        need(d.train_size >= 0 and d.test_size >= 0, "data.train_size and data.test_size must be >= 0")
        need(d.pad >= 0, f"data.pad must be >= 0, got {d.pad}")
        need(d.synth_layout in LAYOUTS, f"data.synth_layout must be one of {LAYOUTS}, got {d.synth_layout!r}")
        need(d.synth_train >= 4 and d.synth_test >= 4, "data.synth_train and data.synth_test must be >= 4")
        need(o.lr >= 0, f"optim.lr must be >= 0, got {o.lr}")
        need(0 <= o.momentum < 1, f"optim.momentum must be in [0, 1), got {o.momentum}")
        need(o.weight_decay >= 0, f"optim.weight_decay must be >= 0, got {o.weight_decay}")
        need(o.batch_size >= 1, f"optim.batch_size must be >= 1, got {o.batch_size}")
        need(o.epochs >= 1, f"optim.epochs must be >= 1, got {o.epochs}")
        need(o.warmup_steps >= 0, f"optim.warmup_steps must be >= 0, got {o.warmup_steps}")
        need(p.ratio >= 1, f"prune.ratio must be >= 1, got {p.ratio}")
        need(0 <= p.rate < 1, f"prune.rate must be in [0, 1), got {p.rate}")
        need(p.epochs >= 1, f"prune.epochs must be >= 1, got {p.epochs}")
        need(p.lr >= 0, f"prune.lr must be >= 0, got {p.lr}")
        need(p.balance in ("per_layer", "global"), f"prune.balance must be per_layer or global, got {p.balance!r}")
        need(p.stage >= 1, f"prune.stage must be >= 1, got {p.stage}")
        need(r.precision in ("f32", "f64"), f"run.precision must be f32 or f64, got {r.precision!r}")
        need(r.seed >= 0, f"run.seed must be >= 0, got {r.seed}")
