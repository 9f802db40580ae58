"""MobileNetV3 building blocks and a data-driven backbone builder.

A backbone is described by a :class:`BackboneSpec`, a list of rows read from
a small text format (one layer per line)::

    # kind   key=value ...
    conv     k=3 s=2 c=16 act=HS
    bneck    k=3 exp=16 c=16 se=F act=RE s=1
    bneck    k=5 exp=120 c=40 se=T act=RE s=1 repeat=2
    gam      window=7 heads=4 reduction=4
    mlp      hidden=1280 out=2

``repeat=n`` expands into n identical rows. ``gam`` rows mark attention
insertion sites; what is inserted there (GAM, SE, CBAM, nothing) is chosen
when the network is built. ``mlp`` pools globally and applies
Linear -> h-swish -> Linear. Comments start with ``#``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Union

import torch
from torch import nn

from . import tensor_core as tc
from .errors import ConfigError


class Conv2d(nn.Conv2d):
    def forward(self, x):
        return tc.conv2d(x, self.weight, self.bias, self.stride[0], self.padding[0], self.groups)

    def macs(self, out_shape):
        n, cout, h, w = out_shape
        k = self.kernel_size[0]
        return n * cout * h * w * (self.in_channels // self.groups) * k * k


class Linear(nn.Linear):
    def forward(self, x):
        return tc.linear(x, self.weight, self.bias)

    def macs(self, out_shape):
        return math.prod(out_shape[:-1]) * self.in_features * self.out_features


class ConvBNAct(nn.Module):
    def __init__(self, cin, cout, kernel, stride=1, groups=1, act: str | None = None):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, stride, kernel // 2, groups=groups, bias=False)
        self.bn = tc.BatchNorm2d(cout)
        self.act = tc.Activation(act) if act else nn.Identity()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class SEBlock(nn.Module):
    """Squeeze-and-excitation: x * h_sigmoid(FC2(relu(FC1(GAP(x)))))."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"SE channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.fc1 = Linear(channels, hidden)
        self.fc2 = Linear(hidden, channels)

    def gate(self, x):
        s = tc.global_avg_pool(x).flatten(1)
        return tc.h_sigmoid(self.fc2(tc.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gate(x)[:, :, None, None]


# -- spec rows ------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int
    out_channels: int
    activation: str = "HS"


@dataclass(frozen=True)
class BneckConfig:
    kernel: int
    exp_size: int
    out_channels: int
    use_se: bool
    activation: str
    stride: int

    def __post_init__(self):
        if self.kernel not in (3, 5):
            raise ConfigError(f"bneck kernel must be 3 or 5, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ConfigError(f"bneck stride must be 1 or 2, got {self.stride}")
        if self.activation not in ("RE", "HS"):
            raise ConfigError(f"bneck activation must be RE or HS, got {self.activation!r}")
        if self.exp_size < 1 or self.out_channels < 1:
            raise ConfigError("bneck channel counts must be positive")

    def has_residual(self, in_channels: int) -> bool:
        return self.stride == 1 and in_channels == self.out_channels


@dataclass(frozen=True)
class GamMarker:
    window: int = 7
    heads: int = 4
    reduction: int = 4


@dataclass(frozen=True)
class MlpSpec:
    hidden: int
    out: int


LayerSpec = Union[ConvSpec, BneckConfig, GamMarker, MlpSpec]


@dataclass
class BackboneSpec:
    layers: list = field(default_factory=list)
    name: str = "custom"

    @classmethod
    def parse(cls, text: str, name: str = "custom") -> "BackboneSpec":
        layers: list[LayerSpec] = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            kind, *fields = line.split()
            try:
                kv = dict(f.split("=", 1) for f in fields)
            except ValueError:
                raise ConfigError(f"{name}:{lineno}: fields must be key=value: {raw!r}") from None
            repeat = int(kv.pop("repeat", 1))
            try:
                row = _parse_row(kind, kv)
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"{name}:{lineno}: invalid {kind} row ({exc}): {raw!r}") from None
            layers.extend([row] * repeat)
        spec = cls(layers, name)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "BackboneSpec":
        path = Path(path)
        return cls.parse(path.read_text(), path.stem)

    @classmethod
    def canned(cls, which: str) -> "BackboneSpec":
        if which not in ("improved", "original"):
            raise ConfigError(f"no canned spec {which!r}")
        text = resources.files("emnet").joinpath("specs").joinpath(f"{which}.txt").read_text()
        return cls.parse(text, which)

    def dumps(self) -> str:
        lines = []
        for row in self.layers:
            if isinstance(row, ConvSpec):
                lines.append(f"conv k={row.kernel} s={row.stride} c={row.out_channels} act={row.activation}")
            elif isinstance(row, BneckConfig):
                lines.append(f"bneck k={row.kernel} exp={row.exp_size} c={row.out_channels} "
                             f"se={'T' if row.use_se else 'F'} act={row.activation} s={row.stride}")
            elif isinstance(row, GamMarker):
                lines.append(f"gam window={row.window} heads={row.heads} reduction={row.reduction}")
            else:
                lines.append(f"mlp hidden={row.hidden} out={row.out}")
        return "\n".join(lines) + "\n"

    def validate(self) -> None:
        if not self.layers or not isinstance(self.layers[0], ConvSpec):
            raise ConfigError(f"{self.name}: first row must be the stem conv")
        for i, row in enumerate(self.layers):
            if isinstance(row, MlpSpec) and i != len(self.layers) - 1:
                raise ConfigError(f"{self.name}: row {i + 1}: mlp must be the last row")

    def bneck_rows(self) -> list[BneckConfig]:
        return [r for r in self.layers if isinstance(r, BneckConfig)]

    def gam_positions(self) -> list[int]:
        """Number of bneck rows preceding each attention marker."""
        out, seen = [], 0
        for r in self.layers:
            if isinstance(r, BneckConfig):
                seen += 1
            elif isinstance(r, GamMarker):
                out.append(seen)
        return out


def _flag(v: str) -> bool:
    if v in ("T", "t", "true", "1"):
        return True
    if v in ("F", "f", "false", "0"):
        return False
    raise ValueError(f"expected T/F, got {v!r}")


def _parse_row(kind: str, kv: dict) -> LayerSpec:
    if kind == "conv":
        return ConvSpec(int(kv["k"]), int(kv.get("s", 1)), int(kv["c"]), kv.get("act", "HS"))
    if kind == "bneck":
        return BneckConfig(int(kv["k"]), int(kv["exp"]), int(kv["c"]), _flag(kv["se"]),
                           kv["act"], int(kv["s"]))
    if kind == "gam":
        return GamMarker(int(kv.get("window", 7)), int(kv.get("heads", 4)), int(kv.get("reduction", 4)))
    if kind == "mlp":
        return MlpSpec(int(kv["hidden"]), int(kv["out"]))
    raise ValueError(f"unknown row kind {kind!r}")


# -- blocks built from rows -------------------------------------------------------


class Bneck(nn.Module):
    """Inverted residual: [1x1 expand] -> kxk depthwise -> [SE] -> 1x1 project (+ residual)."""

    def __init__(self, in_channels: int, cfg: BneckConfig, se_reduction: int = 4):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        exp = cfg.exp_size
        self.expand = None if in_channels == exp else ConvBNAct(in_channels, exp, 1, act=cfg.activation)
        self.dwise = ConvBNAct(exp, exp, cfg.kernel, cfg.stride, groups=exp, act=cfg.activation)
        self.se = SEBlock(exp, se_reduction) if cfg.use_se else None
        self.project = ConvBNAct(exp, cfg.out_channels, 1)
        self.use_residual = cfg.has_residual(in_channels)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"bneck expects {self.in_channels} input channels, got {x.shape[1]}")
        y = x if self.expand is None else self.expand(x)
        y = self.dwise(y)
        if self.se is not None:
            y = self.se(y)
        y = self.project(y)
        return x + y if self.use_residual else y


class MlpHead(nn.Module):
    def __init__(self, cin, hidden, out):
        super().__init__()
        self.fc1 = Linear(cin, hidden)
        self.fc2 = Linear(hidden, out)

    def forward(self, x):
        return self.fc2(tc.h_swish(self.fc1(tc.global_avg_pool(x).flatten(1))))


class Backbone(nn.Module):
    """Sequential network whose layers are named stem, bneck1.., gam1.., conv2.., mlp."""

    def __init__(self, spec: BackboneSpec, attention: str = "gam", input_size: int = 224):
        super().__init__()
        from .gam import make_attention

        self.spec = spec
        self.attention = attention
        self.layers = nn.ModuleDict()
        self.shapes: dict[str, tuple[int, int, int]] = {}
        c, side = 3, input_size
        counts = {"conv": 0, "bneck": 0, "gam": 0}
        for i, row in enumerate(spec.layers):
            where = f"{spec.name} row {i + 1}"
            if isinstance(row, ConvSpec):
                counts["conv"] += 1
                name = "stem" if counts["conv"] == 1 else f"conv{counts['conv']}"
                self.layers[name] = ConvBNAct(c, row.out_channels, row.kernel, row.stride, act=row.activation)
                c = row.out_channels
                side = tc.conv_output_size(side, row.kernel, row.stride, row.kernel // 2)
            elif isinstance(row, BneckConfig):
                counts["bneck"] += 1
                name = f"bneck{counts['bneck']}"
                self.layers[name] = Bneck(c, row)
                c = row.out_channels
                side = tc.conv_output_size(side, row.kernel, row.stride, row.kernel // 2)
            elif isinstance(row, GamMarker):
                counts["gam"] += 1
                name = f"gam{counts['gam']}"
                if attention == "gam" and side % row.window:
                    raise ConfigError(f"{where}: feature side {side} not divisible by GAM window {row.window}")
                try:
                    self.layers[name] = make_attention(attention, c, row)
                except ConfigError as exc:
                    raise ConfigError(f"{where}: {exc}") from None
            else:
                name = "mlp"
                self.layers[name] = MlpHead(c, row.hidden, row.out)
                c, side = row.out, 1
            self.shapes[name] = (c, side, side)
        self.out_channels = c
        self.out_side = side

    def stage_names(self) -> list[str]:
        return list(self.layers.keys())

    def forward(self, x, until: str | None = None):
        if until is not None and until not in self.layers:
            raise KeyError(f"unknown stage {until!r}; valid: {', '.join(self.layers)}")
        for name, layer in self.layers.items():
            x = layer(x)
            if name == until:
                break
        return x


def build_backbone(spec: BackboneSpec, attention: str = "gam", input_size: int = 224) -> Backbone:
    spec.validate()
    return Backbone(spec, attention, input_size)


def init_weights(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, 0.01)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


# -- accounting ---------------------------------------------------------------------


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def param_table(net: nn.Module) -> list[tuple[str, int]]:
    """Learnable scalars owned directly by each module (modules owning none are skipped)."""
    rows = []
    for name, mod in net.named_modules():
        n = sum(p.numel() for p in mod.parameters(recurse=False))
        if n:
            rows.append((name or "<root>", n))
    return rows


def mac_table(net: nn.Module, input_shape=(1, 3, 224, 224)) -> list[tuple[str, int]]:
    """Multiply-accumulates per module for one forward pass at ``input_shape``.

    Modules contribute through a ``macs(out_shape)`` method (convs, linears)
    or a ``last_macs`` attribute set during forward (attention, EM).
    """
    rows: list[tuple[str, int]] = []
    hooks = []

    def make_hook(name):
        def hook(mod, inp, out):
            if hasattr(mod, "macs"):
                rows.append((name, int(mod.macs(tuple(out.shape)))))
            else:
                rows.append((name, int(mod.last_macs)))
        return hook

    for name, mod in net.named_modules():
        if hasattr(mod, "macs") or hasattr(mod, "last_macs"):
            hooks.append(mod.register_forward_hook(make_hook(name)))
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            net(torch.zeros(input_shape))
    finally:
        for h in hooks:
            h.remove()
        net.train(was_training)
    return rows


def count_flops(net: nn.Module, input_shape=(1, 3, 224, 224)) -> int:
    """FLOPs counted as 2 x multiply-accumulates."""
    return 2 * sum(m for _, m in mac_table(net, input_shape))


def count_macs(net: nn.Module, input_shape=(1, 3, 224, 224)) -> int:
    return sum(m for _, m in mac_table(net, input_shape))
