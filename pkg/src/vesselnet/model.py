"""SA-UNetv2 graph assembly, parameter store, and analytic cost model.

Layout for channels ``(c1, c2, c3, c4)``::

    enc1..enc3   conv block x2 at c1..c3, each followed by maxpool2
    bott         conv block -> SA gate (optional) -> conv block, at c4
    dec3..dec1   3x3/2 transposed conv -> skip gate -> concat -> conv block x2
    head         1x1 conv -> sigmoid

A conv block is ``conv3x3 -> DropBlock -> GroupNorm -> activation``.
"""

from collections.abc import Mapping
from dataclasses import dataclass, field, replace

import numpy as np

from . import attention as att
from .autodiff import Tensor, parameter
from .errors import ConfigError, ShapeError
from .ops import (
    ConvParams,
    DropBlockConfig,
    GroupNormParams,
    concat_channels,
    conv2d,
    conv2d_transpose,
    dropblock,
    group_norm,
    maxpool2,
    relu,
    sigmoid,
    silu,
)
from .rng import Rng

SKIP_MODES = ("none", "sa", "csa")
ACTIVATIONS = ("silu", "relu")


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (16, 32, 48, 64)
    skip_attention: str = "csa"
    bottleneck_attention: bool = True
    activation: str = "silu"
    norm_groups: int = 8
    norm_eps: float = 1e-5
    dropblock: DropBlockConfig = field(default_factory=DropBlockConfig)
    in_channels: int = 3
    out_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    def validate(self):
        if len(self.channels) != 4:
            raise ConfigError(f"channels must have 4 entries, got {self.channels}")
        if self.norm_groups < 1:
            raise ConfigError("norm_groups must be positive")
        for c in self.channels:
            if c <= 0 or c % self.norm_groups:
                raise ConfigError(
                    f"channel width {c} must be positive and divisible by norm_groups={self.norm_groups}")
        if self.skip_attention not in SKIP_MODES:
            raise ConfigError(f"skip_attention must be one of {SKIP_MODES}, got {self.skip_attention!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("in_channels and out_channels must be positive")
        if not self.norm_eps > 0:
            raise ConfigError("norm_eps must be positive")

    def with_(self, **changes):
        return replace(self, **changes)

    def to_text(self):
        """Canonical ``key=value`` text; :meth:`from_text` inverts it exactly."""
        db = self.dropblock
        lines = [
            "channels=" + ",".join(str(c) for c in self.channels),
            f"skip_attention={self.skip_attention}",
            f"bottleneck_attention={int(self.bottleneck_attention)}",
            f"activation={self.activation}",
            f"norm_groups={self.norm_groups}",
            f"norm_eps={self.norm_eps!r}",
            f"drop_rate={db.drop_rate!r}",
            f"block_size={db.block_size}",
            f"dropblock_enabled={int(db.enabled)}",
            f"in_channels={self.in_channels}",
            f"out_channels={self.out_channels}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"malformed config line {line!r}")
            kv[key.strip()] = value.strip()
        try:
            cfg = cls(
                channels=tuple(int(c) for c in kv.pop("channels").split(",")),
                skip_attention=kv.pop("skip_attention"),
                bottleneck_attention=bool(int(kv.pop("bottleneck_attention"))),
                activation=kv.pop("activation"),
                norm_groups=int(kv.pop("norm_groups")),
                norm_eps=float(kv.pop("norm_eps")),
                dropblock=DropBlockConfig(
                    drop_rate=float(kv.pop("drop_rate")),
                    block_size=int(kv.pop("block_size")),
                    enabled=bool(int(kv.pop("dropblock_enabled", "1"))),
                ),
                in_channels=int(kv.pop("in_channels")),
                out_channels=int(kv.pop("out_channels")),
            )
        except KeyError as exc:
            raise ConfigError(f"config text is missing {exc.args[0]!r}") from None
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config value: {exc}") from None
        if kv:
            raise ConfigError(f"unknown config keys: {sorted(kv)}")
        return cfg


class ParamStore(Mapping):
    """Named parameter tensors, iterated in lexicographic name order."""

    def __init__(self, config, tensors):
        self.config = config
        self._tensors = dict(sorted(tensors.items()))

    def __getitem__(self, name):
        return self._tensors[name]

    def __setitem__(self, name, tensor):
        if name not in self._tensors:
            raise KeyError(f"unknown parameter {name!r}")
        if tensor.shape != self._tensors[name].shape:
            raise ShapeError(f"{name}: shape {tensor.shape} != {self._tensors[name].shape}")
        self._tensors[name] = tensor

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def astype(self, dtype):
        return ParamStore(self.config, {k: v.astype(dtype) for k, v in self._tensors.items()})

    def copy(self):
        return ParamStore(self.config, {k: parameter(v.data, name=k) for k, v in self._tensors.items()})


# -- construction ----------------------------------------------------------


def _layer_specs(cfg):
    """Yield ``(name, shape, init)`` for every parameter tensor."""
    c1, c2, c3, c4 = cfg.channels

    def conv(name, cin, cout, k):
        yield f"{name}.weight", (cout, cin, k, k), ("he", cin * k * k)
        yield f"{name}.bias", (1, cout, 1, 1), ("zeros",)

    def block(name, cin, cout):
        yield from conv(f"{name}.conv", cin, cout, 3)
        yield f"{name}.gn.gamma", (1, cout, 1, 1), ("ones",)
        yield f"{name}.gn.beta", (1, cout, 1, 1), ("zeros",)

    def gate(name):
        yield f"{name}.conv7.weight", (1, 2, 7, 7), ("he", 2 * 49)

    ins = (cfg.in_channels, c1, c2)
    for lvl, (cin, cout) in enumerate(zip(ins, (c1, c2, c3)), start=1):
        yield from block(f"enc{lvl}.block1", cin, cout)
        yield from block(f"enc{lvl}.block2", cout, cout)
    yield from block("bott.block1", c3, c4)
    if cfg.bottleneck_attention:
        yield from gate("bott.sa")
    yield from block("bott.block2", c4, c4)
    below = {3: c4, 2: c3, 1: c2}
    for lvl, width in ((3, c3), (2, c2), (1, c1)):
        yield from conv(f"dec{lvl}.up", below[lvl], width, 3)
        if cfg.skip_attention != "none":
            yield from gate(f"skip{lvl}.{cfg.skip_attention}")
        yield from block(f"dec{lvl}.block1", 2 * width, width)
        yield from block(f"dec{lvl}.block2", width, width)
    yield from conv("head", c1, cfg.out_channels, 1)


def expected_shapes(config):
    return {name: shape for name, shape, _ in _layer_specs(config)}


def build(config, rng):
    """Initialise parameters: He-normal conv weights, zero biases, unit GN scale."""
    config.validate()
    tensors = {}
    for name, shape, init in _layer_specs(config):
        if init[0] == "he":
            data = rng.split(name).normal(0.0, np.sqrt(2.0 / init[1]), size=shape)
        elif init[0] == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = parameter(data.astype(np.float32), name=name)
    return ParamStore(config, tensors)


def count_params(params):
    return int(sum(t.size for t in params.values()))


# -- forward ---------------------------------------------------------------


def _effective_dropblock(cfg, h, w):
    # Deep feature maps of small inputs can be narrower than the block.
    limit = min(h, w)
    if cfg.block_size <= limit:
        return cfg
    bs = limit if limit % 2 else limit - 1
    return DropBlockConfig(cfg.drop_rate, max(bs, 1), cfg.enabled)


class _Forward:
    def __init__(self, params, mode, rng):
        self.p = params
        self.cfg = params.config
        self.mode = mode
        self.rng = rng
        self.act = silu if self.cfg.activation == "silu" else relu

    def conv(self, name, x, padding=None):
        b = self.p.get(f"{name}.bias")
        return conv2d(x, ConvParams(self.p[f"{name}.weight"], b, padding=padding))

    def block(self, name, x):
        y = self.conv(f"{name}.conv", x)
        db = _effective_dropblock(self.cfg.dropblock, y.shape[2], y.shape[3])
        drng = self.rng.split(name) if self.rng is not None else None
        y = dropblock(y, db, self.mode, drng)
        y = group_norm(y, GroupNormParams(self.p[f"{name}.gn.gamma"], self.p[f"{name}.gn.beta"],
                                          self.cfg.norm_groups, self.cfg.norm_eps))
        return self.act(y)

    def gate(self, name):
        return att.SpatialAttentionParams.from_weight(self.p[f"{name}.conv7.weight"])

    def __call__(self, x):
        cfg = self.cfg
        skips = []
        h = x
        for lvl in (1, 2, 3):
            h = self.block(f"enc{lvl}.block1", h)
            h = self.block(f"enc{lvl}.block2", h)
            skips.append(h)
            h = maxpool2(h)
        h = self.block("bott.block1", h)
        if cfg.bottleneck_attention:
            h = att.sa_bottleneck(h, self.gate("bott.sa"))
        h = self.block("bott.block2", h)
        for lvl in (3, 2, 1):
            up = conv2d_transpose(h, ConvParams(self.p[f"dec{lvl}.up.weight"],
                                                self.p[f"dec{lvl}.up.bias"], stride=2))
            skip = skips[lvl - 1]
            if cfg.skip_attention == "csa":
                skip = att.csa(skip, up, self.gate(f"skip{lvl}.csa"))
            elif cfg.skip_attention == "sa":
                skip = att.sa_bottleneck(skip, self.gate(f"skip{lvl}.sa"))
            h = concat_channels(skip, up)
            h = self.block(f"dec{lvl}.block1", h)
            h = self.block(f"dec{lvl}.block2", h)
        return sigmoid(self.conv("head", h))


def forward(params, x, mode="eval", rng=None):
    """Probability map ``(n, out_channels, h, w)`` for an image batch ``x``.

    ``h`` and ``w`` must be divisible by 8.  Train mode needs ``rng`` for
    DropBlock; eval mode is deterministic.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    cfg = params.config
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise ShapeError(f"spatial dims must be divisible by 8, got {x.shape[2]}x{x.shape[3]}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        rng = Rng(0)
    return _Forward(params, mode, rng)(x)


# -- analytic cost model ---------------------------------------------------

# Per-element FLOP charges for the non-convolution layers (inference graph).
FLOP_COSTS = {
    "group_norm": 7,   # mean, centre, square, variance, scale, gamma, beta
    "silu": 4,         # exp, add, reciprocal, multiply
    "relu": 1,
    "sigmoid": 3,      # exp, add, reciprocal
    "maxpool2": 1,     # per input element
    "channel_mean": 1,  # per input element
    "channel_max": 1,   # per input element
    "gate_mul": 1,      # per gated output element
    "concat": 0,
    "dropblock": 0,     # identity at inference
}


def conv_flops(cin, cout, k, h_out, w_out, bias=True):
    return 2 * k * k * cin * cout * h_out * w_out + (cout * h_out * w_out if bias else 0)


def transpose_conv_flops(cin, cout, k, h_in, w_in, bias=True):
    """Multiply-adds issued per *input* pixel; the zero-inserted sites cost nothing."""
    return 2 * k * k * cin * cout * h_in * w_in + (cout * 4 * h_in * w_in if bias else 0)


def flops_breakdown(config, h, w):
    """List of ``(layer, flops)`` for one ``h x w`` image at inference."""
    if h % 8 or w % 8:
        raise ShapeError(f"spatial dims must be divisible by 8, got {h}x{w}")
    c1, c2, c3, c4 = config.channels
    act = FLOP_COSTS[config.activation]
    out = []

    def block(name, cin, cout, hh, ww):
        out.append((f"{name}.conv", conv_flops(cin, cout, 3, hh, ww)))
        out.append((f"{name}.gn", FLOP_COSTS["group_norm"] * cout * hh * ww))
        out.append((f"{name}.act", act * cout * hh * ww))

    def gate(name, planes_from, cgated, hh, ww, with_max):
        cost = FLOP_COSTS["channel_mean"] * planes_from * hh * ww
        if with_max:
            cost += FLOP_COSTS["channel_max"] * planes_from * hh * ww
        cost += conv_flops(2, 1, 7, hh, ww, bias=False)
        cost += FLOP_COSTS["sigmoid"] * hh * ww + FLOP_COSTS["gate_mul"] * cgated * hh * ww
        out.append((name, cost))

    sizes = [(h >> i, w >> i) for i in range(4)]
    widths = (c1, c2, c3)
    cin = config.in_channels
    for lvl in range(3):
        hh, ww = sizes[lvl]
        block(f"enc{lvl + 1}.block1", cin, widths[lvl], hh, ww)
        block(f"enc{lvl + 1}.block2", widths[lvl], widths[lvl], hh, ww)
        out.append((f"enc{lvl + 1}.pool", FLOP_COSTS["maxpool2"] * widths[lvl] * hh * ww))
        cin = widths[lvl]
    hh, ww = sizes[3]
    block("bott.block1", c3, c4, hh, ww)
    if config.bottleneck_attention:
        gate("bott.sa", c4, c4, hh, ww, with_max=True)
    block("bott.block2", c4, c4, hh, ww)
    below = c4
    for lvl in (3, 2, 1):
        width = widths[lvl - 1]
        hh, ww = sizes[lvl - 1]
        out.append((f"dec{lvl}.up", transpose_conv_flops(below, width, 3, hh // 2, ww // 2)))
        if config.skip_attention == "csa":
            # mean over the skip and the upsampled tensor, gate on the skip
            gate(f"skip{lvl}.csa", 2 * width, width, hh, ww, with_max=False)
        elif config.skip_attention == "sa":
            gate(f"skip{lvl}.sa", width, width, hh, ww, with_max=True)
        block(f"dec{lvl}.block1", 2 * width, width, hh, ww)
        block(f"dec{lvl}.block2", width, width, hh, ww)
        below = width
    out.append(("head.conv", conv_flops(c1, config.out_channels, 1, h, w)))
    out.append(("head.sigmoid", FLOP_COSTS["sigmoid"] * config.out_channels * h * w))
    return out


def count_flops(config, h, w):
    return float(sum(f for _, f in flops_breakdown(config, h, w)))
