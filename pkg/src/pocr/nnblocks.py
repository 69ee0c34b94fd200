"""MobileNetV3-style building blocks and desk-scale backbones.

Inverted-residual units with optional squeeze-excitation, per-stage stride
plans, and width-multiplier scaling. Three ready-made configurations cover
the detector, direction classifier, and recognizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import Tensor


# ---------------------------------------------------------------------------
# module base


class Module:
    """Minimal container: parameter/buffer discovery via attribute scan."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_params(self, prefix: str = ""):
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
        for name, child in self._children():
            out.extend(child.named_params(prefix + name + "."))
        return out

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, child in self._children():
            yield from child.named_modules(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        out = []
        for name, child in self._children():
            out.extend(child.named_buffers(prefix + name + "."))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def state_dict(self) -> dict:
        state = {n: p.data for n, p in self.named_params()}
        state.update({n: b for n, b in self.named_buffers()})
        return state

    def load_state(self, state: dict):
        own = dict(self.named_params())
        bufs = dict(self.named_buffers())
        for name, arr in state.items():
            if name in own:
                if own[name].data.shape != arr.shape:
                    raise ValueError(
                        f"shape mismatch for {name}: "
                        f"{own[name].data.shape} vs {arr.shape}")
                own[name].data = np.array(arr, dtype=np.float64)
            elif name in bufs:
                bufs[name][...] = arr
            else:
                raise KeyError(f"unknown tensor in state: {name}")


def param_count(module: Module) -> int:
    return sum(p.size for p in module.params())


def serialized_bytes(module: Module, precision: str = "f64") -> int:
    """Size in bytes of the module serialized as a bundle at given precision."""
    from . import bundle

    itemsize = {"f64": 8, "f32": 4, "i8": 1}[precision]
    tensors = {n: np.zeros(a.shape) for n, a in module.state_dict().items()}
    payload = sum(t.size * itemsize for t in tensors.values())
    manifest = bundle.manifest_bytes(tensors, precision)
    return payload + manifest


# ---------------------------------------------------------------------------
# primitive layers


def _same_floor_padding(kernel: int, stride: int):
    """Padding so stride-1 keeps size and stride-2 yields floor(H/2).

    Total pad = kernel - stride, split (before <= after).
    """
    total = max(0, kernel - stride)
    return (total // 2, total - total // 2)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1), padding=None,
                 groups=1, bias=False, rng=None):
        rng = rng or np.random.default_rng(0)
        kh = kw = kernel if isinstance(kernel, int) else kernel[0]
        if padding is None:
            padding = (_same_floor_padding(kh, stride[0]),
                       _same_floor_padding(kw, stride[1]))
        fan_in = in_ch // groups * kh * kw
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.standard_normal((out_ch, in_ch // groups, kh, kw)) * std,
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.groups = groups
        self.weight_quant = None  # set by slim.quantize_model

    def named_params(self, prefix: str = ""):
        out = [(prefix + "weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        return out

    def forward(self, x):
        w = self.weight if self.weight_quant is None else self.weight_quant(self.weight)
        out = nc.conv2d(x, w, self.stride, self.padding, self.groups)
        if self.bias is not None:
            out = out + nc.reshape(self.bias, (1, -1, 1, 1))
        return out


class BatchNorm2d(Module):
    MOMENTUM = 0.9
    EPS = 1e-5

    def __init__(self, channels):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def named_buffers(self, prefix: str = ""):
        return [(prefix + "running_mean", self.running_mean),
                (prefix + "running_var", self.running_var)]

    def forward(self, x, train: bool):
        if train:
            out, mu, var = nc.batchnorm_train(x, self.gamma, self.beta, self.EPS)
            self.running_mean[...] = self.MOMENTUM * self.running_mean + (1 - self.MOMENTUM) * mu
            self.running_var[...] = self.MOMENTUM * self.running_var + (1 - self.MOMENTUM) * var
            return out
        return nc.batchnorm_infer(x, self.gamma, self.beta,
                                  self.running_mean, self.running_var, self.EPS)


class Linear(Module):
    def __init__(self, in_dim, out_dim, bias=True, rng=None):
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / in_dim)
        self.weight = Tensor(rng.standard_normal((in_dim, out_dim)) * std,
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None
        self.weight_quant = None

    def named_params(self, prefix: str = ""):
        out = [(prefix + "weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        return out

    def forward(self, x):
        w = self.weight if self.weight_quant is None else self.weight_quant(self.weight)
        out = nc.matmul(x, w)
        if self.bias is not None:
            out = out + self.bias
        return out


_ACTS = {"relu": nc.relu, "hard_swish": nc.hard_swish, None: lambda t: t}


class ConvBNAct(Module):
    """conv -> batchnorm -> activation, with quantization hook points."""

    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1), groups=1,
                 act="relu", rng=None):
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, groups=groups, rng=rng)
        self.bn = BatchNorm2d(out_ch)
        self.act = act
        self.act_quant = None  # set by slim.quantize_model

    def forward(self, x, train: bool):
        out = self.bn.forward(self.conv.forward(x), train)
        out = _ACTS[self.act](out)
        if self.act_quant is not None:
            out = self.act_quant(out)
        return out


class SEBlock(Module):
    """Squeeze-excitation: GAP -> FC -> relu -> FC -> hard_sigmoid gate."""

    def __init__(self, channels, reduction=4, rng=None):
        inner = max(1, round(channels / reduction))
        self.fc1 = Linear(channels, inner, rng=rng)
        self.fc2 = Linear(inner, channels, rng=rng)
        self.channels = channels

    def forward(self, x):
        n, c = x.shape[0], x.shape[1]
        s = nc.reshape(nc.global_avg_pool(x), (n, c))
        gate = nc.hard_sigmoid(self.fc2.forward(nc.relu(self.fc1.forward(s))))
        return x * nc.reshape(gate, (n, c, 1, 1))


# ---------------------------------------------------------------------------
# block / backbone configuration


@dataclass
class BlockSpec:
    in_ch: int
    expand_ch: int
    out_ch: int
    kernel: int = 3
    stride: tuple = (1, 1)
    use_se: bool = False
    activation: str = "relu"

    def __post_init__(self):
        if self.stride[0] not in (1, 2) or self.stride[1] not in (1, 2):
            raise ValueError(f"block stride components must be 1 or 2, got {self.stride}")


@dataclass
class StridePlan:
    """Per-downsampling-stage strides D1..D5."""

    stages: list

    @staticmethod
    def detection():
        return StridePlan([(2, 2)] * 5)

    classification = detection

    @staticmethod
    def recognition(s2=(1, 1)):
        if tuple(s2) not in ((2, 1), (1, 1)):
            raise ValueError(f"recognition s2 must be (2,1) or (1,1), got {s2}")
        return StridePlan([(2, 2), tuple(s2), (2, 1), (2, 1), (2, 1)])

    def total_stride(self):
        sh = int(np.prod([s[0] for s in self.stages]))
        sw = int(np.prod([s[1] for s in self.stages]))
        return sh, sw


def scale_channels(ch: int, multiplier: float) -> int:
    """Nearest multiple of 4, floor 4."""
    return max(4, int(round(ch * multiplier / 4)) * 4)


# desk-scale block table (pre-multiplier widths); stride entries of None are
# filled from the stride plan stages D2..D5 in order
_BASE_BLOCKS = [
    # in, expand, out, kernel, downsample?, se, act
    (8, 16, 16, 3, True, False, "relu"),
    (16, 40, 24, 3, True, False, "relu"),
    (24, 48, 24, 3, False, False, "relu"),
    (24, 64, 32, 5, True, True, "hard_swish"),
    (32, 96, 32, 5, False, True, "hard_swish"),
    (32, 96, 48, 5, True, True, "hard_swish"),
    (48, 144, 48, 3, False, True, "hard_swish"),
]


@dataclass
class BackboneConfig:
    width_multiplier: float = 0.5
    stride_plan: StridePlan = field(default_factory=StridePlan.detection)
    use_se_globally: bool = True
    blocks: list = None  # resolved BlockSpec list (post-multiplier channels)
    stem_ch: int = None

    def __post_init__(self):
        if self.blocks is None:
            m = self.width_multiplier
            self.stem_ch = scale_channels(8, m)
            stages = self.stride_plan.stages
            if sum(1 for b in _BASE_BLOCKS if b[4]) != len(stages) - 1:
                raise ValueError(
                    f"stride plan has {len(stages)} stages but block table "
                    f"defines {sum(1 for b in _BASE_BLOCKS if b[4]) + 1}")
            ds_iter = iter(stages[1:])
            self.blocks = []
            for in_c, exp_c, out_c, k, down, se, act in _BASE_BLOCKS:
                stride = tuple(next(ds_iter)) if down else (1, 1)
                self.blocks.append(BlockSpec(
                    scale_channels(in_c, m), scale_channels(exp_c, m),
                    scale_channels(out_c, m), k, stride,
                    se and self.use_se_globally, act))
        elif not self.use_se_globally:
            for b in self.blocks:
                b.use_se = False

    @property
    def out_channels(self):
        return self.blocks[-1].out_ch

    def pyramid_channels(self):
        """Channels of C2..C5 taps (last block of each stage past the stem)."""
        chans = []
        for i, b in enumerate(self.blocks):
            last_of_stage = (i + 1 == len(self.blocks)
                             or self.blocks[i + 1].stride != (1, 1))
            if last_of_stage:
                chans.append(b.out_ch)
        return chans[-4:]

    def to_dict(self) -> dict:
        return {
            "width_multiplier": self.width_multiplier,
            "stride_plan": [list(s) for s in self.stride_plan.stages],
            "use_se_globally": self.use_se_globally,
            "stem_ch": self.stem_ch,
            "blocks": [{
                "in_ch": b.in_ch, "expand_ch": b.expand_ch, "out_ch": b.out_ch,
                "kernel": b.kernel, "stride": list(b.stride),
                "use_se": b.use_se, "activation": b.activation,
            } for b in self.blocks],
        }

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        blocks = [BlockSpec(b["in_ch"], b["expand_ch"], b["out_ch"], b["kernel"],
                            tuple(b["stride"]), b["use_se"], b["activation"])
                  for b in d["blocks"]]
        cfg = BackboneConfig(d["width_multiplier"],
                             StridePlan([tuple(s) for s in d["stride_plan"]]),
                             d["use_se_globally"], blocks)
        cfg.stem_ch = d["stem_ch"]
        return cfg


class InvertedResidual(Module):
    """expand 1x1 -> depthwise kxk -> (SE) -> project 1x1, residual if same shape."""

    def __init__(self, spec: BlockSpec, rng=None):
        self.spec = spec
        self.expand = ConvBNAct(spec.in_ch, spec.expand_ch, 1, act=spec.activation, rng=rng)
        self.depthwise = ConvBNAct(spec.expand_ch, spec.expand_ch, spec.kernel,
                                   stride=spec.stride, groups=spec.expand_ch,
                                   act=spec.activation, rng=rng)
        self.se = SEBlock(spec.expand_ch, rng=rng) if spec.use_se else None
        self.project = ConvBNAct(spec.expand_ch, spec.out_ch, 1, act=None, rng=rng)
        self.use_residual = spec.stride == (1, 1) and spec.in_ch == spec.out_ch

    def forward(self, x, train: bool):
        out = self.expand.forward(x, train)
        out = self.depthwise.forward(out, train)
        if self.se is not None:
            out = self.se.forward(out)
        out = self.project.forward(out, train)
        if self.use_residual:
            out = out + x
        return out


class Backbone(Module):
    """Stem conv plus inverted-residual blocks; emits the {C2..C5} pyramid."""

    def __init__(self, config: BackboneConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.stem = ConvBNAct(3, config.stem_ch, 3,
                              stride=config.stride_plan.stages[0],
                              act="hard_swish", rng=rng)
        if config.blocks[0].in_ch != config.stem_ch:
            raise ValueError(
                f"first block expects {config.blocks[0].in_ch} channels, "
                f"stem produces {config.stem_ch}")
        self.blocks = [InvertedResidual(b, rng=rng) for b in config.blocks]
        # pyramid taps: the last block of each downsampling stage past the stem
        self._taps = []
        for i, b in enumerate(config.blocks):
            is_last_of_stage = (i + 1 == len(config.blocks)
                                or config.blocks[i + 1].stride != (1, 1))
            if is_last_of_stage:
                self._taps.append(i)
        self._taps = self._taps[-4:]

    def forward(self, x, train: bool = False):
        """Returns [C2, C3, C4, C5] feature maps."""
        out = self.stem.forward(x, train)
        pyramid = []
        for i, block in enumerate(self.blocks):
            out = block.forward(out, train)
            if i in self._taps:
                pyramid.append(out)
        return pyramid


def build_backbone(config: BackboneConfig, rng=None) -> Backbone:
    return Backbone(config, rng=rng)
