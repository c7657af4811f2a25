"""Network layers and the two architectures used in experiments.

Both networks keep their first convolution and final classifier at full
precision; every other convolution is tagged ``binary``.  A binary-tagged
conv quantizes its input activations and convolves with sign(W) while the
optimizer keeps updating the real-valued masters.  With ``binarize=False``
the same layers run at full precision, which gives the baseline arm.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .quant import QuantConfig, binarize_ste, quantize_activation_ste

__all__ = [
    "ModelConfig", "Module", "Conv2d", "BatchNorm2d", "Linear", "PreActBlock",
    "PreActResNet18", "LeNetBinary", "build_model", "build_preact_resnet18",
    "build_lenet_binary", "memory_report", "MemoryReport",
]

WIDTHS = (1.0, 0.5, 0.25, 0.125)
ARCHITECTURES = ("preact_resnet18", "lenet")


@dataclass
class ModelConfig:
    arch: str = "preact_resnet18"
    num_classes: int = 10
    width: float = 1.0
    binarize: bool = True
    in_channels: int = 3
    quant: QuantConfig = field(default_factory=QuantConfig)

    def __post_init__(self):
        if isinstance(self.quant, dict):
            self.quant = QuantConfig(**self.quant)
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if float(self.width) not in WIDTHS:
            raise ValueError(f"width multiplier must be one of {WIDTHS}, got {self.width}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    """Minimal container: parameters are Tensors, buffers are ndarrays."""

    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def _own_params(self) -> dict[str, Tensor]:
        return {}

    def _own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in self.named_modules():
            for k, v in mod._own_params().items():
                out[f"{prefix}.{k}" if prefix else k] = v
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, mod in self.named_modules():
            for k, v in mod._own_buffers().items():
                out[f"{prefix}.{k}" if prefix else k] = v
        return out

    def train(self, mode: bool = True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, precision="full",
                 binarize=True, quant: QuantConfig | None = None, rng=None):
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding = stride, padding
        self.precision = precision
        self.binarize = binarize and precision == "binary"
        self.quant = quant or QuantConfig()
        std = math.sqrt(2.0 / (in_ch * kernel * kernel))
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(rng.normal(0.0, std, (out_ch, in_ch, kernel, kernel)), requires_grad=True)
        self.packed = None  # set by bitpack.pack_model for deployment inference

    def _own_params(self):
        return {"weight": self.weight}

    @property
    def n_per_filter(self) -> int:
        return self.in_ch * self.kernel * self.kernel

    def effective_weight(self) -> Tensor:
        if not self.binarize:
            return self.weight
        return binarize_ste(self.weight, self.quant.ste_clip, self.quant.per_layer_scale)

    def __call__(self, x: Tensor) -> Tensor:
        if self.binarize:
            x = quantize_activation_ste(x, self.quant.activation_bits)
            if self.packed is not None and not ad.grad_enabled():
                from .bitpack import binary_conv_addsub
                return Tensor(binary_conv_addsub(x.data, self.packed, self.stride, self.padding,
                                                 self.quant.activation_bits))
        return ad.conv2d(x, self.effective_weight(), self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def _own_params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def _own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x):
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None):
        bound = 1.0 / math.sqrt(in_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(rng.uniform(-bound, bound, (in_features, out_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def _own_params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class Network(Module):
    """Base for full models: precision tags and helpers shared by the zoo."""

    config: ModelConfig

    def __call__(self, x) -> Tensor:
        return self.forward(ad.as_tensor(x))

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def conv_layers(self) -> dict[str, Conv2d]:
        return {name: m for name, m in self.named_modules() if isinstance(m, Conv2d)}

    def binary_conv_layers(self) -> dict[str, Conv2d]:
        return {name: m for name, m in self.conv_layers().items() if m.precision == "binary"}

    def binary_conv_weights(self) -> dict[str, Tensor]:
        return {name: m.weight for name, m in self.binary_conv_layers().items()}

    def precision_tags(self) -> dict[str, str]:
        tags = {}
        for name, m in self.named_modules():
            if isinstance(m, Conv2d):
                tags[name] = m.precision
            elif isinstance(m, (Linear, BatchNorm2d)):
                tags[name] = "full"
        return tags

    def binary_parameter_names(self) -> set[str]:
        return {f"{name}.weight" for name in self.binary_conv_layers()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())


def _relu(x):
    return ad.relu(x)


class PreActBlock(Module):
    """BN -> ReLU -> conv3x3 -> BN -> ReLU -> conv3x3, plus identity or 1x1 shortcut."""

    def __init__(self, in_planes, planes, stride, binarize, quant, rng):
        self.bn1 = BatchNorm2d(in_planes)
        self.conv1 = Conv2d(in_planes, planes, 3, stride, 1, "binary", binarize, quant, rng)
        self.bn2 = BatchNorm2d(planes)
        self.conv2 = Conv2d(planes, planes, 3, 1, 1, "binary", binarize, quant, rng)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = Conv2d(in_planes, planes, 1, stride, 0, "binary", binarize, quant, rng)

    def __call__(self, x):
        out = _relu(self.bn1(x))
        residual = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(_relu(self.bn2(out)))
        return out + residual


class PreActResNet18(Network):
    """CIFAR pre-activation ResNet-18: 3x3 stem, 4 stages x 2 blocks, BN-ReLU head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        widths = [int(round(c * config.width)) for c in (64, 128, 256, 512)]
        self.stem = Conv2d(config.in_channels, widths[0], 3, 1, 1, "full", rng=rng)
        blocks, in_planes = [], widths[0]
        for stage, planes in enumerate(widths):
            for i in range(2):
                stride = 2 if stage > 0 and i == 0 else 1
                blocks.append(PreActBlock(in_planes, planes, stride, config.binarize, config.quant, rng))
                in_planes = planes
        self.blocks = blocks
        self.bn = BatchNorm2d(in_planes)
        self.fc = Linear(in_planes, config.num_classes, rng)

    def forward(self, x):
        out = self.stem(x)
        for block in self.blocks:
            out = block(out)
        out = _relu(self.bn(out))
        return self.fc(ad.global_avg_pool(out))


class LeNetBinary(Network):
    """Small test vehicle: fp stem, two binary stride-2 convs, fp classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c1, c2, c3 = (max(1, int(round(c * config.width))) for c in (32, 64, 128))
        q = config.quant
        self.stem = Conv2d(config.in_channels, c1, 3, 1, 1, "full", rng=rng)
        self.bn1 = BatchNorm2d(c1)
        self.conv2 = Conv2d(c1, c2, 3, 2, 1, "binary", config.binarize, q, rng)
        self.bn2 = BatchNorm2d(c2)
        self.conv3 = Conv2d(c2, c3, 3, 2, 1, "binary", config.binarize, q, rng)
        self.bn3 = BatchNorm2d(c3)
        self.fc = Linear(c3, config.num_classes, rng)

    def forward(self, x):
        out = _relu(self.bn1(self.stem(x)))
        out = _relu(self.bn2(self.conv2(out)))
        out = _relu(self.bn3(self.conv3(out)))
        return self.fc(ad.global_avg_pool(out))


def build_preact_resnet18(config: ModelConfig, seed: int = 0) -> PreActResNet18:
    return PreActResNet18(config, seed)


def build_lenet_binary(config: ModelConfig, seed: int = 0) -> LeNetBinary:
    return LeNetBinary(config, seed)


def build_model(config: ModelConfig, seed: int = 0) -> Network:
    if config.arch == "preact_resnet18":
        return build_preact_resnet18(config, seed)
    return build_lenet_binary(config, seed)


@dataclass(frozen=True)
class MemoryReport:
    fp_bytes: int
    binary_bytes: float
    compression_ratio: float
    binary_weights: int
    full_precision_params: int

    @property
    def fp_mb(self) -> float:
        return self.fp_bytes / 1e6

    @property
    def binary_mb(self) -> float:
        return self.binary_bytes / 1e6


def memory_report(model: Network) -> MemoryReport:
    """Inference footprint at 4 bytes per float and 1 bit per binary weight.

    Binary-tagged weights only count at one bit when the model is actually
    binarized; a full-precision model reports the same size both ways.
    """
    params = model.named_parameters()
    total = sum(p.size for p in params.values())
    binary = 0
    if model.config.binarize:
        binary = sum(params[name].size for name in model.binary_parameter_names())
    fp_rest = total - binary
    fp_bytes = 4 * total
    binary_bytes = binary / 8 + 4 * fp_rest
    return MemoryReport(fp_bytes=fp_bytes, binary_bytes=binary_bytes,
                        compression_ratio=fp_bytes / binary_bytes,
                        binary_weights=binary, full_precision_params=fp_rest)
