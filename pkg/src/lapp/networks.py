"""CIFAR ResNet-20/32/56 and VGG-16 builders, in baseline and SBCNet form."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from . import flops as fl
from .flops import BypassSpec, LayerSpec
from .sbc import CompactSBC, ConvBN, SBCModule, conv_bn, select_bypass_width

RESNET_BLOCKS = {"resnet20": 3, "resnet32": 5, "resnet56": 9}
VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]
ARCH_NAMES = tuple(RESNET_BLOCKS) + ("vgg16_cifar",)


@dataclass
class ArchSpec:
    name: str
    layers: list[LayerSpec]
    class_count: int = 10
    prunable_set: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        self.prunable_set = tuple(l.name for l in self.layers if l.prunable)

    def __getitem__(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def prunable(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.prunable]

    @property
    def total_flops(self) -> int:
        return fl.network_total_flops(self.layers)

    @property
    def total_params(self) -> int:
        return fl.params_count(self.layers)


def _resnet_layers(name: str, class_count: int) -> list[LayerSpec]:
    n_blocks = RESNET_BLOCKS[name]
    layers = [LayerSpec("stem", "conv", 3, 16, 3, 1, 32, 32)]
    c_in, size = 16, 32
    for stage, width in enumerate((16, 32, 64), start=1):
        for b in range(n_blocks):
            stride = 2 if (stage > 1 and b == 0) else 1
            size //= stride
            prefix = f"layer{stage}.{b}"
            layers.append(LayerSpec(f"{prefix}.conv1", "conv", c_in, width, 3, stride, size, size, prunable=True))
            layers.append(LayerSpec(f"{prefix}.conv2", "conv", width, width, 3, 1, size, size, prunable=True))
            if stride != 1 or c_in != width:
                layers.append(LayerSpec(f"{prefix}.shortcut", "pointwise_conv", c_in, width, 1, stride, size, size))
            c_in = width
    layers.append(LayerSpec("fc", "linear", 64, class_count, norm=False, bias=True))
    return layers


def _vgg_layers(class_count: int) -> list[LayerSpec]:
    layers, c_in, size, i = [], 3, 32, 0
    for v in VGG16_CFG:
        if v == "M":
            size //= 2
            continue
        layers.append(LayerSpec(f"features.{i}", "conv", c_in, v, 3, 1, size, size, prunable=True))
        c_in, i = v, i + 1
    layers.append(LayerSpec("fc", "linear", 512, class_count, norm=False, bias=True))
    return layers


def arch_spec(name: str, class_count: int = 10) -> ArchSpec:
    if name in RESNET_BLOCKS:
        return ArchSpec(name, _resnet_layers(name, class_count), class_count)
    if name == "vgg16_cifar":
        return ArchSpec(name, _vgg_layers(class_count), class_count)
    raise ValueError(f"unknown architecture {name!r}; choose from {', '.join(ARCH_NAMES)}")


class BasicBlock(nn.Module):
    def __init__(self, conv1: nn.Module, conv2: nn.Module, shortcut: nn.Module | None):
        super().__init__()
        self.conv1, self.conv2 = conv1, conv2
        self.shortcut = shortcut if shortcut is not None else nn.Identity()

    def forward(self, x):
        return F.relu(self.conv2(self.conv1(x)) + self.shortcut(x))


class PrunableNet(nn.Module):
    """Common surface of every built network: slots are addressable by LayerSpec name."""

    arch: ArchSpec
    bypass_specs: dict[str, BypassSpec]

    def slot(self, name: str) -> nn.Module:
        return self.get_submodule(name)

    def set_slot(self, name: str, module: nn.Module) -> None:
        parent, _, leaf = name.rpartition(".")
        setattr(self.get_submodule(parent) if parent else self, leaf, module)

    def sbc_modules(self) -> dict[str, SBCModule]:
        return {n: m for n, m in self.named_modules() if isinstance(m, SBCModule)}

    def compact_modules(self) -> dict[str, CompactSBC]:
        return {n: m for n, m in self.named_modules() if isinstance(m, CompactSBC)}

    def mask_bundles(self):
        return {n: m.mask_bundle() for n, m in self.sbc_modules().items()}

    def kept_counts(self) -> dict[str, int]:
        """Live filters per prunable slot, whatever state the network is in."""
        counts = {}
        for name in self.arch.prunable_set:
            m = self.slot(name)
            if isinstance(m, SBCModule):
                with torch.no_grad():
                    counts[name] = int(m.mask_bundle().hard_mask.sum())
            elif isinstance(m, CompactSBC):
                counts[name] = len(m.kept)
            else:
                counts[name] = self.arch[name].c_out
        return counts

    def flops(self) -> int:
        return fl.masked_network_flops(self.arch.layers, self.kept_counts(), self.bypass_specs)

    def params(self) -> int:
        return fl.params_count(self.arch.layers, self.kept_counts(), self.bypass_specs)


class CifarResNet(PrunableNet):
    def __init__(self, arch: ArchSpec, slot_factory):
        super().__init__()
        self.arch = arch
        self.bypass_specs = {}
        self.stem = ConvBN(3, 16, 3, 1, relu=True)
        n_blocks = RESNET_BLOCKS[arch.name]
        c_in = 16
        for stage, width in enumerate((16, 32, 64), start=1):
            blocks = []
            for b in range(n_blocks):
                stride = 2 if (stage > 1 and b == 0) else 1
                prefix = f"layer{stage}.{b}"
                conv1 = slot_factory(arch[f"{prefix}.conv1"], relu=True)
                conv2 = slot_factory(arch[f"{prefix}.conv2"], relu=False)
                shortcut = None
                if stride != 1 or c_in != width:
                    shortcut = nn.Sequential(*conv_bn(c_in, width, 1, stride))
                blocks.append(BasicBlock(conv1, conv2, shortcut))
                c_in = width
            setattr(self, f"layer{stage}", nn.Sequential(*blocks))
        self.fc = nn.Linear(64, arch.class_count)

    def forward(self, x):
        x = self.stem(x)
        x = self.layer3(self.layer2(self.layer1(x)))
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class VGG16(PrunableNet):
    def __init__(self, arch: ArchSpec, slot_factory):
        super().__init__()
        self.arch = arch
        self.bypass_specs = {}
        convs = [l for l in arch.layers if l.name.startswith("features.")]
        self.features = _VGGFeatures(convs, slot_factory)
        self.fc = nn.Linear(512, arch.class_count)

    def forward(self, x):
        x = self.features(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


class _VGGFeatures(nn.Module):
    def __init__(self, convs: list[LayerSpec], slot_factory):
        super().__init__()
        for layer in convs:
            self.add_module(layer.name.split(".", 1)[1], slot_factory(layer, relu=True))
        self._pool_after = set()
        i = 0
        for v in VGG16_CFG:
            if v == "M":
                self._pool_after.add(i - 1)
            else:
                i += 1

    def forward(self, x):
        for i, m in enumerate(self.children()):
            x = m(x)
            if i in self._pool_after:
                x = F.max_pool2d(x, 2)
        return x


def _baseline_slot(layer: LayerSpec, relu: bool) -> nn.Module:
    return ConvBN(layer.c_in, layer.c_out, layer.k, layer.stride, relu)


def _build(arch: ArchSpec, slot_factory) -> PrunableNet:
    cls = VGG16 if arch.name == "vgg16_cifar" else CifarResNet
    return cls(arch, slot_factory)


def build_baseline(name: str, seed: int = 0) -> tuple[ArchSpec, PrunableNet]:
    arch = arch_spec(name)
    torch.manual_seed(seed)
    return arch, _build(arch, _baseline_slot)


def bypass_plan(arch: ArchSpec, c_target: float, bypass_kind: str | None = "v2") -> dict[str, BypassSpec]:
    if bypass_kind is None:
        return {}
    if bypass_kind == "v1":
        return {l.name: BypassSpec("v1") for l in arch.prunable}
    return {l.name: BypassSpec(bypass_kind, select_bypass_width(l.c_out, c_target)) for l in arch.prunable}


def build_sbcnet(baseline: ArchSpec | str, c_target: float, bypass_kind: str | None = "v2",
                 seed: int = 0) -> PrunableNet:
    """Replace every prunable conv by an SBC module carrying one learnable threshold."""
    arch = arch_spec(baseline) if isinstance(baseline, str) else baseline
    specs = bypass_plan(arch, c_target, bypass_kind)

    def factory(layer: LayerSpec, relu: bool):
        return SBCModule(layer.c_in, layer.c_out, layer.k, layer.stride, specs.get(layer.name), relu)

    torch.manual_seed(seed)
    net = _build(arch, factory)
    net.bypass_specs = specs
    return net


def trace_convs(net: nn.Module, input_size=(1, 3, 32, 32)) -> list[dict]:
    """Run one forward pass and record every conv/linear actually executed, in order."""
    records = []

    def hook(name):
        def fn(mod, inp, out):
            if isinstance(mod, nn.Conv2d):
                records.append(dict(
                    name=name, c_in=mod.in_channels, c_out=mod.out_channels, k=mod.kernel_size[0],
                    stride=mod.stride[0], groups=mod.groups, h_out=out.shape[2], w_out=out.shape[3]))
            else:
                records.append(dict(name=name, c_in=mod.in_features, c_out=mod.out_features,
                                    k=1, stride=1, groups=1, h_out=1, w_out=1))
        return fn

    handles = [m.register_forward_hook(hook(n)) for n, m in net.named_modules()
               if isinstance(m, (nn.Conv2d, nn.Linear))]
    was_training = net.training
    net.eval()
    try:
        p = next(net.parameters())
        with torch.no_grad():
            net(torch.zeros(input_size, dtype=p.dtype, device=p.device))
    finally:
        for h in handles:
            h.remove()
        net.train(was_training)
    return records


def structural_flops(net: nn.Module, input_size=(1, 3, 32, 32)) -> int:
    """Multiply-accumulates of the convs/linears that a forward pass actually runs.

    Independent of the LayerSpec bookkeeping: reads shapes off the live modules.
    Masked SBC modules still run their full sparse conv, so only compact
    networks give the deployable count.
    """
    total = 0
    for r in trace_convs(net, input_size):
        total += r["h_out"] * r["w_out"] * r["c_out"] * (r["c_in"] // r["groups"]) * r["k"] * r["k"]
    return total


def structural_params(net: nn.Module) -> int:
    return sum(p.numel() for n, p in net.named_parameters() if not n.endswith("threshold"))


class InfeasibleTarget(ValueError):
    pass


@dataclass
class UniformPlan:
    rate: float
    kept_counts: dict[str, int]
    flops: int
    c_hat: float


def uniform_kept_counts(arch: ArchSpec, rate: float) -> dict[str, int]:
    return {l.name: max(1, math.ceil((1.0 - rate) * l.c_out - 1e-9)) for l in arch.prunable}


def uniform_rate(arch: ArchSpec, c_target: float, bypass_specs: dict[str, BypassSpec] | None = None,
                 iters: int = 60) -> UniformPlan:
    """Smallest shared pruning rate whose network FLOPs fit in ``c_target * T_total`` (bisection)."""
    t_total = arch.total_flops
    budget = c_target * t_total

    def cost(p):
        return fl.masked_network_flops(arch.layers, uniform_kept_counts(arch, p), bypass_specs)

    if cost(1.0) > budget:
        raise InfeasibleTarget(
            f"target C={c_target} unattainable with uniform rates (best C_hat={cost(1.0) / t_total:.4f})")
    if cost(0.0) <= budget:
        lo = hi = 0.0
    else:
        lo, hi = 0.0, 1.0
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if cost(mid) <= budget:
                hi = mid
            else:
                lo = mid
    counts = uniform_kept_counts(arch, hi)
    t = cost(hi)
    return UniformPlan(hi, counts, t, t / t_total)


def uniform_prune_init(baseline: ArchSpec | str, c_target: float, bypass_kind: str | None = "v2",
                       seed: int = 0) -> tuple[PrunableNet, UniformPlan]:
    """Uniform-rate pruning at initialization (the LAPP-UP ablation).

    Every sparse path keeps its top filters by l1 norm at initialization;
    the returned network is already compact and has no thresholds.
    """
    from .surgery import convert

    arch = arch_spec(baseline) if isinstance(baseline, str) else baseline
    net = build_sbcnet(arch, c_target, bypass_kind, seed)
    plan = uniform_rate(arch, c_target, net.bypass_specs)
    masks = {}
    for name, m in net.sbc_modules().items():
        imp = m.conv.weight.detach().abs().flatten(1).sum(1)
        keep = torch.topk(imp, plan.kept_counts[name]).indices
        mask = torch.zeros_like(imp)
        mask[keep] = 1.0
        masks[name] = mask
    return convert(net, masks), plan
