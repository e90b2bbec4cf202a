"""Sparse module with bypass compensation (SBC) and its compact, post-surgery form."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .flops import BypassSpec
from .masking import MaskBundle, apply_mask, threshold_mask

SMALL_TARGET = 0.25  # below this target rate bypasses are built at half width


def select_bypass_width(c_out: int, c_target: float) -> int:
    if c_out < 1 or not 0 < c_target <= 1:
        raise ValueError(f"need c_out >= 1 and 0 < c_target <= 1, got {c_out}, {c_target}")
    if c_target < SMALL_TARGET:
        return max(1, math.ceil(0.5 * c_out))
    return c_out


def init_conv(conv: nn.Conv2d) -> None:
    nn.init.kaiming_normal_(conv.weight, mode="fan_in", nonlinearity="relu")


def conv_bn(c_in, c_out, k, stride=1, groups=1) -> list[nn.Module]:
    conv = nn.Conv2d(c_in, c_out, k, stride, padding=k // 2, groups=groups, bias=False)
    init_conv(conv)
    return [conv, nn.BatchNorm2d(c_out)]


def make_bypass(c_in: int, c_out: int, k: int, stride: int, spec: BypassSpec | None) -> nn.Sequential | None:
    if spec is None:
        return None
    if spec.kind == "v1":
        return nn.Sequential(
            *conv_bn(c_in, c_in, k, stride, groups=c_in), nn.ReLU(inplace=True),
            *conv_bn(c_in, c_out, 1),
        )
    d = spec.d
    return nn.Sequential(
        *conv_bn(c_in, d, 1), nn.ReLU(inplace=True),
        *conv_bn(d, d, k, stride, groups=d), nn.ReLU(inplace=True),
        *conv_bn(d, c_out, 1),
    )


class ConvBN(nn.Module):
    """Plain conv -> BN (-> ReLU) slot used by baseline networks."""

    def __init__(self, c_in, c_out, k=3, stride=1, relu=True):
        super().__init__()
        self.conv, self.bn = conv_bn(c_in, c_out, k, stride)
        self.relu = relu

    def forward(self, x):
        y = self.bn(self.conv(x))
        return F.relu(y) if self.relu else y


class SBCModule(nn.Module):
    """Prunable conv path plus a lightweight bypass; output is ``act(M * bn(conv(x)) + bypass(x))``.

    The mask is applied after the sparse path's BN so a pruned channel is
    exactly zero and surgery preserves the output.
    """

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1,
                 bypass: BypassSpec | None = None, relu: bool = True):
        super().__init__()
        if bypass is not None and bypass.kind == "v2" and not 1 <= bypass.d <= c_out:
            raise ValueError(f"bypass width d={bypass.d} outside [1, {c_out}]")
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.bypass_spec = bypass
        self.relu = relu
        self.conv, self.bn = conv_bn(c_in, c_out, k, stride)
        self.bypass = make_bypass(c_in, c_out, k, stride, bypass)
        self.threshold = nn.Parameter(torch.zeros(()))
        self.bundle: MaskBundle | None = None

    def mask_bundle(self) -> MaskBundle:
        return threshold_mask(self.conv.weight, self.threshold)

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {x.shape[1]}")
        if mask is None:
            self.bundle = self.mask_bundle()
            mask = self.bundle.hard_mask
        y = apply_mask(self.bn(self.conv(x)), mask)
        if self.bypass is not None:
            y = y + self.bypass(x)
        return F.relu(y) if self.relu else y


def make_sbc(c_in: int, c_out: int, k: int = 3, stride: int = 1,
             bypass_kind: str | None = "v2", d: int | None = None, relu: bool = True) -> SBCModule:
    if bypass_kind is None:
        spec = None
    elif bypass_kind == "v1":
        spec = BypassSpec("v1")
    else:
        spec = BypassSpec(bypass_kind, c_out if d is None else d)
    return SBCModule(c_in, c_out, k, stride, spec, relu)


def sbc_forward(module: SBCModule, x: Tensor, mask: Tensor) -> Tensor:
    return module(x, mask=mask)


class CompactSBC(nn.Module):
    """SBC module after surgery: narrow sparse conv scattered into the full-width bypass output."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int, kept: list[int],
                 bypass: nn.Sequential | None, bypass_spec: BypassSpec | None, relu: bool):
        super().__init__()
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.bypass_spec = bypass_spec
        self.relu = relu
        self.register_buffer("kept_indices", torch.tensor(kept, dtype=torch.long))
        if kept:
            self.conv, self.bn = conv_bn(c_in, len(kept), k, stride)
        else:
            self.conv = self.bn = None
        self.bypass = bypass

    @property
    def kept(self) -> list[int]:
        return self.kept_indices.tolist()

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {x.shape[1]}")
        if self.bypass is not None:
            y = self.bypass(x)
        else:
            h = (x.shape[2] - 1) // self.stride + 1
            w = (x.shape[3] - 1) // self.stride + 1
            y = x.new_zeros(x.shape[0], self.c_out, h, w)
        if self.conv is not None:
            y = y.index_add(1, self.kept_indices, self.bn(self.conv(x)))
        return F.relu(y) if self.relu else y


def compact_forward(module: CompactSBC, x: Tensor) -> Tensor:
    return module(x)
