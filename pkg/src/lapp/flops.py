"""FLOPs and parameter accounting for baseline networks, SBCNets and masked SBCNets.

One FLOP is one multiply-accumulate. Bias, normalization, activation, pooling
and elementwise ops are not counted.

Every counting function accepts plain integers (and then returns exact
integers) or torch scalars for the kept counts, in which case the returned
FLOPs stay attached to the autograd graph. That is how the FLOPs regularizer
reaches the learnable thresholds through the straight-through masks.
"""

from __future__ import annotations

import json
import numbers
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

LAYER_KINDS = ("conv", "depthwise_conv", "pointwise_conv", "linear")
BYPASS_KINDS = ("v2", "v1")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    c_in: int
    c_out: int
    k: int = 1
    stride: int = 1
    h_out: int = 1
    w_out: int = 1
    prunable: bool = False
    norm: bool = True  # followed by a per-channel normalization layer
    bias: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"{self.name}: unknown layer kind {self.kind!r}")
        for attr in ("c_in", "c_out", "k", "stride", "h_out", "w_out"):
            v = getattr(self, attr)
            if not isinstance(v, numbers.Integral) or v < 1:
                raise ValueError(f"{self.name}: {attr} must be a positive integer, got {v!r}")
        if self.kind == "depthwise_conv" and self.c_in != self.c_out:
            raise ValueError(f"{self.name}: depthwise conv needs c_in == c_out")
        if self.kind == "pointwise_conv" and self.k != 1:
            raise ValueError(f"{self.name}: pointwise conv needs k == 1")

    @property
    def h_in(self) -> int:
        return self.h_out * self.stride

    @property
    def w_in(self) -> int:
        return self.w_out * self.stride


@dataclass(frozen=True)
class BypassSpec:
    """Width and flavour of the bypass attached to one prunable layer."""

    kind: str = "v2"
    d: int | None = None

    def __post_init__(self):
        if self.kind not in BYPASS_KINDS:
            raise ValueError(f"unknown bypass kind {self.kind!r}")
        if self.kind == "v2" and (self.d is None or self.d < 1):
            raise ValueError("v2 bypass needs a width d >= 1")


@dataclass
class FlopsAccount:
    t_total: int
    t_kept: float
    c_target: float
    c_hat: float = field(init=False)

    def __post_init__(self):
        self.c_hat = compression_rate(self.t_kept, self.t_total)


def _check_count(value, upper: int, what: str):
    v = float(value.detach()) if hasattr(value, "detach") else float(value)
    if not 0 <= v <= upper:
        raise ValueError(f"{what}={v:g} outside [0, {upper}]")


def conv_flops(layer: LayerSpec, active_out=None, active_in=None):
    """Multiply-accumulates of ``layer`` with the given numbers of live channels."""
    active_out = layer.c_out if active_out is None else active_out
    active_in = layer.c_in if active_in is None else active_in
    _check_count(active_out, layer.c_out, f"{layer.name}: active_out")
    _check_count(active_in, layer.c_in, f"{layer.name}: active_in")
    plane = layer.h_out * layer.w_out
    if layer.kind == "depthwise_conv":
        return plane * active_out * layer.k * layer.k
    return plane * active_in * active_out * layer.k * layer.k


def bypass_flops(c_in: int, c_out: int, d: int, k: int, h_out: int, w_out: int, stride: int = 1) -> int:
    """FLOPs of the 1x1 -> depthwise kxk -> 1x1 bypass.

    The first 1x1 runs at input resolution, the stride sits in the depthwise
    conv. With stride 1 and c_in == c_out == c this is ``h*w*(2*c*d + d*k*k)``.
    """
    for name, v in (("c_in", c_in), ("c_out", c_out), ("d", d), ("k", k),
                    ("h_out", h_out), ("w_out", w_out), ("stride", stride)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    h_in, w_in = h_out * stride, w_out * stride
    return h_in * w_in * c_in * d + h_out * w_out * (d * k * k + d * c_out)


def bypass_v1_flops(c_in: int, c_out: int, k: int, h_out: int, w_out: int, stride: int = 1) -> int:
    """FLOPs of the depthwise kxk -> 1x1 bypass (ablation variant)."""
    for name, v in (("c_in", c_in), ("c_out", c_out), ("k", k),
                    ("h_out", h_out), ("w_out", w_out), ("stride", stride)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    return h_out * w_out * (c_in * k * k + c_in * c_out)


def layer_bypass_flops(layer: LayerSpec, spec: BypassSpec | None) -> int:
    if spec is None:
        return 0
    if spec.kind == "v1":
        return bypass_v1_flops(layer.c_in, layer.c_out, layer.k, layer.h_out, layer.w_out, layer.stride)
    return bypass_flops(layer.c_in, layer.c_out, spec.d, layer.k, layer.h_out, layer.w_out, layer.stride)


def network_total_flops(arch: Sequence[LayerSpec]) -> int:
    """Baseline FLOPs: every layer at full width, no bypasses."""
    arch = list(arch)
    if not arch:
        raise ValueError("empty architecture")
    return sum(conv_flops(layer) for layer in arch)


def masked_network_flops(arch: Sequence[LayerSpec],
                         kept_counts: Mapping[str, object] | None = None,
                         bypass_specs: Mapping[str, BypassSpec] | None = None):
    """FLOPs of a (masked) SBCNet.

    Prunable layers contribute their sparse path with ``n`` live filters at full
    input width plus their bypass. Layers missing from ``kept_counts`` count at
    full width; layers missing from ``bypass_specs`` have no bypass.
    """
    kept_counts = kept_counts or {}
    bypass_specs = bypass_specs or {}
    unknown = set(kept_counts) - {l.name for l in arch if l.prunable}
    if unknown:
        raise ValueError(f"kept counts given for non-prunable or unknown layers: {sorted(unknown)}")
    total = 0
    for layer in arch:
        if layer.prunable:
            total = total + conv_flops(layer, kept_counts.get(layer.name, layer.c_out))
            total = total + layer_bypass_flops(layer, bypass_specs.get(layer.name))
        else:
            total = total + conv_flops(layer)
    return total


def compression_rate(t_kept, t_total):
    if t_total <= 0:
        raise ValueError("t_total must be positive")
    return t_kept / t_total


def flops_regularizer(c_hat, c_target):
    """(c_hat / c_target - 1) ** 2; works on floats and torch tensors alike."""
    if not c_target > 0:
        raise ValueError(f"c_target must be positive, got {c_target}")
    return (c_hat / c_target - 1) ** 2


def flops_regularizer_grad(c_hat: float, c_target: float) -> float:
    return 2.0 * (c_hat / c_target - 1.0) / c_target


def _norm_params(layer: LayerSpec, channels) -> int:
    return 2 * channels if layer.norm else 0


def layer_params(layer: LayerSpec, active_out=None):
    n = layer.c_out if active_out is None else active_out
    _check_count(n, layer.c_out, f"{layer.name}: active_out")
    if layer.kind == "depthwise_conv":
        w = n * layer.k * layer.k
    else:
        w = n * layer.c_in * layer.k * layer.k
    return w + _norm_params(layer, n) + (n if layer.bias else 0)


def bypass_params(layer: LayerSpec, spec: BypassSpec | None) -> int:
    if spec is None:
        return 0
    c_in, c_out, k = layer.c_in, layer.c_out, layer.k
    if spec.kind == "v1":
        return (c_in * k * k + 2 * c_in) + (c_in * c_out + 2 * c_out)
    d = spec.d
    return (c_in * d + 2 * d) + (d * k * k + 2 * d) + (d * c_out + 2 * c_out)


def params_count(arch: Sequence[LayerSpec],
                 kept_counts: Mapping[str, int] | None = None,
                 bypass_specs: Mapping[str, BypassSpec] | None = None) -> int:
    """Weights plus normalization scale/shift pairs; pruned filters drop their norm channels too."""
    kept_counts = kept_counts or {}
    bypass_specs = bypass_specs or {}
    total = 0
    for layer in arch:
        if layer.prunable:
            total += layer_params(layer, kept_counts.get(layer.name, layer.c_out))
            total += bypass_params(layer, bypass_specs.get(layer.name))
        else:
            total += layer_params(layer)
    return total


def save_arch_document(layers: Iterable[LayerSpec], path) -> None:
    """One JSON record per line, one line per layer."""
    text = "".join(json.dumps(asdict(layer)) + "\n" for layer in layers)
    Path(path).write_text(text)


def load_arch_document(path) -> list[LayerSpec]:
    layers = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            layers.append(LayerSpec(**json.loads(line)))
        except (TypeError, json.JSONDecodeError) as err:
            raise ValueError(f"{path}:{lineno}: bad layer record ({err})") from err
    return layers
