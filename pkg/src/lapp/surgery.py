"""Turn a masked SBCNet into a compact network by physically removing pruned filters."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .masking import kept_indices
from .sbc import CompactSBC, SBCModule

__all__ = [
    "kept_indices", "compact_sparse_path", "convert", "equivalence_check",
    "carry_momentum", "surgery_manifest", "scatter_kept_weights",
]

SPARSE_PARAMS = ("conv.weight", "bn.weight", "bn.bias")
SPARSE_BUFFERS = ("bn.running_mean", "bn.running_var")


def compact_sparse_path(module: SBCModule, mask) -> CompactSBC:
    """Gather the kept filters (and their BN channels) of one SBC module.

    The bypass is deep-copied unchanged. An empty mask removes the sparse
    path altogether.
    """
    mask = torch.as_tensor(mask).detach()
    if mask.numel() != module.c_out:
        raise ValueError(f"mask of length {mask.numel()} for {module.c_out} filters")
    kept = kept_indices(mask)
    bypass = copy.deepcopy(module.bypass)
    out = CompactSBC(module.c_in, module.c_out, module.k, module.stride, kept,
                     bypass, module.bypass_spec, module.relu)
    p = next(module.parameters())
    out.to(dtype=p.dtype, device=p.device)
    if kept:
        idx = out.kept_indices
        with torch.no_grad():
            out.conv.weight.copy_(module.conv.weight[idx])
            out.bn.weight.copy_(module.bn.weight[idx])
            out.bn.bias.copy_(module.bn.bias[idx])
            out.bn.running_mean.copy_(module.bn.running_mean[idx])
            out.bn.running_var.copy_(module.bn.running_var[idx])
            out.bn.num_batches_tracked.copy_(module.bn.num_batches_tracked)
        out.bn.momentum, out.bn.eps = module.bn.momentum, module.bn.eps
    out.train(module.training)
    return out


def convert(sbcnet: nn.Module, masks: dict[str, Tensor] | None = None) -> nn.Module:
    """Return a compact copy of ``sbcnet``; ``masks`` default to the current threshold masks."""
    # cached mask bundles hold autograd graph nodes, which cannot be deep-copied
    stashed = {n: m.bundle for n, m in sbcnet.sbc_modules().items()}
    for m in sbcnet.sbc_modules().values():
        m.bundle = None
    try:
        net = copy.deepcopy(sbcnet)
    finally:
        for n, m in sbcnet.sbc_modules().items():
            m.bundle = stashed[n]
    for name, module in list(net.sbc_modules().items()):
        if masks is not None and name in masks:
            mask = masks[name]
        else:
            with torch.no_grad():
                mask = module.mask_bundle().hard_mask
        net.set_slot(name, compact_sparse_path(module, mask))
    return net


def scatter_kept_weights(module: CompactSBC) -> Tensor:
    """Full ``c_out``-row sparse weight tensor with zeros in the pruned rows."""
    w = torch.zeros(module.c_out, module.c_in, module.k, module.k)
    if module.conv is not None:
        w = w.to(module.conv.weight)
        w[module.kept_indices] = module.conv.weight.detach()
    return w


def carry_momentum(old_net: nn.Module, old_opt: torch.optim.Optimizer,
                   new_net: nn.Module, new_opt: torch.optim.Optimizer) -> None:
    """Copy SGD momentum buffers across surgery, gathering rows of the pruned tensors."""
    old_params = dict(old_net.named_parameters())
    compact = {n: m for n, m in new_net.named_modules() if isinstance(m, CompactSBC)}
    for name, p in new_net.named_parameters():
        old = old_params.get(name)
        if old is None or old not in old_opt.state:
            continue
        buf = old_opt.state[old].get("momentum_buffer")
        if buf is None:
            continue
        owner, _, leaf = name.rpartition(".")
        slot, _, sub = owner.rpartition(".")
        if slot in compact and f"{sub}.{leaf}" in SPARSE_PARAMS:
            buf = buf[compact[slot].kept_indices]
        new_opt.state[p]["momentum_buffer"] = buf.clone()


@dataclass
class ModuleReport:
    name: str
    c_out: int
    kept: int
    rate: float
    d: int | None
    kept_indices: list[int]

    def as_dict(self):
        return dict(name=self.name, c_out=self.c_out, kept=self.kept, rate=self.rate,
                    d=self.d, kept_indices=self.kept_indices)


def surgery_manifest(compact_net: nn.Module) -> list[dict]:
    rows = []
    for name in compact_net.arch.prunable_set:
        m = compact_net.slot(name)
        kept = m.kept if isinstance(m, CompactSBC) else list(range(compact_net.arch[name].c_out))
        spec = getattr(m, "bypass_spec", None)
        d = None if spec is None else (spec.d if spec.kind == "v2" else m.c_in)
        c = compact_net.arch[name].c_out
        rows.append(ModuleReport(name, c, len(kept), 1.0 - len(kept) / c, d, kept).as_dict())
    return rows


def equivalence_check(masked_net: nn.Module, compact_net: nn.Module, sample_count: int = 64,
                      seed: int = 0, batch_size: int = 32, input_size=(3, 32, 32)) -> float:
    """Largest |masked - compact| logit gap over random inputs, both nets in eval mode."""
    p = next(compact_net.parameters())
    g = torch.Generator().manual_seed(seed)
    x_all = torch.randn((sample_count, *input_size), generator=g).to(p)
    states = masked_net.training, compact_net.training
    masked_net.eval()
    compact_net.eval()
    worst = 0.0
    try:
        with torch.no_grad():
            for x in x_all.split(batch_size):
                worst = max(worst, float((masked_net(x) - compact_net(x)).abs().max()))
    finally:
        masked_net.train(states[0])
        compact_net.train(states[1])
    return worst
