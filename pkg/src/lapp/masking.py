"""Filter importance, learnable-threshold masks and the straight-through estimator."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass
class MaskBundle:
    importance: Tensor
    threshold: Tensor
    soft_mask: Tensor
    hard_mask: Tensor

    @property
    def kept_count(self) -> Tensor:
        # stays on the graph: d(kept_count)/d(threshold) goes through the STE
        return self.hard_mask.sum()

    @property
    def pruning_rate(self) -> float:
        c = self.hard_mask.numel()
        return 1.0 - float(self.hard_mask.detach().sum()) / c


def importance_l1(sparse_weights: Tensor) -> Tensor:
    """Per-filter l1 norm of a ``c_out x c_in x k x k`` weight tensor."""
    if not torch.isfinite(sparse_weights).all():
        raise ValueError("non-finite sparse-path weights")
    return sparse_weights.abs().flatten(1).sum(1)


def soft_mask(importance: Tensor, threshold: Tensor) -> Tensor:
    """sigmoid(importance - threshold), with ``importance`` cut off the graph.

    Gradients of the soft mask only ever reach the threshold. For tiny
    negative gaps the sigmoid rounds up to exactly 0.5; those entries are
    nudged one ulp down (value only) so that ``soft >= 0.5`` holds exactly
    when ``importance >= threshold``.
    """
    gap = importance.detach() - threshold
    g = torch.sigmoid(gap)
    with torch.no_grad():
        half = torch.full_like(g, 0.5)
        fix = torch.where((gap < 0) & (g >= 0.5), torch.nextafter(half, torch.zeros_like(g)) - g,
                          torch.zeros_like(g))
    return g + fix


class _RoundSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, soft, decision):
        return decision.to(soft.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def binarize_ste(soft: Tensor, decision: Tensor | None = None) -> Tensor:
    """Indicator ``soft >= 0.5`` forward, identity backward.

    ``decision`` overrides the forward comparison with a precomputed boolean
    vector (used to decide on ``importance >= threshold`` directly, which is
    immune to the sigmoid saturating at exactly 0.5 near the boundary).
    """
    if decision is None:
        decision = soft >= 0.5
    return _RoundSTE.apply(soft, decision)


def threshold_mask(sparse_weights: Tensor, threshold: Tensor) -> MaskBundle:
    importance = importance_l1(sparse_weights.detach())
    soft = soft_mask(importance, threshold)
    hard = binarize_ste(soft, importance >= threshold.detach())
    return MaskBundle(importance, threshold, soft, hard)


def apply_mask(path_output: Tensor, hard_mask: Tensor) -> Tensor:
    """Zero whole channels of a ``(N,) C x H x W`` feature map."""
    channel_dim = path_output.dim() - 3
    if channel_dim not in (0, 1):
        raise ValueError(f"expected a 3-D or 4-D feature map, got shape {tuple(path_output.shape)}")
    c = path_output.shape[channel_dim]
    if hard_mask.dim() != 1 or hard_mask.numel() != c:
        raise ValueError(f"mask of length {hard_mask.numel()} for {c} channels")
    return path_output * hard_mask.view(-1, 1, 1)


def kept_indices(hard_mask) -> list[int]:
    """Zero-based ascending positions of the ones in a binary mask."""
    m = torch.as_tensor(hard_mask).detach().flatten()
    return torch.nonzero(m > 0.5).flatten().tolist()
