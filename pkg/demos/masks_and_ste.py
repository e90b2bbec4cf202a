"""Thresholded masks and the gradient a threshold receives through the hard mask.

Run:  python3 demos/masks_and_ste.py
"""

import torch

from lapp.masking import importance_l1, threshold_mask

torch.manual_seed(0)
w = torch.randn(8, 4, 3, 3, dtype=torch.float64)
imp = importance_l1(w)
delta = torch.tensor(float(imp.median()), dtype=torch.float64, requires_grad=True)

bundle = threshold_mask(w, delta)
print("importance ", [f"{v:.2f}" for v in imp.tolist()])
print(f"threshold   {delta.item():.2f}")
print("soft mask  ", [f"{v:.2f}" for v in bundle.soft_mask.tolist()])
print("hard mask  ", bundle.hard_mask.int().tolist(), f"-> {int(bundle.kept_count)} kept")

# The forward pass sees 0/1; the backward pass treats rounding as the identity,
# so d(loss)/d(threshold) = -sum_i u_i * G_i * (1 - G_i) with u = d(loss)/d(mask).
u = torch.randn(8, dtype=torch.float64)
(bundle.hard_mask * u).sum().backward()
G = bundle.soft_mask.detach()
print(f"\nautograd gradient  {delta.grad.item():+.6f}")
print(f"closed form        {-(u * G * (1 - G)).sum().item():+.6f}")

# Raising the threshold past a filter's importance removes it.
for d in (imp.min().item() - 1e-3, imp.median().item(), imp.max().item() + 1e-3):
    kept = int(threshold_mask(w, torch.tensor(d, dtype=torch.float64)).kept_count)
    print(f"threshold {d:6.2f}: {kept} of 8 filters kept")
