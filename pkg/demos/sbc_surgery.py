"""Mask a ResNet-20 SBCNet at random, cut the masked filters out, and compare.

Run:  python3 demos/sbc_surgery.py
"""

import torch
from torch import nn

from lapp.networks import build_sbcnet, structural_flops
from lapp.surgery import convert, equivalence_check, surgery_manifest

net = build_sbcnet("resnet20", 0.4, seed=0)
g = torch.Generator().manual_seed(1)
with torch.no_grad():
    for m in net.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.running_mean.normal_(0, 0.1, generator=g)
            m.running_var.uniform_(0.5, 1.5, generator=g)
    # threshold each module at a random quantile of its filter importances
    for m in net.sbc_modules().values():
        imp = m.conv.weight.abs().flatten(1).sum(1)
        m.threshold.fill_(float(torch.quantile(imp, torch.rand((), generator=g).item())))
net.eval()

compact = convert(net)
print(f"{'layer':<18}{'c':>5}{'kept':>6}")
for row in surgery_manifest(compact):
    print(f"{row['name']:<18}{row['c_out']:>5}{row['kept']:>6}")

print(f"\nmasked FLOPs (analytic)      {net.flops():,}")
print(f"compact FLOPs (traced convs) {structural_flops(compact):,}")
print(f"max |logit difference| over 64 inputs: {equivalence_check(net, compact, 64):.2e}")
