"""Where the multiply-accumulates go in ResNet-20, and what the bypasses cost.

Run:  python3 demos/flops_accounting.py
"""

from lapp.flops import layer_bypass_flops, masked_network_flops
from lapp.networks import arch_spec, bypass_plan

arch = arch_spec("resnet20")
print(f"ResNet-20 baseline: {arch.total_flops:,} MACs, {arch.total_params:,} parameters")
print(f"prunable convs: {len(arch.prunable_set)}\n")

# An SBCNet adds a bypass next to every prunable conv. Before any filter is
# removed the network is therefore more expensive than the baseline.
for c_target in (0.6, 0.4, 0.3):
    specs = bypass_plan(arch, c_target, "v2")
    start = masked_network_flops(arch.layers, {}, specs)
    floor = masked_network_flops(arch.layers, {n: 0 for n in arch.prunable_set}, specs)
    print(f"C={c_target}: C_hat at init {start / arch.total_flops:.3f}, "
          f"bypass-only floor {floor / arch.total_flops:.3f}")

print("\nper-layer cost at C=0.4 (sparse path vs bypass):")
specs = bypass_plan(arch, 0.4, "v2")
for layer in arch.prunable:
    spec = specs[layer.name]
    sparse = layer.h_out * layer.w_out * layer.c_out * layer.c_in * layer.k ** 2
    print(f"  {layer.name:<16} sparse {sparse:>10,}  bypass {layer_bypass_flops(layer, spec):>8,}"
          f"  (d={spec.d})")

# Pruning half the filters of every layer halves the sparse paths only.
half = {l.name: l.c_out // 2 for l in arch.prunable}
print(f"\nhalf of every sparse path removed: C_hat="
      f"{masked_network_flops(arch.layers, half, specs) / arch.total_flops:.3f}")
