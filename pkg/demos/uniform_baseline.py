"""The uniform-rate baseline: one pruning rate shared by every layer.

Run:  python3 demos/uniform_baseline.py
"""

from lapp.networks import InfeasibleTarget, arch_spec, bypass_plan, uniform_rate

arch = arch_spec("resnet20")
for c_target in (0.6, 0.5, 0.4, 0.3):
    for kind in ("v2", "v1", None):
        specs = bypass_plan(arch, c_target, kind) if kind else {}
        try:
            plan = uniform_rate(arch, c_target, specs)
        except InfeasibleTarget as err:
            print(f"C={c_target} bypass={kind}: {err}")
            continue
        print(f"C={c_target} bypass={kind}: rate {plan.rate:.4f}, C_hat {plan.c_hat:.4f}")
