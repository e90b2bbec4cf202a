"""A complete prune -> surgery -> train cycle on random images, in about half a minute.

The data is noise, so the accuracy means nothing; the point is to watch C_hat
start above 1, fall under the target, and the network get rebuilt. With this
much pressure and no signal to protect them, most sparse paths empty out and
the bypasses carry the network.

Run:  python3 demos/tiny_prune_run.py
"""

from lapp.controller import run
from lapp.harness import RunConfig, synthetic_cifar

config = RunConfig(arch_name="resnet20", c_target=0.4, lambda1=3e-2, lambda2=1000.0,
                   total_epochs=2, prune_epoch_cap=1, batch_size=16,
                   train_subset=1024, test_subset=128)
train, test = synthetic_cifar(1024, 128, seed=0)
result = run(config, train, test)

traj = result.state.c_hat_trajectory
print(f"C_hat at iteration 0: {traj[0][1]:.3f}")
print(f"surgery at epoch {result.state.surgery_epoch}, iteration {result.state.surgery_iteration}")
print(f"final C_hat: {result.report['c_hat_final']:.4f} (target {config.c_target})")
for row in result.report["per_layer"]:
    print(f"  {row['name']:<16} kept {row['kept']:>2}/{row['c_out']}")
