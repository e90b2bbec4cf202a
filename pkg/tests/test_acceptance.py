"""Acceptance suite: one group of tests per gated criterion.

Each test carries a ``criterion`` mark; the summary hook in conftest.py prints
one PASS/FAIL line per criterion at the end of the session.

The two training-scale criteria read a finished desk-profile run directory from
``$LAPP_DESK_RUN`` (default ``runs/desk_resnet20_c0.4`` under the repository
root). Produce it with::

    lapp prune --arch resnet20 --target-c 0.4 --profile desk \\
        --data-dir $LAPP_DATA_DIR --out-dir runs/desk_resnet20_c0.4

The optional paper-profile check reads ``$LAPP_PAPER_RUN`` and is skipped when
that variable is unset.
"""

import csv
import json
import os
import random
import statistics
import time
from fractions import Fraction
from pathlib import Path

import pytest
import torch

from lapp import flops as fl
from lapp.cli import main
from lapp.controller import rebuild_network
from lapp.harness import RunConfig, synthetic_cifar, write_cifar10_binary
from lapp.masking import binarize_ste, importance_l1, soft_mask
from lapp.networks import arch_spec, build_sbcnet, structural_flops
from lapp.sbc import make_sbc, sbc_forward
from lapp.surgery import convert, equivalence_check

from oracles import brute_network, central_difference, random_toy_arch, randomize_masked_net

ROOT = Path(__file__).resolve().parents[1]
DESK_RUN = Path(os.environ.get("LAPP_DESK_RUN", ROOT / "runs" / "desk_resnet20_c0.4"))
PAPER_RUN = os.environ.get("LAPP_PAPER_RUN")

FLOPS_ORACLE = "FLOPs oracle equivalence"
REGULARIZER = "Regularizer values"
MASK_SEMANTICS = "Mask semantics"
GRADIENTS = "STE/severing gradient suite"
SURGERY = "Surgery equivalence"
ATTAINMENT = "Target attainment at desk scale"
ACCURACY = "Desk-scale accuracy floor"
TRAJECTORY = "C_hat trajectory shape"
ABLATIONS = "Ablation hooks run"


# -- FLOPs accounting ------------------------------------------------------------------------------

@pytest.mark.criterion(FLOPS_ORACLE)
def test_flops_match_brute_force_on_random_toys():
    rng = random.Random(2024)
    t0 = time.perf_counter()
    n_archs = 200
    for _ in range(n_archs):
        layers, masks, bypasses = random_toy_arch(rng)
        counts = {name: sum(bits) for name, bits in masks.items()}
        got = fl.masked_network_flops(layers, counts, bypasses)
        assert isinstance(got, int)
        assert got == brute_network(layers, masks, bypasses)
        assert fl.network_total_flops(layers) == brute_network(layers)
    assert time.perf_counter() - t0 < 10.0


@pytest.mark.criterion(REGULARIZER)
def test_regularizer_reference_values():
    for c in (0.05, 0.1, 0.25, 0.4, 0.5, 0.75, 0.9):
        assert fl.flops_regularizer(c, c) == 0.0
        assert fl.flops_regularizer(2 * c, c) == 1.0
    assert fl.flops_regularizer(Fraction(6, 10), Fraction(4, 10)) == Fraction(1, 4)


@pytest.mark.criterion(REGULARIZER)
def test_regularizer_quarter_with_binary_floats():
    # 0.6 and 0.4 are not binary fractions; the float answer sits within a few ulp of 1/4
    got = fl.flops_regularizer(0.6, 0.4)
    assert abs(got - 0.25) <= 4 * 2 ** -52 * 0.25, got


@pytest.mark.criterion(REGULARIZER)
def test_regularizer_derivative_matches_central_differences():
    rng = random.Random(7)
    checked = 0
    while checked < 500:
        c = rng.uniform(0.05, 0.95)
        c_hat = rng.uniform(0.02, 2.0)
        if abs(c_hat - c) < 0.05 * c:  # derivative near zero, relative error meaningless
            continue
        h = 1e-6 * c_hat
        num = (fl.flops_regularizer(c_hat + h, c) - fl.flops_regularizer(c_hat - h, c)) / (2 * h)
        closed = fl.flops_regularizer_grad(c_hat, c)
        t = torch.tensor(c_hat, dtype=torch.float64, requires_grad=True)
        fl.flops_regularizer(t, c).backward()
        assert abs(closed - num) <= 1e-6 * abs(num)
        assert abs(t.grad.item() - num) <= 1e-6 * abs(num)
        checked += 1


# -- masks and gradients ---------------------------------------------------------------------------

@pytest.mark.criterion(MASK_SEMANTICS)
@pytest.mark.parametrize("dtype", [torch.float64, torch.float32])
def test_hard_mask_agrees_with_direct_rule(dtype):
    g = torch.Generator().manual_seed(11)
    n = 10_000
    imp = torch.rand(n, generator=g, dtype=torch.float64) * 20
    delta = torch.empty(n, dtype=torch.float64)
    kind = torch.randint(0, 4, (n,), generator=g)
    wide = torch.randn(n, generator=g, dtype=torch.float64) * 10
    near = imp + torch.randn(n, generator=g, dtype=torch.float64) * 1e-6
    ulp = torch.nextafter(imp, imp + torch.where(torch.rand(n, generator=g) < 0.5, -1.0, 1.0).double())
    delta[kind == 0] = wide[kind == 0]
    delta[kind == 1] = near[kind == 1]
    delta[kind == 2] = ulp[kind == 2]
    delta[kind == 3] = imp[kind == 3]
    imp, delta = imp.to(dtype), delta.to(dtype)
    hard = binarize_ste(soft_mask(imp, delta))
    assert torch.equal(hard.bool(), imp >= delta)


@pytest.mark.criterion(MASK_SEMANTICS)
def test_equality_is_kept():
    for v in (0.0, 1e-30, 0.5, 3.0, 1234.5):
        for dtype in (torch.float32, torch.float64):
            t = torch.tensor([v], dtype=dtype)
            assert binarize_ste(soft_mask(t, t[0])).tolist() == [1.0]


def double_sbc(kind, c_in=3, c_out=6, d=None, stride=1, seed=0):
    torch.manual_seed(seed)
    m = make_sbc(c_in, c_out, 3, stride, kind, d).double().eval()
    with torch.no_grad():
        for bn in (mod for mod in m.modules() if isinstance(mod, torch.nn.BatchNorm2d)):
            bn.running_mean.normal_(0, 0.1)
            bn.running_var.uniform_(0.5, 1.5)
            bn.weight.uniform_(0.5, 1.5)
            bn.bias.normal_(0, 0.1)
        imp = importance_l1(m.conv.weight)
        m.threshold.fill_(float(imp.median()) - 1e-3)
    return m


@pytest.mark.criterion(GRADIENTS)
@pytest.mark.parametrize("kind", ["v2", "v1"])
def test_threshold_gradient_closed_form(kind):
    t0 = time.perf_counter()
    for seed in range(10):
        m = double_sbc(kind, seed=seed)
        x = torch.randn(4, 3, 6, 6, dtype=torch.float64)
        proj = torch.randn(4, 6, 6, 6, dtype=torch.float64)
        m.zero_grad()
        (m(x) * proj).sum().backward()
        # u_i: sensitivity of the loss to mask coordinate i at the current mask
        mask = m.bundle.hard_mask.detach().clone().requires_grad_()
        (sbc_forward(m, x, mask) * proj).sum().backward()
        G = torch.sigmoid(importance_l1(m.conv.weight).detach() - m.threshold.detach())
        closed = -(mask.grad * G * (1 - G)).sum().item()
        assert abs(m.threshold.grad.item() - closed) <= 1e-6 * abs(closed)
    assert time.perf_counter() - t0 < 60.0


@pytest.mark.criterion(GRADIENTS)
@pytest.mark.parametrize("kind", ["v2", "v1"])
def test_frozen_mask_leaves_sparse_gradient_unchanged(kind):
    m = double_sbc(kind, seed=3)
    x = torch.randn(4, 3, 6, 6, dtype=torch.float64)
    proj = torch.randn(4, 6, 6, 6, dtype=torch.float64)
    m.zero_grad()
    (m(x) * proj).sum().backward()
    live = m.conv.weight.grad.clone()
    frozen_mask = m.bundle.hard_mask.detach().clone()
    assert 0 < frozen_mask.sum() < len(frozen_mask)
    m.zero_grad()
    (sbc_forward(m, x, frozen_mask) * proj).sum().backward()
    assert torch.equal(live, m.conv.weight.grad)


@pytest.mark.criterion(GRADIENTS)
@pytest.mark.parametrize("kind,c_in,c_out,d,stride", [
    ("v2", 3, 4, 2, 1), ("v2", 2, 4, 4, 2), ("v1", 3, 4, None, 1), ("v1", 4, 2, None, 2)])
def test_bypass_gradients_match_central_differences(kind, c_in, c_out, d, stride):
    t0 = time.perf_counter()
    m = double_sbc(kind, c_in, c_out, d, stride, seed=5)
    x = torch.randn(3, c_in, 5, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(6))
    mask = torch.zeros(c_out, dtype=torch.float64)
    mask[::2] = 1.0
    proj = torch.randn_like(sbc_forward(m, x, mask))

    def loss():
        return (sbc_forward(m, x, mask) * proj).sum()

    m.zero_grad()
    loss().backward()
    for name, p in m.bypass.named_parameters():
        # eval-mode BN is affine, so a small step is safe; large ones cross ReLU kinks
        num = central_difference(loss, p, eps=1e-6)
        err = ((p.grad - num).norm() / num.norm().clamp_min(1e-12)).item()
        assert err <= 1e-4, f"{name}: relative error {err:.2e}"
    assert time.perf_counter() - t0 < 60.0


# -- surgery ---------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mixed_resnet20():
    net = build_sbcnet("resnet20", 0.4, seed=21)
    randomize_masked_net(net, seed=22, full=("layer1.1.conv1",), empty=("layer3.1.conv2",))
    return net.eval()


@pytest.mark.criterion(SURGERY)
def test_compact_logits_match_masked(mixed_resnet20):
    counts = mixed_resnet20.kept_counts()
    mixed = [n for n, k in counts.items() if 0 < k < mixed_resnet20.arch[n].c_out]
    assert len(mixed) >= 10
    compact = convert(mixed_resnet20)
    assert next(compact.parameters()).dtype == torch.float32
    assert equivalence_check(mixed_resnet20, compact, 64) <= 1e-4


@pytest.mark.criterion(SURGERY)
def test_structural_flops_equal_analytic(mixed_resnet20):
    compact = convert(mixed_resnet20)
    analytic = fl.masked_network_flops(mixed_resnet20.arch.layers, mixed_resnet20.kept_counts(),
                                       mixed_resnet20.bypass_specs)
    assert structural_flops(compact) == analytic


# -- desk-profile training run ---------------------------------------------------------------------

def load_desk_run():
    report_path = DESK_RUN / "report.json"
    if not report_path.exists():
        pytest.fail(f"no finished desk run at {DESK_RUN} (needs CIFAR-10 and the desk profile; "
                    f"set LAPP_DESK_RUN to its directory)", pytrace=False)
    config = json.loads((DESK_RUN / "config.json").read_text())
    report = json.loads(report_path.read_text())
    assert config["arch_name"] == "resnet20" and config["c_target"] == 0.4
    assert config["total_epochs"] == 120 and config["prune_epoch_cap"] == 40
    assert config["bypass_kind"] == "v2" and not config["uniform"]
    assert config["train_subset"] in (None, 5000)
    return config, report


@pytest.mark.criterion(ATTAINMENT)
def test_desk_run_attains_target():
    config, report = load_desk_run()
    assert report["surgery_epoch"] is not None and report["surgery_epoch"] < config["prune_epoch_cap"]
    assert 0.36 < report["c_hat_final"] <= 0.40
    rates = [row["rate"] for row in report["per_layer"]]
    assert statistics.pstdev(rates) > 0.02


@pytest.mark.criterion(ACCURACY)
def test_desk_run_accuracy_floor():
    _, report = load_desk_run()
    assert report["final_top1"] >= 90.0


@pytest.mark.criterion(ACCURACY)
@pytest.mark.skipif(not PAPER_RUN, reason="optional paper-profile run not provided (LAPP_PAPER_RUN)")
def test_paper_run_accuracy_band():
    config = json.loads((Path(PAPER_RUN) / "config.json").read_text())
    report = json.loads((Path(PAPER_RUN) / "report.json").read_text())
    assert config["total_epochs"] == 400 and config["c_target"] == 0.4
    assert abs(report["final_top1"] - 92.22) <= 0.5


@pytest.mark.criterion(TRAJECTORY)
@pytest.mark.skipif(not (DESK_RUN / "report.json").exists(), reason="desk run not present; smoke run covers this")
def test_desk_run_trajectory():
    _, report = load_desk_run()
    traj = report["c_hat_trajectory"]
    assert traj[0][0] == 0 and traj[0][1] > 1.0
    assert traj[-1][1] <= report["c_target"] + 1e-9


# -- smoke-profile runs through the CLI ------------------------------------------------------------

@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    train, test = synthetic_cifar(1024, 256, seed=0)
    return write_cifar10_binary(tmp_path_factory.mktemp("cifar"), train, test)


def smoke(data_dir, out, *flags):
    rc = main(["prune", "--profile", "smoke", "--arch", "resnet20", "--target-c", "0.4",
               "--data-dir", str(data_dir), "--out-dir", str(out), *flags])
    return rc, Path(out)


@pytest.fixture(scope="module")
def smoke_runs(data_dir, tmp_path_factory):
    modes = {"v2": (), "v1": ("--bypass", "v1"), "uniform": ("--uniform",)}
    return {name: smoke(data_dir, tmp_path_factory.mktemp(name), *flags) for name, flags in modes.items()}


def read_c_hat(out):
    with open(out / "c_hat.csv") as fh:
        return [(int(r["iteration"]), float(r["c_hat"])) for r in csv.DictReader(fh)]


@pytest.mark.slow
@pytest.mark.criterion(TRAJECTORY)
def test_smoke_trajectory_starts_above_one(smoke_runs):
    rc, out = smoke_runs["v2"]
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert all(m["d"] == m["c_out"] for m in manifest["modules"])
    traj = read_c_hat(out)
    assert traj[0][0] == 0 and traj[0][1] > 1.0
    assert traj[-1][1] <= 0.4 + 1e-9


def check_report(out: Path, bypass_kind: str, uniform: bool):
    assert main(["report", str(out)]) == 0
    assert (out / "report.txt").exists()
    config = RunConfig(**json.loads((out / "config.json").read_text()))
    report = json.loads((out / "report.json").read_text())
    assert (report["bypass"], report["uniform"]) == (bypass_kind, uniform)
    assert report["surgery_epoch"] is not None and report["surgery_epoch"] < config.prune_epoch_cap
    assert report["c_hat_final"] <= config.c_target + 1e-9
    arch = arch_spec("resnet20")
    rows = report["per_layer"]
    assert [r["name"] for r in rows] == list(arch.prunable_set)
    for r in rows:
        assert r["kept"] == len(r["kept_indices"]) and r["rate"] == 1 - r["kept"] / r["c_out"]
    # reported counts agree with the rebuilt compact network and with the analytic model
    kept = {r["name"]: r["kept_indices"] for r in rows}
    net = rebuild_network(config, kept, torch.float32)
    specs = net.bypass_specs
    analytic = fl.masked_network_flops(arch.layers, {n: len(k) for n, k in kept.items()}, specs)
    assert report["flops_before"] == arch.total_flops
    assert report["flops_after"] == structural_flops(net) == analytic
    assert report["flops_reduction_pct"] == pytest.approx(100 * (1 - analytic / arch.total_flops), abs=1e-9)
    assert 0 <= report["final_top1"] <= 100
    assert len(report["accuracy_trajectory"]) == config.total_epochs
    assert main(["eval", str(out / "checkpoint.pt")]) == 0


@pytest.mark.slow
@pytest.mark.criterion(ABLATIONS)
@pytest.mark.parametrize("mode,bypass_kind,uniform", [("v1", "v1", False), ("uniform", "v2", True)])
def test_ablation_modes_complete(smoke_runs, mode, bypass_kind, uniform):
    rc, out = smoke_runs[mode]
    assert rc == 0
    check_report(out, bypass_kind, uniform)
