import math
import shutil

import pytest
import torch
import torch.nn.functional as F

from lapp import flops as fl
from lapp import harness as hs
from lapp.controller import (NonFiniteLoss, Pruner, TargetNotAttained, check_target, kept_flops,
                             make_optimizer, run, total_loss)
from lapp.harness import RunConfig, synthetic_cifar
from lapp.sbc import CompactSBC, SBCModule

from oracles import ToyNet, brute_network, toy_batch

TOY_CONFIG = RunConfig(c_target=0.5, lambda1=1e-3, lambda2=1.0, total_epochs=4, prune_epoch_cap=2,
                       batch_size=8, base_lr=0.05)


def toy(bypass="v2", seed=0, threshold_quantile=0.5):
    torch.manual_seed(seed)
    net = ToyNet(bypass=bypass).double()
    m = net.sbc
    with torch.no_grad():
        imp = m.conv.weight.abs().flatten(1).sum(1)
        m.threshold.fill_(float(torch.quantile(imp, threshold_quantile)) - 1e-3)
    return net


class TestCheckTarget:
    def test_examples(self):
        assert check_target(0.39, 0.40)
        assert not check_target(0.41, 0.40)
        assert check_target(0.4, 0.4)
        assert check_target(0.4 + 5e-10, 0.4)


class TestTotalLoss:
    def test_plain_cross_entropy(self):
        net = toy()
        x, y = toy_batch()
        loss, parts = total_loss(net, x, y, 0.0, 0.0, 0.5)
        assert loss.item() == F.cross_entropy(net(x), y).item()

    def test_flops_term_vanishes_at_target(self):
        net = toy()
        x, y = toy_batch()
        c_now = net.flops() / net.arch.total_flops
        _, parts = total_loss(net, x, y, 0.0, 1.0, c_now)
        assert parts["reg"].item() == 0.0

    @pytest.mark.parametrize("bypass", ["v2", "v1", None])
    def test_hand_assembled(self, bypass):
        net = toy(bypass)
        x, y = toy_batch()
        l1, l2, c = 3e-3, 0.7, 0.35
        loss, _ = total_loss(net, x, y, l1, l2, c)
        with torch.no_grad():
            logits = net(x)
            ce = (torch.logsumexp(logits, 1) - logits[torch.arange(len(y)), y]).mean().item()
            w = net.sbc.conv.weight
            l1_term = math.fsum(abs(v) for v in w.flatten().tolist())
            imp = w.abs().flatten(1).sum(1)
            mask = (imp >= net.sbc.threshold).int().tolist()
        kept = brute_network(net.arch.layers, {"sbc": mask}, net.bypass_specs)
        c_hat = kept / net.arch.total_flops
        ref = ce + l1 * l1_term + l2 * (c_hat / c - 1) ** 2
        assert abs(loss.item() - ref) <= 1e-10 * abs(ref)


class TestThresholdGradients:
    def test_pressure_sign_and_closed_form(self):
        net = toy(threshold_quantile=0.3)
        x, y = toy_batch()
        c = 0.3
        _, parts = total_loss(net, x, y, 0.0, 1.0, c)
        c_hat = parts["c_hat"].item()
        assert c_hat > c
        parts["reg"].backward()
        m = net.sbc
        layer = net.arch["sbc"]
        G = torch.sigmoid(m.conv.weight.abs().flatten(1).sum(1) - m.threshold.detach())
        per_filter = layer.h_out * layer.w_out * layer.c_in * layer.k ** 2
        closed = fl.flops_regularizer_grad(c_hat, c) * per_filter / net.arch.total_flops * -(G * (1 - G)).sum()
        assert m.threshold.grad.item() <= 0  # descent raises the threshold
        assert abs(m.threshold.grad.item() - closed.item()) <= 1e-6 * abs(closed.item())

    def test_sgd_step_raises_threshold(self):
        net = toy(threshold_quantile=0.3)
        x, y = toy_batch()
        opt = torch.optim.SGD([net.sbc.threshold], lr=0.1)
        before = net.sbc.threshold.item()
        _, parts = total_loss(net, x, y, 0.0, 1.0, 0.3)
        parts["reg"].backward()
        opt.step()
        assert net.sbc.threshold.item() > before

    def test_lambda2_zero_leaves_task_gradient_only(self):
        x, y = toy_batch()
        net = toy()
        loss, _ = total_loss(net, x, y, 0.0, 0.0, 0.3)
        loss.backward()
        with_zero = net.sbc.threshold.grad.clone()
        net.zero_grad()
        F.cross_entropy(net(x), y).backward()
        assert torch.equal(with_zero, net.sbc.threshold.grad)

    def test_thresholds_skip_weight_decay(self):
        opt = make_optimizer(toy(), 0.1, weight_decay=1e-4)
        decays = [(len(g["params"]), g["weight_decay"]) for g in opt.param_groups]
        assert decays[1] == (1, 0.0) and decays[0][1] == 1e-4


class TestPruner:
    def test_surgery_when_target_already_met(self):
        net = toy(bypass=None)
        pruner = Pruner(net, TOY_CONFIG)
        pruner.state.c_target = 1.0  # an unpruned bypass-free net sits exactly at C_hat = 1
        with torch.no_grad():
            net.sbc.threshold.fill_(-1.0)
        w = net.sbc.conv.weight.detach().clone()
        x, y = toy_batch()
        assert pruner.prune_step(x, y) is None
        st = pruner.state
        assert st.epoch_status == "train" and st.surgery_iteration == 0
        compact = pruner.net.slot("sbc")
        assert isinstance(compact, CompactSBC)
        assert torch.equal(compact.conv.weight, w)

    def test_zero_lr_keeps_masks(self):
        net = toy()
        pruner = Pruner(net, TOY_CONFIG)
        pruner.state.c_target = 0.05
        pruner.set_lr(0.0)
        x, y = toy_batch()
        masks = []
        for _ in range(2):
            pruner.prune_step(x, y)
            masks.append(net.sbc.bundle.hard_mask.detach().clone())
        assert torch.equal(masks[0], masks[1])
        assert pruner.state.epoch_status == "prune"

    def test_phase_monotone_after_surgery(self):
        net = toy()
        pruner = Pruner(net, TOY_CONFIG)
        pruner.state.c_target = 0.99
        with torch.no_grad():
            net.sbc.threshold.fill_(1e6)
        x, y = toy_batch()
        pruner.step(x, y)
        assert pruner.state.epoch_status == "train"
        assert not any(isinstance(m, SBCModule) for m in pruner.net.modules())
        assert not any(n.endswith("threshold") for n, _ in pruner.net.named_parameters())
        with pytest.raises(RuntimeError):
            pruner.prune_step(x, y)
        expected = F.cross_entropy(pruner.net(x), y).item()
        assert pruner.step(x, y) == expected
        assert pruner.state.epoch_status == "train"

    def test_compact_logits_match_masked(self):
        net = toy()
        with torch.no_grad():
            net.sbc.threshold.fill_(float(net.sbc.conv.weight.abs().flatten(1).sum(1).median()))
        pruner = Pruner(net, TOY_CONFIG)
        pruner.state.c_target = net.flops() / net.arch.total_flops  # met at step entry
        x, y = toy_batch()
        pruner.prune_step(x, y)
        masked, compact = pruner.masked_net.eval(), pruner.net.eval()
        with torch.no_grad():
            assert (masked(x) - compact(x)).abs().max() <= 1e-4

    def test_attainment_at_surgery(self):
        net = toy()
        cfg = TOY_CONFIG
        pruner = Pruner(net, cfg)
        # the bypass alone costs ~0.59 of this toy's baseline, so aim just above it
        pruner.state.c_target = 0.7
        pruner.state.lambda2 = 50.0
        x, y = toy_batch(n=16)
        for _ in range(300):
            pruner.step(x, y)
            if pruner.state.epoch_status == "train":
                break
        st = pruner.state
        assert st.epoch_status == "train"
        assert st.c_hat <= 0.7 + 1e-9
        assert st.c_hat_trajectory[0][1] > 1.0

    def test_train_step_before_surgery_refused(self):
        pruner = Pruner(toy(), TOY_CONFIG)
        with pytest.raises(RuntimeError):
            pruner.train_step(*toy_batch())

    def test_nonfinite_loss(self):
        net = toy()
        pruner = Pruner(net, TOY_CONFIG)
        x, y = toy_batch()
        x[0, 0, 0, 0] = float("inf")
        with pytest.raises(NonFiniteLoss):
            pruner.prune_step(x, y)

    def test_kept_flops_matches_integer_count(self):
        net = toy()
        net(toy_batch()[0])
        assert kept_flops(net).item() == net.flops()


RUN_CONFIG = RunConfig(arch_name="resnet20", c_target=0.4, lambda1=3e-2, lambda2=1000.0, total_epochs=3,
                       prune_epoch_cap=2, batch_size=16, bypass_kind="v1", train_subset=256, test_subset=64)


@pytest.fixture(scope="module")
def data():
    return synthetic_cifar(256, 64, seed=0)


@pytest.fixture(scope="module")
def unbroken(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("unbroken")
    saved = out / "after_epoch0.pt"

    def keep_first(epoch, pruner):
        if epoch == 0:
            shutil.copy(out / "checkpoint.pt", saved)

    result = run(RUN_CONFIG, *data, out_dir=out, dtype=torch.float64, on_epoch=keep_first)
    return result, saved


@pytest.mark.slow
class TestRun:
    def test_surgery_mid_prune_phase(self, unbroken):
        result, _ = unbroken
        st = result.state
        assert st.surgery_epoch == 1
        assert st.c_hat <= RUN_CONFIG.c_target + 1e-9
        assert st.c_hat_trajectory[0][1] > 1.0

    def test_repeat_is_identical(self, unbroken, data):
        again = run(RUN_CONFIG, *data, dtype=torch.float64)
        a, b = unbroken[0].state, again.state
        assert (a.surgery_epoch, a.surgery_iteration) == (b.surgery_epoch, b.surgery_iteration)
        assert a.kept_index_lists == b.kept_index_lists
        assert a.c_hat_trajectory == b.c_hat_trajectory
        assert a.accuracy_trajectory == b.accuracy_trajectory

    def test_resume_matches_unbroken(self, unbroken, data, tmp_path):
        result, saved = unbroken
        ckpt = hs.checkpoint_load(saved)
        assert ckpt["state"]["epoch_status"] == "prune"
        resumed = run(RUN_CONFIG, *data, out_dir=tmp_path, resume=ckpt, dtype=torch.float64)
        assert resumed.state.surgery_epoch == result.state.surgery_epoch
        assert resumed.state.kept_index_lists == result.state.kept_index_lists
        assert resumed.state.c_hat_trajectory == result.state.c_hat_trajectory
        sa, sb = result.net.state_dict(), resumed.net.state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)

    def test_cap_breach_raises(self, data):
        cfg = RunConfig(arch_name="resnet20", c_target=0.05, lambda1=0.0, lambda2=1e-6, total_epochs=2,
                        prune_epoch_cap=1, batch_size=32, train_subset=32, test_subset=16)
        with pytest.raises(TargetNotAttained) as err:
            run(cfg, *data)
        assert err.value.closest_c_hat > 1.0
