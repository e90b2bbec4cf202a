"""The LAPP training loop: progressive pruning, surgery hand-off, compact training."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from . import flops as fl
from . import harness as hs
from .harness import CifarSplit, RunConfig
from .masking import kept_indices
from .networks import (PrunableNet, build_sbcnet, structural_flops, structural_params,
                       uniform_prune_init)
from .surgery import carry_momentum, convert, surgery_manifest

log = logging.getLogger(__name__)

TARGET_SLACK = 1e-9


class TargetNotAttained(RuntimeError):
    def __init__(self, msg, closest_c_hat):
        super().__init__(msg)
        self.closest_c_hat = closest_c_hat


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class PruneRunState:
    lambda1: float
    lambda2: float
    c_target: float
    t_total: int
    prune_epoch_cap: int
    epoch_status: str = "prune"
    epoch_index: int = 0
    iteration_index: int = 0
    t_kept: float = math.nan
    closest_c_hat: float = math.inf
    surgery_epoch: int | None = None
    surgery_iteration: int | None = None
    kept_index_lists: dict[str, list[int]] = field(default_factory=dict)
    c_hat_trajectory: list[tuple[int, float]] = field(default_factory=list)
    accuracy_trajectory: list[tuple[int, float]] = field(default_factory=list)

    @property
    def flops_account(self) -> fl.FlopsAccount:
        return fl.FlopsAccount(self.t_total, self.t_kept, self.c_target)

    @property
    def c_hat(self) -> float:
        return self.t_kept / self.t_total


def check_target(c_hat: float, c_target: float) -> bool:
    """Attainment test: the masked network fits the FLOPs budget."""
    return c_hat <= c_target + TARGET_SLACK


def make_optimizer(net: nn.Module, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
    """SGD with momentum; thresholds sit in their own group without weight decay."""
    weights, thresholds = [], []
    for name, p in net.named_parameters():
        (thresholds if name.endswith("threshold") else weights).append(p)
    groups = [dict(params=weights, weight_decay=weight_decay)]
    if thresholds:
        groups.append(dict(params=thresholds, weight_decay=0.0))
    return torch.optim.SGD(groups, lr=lr, momentum=momentum)


def kept_flops(net: PrunableNet):
    """T_kept from the masks of the last forward pass; differentiable w.r.t. thresholds."""
    # float64: whole-network FLOP counts exceed float32's exact integer range
    counts = {name: m.bundle.kept_count.double() for name, m in net.sbc_modules().items()}
    return fl.masked_network_flops(net.arch.layers, counts, net.bypass_specs)


def l1_penalty(net: PrunableNet):
    return sum(m.conv.weight.abs().sum() for m in net.sbc_modules().values())


def total_loss(net: PrunableNet, x, y, lambda1: float, lambda2: float, c_target: float,
               t_total: int | None = None):
    """Cross-entropy + lambda1 * l1(sparse filters) + lambda2 * (C_hat/C - 1)^2.

    Returns the scalar loss and its parts; weight decay is left to the optimizer.
    """
    t_total = t_total or net.arch.total_flops
    logits = net(x)
    ce = F.cross_entropy(logits, y)
    c_hat = kept_flops(net) / t_total
    l1 = l1_penalty(net)
    reg = fl.flops_regularizer(c_hat, c_target)
    loss = ce + lambda1 * l1 + lambda2 * reg
    return loss, dict(ce=ce, l1=l1, reg=reg, c_hat=c_hat, logits=logits)


class Pruner:
    """Holds the live network and optimizer and applies Algorithm-1 steps to batches."""

    def __init__(self, net: PrunableNet, config: RunConfig, state: PruneRunState | None = None,
                 optimizer=None):
        self.net = net
        self.config = config
        self.state = state or PruneRunState(config.lambda1, config.lambda2, config.c_target,
                                            net.arch.total_flops, config.prune_epoch_cap)
        self.optimizer = optimizer or make_optimizer(net, config.base_lr, config.momentum,
                                                     config.weight_decay)
        self.masked_net: PrunableNet | None = None  # the SBCNet as it was at surgery

    def set_lr(self, lr: float) -> None:
        for g in self.optimizer.param_groups:
            g["lr"] = lr

    def measure(self) -> float:
        self.state.t_kept = self.net.flops()
        c_hat = self.state.c_hat
        self.state.closest_c_hat = min(self.state.closest_c_hat, c_hat)
        return c_hat

    def prune_step(self, x, y) -> float | None:
        st = self.state
        if st.epoch_status != "prune":
            raise RuntimeError("prune_step outside the prune phase")
        c_hat = self.measure()
        st.c_hat_trajectory.append((st.iteration_index, c_hat))
        st.iteration_index += 1
        if check_target(c_hat, st.c_target):
            self.surgery()
            return None
        loss, parts = total_loss(self.net, x, y, st.lambda1, st.lambda2, st.c_target, st.t_total)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(
                f"non-finite loss at iteration {st.iteration_index}: ce={parts['ce'].item()}, "
                f"l1={parts['l1'].item()}, reg={parts['reg'].item()}, C_hat={parts['c_hat'].item()}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        return loss.item()

    def surgery(self) -> None:
        st = self.state
        masks = {}
        with torch.no_grad():
            for name, m in self.net.sbc_modules().items():
                masks[name] = m.mask_bundle().hard_mask.detach().clone()
        compact = convert(self.net, masks)
        lr = self.optimizer.param_groups[0]["lr"]
        opt = make_optimizer(compact, lr, self.config.momentum, self.config.weight_decay)
        carry_momentum(self.net, self.optimizer, compact, opt)
        st.kept_index_lists = {name: kept_indices(m) for name, m in masks.items()}
        st.surgery_epoch, st.surgery_iteration = st.epoch_index, st.iteration_index - 1
        st.epoch_status = "train"
        self.masked_net = self.net
        self.net, self.optimizer = compact, opt
        log.info("surgery at epoch %d iteration %d, C_hat=%.4f", st.epoch_index, st.surgery_iteration, st.c_hat)

    def train_step(self, x, y) -> float:
        if self.state.epoch_status != "train":
            raise RuntimeError("train_step before surgery")
        self.state.iteration_index += 1
        loss = F.cross_entropy(self.net(x), y)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"non-finite loss at iteration {self.state.iteration_index}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        return loss.item()

    def step(self, x, y):
        if self.state.epoch_status == "prune":
            return self.prune_step(x, y)
        return self.train_step(x, y)


def rebuild_network(config: RunConfig, kept_index_lists: dict[str, list[int]] | None,
                    dtype=torch.float32) -> PrunableNet:
    """Recreate the module structure a checkpoint was saved from (weights not loaded)."""
    net = build_sbcnet(config.arch_name, config.c_target, config.bypass_kind, config.seed).to(dtype)
    if kept_index_lists:
        masks = {}
        for name, m in net.sbc_modules().items():
            mask = torch.zeros(m.c_out, dtype=dtype)
            mask[kept_index_lists[name]] = 1.0
            masks[name] = mask
        net = convert(net, masks)
    return net


@dataclass
class RunResult:
    net: PrunableNet
    state: PruneRunState
    config: RunConfig
    report: dict
    masked_net: PrunableNet | None = None


class RunWriter:
    """Artifact sink for a run directory."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name) -> Path:
        return self.dir / name

    def write_json(self, name, obj) -> None:
        tmp = self.path(name + ".tmp")
        tmp.write_text(json.dumps(obj, indent=2))
        tmp.replace(self.path(name))

    def append_metric(self, record: dict) -> None:
        with open(self.path("metrics.jsonl"), "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def write_c_hat(self, trajectory) -> None:
        tmp = self.path("c_hat.csv.tmp")
        tmp.write_text("iteration,c_hat\n" + "".join(f"{i},{c:.10g}\n" for i, c in trajectory))
        tmp.replace(self.path("c_hat.csv"))


def _state_to_dict(state: PruneRunState) -> dict:
    return asdict(state)


def _state_from_dict(d: dict) -> PruneRunState:
    d = dict(d)
    d["c_hat_trajectory"] = [tuple(r) for r in d["c_hat_trajectory"]]
    d["accuracy_trajectory"] = [tuple(r) for r in d["accuracy_trajectory"]]
    return PruneRunState(**d)


def snapshot(pruner: Pruner, epoch_done: int, dtype) -> dict:
    return dict(
        config=pruner.config.as_dict(),
        state=_state_to_dict(pruner.state),
        phase=pruner.state.epoch_status,
        epoch_done=epoch_done,
        dtype=str(dtype).replace("torch.", ""),
        model=pruner.net.state_dict(),
        optimizer=pruner.optimizer.state_dict(),
        rng=hs.rng_state(),
    )


def build_report(net: PrunableNet, state: PruneRunState, config: RunConfig, final_top1: float | None) -> dict:
    arch = net.arch
    flops_before, params_before = arch.total_flops, arch.total_params
    flops_after, params_after = structural_flops(net), structural_params(net)
    rows = surgery_manifest(net) if state.epoch_status == "train" else []
    rates = [r["rate"] for r in rows]
    mean = sum(rates) / len(rates) if rates else 0.0
    std = math.sqrt(sum((r - mean) ** 2 for r in rates) / len(rates)) if rates else 0.0
    return dict(
        arch=arch.name, c_target=config.c_target, bypass=config.bypass_kind, uniform=config.uniform,
        per_layer=rows,
        flops_before=flops_before, flops_after=flops_after,
        flops_reduction_pct=100.0 * (1 - flops_after / flops_before),
        params_before=params_before, params_after=params_after,
        params_reduction_pct=100.0 * (1 - params_after / params_before),
        c_hat_final=flops_after / flops_before,
        rate_std=std,
        final_top1=final_top1,
        surgery_epoch=state.surgery_epoch,
        surgery_iteration=state.surgery_iteration,
        c_hat_trajectory=[list(r) for r in state.c_hat_trajectory],
        accuracy_trajectory=[list(r) for r in state.accuracy_trajectory],
    )


def run(config: RunConfig, train: CifarSplit, test: CifarSplit, out_dir=None,
        resume: dict | None = None, dtype=torch.float32, on_epoch=None) -> RunResult:
    """Train an SBCNet from scratch, prune it to ``config.c_target`` and train the compact result.

    Raises TargetNotAttained when the prune phase runs past ``prune_epoch_cap``.
    """
    train = train.subset(config.train_subset)
    test = test.subset(config.test_subset)
    writer = RunWriter(out_dir) if out_dir else None
    hs.seed_everything(config.seed)

    if resume is not None:
        state = _state_from_dict(resume["state"])
        net = rebuild_network(config, state.kept_index_lists or None, dtype)
        net.load_state_dict(resume["model"])
        pruner = Pruner(net, config, state)
        pruner.optimizer.load_state_dict(resume["optimizer"])
        hs.set_rng_state(resume["rng"])
        start = resume["epoch_done"] + 1
    elif config.uniform:
        net, plan = uniform_prune_init(config.arch_name, config.c_target, config.bypass_kind, config.seed)
        net = net.to(dtype)
        pruner = Pruner(net, config)
        st = pruner.state
        st.epoch_status, st.surgery_epoch, st.surgery_iteration = "train", 0, 0
        st.kept_index_lists = {n: m.kept for n, m in net.compact_modules().items()}
        pruner.measure()
        st.c_hat_trajectory.append((0, st.c_hat))
        start = 0
    else:
        net = build_sbcnet(config.arch_name, config.c_target, config.bypass_kind, config.seed).to(dtype)
        pruner = Pruner(net, config)
        start = 0

    if writer and resume is None:
        writer.write_json("config.json", config.as_dict())
        writer.path("metrics.jsonl").unlink(missing_ok=True)
        if config.uniform:
            _write_surgery(writer, pruner, dtype)

    top1 = None
    for epoch in range(start, config.total_epochs):
        st = pruner.state
        st.epoch_index = epoch
        lr = hs.lr_at(epoch, config)
        pruner.set_lr(lr)
        was_pruning = st.epoch_status == "prune"
        losses = []
        t0 = time.time()
        for x, y in hs.train_batches(train, config, epoch, dtype):
            loss = pruner.step(x, y)
            if loss is not None:
                losses.append(loss)
            if was_pruning and st.epoch_status == "train" and writer:
                _write_surgery(writer, pruner, dtype)
                was_pruning = False
        if st.epoch_status == "prune":
            if check_target(pruner.measure(), st.c_target):
                pruner.surgery()
                if writer:
                    _write_surgery(writer, pruner, dtype)
            elif epoch + 1 >= config.prune_epoch_cap:
                if writer:
                    writer.write_c_hat(st.c_hat_trajectory)
                raise TargetNotAttained(
                    f"target C={config.c_target} not reached within {config.prune_epoch_cap} prune epochs; "
                    f"closest C_hat={st.closest_c_hat:.4f}", st.closest_c_hat)
        if st.epoch_status == "train":
            pruner.measure()
            st.c_hat_trajectory.append((st.iteration_index, st.c_hat))
        top1 = hs.evaluate(pruner.net, test, config.mean, config.std)
        st.accuracy_trajectory.append((epoch, top1))
        record = dict(epoch=epoch, lr=lr, loss=sum(losses) / len(losses) if losses else None,
                      c_hat=st.c_hat, top1=top1, phase=st.epoch_status, seconds=round(time.time() - t0, 2))
        log.info("epoch %d %s", epoch, record)
        if writer:
            writer.append_metric(record)
            writer.write_c_hat(st.c_hat_trajectory)
            hs.checkpoint_save(snapshot(pruner, epoch, dtype), writer.path("checkpoint.pt"))
        if on_epoch is not None:
            on_epoch(epoch, pruner)

    report = build_report(pruner.net, pruner.state, config, top1)
    if writer:
        writer.write_json("report.json", report)
    return RunResult(pruner.net, pruner.state, config, report, pruner.masked_net)


def _write_surgery(writer: RunWriter, pruner: Pruner, dtype) -> None:
    st = pruner.state
    meta = dict(config=pruner.config.as_dict(), state=_state_to_dict(st),
                dtype=str(dtype).replace("torch.", ""))
    if pruner.masked_net is not None:
        hs.checkpoint_save(dict(meta, phase="prune", model=pruner.masked_net.state_dict()),
                           writer.path("pre_surgery.pt"))
    hs.checkpoint_save(dict(meta, phase="train", model=pruner.net.state_dict()),
                       writer.path("post_surgery.pt"))
    writer.write_json("manifest.json", dict(
        arch=pruner.net.arch.name, t_total=st.t_total, t_kept=st.t_kept, c_hat=st.c_hat,
        surgery_epoch=st.surgery_epoch, modules=surgery_manifest(pruner.net)))
