"""Command-line entry points: ``lapp prune | eval | report | check``.

Exit codes: 0 success, 1 equivalence check failed, 2 usage error,
3 target not attained, 4 artifact error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import torch
import yaml

from . import flops as fl
from . import harness as hs
from .controller import TargetNotAttained, rebuild_network, run
from .flops import BypassSpec
from .harness import CheckpointError, IngestionError, RunConfig
from .networks import arch_spec
from .surgery import equivalence_check

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_TARGET, EXIT_ARTIFACT = 0, 1, 2, 3, 4

RUN_ARTIFACTS = ("config.json", "checkpoint.pt", "manifest.json", "metrics.jsonl", "report.json")

# flag dest -> RunConfig field
FLAG_FIELDS = {
    "arch": "arch_name", "target_c": "c_target", "lambda1": "lambda1", "lambda2": "lambda2",
    "epochs": "total_epochs", "prune_epoch_cap": "prune_epoch_cap", "bypass": "bypass_kind",
    "uniform": "uniform", "seed": "seed", "batch_size": "batch_size", "data_dir": "data_dir",
    "out_dir": "out_dir", "lr": "base_lr", "train_subset": "train_subset", "test_subset": "test_subset",
}


class UsageError(Exception):
    pass


class ArtifactError(Exception):
    pass


def load_config_document(path) -> dict:
    """Flat ``key: value`` document; keys are RunConfig field names plus ``profile``."""
    try:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError as err:
        raise UsageError(f"config file not found: {path}") from err
    except yaml.YAMLError as err:
        raise UsageError(f"unparseable config file {path}: {err}") from err
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must be a flat key/value mapping")
    allowed = RunConfig.field_names() | {"profile"}
    bad = sorted(k for k in doc if k not in allowed)
    if bad:
        raise UsageError(f"invalid config keys: {', '.join(map(str, bad))}")
    nested = sorted(k for k, v in doc.items() if isinstance(v, dict))
    if nested:
        raise UsageError(f"config must be flat; nested values under: {', '.join(nested)}")
    return doc


def resolve_config(args) -> RunConfig:
    doc = load_config_document(args.config) if args.config else {}
    profile = args.profile or doc.pop("profile", None) or "desk"
    doc.pop("profile", None)
    if profile not in hs.PROFILES:
        raise UsageError(f"unknown profile {profile!r}")
    values = dict(hs.PROFILES[profile])
    values.update(doc)
    for dest, name in FLAG_FIELDS.items():
        v = getattr(args, dest, None)
        if v is not None and v is not False:
            values[name] = v
    values.setdefault("arch_name", "resnet20")
    if "lambda1" not in values:
        values["lambda1"] = hs.default_lambda1(values["arch_name"])
    if not values.get("data_dir"):
        values["data_dir"] = os.environ.get(hs.DATA_DIR_ENV)
    try:
        arch_spec(values["arch_name"])
        return RunConfig(**values)
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from err


def _dtype(name: str):
    return getattr(torch, name)


def _load_data(config: RunConfig):
    try:
        return hs.load_cifar10(config.data_dir)
    except IngestionError as err:
        raise ArtifactError(str(err)) from err


def cmd_prune(args) -> int:
    config = resolve_config(args)
    if not config.out_dir:
        raise UsageError("--out-dir is required")
    out = Path(config.out_dir)
    existing = [a for a in RUN_ARTIFACTS if (out / a).exists()]
    resume = None
    if args.resume:
        resume = hs.checkpoint_load(out / "checkpoint.pt")
        config = RunConfig(**resume["config"])
    elif existing and not args.overwrite:
        raise ArtifactError(f"{out} already holds run artifacts ({', '.join(existing)}); "
                            "pass --overwrite to replace them or --resume to continue")
    elif existing:
        for name in RUN_ARTIFACTS + ("pre_surgery.pt", "post_surgery.pt", "failure.json", "report.txt"):
            (out / name).unlink(missing_ok=True)
    train, test = _load_data(config)
    dtype = _dtype(resume["dtype"]) if resume else torch.float32
    try:
        result = run(config, train, test, out_dir=out, resume=resume, dtype=dtype)
    except TargetNotAttained as err:
        (out / "failure.json").write_text(json.dumps(dict(reason=str(err), closest_c_hat=err.closest_c_hat)))
        print(f"error: {err}", file=sys.stderr)
        return EXIT_TARGET
    print(render_report(result.report))
    return EXIT_OK


def _resolve_checkpoint(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.pt"
    if not p.exists():
        raise ArtifactError(f"checkpoint not found: {p}")
    return p


def load_network(ckpt: dict):
    config = RunConfig(**ckpt["config"])
    kept = ckpt["state"]["kept_index_lists"] if ckpt["phase"] == "train" else None
    net = rebuild_network(config, kept, _dtype(ckpt.get("dtype", "float32")))
    net.load_state_dict(ckpt["model"])
    return config, net


def cmd_eval(args) -> int:
    path = _resolve_checkpoint(args.checkpoint)
    ckpt = hs.checkpoint_load(path)
    if ckpt["phase"] != "train":
        raise ArtifactError(f"{path} was saved before surgery; finish the run with "
                            "`lapp prune --resume --out-dir <run dir>` and evaluate its final checkpoint")
    config, net = load_network(ckpt)
    if args.data_dir:
        config.data_dir = args.data_dir
    elif not config.data_dir:
        config.data_dir = os.environ.get(hs.DATA_DIR_ENV)
    _, test = _load_data(config)
    test = test.subset(args.test_subset)
    top1 = hs.evaluate(net, test, config.mean, config.std)
    print(f"top1={top1:.2f}")
    record = dict(checkpoint=str(path), top1=top1, samples=len(test))
    (path.parent / "eval.json").write_text(json.dumps(record))
    return EXIT_OK


def manifest_flops(manifest: dict, config: RunConfig) -> tuple[int, int, int, int]:
    """Baseline and compact FLOPs/params recomputed from the manifest alone."""
    arch = arch_spec(manifest["arch"])
    counts = {m["name"]: m["kept"] for m in manifest["modules"]}
    specs = {}
    for m in manifest["modules"]:
        if config.bypass_kind == "v1":
            specs[m["name"]] = BypassSpec("v1")
        elif m["d"] is not None:
            specs[m["name"]] = BypassSpec("v2", m["d"])
    return (arch.total_flops, fl.masked_network_flops(arch.layers, counts, specs),
            arch.total_params, fl.params_count(arch.layers, counts, specs))


def render_report(report: dict) -> str:
    rows = report["per_layer"]
    lines = [f"{'layer':<18}{'c':>6}{'n':>6}{'p':>8}{'d':>6}"]
    for r in rows:
        d = "-" if r["d"] is None else r["d"]
        lines.append(f"{r['name']:<18}{r['c_out']:>6}{r['kept']:>6}{r['rate']:>8.3f}{d:>6}")
    rates = [r["rate"] for r in rows]
    adaptive = "yes" if report.get("rate_std", 0.0) > 0 else "no"
    top1 = report.get("final_top1")
    lines += [
        "",
        f"arch            {report['arch']}  (C={report['c_target']}, bypass={report['bypass']}"
        f"{', uniform' if report.get('uniform') else ''})",
        f"FLOPs           {report['flops_before']:,} -> {report['flops_after']:,}"
        f"  (reduction {report['flops_reduction_pct']:.1f}%, C_hat={report['c_hat_final']:.4f})",
        f"params          {report['params_before']:,} -> {report['params_after']:,}"
        f"  (reduction {report['params_reduction_pct']:.1f}%)",
        f"top-1           {'n/a' if top1 is None else f'{top1:.2f}%'}",
        f"surgery epoch   {report.get('surgery_epoch')}",
        f"rate std        {report.get('rate_std', 0.0):.4f}  layer-adaptive: {adaptive}",
    ]
    if rates:
        lines.append(f"rate range      {min(rates):.3f} .. {max(rates):.3f}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    missing = [a for a in RUN_ARTIFACTS if not (run_dir / a).exists()]
    if missing:
        raise ArtifactError(f"incomplete run directory {run_dir}; missing: {', '.join(missing)}")
    report = json.loads((run_dir / "report.json").read_text())
    manifest = json.loads((run_dir / "manifest.json").read_text())
    config = RunConfig(**json.loads((run_dir / "config.json").read_text()))
    t_before, t_after, p_before, p_after = manifest_flops(manifest, config)
    report.update(flops_before=t_before, flops_after=t_after, params_before=p_before, params_after=p_after,
                  flops_reduction_pct=100.0 * (1 - t_after / t_before),
                  params_reduction_pct=100.0 * (1 - p_after / p_before), c_hat_final=t_after / t_before)
    rates = [m["rate"] for m in manifest["modules"]]
    mean = sum(rates) / len(rates)
    report["rate_std"] = math.sqrt(sum((r - mean) ** 2 for r in rates) / len(rates))
    report["per_layer"] = manifest["modules"]
    text = render_report(report)
    (run_dir / "report.txt").write_text(text + "\n")
    with open(run_dir / "c_hat_trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "c_hat"])
        w.writerows(report["c_hat_trajectory"])
    with open(run_dir / "accuracy_trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "top1"])
        w.writerows(report["accuracy_trajectory"])
    print(text)
    return EXIT_OK


def cmd_check(args) -> int:
    run_dir = Path(args.run_dir)
    pre, post = run_dir / "pre_surgery.pt", run_dir / "post_surgery.pt"
    missing = [p.name for p in (pre, post) if not p.exists()]
    if missing:
        raise ArtifactError(f"need paired surgery snapshots in {run_dir}; missing: {', '.join(missing)}")
    _, masked = load_network(hs.checkpoint_load(pre))
    _, compact = load_network(hs.checkpoint_load(post))
    dev = equivalence_check(masked, compact, args.samples, seed=args.seed)
    verdict = "PASS" if dev <= args.tolerance else "FAIL"
    print(f"{verdict} max_dev={dev:.3e} tolerance={args.tolerance:g}")
    return EXIT_OK if verdict == "PASS" else EXIT_CHECK_FAILED


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lapp", description="Layer adaptive progressive pruning for CIFAR CNNs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prune", help="train from scratch while pruning to a FLOPs target")
    p.add_argument("--config", help="flat key: value run configuration")
    p.add_argument("--profile", choices=sorted(hs.PROFILES))
    p.add_argument("--arch")
    p.add_argument("--target-c", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--prune-epoch-cap", type=int)
    p.add_argument("--bypass", choices=("v2", "v1"))
    p.add_argument("--uniform", action="store_true", help="uniform pruning at init (LAPP-UP)")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--train-subset", type=int)
    p.add_argument("--test-subset", type=int)
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="top-1 accuracy of a post-surgery checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data-dir")
    p.add_argument("--test-subset", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render a finished run as tables and series files")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("check", help="verify masked and compact networks agree")
    p.add_argument("run_dir")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ArtifactError, CheckpointError) as err:
        print(f"artifact error: {err}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
