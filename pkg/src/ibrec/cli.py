"""Command-line entry point.

Subcommands: gen-data, train, eval, exp-pathology, exp-rotation, exp-beta,
diagnose.  Options resolve as defaults < config file (--config, JSON) < CLI
flags; every run directory receives the resolved configuration and a content
hash of its inputs.  Exit codes: 0 success, 1 invalid configuration or
arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import experiments
from .dataset import dataset_geometry, load_dataset
from .train import load_model, evaluate_split, train as run_train
from .metrics import write_metrics_csv


class CliError(ValueError):
    pass


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise CliError(f"cannot read config file {path}: {err}") from err


def _merge(defaults_overrides: dict, file_cfg: dict, flag_cfg: dict) -> dict:
    merged = dict(defaults_overrides)
    for src in (file_cfg, flag_cfg):
        for k, v in src.items():
            if v is None:
                continue
            if k == "grid" and isinstance(v, dict):
                merged.setdefault("grid", {})
                merged["grid"].update(v)
            else:
                merged[k] = v
    return merged


def content_hash(paths: list) -> str:
    """Stable digest over the given files/directories (paths + bytes)."""
    digest = hashlib.sha256()
    for root in paths:
        root = Path(root)
        if root.is_file():
            files = [root]
            base = root.parent
        elif root.is_dir():
            files = sorted(p for p in root.rglob("*") if p.is_file())
            base = root
        else:
            continue
        for f in files:
            digest.update(str(f.relative_to(base)).encode())
            digest.update(f.read_bytes())
    return digest.hexdigest()


def write_run_stamp(out_dir, resolved_cfg: dict, input_paths: list):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps(resolved_cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "inputs.sha256").write_text(content_hash(input_paths) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _merge({}, _load_config_file(args.config), {
        "seeds": None, "train_count": args.train_count, "test_count": args.test_count,
        "angle_count": args.angle_count,
    })
    plan = cfg.pop("plan", args.plan)
    if plan is None:
        raise CliError("gen-data needs a plan (--plan or config key 'plan')")
    resolved = experiments.resolve_config(cfg)
    resolved["plan"] = plan
    resolved["seed"] = args.seed
    experiments.gen_data(args.out, resolved, plan, args.seed)
    write_run_stamp(args.out, resolved, [])
    print(f"dataset written to {args.out}")
    return 0


def _variant_from(args) -> str:
    variant = args.variant
    if variant not in experiments.VARIANTS:
        raise CliError(f"--variant must be one of {sorted(experiments.VARIANTS)}")
    return variant


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    flag_cfg = {"beta": args.beta, "max_epochs": args.epochs, "lr": args.lr,
                "batch_size": args.batch_size, "patience": args.patience}
    cfg = experiments.resolve_config(_merge({}, file_cfg, flag_cfg))
    variant = _variant_from(args)
    ds = load_dataset(args.data)
    cases = ds.split("train")
    if not cases:
        raise CliError(f"dataset {args.data} has no 'train' split")
    mc = experiments.model_config(cfg, ds.dims, variant)
    tc = experiments.train_config(cfg, args.seed)
    model, report = run_train(cases, mc, tc, out_dir=args.out)
    resolved = dict(cfg)
    resolved.update({"variant": variant, "seed": args.seed, "data": str(args.data)})
    write_run_stamp(args.out, resolved, [Path(args.data) / "manifest.json"])
    print(f"trained {variant}: best epoch {report.best_epoch}, "
          f"val loss {report.val_losses[report.best_epoch]:.6g}, "
          f"wall {report.wall_time_sec:.1f}s")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    geom = dataset_geometry(ds)
    model = load_model(args.checkpoint)
    tags = args.splits.split(",") if args.splits else [t for t in ds.split_tags() if t != "train"]
    records = []
    aggregates = {}
    for tag in tags:
        cases = ds.split(tag)
        if not cases:
            raise CliError(f"split {tag!r} not present in {args.data}")
        recs, agg = evaluate_split(cases, model, geom)
        records.extend(recs)
        aggregates[tag] = agg
    out_csv = Path(args.out) / "metrics.csv"
    write_metrics_csv(out_csv, records, aggregates)
    write_run_stamp(args.out, {"splits": tags, "checkpoint": str(args.checkpoint),
                               "data": str(args.data)},
                    [Path(args.data) / "manifest.json", Path(args.checkpoint)])
    print(f"metrics written to {out_csv}")
    return 0


def _experiment_overrides(args) -> dict:
    file_cfg = _load_config_file(args.config)
    flag_cfg = {}
    if getattr(args, "seeds", None):
        flag_cfg["seeds"] = [int(s) for s in args.seeds.split(",")]
    for key in ("train_count", "test_count", "angle_count", "max_epochs", "beta"):
        val = getattr(args, key, None)
        if val is not None:
            flag_cfg[key] = val
    if getattr(args, "betas", None):
        flag_cfg["betas"] = [float(b) for b in args.betas.split(",")]
    return _merge({}, file_cfg, flag_cfg)


def cmd_exp_pathology(args) -> int:
    overrides = _experiment_overrides(args)
    resolved = experiments.resolve_config(overrides)
    write_run_stamp(args.out, resolved, [])
    paths = experiments.run_pathology(args.out, overrides)
    print("\n".join(f"{k}: {v}" for k, v in paths.items()))
    return 0


def cmd_exp_rotation(args) -> int:
    overrides = _experiment_overrides(args)
    write_run_stamp(args.out, experiments.resolve_config(overrides), [])
    paths = experiments.run_rotation(args.out, overrides)
    print("\n".join(f"{k}: {v}" for k, v in paths.items()))
    return 0


def cmd_exp_beta(args) -> int:
    overrides = _experiment_overrides(args)
    write_run_stamp(args.out, experiments.resolve_config(overrides), [])
    paths = experiments.run_beta(args.out, overrides)
    print("\n".join(f"{k}: {v}" for k, v in paths.items()))
    return 0


def cmd_diagnose(args) -> int:
    overrides = _experiment_overrides(args)
    checkpoints = {}
    if args.checkpoints:
        for item in args.checkpoints.split(","):
            if "=" not in item:
                raise CliError("--checkpoints wants label=path[,label=path...]")
            label, path = item.split("=", 1)
            checkpoints[label] = path
    elif args.experiment:
        exp = Path(args.experiment)
        for seed_dir in sorted(exp.glob("seed_*")):
            for variant in experiments.VARIANTS:
                ckpt = seed_dir / variant / "checkpoint"
                if ckpt.exists():
                    checkpoints[f"{seed_dir.name}/{variant}"] = ckpt
    if not checkpoints:
        raise CliError("no checkpoints given; use --checkpoints or --experiment")
    resolved = experiments.resolve_config(overrides)
    write_run_stamp(args.out, resolved, [Path(args.data) / "manifest.json"])
    paths = experiments.run_diagnose(args.out, checkpoints, args.data, overrides)
    print("\n".join(f"{k}: {v}" for k, v in paths.items()))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ibrec",
        description="Desk-scale sequence-bottleneck reconstruction workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=0, help="global seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="simulate a dataset directory")
    common(p)
    p.add_argument("--plan", choices=["pathology", "rotation_i", "rotation_ii", "rotation_test"])
    p.add_argument("--train-count", type=int, dest="train_count")
    p.add_argument("--test-count", type=int, dest="test_count")
    p.add_argument("--angle-count", type=int, dest="angle_count")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant")
    common(p)
    p.add_argument("--variant", required=True,
                   help="svs-stoch | svs-det | svs-l-stoch | svs-l-det")
    p.add_argument("--beta", type=float)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--patience", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on dataset splits")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", help="comma-separated split tags (default: all non-train)")
    p.set_defaults(func=cmd_eval)

    for name, fn in (("exp-pathology", cmd_exp_pathology),
                     ("exp-rotation", cmd_exp_rotation),
                     ("exp-beta", cmd_exp_beta)):
        p = sub.add_parser(name, help=f"run the {name[4:]} experiment")
        common(p)
        p.add_argument("--seeds", help="comma-separated master seeds")
        p.add_argument("--train-count", type=int, dest="train_count")
        p.add_argument("--test-count", type=int, dest="test_count")
        p.add_argument("--angle-count", type=int, dest="angle_count")
        p.add_argument("--max-epochs", type=int, dest="max_epochs")
        p.add_argument("--beta", type=float)
        if name == "exp-beta":
            p.add_argument("--betas", help="comma-separated bottleneck weights")
        p.set_defaults(func=fn)

    p = sub.add_parser("diagnose", help="gap/flatness/expansion diagnostics + oracle sweep")
    common(p)
    p.add_argument("--checkpoints", help="label=path[,label=path...]")
    p.add_argument("--experiment", help="experiment directory to scan for checkpoints")
    p.add_argument("--data", required=True, help="dataset directory for probes and splits")
    p.add_argument("--seeds")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 1 if err.code not in (0, None) else 0
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure
        print(f"runtime failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
