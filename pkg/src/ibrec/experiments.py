"""Experiment orchestration: dataset plans, multi-seed runs, and report CSVs.

Each experiment runs under a handful of master seeds with one subdirectory
per seed; aggregate rows report the median across seeds.  Datasets,
checkpoints and CSVs are all deterministic functions of the resolved
configuration, so reruns reproduce every byte.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import theory
from .apsim import DIFFICULTY_SPLITS, SimConfig, angle_split
from .dataset import Dataset, dataset_geometry, generate_dataset, load_dataset
from .geometry import build_grid
from .train import Model, TrainConfig, evaluate_split, load_model, train
from .vib import ModelConfig

VARIANTS = {
    "svs-stoch": ("svs", True),
    "svs-det": ("svs", False),
    "svs-l-stoch": ("svs-l", True),
    "svs-l-det": ("svs-l", False),
}

METRIC_NAMES = ("mse", "tmp_corr", "at_corr", "dice")

ROTATION_TEST_ANGLES = list(range(-20, 21))
ROTATION_REGIMES = {"i": list(range(-2, 3)), "ii": list(range(-4, 6))}

DEFAULTS = {
    "grid": {"nx": 8, "ny": 8, "lead_count": 16, "ring_radius": 12.0},
    "snr_db": 40.0,
    "scar_radius": 2,
    "seeds": [101, 202, 303],
    "train_count": 400,
    "test_count": 100,
    "angle_count": 50,
    "beta": 10.0,
    "betas": [0.1, 1.0, 10.0, 100.0],
    "latent_dim": 16,
    "enc_hidden": 64,
    "dec_hidden": 64,
    "fc_hidden": 128,
    "dec_input_dim": 16,
    "lr": 1e-3,
    "batch_size": 16,
    "max_epochs": 250,
    "patience": 25,
    "val_fraction": 0.15,
    "n_probes": 12,
    "taylor_n_mc": 10000,
    "fd_step": 1e-3,
}


def resolve_config(overrides: dict | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))  # deep copy via round trip
    for key, value in (overrides or {}).items():
        if key == "grid" and isinstance(value, dict):
            cfg["grid"].update(value)
        else:
            cfg[key] = value
    return cfg


def _geometry(cfg: dict):
    g = cfg["grid"]
    return build_grid(g["nx"], g["ny"], g["lead_count"], g["ring_radius"])


def model_config(cfg: dict, dims, variant: str, beta: float | None = None) -> ModelConfig:
    arch, stochastic = VARIANTS[variant]
    U, M, T = dims
    return ModelConfig(
        arch=arch, stochastic=stochastic, n_leads=M, n_nodes=U, n_frames=T,
        latent_dim=cfg["latent_dim"], enc_hidden=cfg["enc_hidden"],
        dec_hidden=cfg["dec_hidden"], fc_hidden=cfg["fc_hidden"],
        dec_input_dim=cfg["dec_input_dim"],
        beta=float(cfg["beta"] if beta is None else beta) if stochastic else 0.0,
    )


def train_config(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"],
                       max_epochs=cfg["max_epochs"], patience=cfg["patience"],
                       val_fraction=cfg["val_fraction"], seed=seed)


# ---------------------------------------------------------------------------
# dataset plans
# ---------------------------------------------------------------------------


def pathology_plan(cfg: dict) -> list:
    plan = [("train", cfg["train_count"], 0.0)]
    plan += [(tag, cfg["test_count"], 0.0) for tag in DIFFICULTY_SPLITS]
    return plan


def rotation_train_plan(cfg: dict, regime: str) -> list:
    return [("train", cfg["angle_count"], float(a)) for a in ROTATION_REGIMES[regime]]


def rotation_test_plan(cfg: dict) -> list:
    return [(angle_split(a), cfg["angle_count"], float(a)) for a in ROTATION_TEST_ANGLES]


def named_plan(cfg: dict, name: str) -> list:
    if name == "pathology":
        return pathology_plan(cfg)
    if name in ("rotation_i", "rotation_ii"):
        return rotation_train_plan(cfg, name.split("_")[1])
    if name == "rotation_test":
        return rotation_test_plan(cfg)
    raise ValueError(f"unknown plan {name!r}; use pathology, rotation_i, rotation_ii,"
                     f" rotation_test or give an explicit plan list")


def gen_data(out_dir, cfg: dict, plan, base_seed: int) -> Path:
    if isinstance(plan, str):
        plan = named_plan(cfg, plan)
    plan = [(str(tag), int(count), float(rot)) for tag, count, rot in plan]
    return generate_dataset(out_dir, _geometry(cfg), SimConfig(), plan, base_seed,
                            snr_db=cfg["snr_db"], scar_radius=cfg["scar_radius"])


def _data_seed(master_seed: int, stream: int) -> int:
    return (int(master_seed) * 1000003 + stream) & 0xFFFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "nan"
    return format(float(v), ".10g")


def write_long_csv(path, header: list, rows: list):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def median_over_seeds(rows: list, key_fields: slice, value_fields: slice) -> list:
    """Collapse per-seed rows (first column = seed) into median rows."""
    groups: dict = {}
    for row in rows:
        key = tuple(row[key_fields])
        groups.setdefault(key, []).append([float(v) for v in row[value_fields]])
    out = []
    for key in groups:
        vals = np.median(np.asarray(groups[key], dtype=np.float64), axis=0)
        out.append(["median", *key, *[_fmt(v) for v in vals]])
    return out


# ---------------------------------------------------------------------------
# pathology-shift experiment
# ---------------------------------------------------------------------------


def _train_variant(out_dir, cases, mc: ModelConfig, tc: TrainConfig) -> Model:
    model, _ = train(cases, mc, tc, out_dir=out_dir)
    return model


def run_pathology(out_dir, overrides: dict | None = None) -> dict:
    """Train all four variants per seed, evaluate every difficulty split.

    Emits fig2_long.csv (seed x variant x split x metric) and table1.csv
    (variant x metric over pooled difficulty cases, median across seeds).
    """
    cfg = resolve_config(overrides)
    out_dir = Path(out_dir)
    long_rows = []
    pooled_rows = []
    for seed in cfg["seeds"]:
        seed_dir = out_dir / f"seed_{seed}"
        data_dir = seed_dir / "data"
        if not (data_dir / "manifest.json").exists():
            gen_data(data_dir, cfg, "pathology", _data_seed(seed, 0))
        ds = load_dataset(data_dir)
        geom = dataset_geometry(ds)
        train_cases = ds.split("train")
        for variant in VARIANTS:
            mc = model_config(cfg, ds.dims, variant)
            model = _train_variant(seed_dir / variant, train_cases, mc,
                                   train_config(cfg, seed))
            all_records = []
            for tag in DIFFICULTY_SPLITS:
                records, agg = evaluate_split(ds.split(tag), model, geom)
                all_records.extend(records)
                for metric in METRIC_NAMES:
                    long_rows.append([seed, variant, tag, metric,
                                      _fmt(agg[metric]["mean"]), _fmt(agg[metric]["std"])])
            from .metrics import aggregate, write_metrics_csv
            pooled = aggregate(all_records)
            by_split = {tag: aggregate([r for r in all_records if r.split == tag])
                        for tag in DIFFICULTY_SPLITS}
            write_metrics_csv(seed_dir / variant / "metrics.csv", all_records, by_split)
            pooled_rows.append([seed, variant] + [
                v for metric in METRIC_NAMES
                for v in (_fmt(pooled[metric]["mean"]), _fmt(pooled[metric]["std"]))])

    long_rows += median_over_seeds(long_rows, slice(1, 4), slice(4, 6))
    write_long_csv(out_dir / "fig2_long.csv",
                   ["seed", "variant", "split", "metric", "mean", "std"], long_rows)

    table_rows = pooled_rows + median_over_seeds(pooled_rows, slice(1, 2), slice(2, 10))
    header = ["seed", "variant"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")]
    write_long_csv(out_dir / "table1.csv", header, table_rows)
    return {"fig2_long": str(out_dir / "fig2_long.csv"),
            "table1": str(out_dir / "table1.csv")}


# ---------------------------------------------------------------------------
# rotation-shift experiment
# ---------------------------------------------------------------------------


def _angle_cases(ds: Dataset, angle: int) -> list:
    return ds.split(angle_split(angle))


def _eval_over_angles(model: Model, geom, ds: Dataset, rows: list, prefix: list):
    for angle in ROTATION_TEST_ANGLES:
        cases = _angle_cases(ds, angle)
        _, agg = evaluate_split(cases, model, geom)
        rows.append(prefix + [angle] + [
            v for metric in METRIC_NAMES
            for v in (_fmt(agg[metric]["mean"]), _fmt(agg[metric]["std"]))])


def run_rotation(out_dir, overrides: dict | None = None) -> dict:
    """Both training regimes, stochastic and deterministic svs, all test angles."""
    cfg = resolve_config(overrides)
    out_dir = Path(out_dir)
    rows = []
    for seed in cfg["seeds"]:
        seed_dir = out_dir / f"seed_{seed}"
        test_dir = seed_dir / "data_test"
        if not (test_dir / "manifest.json").exists():
            gen_data(test_dir, cfg, "rotation_test", _data_seed(seed, 9))
        test_ds = load_dataset(test_dir)
        geom = dataset_geometry(test_ds)
        for regime in ROTATION_REGIMES:
            train_dir = seed_dir / f"data_train_{regime}"
            if not (train_dir / "manifest.json").exists():
                gen_data(train_dir, cfg, f"rotation_{regime}", _data_seed(seed, 1))
            train_ds = load_dataset(train_dir)
            for variant in ("svs-stoch", "svs-det"):
                mc = model_config(cfg, train_ds.dims, variant)
                model = _train_variant(seed_dir / f"regime_{regime}" / variant,
                                       train_ds.cases, mc, train_config(cfg, seed))
                _eval_over_angles(model, geom, test_ds, rows, [seed, regime, variant])

    rows += median_over_seeds(rows, slice(1, 4), slice(4, 12))
    header = (["seed", "regime", "variant", "angle"]
              + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")])
    write_long_csv(out_dir / "rotation.csv", header, rows)
    return {"rotation": str(out_dir / "rotation.csv")}


# ---------------------------------------------------------------------------
# bottleneck-weight sweep
# ---------------------------------------------------------------------------


def run_beta(out_dir, overrides: dict | None = None) -> dict:
    """Sweep the bottleneck weight on regime-i data plus a deterministic reference."""
    cfg = resolve_config(overrides)
    out_dir = Path(out_dir)
    rows = []
    for seed in cfg["seeds"]:
        seed_dir = out_dir / f"seed_{seed}"
        test_dir = seed_dir / "data_test"
        if not (test_dir / "manifest.json").exists():
            gen_data(test_dir, cfg, "rotation_test", _data_seed(seed, 9))
        test_ds = load_dataset(test_dir)
        geom = dataset_geometry(test_ds)
        train_dir = seed_dir / "data_train"
        if not (train_dir / "manifest.json").exists():
            gen_data(train_dir, cfg, "rotation_i", _data_seed(seed, 1))
        train_ds = load_dataset(train_dir)
        for beta in cfg["betas"]:
            mc = model_config(cfg, train_ds.dims, "svs-stoch", beta=beta)
            model = _train_variant(seed_dir / f"beta_{beta:g}", train_ds.cases, mc,
                                   train_config(cfg, seed))
            _eval_over_angles(model, geom, test_ds, rows, [seed, f"{beta:g}"])
        mc = model_config(cfg, train_ds.dims, "svs-det")
        model = _train_variant(seed_dir / "det-ref", train_ds.cases, mc,
                               train_config(cfg, seed))
        _eval_over_angles(model, geom, test_ds, rows, [seed, "det"])

    rows += median_over_seeds(rows, slice(1, 3), slice(3, 11))
    header = (["seed", "beta", "angle"]
              + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")])
    write_long_csv(out_dir / "beta_sweep.csv", header, rows)
    return {"beta_sweep": str(out_dir / "beta_sweep.csv")}


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def _probe_cases(ds: Dataset, cfg: dict) -> list:
    train_cases = ds.split("train")
    n = min(cfg["n_probes"], len(train_cases))
    return train_cases[-n:]


def run_diagnose(out_dir, checkpoints: dict, data_dir, overrides: dict | None = None) -> dict:
    """Gap, flatness, and expansion diagnostics for trained checkpoints.

    `checkpoints` maps a variant label to a checkpoint directory.  Probe
    latents come from held-out cases of the dataset's training split; the
    shifted splits are every non-train split in the dataset.
    """
    cfg = resolve_config(overrides)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(data_dir)
    probes = _probe_cases(ds, cfg)
    shifted_tags = [t for t in ds.split_tags() if t != "train"]

    report: dict = {"variants": {}, "oracle_sweep": [], "probe_case_ids":
                    [c.case_id for c in probes]}
    for label, ckpt_dir in checkpoints.items():
        model = load_model(ckpt_dir)
        gaps = []
        for tag in shifted_tags:
            for g in theory.generalization_gap(model, probes, ds.split(tag)):
                gaps.append({"shifted_split": tag, "error_fn": g.error_fn,
                             "val_error": g.val_error, "shifted_error": g.shifted_error,
                             "gap": g.gap, "n_val_excluded": g.n_val_excluded,
                             "n_shifted_excluded": g.n_shifted_excluded,
                             "note": "shifted mean approximates the true-measure expectation"})
        var = theory.variation_proxy(model, probes, h=cfg["fd_step"])
        t0, s0, x0 = theory.encoder_probes(model, probes[:1])[0]
        taylor = theory.taylor_probe(model, x0, t0, s0, cfg["taylor_n_mc"],
                                     np.random.default_rng(12345), h=cfg["fd_step"])
        report["variants"][label] = {
            "gap": gaps,
            "variation": var.__dict__,
            "taylor": taylor.__dict__,
        }

    sweep = theory.oracle_sweep()
    report["oracle_sweep"] = [r.__dict__ for r in sweep]
    report["oracle_bound_ok"] = all(r.bound_holds() for r in sweep)
    path = out_dir / "theory_report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"theory_report": str(path)}
