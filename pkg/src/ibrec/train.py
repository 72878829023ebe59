"""Training loop: seeded splits, minibatching, Adam, patience-based early stopping.

Measurements are standardized per lead with statistics of the training split;
the statistics travel with the checkpoint so evaluation applies the same
transform.  The returned parameters are the snapshot from the epoch with the
best validation loss.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from . import vib
from .metrics import aggregate, case_metrics
from .tensor import ParamStore, Tape
from .vib import ModelConfig

EVAL_EPS_SEED = 0x0EA1  # fixed draw stream for validation of stochastic objectives


@dataclass
class TrainReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = -1
    wall_time_sec: float = 0.0
    checkpoint_path: str = ""

    def to_json_dict(self) -> dict:
        # wall time is intentionally left out: serialized reports must be
        # byte-identical across reruns with the same config and seed
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_epoch": self.best_epoch,
            "checkpoint_path": self.checkpoint_path,
        }


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 300
    patience: int = 20
    val_fraction: float = 0.15
    seed: int = 0

    def validate(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be >= 1")


@dataclass
class Model:
    """A trained (or loading) model bundle: config, parameters, input statistics."""
    cfg: ModelConfig
    params: ParamStore
    lead_mean: np.ndarray
    lead_std: np.ndarray

    def standardize(self, y: np.ndarray) -> np.ndarray:
        return (y - self.lead_mean[:, None]) / self.lead_std[:, None]


def lead_statistics(cases: list) -> tuple:
    """Per-lead mean and std over all frames of the given cases."""
    stacked = np.concatenate([c.y for c in cases], axis=1).astype(np.float64)
    mean = stacked.mean(axis=1)
    std = np.maximum(stacked.std(axis=1), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def _case_loss(model: Model, xs: np.ndarray, ys: np.ndarray, rng) -> tn.Tensor:
    if model.cfg.stochastic:
        return vib.loss_ib(xs, ys, model.params, model.cfg, rng)
    return vib.loss_deterministic(xs, ys, model.params, model.cfg)


def evaluate_loss(cases: list, model: Model, eps_seed: int = EVAL_EPS_SEED) -> float:
    """Mean per-case objective over a split, with a fixed noise-draw stream.

    Batched objectives sum over the batch, so the split mean is the summed
    total divided by the case count.
    """
    if not cases:
        raise ValueError("cannot evaluate an empty split")
    total = 0.0
    rng = np.random.default_rng(eps_seed)
    for chunk in _chunks(cases, 64):
        xs = np.stack([c.x for c in chunk]).astype(np.float32)
        ys = np.stack([model.standardize(c.y) for c in chunk]).astype(np.float32)
        total += _case_loss(model, xs, ys, rng).item()
    return total / len(cases)


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def train(cases: list, model_cfg: ModelConfig, train_cfg: TrainConfig,
          out_dir=None) -> tuple:
    """Fit one model variant; returns (Model, TrainReport).

    When `out_dir` is given, writes `checkpoint/` (model.json + params.bin)
    and `report.json` there.
    """
    model_cfg.validate()
    train_cfg.validate()
    if not cases:
        raise ValueError("training requires a nonempty dataset")
    start = time.monotonic()

    rng = np.random.default_rng(train_cfg.seed)
    order = rng.permutation(len(cases))
    n_val = max(1, int(round(train_cfg.val_fraction * len(cases))))
    if n_val >= len(cases):
        raise ValueError("validation split swallows the whole dataset")
    val_cases = [cases[i] for i in order[:n_val]]
    fit_cases = [cases[i] for i in order[n_val:]]

    lead_mean, lead_std = lead_statistics(fit_cases)
    params = vib.build_params(model_cfg, rng)
    model = Model(cfg=model_cfg, params=params, lead_mean=lead_mean, lead_std=lead_std)

    xs_all = np.stack([c.x for c in fit_cases]).astype(np.float32)
    ys_all = np.stack([model.standardize(c.y) for c in fit_cases]).astype(np.float32)

    report = TrainReport()
    best_val = np.inf
    best_values = params.copy_values()
    stall = 0
    for epoch in range(train_cfg.max_epochs):
        perm = rng.permutation(len(fit_cases))
        epoch_loss = 0.0
        for bi, batch_idx in enumerate(_chunks(perm, train_cfg.batch_size)):
            xs = xs_all[batch_idx]
            ys = ys_all[batch_idx]
            with Tape():
                loss = _case_loss(model, xs, ys, rng)
                loss = tn.mul(loss, tn.Tensor(np.asarray(1.0 / len(batch_idx), np.float32)))
                value = loss.item()
                if not np.isfinite(value):
                    raise RuntimeError(
                        f"non-finite training loss at epoch {epoch}, batch {bi}")
                tn.backward(loss)
            tn.adam_step(params, lr=train_cfg.lr)
            epoch_loss += value * len(batch_idx)
        report.train_losses.append(epoch_loss / len(fit_cases))

        val_loss = evaluate_loss(val_cases, model)
        if not np.isfinite(val_loss):
            raise RuntimeError(f"non-finite validation loss at epoch {epoch}")
        report.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            report.best_epoch = epoch
            best_values = params.copy_values()
            stall = 0
        else:
            stall += 1
            if stall >= train_cfg.patience:
                break

    params.load_values(best_values)
    report.wall_time_sec = time.monotonic() - start

    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoint"
        save_model(ckpt_dir, model)
        report.checkpoint_path = "checkpoint"
        (out_dir / "report.json").write_text(
            json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    return model, report


def save_model(directory, model: Model):
    config = {
        "model": model.cfg.to_dict(),
        "input_stats": {
            "lead_mean": [float(v) for v in model.lead_mean],
            "lead_std": [float(v) for v in model.lead_std],
        },
    }
    tn.save_checkpoint(directory, model.params, config)


def load_model(directory) -> Model:
    config, params = tn.load_checkpoint(directory)
    cfg = ModelConfig(**config["model"])
    stats = config["input_stats"]
    return Model(cfg=cfg, params=params,
                 lead_mean=np.asarray(stats["lead_mean"], dtype=np.float32),
                 lead_std=np.asarray(stats["lead_std"], dtype=np.float32))


def scar_mask_from_meta(geom, meta) -> np.ndarray:
    """Rebuild a case's ground-truth scar mask from its meta and the geometry."""
    from .geometry import lattice_distance
    return np.array([lattice_distance(geom, meta.scar_center, j) <= meta.scar_radius
                     for j in range(geom.n_nodes)])


def evaluate_split(cases: list, model: Model, geom, split_name: str | None = None) -> tuple:
    """Reconstruct a split and score all four metrics per case.

    Returns (records, aggregate dict).
    """
    if not cases:
        raise ValueError("cannot evaluate an empty split")
    records = []
    for chunk in _chunks(cases, 64):
        ys = np.stack([model.standardize(c.y) for c in chunk]).astype(np.float32)
        recon = vib.reconstruct_batch(ys, model.params, model.cfg)
        for c, x_hat in zip(chunk, recon):
            mask = scar_mask_from_meta(geom, c.meta)
            records.append(case_metrics(c.case_id, split_name or c.meta.difficulty_tag,
                                         c.x, x_hat, mask))
    return records, aggregate(records)
