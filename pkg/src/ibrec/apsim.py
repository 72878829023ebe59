"""Two-variable action-potential simulator and case sampling for the dataset splits.

Dynamics on the lattice heart (explicit Euler, graph Laplacian coupling):

    du/dt = D * L(u) - k*u*(u - a)*(u - 1) - u*v + stimulus
    dv/dt = (eps0 + mu1*v/(u + mu2)) * (-v - k*u*(u - a - 1))

`a` is the per-node excitability threshold from the tissue map; a raised
threshold inside the scar suppresses excitation there.  A single
suprathreshold current stimulus is injected at one node at the start of the
run.  The integrator dumps every `subsample`-th step, giving T output frames.

Difficulty splits: scar centers and excitation origins are drawn from pools
of lattice nodes.  Training pools sit in fixed bands; "Low"-shift test pools
are the nodes exactly one lattice step outside a training pool, "High"-shift
pools are all nodes at least `dist_high` steps from every training pool
member.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import Geometry, TissueMap, build_tissue_map

DIST_LOW = 1
DIST_HIGH = 3

SPLIT_TRAIN = "train"
DIFFICULTY_SPLITS = ("scarL_excL", "scarL_excH", "scarH_excL", "scarH_excH")


def angle_split(rotation_deg: float) -> str:
    return f"angle:{int(round(rotation_deg)):+d}"


class StabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    k: float = 8.0
    a_healthy: float = 0.15
    a_scar: float = 0.5
    eps0: float = 0.002
    mu1: float = 0.2
    mu2: float = 0.3
    D: float = 0.1
    dt: float = 0.0125
    n_steps: int = 6400
    subsample: int = 100
    stim_amplitude: float = 2.5
    stim_duration_steps: int = 8

    @property
    def n_frames(self) -> int:
        return self.n_steps // self.subsample

    def validate(self):
        if self.dt <= 0 or self.dt > 0.05:
            raise ValueError(f"dt must be in (0, 0.05], got {self.dt}")
        if self.subsample < 1 or self.n_steps % self.subsample:
            raise ValueError("n_steps must be a positive multiple of subsample")
        if self.n_frames < 2:
            raise ValueError("need at least 2 output frames")


@dataclass(frozen=True)
class TmpSequence:
    values: np.ndarray  # (U, T)


@dataclass(frozen=True)
class EcgSequence:
    values: np.ndarray  # (M, T)
    snr_db: float | None = None


@dataclass(frozen=True)
class CaseMeta:
    scar_center: int
    scar_radius: int
    exc_node: int
    rotation_deg: float
    difficulty_tag: str
    rng_seed: int


@njit(cache=True)
def _integrate(a_map, exc_node, nbr_idx, nbr_cnt, k, eps0, mu1, mu2, D, dt,
               n_steps, subsample, stim_amplitude, stim_steps):
    n = a_map.shape[0]
    n_frames = n_steps // subsample
    u = np.zeros(n)
    v = np.zeros(n)
    du = np.empty(n)
    out = np.empty((n, n_frames))
    frame = 0
    for step in range(n_steps):
        for i in range(n):
            coupling = -nbr_cnt[i] * u[i]
            for q in range(nbr_cnt[i]):
                coupling += u[nbr_idx[i, q]]
            du[i] = (D * coupling
                     - k * u[i] * (u[i] - a_map[i]) * (u[i] - 1.0)
                     - u[i] * v[i])
        if step < stim_steps:
            du[exc_node] += stim_amplitude
        for i in range(n):
            dv = (eps0 + mu1 * v[i] / (u[i] + mu2)) * (
                -v[i] - k * u[i] * (u[i] - a_map[i] - 1.0))
            v[i] = v[i] + dt * dv
            u[i] = u[i] + dt * du[i]
            if abs(u[i]) > 2.0:
                return out, step
        if (step + 1) % subsample == 0:
            for i in range(n):
                out[i, frame] = u[i]
            frame += 1
    return out, -1


def _neighbor_table(geom: Geometry):
    n = geom.n_nodes
    idx = np.zeros((n, 4), dtype=np.int64)
    cnt = np.zeros(n, dtype=np.int64)
    for i, nbrs in enumerate(geom.adjacency):
        for j in nbrs:
            idx[i, cnt[i]] = j
            cnt[i] += 1
    return idx, cnt


def simulate_tmp(geom: Geometry, tissue: TissueMap, exc_node: int, cfg: SimConfig) -> TmpSequence:
    """Integrate the excitation wave started at `exc_node`; returns U x T frames."""
    cfg.validate()
    if not 0 <= exc_node < geom.n_nodes:
        raise ValueError(f"exc_node {exc_node} out of range")
    if tissue.scar_mask[exc_node]:
        raise ValueError(f"stimulus node {exc_node} lies inside the scar")
    nbr_idx, nbr_cnt = _neighbor_table(geom)
    frames, blowup_step = _integrate(
        tissue.excitability.astype(np.float64), exc_node, nbr_idx, nbr_cnt,
        cfg.k, cfg.eps0, cfg.mu1, cfg.mu2, cfg.D, cfg.dt,
        cfg.n_steps, cfg.subsample, cfg.stim_amplitude, cfg.stim_duration_steps)
    if blowup_step >= 0:
        raise StabilityError(f"|u| exceeded 2 at integration step {blowup_step}")
    overshoot = 0.05  # allowed excursion outside the nominal [0, 1] range
    if not np.all(np.isfinite(frames)):
        raise StabilityError("non-finite values in the integrated sequence")
    if frames.min() < -overshoot or frames.max() > 1.0 + overshoot:
        raise StabilityError(
            f"sequence left [{-overshoot}, {1 + overshoot}]: min {frames.min():.4f}, max {frames.max():.4f}")
    return TmpSequence(values=frames)


def project(op, x: TmpSequence) -> EcgSequence:
    """Clean surface potentials y = H x, columnwise over time."""
    H = op.H
    if H.shape[1] != x.values.shape[0]:
        raise ValueError(f"operator expects {H.shape[1]} nodes, sequence has {x.values.shape[0]}")
    return EcgSequence(values=H @ x.values, snr_db=None)


def add_noise(y: EcgSequence, snr_db: float, rng_seed: int) -> EcgSequence:
    """Add i.i.d. Gaussian noise scaled to the requested SNR relative to mean signal power."""
    power = float(np.mean(y.values.astype(np.float64) ** 2))
    if power == 0.0:
        raise ValueError("SNR undefined for an all-zero signal")
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite; use project() for clean signals")
    sigma = np.sqrt(power * 10.0 ** (-snr_db / 10.0))
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed) & 0xFFFFFFFFFFFFFFFF, 1]))
    noisy = y.values + sigma * rng.standard_normal(y.values.shape)
    return EcgSequence(values=noisy, snr_db=float(snr_db))


# ---------------------------------------------------------------------------
# case sampling
# ---------------------------------------------------------------------------


def _min_pool_distance(geom: Geometry, node: int, pool) -> int:
    from .geometry import lattice_distance
    return min(lattice_distance(geom, node, p) for p in pool)


def split_pools(geom: Geometry) -> dict:
    """Node pools per varied parameter.

    Training scars sit on the two extreme columns and training excitation
    origins on the two extreme rows, so High-shift test pools (at least
    DIST_HIGH lattice steps from every training member) land midway between
    the training modes: shifted cases probe interpolation across the gap
    rather than extrapolation off the lattice.  Low-shift pools are the nodes
    exactly one step outside a training band.
    """
    xy = geom.lattice_xy
    nodes = np.arange(geom.n_nodes)

    def band(coord, values):
        return [int(n) for n in nodes if xy[n][coord] in values]

    train_scar = band(0, (0, geom.nx - 1))
    train_exc = band(1, (0, geom.ny - 1))

    def low_pool(train_pool):
        return [int(n) for n in nodes if n not in set(train_pool)
                and _min_pool_distance(geom, int(n), train_pool) <= DIST_LOW]

    def high_pool(train_pool):
        return [int(n) for n in nodes
                if _min_pool_distance(geom, int(n), train_pool) >= DIST_HIGH]

    pools = {
        "scar": {"train": train_scar, "low": low_pool(train_scar), "high": high_pool(train_scar)},
        "exc": {"train": train_exc, "low": low_pool(train_exc), "high": high_pool(train_exc)},
    }
    for group, sub in pools.items():
        for level, pool in sub.items():
            if not pool:
                raise ValueError(f"empty {group}/{level} pool; grid too small for the shift bands")
    return pools


def sample_case(rng_seed: int, split: str, geom: Geometry, cfg: SimConfig,
                rotation_deg: float = 0.0, scar_radius: int = 2):
    """Draw (tissue map, excitation node, meta) for one case, deterministically in the seed."""
    pools = split_pools(geom)
    if split == SPLIT_TRAIN or split.startswith("angle:"):
        scar_level, exc_level = "train", "train"
    elif split in DIFFICULTY_SPLITS:
        scar_level = "low" if split[4] == "L" else "high"
        exc_level = "low" if split[-1] == "L" else "high"
    else:
        raise ValueError(f"unknown split {split!r}")

    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed) & 0xFFFFFFFFFFFFFFFF, 0]))
    scar_center = int(rng.choice(pools["scar"][scar_level]))
    tissue = build_tissue_map(geom, scar_center, scar_radius, cfg.a_healthy, cfg.a_scar)
    exc_pool = [n for n in pools["exc"][exc_level] if not tissue.scar_mask[n]]
    if not exc_pool:
        raise ValueError(f"scar at node {scar_center} covers the whole {exc_level} excitation pool")
    exc_node = int(rng.choice(exc_pool))
    meta = CaseMeta(scar_center=scar_center, scar_radius=scar_radius, exc_node=exc_node,
                    rotation_deg=float(rotation_deg), difficulty_tag=split,
                    rng_seed=int(rng_seed))
    return tissue, exc_node, meta
