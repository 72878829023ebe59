"""Dataset directory format: manifest.json plus one binary file per case.

Case file layout (all integers little-endian):

    magic  b"IBRC"
    u32    version = 1
    u32    U, u32 M, u32 T
    f32    x  row-major (U, T)
    f32    y  row-major (M, T)
    u32    meta_len
    bytes  CaseMeta JSON (UTF-8)

Per-case seed is ``base_seed XOR case_index`` so regeneration is
order-independent and bit-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .apsim import (CaseMeta, SimConfig, add_noise, project, sample_case,
                    simulate_tmp, DIST_HIGH, DIST_LOW)
from .geometry import Geometry, build_forward_operator, build_grid

CASE_MAGIC = b"IBRC"
CASE_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
DEFAULT_SNR_DB = 40.0


@dataclass(frozen=True)
class Case:
    x: np.ndarray          # (U, T) float32
    y: np.ndarray          # (M, T) float32
    meta: CaseMeta
    case_id: int


@dataclass
class Dataset:
    directory: Path
    manifest: dict
    cases: list

    @property
    def dims(self):
        d = self.manifest["dims"]
        return d["U"], d["M"], d["T"]

    def split(self, tag: str) -> list:
        return [c for c in self.cases if c.meta.difficulty_tag == tag]

    def split_tags(self) -> list:
        seen = []
        for c in self.cases:
            if c.meta.difficulty_tag not in seen:
                seen.append(c.meta.difficulty_tag)
        return seen


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def write_case(path: Path, x: np.ndarray, y: np.ndarray, meta: CaseMeta):
    U, T = x.shape
    M, T2 = y.shape
    if T != T2:
        raise ValueError("x and y disagree on the number of frames")
    meta_blob = _json_bytes(asdict(meta))
    with open(path, "wb") as fh:
        fh.write(CASE_MAGIC)
        fh.write(struct.pack("<IIII", CASE_FORMAT_VERSION, U, M, T))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(y, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)


def read_case(path: Path, case_id: int) -> Case:
    raw = Path(path).read_bytes()
    if raw[:4] != CASE_MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, U, M, T = struct.unpack_from("<IIII", raw, 4)
    if version != CASE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported case format {version}")
    off = 20
    x = np.frombuffer(raw, dtype="<f4", count=U * T, offset=off).reshape(U, T)
    off += 4 * U * T
    y = np.frombuffer(raw, dtype="<f4", count=M * T, offset=off).reshape(M, T)
    off += 4 * M * T
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = CaseMeta(**json.loads(raw[off:off + meta_len].decode("utf-8")))
    return Case(x=x.copy(), y=y.copy(), meta=meta, case_id=case_id)


def generate_dataset(out_dir, geom: Geometry, cfg: SimConfig, split_plan: list,
                     base_seed: int, snr_db: float = DEFAULT_SNR_DB,
                     scar_radius: int = 2) -> Path:
    """Simulate every case in `split_plan` = [(tag, count, rotation_deg), ...].

    Writes cases/case_<id>.bin plus a manifest recording the full plan, the
    dims, the simulator configuration, and the shift-band definitions.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    case_dir = out_dir / "cases"
    case_dir.mkdir(parents=True, exist_ok=True)

    operators = {}
    entries = []
    case_index = 0
    for tag, count, rotation_deg in split_plan:
        if count < 1:
            raise ValueError(f"split {tag!r} requests {count} cases")
        ids = []
        for _ in range(count):
            seed = (int(base_seed) ^ case_index) & 0xFFFFFFFFFFFFFFFF
            tissue, exc_node, meta = sample_case(seed, tag, geom, cfg,
                                                 rotation_deg=rotation_deg,
                                                 scar_radius=scar_radius)
            try:
                x = simulate_tmp(geom, tissue, exc_node, cfg)
            except Exception as err:
                raise RuntimeError(f"case {case_index} ({tag}) failed: {err}") from err
            key = round(float(rotation_deg), 9)
            if key not in operators:
                operators[key] = build_forward_operator(geom, rotation_deg)
            y = add_noise(project(operators[key], x), snr_db, seed)
            write_case(case_dir / f"case_{case_index:05d}.bin", x.values, y.values, meta)
            ids.append(case_index)
            case_index += 1
        entries.append({"tag": tag, "count": int(count),
                        "rotation_deg": float(rotation_deg), "case_ids": ids})

    manifest = {
        "format_version": CASE_FORMAT_VERSION,
        "dims": {"U": geom.n_nodes, "M": geom.n_leads, "T": cfg.n_frames},
        "geometry": {"nx": geom.nx, "ny": geom.ny, "lead_count": geom.n_leads,
                     "ring_radius": geom.ring_radius},
        "sim_config": asdict(cfg),
        "split_plan": entries,
        "base_seed": int(base_seed),
        "snr_db": float(snr_db),
        "scar_radius": int(scar_radius),
        "shift_bands": {"dist_low": DIST_LOW, "dist_high": DIST_HIGH},
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out_dir


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text(encoding="utf-8"))
    cases = []
    for entry in manifest["split_plan"]:
        for cid in entry["case_ids"]:
            cases.append(read_case(directory / "cases" / f"case_{cid:05d}.bin", cid))
    cases.sort(key=lambda c: c.case_id)
    return Dataset(directory=directory, manifest=manifest, cases=cases)


def dataset_geometry(ds: Dataset) -> Geometry:
    g = ds.manifest["geometry"]
    return build_grid(g["nx"], g["ny"], g["lead_count"], g["ring_radius"])


def dataset_sim_config(ds: Dataset) -> SimConfig:
    return SimConfig(**ds.manifest["sim_config"])
