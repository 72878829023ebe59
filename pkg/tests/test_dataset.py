import json
import struct

import numpy as np
import numpy.testing as npt
import pytest

from ibrec.apsim import CaseMeta, SimConfig
from ibrec.dataset import (CASE_MAGIC, dataset_geometry, dataset_sim_config,
                           generate_dataset, load_dataset, read_case, write_case)
from ibrec.geometry import build_grid


@pytest.fixture(scope="module")
def tiny_cfg():
    # short runs keep dataset tests quick; physics tests live in test_apsim
    return SimConfig(n_steps=800, subsample=100)


@pytest.fixture(scope="module")
def geom():
    return build_grid(8, 8, 8, 7.0)


def test_case_file_layout(tmp_path):
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    y = np.arange(12, dtype=np.float32).reshape(4, 3) * 0.5
    meta = CaseMeta(scar_center=1, scar_radius=2, exc_node=0, rotation_deg=0.0,
                    difficulty_tag="train", rng_seed=7)
    path = tmp_path / "case.bin"
    write_case(path, x, y, meta)
    raw = path.read_bytes()
    assert raw[:4] == CASE_MAGIC
    version, U, M, T = struct.unpack_from("<IIII", raw, 4)
    assert (version, U, M, T) == (1, 2, 4, 3)
    loaded = read_case(path, 0)
    npt.assert_array_equal(loaded.x, x)
    npt.assert_array_equal(loaded.y, y)
    assert loaded.meta == meta


def test_generate_counts_and_manifest(tmp_path, geom, tiny_cfg):
    out = generate_dataset(tmp_path / "ds", geom, tiny_cfg,
                           [("train", 10, 0.0)], base_seed=5)
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(list((out / "cases").glob("case_*.bin"))) == 10
    assert manifest["split_plan"][0]["count"] == 10
    assert manifest["dims"] == {"U": 64, "M": 8, "T": tiny_cfg.n_frames}
    ds = load_dataset(out)
    assert len(ds.cases) == 10
    assert all(c.meta.difficulty_tag == "train" for c in ds.cases)


def test_regeneration_bit_identical(tmp_path, geom, tiny_cfg):
    plan = [("train", 4, 0.0), ("scarL_excL", 2, 0.0)]
    a = generate_dataset(tmp_path / "a", geom, tiny_cfg, plan, base_seed=42)
    b = generate_dataset(tmp_path / "b", geom, tiny_cfg, plan, base_seed=42)
    for name in sorted(p.name for p in (a / "cases").iterdir()):
        assert (a / "cases" / name).read_bytes() == (b / "cases" / name).read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


def test_rotation_plan_tags(tmp_path, geom, tiny_cfg):
    out = generate_dataset(tmp_path / "rot", geom, tiny_cfg,
                           [("angle:+3", 5, 3.0)], base_seed=1)
    ds = load_dataset(out)
    assert len(ds.cases) == 5
    assert all(c.meta.rotation_deg == 3.0 for c in ds.cases)
    assert all(c.meta.difficulty_tag == "angle:+3" for c in ds.cases)


def test_noise_recorded_and_projection_noisy(tmp_path, geom, tiny_cfg):
    out = generate_dataset(tmp_path / "n", geom, tiny_cfg, [("train", 3, 0.0)],
                           base_seed=9, snr_db=10.0)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["snr_db"] == 10.0


def test_roundtrip_geometry_and_config(tmp_path, geom, tiny_cfg):
    out = generate_dataset(tmp_path / "g", geom, tiny_cfg, [("train", 2, 0.0)],
                           base_seed=3)
    ds = load_dataset(out)
    geom2 = dataset_geometry(ds)
    npt.assert_array_equal(geom2.heart_nodes, geom.heart_nodes)
    assert dataset_sim_config(ds) == tiny_cfg


def test_split_listing(tmp_path, geom, tiny_cfg):
    out = generate_dataset(tmp_path / "s", geom, tiny_cfg,
                           [("train", 3, 0.0), ("scarH_excH", 2, 0.0)], base_seed=8)
    ds = load_dataset(out)
    assert ds.split_tags() == ["train", "scarH_excH"]
    assert len(ds.split("scarH_excH")) == 2
    assert ds.split("missing") == []


def test_invalid_count_rejected(tmp_path, geom, tiny_cfg):
    with pytest.raises(ValueError):
        generate_dataset(tmp_path / "bad", geom, tiny_cfg, [("train", 0, 0.0)],
                         base_seed=1)
