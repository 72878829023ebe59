import csv

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ibrec.metrics import (MetricError, activation_time, aggregate, at_corr,
                           case_metrics, dice, mse, pearson_corr, scar_from_tmp,
                           write_metrics_csv)


def test_mse_zero_on_equal():
    x = np.random.default_rng(0).random((4, 5))
    assert mse(x, x.copy()) == 0.0


def test_mse_hand_value():
    assert mse(np.ones((2, 2)), np.zeros((2, 2))) == 1.0


def test_mse_permutation_invariant():
    rng = np.random.default_rng(1)
    x = rng.random(12)
    x_hat = rng.random(12)
    perm = rng.permutation(12)
    assert mse(x, x_hat) == pytest.approx(mse(x[perm], x_hat[perm]), rel=1e-12)


def test_mse_shape_mismatch():
    with pytest.raises(MetricError):
        mse(np.zeros((2, 2)), np.zeros((2, 3)))


def test_pearson_basic():
    assert pearson_corr(np.array([1.0, 2, 3]), np.array([1.0, 2, 3])) == pytest.approx(1.0)
    assert pearson_corr(np.array([1.0, 2, 3]), np.array([3.0, 2, 1])) == pytest.approx(-1.0)
    assert pearson_corr(np.array([1.0, 2, 3]), np.array([1.0, 2, 4])) == pytest.approx(0.98198, abs=1e-5)


def test_pearson_zero_variance_rejected():
    with pytest.raises(MetricError):
        pearson_corr(np.ones(4), np.arange(4.0))


@given(scale=st.floats(0.1, 50.0), shift=st.floats(-100.0, 100.0))
@settings(max_examples=40, deadline=None)
def test_pearson_affine_invariance(scale, shift):
    rng = np.random.default_rng(7)
    x = rng.random(20)
    y = rng.random(20)
    base = pearson_corr(x, y)
    assert pearson_corr(scale * x + shift, y) == pytest.approx(base, abs=1e-9)


def test_activation_time_hand_trace():
    trace = np.array([[0, 0, 0, 0, 0, 0.1, 0.9, 1, 1]], dtype=float)
    at, const = activation_time(trace)
    assert at[0] == 6
    assert not const[0]


def test_activation_time_step_function():
    for k in (1, 3, 7):
        trace = np.zeros((1, 9))
        trace[0, k:] = 1.0
        at, _ = activation_time(trace)
        assert at[0] == k


def test_activation_time_constant_trace():
    at, const = activation_time(np.full((2, 6), 0.3))
    npt.assert_array_equal(at, [0, 0])
    assert const.all()


def test_at_corr_identity_and_shift():
    rng = np.random.default_rng(3)
    x = np.zeros((6, 20))
    for j in range(6):
        k = 2 + 2 * j
        x[j, k:] = 1.0
    assert at_corr(x, x.copy()) == pytest.approx(1.0)
    shifted = np.zeros_like(x)
    shifted[:, 3:] = x[:, :-3]  # constant delay on every node
    assert at_corr(x, shifted) == pytest.approx(1.0)


def test_at_corr_time_reversal_strongly_negative():
    from ibrec.apsim import SimConfig, simulate_tmp
    from ibrec.geometry import build_grid, build_tissue_map
    geom = build_grid(8, 8, 8, 7.0)
    cfg = SimConfig()
    tissue = build_tissue_map(geom, 63, 0, cfg.a_healthy, cfg.a_scar)
    x = simulate_tmp(geom, tissue, 0, cfg).values
    assert at_corr(x, x[:, ::-1]) < -0.5


def test_scar_rule_identical_traces_empty():
    x = np.tile(np.linspace(0, 1, 10), (5, 1))
    assert scar_from_tmp(x) == set()


def test_scar_rule_all_zero_empty():
    assert scar_from_tmp(np.zeros((4, 6))) == set()


def test_scar_rule_short_duration_detected():
    x = np.zeros((4, 10))
    x[:3, 2:9] = 1.0   # three healthy nodes active 7 frames
    x[3, 2:3] = 1.0    # scar node active 1 frame
    assert scar_from_tmp(x) == {3}


def test_scar_rule_recovers_simulated_scar():
    from ibrec.apsim import SimConfig, simulate_tmp
    from ibrec.geometry import build_grid, build_tissue_map
    geom = build_grid(8, 8, 8, 7.0)
    cfg = SimConfig()
    tissue = build_tissue_map(geom, 3 * 8 + 4, 2, cfg.a_healthy, cfg.a_scar)
    x = simulate_tmp(geom, tissue, 0, cfg).values
    detected = scar_from_tmp(x)
    truth = {int(i) for i in np.nonzero(tissue.scar_mask)[0]}
    assert dice(detected, truth) >= 0.8


def test_dice_conventions():
    assert dice(set(), set()) == 1.0
    assert dice({1}, set()) == 0.0
    assert dice(set(), {2}) == 0.0
    assert dice({1, 2}, {3, 4}) == 0.0
    assert dice({1, 2, 3}, {2, 3, 4}) == pytest.approx(2 * 2 / 6)
    assert dice({1, 2}, {1, 2}) == 1.0


@given(st.sets(st.integers(0, 30)), st.sets(st.integers(0, 30)))
@settings(max_examples=60, deadline=None)
def test_dice_symmetric_and_bounded(a, b):
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


def test_case_metrics_and_aggregate():
    rng = np.random.default_rng(5)
    x = rng.random((6, 8))
    rec1 = case_metrics(0, "train", x, x + 0.01 * rng.random((6, 8)), np.zeros(6, bool))
    rec2 = case_metrics(1, "train", x, x + 0.10 * rng.random((6, 8)), np.zeros(6, bool))
    agg = aggregate([rec1, rec2])
    assert agg["n_cases"] == 2
    assert agg["mse"]["mean"] == pytest.approx((rec1.mse + rec2.mse) / 2)


def test_case_metrics_flags_constant_trace():
    x = np.zeros((3, 5))
    x[0, 2:] = 1.0
    rec = case_metrics(0, "s", x, np.zeros((3, 5)), np.zeros(3, bool))
    assert rec.at_corr is None
    assert any("at_corr" in f for f in rec.quality_flags)
    assert rec.mse is not None


def test_metrics_csv_layout(tmp_path):
    rng = np.random.default_rng(6)
    x = rng.random((4, 6))
    records = [case_metrics(i, "train", x, x + 0.01 * i, np.zeros(4, bool))
               for i in range(3)]
    path = write_metrics_csv(tmp_path / "m.csv", records, {"train": aggregate(records)})
    rows = list(csv.reader(path.read_text().splitlines()))
    assert rows[0] == ["case_id", "split", "mse", "tmp_corr", "at_corr", "dice",
                       "quality_flags"]
    assert len(rows) == 1 + 3 + 2
    assert rows[4][0] == "AGG:train" and rows[5][0] == "AGG:train"
    assert rows[4][6].startswith("mean")
    assert rows[5][6] == "std"
