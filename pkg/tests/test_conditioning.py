import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowgrad.conditioning import (
    ConditioningSeries, cadence_taus, interp, interp_derivative, load_series, month_of,
    save_series, series_deltas, telescoped_sum,
)
from flowgrad.core import ContractError, GridMeta, RangeError

TWO = ConditioningSeries([16.0, 46.5], [[300.0], [303.0]], (1,))
# evenly spaced stand-ins for mid-month nodes; every gap stays below 31 days
MID_MONTH = [16.0 + 30.4 * k for k in range(12)]


@pytest.fixture
def sst():
    """Twelve mid-month nodes of SST-like values on a 2x3 grid."""
    rng = np.random.default_rng(0)
    vals = 290.0 + 10.0 * rng.random((12, 6))
    return ConditioningSeries(MID_MONTH, vals, (2, 3), GridMeta(2, 3, (-30.0, 30.0)))


def test_hand_example():
    assert np.asarray(interp(TWO, 31.25))[0] == pytest.approx(301.5, rel=1e-15)
    assert np.asarray(interp_derivative(TWO, 20.0))[0] == pytest.approx(3 / 30.5, rel=1e-15)


def test_nodes_bit_exact(sst):
    for t, row in zip(sst.taus, sst.values):
        assert np.array_equal(np.asarray(interp(sst, t)), row)


@given(st.integers(0, 10), st.floats(0.0, 1.0))
def test_linear_on_segments(i, lam):
    rng = np.random.default_rng(i)
    vals = 290.0 + 10.0 * rng.random((12, 6))
    s = ConditioningSeries(MID_MONTH, vals, (6,))
    t0, t1 = s.taus[i], s.taus[i + 1]
    tau = (1 - lam) * t0 + lam * t1
    lam_eff = (tau - t0) / (t1 - t0)
    expected = (1 - lam_eff) * vals[i] + lam_eff * vals[i + 1]
    assert np.allclose(np.asarray(interp(s, tau)), expected, rtol=1e-15, atol=0)


def test_midpoint_is_average(sst):
    for i in range(11):
        mid = 0.5 * (sst.taus[i] + sst.taus[i + 1])
        avg = 0.5 * (sst.values[i] + sst.values[i + 1])
        assert np.allclose(np.asarray(interp(sst, mid)), avg, rtol=1e-15, atol=0)


def test_derivative_piecewise(sst):
    node = sst.taus[1]
    left = np.asarray(interp_derivative(sst, node - 1e-6))
    right = np.asarray(interp_derivative(sst, node + 1e-6))
    at = np.asarray(interp_derivative(sst, node))
    assert np.array_equal(at, right) and not np.array_equal(left, right)
    # the last node keeps the final segment's slope
    assert np.array_equal(np.asarray(interp_derivative(sst, sst.taus[-1])), np.asarray(interp_derivative(sst, sst.taus[-1] - 1.0)))


def test_constant_series_has_zero_slope():
    s = ConditioningSeries([0.0, 10.0, 20.0], np.full((3, 2), 5.0), (2,))
    assert not np.asarray(interp_derivative(s, 12.3)).any()


def test_cadence_step():
    taus = cadence_taus(16.0, 76.0)
    deltas = series_deltas(ConditioningSeries([16.0, 46.0, 76.0], [[1.0], [2.0], [4.0]], (1,)), taus)
    assert all(dt == pytest.approx(169 / 24, rel=1e-15) for _, dt in deltas)
    assert len(taus) == 9 and len(deltas) == 8


def test_repeated_tau_gives_zero_delta(sst):
    (dc, dt), = series_deltas(sst, [100.0, 100.0])
    assert dt == 0.0 and not np.asarray(dc).any()


def test_within_segment_delta_is_slope_times_step():
    s = ConditioningSeries([0.0, 16.0], [[1.0, 2.0], [3.0, 10.0]], (2,))
    (dc, dt), = series_deltas(s, [2.0, 6.0])
    assert np.array_equal(np.asarray(dc), np.asarray(interp_derivative(s, 3.0)) * dt)


def test_telescoping_exact(sst):
    taus = cadence_taus(sst.taus[0], sst.taus[-1], 169.0)
    deltas = series_deltas(sst, taus)
    total = telescoped_sum(deltas)
    assert np.array_equal(total, np.asarray(interp(sst, taus[-1])) - np.asarray(interp(sst, taus[0])))


def test_range_and_contract_errors(sst):
    with pytest.raises(RangeError):
        interp(sst, 15.9)
    with pytest.raises(RangeError):
        interp_derivative(sst, sst.taus[-1] + 0.1)
    with pytest.raises(ContractError):
        series_deltas(sst, [50.0, 40.0])
    with pytest.raises(ContractError):
        ConditioningSeries([0.0, 31.0], [[1.0], [2.0]], (1,))
    with pytest.raises(ContractError):
        ConditioningSeries([0.0, 0.0], [[1.0], [2.0]], (1,))
    with pytest.raises(ContractError):
        ConditioningSeries([0.0], [[1.0]], (1,))


def test_month_of():
    assert [month_of(t) for t in (1.5, 31.99, 32.0, 59.5, 60.0, 350.5, 366.0)] == [0, 0, 1, 1, 2, 11, 0]
    mid = [16.0, 46.0, 75.0, 106.0, 136.0, 167.0, 197.0, 228.0, 259.0, 289.0, 320.0, 350.0]
    assert [month_of(t) for t in mid] == list(range(12))


def test_csv_roundtrip(tmp_path, sst):
    path = tmp_path / "sst.csv"
    save_series(path, sst)
    assert json.loads((tmp_path / "sst.csv.json").read_text())["shape"] == [2, 3]
    back = load_series(path)
    assert np.array_equal(back.values, sst.values) and np.array_equal(back.taus, sst.taus)
    assert back.grid.lats == (-30.0, 30.0)
