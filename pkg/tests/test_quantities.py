import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from flowgrad.core import ConfigurationError, ContractError, GridMeta, StateVector
from flowgrad.quantities import QuantitySpec, evaluate, gradient

GRID = GridMeta(3, 4, (-45.0, 0.0, 60.0))
finite = st.floats(-1e3, 1e3, allow_nan=False)


def gridded(values):
    return StateVector(np.asarray(values, float).reshape(-1), (3, 4), GRID)


SPECS = [
    QuantitySpec("component", index=(1, 2)),
    QuantitySpec("patch_mean", mask=np.array([[0, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0]], bool)),
    QuantitySpec("weighted_global_mean"),
    QuantitySpec("weighted_global_mean", lat_weighted=True),
]


def test_patch_of_constant():
    spec = QuantitySpec("patch_mean", mask=np.ones(12, bool))
    assert evaluate(spec, gridded(np.full(12, 3.5))) == 3.5


def test_component_one_hot():
    x = np.zeros(12)
    x[7] = 2.25
    assert evaluate(QuantitySpec("component", index=7), x) == 2.25
    assert np.array_equal(np.asarray(gradient(QuantitySpec("component", index=7), x)), np.eye(12)[7])


def test_coslat_two_rows():
    x = StateVector(np.array([1.0, 2.0]), (2, 1), GridMeta(2, 1, (0.0, 60.0)))
    assert evaluate(QuantitySpec("weighted_global_mean", lat_weighted=True), x) == pytest.approx(4 / 3, rel=1e-15)


def test_patch_gradient_uniform_on_mask():
    spec = QuantitySpec("patch_mean", mask=(0, 5, 6))
    g = np.asarray(gradient(spec, np.zeros(8)))
    assert np.array_equal(g[[0, 5, 6]], np.full(3, 1 / 3)) and g.sum() == pytest.approx(1.0)
    assert not g[[1, 2, 3, 4, 7]].any()


def test_channel_selection():
    x = StateVector(np.arange(8.0), (2, 4))
    spec = QuantitySpec("weighted_global_mean", channel=1)
    assert evaluate(spec, x) == 5.5
    assert np.array_equal(np.asarray(gradient(spec, x)), [0, 0, 0, 0, 0.25, 0.25, 0.25, 0.25])


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind + ("_lat" if s.lat_weighted else ""))
@given(x=arrays(float, 12, elements=finite), y=arrays(float, 12, elements=finite), a=finite, b=finite)
def test_evaluate_is_linear(spec, x, y, a, b):
    lhs = evaluate(spec, gridded(a * x + b * y))
    rhs = a * evaluate(spec, gridded(x)) + b * evaluate(spec, gridded(y))
    scale = max(1.0, np.abs(a * x).max(), np.abs(b * y).max())
    assert abs(lhs - rhs) <= 1e-12 * scale


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind + ("_lat" if s.lat_weighted else ""))
@given(x=arrays(float, 12, elements=finite), d=arrays(float, 12, elements=finite))
def test_gradient_is_exact_and_constant(spec, x, d):
    g = np.asarray(gradient(spec, gridded(x)))
    assert np.array_equal(g, np.asarray(gradient(spec, gridded(d))))
    diff = evaluate(spec, gridded(x + d)) - evaluate(spec, gridded(x))
    assert abs(g @ d - diff) <= 1e-12 * max(1.0, np.abs(x).max(), np.abs(d).max())


def test_json_roundtrip_and_rows_cols():
    spec = QuantitySpec.from_json({"kind": "patch_mean", "grid_shape": [3, 4], "rows": [0, 2], "cols": [1, 3]})
    assert np.array_equal(np.asarray(spec.mask), SPECS[1].mask)
    back = QuantitySpec.from_json(spec.to_json())
    x = gridded(np.arange(12.0))
    assert evaluate(back, x) == evaluate(spec, x) == 3.5


def test_errors():
    with pytest.raises(ConfigurationError):
        QuantitySpec("median")
    with pytest.raises(ConfigurationError):
        QuantitySpec.from_json({"kind": "component", "index": 0, "colour": "red"})
    with pytest.raises(ContractError):
        evaluate(QuantitySpec("component", index=12), np.zeros(12))
    with pytest.raises(ContractError):
        evaluate(QuantitySpec("patch_mean", mask=np.zeros(12, bool)), np.zeros(12))
    with pytest.raises(ContractError):
        evaluate(QuantitySpec("weighted_global_mean", lat_weighted=True), np.zeros(12))
    with pytest.raises(ContractError):
        evaluate(QuantitySpec("weighted_global_mean", lat_weighted=True, latitudes=(90.0,)), np.zeros(4))
