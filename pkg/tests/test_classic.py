import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from metapool.classic import cochran_q, dl_fit, dl_tau2
from metapool.model import DegenerateWeights, dataset_from_arrays

from . import oracles

datasets = st.integers(2, 12).flatmap(lambda m: st.tuples(
    st.lists(st.floats(-20, 20), min_size=m, max_size=m),
    st.lists(st.floats(0.05, 5.0), min_size=m, max_size=m),
))


def test_q_hand_values():
    q, yb = cochran_q(dataset_from_arrays([0, 1, 2], [1, 1, 1]))
    assert (q, yb) == pytest.approx((2.0, 1.0), abs=1e-12)
    q, yb = cochran_q(dataset_from_arrays([0, 2, 4], [1, 1, 1]))
    assert (q, yb) == pytest.approx((8.0, 2.0), abs=1e-12)


def test_q_zero_for_constant():
    q, yb = cochran_q(dataset_from_arrays([3.3] * 4, [0.5, 1.0, 2.0, 0.1]))
    assert q == pytest.approx(0.0, abs=1e-20) and yb == pytest.approx(3.3)


def test_tau2_hand_values():
    assert dl_tau2(dataset_from_arrays([0, 1, 2], [1, 1, 1])) == 0.0
    assert dl_tau2(dataset_from_arrays([0, 2, 4], [1, 1, 1])) == pytest.approx(3.0, abs=1e-10)
    assert dl_tau2(dataset_from_arrays([5, 5, 5], [1, 2, 3])) == 0.0


def test_fit_hand_example(three_study):
    f = dl_fit(three_study, 0.05)
    assert f.theta_hat == pytest.approx(2.0, abs=1e-10)
    assert f.tau2_hat == pytest.approx(3.0, abs=1e-10)
    assert f.diagnostics["se"] ** 2 == pytest.approx(4.0 / 3.0, abs=1e-10)
    half = 4.302652729749463 * np.sqrt(4.0 / 3.0)
    assert f.ci_low == pytest.approx(2.0 - half, abs=1e-9)
    assert f.ci_high == pytest.approx(2.0 + half, abs=1e-9)
    assert (f.ci_low, f.ci_high) == pytest.approx((-2.9683, 6.9683), abs=1e-4)


def test_uneven_against_direct_formula(uneven):
    y, v = np.asarray(uneven.y), np.asarray(uneven.var)
    w = 1 / v
    yb = np.sum(w * y) / np.sum(w)
    q = np.sum(w * (y - yb) ** 2)
    tau2 = max(0.0, (q - (len(y) - 1)) / (np.sum(w) - np.sum(w ** 2) / np.sum(w)))
    ws = 1 / (v + tau2)
    f = dl_fit(uneven)
    assert f.tau2_hat == pytest.approx(tau2, abs=1e-10)
    assert f.theta_hat == pytest.approx(np.sum(ws * y) / np.sum(ws), abs=1e-10)
    t = oracles.invert(lambda x: oracles.t_cdf(x, len(y) - 1), 0.975, 0.0, 50.0)
    assert f.ci_high - f.theta_hat == pytest.approx(t / np.sqrt(np.sum(ws)), rel=1e-8)


def test_constant_data():
    f = dl_fit(dataset_from_arrays([1.5] * 5, [1, 2, 1, 2, 1]))
    assert f.theta_hat == pytest.approx(1.5) and f.tau2_hat == 0.0
    assert f.ci_low < 1.5 < f.ci_high


def test_normal_quantile_option(three_study):
    f = dl_fit(three_study, normal=True)
    assert f.diagnostics["critical_value"] == pytest.approx(1.959963984540054)


def test_degenerate_weights():
    with pytest.raises(DegenerateWeights):
        dl_tau2(dataset_from_arrays([0.0, 1.0], [1e-200, 1.0]))


def test_alpha_domain(three_study):
    with pytest.raises(ValueError):
        dl_fit(three_study, 0.0)


@given(datasets)
def test_estimate_is_convex_combination(data):
    ys, ses = data
    d = dataset_from_arrays(ys, ses)
    f = dl_fit(d)
    tol = 1e-9 * (1 + max(map(abs, ys)))
    assert min(ys) - tol <= f.theta_hat <= max(ys) + tol
    assert f.tau2_hat >= 0
    assert f.ci_low <= f.theta_hat <= f.ci_high


@given(datasets)
def test_tau2_zero_when_q_small(data):
    d = dataset_from_arrays(*data)
    q, _ = cochran_q(d)
    if q <= d.m - 1:
        assert dl_tau2(d) == 0.0


@given(datasets, st.floats(0.1, 10.0), st.floats(-100, 100))
def test_scale_and_location_equivariance(data, c, shift):
    d = dataset_from_arrays(*data)
    f = dl_fit(d)
    g = dl_fit(d.scaled(c))
    assert g.theta_hat == pytest.approx(c * f.theta_hat, abs=1e-8 * (1 + abs(c * f.theta_hat)))
    assert g.ci_low == pytest.approx(c * f.ci_low, abs=1e-8 * (1 + abs(c * f.ci_low)))
    assert g.tau2_hat == pytest.approx(c * c * f.tau2_hat, abs=1e-8 * (1 + c * c * f.tau2_hat))
    h = dl_fit(d.shifted(shift))
    assert h.theta_hat == pytest.approx(f.theta_hat + shift, abs=1e-8 * (1 + abs(shift) + abs(f.theta_hat)))
    assert h.tau2_hat == pytest.approx(f.tau2_hat, abs=1e-8 * (1 + f.tau2_hat))


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=10), st.floats(0.1, 4))
def test_equal_se_gives_unweighted_mean(ys, s):
    f = dl_fit(dataset_from_arrays(ys, [s] * len(ys)))
    assert f.theta_hat == pytest.approx(float(np.mean(ys)), abs=1e-9 * (1 + max(map(abs, ys))))
