import json

import numpy as np
import pytest

from ibrtwin.armax import (
    ArmaxModel,
    ArmaxOrders,
    FeedbackMode,
    LagHistory,
    ar_roots,
    build_regressor,
    check_stability,
    load_model,
    predict_horizon,
    predict_one_step,
    save_model,
)
from ibrtwin.errors import ChannelMismatch, DimensionMismatch, InsufficientData, LagShortfall
from ibrtwin.sim import CoefficientStep, LinearTruth, PlantKind, Prbs, ScenarioConfig, simulate, truth_model
from ibrtwin.timeseries import ScalerParams, TimeSeriesDataset


def series(y, u=None):
    y = np.asarray(y, float).reshape(-1, 1)
    u = np.empty((len(y), 0)) if u is None else np.asarray(u, float).reshape(-1, 1)
    return TimeSeriesDataset(1.0, u, y, ("u",) if u.shape[1] else (), ("y",))


def ar1(a=0.5):
    return ArmaxModel.from_coefficients([a], output_names=("y",))


# -- orders and feedback modes --------------------------------------------------


def test_orders_validation():
    with pytest.raises(ValueError):
        ArmaxOrders(0, 0, 0).validate_for(1)
    with pytest.raises(ValueError):
        ArmaxOrders(1, 1, 0, nk=-1)
    assert ArmaxOrders(2, 3, 1, nk=1).max_lag == 4
    assert ArmaxOrders(2, 0, 5, nk=7).max_lag == 5
    assert ArmaxOrders(2, 2, 1).n_params(2, intercept=True) == 2 + 4 + 1 + 1


def test_feedback_mode_parse():
    assert FeedbackMode.parse("measured") == FeedbackMode.measured()
    assert FeedbackMode.parse("freerun") == FeedbackMode.freerun()
    m = FeedbackMode.parse("measured-until:300")
    assert m == FeedbackMode.measured_until(300)
    assert m.uses_measurement(299) and not m.uses_measurement(300)
    assert str(m) == "measured-until:300"
    with pytest.raises(ValueError):
        FeedbackMode.parse("sometimes")


# -- regressor ------------------------------------------------------------------


def test_regressor_pure_ar():
    [(phi, target)] = build_regressor(series([1, 2, 3]), ArmaxOrders(1, 0, 0))
    np.testing.assert_array_equal(target, [2, 3])
    np.testing.assert_array_equal(phi, [[1], [2]])


def test_regressor_with_current_input():
    # nk = 0 reads the input at the same instant as the target
    [(phi, target)] = build_regressor(series([1, 2, 3], [4, 5, 6]), ArmaxOrders(1, 1, 0, nk=0))
    np.testing.assert_array_equal(target, [2, 3])
    np.testing.assert_array_equal(phi, [[1, 5], [2, 6]])


def test_regressor_with_one_sample_delay():
    # rows start at max(na, nb + nk, nc) = 2
    [(phi, target)] = build_regressor(series([1, 2, 3], [4, 5, 6]), ArmaxOrders(1, 1, 0, nk=1))
    np.testing.assert_array_equal(target, [3])
    np.testing.assert_array_equal(phi, [[2, 5]])


def test_regressor_too_short():
    with pytest.raises(InsufficientData):
        build_regressor(series([1, 2]), ArmaxOrders(2, 0, 0))


def test_regressor_ma_columns_and_intercept():
    eps = np.array([0.0, 0.1, 0.2, 0.3])
    [(phi, _)] = build_regressor(series([1, 2, 3, 4]), ArmaxOrders(1, 0, 2), eps, intercept=True)
    np.testing.assert_array_equal(phi, [[2, 0.1, 0.0, 1], [3, 0.2, 0.1, 1]])


# -- one-step prediction --------------------------------------------------------


def test_one_step_pure_ar():
    assert predict_one_step(ar1(), LagHistory(y=[[2.0]], u=[], eps=[]))[0] == 1.0


def test_one_step_with_input():
    # 0.5 * 2 + 1.0 * 3
    m = ArmaxModel.from_coefficients([0.5], [[1.0]], nk=0)
    assert predict_one_step(m, LagHistory(y=[[2.0]], u=[[3.0]], eps=[]))[0] == 4.0


def test_one_step_with_ma():
    m = ArmaxModel.from_coefficients([0.9], beta=[0.4])
    assert predict_one_step(m, LagHistory(y=[[1.0]], u=[], eps=[[0.5]]))[0] == pytest.approx(1.1, abs=1e-15)


def test_one_step_lag_shortfall():
    m = ArmaxModel.from_coefficients([0.5, 0.1])
    with pytest.raises(LagShortfall):
        predict_one_step(m, LagHistory(y=[[1.0]], u=[], eps=[]))


# -- horizon prediction ---------------------------------------------------------


def test_freerun_geometric_decay():
    pred = predict_horizon(ar1(), series([8, 0, 0, 0]), FeedbackMode.freerun())
    np.testing.assert_array_equal(pred.yhat[1:, 0], [4, 2, 1])


def test_measured_exact_model_zero_residual():
    pred = predict_horizon(ar1(), series([8, 4, 2, 1]), "measured")
    np.testing.assert_array_equal(pred.yhat[1:, 0], [4, 2, 1])
    np.testing.assert_array_equal(pred.residuals[1:, 0], [0, 0, 0])


def test_measured_until_switches_to_feedback_of_predictions():
    y = [8.0, 4.0, 100.0, 100.0]
    pred = predict_horizon(ar1(), series(y), FeedbackMode.measured_until(2))
    np.testing.assert_array_equal(pred.yhat[1:, 0], [4, 2, 1])


def test_missing_measurement_is_fed_back_as_prediction():
    y = np.array([[8.0], [np.nan], [np.nan], [1.0]])
    data = TimeSeriesDataset(1.0, np.empty((4, 0)), y, (), ("y",), allow_missing=True)
    pred = predict_horizon(ar1(), data, "measured")
    np.testing.assert_array_equal(pred.yhat[1:, 0], [4, 2, 1])


def test_horizon_channel_mismatch():
    m = ArmaxModel.from_coefficients([0.5], [[1.0]], input_names=("P",), output_names=("V",))
    data = TimeSeriesDataset(1.0, np.zeros((5, 1)), np.zeros((5, 1)), ("Q",), ("V",))
    with pytest.raises(ChannelMismatch):
        predict_horizon(m, data)
    wide = TimeSeriesDataset(1.0, np.zeros((5, 2)), np.zeros((5, 1)), ("P", "Q"), ("V",))
    with pytest.raises(ChannelMismatch):
        predict_horizon(m, wide)


def test_measured_until_on_armax_truth():
    truth = LinearTruth(alpha=(1.5, -0.7), gamma=((1.0, 0.5),), beta=(0.3,), nk=1)
    sc = ScenarioConfig.default(PlantKind.LINEAR_TRUTH, plant=truth, duration=1.0, events=(Prbs("u1"),), rng_seed=4)
    data = simulate(sc)
    pred = predict_horizon(truth_model(truth), data, FeedbackMode.measured_until(300))
    before = np.sqrt(np.mean(pred.residuals[10:300] ** 2))
    late = np.sqrt(np.mean(pred.residuals[500:] ** 2))
    assert before == pytest.approx(0.01, rel=0.2)
    assert late > 3 * before


# -- stability ------------------------------------------------------------------


@pytest.mark.parametrize(
    "alpha, stable, radius",
    [([0.5], True, 0.5), ([1.2], False, 1.2), ([1.5, -0.56], True, 0.8)],
)
def test_stability(alpha, stable, radius):
    [rep] = check_stability(ArmaxModel.from_coefficients(alpha))
    assert rep.stable is stable
    assert rep.max_root == pytest.approx(radius, abs=1e-12)


def test_ar_roots_factor():
    np.testing.assert_allclose(np.sort(np.abs(ar_roots([1.5, -0.56]))), [0.7, 0.8], atol=1e-12)


# -- construction and serialization ---------------------------------------------


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        ArmaxModel(
            orders=ArmaxOrders(2, 0, 0),
            alpha=[[0.5]],
            gamma=np.zeros((1, 0, 0)),
            beta=np.zeros((1, 0)),
            intercept=[0.0],
            scaler=ScalerParams.identity(0, 1),
            input_names=(),
            output_names=("y",),
        )


def test_model_json_roundtrip(tmp_path):
    sc = ScalerParams("zscore", [1.0, 2.0, 3.0], [0.1, 0.2, 0.3], 2)
    m = ArmaxModel.from_coefficients(
        [[0.1, 0.2]], [[[1 / 3, 0.25], [np.pi, -1e-17]]], [[0.7]], nk=1, intercept=[0.01], scaler=sc,
        input_names=("P", "Q"), output_names=("V",),
    )
    back = load_model(save_model(m, tmp_path / "m.json"))
    assert back == m
    np.testing.assert_array_equal(back.gamma, m.gamma)
    assert json.loads((tmp_path / "m.json").read_text())["format"] == "ibrtwin.armax/1"


def test_coefficient_step_truth_model():
    truth = LinearTruth(alpha=(0.5,))
    assert truth_model(truth, CoefficientStep(10, alpha=(0.8,))).alpha[0, 0] == 0.8
