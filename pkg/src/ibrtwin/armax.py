"""MIMO ARMAX structure as a bank of MISO models, plus its predictors.

For each output ``m`` the model is::

    y[t] = sum_i alpha[m, i] * y[t-i]
         + sum_j sum_i gamma[m, j, i] * u_j[t-nk-i+1]
         + sum_i beta[m, i] * eps[t-i]
         + intercept[m] + eps[t]

with all quantities in the scaled units of ``model.scaler``. The
parameter vector of one output is laid out as
``[alpha..., gamma[input 0]..., gamma[input 1]..., beta..., (intercept)]``
and regressor rows follow the same order.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ChannelMismatch, DimensionMismatch, InsufficientData, LagShortfall
from .timeseries import ScalerParams, TimeSeriesDataset


@dataclass(frozen=True)
class ArmaxOrders:
    na: int
    nb: int
    nc: int = 0
    nk: int = 0

    def __post_init__(self):
        for name in ("na", "nb", "nc", "nk"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))

    @property
    def max_lag(self) -> int:
        """First sample index that has a complete regressor."""
        return max(self.na, self.nb + self.nk if self.nb else 0, self.nc)

    @property
    def input_window(self) -> int:
        """Number of input samples (current one included) a prediction reads."""
        return self.nb + self.nk if self.nb else 0

    def n_params(self, n_inputs: int, intercept: bool = False) -> int:
        return self.na + self.nb * n_inputs + self.nc + int(intercept)

    def validate_for(self, n_inputs: int) -> None:
        if self.na + self.nb * n_inputs + self.nc < 1:
            raise ValueError(f"orders {self} give a model without parameters for {n_inputs} inputs")

    def to_dict(self) -> dict:
        return {"na": self.na, "nb": self.nb, "nc": self.nc, "nk": self.nk}


class FeedbackKind(str, Enum):
    MEASURED = "measured"
    FREERUN = "freerun"
    MEASURED_UNTIL = "measured-until"


@dataclass(frozen=True)
class FeedbackMode:
    """Which output lags a multi-step prediction uses.

    ``MEASURED_UNTIL`` with ``until=k`` feeds measured outputs back for
    samples ``t < k`` and the model's own predictions from sample ``k`` on.
    """

    kind: FeedbackKind = FeedbackKind.MEASURED
    until: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FeedbackKind(self.kind))
        if self.kind is FeedbackKind.MEASURED_UNTIL:
            if self.until is None or self.until < 0:
                raise ValueError("measured-until needs a non-negative step index")

    @classmethod
    def measured(cls) -> "FeedbackMode":
        return cls(FeedbackKind.MEASURED)

    @classmethod
    def freerun(cls) -> "FeedbackMode":
        return cls(FeedbackKind.FREERUN)

    @classmethod
    def measured_until(cls, k: int) -> "FeedbackMode":
        return cls(FeedbackKind.MEASURED_UNTIL, int(k))

    @classmethod
    def parse(cls, text: str) -> "FeedbackMode":
        text = text.strip().lower()
        m = re.fullmatch(r"measured-until:(\d+)", text)
        if m:
            return cls.measured_until(int(m.group(1)))
        if text in ("measured", "freerun"):
            return cls(FeedbackKind(text))
        raise ValueError(f"unknown feedback mode {text!r}")

    def __str__(self) -> str:
        if self.kind is FeedbackKind.MEASURED_UNTIL:
            return f"measured-until:{self.until}"
        return self.kind.value

    def uses_measurement(self, t: int) -> bool:
        if self.kind is FeedbackKind.MEASURED:
            return True
        if self.kind is FeedbackKind.FREERUN:
            return False
        return t < self.until


def _arr(a, shape) -> np.ndarray:
    out = np.array(a, dtype=float).reshape(shape)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ArmaxModel:
    """Fitted (or hand-built) coefficient bank; immutable."""

    orders: ArmaxOrders
    alpha: np.ndarray  # (n_outputs, na)
    gamma: np.ndarray  # (n_outputs, n_inputs, nb)
    beta: np.ndarray  # (n_outputs, nc)
    intercept: np.ndarray  # (n_outputs,)
    scaler: ScalerParams
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]
    with_intercept: bool = False
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        o = self.orders
        n_out = len(self.output_names)
        n_in = len(self.input_names)
        object.__setattr__(self, "input_names", tuple(self.input_names))
        object.__setattr__(self, "output_names", tuple(self.output_names))
        try:
            object.__setattr__(self, "alpha", _arr(self.alpha, (n_out, o.na)))
            object.__setattr__(self, "gamma", _arr(self.gamma, (n_out, n_in, o.nb)))
            object.__setattr__(self, "beta", _arr(self.beta, (n_out, o.nc)))
            object.__setattr__(self, "intercept", _arr(self.intercept, (n_out,)))
        except ValueError as exc:
            raise DimensionMismatch(f"coefficient arrays do not match orders {o}: {exc}") from None
        if self.scaler.n_inputs != n_in or self.scaler.n_outputs != n_out:
            raise DimensionMismatch("scaler channel counts differ from the model's")
        o.validate_for(n_in)

    @classmethod
    def from_coefficients(
        cls,
        alpha=(),
        gamma=None,
        beta=None,
        *,
        nk: int = 0,
        intercept=None,
        scaler: ScalerParams | None = None,
        input_names: Sequence[str] | None = None,
        output_names: Sequence[str] | None = None,
        with_intercept: bool | None = None,
    ) -> "ArmaxModel":
        """Convenience constructor.

        1-D ``alpha``/``beta`` and 2-D ``gamma`` (inputs x lags) describe a
        single-output model; pass 2-D/3-D arrays for several outputs.
        """
        alpha = np.asarray(alpha, dtype=float)
        if alpha.ndim <= 1:
            alpha = alpha.reshape(1, -1)
        n_out = alpha.shape[0]
        if gamma is None:
            gamma = np.zeros((n_out, 0, 0))
        gamma = np.asarray(gamma, dtype=float)
        if gamma.ndim == 2:
            gamma = gamma[None]
        elif gamma.ndim == 1:
            gamma = gamma.reshape(1, 1, -1)
        n_in, nb = gamma.shape[1], gamma.shape[2]
        if beta is None:
            beta = np.zeros((n_out, 0))
        beta = np.asarray(beta, dtype=float)
        if beta.ndim <= 1:
            beta = beta.reshape(1, -1)
        if intercept is None:
            intercept = np.zeros(n_out)
            with_intercept = bool(with_intercept)
        elif with_intercept is None:
            with_intercept = True
        orders = ArmaxOrders(alpha.shape[1], nb, beta.shape[1], nk)
        return cls(
            orders=orders,
            alpha=alpha,
            gamma=gamma,
            beta=beta,
            intercept=np.broadcast_to(np.asarray(intercept, dtype=float), (n_out,)),
            scaler=scaler or ScalerParams.identity(n_in, n_out),
            input_names=input_names or tuple(f"u{j + 1}" for j in range(n_in)),
            output_names=output_names or tuple(f"y{m + 1}" for m in range(n_out)),
            with_intercept=with_intercept,
        )

    def __eq__(self, other):
        if not isinstance(other, ArmaxModel):
            return NotImplemented
        a, b = self.to_dict(), other.to_dict()
        a.pop("metadata"), b.pop("metadata")
        return a == b

    __hash__ = None

    @property
    def n_outputs(self) -> int:
        return len(self.output_names)

    @property
    def n_inputs(self) -> int:
        return len(self.input_names)

    @property
    def n_params(self) -> int:
        return self.orders.n_params(self.n_inputs, self.with_intercept)

    # -- parameter vectors ------------------------------------------------

    def theta(self, m: int) -> np.ndarray:
        parts = [self.alpha[m], self.gamma[m].reshape(-1), self.beta[m]]
        if self.with_intercept:
            parts.append(self.intercept[m : m + 1])
        return np.concatenate(parts)

    def theta_matrix(self) -> np.ndarray:
        return np.vstack([self.theta(m) for m in range(self.n_outputs)])

    def with_theta(self, theta: np.ndarray, **kw) -> "ArmaxModel":
        """Copy of this model with coefficients taken from ``theta`` (n_outputs x n_params)."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if theta.shape != (self.n_outputs, self.n_params):
            raise DimensionMismatch(f"theta shape {theta.shape} != {(self.n_outputs, self.n_params)}")
        o, n_in = self.orders, self.n_inputs
        a_end = o.na
        g_end = a_end + o.nb * n_in
        b_end = g_end + o.nc
        intercept = theta[:, b_end] if self.with_intercept else np.zeros(self.n_outputs)
        return replace(
            self,
            alpha=theta[:, :a_end],
            gamma=theta[:, a_end:g_end].reshape(self.n_outputs, n_in, o.nb),
            beta=theta[:, g_end:b_end],
            intercept=intercept,
            **kw,
        )

    def __add__(self, other: "ArmaxModel") -> "ArmaxModel":
        if (self.orders, self.n_inputs, self.n_outputs, self.with_intercept) != (
            other.orders,
            other.n_inputs,
            other.n_outputs,
            other.with_intercept,
        ):
            raise DimensionMismatch("models must share orders and channel counts")
        return self.with_theta(self.theta_matrix() + other.theta_matrix())

    def physical_coefficients(self) -> dict:
        """Coefficients mapped back to original channel units.

        AR and MA coefficients are scale invariant; exogenous weights pick up
        the gain ratio, and scaler offsets fold into an explicit intercept.
        """
        sc = self.scaler
        gy, oy = sc.output_gain, sc.output_offset
        gu, ou = sc.input_gain, sc.input_offset
        gamma = self.gamma * (gy[:, None, None] / gu[None, :, None]) if self.n_inputs else self.gamma.copy()
        intercept = (
            oy * (1.0 - self.alpha.sum(axis=1))
            - np.einsum("mji,j->m", gamma, ou)
            + self.intercept * gy
        )
        return {
            "alpha": self.alpha.copy(),
            "gamma": gamma,
            "beta": self.beta.copy(),
            "intercept": intercept,
        }

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "ibrtwin.armax/1",
            "orders": self.orders.to_dict(),
            "input_names": list(self.input_names),
            "output_names": list(self.output_names),
            "with_intercept": self.with_intercept,
            "outputs": [
                {
                    "name": name,
                    "alpha": self.alpha[m].tolist(),
                    "gamma": self.gamma[m].tolist(),
                    "beta": self.beta[m].tolist(),
                    "intercept": float(self.intercept[m]),
                }
                for m, name in enumerate(self.output_names)
            ],
            "scaler": self.scaler.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArmaxModel":
        orders = ArmaxOrders(**d["orders"])
        outs = d["outputs"]
        n_in = len(d["input_names"])
        return cls(
            orders=orders,
            alpha=[o["alpha"] for o in outs],
            gamma=[np.reshape(o["gamma"], (n_in, orders.nb)) for o in outs] if outs else [],
            beta=[o["beta"] for o in outs],
            intercept=[o["intercept"] for o in outs],
            scaler=ScalerParams.from_dict(d["scaler"]),
            input_names=d["input_names"],
            output_names=d["output_names"],
            with_intercept=bool(d.get("with_intercept", False)),
            metadata=d.get("metadata", {}),
        )


def save_model(model: ArmaxModel, path: str | Path) -> Path:
    # json writes floats with Python's shortest round-trip repr, so
    # coefficients reload bit-exactly.
    path = Path(path)
    path.write_text(json.dumps(model.to_dict(), indent=2, sort_keys=True))
    return path


def load_model(path: str | Path) -> ArmaxModel:
    return ArmaxModel.from_dict(json.loads(Path(path).read_text()))


# -- regressors ---------------------------------------------------------------


def build_regressor(
    data: TimeSeriesDataset,
    orders: ArmaxOrders,
    residuals: np.ndarray | None = None,
    *,
    intercept: bool = False,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-output ``(Phi, target)`` for rows ``t`` in ``[max_lag, N)``.

    Values are taken from ``data`` as given (scale beforehand if needed).
    Without ``residuals`` the MA columns are left out, giving the ARX
    regressor.
    """
    N, L = data.n_samples, orders.max_lag
    if N <= L:
        raise InsufficientData(f"{N} samples do not cover max lag {L} for orders {orders}")
    ys, us = data.outputs, data.inputs
    if residuals is not None:
        residuals = np.asarray(residuals, dtype=float).reshape(N, -1)
        if residuals.shape[1] != data.n_outputs:
            raise DimensionMismatch("residuals must have one column per output")
    out = []
    for m in range(data.n_outputs):
        cols = [ys[L - i : N - i, m] for i in range(1, orders.na + 1)]
        for j in range(data.n_inputs):
            cols += [us[L - orders.nk - i + 1 : N - orders.nk - i + 1, j] for i in range(1, orders.nb + 1)]
        if residuals is not None:
            cols += [residuals[L - i : N - i, m] for i in range(1, orders.nc + 1)]
        if intercept:
            cols.append(np.ones(N - L))
        phi = np.column_stack(cols) if cols else np.empty((N - L, 0))
        out.append((phi, ys[L:, m].copy()))
    return out


def regressor_rows(
    orders: ArmaxOrders,
    ylag: np.ndarray,
    ulag: np.ndarray,
    elag: np.ndarray,
    intercept: bool = False,
) -> np.ndarray:
    """Single-time regressor rows, one per output, in parameter-vector order.

    ``ylag`` (n_out, na) and ``elag`` (n_out, nc) are most-recent-first;
    ``ulag`` (n_in, nb) is already shifted by the dead time.
    """
    n_out = ylag.shape[0]
    parts = [ylag[:, : orders.na], np.broadcast_to(ulag.reshape(1, -1), (n_out, ulag.size)), elag[:, : orders.nc]]
    if intercept:
        parts.append(np.ones((n_out, 1)))
    return np.hstack(parts)


# -- prediction -----------------------------------------------------------------


@dataclass(frozen=True)
class LagHistory:
    """Past values in scaled units, most recent first.

    ``y``: (>= na, n_outputs) holding y[t-1], y[t-2], ...
    ``u``: (>= nb+nk, n_inputs) holding u[t], u[t-1], ...
    ``eps``: (>= nc, n_outputs) holding eps[t-1], eps[t-2], ...
    """

    y: np.ndarray
    u: np.ndarray
    eps: np.ndarray


def _one_step(model: ArmaxModel, ylag: np.ndarray, ulag: np.ndarray, elag: np.ndarray) -> np.ndarray:
    # ylag (n_out, na), ulag (n_in, nb) already shifted by nk, elag (n_out, nc)
    yhat = np.sum(model.alpha * ylag, axis=1)
    yhat = yhat + np.sum(model.gamma * ulag[None, :, :], axis=(1, 2))
    yhat = yhat + np.sum(model.beta * elag, axis=1)
    return yhat + model.intercept


def predict_one_step(model: ArmaxModel, history: LagHistory) -> np.ndarray:
    """One-step-ahead prediction for every output, in scaled units."""
    o = model.orders
    y = np.asarray(history.y, dtype=float).reshape(-1, model.n_outputs) if o.na else np.zeros((0, model.n_outputs))
    u = np.asarray(history.u, dtype=float).reshape(-1, model.n_inputs) if model.n_inputs else np.zeros((0, 0))
    e = np.asarray(history.eps, dtype=float).reshape(-1, model.n_outputs) if o.nc else np.zeros((0, model.n_outputs))
    if y.shape[0] < o.na:
        raise LagShortfall(f"need {o.na} output lags, got {y.shape[0]}")
    if model.n_inputs and u.shape[0] < o.input_window:
        raise LagShortfall(f"need {o.input_window} input lags, got {u.shape[0]}")
    if e.shape[0] < o.nc:
        raise LagShortfall(f"need {o.nc} residual lags, got {e.shape[0]}")
    ulag = u[o.nk : o.nk + o.nb].T if model.n_inputs else np.zeros((0, o.nb))
    return _one_step(model, y[: o.na].T, ulag, e[: o.nc].T)


@dataclass(frozen=True)
class Prediction:
    """Output of :func:`predict_horizon`.

    ``yhat`` is in original units; rows before ``start`` copy the measured
    seed values. ``residuals`` is ``y - yhat`` in scaled units (NaN where
    the measurement is absent, 0 in the seed rows).
    """

    yhat: np.ndarray
    residuals: np.ndarray
    start: int
    mode: FeedbackMode


def check_channels(model: ArmaxModel, data: TimeSeriesDataset, check_names: bool = True) -> None:
    if data.n_inputs != model.n_inputs or data.n_outputs != model.n_outputs:
        raise ChannelMismatch(
            f"model expects {model.n_inputs} inputs/{model.n_outputs} outputs, "
            f"data has {data.n_inputs}/{data.n_outputs}"
        )
    if check_names and (data.input_names, data.output_names) != (model.input_names, model.output_names):
        raise ChannelMismatch(
            f"channel names {data.input_names}->{data.output_names} differ from model "
            f"{model.input_names}->{model.output_names}"
        )


def predict_horizon(
    model: ArmaxModel,
    data: TimeSeriesDataset,
    mode: FeedbackMode | str = FeedbackMode(),
    *,
    check_names: bool = True,
) -> Prediction:
    """Recursive multi-step prediction over the whole record.

    The first ``max_lag`` rows seed the output lags. Afterwards each
    sample's output lag is the measurement when the feedback mode allows it
    (and the value is present), else the model's own prediction; MA lags are
    the innovations in the first case and zero in the second.
    """
    if isinstance(mode, str):
        mode = FeedbackMode.parse(mode)
    check_channels(model, data, check_names)
    o = model.orders
    N, L = data.n_samples, o.max_lag
    if N <= L:
        raise LagShortfall(f"{N} samples cannot seed max lag {L}")

    sc = model.scaler
    ys = sc.scale_outputs(data.outputs)
    us = sc.scale_inputs(data.inputs)
    if not np.isfinite(ys[:L]).all():
        raise LagShortfall("seed rows must hold measured outputs")

    n_out = model.n_outputs
    y_fb = ys.copy()  # output lags actually fed back
    eps = np.zeros((N, n_out))
    yhat_s = ys.copy()
    resid = np.zeros((N, n_out))
    for t in range(L, N):
        ylag = y_fb[t - o.na : t][::-1].T
        ulag = us[t - o.nk - o.nb + 1 : t - o.nk + 1][::-1].T if model.n_inputs else np.zeros((0, o.nb))
        elag = eps[t - o.nc : t][::-1].T
        pred = _one_step(model, ylag, ulag, elag)
        yhat_s[t] = pred
        meas = ys[t]
        if mode.uses_measurement(t) and np.isfinite(meas).all():
            e = meas - pred
            eps[t] = e
            resid[t] = e
            y_fb[t] = meas
        else:
            eps[t] = 0.0
            resid[t] = meas - pred
            y_fb[t] = pred
    return Prediction(yhat=sc.unscale_outputs(yhat_s), residuals=resid, start=L, mode=mode)


# -- stability ---------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityReport:
    output: str
    stable: bool
    max_root: float
    roots: tuple[complex, ...]

    def to_dict(self) -> dict:
        return {"output": self.output, "stable": self.stable, "max_root": self.max_root}


def ar_roots(alpha: Sequence[float]) -> np.ndarray:
    """Roots of ``z^na - alpha_1 z^(na-1) - ... - alpha_na`` via the companion matrix."""
    alpha = np.asarray(alpha, dtype=float)
    n = alpha.size
    if n == 0:
        return np.zeros(0, dtype=complex)
    comp = np.zeros((n, n))
    comp[0, :] = alpha
    comp[1:, :-1] = np.eye(n - 1)
    return np.linalg.eigvals(comp)


def check_stability(model: ArmaxModel) -> list[StabilityReport]:
    reports = []
    for m, name in enumerate(model.output_names):
        roots = ar_roots(model.alpha[m])
        mag = float(np.abs(roots).max()) if roots.size else 0.0
        reports.append(StabilityReport(name, mag < 1.0, mag, tuple(complex(r) for r in roots)))
    return reports
