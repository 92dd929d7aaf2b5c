"""Coefficient estimation: batch extended least squares and recursive ELS."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.signal

from .armax import (
    ArmaxModel,
    ArmaxOrders,
    build_regressor,
    check_stability,
    regressor_rows,
)
from .errors import (
    DimensionMismatch,
    InsufficientData,
    NoConvergenceWarning,
    NonFiniteUpdate,
    SingularNormalEquations,
)
from .timeseries import ScalerMode, ScalerParams, TimeSeriesDataset, apply_scaler, fit_scaler

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    max_els_iterations: int = 20
    els_tolerance: float = 1e-8
    ridge: float = 1e-10
    forgetting: float = 0.995
    initial_covariance_scale: float = 1e3
    fit_intercept: bool = True
    scaler_mode: ScalerMode = ScalerMode.ZSCORE
    # "a_priori" or "a_posteriori": which residual fills the MA lags in RLS
    residual_convention: str = "a_priori"
    check_pd: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scaler_mode", ScalerMode(self.scaler_mode))
        if not 0 < self.forgetting <= 1:
            raise ValueError("forgetting must lie in (0, 1]")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if not self.els_tolerance > 0:
            raise ValueError("els_tolerance must be positive")
        if self.max_els_iterations < 1:
            raise ValueError("max_els_iterations must be >= 1")
        if not self.initial_covariance_scale > 0:
            raise ValueError("initial_covariance_scale must be positive")
        if self.residual_convention not in ("a_priori", "a_posteriori"):
            raise ValueError("residual_convention must be 'a_priori' or 'a_posteriori'")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["scaler_mode"] = self.scaler_mode.value
        return d


@dataclass
class OutputFitReport:
    output: str
    sse: float
    iterations: int
    converged: bool
    final_change: float
    condition_number_estimate: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FitReport:
    outputs: list[OutputFitReport]
    n_rows: int

    @property
    def converged(self) -> bool:
        return all(o.converged for o in self.outputs)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "n_rows": self.n_rows,
            "outputs": [o.to_dict() for o in self.outputs],
        }


# -- batch ELS ------------------------------------------------------------------


def _solve_ridge(phi: np.ndarray, target: np.ndarray, ridge: float) -> tuple[np.ndarray, float]:
    p = phi.shape[1]
    if ridge > 0:
        A = np.vstack([phi, np.sqrt(ridge) * np.eye(p)])
        b = np.concatenate([target, np.zeros(p)])
    else:
        A, b = phi, target
    theta, _, rank, sv = scipy.linalg.lstsq(A, b, lapack_driver="gelsd")
    if rank < p or sv[-1] == 0:
        raise SingularNormalEquations(f"regressor has rank {rank} < {p} parameters")
    return theta, float(sv[0] / sv[-1])


def _stabilize_ma(beta: np.ndarray) -> np.ndarray:
    """Reflect MA roots outside the unit circle (same spectrum, invertible filter)."""
    if beta.size == 0:
        return beta
    roots = np.roots(np.concatenate([[1.0], beta]))
    bad = np.abs(roots) >= 1.0
    if not bad.any():
        return beta
    roots[bad] = 1.0 / np.conj(roots[bad])
    return np.real(np.poly(roots))[1:]


def armax_residuals(
    phi_arx: np.ndarray,
    target: np.ndarray,
    theta_arx: np.ndarray,
    beta: np.ndarray,
    lead: int,
) -> np.ndarray:
    """Innovations of one output over the full record (zeros in the ``lead`` seed rows).

    ``phi_arx`` and ``theta_arx`` cover every non-MA column (intercept
    included); the MA recursion ``eps[t] = w[t] - sum beta_i eps[t-i]`` is run
    with scipy's IIR filter.
    """
    w = target - phi_arx @ theta_arx
    eps = scipy.signal.lfilter([1.0], np.concatenate([[1.0], beta]), w)
    return np.concatenate([np.zeros(lead), eps])


def _zero_energy_columns(phi: np.ndarray) -> list[int]:
    norms = np.linalg.norm(phi, axis=0)
    scale = np.sqrt(phi.shape[0])
    return [k for k, n in enumerate(norms) if n <= 1e-12 * scale]


def fit_batch_els(
    data: TimeSeriesDataset,
    orders: ArmaxOrders,
    cfg: FitConfig = FitConfig(),
    *,
    scaler: ScalerParams | None = None,
) -> tuple[ArmaxModel, FitReport]:
    """Fit every output's ARMAX coefficients by pseudo-linear regression.

    Iteration 0 solves the ARX problem; later iterations rebuild the MA
    columns from the previous iterate's innovations. Without convergence the
    lowest-SSE iterate is returned and the report flags it.
    """
    orders.validate_for(data.n_inputs)
    p = orders.n_params(data.n_inputs, cfg.fit_intercept)
    L = orders.max_lag
    if data.n_samples <= L + p:
        raise InsufficientData(
            f"{data.n_samples} samples; need more than max lag {L} + {p} parameters"
        )
    scaler = scaler or fit_scaler(data, cfg.scaler_mode)
    ds = apply_scaler(scaler, data)
    n_rows = ds.n_samples - L
    n_arx = orders.na + orders.nb * data.n_inputs
    arx_sets = build_regressor(ds, orders, None, intercept=cfg.fit_intercept)

    thetas, reports = [], []
    for m, (phi0, target) in enumerate(arx_sets):
        name = data.output_names[m]
        dead = _zero_energy_columns(phi0[:, :n_arx])
        if dead:
            raise SingularNormalEquations(
                f"output '{name}': regressor columns {dead} carry no excitation (constant channel?)"
            )
        theta0, cond = _solve_ridge(phi0, target, cfg.ridge)

        def split(theta):
            # -> (arx part incl. intercept, beta)
            b = theta[n_arx : n_arx + orders.nc]
            rest = np.concatenate([theta[:n_arx], theta[n_arx + orders.nc :]])
            return rest, b

        def join(rest, b):
            return np.concatenate([rest[:n_arx], b, rest[n_arx:]])

        phi_arx = phi0
        theta = join(theta0, np.zeros(orders.nc))
        eps = armax_residuals(phi_arx, target, theta0, np.zeros(orders.nc), L)
        sse = float(eps @ eps)
        best = (sse, theta)
        iterations, change, converged = 1, 0.0, True

        if orders.nc:
            converged = False
            while iterations < cfg.max_els_iterations:
                resid = np.zeros((ds.n_samples, ds.n_outputs))
                resid[:, m] = eps
                phi, _ = build_regressor(ds, orders, resid, intercept=cfg.fit_intercept)[m]
                new, cond = _solve_ridge(phi, target, cfg.ridge)
                iterations += 1
                rest, b = split(new)
                b = _stabilize_ma(b)
                new = join(rest, b)
                change = float(np.linalg.norm(new - theta) / max(np.linalg.norm(new), 1e-300))
                theta = new
                eps = armax_residuals(phi_arx, target, rest, b, L)
                sse = float(eps @ eps)
                if sse < best[0]:
                    best = (sse, theta)
                if change < cfg.els_tolerance:
                    converged = True
                    break
            if not converged:
                warnings.warn(
                    f"ELS for output '{name}' stopped after {iterations} iterations "
                    f"(relative change {change:.3g})",
                    NoConvergenceWarning,
                    stacklevel=2,
                )
                sse, theta = best
        thetas.append(theta)
        reports.append(OutputFitReport(name, sse, iterations, converged, change, cond))

    template = zero_model(orders, scaler, data.input_names, data.output_names, cfg.fit_intercept)
    report = FitReport(reports, n_rows)
    model = template.with_theta(
        np.vstack(thetas),
        metadata=_fit_metadata(template, data, "batch_els", cfg, report.to_dict()),
    )
    model.metadata["stability"] = [r.to_dict() for r in check_stability(model)]
    return model, report


def zero_model(
    orders: ArmaxOrders,
    scaler: ScalerParams,
    input_names: Sequence[str],
    output_names: Sequence[str],
    intercept: bool,
) -> ArmaxModel:
    n_in, n_out = len(input_names), len(output_names)
    return ArmaxModel(
        orders=orders,
        alpha=np.zeros((n_out, orders.na)),
        gamma=np.zeros((n_out, n_in, orders.nb)),
        beta=np.zeros((n_out, orders.nc)),
        intercept=np.zeros(n_out),
        scaler=scaler,
        input_names=input_names,
        output_names=output_names,
        with_intercept=intercept,
    )


def _fit_metadata(template, data, method, cfg, report=None) -> dict:
    return {
        "method": method,
        "fit_config": cfg.to_dict(),
        "training_window": {
            "t0": data.t0,
            "n_samples": data.n_samples,
            "sample_period": data.sample_period,
        },
        "report": report,
        "timestamps": {"fitted_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")},
    }


# -- recursive ELS ----------------------------------------------------------------


@dataclass
class RlsState:
    """Per-output coefficient vectors and covariances; mutated by updates."""

    orders: ArmaxOrders
    n_inputs: int
    theta: np.ndarray  # (n_out, p)
    P: np.ndarray  # (n_out, p, p)
    forgetting: float
    intercept: bool
    residual_convention: str = "a_priori"
    check_pd: bool = False
    count: int = 0
    eps_buffer: np.ndarray = field(default=None)  # (n_out, nc), most recent first

    def __post_init__(self):
        if self.eps_buffer is None:
            self.eps_buffer = np.zeros((self.theta.shape[0], self.orders.nc))

    @property
    def n_outputs(self) -> int:
        return self.theta.shape[0]

    @property
    def n_params(self) -> int:
        return self.theta.shape[1]

    def regressor(self, ylag: np.ndarray, ulag: np.ndarray) -> np.ndarray:
        """Rows for the next update: measured lags plus buffered residuals."""
        return regressor_rows(self.orders, ylag, ulag, self.eps_buffer, self.intercept)


def rls_init(
    source: ArmaxModel | ArmaxOrders,
    cfg: FitConfig = FitConfig(),
    *,
    n_inputs: int | None = None,
    n_outputs: int = 1,
) -> RlsState:
    """Warm start from a model, or cold start at zero from orders alone."""
    if isinstance(source, ArmaxModel):
        orders, n_in, n_out = source.orders, source.n_inputs, source.n_outputs
        theta = source.theta_matrix().copy()
        intercept = source.with_intercept
    else:
        if n_inputs is None:
            raise ValueError("cold start needs n_inputs")
        orders, n_in, n_out = source, n_inputs, n_outputs
        intercept = cfg.fit_intercept
        theta = np.zeros((n_out, orders.n_params(n_in, intercept)))
    p = theta.shape[1]
    P = np.repeat(cfg.initial_covariance_scale * np.eye(p)[None], n_out, axis=0)
    return RlsState(
        orders=orders,
        n_inputs=n_in,
        theta=theta,
        P=P,
        forgetting=cfg.forgetting,
        intercept=intercept,
        residual_convention=cfg.residual_convention,
        check_pd=cfg.check_pd,
    )


def rls_update(state: RlsState, phi, y) -> tuple[RlsState, np.ndarray]:
    """One exponentially weighted RLS step for every output.

    Updates ``state`` in place (and returns it) together with the a-priori
    residual ``y - phi @ theta_before``.
    """
    phi = np.asarray(phi, dtype=float).reshape(state.n_outputs, state.n_params)
    y = np.asarray(y, dtype=float).reshape(state.n_outputs)
    lam = state.forgetting

    with np.errstate(all="ignore"):  # non-finite results are reported below
        Pphi = np.einsum("mij,mj->mi", state.P, phi)
        denom = lam + np.einsum("mi,mi->m", phi, Pphi)
        K = Pphi / denom[:, None]
        e_prior = y - np.einsum("mi,mi->m", phi, state.theta)
        theta = state.theta + K * e_prior[:, None]
        P = (state.P - K[:, :, None] * Pphi[:, None, :]) / lam
        P = 0.5 * (P + np.transpose(P, (0, 2, 1)))

    if not (np.isfinite(theta).all() and np.isfinite(P).all()):
        raise NonFiniteUpdate(f"RLS update {state.count} produced non-finite values; re-initialise")
    if state.check_pd:
        try:
            np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise NonFiniteUpdate(f"covariance lost positive definiteness at update {state.count}") from None

    state.theta, state.P = theta, P
    state.count += 1
    if state.orders.nc:
        if state.residual_convention == "a_priori":
            e_fill = e_prior
        else:
            e_fill = y - np.einsum("mi,mi->m", phi, theta)
        state.eps_buffer = np.concatenate([e_fill[:, None], state.eps_buffer[:, :-1]], axis=1)
    return state, e_prior


def finalize_rls(state: RlsState, template: ArmaxModel) -> ArmaxModel:
    """Freeze the recursive estimate into an immutable model."""
    if (
        state.orders != template.orders
        or state.n_inputs != template.n_inputs
        or state.n_outputs != template.n_outputs
        or state.intercept != template.with_intercept
    ):
        raise DimensionMismatch(
            f"RLS state ({state.orders}, {state.n_inputs} in, {state.n_outputs} out) "
            f"does not match template ({template.orders}, {template.n_inputs} in, {template.n_outputs} out)"
        )
    meta = dict(template.metadata)
    meta["rls"] = {"updates": state.count, "forgetting": state.forgetting}
    model = template.with_theta(state.theta.copy(), metadata=meta)
    model.metadata["stability"] = [r.to_dict() for r in check_stability(model)]
    return model


def fit_recursive(
    data: TimeSeriesDataset,
    source: ArmaxModel | ArmaxOrders,
    cfg: FitConfig = FitConfig(),
    *,
    scaler: ScalerParams | None = None,
) -> tuple[ArmaxModel, RlsState]:
    """Run recursive ELS over every usable row of ``data``.

    A warm start keeps the source model's scaler; a cold start fits one
    (unless ``scaler`` is given).
    """
    if isinstance(source, ArmaxModel):
        template = source
        state = rls_init(source, cfg)
    else:
        source.validate_for(data.n_inputs)
        scaler = scaler or fit_scaler(data, cfg.scaler_mode)
        template = zero_model(source, scaler, data.input_names, data.output_names, cfg.fit_intercept)
        template = template.with_theta(
            template.theta_matrix(), metadata=_fit_metadata(template, data, "recursive_els", cfg)
        )
        state = rls_init(source, cfg, n_inputs=data.n_inputs, n_outputs=data.n_outputs)
    o = template.orders
    L = o.max_lag
    if data.n_samples <= L:
        raise InsufficientData(f"{data.n_samples} samples do not cover max lag {L}")
    ds = apply_scaler(template.scaler, data)
    ys, us = ds.outputs, ds.inputs
    for t in range(L, ds.n_samples):
        ylag = ys[t - o.na : t][::-1].T
        ulag = us[t - o.nk - o.nb + 1 : t - o.nk + 1][::-1].T if ds.n_inputs else np.zeros((0, o.nb))
        rls_update(state, state.regressor(ylag, ulag), ys[t])
    return finalize_rls(state, template), state


# -- training-event selection ----------------------------------------------------


def spectral_entropy(data: TimeSeriesDataset) -> float:
    """Mean normalised Shannon entropy of the output power spectra.

    Flat (white-like) spectra score near 1, single tones near 0.
    """
    ent = []
    for y in data.outputs.T:
        y = y - y.mean()
        power = np.abs(np.fft.rfft(y))[1:] ** 2
        total = power.sum()
        if total <= 0 or power.size < 2:
            ent.append(0.0)
            continue
        p = power / total
        p = p[p > 0]
        ent.append(float(-(p * np.log(p)).sum() / np.log(power.size)))
    return float(np.mean(ent))


def select_training_event(datasets: Sequence[TimeSeriesDataset]) -> int:
    """Index of the record with the richest output spectrum."""
    if not datasets:
        raise ValueError("no datasets to choose from")
    scores = [spectral_entropy(d) for d in datasets]
    return int(np.argmax(scores))
