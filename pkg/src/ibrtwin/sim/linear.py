"""Ground-truth ARMAX plant with known coefficients (exact oracle for estimation tests)."""

from __future__ import annotations

import numpy as np

from ..armax import ArmaxModel, check_stability
from ..errors import UnstableTruth
from ..timeseries import TimeSeriesDataset
from .scenario import (
    CoefficientStep,
    LinearTruth,
    PlantKind,
    Prbs,
    ScenarioConfig,
    channel_signal,
    prbs_signal,
    scenario_rngs,
)


def truth_model(truth: LinearTruth, step: CoefficientStep | None = None) -> ArmaxModel:
    alpha = truth.alpha if step is None or step.alpha is None else step.alpha
    gamma = truth.gamma if step is None or step.gamma is None else step.gamma
    beta = truth.beta if step is None or step.beta is None else step.beta
    alpha_arr = np.asarray(alpha, dtype=float)
    n_out = 1 if alpha_arr.ndim <= 1 else alpha_arr.shape[0]
    if len(np.asarray(gamma).reshape(-1)) == 0:
        gamma = np.zeros((n_out, len(truth.input_names), 0))
    return ArmaxModel.from_coefficients(
        alpha,
        gamma,
        beta if len(np.asarray(beta).reshape(-1)) else None,
        nk=truth.nk,
        input_names=truth.input_names,
        output_names=truth.output_names,
    )


def simulate_linear_truth(truth: LinearTruth, scenario: ScenarioConfig) -> TimeSeriesDataset:
    """Run the exact ARMAX recursion driven by the scenario inputs.

    ``scenario.noise_sigma`` is the innovation standard deviation. Output
    lags before the record come from ``truth.y0`` (most recent first), all
    other pre-record values are zero. ``CoefficientStep`` events switch the
    coefficients from their sample index on.
    """
    if scenario.kind is not PlantKind.LINEAR_TRUTH:
        raise ValueError(f"expected a LinearTruth scenario, got {scenario.kind.value}")
    steps = sorted(scenario.events_of(CoefficientStep), key=lambda s: s.index)
    regimes = [(0, truth_model(truth))] + [(s.index, truth_model(truth, s)) for s in steps]
    for start, model in regimes:
        for rep in check_stability(model):
            if not rep.stable:
                raise UnstableTruth(
                    f"truth regime from sample {start}: output '{rep.output}' has AR root "
                    f"magnitude {rep.max_root:.4g} >= 1"
                )

    base = regimes[0][1]
    o, n_in, n_out = base.orders, base.n_inputs, base.n_outputs
    n, h = scenario.n_samples, scenario.sample_period
    event_rng, process_rng, _ = scenario_rngs(scenario.rng_seed)

    t = np.arange(n) * h
    u = np.zeros((n, n_in))
    for j, name in enumerate(truth.input_names):
        u[:, j] = channel_signal(scenario.events, name, t)
        for ev in scenario.events_of(Prbs):
            if ev.channel == name:
                u[:, j] += prbs_signal(ev, n, event_rng)
    e = process_rng.normal(0.0, 1.0, (n, n_out)) * scenario.sigma_for(truth.output_names[0])

    # pad the front with pre-record lags
    pad = max(o.max_lag, max((m.orders.max_lag for _, m in regimes), default=0), 1)
    y = np.zeros((n + pad, n_out))
    y0 = np.asarray(truth.y0, dtype=float).reshape(-1, n_out) if len(truth.y0) else np.zeros((0, n_out))
    for i, row in enumerate(y0[:pad]):
        y[pad - 1 - i] = row
    up = np.vstack([np.zeros((pad, n_in)), u])
    ep = np.vstack([np.zeros((pad, n_out)), e])

    bounds = [r[0] for r in regimes[1:]] + [n]
    for (start, model), stop in zip(regimes, bounds):
        mo = model.orders
        for k in range(max(start, 0), min(stop, n)):
            t_ = k + pad
            val = np.sum(model.alpha * y[t_ - mo.na : t_][::-1].T, axis=1)
            if n_in and mo.nb:
                ul = up[t_ - mo.nk - mo.nb + 1 : t_ - mo.nk + 1][::-1].T
                val = val + np.sum(model.gamma * ul[None], axis=(1, 2))
            val = val + np.sum(model.beta * ep[t_ - mo.nc : t_][::-1].T, axis=1)
            y[t_] = val + ep[t_]

    return TimeSeriesDataset(
        sample_period=h,
        inputs=u,
        outputs=y[pad:],
        input_names=truth.input_names,
        output_names=truth.output_names,
        meta={"scenario": scenario.name, "rng_seed": scenario.rng_seed, "kind": "LinearTruth"},
    )
