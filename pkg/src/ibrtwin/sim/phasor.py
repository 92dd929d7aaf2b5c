"""Phasor-domain single-inverter playback plants integrated with fixed-step RK4.

Inputs are continuous-time functions evaluated at the RK4 stage times
(right limits at the start of each interval, left limits at its end), so
step events on the sample grid are integrated without smearing.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import VoltageCollapse
from ..timeseries import TimeSeriesDataset
from .scenario import GflConfig, GfmConfig, PlantKind, ScenarioConfig, channel_signal, scenario_rngs


def _stage_inputs(scenario: ScenarioConfig, channel: str, base: float):
    """Input values at t_k (right), t_k + h/2 and t_k + h (left) for every interval."""
    n, h = scenario.n_samples, scenario.sample_period
    t = np.arange(n) * h
    ev = scenario.events
    start = base + channel_signal(ev, channel, t)
    mid = base + channel_signal(ev, channel, t + 0.5 * h)
    end = base + channel_signal(ev, channel, t + h, left=True)
    return start, mid, end


def _add_noise(scenario: ScenarioConfig, names, columns, rng):
    out = []
    for name, col in zip(names, columns):
        s = scenario.sigma_for(name)
        out.append(col + rng.normal(0.0, s, col.size) if s > 0 else col)
    return np.column_stack(out)


def simulate_gfm(cfg: GfmConfig, scenario: ScenarioConfig) -> TimeSeriesDataset:
    """Droop GFM: inputs (P, Q), outputs (V, f).

    ``dPf/dt = (P - Pf)/T_f``, ``f = f0 - m_p (Pf - P_ref)``, and likewise
    for Q and V.
    """
    if scenario.kind is not PlantKind.GFM:
        raise ValueError(f"expected a GFM scenario, got {scenario.kind.value}")
    n, h = scenario.n_samples, scenario.sample_period
    P0, P1, P2 = _stage_inputs(scenario, "P", cfg.P_ref)
    Q0, Q1, Q2 = _stage_inputs(scenario, "Q", cfg.Q_ref)
    k = h / cfg.T_f

    def integrate(u0, u1, u2):
        x = np.empty(n)
        xv = float(u0[0])
        for i in range(n):
            x[i] = xv
            a0, a1, a2 = u0[i], u1[i], u2[i]
            k1 = a0 - xv
            k2 = a1 - (xv + 0.5 * k * k1)
            k3 = a1 - (xv + 0.5 * k * k2)
            k4 = a2 - (xv + k * k3)
            xv = xv + k * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        return x

    Pf = integrate(P0, P1, P2)
    Qf = integrate(Q0, Q1, Q2)
    f = cfg.f0 - cfg.m_p * (Pf - cfg.P_ref)
    V = cfg.V0 - cfg.m_q * (Qf - cfg.Q_ref)

    _, _, noise_rng = scenario_rngs(scenario.rng_seed)
    u = _add_noise(scenario, ("P", "Q"), (P0, Q0), noise_rng)
    y = _add_noise(scenario, ("V", "f"), (V, f), noise_rng)
    return TimeSeriesDataset(
        sample_period=h,
        inputs=u,
        outputs=y,
        input_names=("P", "Q"),
        output_names=("V", "f"),
        meta={"scenario": scenario.name, "rng_seed": scenario.rng_seed, "kind": "GFM"},
    )


def simulate_gfl(cfg: GflConfig, scenario: ScenarioConfig) -> TimeSeriesDataset:
    """PLL + current-loop GFL: inputs (V, f), outputs (P, Q).

    States are the PLL angle error ``d`` (grid minus PLL angle), the PLL
    integrator ``x`` (rad/s) and the dq currents in the PLL frame::

        dd/dt  = 2 pi (f - f0) - (k_p V sin d + x)
        dx/dt  = k_i V sin d
        di/dt  = (i* - i) / T_i,   i_d* = P_ref/V,  i_q* = -Q_ref/V
        P = V (cos d i_d + sin d i_q),  Q = V (sin d i_d - cos d i_q)
    """
    if scenario.kind is not PlantKind.GFL:
        raise ValueError(f"expected a GFL scenario, got {scenario.kind.value}")
    n, h = scenario.n_samples, scenario.sample_period
    V0, V1, V2 = _stage_inputs(scenario, "V", cfg.V0)
    F0, F1, F2 = _stage_inputs(scenario, "f", cfg.f0)
    for arr in (V0, V1, V2):
        bad = np.flatnonzero(arr <= cfg.v_collapse)
        if bad.size:
            raise VoltageCollapse(
                f"terminal voltage {arr[bad[0]]:.3g} p.u. at t={bad[0] * h:.6g} s is at or below "
                f"{cfg.v_collapse} p.u.; current references are ill-conditioned"
            )

    two_pi = 2 * math.pi
    kp, ki, Ti, f0 = cfg.k_p_pll, cfg.k_i_pll, cfg.T_i, cfg.f0
    Pr, Qr = cfg.P_ref, cfg.Q_ref

    def deriv(d, x, i_d, i_q, V, F):
        s = V * math.sin(d)
        return (
            two_pi * (F - f0) - (kp * s + x),
            ki * s,
            (Pr / V - i_d) / Ti,
            (-Qr / V - i_q) / Ti,
        )

    d, x = 0.0, two_pi * (F0[0] - f0)
    i_d, i_q = Pr / V0[0], -Qr / V0[0]
    P = np.empty(n)
    Q = np.empty(n)
    for k in range(n):
        V = V0[k]
        c, s = math.cos(d), math.sin(d)
        P[k] = V * (c * i_d + s * i_q)
        Q[k] = V * (s * i_d - c * i_q)
        a = deriv(d, x, i_d, i_q, V0[k], F0[k])
        b = deriv(d + 0.5 * h * a[0], x + 0.5 * h * a[1], i_d + 0.5 * h * a[2], i_q + 0.5 * h * a[3], V1[k], F1[k])
        c3 = deriv(d + 0.5 * h * b[0], x + 0.5 * h * b[1], i_d + 0.5 * h * b[2], i_q + 0.5 * h * b[3], V1[k], F1[k])
        e = deriv(d + h * c3[0], x + h * c3[1], i_d + h * c3[2], i_q + h * c3[3], V2[k], F2[k])
        d += h * (a[0] + 2 * b[0] + 2 * c3[0] + e[0]) / 6.0
        x += h * (a[1] + 2 * b[1] + 2 * c3[1] + e[1]) / 6.0
        i_d += h * (a[2] + 2 * b[2] + 2 * c3[2] + e[2]) / 6.0
        i_q += h * (a[3] + 2 * b[3] + 2 * c3[3] + e[3]) / 6.0

    _, _, noise_rng = scenario_rngs(scenario.rng_seed)
    u = _add_noise(scenario, ("V", "f"), (V0, F0), noise_rng)
    y = _add_noise(scenario, ("P", "Q"), (P, Q), noise_rng)
    return TimeSeriesDataset(
        sample_period=h,
        inputs=u,
        outputs=y,
        input_names=("V", "f"),
        output_names=("P", "Q"),
        meta={"scenario": scenario.name, "rng_seed": scenario.rng_seed, "kind": "GFL"},
    )
