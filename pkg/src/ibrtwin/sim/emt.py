"""Point-on-wave voltage dip generator driving linear residential load currents."""

from __future__ import annotations

import numpy as np
import scipy.signal

from ..timeseries import TimeSeriesDataset
from .scenario import DipScenario, LoadBank, PlantKind, ScenarioConfig, scenario_rngs

PREROLL_CYCLES = 30


def dip_envelope(dip: DipScenario, n: int, h: float, start: int = 0) -> np.ndarray:
    """Voltage magnitude per sample; dip edges are snapped to the nearest sample."""
    k = np.arange(start, start + n)
    k_on = int(round(dip.dip_start / h))
    k_off = int(round((dip.dip_start + dip.dip_duration) / h))
    env = np.full(n, dip.v_pre, dtype=float)
    env[(k >= k_on) & (k < k_off)] = dip.v_dip
    env[k >= k_off] = dip.v_post
    return env


def dip_waveform(dip: DipScenario, n: int, h: float, start: int = 0) -> np.ndarray:
    t = np.arange(start, start + n) * h
    return dip_envelope(dip, n, h, start) * np.sin(2 * np.pi * dip.fundamental * t)


def measured_rms(envelope: np.ndarray, h: float, tau: float, floor: float = 0.1) -> np.ndarray:
    """RMS voltage as seen by a control loop with first-order lag ``tau``."""
    if tau <= 0:
        return np.maximum(envelope, floor)
    a = np.exp(-h / tau)
    zi = np.array([a * envelope[0]])
    out, _ = scipy.signal.lfilter([1.0 - a], [1.0, -a], envelope, zi=zi)
    return np.maximum(out, floor)


def discretize(num, den, h: float) -> tuple[np.ndarray, np.ndarray]:
    num = np.atleast_1d(np.asarray(num, dtype=float))
    if not np.any(num):
        return np.zeros(1), np.ones(1)
    b, a = scipy.signal.bilinear(num, den, fs=1.0 / h)
    return b, a


def simulate_emt_dip(scenario: ScenarioConfig, load_bank: LoadBank | None = None) -> TimeSeriesDataset:
    """Voltage waveform ``v`` in, load currents out.

    Uses the scenario's first :class:`DipScenario` event (none means a flat
    ``v_pre = 1`` waveform). Each load filter starts in sinusoidal steady
    state thanks to a pre-roll that is discarded.
    """
    if scenario.kind is not PlantKind.EMT_DIP:
        raise ValueError(f"expected an EmtDip scenario, got {scenario.kind.value}")
    bank = load_bank or scenario.plant
    dips = scenario.events_of(DipScenario)
    dip = dips[0] if dips else DipScenario(1.0, 1.0, 1, 1.0, dip_start=scenario.duration * 10)
    n, h = scenario.n_samples, scenario.sample_period
    pre = int(round(PREROLL_CYCLES / dip.fundamental / h))

    env = dip_envelope(dip, pre + n, h, start=-pre)
    v_full = dip_waveform(dip, pre + n, h, start=-pre)
    v_rms = measured_rms(env, h, bank.control_tau) / dip.v_pre
    _, _, noise_rng = scenario_rngs(scenario.rng_seed)

    currents = []
    for load in bank.loads:
        b, a = discretize(load.num, load.den, h)
        drive = v_full if load.voltage_exponent == 2.0 else v_full * v_rms ** (load.voltage_exponent - 2.0)
        i = scipy.signal.lfilter(b, a, drive)[pre:]
        currents.append(i)
    v = v_full[pre:]

    names = tuple(load.name for load in bank.loads)
    sv = scenario.sigma_for("v")
    if sv > 0:
        v = v + noise_rng.normal(0.0, sv, n)
    y = np.column_stack(currents) if currents else np.empty((n, 0))
    for m, name in enumerate(names):
        s = scenario.sigma_for(name)
        if s > 0:
            y[:, m] += noise_rng.normal(0.0, s, n)
    return TimeSeriesDataset(
        sample_period=h,
        inputs=v.reshape(-1, 1),
        outputs=y,
        input_names=("v",),
        output_names=names,
        meta={"scenario": scenario.name, "rng_seed": scenario.rng_seed, "kind": "EmtDip"},
    )
