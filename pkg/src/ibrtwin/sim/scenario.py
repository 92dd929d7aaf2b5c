"""Scenario descriptions, disturbance events and randomized event suites."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Any, Mapping, Sequence, Union

import numpy as np

# -- plant configurations ------------------------------------------------------


@dataclass(frozen=True)
class GfmConfig:
    """CERTS-style droop grid-forming inverter (P, Q in -> V, f out)."""

    f0: float = 60.0
    V0: float = 1.0
    m_p: float = 0.3  # Hz per p.u. active power
    m_q: float = 0.05  # p.u. voltage per p.u. reactive power
    T_f: float = 0.02  # power measurement filter, s
    P_ref: float = 0.5
    Q_ref: float = 0.1

    def __post_init__(self):
        if not (self.m_p > 0 and self.m_q > 0 and self.T_f > 0):
            raise ValueError("GFM droop gains and filter time constant must be positive")


@dataclass(frozen=True)
class GflConfig:
    """PLL-synchronised current-source inverter (V, f in -> P, Q out)."""

    f0: float = 60.0
    V0: float = 1.0
    k_p_pll: float = 50.0
    k_i_pll: float = 900.0
    T_i: float = 0.01
    P_ref: float = 0.8
    Q_ref: float = 0.2
    v_collapse: float = 0.1

    def __post_init__(self):
        if not (self.k_p_pll > 0 and self.k_i_pll > 0 and self.T_i > 0):
            raise ValueError("GFL PLL gains and current-loop time constant must be positive")


@dataclass(frozen=True)
class LinearTruth:
    """Known ARMAX coefficients used as an exact-oracle plant.

    ``alpha``, ``gamma`` and ``beta`` follow :meth:`ArmaxModel.from_coefficients`
    conventions; ``y0`` gives the initial output lags (most recent first).
    """

    alpha: tuple = (0.5,)
    gamma: tuple = ()
    beta: tuple = ()
    nk: int = 0
    y0: tuple = ()
    input_names: tuple = ("u1",)
    output_names: tuple = ("y1",)


@dataclass(frozen=True)
class LoadFilter:
    """Continuous-time admittance ``num(s)/den(s)`` from voltage to current.

    ``voltage_exponent`` is the exponent ``np`` of an exponential load
    ``P ~ V**np``: 2 is constant impedance (linear), 1 constant current and
    0 constant power. Other values scale the drive voltage by the measured
    RMS voltage to the power ``np - 2``.
    """

    name: str
    num: tuple
    den: tuple
    voltage_exponent: float = 2.0


def default_loads() -> tuple[LoadFilter, ...]:
    w = 2 * np.pi * 60.0
    tau = 0.75 / w  # power factor 0.8 lagging
    wc = 2 * np.pi * 500.0
    wn = 2 * np.pi * 300.0
    return (
        LoadFilter("i_HVAC", (1.25,), (tau, 1.0), voltage_exponent=1.0),
        LoadFilter("i_PV", (-0.6 * wc,), (1.0, wc), voltage_exponent=0.0),
        LoadFilter("i_EV", (0.4 * wn**2,), (1.0, 2 * 0.7 * wn, wn**2), voltage_exponent=0.0),
    )


@dataclass(frozen=True)
class LoadBank:
    """Residential loads fed by one voltage waveform.

    Converter controls see the RMS voltage through a first-order lag of time
    constant ``control_tau``.
    """

    loads: tuple[LoadFilter, ...] = field(default_factory=default_loads)
    control_tau: float = 0.005


class PlantKind(str, Enum):
    GFM = "GFM"
    GFL = "GFL"
    LINEAR_TRUTH = "LinearTruth"
    EMT_DIP = "EmtDip"


_PLANT_TYPES = {
    PlantKind.GFM: GfmConfig,
    PlantKind.GFL: GflConfig,
    PlantKind.LINEAR_TRUTH: LinearTruth,
    PlantKind.EMT_DIP: LoadBank,
}

# -- events ------------------------------------------------------------------------


@dataclass(frozen=True)
class Step:
    channel: str
    time: float
    magnitude: float


@dataclass(frozen=True)
class Excursion:
    """Damped sinusoid ``A exp(-damping (t-t0)) sin(2 pi freq (t-t0))`` from ``time`` on."""

    channel: str
    time: float
    amplitude: float
    damping: float = 0.5
    freq: float = 0.7


@dataclass(frozen=True)
class Multisine:
    """Ambient fluctuation: sum of sines scaled so the peak bound is ``amplitude``."""

    channel: str
    amplitude: float
    freqs: tuple
    phases: tuple


@dataclass(frozen=True)
class Prbs:
    """Pseudo-random binary sequence of +/- ``amplitude`` held for ``hold`` samples."""

    channel: str
    amplitude: float = 1.0
    hold: int = 1


@dataclass(frozen=True)
class CoefficientStep:
    """Replace linear-truth coefficients from sample ``index`` on (None keeps them)."""

    index: int
    alpha: tuple | None = None
    gamma: tuple | None = None
    beta: tuple | None = None


@dataclass(frozen=True)
class DipScenario:
    v_pre: float = 1.0
    v_dip: float = 0.6
    dip_cycles: float = 6
    v_post: float = 1.0
    dip_start: float = 0.1
    fundamental: float = 60.0

    def __post_init__(self):
        for name in ("v_pre", "v_dip", "v_post"):
            v = getattr(self, name)
            if not 0 < v <= 1.5:
                raise ValueError(f"{name}={v} outside (0, 1.5] p.u.")
        if self.dip_cycles < 1:
            raise ValueError("dip_cycles must be >= 1")

    @property
    def dip_duration(self) -> float:
        return self.dip_cycles / self.fundamental


# Voltage variations used to emulate upstream fault conditions.
FAULT_DIPS = (
    DipScenario(1.0, 0.6, 6, 1.0),
    DipScenario(1.0, 0.5, 10, 1.0),
    DipScenario(1.0, 0.5, 10, 0.8),
    DipScenario(1.0, 0.5, 6, 0.8),
)

Event = Union[Step, Excursion, Multisine, Prbs, CoefficientStep, DipScenario]
_EVENT_TYPES = {cls.__name__: cls for cls in (Step, Excursion, Multisine, Prbs, CoefficientStep, DipScenario)}


# -- scenario ---------------------------------------------------------------------------

PHASOR_PERIOD = 0.001
EMT_PERIOD = 0.0002


@dataclass(frozen=True)
class ScenarioConfig:
    kind: PlantKind
    plant: Any = None
    events: tuple = ()
    duration: float = 10.0
    sample_period: float = PHASOR_PERIOD
    # measurement noise std in channel units; scalar or {channel: sigma}.
    # For LinearTruth this is the innovation std instead.
    noise_sigma: float | Mapping[str, float] = 0.0
    rng_seed: int = 0
    name: str = ""

    def __post_init__(self):
        kind = PlantKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.plant is None:
            object.__setattr__(self, "plant", _PLANT_TYPES[kind]())
        elif not isinstance(self.plant, _PLANT_TYPES[kind]):
            raise TypeError(f"{kind.value} scenario needs a {_PLANT_TYPES[kind].__name__} plant config")
        object.__setattr__(self, "events", tuple(self.events))
        if isinstance(self.noise_sigma, Mapping):
            object.__setattr__(self, "noise_sigma", dict(self.noise_sigma))
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.sample_period > 0:
            raise ValueError("sample_period must be positive")

    @classmethod
    def default(cls, kind: PlantKind | str, **kw) -> "ScenarioConfig":
        """Typical per-kind sample period, duration and noise."""
        kind = PlantKind(kind)
        base = {
            PlantKind.GFM: dict(duration=10.0, sample_period=PHASOR_PERIOD, noise_sigma=1e-4),
            PlantKind.GFL: dict(duration=10.0, sample_period=PHASOR_PERIOD, noise_sigma=1e-4),
            PlantKind.LINEAR_TRUTH: dict(duration=5.0, sample_period=PHASOR_PERIOD, noise_sigma=0.01),
            PlantKind.EMT_DIP: dict(duration=0.5, sample_period=EMT_PERIOD, noise_sigma=1e-3),
        }[kind]
        base.update(kw)
        return cls(kind=kind, **base)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration / self.sample_period))

    def sigma_for(self, channel: str) -> float:
        if isinstance(self.noise_sigma, Mapping):
            return float(self.noise_sigma.get(channel, 0.0))
        return float(self.noise_sigma)

    def events_of(self, cls) -> list:
        return [e for e in self.events if isinstance(e, cls)]

    # -- serialization --

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "plant": _plant_to_dict(self.plant),
            "events": [{"type": type(e).__name__, **_plain(asdict(e))} for e in self.events],
            "duration": self.duration,
            "sample_period": self.sample_period,
            "noise_sigma": self.noise_sigma,
            "rng_seed": self.rng_seed,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        kind = PlantKind(d["kind"])
        plant = _plant_from_dict(kind, d.get("plant"))
        events = []
        for e in d.get("events", ()):
            e = dict(e)
            etype = _EVENT_TYPES.get(e.pop("type", None))
            if etype is None:
                raise ValueError(f"unknown event type in {e}")
            events.append(etype(**_tuplify(e)))
        kw = {k: d[k] for k in ("duration", "sample_period", "noise_sigma", "rng_seed", "name") if k in d}
        return cls(kind=kind, plant=plant, events=tuple(events), **kw)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _tuplify(obj):
    if isinstance(obj, dict):
        return {k: _tuplify(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return tuple(_tuplify(v) for v in obj)
    return obj


def _plant_to_dict(plant) -> dict:
    return _plain(asdict(plant))


def _plant_from_dict(kind: PlantKind, d: Mapping | None):
    cls = _PLANT_TYPES[kind]
    if d is None:
        return cls()
    d = _tuplify(dict(d))
    if cls is LoadBank and "loads" in d:
        d["loads"] = tuple(LoadFilter(**_tuplify(dict(x)) if isinstance(x, dict) else x) for x in d["loads"])
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def config_hash(obj: Any) -> str:
    """Short stable hash of a JSON-able config."""
    blob = json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- signals ---------------------------------------------------------------------------


def channel_signal(events: Sequence, channel: str, t: np.ndarray, *, left: bool = False) -> np.ndarray:
    """Sum of the continuous-time event perturbations on ``channel`` at times ``t``.

    Steps are right-continuous; ``left=True`` evaluates left limits instead,
    which fixed-step integrators need at the end of an interval.
    """
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    for e in events:
        if getattr(e, "channel", None) != channel:
            continue
        if isinstance(e, Step):
            on = (t > e.time) if left else (t >= e.time)
            out += np.where(on, e.magnitude, 0.0)
        elif isinstance(e, Excursion):
            tau = np.maximum(t - e.time, 0.0)
            out += np.where(
                t >= e.time, e.amplitude * np.exp(-e.damping * tau) * np.sin(2 * np.pi * e.freq * tau), 0.0
            )
        elif isinstance(e, Multisine):
            n = max(len(e.freqs), 1)
            for f, ph in zip(e.freqs, e.phases):
                out += (e.amplitude / n) * np.sin(2 * np.pi * f * t + ph)
    return out


def prbs_signal(event: Prbs, n: int, rng: np.random.Generator) -> np.ndarray:
    hold = max(int(event.hold), 1)
    n_blocks = -(-n // hold)
    bits = rng.integers(0, 2, size=n_blocks) * 2 - 1
    return event.amplitude * np.repeat(bits, hold)[:n].astype(float)


def scenario_rngs(seed: int, n: int = 3) -> list[np.random.Generator]:
    """Independent generators for event draws, process noise and measurement noise."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# -- suites ---------------------------------------------------------------------------------

STEP_RANGE = (0.02, 0.2)  # p.u.
EXCURSION_RANGE = (0.05, 0.5)  # Hz


def _grid_time(rng, lo, hi, h):
    return float(np.round(rng.uniform(lo, hi) / h) * h)


def _multisine(rng, channel, amplitude, fmin=0.1, fmax=5.0, n=5):
    freqs = tuple(float(f) for f in np.sort(rng.uniform(fmin, fmax, n)))
    phases = tuple(float(p) for p in rng.uniform(0, 2 * np.pi, n))
    return Multisine(channel, amplitude, freqs, phases)


def _signed(rng, lo, hi):
    return float(rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi))


def _gfm_events(rng, base: ScenarioConfig) -> list:
    T, h = base.duration, base.sample_period
    ev = []
    for ch in ("P", "Q"):
        for _ in range(int(rng.integers(1, 4))):
            ev.append(Step(ch, _grid_time(rng, 0.1 * T, 0.8 * T, h), _signed(rng, *STEP_RANGE)))
        ev.append(_multisine(rng, ch, 0.01))
    ev.append(Excursion("P", _grid_time(rng, 0.1 * T, 0.6 * T, h), _signed(rng, *STEP_RANGE),
                        damping=float(rng.uniform(0.3, 1.0)), freq=float(rng.uniform(0.5, 1.5))))
    return ev


def _gfl_events(rng, base: ScenarioConfig) -> list:
    T, h = base.duration, base.sample_period
    ev = []
    for _ in range(int(rng.integers(1, 3))):
        t_sag = _grid_time(rng, 0.1 * T, 0.6 * T, h)
        depth = float(rng.uniform(*STEP_RANGE))
        ev.append(Step("V", t_sag, -depth))
        t_rec = min(t_sag + float(rng.uniform(0.2, 2.0)), 0.9 * T)
        ev.append(Step("V", float(np.round(t_rec / h) * h), depth * float(rng.uniform(0.5, 1.0))))
    ev.append(Excursion("f", _grid_time(rng, 0.1 * T, 0.5 * T, h), _signed(rng, *EXCURSION_RANGE),
                        damping=0.5, freq=float(rng.uniform(0.5, 0.9))))
    ev.append(_multisine(rng, "V", 0.002))
    ev.append(_multisine(rng, "f", 0.005))
    return ev


def _random_dip(rng) -> DipScenario:
    return DipScenario(
        v_pre=1.0,
        v_dip=float(np.round(rng.uniform(0.4, 0.9), 2)),
        dip_cycles=int(rng.integers(3, 13)),
        v_post=float(np.round(rng.uniform(0.8, 1.0), 2)),
    )


def generate_event_suite(base: ScenarioConfig, count: int, seed: int) -> list[ScenarioConfig]:
    """Randomised disturbance scenarios derived from ``base``.

    Step magnitudes are drawn from [0.02, 0.2] p.u. and frequency excursion
    amplitudes from [0.05, 0.5] Hz. EMT suites start with the four reference fault
    dip cases. Output is a pure function of ``(base, count, seed)``.
    """
    if count < 2:
        raise ValueError("an event suite needs at least 2 scenarios")
    children = np.random.SeedSequence(seed).spawn(count)
    suite = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        scen_seed = int(child.generate_state(1)[0])
        if base.kind is PlantKind.GFM:
            events = _gfm_events(rng, base)
        elif base.kind is PlantKind.GFL:
            events = _gfl_events(rng, base)
        elif base.kind is PlantKind.EMT_DIP:
            events = [FAULT_DIPS[i] if i < len(FAULT_DIPS) else _random_dip(rng)]
        else:
            events = [Prbs("u1", 1.0, int(rng.integers(1, 4)))] if not base.events_of(Prbs) else []
        suite.append(
            replace(
                base,
                events=tuple(base.events) + tuple(events),
                rng_seed=scen_seed,
                name=f"{base.kind.value.lower()}-{i:03d}",
            )
        )
    return suite
