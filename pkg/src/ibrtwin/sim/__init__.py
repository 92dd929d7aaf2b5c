"""Desk-scale plant simulators used as data sources and oracles."""

from .emt import dip_envelope, dip_waveform, simulate_emt_dip
from .linear import simulate_linear_truth, truth_model
from .phasor import simulate_gfl, simulate_gfm
from .scenario import (
    FAULT_DIPS,
    CoefficientStep,
    DipScenario,
    Excursion,
    GflConfig,
    GfmConfig,
    LinearTruth,
    LoadBank,
    LoadFilter,
    Multisine,
    PlantKind,
    Prbs,
    ScenarioConfig,
    Step,
    config_hash,
    generate_event_suite,
)


def simulate(scenario: ScenarioConfig):
    """Dispatch to the simulator matching ``scenario.kind``."""
    if scenario.kind is PlantKind.GFM:
        return simulate_gfm(scenario.plant, scenario)
    if scenario.kind is PlantKind.GFL:
        return simulate_gfl(scenario.plant, scenario)
    if scenario.kind is PlantKind.LINEAR_TRUTH:
        return simulate_linear_truth(scenario.plant, scenario)
    return simulate_emt_dip(scenario)


__all__ = [
    "FAULT_DIPS",
    "CoefficientStep",
    "DipScenario",
    "Excursion",
    "GflConfig",
    "GfmConfig",
    "LinearTruth",
    "LoadBank",
    "LoadFilter",
    "Multisine",
    "PlantKind",
    "Prbs",
    "ScenarioConfig",
    "Step",
    "config_hash",
    "dip_envelope",
    "dip_waveform",
    "generate_event_suite",
    "simulate",
    "simulate_emt_dip",
    "simulate_gfl",
    "simulate_gfm",
    "simulate_linear_truth",
    "truth_model",
]
