"""Prediction error metrics and cross-scenario distribution reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptySuite, LengthMismatch


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.shape != yhat.shape:
        raise LengthMismatch(f"series lengths differ: {y.size} vs {yhat.size}")
    if y.size == 0:
        raise LengthMismatch("series must hold at least one sample")
    return y, yhat


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def nrmse_pct(y, yhat) -> float:
    """RMSE as a percentage of the measured signal's peak-to-peak range."""
    y, yhat = _pair(y, yhat)
    err = rmse(y, yhat)
    span = float(y.max() - y.min())
    if span == 0:
        return 0.0 if err == 0 else math.inf
    return 100.0 * err / span


def fit_pct(y, yhat) -> float:
    """``100 (1 - |y - yhat| / |y - mean(y)|)``; at most 100."""
    y, yhat = _pair(y, yhat)
    num = float(np.linalg.norm(y - yhat))
    den = float(np.linalg.norm(y - y.mean()))
    if den == 0:
        return 100.0 if num == 0 else -math.inf
    return 100.0 * (1.0 - num / den)


@dataclass
class ErrorSummary:
    scenario: str
    channels: tuple[str, ...]
    rmse: np.ndarray
    nrmse_pct: np.ndarray
    fit_pct: np.ndarray

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "channels": {
                ch: {
                    "rmse": float(self.rmse[k]),
                    "nrmse_pct": float(self.nrmse_pct[k]),
                    "fit_pct": float(self.fit_pct[k]),
                }
                for k, ch in enumerate(self.channels)
            },
            "mean_rmse": self.mean_rmse,
        }


def summarize_errors(scenario: str, channels: Sequence[str], y: np.ndarray, yhat: np.ndarray) -> ErrorSummary:
    """Per-channel metrics over rows where the measurement exists."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    yhat = np.atleast_2d(np.asarray(yhat, dtype=float))
    if y.shape != yhat.shape:
        raise LengthMismatch(f"shape {y.shape} != {yhat.shape}")
    r, n, f = [], [], []
    for k in range(y.shape[1]):
        ok = np.isfinite(y[:, k]) & np.isfinite(yhat[:, k])
        r.append(rmse(y[ok, k], yhat[ok, k]))
        n.append(nrmse_pct(y[ok, k], yhat[ok, k]))
        f.append(fit_pct(y[ok, k], yhat[ok, k]))
    return ErrorSummary(scenario, tuple(channels), np.array(r), np.array(n), np.array(f))


@dataclass
class DistributionStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float

    @classmethod
    def of(cls, values) -> "DistributionStats":
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            raise EmptySuite("no values to summarise")
        # linear interpolation between order statistics (Hyndman-Fan type 7)
        q = np.percentile(v, [0, 25, 50, 75, 100], method="linear")
        return cls(*map(float, q), float(v.mean()))

    def ordered(self) -> bool:
        return self.min <= self.q1 <= self.median <= self.q3 <= self.max

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SuiteReport:
    """Aggregate statistics per channel, both groupings of the box-plot data."""

    results: list[ErrorSummary]
    rmse: dict[str, DistributionStats]
    nrmse_pct: dict[str, DistributionStats]
    mean_rmse: DistributionStats
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "n_scenarios": len(self.results),
            "per_channel": {
                ch: {"rmse": self.rmse[ch].to_dict(), "nrmse_pct": self.nrmse_pct[ch].to_dict()}
                for ch in self.rmse
            },
            "per_scenario_mean_rmse": self.mean_rmse.to_dict(),
            "scenarios": [r.to_dict() for r in self.results],
        }

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    def write_boxplot_csv(self, path: str | Path) -> Path:
        """Rows ``(channel, scenario, mean_rmse, nrmse_pct)``; channel ``__mean__`` averages channels."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "scenario", "mean_rmse", "nrmse_pct"])
            for r in self.results:
                for k, ch in enumerate(r.channels):
                    w.writerow([ch, r.scenario, f"{r.rmse[k]:.17g}", f"{r.nrmse_pct[k]:.17g}"])
                w.writerow(["__mean__", r.scenario, f"{r.mean_rmse:.17g}", f"{float(np.mean(r.nrmse_pct)):.17g}"])
        return path


def summarize_suite(results: Sequence[ErrorSummary], meta: dict | None = None) -> SuiteReport:
    if not results:
        raise EmptySuite("cannot summarise an empty suite")
    channels = results[0].channels
    rm, nr = {}, {}
    for k, ch in enumerate(channels):
        rm[ch] = DistributionStats.of([r.rmse[k] for r in results])
        nr[ch] = DistributionStats.of([r.nrmse_pct[k] for r in results])
    mean = DistributionStats.of([r.mean_rmse for r in results])
    return SuiteReport(list(results), rm, nr, mean, dict(meta or {}))
