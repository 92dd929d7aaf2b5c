"""Continual validation of a deployed model with automatic recalibration.

Samples stream through :class:`Monitor` one at a time. Each measured sample
yields a one-step prediction and a residual; rolling RMSE over the last
``window`` residuals is checked at fixed block boundaries, and ``patience``
consecutive violations trigger a refit on the most recent history.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .armax import ArmaxModel, FeedbackMode, _one_step, check_stability, predict_horizon
from .errors import FitFailed, IbrTwinError, InsufficientHistory, OutOfOrderSample
from .estimation import FitConfig, fit_batch_els, fit_recursive
from .metrics import rmse
from .timeseries import TimeSeriesDataset


class RecalMethod(str, Enum):
    BATCH_ELS = "BatchEls"
    WARM_RLS = "WarmRls"


class EventKind(str, Enum):
    WINDOW_OK = "WindowOk"
    WINDOW_VIOLATION = "WindowViolation"
    RECAL_TRIGGERED = "RecalTriggered"
    RECAL_COMPLETED = "RecalCompleted"
    RECAL_FAILED = "RecalFailed"
    FEEDBACK_LOST = "FeedbackLost"
    FEEDBACK_RESTORED = "FeedbackRestored"
    STREAM_ERROR = "StreamError"


@dataclass(frozen=True)
class MonitorConfig:
    window: int = 200
    threshold: float = 0.05  # scaled units
    patience: int = 3
    recal_history: int = 2000
    recal_method: RecalMethod = RecalMethod.WARM_RLS
    cooldown: int | None = None  # defaults to recal_history
    refit_interval: int | None = None  # scheduled refits, off by default
    auto_recalibrate: bool = True
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.recal_history < self.window:
            raise ValueError(f"recal_history ({self.recal_history}) must be >= window ({self.window})")
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if self.cooldown is not None and self.cooldown < 0:
            raise ValueError("cooldown must be non-negative")
        if self.refit_interval is not None and self.refit_interval < 1:
            raise ValueError("refit_interval must be positive")
        object.__setattr__(self, "recal_method", RecalMethod(self.recal_method))

    @property
    def cooldown_samples(self) -> int:
        return self.recal_history if self.cooldown is None else self.cooldown

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "fit"}
        d["recal_method"] = self.recal_method.value
        d["threshold"] = self.threshold if math.isfinite(self.threshold) else "inf"
        d["fit"] = self.fit.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MonitorConfig":
        d = dict(d)
        if "fit" in d:
            d["fit"] = FitConfig.from_dict(d["fit"])
        if "threshold" in d:
            d["threshold"] = float(d["threshold"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown monitor config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class MonitorEvent:
    seq: int
    index: int
    kind: EventKind
    model_version: int
    rmse: float | None = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "index": self.index,
            "kind": self.kind.value,
            "model_version": self.model_version,
            "rmse": self.rmse,
            "details": self.details,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MonitorEvent":
        return cls(d["seq"], d["index"], EventKind(d["kind"]), d["model_version"], d.get("rmse"), d.get("details", {}))


def write_event_log(events: Iterable[MonitorEvent], path: str | Path, *, seed=None, config_hash=None) -> Path:
    """One JSON object per line, stamped with the producing seed and config hash."""
    path = Path(path)
    with path.open("w") as fh:
        for ev in events:
            d = ev.to_dict()
            d["seed"] = seed
            d["config_hash"] = config_hash
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    return path


def read_event_log(path: str | Path) -> list[MonitorEvent]:
    with Path(path).open() as fh:
        return [MonitorEvent.from_dict(json.loads(line)) for line in fh if line.strip()]


def replay_versions(events: Iterable[MonitorEvent], initial: int = 0) -> list[tuple[int, int]]:
    """``(first index, version)`` pairs for every activation recorded in a log."""
    timeline = [(0, initial)]
    for ev in events:
        if ev.kind is EventKind.RECAL_COMPLETED:
            timeline.append((ev.index + 1, ev.details["new_version"]))
    return timeline


@dataclass(frozen=True)
class RecalRequested:
    start: int
    stop: int  # exclusive


@dataclass(frozen=True)
class StepResult:
    index: int
    yhat: np.ndarray  # original units
    residual: np.ndarray | None  # scaled units; None when the output was absent
    rolling_rmse: float | None  # set only at window boundaries
    action: RecalRequested | None = None


@dataclass
class MonitorRun:
    yhat: np.ndarray
    residuals: np.ndarray
    events: list[MonitorEvent]
    models: list[ArmaxModel]
    timeline: list[tuple[int, int]]

    def count(self, kind: EventKind) -> int:
        return sum(ev.kind is kind for ev in self.events)


class Monitor:
    """Single-stream monitor state machine.

    Samples are addressed by absolute stream index. The first ``max_lag``
    samples only seed the lag buffers and must carry measured outputs.
    """

    def __init__(self, model: ArmaxModel, cfg: MonitorConfig = MonitorConfig()):
        self.cfg = cfg
        self.models: list[ArmaxModel] = [model]
        self.version = 0
        self.timeline: list[tuple[int, int]] = [(0, 0)]
        self.events: list[MonitorEvent] = []
        self.violations = 0
        self.cooldown_until = -1  # triggers suppressed while index <= cooldown_until
        self.last_index = -1
        self._feedback_lost = False
        self._resid: deque = deque(maxlen=cfg.window)
        keep = cfg.recal_history + model.orders.max_lag + 1
        self._raw_u: deque = deque(maxlen=keep)
        self._raw_y: deque = deque(maxlen=keep)
        self._since_refit = 0
        self._reset_lags(model)

    # -- state helpers ---------------------------------------------------------

    @property
    def model(self) -> ArmaxModel:
        return self.models[self.version]

    @property
    def cooldown(self) -> int:
        """Samples of trigger suppression left after the current one."""
        return max(0, self.cooldown_until - self.last_index)

    def _start_cooldown(self, t: int) -> None:
        self.cooldown_until = t + self.cfg.cooldown_samples

    def _reset_lags(self, model: ArmaxModel) -> None:
        o = model.orders
        self._ylag: deque = deque(maxlen=max(o.na, 1))
        self._ulag: deque = deque(maxlen=max(o.input_window, 1))
        self._elag: deque = deque(maxlen=max(o.nc, 1))
        self._seen = 0

    def _log(self, index: int, kind: EventKind, rmse_value=None, **details) -> MonitorEvent:
        ev = MonitorEvent(len(self.events), index, kind, self.version, rmse_value, details)
        self.events.append(ev)
        return ev

    def _lags(self, model: ArmaxModel):
        o = model.orders
        n_out = model.n_outputs
        ylag = np.array(self._ylag)[::-1].T if o.na else np.zeros((n_out, 0))
        if model.n_inputs and o.nb:
            u = np.array(self._ulag)  # oldest first, current last
            ulag = u[len(u) - o.nk - o.nb : len(u) - o.nk][::-1].T
        else:
            ulag = np.zeros((model.n_inputs, o.nb))
        elag = np.array(self._elag)[::-1].T if o.nc else np.zeros((n_out, 0))
        return ylag, ulag, elag

    def rolling_rmse(self) -> float:
        """Largest per-output RMSE over the residuals currently in the window."""
        if not self._resid:
            return math.nan
        r = np.array(self._resid)
        return float(np.max(np.sqrt(np.mean(r**2, axis=0))))

    # -- streaming -------------------------------------------------------------

    def step(self, u, y=None, index: int | None = None) -> StepResult:
        """Process one sample. ``y`` may be ``None`` or contain NaN when unmeasured."""
        t = self.last_index + 1 if index is None else int(index)
        if t <= self.last_index:
            raise OutOfOrderSample(f"sample {t} arrived after {self.last_index}")
        model = self.model
        sc = model.scaler
        u = np.asarray(u, dtype=float).reshape(model.n_inputs)
        y_raw = np.full(model.n_outputs, np.nan) if y is None else np.asarray(y, dtype=float).reshape(model.n_outputs)
        present = bool(np.isfinite(y_raw).all())
        self.last_index = t
        self._raw_u.append(u)
        self._raw_y.append(y_raw if present else np.full(model.n_outputs, np.nan))

        us = sc.scale_inputs(u)
        self._ulag.append(us)
        L = model.orders.max_lag
        if self._seen < L:
            if not present:
                raise InsufficientHistory(f"sample {t} has no measured output but is needed to seed the lags")
            ys = sc.scale_outputs(y_raw)
            self._ylag.append(ys)
            self._elag.append(np.zeros(model.n_outputs))
            self._seen += 1
            return StepResult(t, sc.unscale_outputs(ys), None, None)

        pred = _one_step(model, *self._lags(model))
        residual = None
        if present:
            ys = sc.scale_outputs(y_raw)
            residual = ys - pred
            self._ylag.append(ys)
            self._elag.append(residual)
            self._resid.append(residual)
            if self._feedback_lost:
                self._feedback_lost = False
                self._log(t, EventKind.FEEDBACK_RESTORED)
        else:
            self._ylag.append(pred)
            self._elag.append(np.zeros(model.n_outputs))
            if not self._feedback_lost:
                self._feedback_lost = True
                self._log(t, EventKind.FEEDBACK_LOST)
        self._seen += 1
        yhat = sc.unscale_outputs(pred)

        self._since_refit += 1

        action = None
        value = None
        W = self.cfg.window
        if present and t % W == W - 1 and len(self._resid) == W:
            value = self.rolling_rmse()
            action = self._evaluate(t, value)
        if action is None and self.cfg.refit_interval and self._since_refit >= self.cfg.refit_interval and t > self.cooldown_until:
            action = self._request(t, value, reason="scheduled")
        if action is not None and self.cfg.auto_recalibrate:
            self.recalibrate(t)
        return StepResult(t, yhat, residual, value, action)

    def _evaluate(self, t: int, value: float) -> RecalRequested | None:
        if value > self.cfg.threshold:
            self.violations += 1
            self._log(t, EventKind.WINDOW_VIOLATION, value, violations=self.violations, cooldown=self.cooldown)
        else:
            self.violations = 0
            self._log(t, EventKind.WINDOW_OK, value)
            return None
        if self.violations >= self.cfg.patience and t > self.cooldown_until:
            return self._request(t, value, reason="threshold")
        return None

    def _request(self, t: int, value, reason: str) -> RecalRequested:
        n = min(len(self._raw_y), self.cfg.recal_history)
        req = RecalRequested(t + 1 - n, t + 1)
        self._log(t, EventKind.RECAL_TRIGGERED, value, reason=reason, history=[req.start, req.stop])
        return req

    # -- recalibration ---------------------------------------------------------

    def history(self) -> TimeSeriesDataset:
        """The last ``recal_history`` samples in original units."""
        n = self.cfg.recal_history
        if len(self._raw_y) < n:
            raise InsufficientHistory(f"only {len(self._raw_y)} samples buffered, {n} needed")
        u = np.array(self._raw_u)[-n:]
        y = np.array(self._raw_y)[-n:]
        if not np.isfinite(y).all():
            raise InsufficientHistory("recalibration history contains unmeasured outputs")
        m = self.model
        return TimeSeriesDataset(
            sample_period=1.0,
            inputs=u,
            outputs=y,
            input_names=m.input_names,
            output_names=m.output_names,
            t0=float(self.last_index + 1 - n),
        )

    def _refit(self, hist: TimeSeriesDataset) -> ArmaxModel:
        cfg = self.cfg
        try:
            if cfg.recal_method is RecalMethod.BATCH_ELS:
                new, _ = fit_batch_els(hist, self.model.orders, cfg.fit)
            else:
                new, _ = fit_recursive(hist, self.model, cfg.fit)
        except IbrTwinError as exc:
            raise FitFailed(f"{type(exc).__name__}: {exc}") from exc
        if not np.isfinite(new.theta_matrix()).all():
            raise FitFailed("refit produced non-finite coefficients")
        unstable = [r.output for r in check_stability(new) if not r.stable]
        if unstable:
            raise FitFailed(f"refit is unstable for outputs {unstable}")
        return new

    def recalibrate(self, t: int | None = None) -> ArmaxModel:
        """Refit on recent history and activate the result from the next sample.

        Failures are logged and leave the active model in place.
        """
        t = self.last_index if t is None else t
        try:
            hist = self.history()
            new = self._refit(hist)
        except (InsufficientHistory, FitFailed) as exc:
            self._log(t, EventKind.RECAL_FAILED, error=type(exc).__name__, message=str(exc))
            self.violations = 0
            self._start_cooldown(t)
            return self.model

        before = _history_rmse(self.model, hist)
        after = _history_rmse(new, hist)
        prev = self.version
        new = replace(new, metadata={**new.metadata, "version": prev + 1, "activated_at": t + 1})
        self.models.append(new)
        self.version = prev + 1
        self.timeline.append((t + 1, self.version))
        self._log(
            t,
            EventKind.RECAL_COMPLETED,
            max(after),
            previous_version=prev,
            new_version=self.version,
            method=self.cfg.recal_method.value,
            rmse_before=before,
            rmse_after=after,
        )
        self.violations = 0
        self._start_cooldown(t)
        self._since_refit = 0
        self._resid.clear()
        self._reseed(prev, new, hist)
        return new

    def _reseed(self, prev: int, new: ArmaxModel, hist: TimeSeriesDataset) -> None:
        """Move the lag buffers onto the new model's scaling and residual sequence."""
        old = self.models[prev]
        o = new.orders
        y_fb = old.scaler.unscale_outputs(np.array(self._ylag)) if old.orders.na else np.empty((0, new.n_outputs))
        raw_u = np.array(self._raw_u)
        self._reset_lags(new)
        if o.na:
            y_orig = np.array(self._raw_y)[-o.na :] if len(y_fb) < o.na else y_fb[-o.na :]
            for row in new.scaler.scale_outputs(y_orig):
                self._ylag.append(row)
        for row in new.scaler.scale_inputs(raw_u[-max(o.input_window, 1) :]):
            self._ulag.append(row)
        if o.nc:
            pred = predict_horizon(new, hist, FeedbackMode.measured(), check_names=False)
            for row in pred.residuals[-o.nc :]:
                self._elag.append(row)
        self._seen = o.max_lag

    # -- batch driver ----------------------------------------------------------

    def run(self, data: TimeSeriesDataset, start_index: int = 0) -> MonitorRun:
        n_out = self.model.n_outputs
        yhat = np.empty((data.n_samples, n_out))
        resid = np.full((data.n_samples, n_out), np.nan)
        for k in range(data.n_samples):
            res = self.step(data.inputs[k], data.outputs[k], index=start_index + k)
            yhat[k] = res.yhat
            if res.residual is not None:
                resid[k] = res.residual
        return MonitorRun(yhat, resid, list(self.events), list(self.models), list(self.timeline))


def _history_rmse(model: ArmaxModel, hist: TimeSeriesDataset) -> list[float]:
    """Per-output one-step RMSE on the history window, original units."""
    pred = predict_horizon(model, hist, FeedbackMode.measured(), check_names=False)
    L = pred.start
    return [rmse(hist.outputs[L:, m], pred.yhat[L:, m]) for m in range(model.n_outputs)]


def run_monitor(model: ArmaxModel, data: TimeSeriesDataset, cfg: MonitorConfig = MonitorConfig()) -> MonitorRun:
    return Monitor(model, cfg).run(data)
