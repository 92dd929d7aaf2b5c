"""Datasets, channel roles, affine scaling and CSV ingestion/export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ChannelCountMismatch,
    EmptyDataset,
    EmptyFile,
    MissingColumn,
    NonFiniteValue,
    NonUniformSampling,
)

# relative jitter tolerated on the time column
SAMPLING_JITTER = 1e-3


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Aligned input/output samples on a uniform time grid.

    ``inputs`` is ``(N, n_inputs)`` and ``outputs`` is ``(N, n_outputs)``.
    When ``allow_missing`` is set, output rows may hold NaN to mark samples
    whose measurement was unavailable (monitoring streams); inputs must
    always be finite.
    """

    sample_period: float
    inputs: np.ndarray
    outputs: np.ndarray
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]
    t0: float = 0.0
    allow_missing: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        outputs = np.asarray(self.outputs, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs.reshape(-1, 1) if inputs.size else inputs.reshape(len(outputs), 0)
        if outputs.ndim == 1:
            outputs = outputs.reshape(-1, 1)
        object.__setattr__(self, "inputs", _frozen(inputs))
        object.__setattr__(self, "outputs", _frozen(outputs))
        object.__setattr__(self, "input_names", tuple(self.input_names))
        object.__setattr__(self, "output_names", tuple(self.output_names))

        if not (self.sample_period > 0 and math.isfinite(self.sample_period)):
            raise ValueError(f"sample_period must be positive, got {self.sample_period}")
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise ChannelCountMismatch(
                f"inputs have {self.inputs.shape[0]} rows, outputs {self.outputs.shape[0]}"
            )
        if self.outputs.shape[0] < 1:
            raise EmptyDataset("dataset needs at least one sample")
        if len(self.input_names) != self.inputs.shape[1]:
            raise ChannelCountMismatch("input_names do not match input columns")
        if len(self.output_names) != self.outputs.shape[1]:
            raise ChannelCountMismatch("output_names do not match output columns")
        _check_finite(self.inputs, self.input_names, "input")
        if not self.allow_missing:
            _check_finite(self.outputs, self.output_names, "output")

    @property
    def n_samples(self) -> int:
        return self.outputs.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.outputs.shape[1]

    @property
    def time(self) -> np.ndarray:
        return self.t0 + self.sample_period * np.arange(self.n_samples)

    @property
    def channel_names(self) -> tuple[str, ...]:
        return self.input_names + self.output_names

    def window(self, start: int, stop: int | None = None) -> "TimeSeriesDataset":
        """Rows ``[start, stop)`` as a new dataset with shifted ``t0``."""
        stop = self.n_samples if stop is None else stop
        return replace(
            self,
            inputs=self.inputs[start:stop],
            outputs=self.outputs[start:stop],
            t0=self.t0 + start * self.sample_period,
        )

    def with_values(self, inputs=None, outputs=None, **kw) -> "TimeSeriesDataset":
        return replace(
            self,
            inputs=self.inputs if inputs is None else inputs,
            outputs=self.outputs if outputs is None else outputs,
            **kw,
        )

    def missing_mask(self) -> np.ndarray:
        """Boolean per row, True where any output is absent."""
        return ~np.isfinite(self.outputs).all(axis=1)


def _check_finite(values: np.ndarray, names: Sequence[str], role: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        row, col = map(int, np.argwhere(bad)[0])
        raise NonFiniteValue(f"non-finite {role} value in column '{names[col]}' at row {row}")


# -- scaling -------------------------------------------------------------------


class ScalerMode(str, Enum):
    ZSCORE = "zscore"
    MINMAX = "minmax"
    IDENTITY = "identity"


@dataclass(frozen=True)
class ScalerParams:
    """Per-channel affine map ``x -> (x - offset) / gain``.

    Channels are ordered inputs first, then outputs, matching
    :attr:`TimeSeriesDataset.channel_names`.
    """

    mode: ScalerMode
    offset: np.ndarray
    gain: np.ndarray
    n_inputs: int

    def __post_init__(self):
        object.__setattr__(self, "mode", ScalerMode(self.mode))
        object.__setattr__(self, "offset", _frozen(np.atleast_1d(self.offset)))
        object.__setattr__(self, "gain", _frozen(np.atleast_1d(self.gain)))
        if self.offset.shape != self.gain.shape:
            raise ChannelCountMismatch("offset and gain lengths differ")
        if not (self.gain > 0).all():
            raise ValueError("scaler gains must be positive")
        if not 0 <= self.n_inputs <= self.offset.size:
            raise ValueError("n_inputs out of range")

    @classmethod
    def identity(cls, n_inputs: int, n_outputs: int) -> "ScalerParams":
        n = n_inputs + n_outputs
        return cls(ScalerMode.IDENTITY, np.zeros(n), np.ones(n), n_inputs)

    @property
    def n_channels(self) -> int:
        return self.offset.size

    @property
    def n_outputs(self) -> int:
        return self.n_channels - self.n_inputs

    @property
    def input_offset(self) -> np.ndarray:
        return self.offset[: self.n_inputs]

    @property
    def input_gain(self) -> np.ndarray:
        return self.gain[: self.n_inputs]

    @property
    def output_offset(self) -> np.ndarray:
        return self.offset[self.n_inputs :]

    @property
    def output_gain(self) -> np.ndarray:
        return self.gain[self.n_inputs :]

    def scale_inputs(self, u):
        return (np.asarray(u, dtype=float) - self.input_offset) / self.input_gain

    def scale_outputs(self, y):
        return (np.asarray(y, dtype=float) - self.output_offset) / self.output_gain

    def unscale_inputs(self, us):
        return np.asarray(us, dtype=float) * self.input_gain + self.input_offset

    def unscale_outputs(self, ys):
        return np.asarray(ys, dtype=float) * self.output_gain + self.output_offset

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "offset": self.offset.tolist(),
            "gain": self.gain.tolist(),
            "n_inputs": self.n_inputs,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScalerParams":
        return cls(d["mode"], d["offset"], d["gain"], int(d["n_inputs"]))


def fit_scaler(data: TimeSeriesDataset, mode: ScalerMode | str = ScalerMode.ZSCORE) -> ScalerParams:
    """Fit per-channel offsets and gains.

    zscore uses the mean and population standard deviation, minmax uses
    ``min`` and ``max - min``. Constant channels fall back to gain 1 with the
    channel value as offset. Missing output samples (NaN) are ignored.
    """
    mode = ScalerMode(mode)
    values = np.hstack([data.inputs, data.outputs])
    n_in = data.n_inputs
    if mode is ScalerMode.IDENTITY:
        return ScalerParams.identity(n_in, data.n_outputs)
    if data.n_samples < 2:
        raise EmptyDataset(f"{mode.value} scaling needs at least 2 samples, got {data.n_samples}")

    offset = np.empty(values.shape[1])
    gain = np.empty(values.shape[1])
    for k in range(values.shape[1]):
        col = values[:, k]
        col = col[np.isfinite(col)]
        if col.size == 0:
            raise EmptyDataset(f"channel '{data.channel_names[k]}' has no finite samples")
        if mode is ScalerMode.ZSCORE:
            off, g = col.mean(), col.std()
        else:
            off, g = col.min(), col.max() - col.min()
        if col.max() == col.min() or not g > 0:
            off, g = col[0], 1.0
        offset[k], gain[k] = off, g
    return ScalerParams(mode, offset, gain, n_in)


def _check_scaler_fits(params: ScalerParams, data: TimeSeriesDataset) -> None:
    if params.n_inputs != data.n_inputs or params.n_outputs != data.n_outputs:
        raise ChannelCountMismatch(
            f"scaler has {params.n_inputs}+{params.n_outputs} channels, "
            f"data has {data.n_inputs}+{data.n_outputs}"
        )


def apply_scaler(params: ScalerParams, data: TimeSeriesDataset) -> TimeSeriesDataset:
    _check_scaler_fits(params, data)
    return data.with_values(params.scale_inputs(data.inputs), params.scale_outputs(data.outputs))


def invert_scaler(params: ScalerParams, data: TimeSeriesDataset) -> TimeSeriesDataset:
    _check_scaler_fits(params, data)
    return data.with_values(params.unscale_inputs(data.inputs), params.unscale_outputs(data.outputs))


# -- CSV -------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelRoles:
    """Which CSV columns are time, inputs and outputs."""

    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    time: str = "t"

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChannelRoles":
        return cls(inputs=d.get("inputs", ()), outputs=d["outputs"], time=d.get("time", "t"))

    def to_dict(self) -> dict:
        return {"time": self.time, "inputs": list(self.inputs), "outputs": list(self.outputs)}


def _parse_cell(text: str, column: str, row: int) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise NonFiniteValue(f"unparseable value {text!r} in column '{column}' at row {row}") from None


def ingest_csv(
    path: str | Path,
    roles: ChannelRoles | Mapping,
    *,
    allow_missing_outputs: bool = False,
) -> TimeSeriesDataset:
    """Read a CSV recording into a validated dataset.

    Lines starting with ``#`` are treated as comments (provenance headers).
    Rows are sorted by time and the sample period is inferred from the time
    column, which must be uniform to within 0.1 %. Empty output fields are
    accepted only with ``allow_missing_outputs``; they become NaN.
    """
    if not isinstance(roles, ChannelRoles):
        roles = ChannelRoles.from_dict(roles)
    path = Path(path)
    with path.open(newline="") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise EmptyFile(f"{path}: no header row")
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    rows = list(reader)
    if not rows:
        raise EmptyFile(f"{path}: header present but no data rows")

    index = {name: k for k, name in enumerate(header)}
    for name in (roles.time, *roles.inputs, *roles.outputs):
        if name not in index:
            raise MissingColumn(f"{path}: column '{name}' not found in header {header}")

    def column(name: str) -> np.ndarray:
        k = index[name]
        out = np.empty(len(rows))
        for r, row in enumerate(rows):
            if k >= len(row):
                raise MissingColumn(f"{path}: row {r} has no field for column '{name}'")
            out[r] = _parse_cell(row[k], name, r)
        return out

    t = column(roles.time)
    u = np.column_stack([column(c) for c in roles.inputs]) if roles.inputs else np.empty((len(rows), 0))
    y = np.column_stack([column(c) for c in roles.outputs])

    _check_finite(t.reshape(-1, 1), (roles.time,), "time")
    _check_finite(u, roles.inputs, "input")
    if not allow_missing_outputs:
        _check_finite(y, roles.outputs, "output")

    order = np.argsort(t, kind="stable")
    t, u, y = t[order], u[order], y[order]
    dt = infer_sample_period(t, column=roles.time)
    return TimeSeriesDataset(
        sample_period=dt,
        inputs=u,
        outputs=y,
        input_names=roles.inputs,
        output_names=roles.outputs,
        t0=float(t[0]),
        allow_missing=allow_missing_outputs,
        meta={"source": str(path)},
    )


def infer_sample_period(t: np.ndarray, column: str = "t") -> float:
    if t.size < 2:
        raise NonUniformSampling(f"column '{column}': need at least 2 rows to infer the sample period")
    dt = (t[-1] - t[0]) / (t.size - 1)
    steps = np.diff(t)
    jitter = np.abs(steps - dt)
    worst = int(np.argmax(jitter))
    if not dt > 0 or jitter[worst] > SAMPLING_JITTER * dt:
        raise NonUniformSampling(
            f"column '{column}': step {steps[worst]:.6g} s at row {worst + 1} "
            f"deviates from mean step {dt:.6g} s by more than {SAMPLING_JITTER:.1%}"
        )
    return float(dt)


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else f"{x:.17g}"


def export_csv(
    data: TimeSeriesDataset,
    path: str | Path,
    *,
    time_name: str = "t",
    comments: Sequence[str] = (),
) -> Path:
    """Write ``data`` with 17 significant digits so ingestion is bit-exact.

    Missing outputs are written as empty fields.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow([time_name, *data.input_names, *data.output_names])
        for t, u, y in zip(data.time, data.inputs, data.outputs):
            writer.writerow([_fmt(t), *map(_fmt, u), *map(_fmt, y)])
    return path


def roles_of(data: TimeSeriesDataset) -> ChannelRoles:
    return ChannelRoles(inputs=data.input_names, outputs=data.output_names)
