"""Exposure-history functionals and calibrated exposure prediction.

An exposure history is summarized at each visit by a functional of the
measurements strictly before that visit, treating the measured series as
a left-constant step function (each value holds from its own time until
the next). The first visit has no history, so by convention the
functional there is the first measurement itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, LengthMismatch, NonMonotoneTimes


def _check_times(times: np.ndarray, values: np.ndarray) -> None:
    if times.shape[0] != values.shape[0]:
        raise LengthMismatch(f"times ({times.shape[0]}) and values ({values.shape[0]}) differ")
    if times.shape[0] == 0:
        raise LengthMismatch("need at least one time point")
    if times.shape[0] > 1 and not np.all(np.diff(times) > 0):
        raise NonMonotoneTimes("times must be strictly increasing")


def cumulative_average(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Cumulative time-weighted average of the history at each visit.

    ``out[0] = values[0]``, and for j >= 1::

        out[j] = sum_{k<j} (t[k+1] - t[k]) * values[k] / (t[j] - t[0])

    which is the integral of the left-constant step function over
    ``[t[0], t[j])`` divided by the elapsed span. Invariant under affine
    changes of the time axis.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    _check_times(times, values)
    out = np.empty_like(values)
    out[0] = values[0]
    if times.shape[0] > 1:
        segments = np.diff(times) * values[:-1]
        out[1:] = np.cumsum(segments) / (times[1:] - times[0])
    return out


def moving_average(times: np.ndarray, values: np.ndarray, window: float) -> np.ndarray:
    """Windowed time-weighted average of the history at each visit.

    At visit j the left-constant step function is integrated over
    ``(t[j] - window, t[j]]`` intersected with the observed history
    ``[t[0], t[j])`` and divided by the covered length, so partial
    windows at the start of follow-up are renormalized rather than
    padded. With a window covering the whole history this equals
    :func:`cumulative_average`. The first visit keeps the first-point
    convention ``out[0] = values[0]``.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    _check_times(times, values)
    if not window > 0:
        raise ValueError(f"window must be positive, got {window}")
    m = times.shape[0]
    out = np.empty_like(values)
    out[0] = values[0]
    for j in range(1, m):
        lo = max(times[j] - window, times[0])
        starts = np.maximum(times[:j], lo)
        ends = np.minimum(times[1 : j + 1], times[j])
        overlap = np.clip(ends - starts, 0.0, None)
        out[j] = overlap @ values[:j] / (times[j] - lo)
    return out


@dataclass(frozen=True)
class HistoryFunctional:
    """A named choice of history summary: cumulative or moving average."""

    kind: str
    window: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("cumavg", "movavg"):
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.kind == "movavg":
            if self.window is None or not self.window > 0:
                raise ValueError("movavg requires a positive window")
        elif self.window is not None:
            raise ValueError("cumavg takes no window")

    @classmethod
    def cumavg(cls) -> "HistoryFunctional":
        return cls("cumavg")

    @classmethod
    def movavg(cls, window: float) -> "HistoryFunctional":
        return cls("movavg", float(window))

    @classmethod
    def parse(cls, text: str) -> "HistoryFunctional":
        """Parse CLI notation: ``cumavg`` or ``movavg:WINDOW``."""
        if text == "cumavg":
            return cls.cumavg()
        if text.startswith("movavg:"):
            try:
                return cls.movavg(float(text.split(":", 1)[1]))
            except ValueError:
                raise ValueError(f"bad moving-average window in {text!r}") from None
        raise ValueError(f"unknown functional {text!r}; use 'cumavg' or 'movavg:WINDOW'")

    @property
    def label(self) -> str:
        return "cumavg" if self.kind == "cumavg" else f"movavg:{self.window:g}"

    def apply(self, times: np.ndarray, values: np.ndarray) -> np.ndarray:
        if self.kind == "cumavg":
            return cumulative_average(times, values)
        return moving_average(times, values, self.window)

    def weights(self, times: np.ndarray) -> np.ndarray:
        """Matrix mapping point values to the functional: out = weights @ values.

        Row j holds the linear weights the functional puts on each
        measurement, used for derivative propagation.
        """
        times = np.asarray(times, dtype=float)
        m = times.shape[0]
        w = np.zeros((m, m))
        w[0, 0] = 1.0
        for j in range(1, m):
            lo = times[0] if self.kind == "cumavg" else max(times[j] - self.window, times[0])
            starts = np.maximum(times[:j], lo)
            ends = np.minimum(times[1 : j + 1], times[j])
            w[j, :j] = np.clip(ends - starts, 0.0, None) / (times[j] - lo)
        return w


def predict_true_exposure(
    alpha: np.ndarray,
    surrogate: np.ndarray,
    times: np.ndarray,
    covariates: np.ndarray,
) -> np.ndarray:
    """Calibrated exposure prediction from the linear measurement model.

    Computes ``alpha0 + alpha1*C + alpha2*t + alpha3*C*t + W @ alpha4``
    pointwise. ``alpha`` must have length ``4 + p`` where ``p`` is the
    covariate count.
    """
    alpha = np.asarray(alpha, dtype=float)
    surrogate = np.asarray(surrogate, dtype=float)
    times = np.asarray(times, dtype=float)
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates.reshape(surrogate.shape[0], -1)
    if surrogate.shape[0] != times.shape[0] or covariates.shape[0] != times.shape[0]:
        raise LengthMismatch("surrogate, times and covariates must have equal length")
    if alpha.shape[0] != 4 + covariates.shape[1]:
        raise DimensionMismatch(
            f"alpha has length {alpha.shape[0]}, expected {4 + covariates.shape[1]}"
        )
    return (
        alpha[0]
        + alpha[1] * surrogate
        + alpha[2] * times
        + alpha[3] * surrogate * times
        + covariates @ alpha[4:]
    )
