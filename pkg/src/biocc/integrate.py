"""Classical Runge-Kutta integration over small dense state vectors.

Two modes are supported: a fixed-step RK4 walk over a uniform time grid,
and a step-halving variant that recursively bisects any step whose
full-step result disagrees with the composition of two half steps by more
than a per-component absolute tolerance.  The halving mode is a cheap
safeguard for right-hand sides with kinks or short stiff transients.

State vectors are one-dimensional float64 arrays (any sequence of reals is
accepted).  Derivatives must stay finite: a NaN or Inf aborts the run with
the failing time and component attached, it is never clamped or skipped.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "IntegrationError",
    "IntegratorConfig",
    "Trajectory",
    "rk4_step",
    "integrate",
]

RhsFunction = Callable[[np.ndarray, float], Sequence[float]]

METHODS = ("rk4-fixed", "rk4-halving")

# Relative slack used when deciding whether t_end sits on the dt grid.
_GRID_EPS = 1e-9


class IntegrationError(RuntimeError):
    """A derivative or state stopped being finite during integration."""

    def __init__(self, message: str, t: float, component: int):
        super().__init__(f"{message} (t={t!r}, component={component})")
        self.t = t
        self.component = component


@dataclass(frozen=True)
class IntegratorConfig:
    """Grid and method settings for :func:`integrate`.

    dt and t_end are in the model's time unit (RTTs for the congestion
    models).  tolerance is the component-wise absolute acceptance bound of
    the halving mode and is required there; max_halvings caps the bisection
    depth per grid step.
    """

    dt: float
    t_end: float
    method: str = "rk4-fixed"
    tolerance: float | None = None
    max_halvings: int = 20

    def __post_init__(self):
        problems = []
        if not (self.dt > 0):
            problems.append("dt must be > 0")
        if not (self.t_end > 0):
            problems.append("t_end must be > 0")
        if self.dt > 0 and self.t_end > 0 and self.dt > self.t_end:
            problems.append("dt must not exceed t_end")
        if self.method not in METHODS:
            problems.append(f"method must be one of {METHODS}")
        if self.method == "rk4-halving":
            if self.tolerance is None or not (self.tolerance > 0):
                problems.append("tolerance must be > 0 for rk4-halving")
        if self.max_halvings < 0:
            problems.append("max_halvings must be >= 0")
        if problems:
            raise ValueError("invalid integrator config: " + "; ".join(problems))


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered samples of an integration run.

    times has shape (n,), states (n, dim).  Component names are used as CSV
    column headers.
    """

    times: np.ndarray
    states: np.ndarray
    names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.times)

    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path) -> None:
        """Write ``t,<name0>,<name1>,...`` rows at full float precision."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", *self.names])
            for t, row in zip(self.times, self.states):
                writer.writerow([float(t), *(float(v) for v in row)])


def _eval_rhs(rhs: RhsFunction, y: np.ndarray, t: float) -> np.ndarray:
    k = np.asarray(rhs(y, t), dtype=float)
    if k.shape != y.shape:
        raise ValueError(
            f"rhs returned shape {k.shape}, expected {y.shape}"
        )
    return k


def _rk4(rhs: RhsFunction, y: np.ndarray, t: float, h: float) -> np.ndarray:
    k1 = _eval_rhs(rhs, y, t)
    k2 = _eval_rhs(rhs, y + (0.5 * h) * k1, t + 0.5 * h)
    k3 = _eval_rhs(rhs, y + (0.5 * h) * k2, t + 0.5 * h)
    k4 = _eval_rhs(rhs, y + h * k3, t + h)
    y_new = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.isfinite(y_new).all():
        _diagnose_nonfinite(rhs, y, t, h, y_new)
    return y_new


def _diagnose_nonfinite(rhs, y, t, h, y_new) -> None:
    """Re-run the stages of a failed step to locate the bad component."""
    stages = ((t, y), (t + 0.5 * h, None), (t + 0.5 * h, None), (t + h, None))
    k = None
    ys = y
    for i, (ts, _) in enumerate(stages):
        if i == 1:
            ys = y + (0.5 * h) * k
        elif i == 2:
            ys = y + (0.5 * h) * k
        elif i == 3:
            ys = y + h * k
        if not np.isfinite(ys).all():
            comp = int(np.flatnonzero(~np.isfinite(ys))[0])
            raise IntegrationError("non-finite state", ts, comp)
        k = _eval_rhs(rhs, ys, ts)
        if not np.isfinite(k).all():
            comp = int(np.flatnonzero(~np.isfinite(k))[0])
            raise IntegrationError("non-finite derivative", ts, comp)
    # All stages finite: the combination overflowed.
    comp = int(np.flatnonzero(~np.isfinite(y_new))[0])
    raise IntegrationError("non-finite state", t + h, comp)


def rk4_step(rhs: RhsFunction, state, t: float, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step from t to t + dt.

    The input state is not modified; a fresh array is returned.
    """
    if not (dt > 0):
        raise ValueError("dt must be > 0")
    y = np.array(state, dtype=float)
    return _rk4(rhs, y, t, dt)


def _advance_halving(rhs, y, t, h, tol, depth_left) -> np.ndarray:
    full = _rk4(rhs, y, t, h)
    mid = _rk4(rhs, y, t, 0.5 * h)
    halves = _rk4(rhs, mid, t + 0.5 * h, 0.5 * h)
    if depth_left <= 0 or np.all(np.abs(full - halves) <= tol):
        return halves
    left = _advance_halving(rhs, y, t, 0.5 * h, tol, depth_left - 1)
    return _advance_halving(rhs, left, t + 0.5 * h, 0.5 * h, tol, depth_left - 1)


def _sample_times(dt: float, t_end: float) -> list[float]:
    """Grid 0, dt, 2dt, ... with a final sample pinned exactly at t_end."""
    ratio = t_end / dt
    n = int(math.floor(ratio))
    if ratio - n > 1.0 - _GRID_EPS:
        n += 1
    times = [i * dt for i in range(n + 1)]
    if t_end - times[-1] > _GRID_EPS * dt:
        times.append(t_end)
    else:
        times[-1] = t_end
    return times


def integrate(rhs: RhsFunction, state0, config: IntegratorConfig,
              names: Sequence[str] | None = None) -> Trajectory:
    """Integrate rhs from state0 over [0, t_end], sampling every dt.

    Samples land at t = 0, dt, 2dt, ... and always include t_end, even when
    it is not a multiple of dt (the last step is then shorter).  The result
    is a deterministic function of the inputs: identical calls produce
    bit-identical trajectories.
    """
    y = np.array(state0, dtype=float)
    if y.ndim != 1:
        raise ValueError("state0 must be one-dimensional")
    if not np.isfinite(y).all():
        raise ValueError("state0 must be finite")
    if names is None:
        names = tuple(f"x{i}" for i in range(len(y)))
    else:
        names = tuple(names)
        if len(names) != len(y):
            raise ValueError("names length must match state dimension")

    times = _sample_times(config.dt, config.t_end)
    states = np.empty((len(times), len(y)), dtype=float)
    states[0] = y
    halving = config.method == "rk4-halving"
    for i in range(1, len(times)):
        t0, t1 = times[i - 1], times[i]
        h = t1 - t0
        if halving:
            y = _advance_halving(rhs, y, t0, h, config.tolerance,
                                 config.max_halvings)
        else:
            y = _rk4(rhs, y, t0, h)
        states[i] = y
    return Trajectory(times=np.asarray(times, dtype=float), states=states,
                      names=names)
