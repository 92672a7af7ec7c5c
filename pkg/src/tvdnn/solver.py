"""Time integration of 1D conservation laws and rollout diagnostics.

The semi-discrete update is

    q_i <- q_i - (dt/dx) (f_{i+1/2} - f_{i-1/2})

per component, with either forward Euler (the training stepper) or the
classical four-stage Runge-Kutta method.  Rollouts record per-step total
variation and maximum face wave speed and flag divergence instead of
raising, so a blown-up trajectory can be inspected.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .tape import val

#: A state is declared diverged when any entry exceeds this or goes non-finite.
DIVERGENCE_LIMIT = 1e6

RK4_WEIGHTS = (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0)
RK4_STAGE_DT = (0.5, 0.5, 1.0)


@dataclass(frozen=True)
class Grid:
    """Uniform 1D mesh plus time discretization."""

    n_x: int
    dx: float
    dt: float
    n_t: int
    bc: str = "periodic"  # "periodic" | "neumann"

    def __post_init__(self):
        if self.dx <= 0 or self.dt <= 0:
            raise ValueError("dx and dt must be positive")
        if self.bc not in ("periodic", "neumann"):
            raise ValueError(f"unknown boundary kind {self.bc!r}")

    @property
    def x(self):
        return np.arange(self.n_x) * self.dx

    @property
    def t_final(self):
        return self.n_t * self.dt

    def cfl_bound(self, cfl_max):
        return cfl_max * self.dx / self.dt


@dataclass
class RolloutTrace:
    """Per-step record of a rollout; states are raw value copies."""

    states: list = field(default_factory=list)
    tv: list = field(default_factory=list)
    wave_speed_max: list = field(default_factory=list)
    face_states: list = field(default_factory=list)
    diverged: bool = False
    diverged_step: int | None = None

    @property
    def n_steps(self):
        return len(self.states) - 1


def total_variation(q, bc="periodic"):
    """Sum of absolute cell-to-cell jumps, all components together.

    Periodic fields include the wrap-around jump; Neumann fields do not.
    """
    q = np.asarray(val(q), dtype=np.float64)
    jumps = np.abs(q[:, 1:] - q[:, :-1]).sum()
    if bc == "periodic":
        jumps += np.abs(q[:, 0] - q[:, -1]).sum()
    return float(jumps)


def flux_divergence(flux, bc):
    """(f_{i+1/2} - f_{i-1/2}) for every cell, shaped like the state."""
    if bc == "periodic":
        return flux - tape.roll(flux, 1, axis=1)
    return flux[:, 1:] - flux[:, :-1]


def step_forward_euler(flux_fn, q, grid):
    """One explicit Euler step; returns (new state, FluxResult)."""
    res = flux_fn(q)
    q_new = q - (grid.dt / grid.dx) * flux_divergence(res.flux, grid.bc)
    return q_new, res


def step_rk4(rhs_fn, q, dt, return_stages=False):
    """Classical four-stage Runge-Kutta step for dq/dt = rhs(q).

    Stage states sit at the half and full step; the update combines the four
    right-hand sides with weights (1/6, 1/3, 1/3, 1/6).
    """
    k1 = rhs_fn(q)
    q1 = q + (0.5 * dt) * k1
    k2 = rhs_fn(q1)
    q2 = q + (0.5 * dt) * k2
    k3 = rhs_fn(q2)
    q3 = q + dt * k3
    k4 = rhs_fn(q3)
    w1, w2, w3, w4 = RK4_WEIGHTS
    q_new = q + dt * (w1 * k1 + w2 * k2 + w3 * k3 + w4 * k4)
    if return_stages:
        return q_new, (q, q1, q2, q3)
    return q_new


def _is_bad(q_val):
    return not np.all(np.isfinite(q_val)) or np.max(np.abs(q_val)) > DIVERGENCE_LIMIT


def rollout(flux_fn, q0, grid, stepper="euler", n_t=None, record_tv=True,
            store_faces=False):
    """Advance ``q0`` for ``n_t`` steps (default ``grid.n_t``).

    ``flux_fn(q) -> FluxResult`` may consume and produce tracked tape values;
    the trace always stores raw copies.  Returns ``(q_final, trace)``; on
    divergence the trace is truncated and flagged and ``q_final`` is the last
    finite state.
    """
    if n_t is None:
        n_t = grid.n_t
    trace = RolloutTrace()
    q = q0
    trace.states.append(np.array(val(q0), dtype=np.float64, copy=True))
    if record_tv:
        trace.tv.append(total_variation(q0, grid.bc))

    if stepper == "rk4":
        def rhs(state):
            return -(1.0 / grid.dx) * flux_divergence(flux_fn(state).flux, grid.bc)

    for n in range(n_t):
        if stepper == "euler":
            q, res = step_forward_euler(flux_fn, q, grid)
            if res.wave_speed is not None:
                trace.wave_speed_max.append(float(np.max(val(res.wave_speed))))
            if store_faces and res.face_states is not None:
                trace.face_states.append(res.face_states)
        elif stepper == "rk4":
            q = step_rk4(rhs, q, grid.dt)
        else:
            raise ValueError(f"unknown stepper {stepper!r}")
        q_val = np.array(val(q), dtype=np.float64, copy=True)
        if _is_bad(q_val):
            trace.diverged = True
            trace.diverged_step = n
            break
        trace.states.append(q_val)
        if record_tv:
            trace.tv.append(total_variation(q_val, grid.bc))
    return q, trace


# ---------------------------------------------------------------------------
# trace export
# ---------------------------------------------------------------------------

def write_trace_csv(trace, grid, path):
    """Columns: step, time, tv, max_wave_speed (empty speed for flux kinds without one)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time", "tv", "max_wave_speed"])
        for n, state_tv in enumerate(trace.tv):
            speed = ""
            if n >= 1 and n - 1 < len(trace.wave_speed_max):
                speed = f"{trace.wave_speed_max[n - 1]:.17g}"
            w.writerow([n, f"{n * grid.dt:.17g}", f"{state_tv:.17g}", speed])


def write_state_csv(x, q, path):
    """Columns: x, q_1 .. q_d."""
    q = np.atleast_2d(np.asarray(val(q), dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x"] + [f"q_{k + 1}" for k in range(q.shape[0])])
        for i, xi in enumerate(np.asarray(x)):
            w.writerow([f"{xi:.17g}"] + [f"{q[k, i]:.17g}" for k in range(q.shape[0])])
