"""The four 1D benchmark problems: setups, targets, and network wiring.

Each scenario fixes the grid, the initial condition, the exact final state
the loss is measured against, the flux kind, and the architectures of the
nets involved.  All constants are plain data so a run manifest can echo
them.

* ``advection``       unit-speed transport of a step, periodic, 80 steps.
* ``burgers``         inviscid Burgers from a top-hat: rarefaction + shock.
* ``euler_sod``       Sod shock tube in conserved variables, trained on the
                      window t in [0.1, 0.15], Neumann boundaries.
* ``antidiffusion``   advection plus anti-diffusion: the smooth heat-spread
                      profile must sharpen back into a step while moving.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetSpec
from .riemann import PrimState, riemann_conserved
from .solver import Grid

GAMMA_SOD = 1.4
SOD_LEFT = PrimState(rho=1.0, u=0.0, p=1.0)
SOD_RIGHT = PrimState(rho=0.125, u=0.0, p=0.1)


@dataclass
class Scenario:
    name: str
    grid: Grid
    q0: np.ndarray             # (d, n_x)
    exact_final: np.ndarray    # (d, n_x)
    flux_kind: str             # unconstrained | tvd | tvd_generalized
    net_specs: dict
    speed_mode: str = "one_norm"
    nu_phys: float | None = None
    t_start: float = 0.0
    loss_weights: np.ndarray | None = None
    # optional minibatch of (q0, target) pairs; the loss averages over them
    members: list | None = None

    @property
    def d(self):
        return self.q0.shape[0]

    def constants(self):
        """Flat dict of the defining constants, for the run manifest."""
        return {
            "name": self.name,
            "flux_kind": self.flux_kind,
            "n_x": self.grid.n_x,
            "dx": self.grid.dx,
            "dt": self.grid.dt,
            "n_t": self.grid.n_t,
            "bc": self.grid.bc,
            "t_start": self.t_start,
            "t_final": self.t_start + self.grid.t_final,
            "d": self.d,
            "speed_mode": self.speed_mode,
            "nu_phys": self.nu_phys,
            "nets": {
                k: [s.n_in, s.n_hidden, s.n_out, s.init]
                for k, s in self.net_specs.items()
            },
        }


def _advection_grid():
    return Grid(n_x=100, dx=1e-2, dt=2.5e-3, n_t=80, bc="periodic")


def _step_ic(n_x):
    # jump at the midpoint cell, which carries the average of both sides
    q = np.zeros((1, n_x))
    mid = n_x // 2
    q[0, mid] = 0.5
    q[0, mid + 1:] = 1.0
    return q


def scenario_advection(flux_kind="tvd") -> Scenario:
    """Unit-speed advection of a 0/1 step for t_final = 0.2 (20 cells)."""
    grid = _advection_grid()
    q0 = _step_ic(grid.n_x)
    shift = round(grid.t_final / grid.dx)
    exact = np.roll(q0, shift, axis=1)
    specs = {
        "tvd": {"flux": NetSpec(1, 10, 1)},
        "unconstrained": {"flux": NetSpec(2, 10, 1)},
    }
    return Scenario("advection", grid, q0, exact, flux_kind, specs[flux_kind])


def burgers_exact_final(x):
    """Top-hat solution at t = 0.25: rarefaction ramp, plateau, shock at 0.75."""
    x = np.asarray(x, dtype=np.float64)
    q = np.zeros_like(x)
    ramp = (x >= 0.375) & (x < 0.625)
    q[ramp] = 4.0 * (x[ramp] - 0.375)
    q[(x >= 0.625) & (x < 0.75)] = 1.0
    return q


def scenario_burgers(flux_kind="tvd") -> Scenario:
    """Inviscid Burgers from a [0.375, 0.625) top hat, 80 steps to t = 0.25."""
    n_t = 80
    t_final = 0.25
    grid = Grid(n_x=100, dx=1e-2, dt=t_final / n_t, n_t=n_t, bc="periodic")
    x = grid.x
    q0 = ((x >= 0.375) & (x < 0.625)).astype(np.float64)[None, :]
    exact = burgers_exact_final(x)[None, :]
    specs = {
        "tvd": {"flux": NetSpec(1, 10, 1)},
        "unconstrained": {"flux": NetSpec(2, 10, 1)},
    }
    return Scenario("burgers", grid, q0, exact, flux_kind, specs[flux_kind])


def scenario_euler_sod(flux_kind="tvd") -> Scenario:
    """Sod tube in [rho, rho u, E]; the rollout covers t in [0.1, 0.15].

    The stated left/right vectors are the usual primitive values
    (rho, p, u) = (1, 1, 0) and (0.125, 0.1, 0); total energy follows from
    E = p/(gamma-1) + rho u^2/2.  All 501 mesh points are evolved, with the
    boundary cells replicated into ghosts for the Neumann condition.
    """
    grid = Grid(n_x=501, dx=2e-3, dt=1e-4, n_t=500, bc="neumann")
    x = grid.x
    q0 = riemann_conserved(x, 0.1, SOD_LEFT, SOD_RIGHT, GAMMA_SOD)
    exact = riemann_conserved(x, 0.15, SOD_LEFT, SOD_RIGHT, GAMMA_SOD)
    specs = {
        "tvd": {"flux": NetSpec(3, 50, 3, init="xavier_zero_output")},
        "unconstrained": {"flux": NetSpec(6, 50, 3, init="xavier_zero_output")},
    }
    return Scenario("euler_sod", grid, q0, exact, flux_kind, specs[flux_kind],
                    t_start=0.1)


def heat_step_profile(x, t, nu, n_modes=101):
    """Periodic heat-equation solution from the 0/1 step at x = 0.5.

    Fourier series of the step (only odd modes survive), each mode damped by
    exp(-4 pi^2 k^2 nu t); the default truncation is far past double
    precision for nu t >= 2e-3.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.full_like(x, 0.5)
    for k in range(1, n_modes + 1, 2):
        amp = 2.0 / (np.pi * k) * np.exp(-4.0 * np.pi**2 * k**2 * nu * t)
        if amp < 1e-22:
            break
        w -= amp * np.sin(2.0 * np.pi * k * x)
    return w


def scenario_antidiffusion(flux_kind="tvd_generalized") -> Scenario:
    """Advection with anti-diffusion: smooth profile must sharpen into a step.

    The target is the time-reversed heat solution q_e(x, t) = w(x - t, tf - t)
    with nu = 0.01: the initial condition is the smooth w(x, tf) and the
    final target the original step shifted by tf.
    """
    grid = _advection_grid()
    nu = 0.01
    x = grid.x
    q0 = heat_step_profile(x, grid.t_final, nu)[None, :]
    step = np.zeros((1, grid.n_x))
    step[0, grid.n_x // 2:] = 1.0
    exact = np.roll(step, round(grid.t_final / grid.dx), axis=1)
    specs = {
        "tvd_generalized": {
            "flux": NetSpec(1, 10, 1),
            "nu_plus": NetSpec(2, 10, 1),
            "nu_minus": NetSpec(2, 10, 1),
        },
        "tvd": {"flux": NetSpec(1, 10, 1)},
        "unconstrained": {"flux": NetSpec(2, 10, 1)},
    }
    return Scenario("antidiffusion", grid, q0, exact, flux_kind,
                    specs[flux_kind], nu_phys=nu)


SCENARIOS = {
    "advection": scenario_advection,
    "burgers": scenario_burgers,
    "euler_sod": scenario_euler_sod,
    "antidiffusion": scenario_antidiffusion,
}


def make_scenario(name, flux_kind=None) -> Scenario:
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    if flux_kind is None:
        return SCENARIOS[name]()
    return SCENARIOS[name](flux_kind=flux_kind)
