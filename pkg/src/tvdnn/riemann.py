"""Exact Riemann solver for the 1D Euler equations (ideal gas).

Solves the star-region pressure with Newton iteration on the standard
pressure function, then samples the self-similar solution at xi = x/t.
States are primitive (rho, u, p); conversion helpers to conserved
variables [rho, rho*u, E] live here too.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class PrimState(NamedTuple):
    rho: float
    u: float
    p: float


class StarState(NamedTuple):
    p: float
    u: float


def sound_speed(state: PrimState, gamma):
    return np.sqrt(gamma * state.p / state.rho)


def primitive_to_conserved(rho, u, p, gamma):
    """Stack [rho, rho u, E] with E = p/(gamma-1) + rho u^2 / 2."""
    rho = np.asarray(rho, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return np.stack([rho, rho * u, p / (gamma - 1.0) + 0.5 * rho * u * u])


def conserved_to_primitive(q, gamma):
    rho = q[0]
    u = q[1] / rho
    p = (gamma - 1.0) * (q[2] - 0.5 * rho * u * u)
    return rho, u, p


def euler_flux(q, gamma):
    """Physical flux [rho u, rho u^2 + p, u (E + p)] of a conserved state."""
    rho, u, p = conserved_to_primitive(np.asarray(q, dtype=np.float64), gamma)
    return np.stack([rho * u, rho * u * u + p, u * (q[2] + p)])


def _pressure_fn(p, side: PrimState, gamma):
    """f_K(p) and its derivative for one side of the Riemann problem."""
    a = sound_speed(side, gamma)
    if p > side.p:  # shock
        big_a = 2.0 / ((gamma + 1.0) * side.rho)
        big_b = (gamma - 1.0) / (gamma + 1.0) * side.p
        root = np.sqrt(big_a / (p + big_b))
        f = (p - side.p) * root
        df = root * (1.0 - 0.5 * (p - side.p) / (p + big_b))
    else:  # rarefaction
        pr = p / side.p
        f = 2.0 * a / (gamma - 1.0) * (pr ** ((gamma - 1.0) / (2.0 * gamma)) - 1.0)
        df = pr ** (-(gamma + 1.0) / (2.0 * gamma)) / (side.rho * a)
    return f, df


def solve_star(left: PrimState, right: PrimState, gamma, tol=1e-14, max_iter=100):
    """Newton iteration for the star-region pressure and velocity."""
    a_l = sound_speed(left, gamma)
    a_r = sound_speed(right, gamma)
    if 2.0 * (a_l + a_r) / (gamma - 1.0) <= right.u - left.u:
        raise ValueError("initial states generate vacuum")
    p = max(0.5 * (left.p + right.p), 1e-8)
    for _ in range(max_iter):
        f_l, df_l = _pressure_fn(p, left, gamma)
        f_r, df_r = _pressure_fn(p, right, gamma)
        f = f_l + f_r + (right.u - left.u)
        dp = f / (df_l + df_r)
        p_new = max(p - dp, 1e-12)
        if abs(p_new - p) <= tol * p:
            p = p_new
            break
        p = p_new
    f_l, _ = _pressure_fn(p, left, gamma)
    f_r, _ = _pressure_fn(p, right, gamma)
    u = 0.5 * (left.u + right.u) + 0.5 * (f_r - f_l)
    return StarState(p, u)


def sample(xi, left: PrimState, right: PrimState, star: StarState, gamma):
    """Primitive solution at self-similar coordinates xi = x/t (arrays)."""
    xi = np.asarray(xi, dtype=np.float64)
    rho = np.empty_like(xi)
    u = np.empty_like(xi)
    p = np.empty_like(xi)
    g = gamma
    gm = g - 1.0
    gp = g + 1.0

    # left side of the contact
    a_l = sound_speed(left, g)
    mask_l = xi < star.u
    if star.p > left.p:  # left shock
        s = left.u - a_l * np.sqrt((gp * star.p / left.p + gm) / (2.0 * g))
        rho_star = left.rho * ((star.p / left.p + gm / gp) / (gm / gp * star.p / left.p + 1.0))
        pre = mask_l & (xi < s)
        post = mask_l & ~pre
        rho[pre], u[pre], p[pre] = left.rho, left.u, left.p
        rho[post], u[post], p[post] = rho_star, star.u, star.p
    else:  # left rarefaction
        a_star = a_l * (star.p / left.p) ** (gm / (2.0 * g))
        head = left.u - a_l
        tail = star.u - a_star
        pre = mask_l & (xi < head)
        fan = mask_l & (xi >= head) & (xi < tail)
        post = mask_l & (xi >= tail)
        rho[pre], u[pre], p[pre] = left.rho, left.u, left.p
        scale = 2.0 / gp + gm / (gp * a_l) * (left.u - xi[fan])
        rho[fan] = left.rho * scale ** (2.0 / gm)
        u[fan] = 2.0 / gp * (a_l + 0.5 * gm * left.u + xi[fan])
        p[fan] = left.p * scale ** (2.0 * g / gm)
        rho_star = left.rho * (star.p / left.p) ** (1.0 / g)
        rho[post], u[post], p[post] = rho_star, star.u, star.p

    # right side of the contact
    a_r = sound_speed(right, g)
    mask_r = ~mask_l
    if star.p > right.p:  # right shock
        s = right.u + a_r * np.sqrt((gp * star.p / right.p + gm) / (2.0 * g))
        rho_star = right.rho * ((star.p / right.p + gm / gp) / (gm / gp * star.p / right.p + 1.0))
        post = mask_r & (xi > s)
        pre = mask_r & ~post
        rho[post], u[post], p[post] = right.rho, right.u, right.p
        rho[pre], u[pre], p[pre] = rho_star, star.u, star.p
    else:  # right rarefaction
        a_star = a_r * (star.p / right.p) ** (gm / (2.0 * g))
        head = right.u + a_r
        tail = star.u + a_star
        post = mask_r & (xi > head)
        fan = mask_r & (xi <= head) & (xi > tail)
        pre = mask_r & (xi <= tail)
        rho[post], u[post], p[post] = right.rho, right.u, right.p
        scale = 2.0 / gp - gm / (gp * a_r) * (right.u - xi[fan])
        rho[fan] = right.rho * scale ** (2.0 / gm)
        u[fan] = 2.0 / gp * (-a_r + 0.5 * gm * right.u + xi[fan])
        p[fan] = right.p * scale ** (2.0 * g / gm)
        rho_star = right.rho * (star.p / right.p) ** (1.0 / g)
        rho[pre], u[pre], p[pre] = rho_star, star.u, star.p

    return rho, u, p


def riemann_conserved(x, t, left: PrimState, right: PrimState, gamma, x0=0.5):
    """Conserved exact solution on grid ``x`` at time ``t`` (t = 0 allowed)."""
    x = np.asarray(x, dtype=np.float64)
    if t <= 0.0:
        on_left = x < x0
        rho = np.where(on_left, left.rho, right.rho)
        u = np.where(on_left, left.u, right.u)
        p = np.where(on_left, left.p, right.p)
        return primitive_to_conserved(rho, u, p, gamma)
    star = solve_star(left, right, gamma)
    rho, u, p = sample((x - x0) / t, left, right, star, gamma)
    return primitive_to_conserved(rho, u, p, gamma)
