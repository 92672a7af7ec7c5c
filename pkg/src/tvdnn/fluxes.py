"""Numerical flux constructions on a uniform 1D grid.

Cell arrays have shape (d, n_x); face arrays have one column per face
(n_x faces for a periodic domain, n_x + 1 for Neumann, where the boundary
cell is replicated into two ghost cells).

The constrained flux is the local Lax-Friedrichs (Rusanov) combination

    f = 1/2 [ f_N(q+) + f_N(q-) - a (q+ - q-) ]

of a trainable point flux f_N evaluated on slope-limited face states, with
the dissipation speed a taken from the exact input derivative of f_N
(its 1-norm for systems, an upper bound on the spectral radius).  A
generalized variant appends a gradient-diffusion term with a learned
diffusivity whose anti-diffusive part is gated by a shape limiter.
"""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np

from . import network, tape
from .network import ConfigError
from .tape import val

#: Stand-in for an infinite slope ratio when a denominator is exactly zero.
#: The limiter clamps anything this large to 1 (or 0 for the negative side),
#: and keeping it finite avoids inf*0 in downstream arithmetic.
RATIO_SENTINEL = 1e30

#: Denominator regularization used by the generalized (diffusive) flux.
EPS_R_DEFAULT = 1e-12


class FaceStates(NamedTuple):
    q_plus: object   # (d, n_faces) reconstructed from the right cell
    q_minus: object  # (d, n_faces) reconstructed from the left cell


class FluxResult(NamedTuple):
    flux: object          # (d, n_faces)
    wave_speed: object    # (n_faces,) or None for the unconstrained flux
    face_states: object   # raw (d, 2*n_faces) [q+, q-] values, or None


def minmod(r):
    """Slope limiter max[0, min(1, r)]; works on scalars, arrays and tape values."""
    return tape.maximum(0.0, tape.minimum(1.0, r))


def slope_ratio(q, i, eps_r=0.0):
    """Ratio of neighboring slopes (q_i - q_{i-1}) / (q_{i+1} - q_i) at cell i.

    With ``eps_r == 0`` an exactly flat forward slope yields a finite
    sentinel of the numerator's sign (clamped by minmod to 1 or 0) instead
    of NaN/inf; ``eps_r > 0`` adds it to the denominator instead.
    """
    q = np.asarray(q, dtype=np.float64).ravel()
    if not 1 <= i <= q.size - 2:
        raise ConfigError(f"cell {i} has no two-sided neighbors in a field of {q.size}")
    num = q[i] - q[i - 1]
    den = q[i + 1] - q[i]
    if eps_r:
        return num / (den + eps_r)
    if den == 0.0:
        return float(np.sign(num)) * RATIO_SENTINEL
    return num / den


def psi_limiter(r_i, r_ip1):
    """Anti-diffusion gate min[min(r, 1/r) left, same right], 0 off monotone data.

    Equals 1 on locally linear data (both ratios 1) and 0 whenever either
    neighboring ratio is non-positive, i.e. at local extrema.
    """
    rlv, rrv = val(r_i), val(r_ip1)
    inv_l = 1.0 / tape.where(rlv == 0, 1.0, r_i)
    inv_r = 1.0 / tape.where(rrv == 0, 1.0, r_ip1)
    m = tape.minimum(tape.minimum(r_i, inv_l), tape.minimum(r_ip1, inv_r))
    return tape.where(np.minimum(rlv, rrv) > 0, m, 0.0)


# ---------------------------------------------------------------------------
# face geometry
# ---------------------------------------------------------------------------

def _pad2(q, bc):
    """Append two ghost cells per side: periodic wrap or edge replication."""
    if bc == "periodic":
        return tape.concat([q[:, -2:], q, q[:, :2]], axis=1)
    if bc == "neumann":
        edge_l = q[:, :1]
        edge_r = q[:, -1:]
        return tape.concat([edge_l, edge_l, q, edge_r, edge_r], axis=1)
    raise ConfigError(f"unknown boundary kind {bc!r}")


def _safe_ratio(num, den, eps_r):
    if eps_r:
        return num / (den + eps_r)
    den_v = val(den)
    zero = den_v == 0.0
    if not zero.any():
        return num / den
    r0 = num / tape.where(zero, 1.0, den)
    sentinel = np.sign(val(num)) * RATIO_SENTINEL
    return tape.where(zero, sentinel, r0)


class _FaceGeometry(NamedTuple):
    cell_l: object   # q_i at each face i+1/2
    cell_r: object   # q_{i+1}
    dq_face: object  # q_{i+1} - q_i
    r_l: object      # slope ratio at cell i
    r_r: object      # slope ratio at cell i+1
    q_plus: object
    q_minus: object


def _face_geometry(q, bc, eps_r):
    n = val(q).shape[1]
    if n < 4:
        raise ConfigError("reconstruction needs at least 4 cells")
    p = _pad2(q, bc)
    dq = p[:, 1:] - p[:, :-1]                      # column i+2 holds q_{i+1}-q_i
    r = _safe_ratio(dq[:, :-1], dq[:, 1:], eps_r)  # column i+1 holds ratio at cell i
    ilo = 0 if bc == "periodic" else -1
    m = n - ilo
    cell_l = p[:, ilo + 2: ilo + 2 + m]
    cell_r = p[:, ilo + 3: ilo + 3 + m]
    dq_l = dq[:, ilo + 2: ilo + 2 + m]
    dq_r = dq[:, ilo + 3: ilo + 3 + m]
    r_l = r[:, ilo + 1: ilo + 1 + m]
    r_r = r[:, ilo + 2: ilo + 2 + m]
    q_minus = cell_l + 0.5 * minmod(r_l) * dq_l
    q_plus = cell_r - 0.5 * minmod(r_r) * dq_r
    return _FaceGeometry(cell_l, cell_r, dq_l, r_l, r_r, q_plus, q_minus)


def reconstruct(q, bc, eps_r=0.0) -> FaceStates:
    """Slope-limited face states from piecewise-linear reconstruction.

    Per component: q-_{i+1/2} = q_i + phi(r_i)(q_{i+1}-q_i)/2 from the left
    cell, q+_{i+1/2} = q_{i+1} - phi(r_{i+1})(q_{i+2}-q_{i+1})/2 from the
    right, with phi the minmod limiter.
    """
    g = _face_geometry(q, bc, eps_r)
    return FaceStates(g.q_plus, g.q_minus)


# ---------------------------------------------------------------------------
# flux kinds
# ---------------------------------------------------------------------------

def _spectral_radius_values(cols):
    jac = np.stack([val(c) for c in cols], axis=1)   # (d, d, m)
    mats = np.moveaxis(jac, 2, 0)
    try:
        ev = np.linalg.eigvals(mats)
    except np.linalg.LinAlgError:
        return None
    return np.abs(ev).max(axis=1)[None, :]


def _rusanov(params, q_plus, q_minus, speed_mode):
    d, m = val(q_plus).shape
    y = tape.concat([q_plus, q_minus], axis=1)
    out, cols = network.forward_with_input_jacobian(params, y)
    f_plus = out[:, :m]
    f_minus = out[:, m:]

    if speed_mode == "spectral":
        if isinstance(y, tape.Var):
            raise ConfigError("spectral wave speed is not recordable; use one_norm")
        nrm = _spectral_radius_values(cols)
        if nrm is None:
            warnings.warn("eigensolve did not converge; falling back to one_norm")
            speed_mode = "one_norm"
    if speed_mode == "one_norm":
        nrm = None
        for c in cols:
            colsum = tape.sum_axis(tape.absolute(c), 0, keepdims=True)
            nrm = colsum if nrm is None else tape.maximum(nrm, colsum)
    elif speed_mode != "spectral":
        raise ConfigError(f"unknown speed mode {speed_mode!r}")

    a_row = tape.maximum(nrm[:, :m], nrm[:, m:])   # (1, m)
    flux = 0.5 * ((f_plus + f_minus) - a_row * (q_plus - q_minus))
    return flux, a_row[0]


def rusanov_scalar(params, faces: FaceStates):
    """Rusanov flux for a single-input/single-output net; a = max |f_N'(q±)|."""
    if params.n_in != 1 or params.n_out != 1:
        raise ConfigError("scalar Rusanov flux needs a 1 -> . -> 1 network")
    return _rusanov(params, faces.q_plus, faces.q_minus, "one_norm")


def rusanov_system(params, faces: FaceStates, speed_mode="one_norm"):
    """Vector Rusanov flux; wave speed from the net's input Jacobian.

    ``one_norm`` (default, used in training) bounds the spectral radius by
    the Jacobian's maximum absolute column sum; ``spectral`` computes the
    eigenvalues directly and is only available on raw values.
    """
    d = val(faces.q_plus).shape[0]
    if params.n_in != d or params.n_out != d:
        raise ConfigError(
            f"system Rusanov flux needs a {d} -> . -> {d} network, "
            f"got {params.n_in} -> . -> {params.n_out}"
        )
    return _rusanov(params, faces.q_plus, faces.q_minus, speed_mode)


def unconstrained_flux(params, q, bc):
    """Direct two-point net flux f_{i+1/2} = f_N(q_i, q_{i+1}); no dissipation."""
    d, n = val(q).shape
    if params.n_in != 2 * d or params.n_out != d:
        raise ConfigError(
            f"two-point flux needs a {2 * d} -> . -> {d} network, "
            f"got {params.n_in} -> . -> {params.n_out}"
        )
    p = _pad2(q, bc)
    ilo = 0 if bc == "periodic" else -1
    m = n - ilo
    y = tape.concat([p[:, ilo + 2: ilo + 2 + m], p[:, ilo + 3: ilo + 3 + m]], axis=0)
    return network.forward(params, y)


def _generalized(theta_f, theta_nu_plus, theta_nu_minus, q, grid, nu_phys, eps_r):
    d = val(q).shape[0]
    if d != 1:
        raise ConfigError("generalized flux is defined for scalar fields")
    if theta_f.n_in != 1 or theta_f.n_out != 1:
        raise ConfigError("generalized flux needs a 1 -> . -> 1 transport net")
    for nu_params in (theta_nu_plus, theta_nu_minus):
        if nu_params.n_in != 2 or nu_params.n_out != 1:
            raise ConfigError("diffusivity nets need 2 -> . -> 1 architecture")

    g = _face_geometry(q, grid.bc, eps_r)
    flux_rus, a = _rusanov(theta_f, g.q_plus, g.q_minus, "one_norm")

    y_pair = tape.concat([g.cell_l, g.cell_r], axis=0)
    nu_p = network.forward(theta_nu_plus, y_pair)
    nu_m = network.forward(theta_nu_minus, y_pair)
    psi = psi_limiter(g.r_l, g.r_r)
    nu_hat = tape.absolute(nu_phys * nu_p) + psi * (nu_phys * nu_m)
    flux = flux_rus - nu_hat * g.dq_face / grid.dx
    return flux, a, g


def generalized_flux(theta_f, theta_nu_plus, theta_nu_minus, q, grid,
                     nu_phys, eps_r=EPS_R_DEFAULT):
    """Rusanov flux plus a learned gradient-diffusion correction.

    The correction is -nu_hat (q_{i+1} - q_i)/dx with

        nu_hat = |nu (nu+_N)| + psi(r_i, r_{i+1}) nu (nu-_N),

    where both diffusivity nets see the raw cell pair (q_i, q_{i+1}), their
    outputs are scaled by the physical diffusivity ``nu_phys``, and psi
    suppresses the (potentially anti-diffusive) second part away from
    monotone data.  Slope ratios here use the regularized denominator.
    """
    flux, a, _ = _generalized(theta_f, theta_nu_plus, theta_nu_minus,
                              q, grid, nu_phys, eps_r)
    return flux, a


def flux_apply(kind, bundle, q, grid, speed_mode="one_norm", eps_r=0.0,
               nu_phys=None) -> FluxResult:
    """Evaluate one flux kind over the whole grid; single entry point."""
    if kind == "tvd":
        d = val(q).shape[0]
        faces = reconstruct(q, grid.bc, eps_r)
        if d == 1:
            flux, a = rusanov_scalar(bundle["flux"], faces)
        else:
            flux, a = rusanov_system(bundle["flux"], faces, speed_mode)
        states = np.concatenate([val(faces.q_plus), val(faces.q_minus)], axis=1)
        return FluxResult(flux, a, states)
    if kind == "tvd_generalized":
        if nu_phys is None:
            raise ConfigError("generalized flux needs the physical diffusivity")
        flux, a, g = _generalized(
            bundle["flux"], bundle["nu_plus"], bundle["nu_minus"],
            q, grid, nu_phys, eps_r if eps_r else EPS_R_DEFAULT,
        )
        states = np.concatenate([val(g.q_plus), val(g.q_minus)], axis=1)
        return FluxResult(flux, a, states)
    if kind == "unconstrained":
        return FluxResult(unconstrained_flux(bundle["flux"], q, grid.bc), None, None)
    raise ConfigError(f"unknown flux kind {kind!r}")


# ---------------------------------------------------------------------------
# wave-speed bookkeeping
# ---------------------------------------------------------------------------

def max_speed_on_states(params, states, chunk=8192):
    """Largest 1-norm wave speed of ``params`` over a batch of states.

    ``states`` is (d, m); for d == 1 this is max |f_N'|.  Used to re-check
    the CFL bound on the face states recorded during a rollout.  Straight
    numpy with cache-sized chunks and in-place updates: this sweep runs
    every training iteration over every recorded face state.
    """
    states = np.asarray(states, dtype=np.float64)
    p = params
    w0, w1, w2, w3, w4, w5 = (np.asarray(val(w)) for w in
                              (p.W0, p.W1, p.W2, p.W3, p.W4, p.W5))
    b = [np.asarray(val(x)) for x in (p.b0, p.b1, p.b2, p.b3, p.b4)]
    n_in = w0.shape[1]
    worst = 0.0
    for k in range(0, states.shape[1], chunk):
        y = states[:, k:k + chunk]
        z1 = np.tanh(w0 @ y + b[0])
        z2 = np.tanh(w1 @ z1 + b[1])
        g1 = np.tanh(w2 @ y + b[2])
        z3 = z2 * g1
        z4 = np.tanh(w3 @ z3 + b[3])
        g2 = np.tanh(w4 @ y + b[4])
        s1 = 1.0 - z1 * z1
        s2 = 1.0 - z2 * z2
        sg1 = 1.0 - g1 * g1
        s4 = 1.0 - z4 * z4
        sg2 = 1.0 - g2 * g2
        nrm = None
        for j in range(n_in):
            dz1 = s1 * w0[:, j:j + 1]
            dz2 = w1 @ dz1
            dz2 *= s2
            dz3 = sg1 * w2[:, j:j + 1]
            dz3 *= z2
            dz3 += dz2 * g1
            dz4 = w3 @ dz3
            dz4 *= s4
            dz5 = sg2 * w4[:, j:j + 1]
            dz5 *= z4
            dz5 += dz4 * g2
            col = np.abs(w5 @ dz5).sum(axis=0)
            nrm = col if nrm is None else np.maximum(nrm, col, out=nrm)
        if nrm.size:
            worst = max(worst, float(nrm.max()))
    return worst


def max_wave_speed_over_rollout(trace):
    """Largest recorded face wave speed over every step of a rollout."""
    speeds = getattr(trace, "wave_speed_max", None)
    if not speeds:
        raise ValueError("rollout trace holds no wave-speed records")
    return float(np.max(speeds))
