"""Four-stage adjoint gradient vs the tape and vs symbolic derivation."""

import dataclasses

import numpy as np
import pytest
import sympy

from tvdnn import network, training
from tvdnn.network import NetSpec
from tvdnn.scenarios import Scenario
from tvdnn.solver import Grid
from tvdnn.tape import Tape
from tvdnn.training import TrainConfig, adjoint_gradient_rk4, taped_rollout_loss


def small_scenario(rng, n=8, steps=4, hidden=4):
    grid = Grid(n_x=n, dx=1.0 / n, dt=0.1 / n, n_t=steps, bc="periodic")
    q0 = rng.uniform(0, 1, size=(1, n))
    target = rng.uniform(0, 1, size=(1, n))
    return Scenario("adj", grid, q0, target, "tvd", {"flux": NetSpec(1, hidden, 1)})


def tape_rk4_gradient(sc, bundle, cfg):
    t, loss, wrt = taped_rollout_loss(sc, bundle, cfg, stepper="rk4")
    gs = t.backward(loss, wrt=wrt)
    return np.concatenate([g.ravel() for g in gs])


def test_zero_seed_gives_zero_gradient():
    # target equal to the rollout's final state: loss and its gradient vanish
    rng = np.random.default_rng(0)
    sc = small_scenario(rng)
    cfg = TrainConfig(n_iters=0)
    bundle = training.make_bundle(sc, 1)
    # roll out once to find the final state, then use it as the target
    t, loss, wrt = taped_rollout_loss(sc, bundle, cfg, stepper="rk4")
    from tvdnn import fluxes, solver
    flux_fn = training._flux_fn(sc, bundle)

    def rhs(state):
        return -(1.0 / sc.grid.dx) * solver.flux_divergence(
            flux_fn(state).flux, sc.grid.bc)

    q = sc.q0
    for _ in range(sc.grid.n_t):
        q = solver.step_rk4(rhs, q, sc.grid.dt)
    sc2 = dataclasses.replace(sc, exact_final=np.asarray(q))
    g = adjoint_gradient_rk4(sc2, bundle, cfg)
    np.testing.assert_array_equal(g, np.zeros_like(g))


def test_adjoint_matches_tape_on_burgers_like_rollout():
    # 50-step nonlinear rollout: the two gradient routes agree to rounding
    rng = np.random.default_rng(7)
    grid = Grid(n_x=16, dx=1.0 / 16, dt=0.002, n_t=50, bc="periodic")
    q0 = rng.uniform(0, 1, size=(1, 16))
    target = np.roll(q0, 3, axis=1)
    sc = Scenario("bur", grid, q0, target, "tvd", {"flux": NetSpec(1, 5, 1)})
    cfg = TrainConfig(n_iters=0)
    bundle = training.make_bundle(sc, 3)
    g_adj = adjoint_gradient_rk4(sc, bundle, cfg)
    g_tape = tape_rk4_gradient(sc, bundle, cfg)
    scale = np.abs(g_tape).max()
    assert scale > 0
    assert np.abs(g_adj - g_tape).max() / scale < 1e-8


def test_adjoint_matches_tape_20_random_instances():
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(20):
        n = int(rng.integers(8, 33))
        steps = int(rng.integers(2, 21))
        sc = small_scenario(rng, n=n, steps=steps, hidden=int(rng.integers(2, 6)))
        cfg = TrainConfig(n_iters=0)
        bundle = training.make_bundle(sc, int(rng.integers(1 << 30)))
        g_adj = adjoint_gradient_rk4(sc, bundle, cfg)
        g_tape = tape_rk4_gradient(sc, bundle, cfg)
        scale = max(float(np.abs(g_tape).max()), 1e-300)
        worst = max(worst, float(np.abs(g_adj - g_tape).max()) / scale)
    assert worst < 1e-8


def test_adjoint_handles_neumann_and_unconstrained():
    rng = np.random.default_rng(5)
    grid = Grid(n_x=10, dx=0.1, dt=0.01, n_t=6, bc="neumann")
    q0 = rng.uniform(0, 1, size=(1, 10))
    sc = Scenario("neu", grid, q0, rng.uniform(0, 1, size=(1, 10)),
                  "unconstrained", {"flux": NetSpec(2, 4, 1)})
    cfg = TrainConfig(n_iters=0)
    bundle = training.make_bundle(sc, 2)
    g_adj = adjoint_gradient_rk4(sc, bundle, cfg)
    g_tape = tape_rk4_gradient(sc, bundle, cfg)
    assert np.abs(g_adj - g_tape).max() / np.abs(g_tape).max() < 1e-8


def test_one_step_four_cell_instance_matches_symbolic_chain_rule():
    """Hand-derivable case checked with an independent symbolic route.

    One RK4 step on 4 periodic cells with a linear 'net' f(q) = w q (built
    so reconstruction stays on smooth branches), loss = dx sum (q1 - e)^2.
    The whole step is transcribed in sympy and differentiated with respect
    to the flux weight.
    """
    # linear-regime identity-style net scaled by a trainable output weight
    eps = 1e-7
    w_val = 0.8
    z = np.zeros((1, 1))
    params = network.NetParams(
        W0=np.full((1, 1), eps), b0=z.copy(),
        W1=np.ones((1, 1)), b1=z.copy(),
        W2=z.copy(), b2=np.full((1, 1), 20.0),
        W3=np.ones((1, 1)), b3=z.copy(),
        W4=z.copy(), b4=np.full((1, 1), 20.0),
        W5=np.full((1, 1), w_val / eps), b5=z.copy(),
    )
    q_cells = np.array([0.1, 0.4, 0.8, 0.9])
    grid = Grid(n_x=4, dx=0.25, dt=0.05, n_t=1, bc="periodic")
    target = np.array([0.2, 0.3, 0.7, 0.8])
    sc = Scenario("sym", grid, q_cells[None, :], target[None, :], "tvd",
                  {"flux": params.spec()})
    cfg = TrainConfig(n_iters=0)

    g_adj = adjoint_gradient_rk4(sc, {"flux": params}, cfg)
    # gradient with respect to W5 maps to d/dw via the 1/eps factor
    idx_w5 = network.pack(params).size - 2  # [.., W5, b5]
    dJ_dw_adjoint = g_adj[idx_w5] / eps

    # independent symbolic transcription: f(q) = w q, a = |w|, minmod branches
    # resolved for this monotone data (all ratios in (0, 1) or clamped)
    w = sympy.Symbol("w")
    q = [sympy.Float(v) for v in q_cells]
    dx, dt = sympy.Rational(1, 4), sympy.Float(0.05)

    def phi(r):
        return sympy.Max(0, sympy.Min(1, r))

    def flux_of(qs):
        f = []
        for i in range(4):
            qm1, qi, qp1, qp2 = qs[(i - 1) % 4], qs[i], qs[(i + 1) % 4], qs[(i + 2) % 4]
            r_i = (qi - qm1) / (qp1 - qi)
            r_r = (qp1 - qi) / (qp2 - qp1)
            qminus = qi + phi(r_i) * (qp1 - qi) / 2
            qplus = qp1 - phi(r_r) * (qp2 - qp1) / 2
            f.append((w * qplus + w * qminus - sympy.Abs(w) * (qplus - qminus)) / 2)
        return f

    def rhs_of(qs):
        f = flux_of(qs)
        return [-(f[i] - f[(i - 1) % 4]) / dx for i in range(4)]

    k1 = rhs_of(q)
    q1 = [q[i] + dt / 2 * k1[i] for i in range(4)]
    k2 = rhs_of(q1)
    q2 = [q[i] + dt / 2 * k2[i] for i in range(4)]
    k3 = rhs_of(q2)
    q3 = [q[i] + dt * k3[i] for i in range(4)]
    k4 = rhs_of(q3)
    qf = [q[i] + dt * (k1[i] / 6 + k2[i] / 3 + k3[i] / 3 + k4[i] / 6)
          for i in range(4)]
    J = dx * sum((qf[i] - sympy.Float(target[i])) ** 2 for i in range(4))
    dJ_dw_sym = float(sympy.diff(J, w).subs(w, w_val))

    # the eps-net is the linear flux up to O(eps^2 q^3) relative corrections
    assert dJ_dw_adjoint == pytest.approx(dJ_dw_sym, rel=1e-6)
