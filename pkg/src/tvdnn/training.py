"""Loss evaluation, CFL projection, optimizers, and the training loop.

Training minimizes the final-state mismatch of a full solver rollout by
gradient descent through the rollout.  Gradients are exact reverse-mode:
the forward pass stores one state per step, and the backward sweep re-tapes
one step at a time and chains the state cotangent, so memory stays flat in
the number of steps.

After every optimizer step the constrained flux kinds re-evaluate the
largest face wave speed over the states recorded in this iteration's rollout
(with the freshly updated weights) and, if it exceeds CFL_max dx/dt, rescale
the output layer of the transport net by exactly the violation ratio.  By
linearity of the output layer this lands the re-evaluated speed on the bound
to within a couple of ulps.

A four-stage discrete-adjoint gradient for RK4 rollouts is included as an
independent cross-check of the taped gradient.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import fluxes, network, solver, tape
from ._alloc import tune_allocator
from .network import NetParams
from .solver import RK4_WEIGHTS
from .tape import Tape, val

log = logging.getLogger(__name__)

CONSTRAINED_KINDS = ("tvd", "tvd_generalized")


@dataclass
class TrainConfig:
    optimizer: str = "rmsprop"      # "rmsprop" | "adam"
    base_lr: float = 1e-3
    rms_smoothing: float = 0.99
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    eps: float = 1e-8
    l2_lambda: float = 0.0
    cfl_max: float = 0.5
    n_iters: int = 1000
    seed: int = 0
    penalty: tuple | None = None    # (lo, hi) bound penalty on the final state

    def __post_init__(self):
        if self.base_lr <= 0 or self.cfl_max <= 0:
            raise ValueError("base_lr and cfl_max must be positive")
        if self.optimizer not in ("rmsprop", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class OptimizerState:
    v: np.ndarray                 # second-moment accumulator
    m: np.ndarray | None = None   # first moment (Adam)
    t: int = 0


@dataclass
class TrainRecord:
    """Per-iteration diagnostics; to_csv writes the documented schema."""

    loss: list = field(default_factory=list)
    penalty: list = field(default_factory=list)
    max_wave_speed: list = field(default_factory=list)
    projected: list = field(default_factory=list)
    rescale_factor: list = field(default_factory=list)
    post_max_wave_speed: list = field(default_factory=list)
    diverged: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    @property
    def n_iters(self):
        return len(self.loss)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss", "penalty", "max_wave_speed",
                        "projected", "rescale_factor"])
            for k in range(self.n_iters):
                w.writerow([
                    k,
                    f"{self.loss[k]:.17g}",
                    f"{self.penalty[k]:.17g}",
                    f"{self.max_wave_speed[k]:.17g}",
                    int(self.projected[k]),
                    f"{self.rescale_factor[k]:.17g}",
                ])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_l2(q_final, q_exact, dx, weights=None):
    """dx-weighted squared mismatch, summed over cells and components.

    ``weights`` optionally scales each component's squared error (a diagonal
    weighting of the pointwise norm).
    """
    qe = np.asarray(val(q_exact), dtype=np.float64)
    if val(q_final).shape != qe.shape:
        raise ValueError(
            f"state shape {val(q_final).shape} != exact shape {qe.shape}")
    diff = q_final - qe
    sq = diff * diff
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
        sq = sq * w
    return dx * tape.total(sq)


def bound_penalty(q, lo, hi, dx):
    """dx-weighted quadratic penalty for leaving [lo, hi].

    Each cell contributes (q - lo)^2 below the window and (q - hi)^2 above
    it, zero inside.
    """
    if not lo < hi:
        raise ValueError("penalty needs lo < hi")
    qv = val(q)
    below = qv < lo
    above = qv > hi
    dlo = q - lo
    dhi = q - hi
    p = tape.where(below, dlo * dlo, 0.0) + tape.where(above, dhi * dhi, 0.0)
    return dx * tape.total(p)


def l2_error(q_final, q_exact, dx, weights=None):
    """Root of the dx-weighted squared mismatch (plain values)."""
    return float(np.sqrt(val(loss_l2(np.asarray(val(q_final)), q_exact, dx, weights))))


# ---------------------------------------------------------------------------
# feasibility projection
# ---------------------------------------------------------------------------

def project(params: NetParams, max_a, cfl_max, dx, dt):
    """Rescale the output-layer weights onto the CFL-feasible set.

    If ``max_a`` (the largest wave speed these parameters induce on the
    recorded states) exceeds cfl_max dx/dt, W5 is multiplied by the ratio
    bound/max_a; the wave speed is homogeneous in W5, so re-evaluating it on
    the same states then meets the bound exactly up to rounding.  b5 is left
    alone: it does not enter the input derivative.  Returns
    (params, factor).
    """
    bound = cfl_max * dx / dt
    if max_a <= bound or max_a == 0.0:
        return params, 1.0
    factor = bound / max_a
    return replace(params, W5=params.W5 * factor), factor


# ---------------------------------------------------------------------------
# optimizers on flat parameter vectors
# ---------------------------------------------------------------------------

def init_optimizer_state(n, config: TrainConfig) -> OptimizerState:
    m = np.zeros(n) if config.optimizer == "adam" else None
    return OptimizerState(v=np.zeros(n), m=m, t=0)


def rmsprop_step(state: OptimizerState, theta, grad, config: TrainConfig):
    """v <- rho v + (1-rho) g^2;  theta <- theta - lr g / (sqrt(v) + eps)."""
    rho = config.rms_smoothing
    v = rho * state.v + (1.0 - rho) * grad * grad
    theta_new = theta - config.base_lr * grad / (np.sqrt(v) + config.eps)
    return theta_new, OptimizerState(v=v, m=None, t=state.t + 1)


def adam_step(state: OptimizerState, theta, grad, config: TrainConfig):
    """Standard Adam with bias correction."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    theta_new = theta - config.base_lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return theta_new, OptimizerState(v=v, m=m, t=t)


def optimizer_step(state, theta, grad, config):
    if config.optimizer == "adam":
        return adam_step(state, theta, grad, config)
    return rmsprop_step(state, theta, grad, config)


# ---------------------------------------------------------------------------
# rollout loss and its gradient
# ---------------------------------------------------------------------------

def make_bundle(scenario, seed):
    """Seeded parameter bundle matching the scenario's net specs."""
    children = np.random.SeedSequence(seed).spawn(len(scenario.net_specs))
    return {
        name: network.init_params(spec, child)
        for (name, spec), child in zip(scenario.net_specs.items(), children)
    }


def _flux_fn(scenario, bundle):
    def fn(q):
        return fluxes.flux_apply(
            scenario.flux_kind, bundle, q, scenario.grid,
            speed_mode=scenario.speed_mode, nu_phys=scenario.nu_phys,
        )
    return fn


def _loss_and_seed(q_final_val, scenario, config, target=None):
    """Loss value, its split, and d(loss)/d(q_final) via a small tape."""
    if target is None:
        target = scenario.exact_final
    t = Tape()
    qf = t.leaf(q_final_val)
    data_term = loss_l2(qf, target, scenario.grid.dx,
                        scenario.loss_weights)
    pen_term = None
    if config.penalty is not None:
        lo, hi = config.penalty
        pen_term = bound_penalty(qf, lo, hi, scenario.grid.dx)
        total_loss = data_term + pen_term
    else:
        total_loss = data_term
    (seed,) = t.backward(total_loss, wrt=[qf])
    pen_val = float(val(pen_term)) if pen_term is not None else 0.0
    return float(val(total_loss)), pen_val, seed


def scenario_members(scenario):
    """Training members as (q0, target) pairs; a plain scenario has one."""
    members = getattr(scenario, "members", None)
    if members:
        return list(members)
    return [(scenario.q0, scenario.exact_final)]


def _member_loss_and_grad(scenario, bundle, config, q0, target):
    grid = scenario.grid
    flux_fn = _flux_fn(scenario, bundle)
    store = scenario.flux_kind in CONSTRAINED_KINDS
    _, trace = solver.rollout(flux_fn, q0, grid, stepper="euler",
                              store_faces=store)
    if trace.diverged:
        return np.inf, 0.0, None, trace

    loss_val, pen_val, gq = _loss_and_seed(trace.states[-1], scenario, config,
                                           target)

    specs = network.bundle_specs(bundle)
    grad_flat = np.zeros(sum(network.n_params(s) for s in specs.values()))
    for n in range(grid.n_t - 1, -1, -1):
        t = Tape()
        leaves = {name: network.as_leaves(p, t) for name, p in bundle.items()}
        q_leaf = t.leaf(trace.states[n])
        q_next, _ = solver.step_forward_euler(_flux_fn(scenario, leaves),
                                              q_leaf, grid)
        wrt = [q_leaf]
        for p in leaves.values():
            wrt.extend(p.arrays())
        grads = t.backward(q_next, wrt=wrt, seed=gq)
        gq = grads[0]
        grad_flat += np.concatenate([g.ravel() for g in grads[1:]])
    return loss_val, pen_val, grad_flat, trace


def rollout_loss_and_grad(scenario, bundle, config: TrainConfig, jobs=1):
    """Averaged loss, flat parameter gradient, and traces over the members.

    Each member's forward rollout runs on raw values and stores every state;
    the backward sweep re-records one step at a time on a private tape,
    pulls the state cotangent through it, and accumulates the parameter
    cotangents.  Members may run on ``jobs`` threads; the reduction is in
    member order either way.  On divergence of any member the gradient is
    None and the loss inf.
    """
    tune_allocator()
    members = scenario_members(scenario)
    if jobs > 1 and len(members) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(
                lambda pair: _member_loss_and_grad(scenario, bundle, config, *pair),
                members))
    else:
        parts = [_member_loss_and_grad(scenario, bundle, config, *pair)
                 for pair in members]

    traces = [p[3] for p in parts]
    if any(tr.diverged for tr in traces):
        return np.inf, 0.0, None, traces
    m = float(len(members))
    loss_val = sum(p[0] for p in parts) / m
    pen_val = sum(p[1] for p in parts) / m
    grad = parts[0][2] / m
    for p in parts[1:]:
        grad += p[2] / m
    return loss_val, pen_val, grad, traces


def rollout_loss_value(scenario, bundle, config: TrainConfig):
    """Averaged member loss on raw values (no gradient)."""
    flux_fn = _flux_fn(scenario, bundle)
    total_loss = 0.0
    members = scenario_members(scenario)
    for q0, target in members:
        _, trace = solver.rollout(flux_fn, q0, scenario.grid, stepper="euler")
        if trace.diverged:
            return np.inf
        loss_val, _, _ = _loss_and_seed(trace.states[-1], scenario, config, target)
        total_loss += loss_val
    return total_loss / len(members)


def taped_rollout_loss(scenario, bundle, config: TrainConfig, stepper="euler"):
    """Record the whole rollout(s) plus loss on one tape; for small instances.

    Returns (tape, loss_var, wrt) where ``wrt`` are the parameter leaves in
    bundle order.  Gradients from this tape match the checkpointed sweep.
    """
    t = Tape()
    leaves = {name: network.as_leaves(p, t) for name, p in bundle.items()}
    grid = scenario.grid
    flux_fn = _flux_fn(scenario, leaves)

    def rhs(state):
        return -(1.0 / grid.dx) * solver.flux_divergence(
            flux_fn(state).flux, grid.bc)

    members = scenario_members(scenario)
    loss = None
    for q0, target in members:
        if stepper == "euler":
            q, _ = solver.rollout(flux_fn, t.leaf(q0), grid, stepper="euler",
                                  record_tv=False)
        else:
            q = t.leaf(q0)
            for _ in range(grid.n_t):
                q = solver.step_rk4(rhs, q, grid.dt)
        member_loss = loss_l2(q, target, grid.dx, scenario.loss_weights)
        if config.penalty is not None:
            lo, hi = config.penalty
            member_loss = member_loss + bound_penalty(q, lo, hi, grid.dx)
        loss = member_loss if loss is None else loss + member_loss
    if len(members) > 1:
        loss = loss * (1.0 / len(members))
    wrt = []
    for p in leaves.values():
        wrt.extend(p.arrays())
    return t, loss, wrt


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def _recorded_states(trace):
    if not trace.face_states:
        return None
    return np.concatenate(trace.face_states, axis=1)


def train(scenario, config: TrainConfig, bundle=None, callback=None, jobs=1):
    """Projected gradient descent through the solver rollout.

    Per iteration: rollout + loss with the current parameters, reverse-mode
    gradient, optimizer step, then (for constrained flux kinds) the CFL
    projection against the wave speeds the new parameters induce on this
    iteration's recorded face states.  Diverged rollouts skip the parameter
    update and are logged.  Returns (bundle, TrainRecord); fully
    deterministic for a fixed (seed, config).
    """
    tune_allocator()
    if bundle is None:
        bundle = make_bundle(scenario, config.seed)
    specs = network.bundle_specs(bundle)
    theta = network.pack_bundle(bundle)
    opt = init_optimizer_state(theta.size, config)
    record = TrainRecord()
    constrained = scenario.flux_kind in CONSTRAINED_KINDS
    bound = scenario.grid.cfl_bound(config.cfl_max)

    for k in range(config.n_iters):
        t0 = time.perf_counter()
        loss_val, pen_val, grad, traces = rollout_loss_and_grad(
            scenario, bundle, config, jobs=jobs)
        rollout_max_a = max(
            (max(tr.wave_speed_max) for tr in traces if tr.wave_speed_max),
            default=0.0)

        if grad is None:
            steps = [tr.diverged_step for tr in traces if tr.diverged]
            log.warning("iteration %d: rollout diverged at step %s; skipping update",
                        k, steps)
            record.loss.append(np.inf)
            record.penalty.append(0.0)
            record.max_wave_speed.append(rollout_max_a)
            record.projected.append(False)
            record.rescale_factor.append(1.0)
            record.post_max_wave_speed.append(rollout_max_a)
            record.diverged.append(True)
            record.wall_time.append(time.perf_counter() - t0)
            continue

        if config.l2_lambda:
            grad = grad + config.l2_lambda * theta
        theta, opt = optimizer_step(opt, theta, grad, config)
        bundle = network.unpack_bundle(theta, specs)

        factor = 1.0
        post_max_a = rollout_max_a
        if constrained:
            states = np.concatenate(
                [_recorded_states(tr) for tr in traces], axis=1)
            post_max_a = fluxes.max_speed_on_states(bundle["flux"], states)
            if post_max_a > bound:
                projected_params, factor = project(
                    bundle["flux"], post_max_a, config.cfl_max,
                    scenario.grid.dx, scenario.grid.dt)
                bundle["flux"] = projected_params
                theta = network.pack_bundle(bundle)
                post_max_a = fluxes.max_speed_on_states(bundle["flux"], states)

        record.loss.append(loss_val)
        record.penalty.append(pen_val)
        record.max_wave_speed.append(rollout_max_a)
        record.projected.append(factor != 1.0)
        record.rescale_factor.append(factor)
        record.post_max_wave_speed.append(post_max_a)
        record.diverged.append(False)
        record.wall_time.append(time.perf_counter() - t0)

        if callback is not None and callback(k, bundle, record):
            break
    return bundle, record


# ---------------------------------------------------------------------------
# discrete adjoint of RK4 rollouts (independent gradient route)
# ---------------------------------------------------------------------------

def _rhs_vjp(scenario, bundle, q_point, cotangent):
    """VJPs of R(q) = -div(flux)/dx at a stored stage state.

    Returns (d(R.c)/dq, flat d(R.c)/dtheta) for the given cotangent c, by
    re-recording the right-hand side at ``q_point`` and running one backward
    pass with the cotangent as seed.
    """
    t = Tape()
    leaves = {name: network.as_leaves(p, t) for name, p in bundle.items()}
    q_leaf = t.leaf(q_point)
    flux_fn = _flux_fn(scenario, leaves)
    rhs = -(1.0 / scenario.grid.dx) * solver.flux_divergence(
        flux_fn(q_leaf).flux, scenario.grid.bc)
    wrt = [q_leaf]
    for p in leaves.values():
        wrt.extend(p.arrays())
    grads = t.backward(rhs, wrt=wrt, seed=cotangent)
    return grads[0], np.concatenate([g.ravel() for g in grads[1:]])


def adjoint_gradient_rk4(scenario, bundle, config: TrainConfig | None = None):
    """Exact gradient of the RK4 rollout loss via the four-stage adjoint.

    The forward pass stores the stage states q^{n,0..3}.  Backward in time,
    with lam4 the cotangent of the step result,

        lam3 = lam4 + (dt/2) lam4 . dR/dq |_{q3}
        lam2 = lam4 + (dt/2) lam3 . dR/dq |_{q2}
        lam1 = lam4 +  dt    lam2 . dR/dq |_{q1}
        next = lam4 +  dt  sum_s w_s lam_s . dR/dq |_{q_{s-1}}

    and the parameter gradient accumulates dt sum_s w_s lam_s . dR/dtheta
    evaluated at the same stage states.  Matches the taped gradient of the
    same rollout to rounding.
    """
    if config is None:
        config = TrainConfig(n_iters=0)
    grid = scenario.grid
    flux_fn = _flux_fn(scenario, bundle)

    def rhs(state):
        return -(1.0 / grid.dx) * solver.flux_divergence(
            flux_fn(state).flux, grid.bc)

    n_theta = sum(network.n_params(s) for s in network.bundle_specs(bundle).values())
    grad = np.zeros(n_theta)
    w = RK4_WEIGHTS
    dt = grid.dt
    members = scenario_members(scenario)
    for q_init, target in members:
        q = q_init
        stages = []
        for _ in range(grid.n_t):
            q, stage_states = solver.step_rk4(rhs, q, grid.dt, return_stages=True)
            stages.append(stage_states)

        _, _, lam = _loss_and_seed(q, scenario, config, target)

        for n in range(grid.n_t - 1, -1, -1):
            q0, q1, q2, q3 = stages[n]
            lam4 = lam
            gq3, gth3 = _rhs_vjp(scenario, bundle, q3, lam4)
            lam3 = lam4 + 0.5 * dt * gq3
            gq2, gth2 = _rhs_vjp(scenario, bundle, q2, lam3)
            lam2 = lam4 + 0.5 * dt * gq2
            gq1, gth1 = _rhs_vjp(scenario, bundle, q1, lam2)
            lam1 = lam4 + dt * gq1
            gq0, gth0 = _rhs_vjp(scenario, bundle, q0, lam1)
            grad += dt * (w[0] * gth0 + w[1] * gth1 + w[2] * gth2 + w[3] * gth3)
            lam = lam4 + dt * (w[0] * gq0 + w[1] * gq1 + w[2] * gq2 + w[3] * gq3)
    return grad / len(members)
