"""Differentiable 1D finite-volume solvers with constrained neural fluxes."""

from .fluxes import (
    FaceStates,
    FluxResult,
    generalized_flux,
    max_speed_on_states,
    max_wave_speed_over_rollout,
    minmod,
    psi_limiter,
    reconstruct,
    rusanov_scalar,
    rusanov_system,
    slope_ratio,
    unconstrained_flux,
)
from .network import (
    ConfigError,
    NetParams,
    NetSpec,
    forward,
    forward_with_input_jacobian,
    init_params,
    input_jacobian,
    load_checkpoint,
    save_checkpoint,
)
from .scenarios import (
    SCENARIOS,
    Scenario,
    make_scenario,
    scenario_advection,
    scenario_antidiffusion,
    scenario_burgers,
    scenario_euler_sod,
)
from .solver import (
    Grid,
    RolloutTrace,
    rollout,
    step_forward_euler,
    step_rk4,
    total_variation,
)
from .tape import GradientError, Tape, Var, grad_check, val
from .training import (
    TrainConfig,
    TrainRecord,
    adam_step,
    adjoint_gradient_rk4,
    bound_penalty,
    l2_error,
    loss_l2,
    make_bundle,
    project,
    rmsprop_step,
    rollout_loss_and_grad,
    taped_rollout_loss,
    train,
)

__version__ = "0.1.0"
