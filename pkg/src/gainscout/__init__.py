"""Active channel-gain mapping with UAV swarms over procedural urban worlds."""

from .channel import (
    GainField,
    MeasurementLog,
    TruthParams,
    count_blockages,
    load_field,
    measure,
    sample_shadowing,
    save_field,
    synthesize_field,
)
from .grid import (
    ACTIONS,
    GenParams,
    GridSpec,
    SwarmState,
    UrbanWorld,
    crop_world,
    generate_world,
    is_legal,
    legal_moves,
    load_world,
    save_world,
    transition,
)
from .kriging import (
    KrigingModel,
    KrigingPredictor,
    Posterior,
    fit_kernel,
    fit_path_loss,
    load_model,
    path_loss,
    posterior,
    posterior_variance_field,
    save_model,
)
from .metrics import binned_rmse, evaluate, evaluation_mask, goodness_of_fit, rmse
from .mission import (
    MissionConfig,
    MissionResult,
    load_result,
    run_mission,
    sample_start,
    save_result,
)
from .planners import (
    MissionPlan,
    PlanRequest,
    gaussian_entropy,
    load_plan,
    plan_entropy_vi,
    plan_greedy_variance,
    plan_random_waypoint,
    save_plan,
    step_reward_entropy,
)

__version__ = "0.1.0"
