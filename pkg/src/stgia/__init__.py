"""Gradient inversion attacks and adaptive location-privacy defenses for
federated next-location training, at desk scale.

The package simulates the full loop: clients train a small differentiable
next-location model on road-network trajectories and share gradients; an
honest-but-curious server reconstructs client locations from those gradients
by gradient matching with spatiotemporal warm starts, road-network mapping,
and multi-round calibration; and clients defend themselves with metric
differential-privacy mechanisms whose budgets adapt to the measured attack
risk.
"""

from .attack import (
    AttackConfig,
    AttackerView,
    AttackReport,
    DummyData,
    ReconstructionLog,
    attack_iterations,
    attack_success_rate,
    calibrate,
    gradient_match,
    initialize_dummy,
    run_attack,
)
from .dataio import (
    CheckIn,
    Trajectory,
    constrained_domain_for,
    load_checkins,
    resample_trajectory,
    synthesize_trajectories,
)
from .defense import (
    DefensePlan,
    GraphExponentialMechanism,
    ImportanceParams,
    PrivacyBudget,
    RiskProfile,
    RiskSource,
    adaptive_defense_round,
    allocate_budget,
    audit_ratio_bound,
    dpsgd_perturb,
    geogi_sample,
    geoi_sample,
    importance,
    pgem_distribution,
    pgem_sample,
)
from .errors import (
    BudgetExhausted,
    ConfigurationError,
    InputError,
    LogicError,
    NumericError,
    StgiaError,
)
from .fedsim import (
    ClientState,
    Transcript,
    fedavg_aggregate,
    local_update,
    read_transcript,
    run_training,
    truth_inputs_map,
    write_transcript,
)
from .geo import (
    ConstrainedDomain,
    Location,
    ProjectionSpec,
    RoadNetwork,
    generate_grid_network,
    nearest_on_network,
    read_network,
    shortest_path_distance,
    to_planar,
    write_network,
)
from .model import (
    CellGrid,
    ModelSpec,
    TrainingWindow,
    attack_gradient,
    forward,
    init_params,
    loss,
    param_gradient,
    recall_at_k,
)

__version__ = "0.1.0"
