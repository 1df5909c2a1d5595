"""Solver for a deposit-rate major-minor mean-field game.

One major bank and a continuum of minor banks compete for depositors over
a finite horizon while a central-bank rate follows a Markov chain.  The
package trains one-hidden-layer Q-networks (treated as measures over
neurons) by fictitious-play fitted Q-iteration, rolls the greedy policies
out through the exact mean-field flow, and quantifies the distance to
equilibrium with best-response exploitability gaps.

Layout: :mod:`~bankmfg.market` (dynamics, rewards, central-bank chain),
:mod:`~bankmfg.measures` (lattice projection and mean-field transition),
:mod:`~bankmfg.nets` (networks, gradients, averaging),
:mod:`~bankmfg.trainer` (fictitious-play loop), :mod:`~bankmfg.evaluate`
(rollouts and exploitability), :mod:`~bankmfg.checkpoint` (persistence),
:mod:`~bankmfg.config` (run documents), :mod:`~bankmfg.artifacts`
(schema validation), :mod:`~bankmfg.cli` (the ``bankmfg`` command).
"""

__version__ = "0.1.0"

from .market import (
    BankState,
    CentralBankChain,
    MarketParams,
    adjustment_cost,
    drift_major,
    drift_minor,
    reward_major,
    reward_minor,
    transition_major,
    transition_minor,
)
from .measures import (
    EmpiricalMeasure,
    GridSpec,
    ProjectedMeasure,
    aggregate_minor_mass,
    mean_field_transition,
    project,
    uniform_box_measure,
)
from .nets import (
    InputEncoder,
    NeuronMeasure,
    OptimizerState,
    adam_step,
    forward,
    fp_average,
    greedy_action,
    init_neuron_measure,
    loss_and_grads,
)
from .trainer import (
    FictitiousPlayTrainer,
    InitialCondition,
    TrainConfig,
    TrainingDiverged,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluate import (
    ExploitabilityReport,
    PolicyPair,
    Trajectory,
    exploitability_report,
    policies_from_checkpoint,
    rollout,
    value_estimate,
    write_report_json,
    write_trajectories_csv,
)
from .config import (
    ConfigError,
    RunConfig,
    default_profile_path,
    load_run_config,
    subsystem_seeds,
)
from .artifacts import (
    ArtifactError,
    load_csv_spec,
    load_schema,
    validate_csv,
    validate_json,
)

__all__ = [
    "__version__",
    # market
    "BankState", "CentralBankChain", "MarketParams", "adjustment_cost",
    "drift_major", "drift_minor", "reward_major", "reward_minor",
    "transition_major", "transition_minor",
    # measures
    "EmpiricalMeasure", "GridSpec", "ProjectedMeasure",
    "aggregate_minor_mass", "mean_field_transition", "project",
    "uniform_box_measure",
    # nets
    "InputEncoder", "NeuronMeasure", "OptimizerState", "adam_step",
    "forward", "fp_average", "greedy_action", "init_neuron_measure",
    "loss_and_grads",
    # trainer
    "FictitiousPlayTrainer", "InitialCondition", "TrainConfig",
    "TrainingDiverged",
    # checkpoint
    "load_checkpoint", "save_checkpoint",
    # evaluate
    "ExploitabilityReport", "PolicyPair", "Trajectory",
    "exploitability_report", "policies_from_checkpoint", "rollout",
    "value_estimate", "write_report_json", "write_trajectories_csv",
    # config
    "ConfigError", "RunConfig", "default_profile_path", "load_run_config",
    "subsystem_seeds",
    # artifacts
    "ArtifactError", "load_csv_spec", "load_schema", "validate_csv",
    "validate_json",
]
