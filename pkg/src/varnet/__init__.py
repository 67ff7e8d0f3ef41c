"""Two-tier neural reactive-power control for smart inverters on radial feeders."""

from ._kernels import BACKEND
from .errors import (
    ArchitectureMismatch,
    ContractError,
    DivergenceError,
    InfeasibleError,
    IngestionError,
    TopologyError,
    VarnetError,
)
from .feeder import (
    FeederModel,
    FeederTopology,
    GridConditions,
    Line,
    SensitivityMatrices,
    VoltageLimits,
    build_sensitivities,
    constraint_g,
    ieee13,
    load_feeder,
    losses,
    losses_gradient,
    predict_voltages,
)
from .policy import Architecture, PolicyParams, forward, init_params, jacobian

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ArchitectureMismatch",
    "ContractError",
    "DivergenceError",
    "InfeasibleError",
    "IngestionError",
    "TopologyError",
    "VarnetError",
    "FeederModel",
    "FeederTopology",
    "GridConditions",
    "Line",
    "SensitivityMatrices",
    "VoltageLimits",
    "build_sensitivities",
    "constraint_g",
    "ieee13",
    "load_feeder",
    "losses",
    "losses_gradient",
    "predict_voltages",
    "Architecture",
    "PolicyParams",
    "forward",
    "init_params",
    "jacobian",
]
