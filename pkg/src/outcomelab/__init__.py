"""outcomelab: a finite-MDP laboratory for outcome vs. process supervision.

Exact dynamic programming, concentrability coefficients, trajectory
change-of-measure certification, reward imputation from total rewards,
pessimistic version-space planning, preference/contrastive learning, and
advantage-based process rewards, all at brute-force-verifiable scale.
"""

from .mdp import (
    EnumerationCapError,
    LayeredMdp,
    MdpSkeleton,
    MdpValidationError,
    OccupancyTables,
    PolicyClass,
    StateActionTable,
    TabularPolicy,
    Trajectory,
    ValueTables,
    build_mdp,
    occupancy_measures,
    optimal_policy,
    optimal_value,
    policy_return,
    sample_trajectory,
    value_tables,
)

__all__ = [
    "EnumerationCapError",
    "LayeredMdp",
    "MdpSkeleton",
    "MdpValidationError",
    "OccupancyTables",
    "PolicyClass",
    "StateActionTable",
    "TabularPolicy",
    "Trajectory",
    "ValueTables",
    "build_mdp",
    "occupancy_measures",
    "optimal_policy",
    "optimal_value",
    "policy_return",
    "sample_trajectory",
    "value_tables",
]

__version__ = "0.1.0"
