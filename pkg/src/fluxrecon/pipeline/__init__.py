from .kernels import BlockPlan, FusionPlan, Kernel, KernelGraph
from .halo import HaloPlan
from .solver import (
    RKScheme,
    SSP_RK3,
    SolverOptions,
    SolverRank,
    interpolate_state,
)

__all__ = [
    "BlockPlan",
    "FusionPlan",
    "Kernel",
    "KernelGraph",
    "HaloPlan",
    "RKScheme",
    "SSP_RK3",
    "SolverOptions",
    "SolverRank",
    "interpolate_state",
]
