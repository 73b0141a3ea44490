"""Projected time evolution of neural quantum states on the 2D transverse-field Ising model."""

from .ansatz import AnsatzKind, JastrowNet, LogStateVector, PeriodicConvNet, VariationalState
from .driver import AnsatzSpec, OptimizerConfig, QuenchSpec, compress, run_quench, step
from .exact import exact_evolve, fidelity_exact, infidelity_exact
from .lattice import LatticeSpec
from .operators import build_tfim, split_diag_offdiag
from .schemes import SchemeKind, build_plan, verify_order

__all__ = [
    "AnsatzKind",
    "AnsatzSpec",
    "JastrowNet",
    "LatticeSpec",
    "LogStateVector",
    "OptimizerConfig",
    "PeriodicConvNet",
    "QuenchSpec",
    "SchemeKind",
    "VariationalState",
    "build_plan",
    "build_tfim",
    "compress",
    "exact_evolve",
    "fidelity_exact",
    "infidelity_exact",
    "run_quench",
    "split_diag_offdiag",
    "step",
    "verify_order",
]
