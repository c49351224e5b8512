"""Spectral simulation of the 2D stochastic Navier-Stokes vorticity equation with
degenerate multiplicative noise, and Malliavin/ergodicity diagnostics."""

from .spectral import (
    Lattice, LatticeMismatch, SpectralField, VelocityField, b_tilde, bilinear_B, biot_savart,
    get_lattice, load_field, project, read_field, save_field, sobolev_norm, write_field,
)
from .noise import (
    BoundViolation, NoiseModel, apply_Q, apply_Qstar, dq_apply, make_profile, q_eval,
    validate_condition2,
)
from .spanning import check_condition1, reachable_modes
from .dynamics import (
    BlowUp, IntegratorSpec, PathRecord, jacobian_fd_check, linearized_flow, load_path,
    save_path, simulate, step,
)
from .malliavin import (
    MalliavinGram, NonConvergence, NondegeneracyEstimate, SalphaN, assemble_gram,
    constrained_min, estimate_r, quadratic_form,
)

__version__ = "0.1.0"
