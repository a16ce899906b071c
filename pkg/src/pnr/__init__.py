"""Differentiable p-norm regression (pNR) layer with a toy pose-transfer pipeline."""

from .errors import ConfigError, ContractError, DimensionError, FormatError, PnrError, SingularMatrixError
from .layer import gradcheck, pnr_forward
from .solver import (
    PnrConfig,
    RegressionProblem,
    RegressionSolution,
    lad_oracle,
    objective,
    predict_target,
    sample_mask,
    solve,
    solve_lad_irls,
    solve_lse,
    solve_masked,
    stack_shots,
)
from .tensor import Tape, cholesky_solve_spd, load_matrix, matmul, save_matrix

__version__ = "0.1.0"
