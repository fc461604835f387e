"""Multi-modal dense retrieval with a visual module plugin, at desk scale."""

import os

# Small matrices: one BLAS thread is both faster and keeps reductions reproducible.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from marvel.autodiff import (  # noqa: E402
    ContractError,
    DimensionError,
    NumericError,
    Tensor,
    cosine_sim,
    finite_diff_check,
    matmul,
    precision,
    softmax,
)

__all__ = [
    "ContractError",
    "DimensionError",
    "NumericError",
    "Tensor",
    "cosine_sim",
    "finite_diff_check",
    "matmul",
    "precision",
    "softmax",
]

__version__ = "0.1.0"
