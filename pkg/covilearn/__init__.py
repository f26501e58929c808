"""Transfer-learning chest X-ray screening on a numpy autodiff core."""

from covilearn.architectures import assemble_model, build_backbone, parameter_table, total_parameters
from covilearn.errors import CovilearnError
from covilearn.tensor import GradientTape, Tensor, backward

__all__ = [
    "CovilearnError",
    "GradientTape",
    "Tensor",
    "assemble_model",
    "backward",
    "build_backbone",
    "parameter_table",
    "total_parameters",
]
