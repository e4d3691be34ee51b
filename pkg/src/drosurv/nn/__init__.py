from .autodiff import (NumericError, Var, backward, finite_difference, grad, gradcheck,
                       relative_error)
from .models import (ModelParams, ModelSpec, forward, forward_scalar, forward_simplex,
                     init_params, predict_simplex)

__all__ = [
    "NumericError", "Var", "backward", "finite_difference", "grad", "gradcheck",
    "relative_error", "ModelParams", "ModelSpec", "forward", "forward_scalar",
    "forward_simplex", "init_params", "predict_simplex",
]
