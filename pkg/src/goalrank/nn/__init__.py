from .autodiff import ContractError, Tensor, grad
from .optim import OptimizerState, make_optimizer, step
from .scorer import (
    Layout,
    ParameterVector,
    ScorerSpec,
    ShapeError,
    build_layout,
    capacity,
    forward_scores,
    init_scorer,
    list_value,
    load_checkpoint,
    save_checkpoint,
    step_logits,
)


def backward(theta: Tensor, loss: Tensor):
    """Gradient of the scalar ``loss`` trace with respect to the flat parameter leaf."""
    return grad(loss, theta)


__all__ = [
    "ContractError",
    "Layout",
    "OptimizerState",
    "ParameterVector",
    "ScorerSpec",
    "ShapeError",
    "Tensor",
    "backward",
    "build_layout",
    "capacity",
    "forward_scores",
    "grad",
    "init_scorer",
    "list_value",
    "load_checkpoint",
    "make_optimizer",
    "save_checkpoint",
    "step",
    "step_logits",
]
