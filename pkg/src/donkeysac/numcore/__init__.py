"""Tensor arithmetic, reverse-mode differentiation and Adam."""

from .checkpoint import CheckpointError, load, save
from .optim import Adam
from .rng import SeededRng
from .tensor import (
    GradMap,
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    add,
    backward,
    bce_with_logits,
    clamp,
    concat,
    conv2d,
    transpose,
    conv_output_size,
    deconv2d,
    div,
    exp,
    expm1,
    getitem,
    linear,
    log,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    parameters_grad,
    relu,
    reshape,
    sigmoid,
    softplus,
    square,
    sub,
    tanh,
    tsum,
)


def uniform_init(rng: SeededRng, shape, fan_in: int, dtype="float32", name=None) -> Tensor:
    """Uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / fan_in ** 0.5
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True, name=name)
