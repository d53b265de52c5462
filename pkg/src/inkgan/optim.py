"""Adam parameter updates with a deterministic, per-network state.

Defaults follow the training recipe used throughout: learning rate 2e-4,
beta1 0.5, beta2 0.999, epsilon 1e-7. Bias correction is applied and epsilon
sits outside the square root: theta -= alpha * m_hat / (sqrt(v_hat) + eps).
"""

import numpy as np

from .errors import GradientError, ShapeError


class AdamState:
    """First/second moment buffers plus hyperparameters for one network."""

    def __init__(self, params, alpha=2e-4, beta1=0.5, beta2=0.999, eps=1e-7):
        self.alpha = float(alpha)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params, state):
    """One Adam update over every parameter tensor; grads are consumed.

    params: dict of name -> Tensor with populated (or None, meaning zero)
    grads. Validates every gradient before touching any parameter, so a
    non-finite gradient leaves the state untouched. Grads are zeroed after
    the update.
    """
    grads = {}
    for name, p in params.items():
        if name not in state.m:
            raise GradientError(f"adam_step: parameter {name!r} unknown to this state")
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name!r}"
            )
        if not np.all(np.isfinite(g)):
            raise GradientError(f"adam_step: non-finite gradient for {name!r}")
        grads[name] = g

    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.alpha * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None


def zero_grads(params):
    """Clear the grad buffer of every parameter (dict or iterable of tensors)."""
    tensors = params.values() if hasattr(params, "values") else params
    for p in tensors:
        p.grad = None
