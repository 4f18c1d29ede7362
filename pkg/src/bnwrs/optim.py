"""SGD, SGD+momentum, Adam, AdamW and momentum-projected Adam.

Adam follows the six-step rule

    g_t   = gradient (plus coupled decay, if any)
    m_t   = beta1 * m_{t-1} + (1 - beta1) * g_t
    v_t   = beta2 * v_{t-1} + (1 - beta2) * g_t^2
    mhat  = m_t / (1 - beta1^t)
    vhat  = v_t / (1 - beta2^t)
    theta = theta - lr * mhat / (sqrt(vhat) + eps)

AdamW applies weight decay decoupled from the moment estimates
(``theta -= lr * lam * theta`` after the Adam update).  The projected
variant removes the radial component of the update on scale-invariant
weight slices so every applied step is tangent to the slice's sphere;
those slices receive no decay.

Each step function mutates ``param.data`` in place and returns the
effective update direction (pre-learning-rate): the raw gradient for the
SGD family, ``mhat / (sqrt(vhat) + eps)`` for the Adam family.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .layers import scale_slices, slice_dots
from .tensor import Tensor

__all__ = [
    "OptimizerState",
    "LrSchedule",
    "Optimizer",
    "sgd_step",
    "adam_step",
    "adamp_step",
    "effective_gradient_norm",
    "project_out_radial",
]

OPTIMIZER_KINDS = ("sgd", "sgdm", "adam", "adamw", "adamp")


@dataclass
class OptimizerState:
    """Mutable per-parameter optimizer state.

    ``momentum`` doubles as beta1 for the Adam family.  ``decay_in_buffer``
    selects whether SGDM folds weight decay into the momentum buffer
    (default) or adds it outside.
    """

    kind: str
    lr: float
    momentum: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    decay_in_buffer: bool = True
    step_count: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.epsilon <= 0:
            raise ConfigError(f"optimizer epsilon must be > 0, got {self.epsilon}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum/beta1 must be in [0,1), got {self.momentum}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"beta2 must be in [0,1), got {self.beta2}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")


def _require_grad(grad) -> np.ndarray:
    if grad is None:
        raise ValueError("optimizer step called with no gradient populated")
    return np.asarray(grad, dtype=np.float64)


def sgd_step(param: Tensor, grad, state: OptimizerState, lr: Optional[float] = None,
             weight_decay: Optional[float] = None) -> np.ndarray:
    """Plain or momentum SGD step with coupled weight decay.

    Momentum uses ``buffer <- mu * buffer + g`` (no dampening) and the
    update ``param <- param - lr * buffer``.
    """
    g = _require_grad(grad)
    if g.shape != param.data.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameter {param.data.shape}")
    eta = state.lr if lr is None else lr
    lam = state.weight_decay if weight_decay is None else weight_decay
    state.step_count += 1
    if state.kind == "sgd" or state.momentum == 0.0:
        update = g + lam * param.data if lam else g
        param.data = param.data - eta * update
    else:
        if state.m is None:
            state.m = np.zeros_like(param.data)
        if lam and state.decay_in_buffer:
            state.m = state.momentum * state.m + (g + lam * param.data)
            param.data = param.data - eta * state.m
        else:
            state.m = state.momentum * state.m + g
            outside = lam * param.data if lam else 0.0
            param.data = param.data - eta * (state.m + outside)
    return g


def _adam_direction(g: np.ndarray, state: OptimizerState) -> np.ndarray:
    if state.m is None:
        state.m = np.zeros_like(g)
        state.v = np.zeros_like(g)
    b1, b2 = state.momentum, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * g * g
    t = state.step_count
    mhat = state.m / (1.0 - b1 ** t)
    vhat = state.v / (1.0 - b2 ** t)
    return mhat / (np.sqrt(vhat) + state.epsilon)


def adam_step(param: Tensor, grad, state: OptimizerState, lr: Optional[float] = None,
              weight_decay: Optional[float] = None) -> np.ndarray:
    """Adam (coupled decay added to the raw gradient) or AdamW (decoupled)."""
    g = _require_grad(grad)
    eta = state.lr if lr is None else lr
    lam = state.weight_decay if weight_decay is None else weight_decay
    state.step_count += 1
    if state.kind == "adam" and lam:
        g = g + lam * param.data
    direction = _adam_direction(g, state)
    new = param.data - eta * direction
    if state.kind in ("adamw", "adamp") and lam:
        new = new - eta * lam * param.data
    param.data = new
    return direction


def project_out_radial(update: np.ndarray, weight: np.ndarray, slice_kind: str) -> np.ndarray:
    """Remove the component of ``update`` parallel to each weight slice.

    Zero-norm slices are left untouched (nothing to project against).
    """
    dots = slice_dots(weight, update, slice_kind)
    sq = slice_dots(weight, weight, slice_kind)
    factors = np.divide(dots, sq, out=np.zeros_like(dots), where=sq > 0)
    return update - scale_slices(weight, factors, slice_kind)


def adamp_step(param: Tensor, grad, state: OptimizerState, scale_invariant: bool,
               slice_kind: str = "dense", lr: Optional[float] = None,
               weight_decay: Optional[float] = None) -> np.ndarray:
    """Adam step whose update is projected tangent to scale-invariant slices.

    Non-invariant parameters take a plain decoupled-decay Adam step.
    Invariant slices are never decayed: decay is radial and would break
    the tangency of the applied update.
    """
    g = _require_grad(grad)
    eta = state.lr if lr is None else lr
    lam = state.weight_decay if weight_decay is None else weight_decay
    state.step_count += 1
    direction = _adam_direction(g, state)
    if scale_invariant:
        direction = project_out_radial(direction, param.data, slice_kind)
        param.data = param.data - eta * direction
    else:
        param.data = param.data - eta * direction
        if lam:
            param.data = param.data - eta * lam * param.data
    return direction


def effective_gradient_norm(param, effective_update) -> float:
    """Ratio of the effective update norm to the weight norm."""
    w = param.data if isinstance(param, Tensor) else np.asarray(param)
    u = np.asarray(effective_update)
    wn = float(np.linalg.norm(w))
    un = float(np.linalg.norm(u))
    if not np.isfinite(wn) or not np.isfinite(un):
        raise ValueError("non-finite norm in effective gradient ratio")
    if wn == 0.0:
        raise ZeroDivisionError("effective gradient ratio undefined for zero weight norm")
    return un / wn


@dataclass
class LrSchedule:
    """Piecewise-constant schedule: divide by ``1/decay_factor`` at each listed epoch."""

    initial: float
    decay_epochs: tuple = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.initial <= 0:
            raise ConfigError(f"initial learning rate must be > 0, got {self.initial}")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError(f"decay factor must be in (0,1), got {self.decay_factor}")
        self.decay_epochs = tuple(sorted(int(e) for e in self.decay_epochs))

    def value(self, epoch: int) -> float:
        n = sum(1 for e in self.decay_epochs if e <= epoch)
        return self.initial * self.decay_factor ** n


class Optimizer:
    """Steps a named parameter set with one state per parameter.

    ``roles`` maps parameter names to ``(scale_invariant, slice_kind)``;
    parameters absent from the map are treated as non-invariant.
    ``step`` takes a per-parameter weight-decay map (the regularizer
    decides who decays) and returns the effective update directions.
    """

    def __init__(self, kind: str, params: dict, lr: float, momentum: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8,
                 decay_in_buffer: bool = True, roles: Optional[dict] = None):
        if kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimizer kind {kind!r}")
        self.kind = kind
        self.roles = roles or {}
        self.states = {
            name: OptimizerState(
                kind=kind, lr=lr, momentum=momentum, beta2=beta2,
                epsilon=epsilon, decay_in_buffer=decay_in_buffer,
            )
            for name in params
        }

    def step(self, params: dict, grads: dict, lr: float, decay: Optional[dict] = None) -> dict:
        decay = decay or {}
        effective = {}
        for name, param in params.items():
            state = self.states[name]
            lam = decay.get(name, 0.0)
            grad = grads.get(name)
            if grad is None:
                raise ValueError(f"missing gradient for parameter {name}")
            if self.kind in ("sgd", "sgdm"):
                effective[name] = sgd_step(param, grad, state, lr=lr, weight_decay=lam)
            elif self.kind == "adamp":
                invariant, slice_kind = self.roles.get(name, (False, "dense"))
                effective[name] = adamp_step(
                    param, grad, state, invariant, slice_kind, lr=lr, weight_decay=lam
                )
            else:
                effective[name] = adam_step(param, grad, state, lr=lr, weight_decay=lam)
        return effective
