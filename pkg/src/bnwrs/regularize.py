"""Weight decay and periodic weight rescaling.

Four modes:

* ``none`` - no regularization; the optimizer step is untouched.
* ``wd``   - classic weight decay with coefficient ``lam`` on every
  dense/conv weight and on batchnorm gamma, applied through the
  optimizer's own coupling convention (coupled for SGD/SGDM/Adam,
  decoupled for AdamW).
* ``wrs``  - every ``tau`` optimizer steps, divide each scale-invariant
  slice (and, for classification heads, each output-layer column) by its
  L2 norm; ``lam`` then acts only on the batchnorm parameters.
* ``wrs_ic`` - like ``wrs`` but conv kernels are rescaled per input-channel
  fiber at every spatial position and output channel.  This variant is
  not function-preserving: it reweights spatial positions.

Rescaling runs after the optimizer step on firing steps; momentum and
second-moment buffers are left untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .layers import BatchNormLayer, Network, scale_slices, slice_norms
from .tensor import Tensor

__all__ = [
    "RegularizerConfig",
    "weight_rescale",
    "weight_rescale_ic",
    "apply_regularizer_step",
    "wd_gradient_contribution",
    "decay_coefficients",
    "LAMBDA_GRID",
    "TAU_GRID",
]

REGULARIZER_MODES = ("none", "wd", "wrs", "wrs_ic")

# Canonical sweep grids for the decay coefficient and the rescale period.
LAMBDA_GRID = (5e-3, 5e-4, 5e-5)
TAU_GRID = (10, 20, 30, 40, 50)


@dataclass
class RegularizerConfig:
    mode: str = "none"
    lam: float = 0.0
    tau: int = 10
    normalize_output_layer: bool = True
    active_window: Optional[tuple] = None  # [start_epoch, end_epoch), None = always

    def __post_init__(self):
        if self.mode not in REGULARIZER_MODES:
            raise ConfigError(f"unknown regularizer mode {self.mode!r}")
        if self.lam < 0:
            raise ConfigError(f"regularizer lambda must be >= 0, got {self.lam}")
        if self.mode in ("wrs", "wrs_ic") and self.tau < 1:
            raise ConfigError(f"rescale period tau must be >= 1, got {self.tau}")
        if self.active_window is not None:
            start, end = self.active_window
            if start < 0 or end < start:
                raise ConfigError(f"active window must satisfy 0 <= start <= end, got {self.active_window}")
            self.active_window = (int(start), int(end))

    def active(self, epoch: int) -> bool:
        if self.active_window is None:
            return True
        start, end = self.active_window
        return start <= epoch < end


def _rescale_array(weight: np.ndarray, kind: str) -> tuple:
    """Divide each slice by its norm; returns (new array, zero-norm skips)."""
    norms = slice_norms(weight, kind)
    skips = int(np.count_nonzero(norms == 0.0))
    factors = np.divide(1.0, norms, out=np.ones_like(norms), where=norms > 0)
    return scale_slices(weight, factors, kind), skips


def weight_rescale(network: Network, normalize_output_layer: bool = True) -> int:
    """Rescale every scale-invariant slice to unit norm.

    Dense weights are normalized per neuron column, conv kernels per
    output channel.  When ``normalize_output_layer`` the output layer's
    columns are unit-normalized too.  Batchnorm gamma/beta are untouched.
    Zero-norm slices are skipped; the skip count is returned.
    """
    skips = 0
    for _, layer in network.hidden_weight_layers():
        if not layer.scale_invariant:
            continue
        layer.weight.data, s = _rescale_array(layer.weight.data, layer.slice_kind)
        skips += s
    if normalize_output_layer:
        out = network.output_layer
        out.weight.data, s = _rescale_array(out.weight.data, out.slice_kind)
        skips += s
    return skips


def weight_rescale_ic(network: Network, normalize_output_layer: bool = True) -> int:
    """Rescale each input-channel fiber of conv kernels to unit norm.

    For a kernel of shape (K, K, C_in, C_out), every fiber
    ``W[i, j, :, s]`` is normalized separately.  Dense layers fall back to
    per-column rescaling.  Unlike ``weight_rescale`` this changes the
    network function for K > 1 or multi-position kernels.
    """
    skips = 0
    for _, layer in network.hidden_weight_layers():
        if not layer.scale_invariant:
            continue
        w = layer.weight.data
        if layer.slice_kind == "conv":
            norms = np.sqrt((w * w).sum(axis=2, keepdims=True))
            skips += int(np.count_nonzero(norms == 0.0))
            factors = np.divide(1.0, norms, out=np.ones_like(norms), where=norms > 0)
            layer.weight.data = w * factors
        else:
            layer.weight.data, s = _rescale_array(w, layer.slice_kind)
            skips += s
    if normalize_output_layer:
        out = network.output_layer
        out.weight.data, s = _rescale_array(out.weight.data, out.slice_kind)
        skips += s
    return skips


def apply_regularizer_step(network: Network, config: RegularizerConfig,
                           global_step: int, epoch: int) -> dict:
    """Run the post-update regularizer actions for one optimizer step.

    Weight decay itself is folded into the optimizer step via
    ``decay_coefficients``; this applies the periodic rescale, firing
    exactly when ``global_step % tau == 0`` inside the active window.
    Steps count from 1, so the first firing happens at step ``tau``.
    """
    events = {"fired": False, "zero_norm_skips": 0}
    if config.mode in ("wrs", "wrs_ic") and config.active(epoch) and global_step % config.tau == 0:
        rescale = weight_rescale if config.mode == "wrs" else weight_rescale_ic
        events["zero_norm_skips"] = rescale(network, config.normalize_output_layer)
        events["fired"] = True
    return events


def wd_gradient_contribution(param, lam: float) -> np.ndarray:
    """Coupled-decay gradient term ``lam * param``."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    data = param.data if isinstance(param, Tensor) else np.asarray(param)
    return lam * data


def decay_coefficients(network: Network, config: RegularizerConfig, epoch: int) -> dict:
    """Per-parameter weight-decay coefficients for one step.

    ``wd`` decays all dense/conv weights plus batchnorm gamma; the
    rescaling modes decay only the batchnorm parameters (gamma and beta).
    Outside the active window everything is zero.
    """
    if config.mode == "none" or config.lam == 0.0 or not config.active(epoch):
        return {}
    out = {}
    if config.mode == "wd":
        for i, layer in network.weight_layers():
            out[f"layer{i}.weight"] = config.lam
        for i, layer in enumerate(network.layers):
            if isinstance(layer, BatchNormLayer):
                out[f"layer{i}.gamma"] = config.lam
    else:
        for i, layer in enumerate(network.layers):
            if isinstance(layer, BatchNormLayer):
                out[f"layer{i}.gamma"] = config.lam
                out[f"layer{i}.beta"] = config.lam
    return out
