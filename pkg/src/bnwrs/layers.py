"""Building blocks for batch-normalized networks.

A network here is a chain of weight multiplications (dense or conv),
per-channel batch normalization, ReLU activations and pooling, ending in
a single dense output layer.  Weights whose linear output feeds directly
into a BatchNorm are flagged ``scale_invariant``: the normalization
divides out their per-channel scale, so multiplying a per-neuron column
(dense) or per-output-channel kernel (conv) by any positive constant
leaves the network function unchanged in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, ShapeError, conv2d, matmul, no_grad, relu, softmax_xent

__all__ = [
    "BatchNormState",
    "batchnorm_forward",
    "bn_layer_forward",
    "weight_standardize",
    "DenseLayer",
    "ConvLayer",
    "BatchNormLayer",
    "ReluLayer",
    "AvgPoolLayer",
    "FlattenLayer",
    "Network",
    "build_network",
    "parse_architecture",
    "slice_norms",
    "slice_dots",
    "scale_slices",
]

# Default variance guard.  Kept far below the 1e-10-scale invariance
# tolerances so the exact rescaling identities of the normalizer are not
# perturbed; it only matters for exactly-constant batches.
DEFAULT_BN_EPSILON = 1e-12
DEFAULT_BN_MOMENTUM = 0.1


@dataclass
class BatchNormState:
    """Per-channel affine normalization state.

    ``gamma`` and ``beta`` are trainable tensors; running statistics are
    plain arrays updated only in train mode as
    ``run <- (1 - momentum) * run + momentum * batch``.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = DEFAULT_BN_MOMENTUM
    epsilon: float = DEFAULT_BN_EPSILON

    @classmethod
    def create(cls, channels: int, momentum: float = DEFAULT_BN_MOMENTUM,
               epsilon: float = DEFAULT_BN_EPSILON) -> "BatchNormState":
        if epsilon <= 0:
            raise ConfigError(f"batchnorm epsilon must be > 0, got {epsilon}")
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"batchnorm momentum must be in (0,1), got {momentum}")
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm_forward(pre_activation: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Normalize per channel and apply the gamma/beta affine map.

    Train mode normalizes by the batch mean and biased batch variance
    (denominator = count) and updates running statistics; conv inputs pool
    the statistics over batch and spatial dimensions.  Eval mode uses the
    running statistics.
    """
    x = pre_activation
    if x.ndim == 2:
        axes = (0,)
        count = x.shape[0]
        pshape = (1, x.shape[1])
    elif x.ndim == 4:
        axes = (0, 2, 3)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        pshape = (1, x.shape[1], 1, 1)
    else:
        raise ShapeError(f"batchnorm expects BxC or BxCxHxW input, got {x.shape}")
    channels = state.gamma.size
    if x.shape[1] != channels:
        raise ShapeError(f"batchnorm channel mismatch: input {x.shape} vs {channels} channels")
    if mode == "train":
        if count < 2:
            raise ValueError(
                f"batchnorm train mode needs at least 2 values per channel, got {count}"
            )
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        normalized = centered / (var + state.epsilon).sqrt()
        state.running_mean = (
            (1.0 - state.momentum) * state.running_mean
            + state.momentum * mean.data.reshape(channels)
        )
        state.running_var = (
            (1.0 - state.momentum) * state.running_var
            + state.momentum * var.data.reshape(channels)
        )
    elif mode == "eval":
        if np.any(state.running_var < 0):
            raise ValueError("corrupt batchnorm state: negative running variance")
        mean = Tensor(state.running_mean.reshape(pshape))
        std = Tensor(np.sqrt(state.running_var.reshape(pshape) + state.epsilon))
        normalized = (x - mean) / std
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    return state.gamma.reshape(pshape) * normalized + state.beta.reshape(pshape)


def bn_layer_forward(h: Tensor, weight: Tensor, state: BatchNormState, mode: str,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """One full block: weight multiplication, batch normalization, ReLU."""
    if weight.ndim == 2:
        pre = matmul(h, weight)
    else:
        pre = conv2d(h, weight, stride=stride, padding=padding)
    return relu(batchnorm_forward(pre, state, mode))


# ``weight_standardize`` guard inside the variance square root; small enough
# that re-standardizing an already standardized slice is an identity to
# well below 1e-10.
WS_EPSILON = 1e-12


def weight_standardize(weight: Tensor, epsilon: float = WS_EPSILON) -> Tensor:
    """Subtract the mean and divide by the std of each output-channel slice.

    Differentiable: gradients flow through the standardization.  Dense
    weights standardize each column; conv kernels standardize each
    output-channel slice over (row, col, in-channel).
    """
    if weight.ndim == 2:
        axes = (0,)
        n = weight.shape[0]
    elif weight.ndim == 4:
        axes = (0, 1, 2)
        n = weight.shape[0] * weight.shape[1] * weight.shape[2]
    else:
        raise ShapeError(f"weight_standardize expects 2-D or 4-D weight, got {weight.shape}")
    if n < 2:
        raise ValueError(f"weight_standardize needs slices with >= 2 elements, got {n}")
    mean = weight.mean(axis=axes, keepdims=True)
    centered = weight - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    return centered / (var + epsilon).sqrt()


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class DenseLayer:
    """Fully-connected weight multiplication ``x @ W`` (no bias).

    ``W`` has shape (in, out); column j is the weight vector of neuron j.
    """

    slice_kind = "dense"

    def __init__(self, weight: Tensor, scale_invariant: bool = False,
                 standardized: bool = False):
        self.weight = weight
        self.scale_invariant = scale_invariant
        self.standardized = standardized

    @property
    def kind(self) -> str:
        return "ws_dense" if self.standardized else "dense"

    def forward(self, x: Tensor, mode: str) -> Tensor:
        w = weight_standardize(self.weight) if self.standardized else self.weight
        return matmul(x, w)

    def params(self) -> dict:
        return {"weight": self.weight}


class ConvLayer:
    """2-D convolution with kernel shape (K, K, C_in, C_out), no bias."""

    slice_kind = "conv"

    def __init__(self, kernel: Tensor, stride: int = 1, padding: int = 0,
                 scale_invariant: bool = False, standardized: bool = False):
        self.weight = kernel
        self.stride = stride
        self.padding = padding
        self.scale_invariant = scale_invariant
        self.standardized = standardized

    @property
    def kind(self) -> str:
        return "ws_conv2d" if self.standardized else "conv2d"

    def forward(self, x: Tensor, mode: str) -> Tensor:
        w = weight_standardize(self.weight) if self.standardized else self.weight
        return conv2d(x, w, stride=self.stride, padding=self.padding)

    def params(self) -> dict:
        return {"weight": self.weight}


class BatchNormLayer:
    kind = "batchnorm"

    def __init__(self, state: BatchNormState):
        self.state = state

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return batchnorm_forward(x, self.state, mode)

    def params(self) -> dict:
        return {"gamma": self.state.gamma, "beta": self.state.beta}


class ReluLayer:
    kind = "relu"

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return relu(x)

    def params(self) -> dict:
        return {}


class AvgPoolLayer:
    """Non-overlapping average pooling; spatial extents must divide evenly."""

    kind = "avgpool"

    def __init__(self, size: int = 2):
        self.size = size

    def forward(self, x: Tensor, mode: str) -> Tensor:
        b, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ShapeError(f"avgpool size {s} does not divide spatial extents {h}x{w}")
        return x.reshape(b, c, h // s, s, w // s, s).mean(axis=(3, 5))

    def params(self) -> dict:
        return {}


class FlattenLayer:
    kind = "flatten"

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))

    def params(self) -> dict:
        return {}


# ---------------------------------------------------------------------------
# Per-slice helpers
# ---------------------------------------------------------------------------


def _slice_axes(kind: str) -> tuple:
    if kind == "dense":
        return (0,)
    if kind == "conv":
        return (0, 1, 2)
    raise ValueError(f"unknown slice kind {kind!r}")


def slice_norms(weight: np.ndarray, kind: str) -> np.ndarray:
    """L2 norm of each per-neuron column (dense) or output-channel kernel (conv)."""
    axes = _slice_axes(kind)
    return np.sqrt((weight * weight).sum(axis=axes))


def slice_dots(a: np.ndarray, b: np.ndarray, kind: str) -> np.ndarray:
    """Per-slice inner products of two same-shaped weight arrays."""
    axes = _slice_axes(kind)
    return (a * b).sum(axis=axes)


def scale_slices(weight: np.ndarray, factors: np.ndarray, kind: str) -> np.ndarray:
    """Multiply each slice by its factor; factors has one entry per slice."""
    if kind == "dense":
        return weight * factors[np.newaxis, :]
    return weight * factors[np.newaxis, np.newaxis, np.newaxis, :]


# ---------------------------------------------------------------------------
# Network assembly
# ---------------------------------------------------------------------------


@dataclass
class Network:
    """Ordered layer chain ending in one dense output layer."""

    layers: list = field(default_factory=list)
    input_shape: tuple = ()
    n_classes: int = 0

    @property
    def output_layer(self) -> DenseLayer:
        return self.layers[-1]

    def weight_layers(self) -> list:
        """(index, layer) pairs for every dense/conv layer, output included."""
        return [(i, l) for i, l in enumerate(self.layers) if hasattr(l, "weight")]

    def hidden_weight_layers(self) -> list:
        return self.weight_layers()[:-1]

    def named_params(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"layer{i}.{name}"] = p
        return out

    def forward(self, x, mode: str = "train", record: Optional[dict] = None) -> Tensor:
        """Run the chain; ``record`` captures each weight layer's input array."""
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        for i, layer in enumerate(self.layers):
            if record is not None and hasattr(layer, "weight"):
                record[i] = t.data.copy()
            t = layer.forward(t, mode)
        return t

    def loss(self, x, labels, mode: str = "train") -> tuple:
        logits = self.forward(x, mode)
        return logits, softmax_xent(logits, labels)

    def predict(self, x) -> np.ndarray:
        with no_grad():
            logits = self.forward(x, mode="eval")
        return np.argmax(logits.data, axis=1)

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.zero_grad()

    def param_arrays(self) -> dict:
        """Copies of every parameter plus batchnorm running statistics."""
        out = {name: p.data.copy() for name, p in self.named_params().items()}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BatchNormLayer):
                out[f"layer{i}.running_mean"] = layer.state.running_mean.copy()
                out[f"layer{i}.running_var"] = layer.state.running_var.copy()
        return out

    def load_param_arrays(self, arrays: dict) -> None:
        params = self.named_params()
        for name, value in arrays.items():
            if name in params:
                if params[name].data.shape != value.shape:
                    raise ShapeError(
                        f"parameter {name}: shape {value.shape} does not match "
                        f"{params[name].data.shape}"
                    )
                params[name].data = value.copy()
            elif name.endswith(".running_mean") or name.endswith(".running_var"):
                idx = int(name.split(".")[0].removeprefix("layer"))
                state = self.layers[idx].state
                if name.endswith("mean"):
                    state.running_mean = value.copy()
                else:
                    state.running_var = value.copy()
            else:
                raise KeyError(f"unknown parameter {name}")


def parse_architecture(spec) -> dict:
    """Normalize an architecture description to a dict.

    Accepts dicts (returned as-is after a kind check) or compact strings
    like ``"mlp:784-256-256-10"`` listing input, hidden and class dims.
    """
    if isinstance(spec, dict):
        if spec.get("kind") not in ("mlp", "cnn"):
            raise ConfigError(f"architecture kind must be 'mlp' or 'cnn', got {spec.get('kind')!r}")
        return spec
    if isinstance(spec, str):
        head, sep, rest = spec.partition(":")
        if head != "mlp" or not sep:
            raise ConfigError(f"unrecognized architecture string {spec!r}")
        try:
            dims = [int(d) for d in rest.split("-")]
        except ValueError as exc:
            raise ConfigError(f"bad dimension in architecture string {spec!r}") from exc
        if len(dims) < 2:
            raise ConfigError(f"architecture string needs at least input and output dims: {spec!r}")
        return {"kind": "mlp", "dims": dims}
    raise ConfigError(f"architecture must be a dict or string, got {type(spec).__name__}")


def _uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


def build_network(arch, input_shape, n_classes: int, seed: int = 0,
                  bn_epsilon: float = DEFAULT_BN_EPSILON,
                  bn_momentum: float = DEFAULT_BN_MOMENTUM) -> Network:
    """Instantiate a BN network from an architecture description.

    Dense and conv weights use scaled uniform fan-in initialization
    (deterministic per seed); gamma starts at 1 and beta at 0.  Weights
    feeding a BatchNorm are marked scale-invariant.
    """
    arch = parse_architecture(arch)
    input_shape = tuple(int(d) for d in (input_shape if isinstance(input_shape, (tuple, list)) else (input_shape,)))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 97]))
    layers: list = []
    ws = bool(arch.get("weight_standardize", False))

    if arch["kind"] == "mlp":
        if len(input_shape) != 1:
            raise ConfigError(f"mlp expects flat input, got input shape {input_shape}")
        in_dim = input_shape[0]
        if "dims" in arch:
            dims = list(arch["dims"])
            if dims[0] != in_dim:
                raise ConfigError(
                    f"architecture input dim {dims[0]} does not match data dim {in_dim}"
                )
            if dims[-1] != n_classes:
                raise ConfigError(
                    f"architecture output dim {dims[-1]} does not match {n_classes} classes"
                )
            hidden = dims[1:-1]
        else:
            hidden = [int(h) for h in arch.get("hidden", [])]
        prev = in_dim
        for width in hidden:
            if width < 1:
                raise ConfigError(f"hidden width must be >= 1, got {width}")
            w = Tensor(_uniform_init(rng, (prev, width), prev), requires_grad=True)
            layers.append(DenseLayer(w, scale_invariant=True, standardized=ws))
            layers.append(BatchNormLayer(BatchNormState.create(width, bn_momentum, bn_epsilon)))
            layers.append(ReluLayer())
            prev = width
        w_out = Tensor(_uniform_init(rng, (prev, n_classes), prev), requires_grad=True)
        layers.append(DenseLayer(w_out, scale_invariant=False))
        return Network(layers=layers, input_shape=input_shape, n_classes=n_classes)

    # cnn
    if len(input_shape) != 3:
        raise ConfigError(f"cnn expects CxHxW input, got input shape {input_shape}")
    c, h, w = input_shape
    for b_idx, block in enumerate(arch.get("blocks", [])):
        channels = int(block["channels"])
        k = int(block.get("kernel", 3))
        stride = int(block.get("stride", 1))
        padding = int(block.get("padding", k // 2))
        pool = int(block.get("pool", 0))
        h_out = (h + 2 * padding - k) // stride + 1
        w_out = (w + 2 * padding - k) // stride + 1
        if k > h + 2 * padding or h_out <= 0 or w_out <= 0:
            raise ConfigError(
                f"block {b_idx}: kernel {k} stride {stride} padding {padding} "
                f"does not fit {h}x{w} input"
            )
        kernel = Tensor(_uniform_init(rng, (k, k, c, channels), k * k * c), requires_grad=True)
        layers.append(ConvLayer(kernel, stride=stride, padding=padding,
                                scale_invariant=True, standardized=ws))
        layers.append(BatchNormLayer(BatchNormState.create(channels, bn_momentum, bn_epsilon)))
        layers.append(ReluLayer())
        c, h, w = channels, h_out, w_out
        if pool:
            if h % pool or w % pool:
                raise ConfigError(
                    f"block {b_idx}: pool {pool} does not divide {h}x{w} feature map"
                )
            layers.append(AvgPoolLayer(pool))
            h, w = h // pool, w // pool
    layers.append(FlattenLayer())
    prev = c * h * w
    for width in arch.get("hidden_dense", []):
        width = int(width)
        wt = Tensor(_uniform_init(rng, (prev, width), prev), requires_grad=True)
        layers.append(DenseLayer(wt, scale_invariant=True, standardized=ws))
        layers.append(BatchNormLayer(BatchNormState.create(width, bn_momentum, bn_epsilon)))
        layers.append(ReluLayer())
        prev = width
    w_out = Tensor(_uniform_init(rng, (prev, n_classes), prev), requires_grad=True)
    layers.append(DenseLayer(w_out, scale_invariant=False))
    return Network(layers=layers, input_shape=input_shape, n_classes=n_classes)
