"""Standalone property checks for the weight-norm dynamics.

Backs the ``verify-dynamics`` CLI command: each check exercises one of
the training-dynamics identities on freshly sampled networks and reports
pass/fail with the worst observed violation.

* gradient orthogonality: data-loss gradients of scale-invariant slices
  are perpendicular to the slices themselves (train-mode batchnorm,
  gradients evaluated on the batch that produced the statistics);
* discrete norm law: one plain SGD step changes a slice's squared norm
  by exactly lr^2 * ||grad||^2;
* exponential decay: pure coupled decay follows exp(-2*lam*lr*t) as
  lr*lam shrinks;
* rescale invariance: unit-rescaling hidden slices leaves train-mode
  outputs unchanged;
* first-step Adam against a literal six-equation oracle;
* projected-momentum tangency on scale-invariant slices.

The exact-identity checks build networks with a vanishingly small
batchnorm epsilon (1e-300): the identities hold for the idealized
normalizer whose variance guard is zero, and any appreciable epsilon
leaks a radial gradient component of relative size epsilon/variance.
"""

from __future__ import annotations

import numpy as np

from .layers import build_network, slice_dots, slice_norms
from .optim import OptimizerState, adam_step, adamp_step, sgd_step
from .regularize import weight_rescale
from .tensor import Tensor, backward

__all__ = ["run_checks", "random_bn_network", "EXACT_BN_EPSILON"]

# positive (the state requires it) but far below float64 resolution of any
# realistic batch variance, so the Eq.-style identities hold to roundoff
EXACT_BN_EPSILON = 1e-300


def random_bn_network(rng: np.random.Generator, bn_epsilon: float = EXACT_BN_EPSILON):
    """Random small BN-MLP or BN-CNN plus a matching random batch."""
    if rng.random() < 0.5:
        depth = int(rng.integers(1, 5))
        widths = [int(rng.integers(4, 65)) for _ in range(depth)]
        in_dim = int(rng.integers(3, 17))
        classes = int(rng.integers(2, 8))
        net = build_network(
            {"kind": "mlp", "hidden": widths}, (in_dim,), classes,
            seed=int(rng.integers(0, 2 ** 31)), bn_epsilon=bn_epsilon,
        )
        batch = int(rng.integers(2, 33))
        x = rng.uniform(-2, 2, size=(batch, in_dim))
    else:
        depth = int(rng.integers(1, 4))
        c = int(rng.integers(1, 4))
        blocks = []
        c_in = c
        for _ in range(depth):
            # keep every slice at least 2-dimensional: a 1x1 kernel on a
            # single channel has a scalar slice, for which the relative
            # orthogonality ratio is meaningless (the true gradient is 0)
            k = 3 if c_in == 1 else int(rng.choice([1, 3]))
            channels = int(rng.integers(2, 9))
            blocks.append({"channels": channels, "kernel": k,
                           "padding": k // 2, "pool": 0})
            c_in = channels
        h = int(rng.choice([4, 6, 8]))
        classes = int(rng.integers(2, 6))
        net = build_network(
            {"kind": "cnn", "blocks": blocks}, (c, h, h), classes,
            seed=int(rng.integers(0, 2 ** 31)), bn_epsilon=bn_epsilon,
        )
        batch = int(rng.integers(2, 17))
        x = rng.uniform(-2, 2, size=(batch, c, h, h))
    # random affine parameters: the orthogonality makes no assumption on them
    for layer in net.layers:
        if hasattr(layer, "state"):
            channels = layer.state.gamma.size
            layer.state.gamma.data = rng.uniform(0.5, 1.5, channels)
            layer.state.beta.data = rng.uniform(-0.5, 0.5, channels)
    y = rng.integers(0, net.n_classes, size=x.shape[0])
    return net, x, y


def _invariant_grads(net, x, y):
    """Backprop one batch; yield (layer, weight, grad) for invariant slices."""
    _, loss = net.loss(x, y, mode="train")
    net.zero_grad()
    backward(loss)
    for _, layer in net.hidden_weight_layers():
        if layer.scale_invariant:
            yield layer, layer.weight.data, layer.weight.grad


def check_orthogonality(trials: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        net, x, y = random_bn_network(rng)
        for layer, w, g in _invariant_grads(net, x, y):
            dots = np.abs(slice_dots(w, g, layer.slice_kind))
            wn = slice_norms(w, layer.slice_kind)
            gn = slice_norms(g, layer.slice_kind)
            # slices whose true gradient is zero leave only cancellation
            # dust (< 1e-11 here vs > 1e-3 for live slices); a direction
            # test on numerical dust is meaningless
            live = gn > 1e-9 * np.maximum(1.0, wn)
            if live.any():
                worst = max(worst, float((dots[live] / (wn * gn)[live]).max()))
    return {"name": "gradient orthogonality", "worst": worst, "bound": 1e-8,
            "ok": worst <= 1e-8}


def norm_law_toy_network(seed: int, in_dim: int = 8, width: int = 10, classes: int = 4):
    """One BN layer feeding a dense head, identity activation.

    The norm identities hold for any differentiable function downstream
    of the normalizer; leaving out the ReLU removes dead channels, whose
    vanishing gradients would push the identity's measurable relative
    error into float64 rounding territory.
    """
    from .layers import BatchNormLayer, BatchNormState, DenseLayer, Network

    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    b1, b2 = np.sqrt(1.0 / in_dim), np.sqrt(1.0 / width)
    w1 = Tensor(rng.uniform(-b1, b1, (in_dim, width)), requires_grad=True)
    w2 = Tensor(rng.uniform(-b2, b2, (width, classes)), requires_grad=True)
    return Network(
        layers=[
            DenseLayer(w1, scale_invariant=True),
            BatchNormLayer(BatchNormState.create(width, epsilon=EXACT_BN_EPSILON)),
            DenseLayer(w2),
        ],
        input_shape=(in_dim,), n_classes=classes,
    )


def check_norm_growth(steps: int, seed: int) -> dict:
    """||w(t+1)||^2 - ||w(t)||^2 == lr^2 ||g||^2 for plain SGD, per slice.

    Minibatches from a hard but learnable task keep every slice's
    gradient at the sampling-noise floor instead of converging to zero,
    where the identity would be unmeasurable against parameter rounding.
    """
    from .datasets import make_synthetic

    net = norm_law_toy_network(seed)
    in_dim, classes = net.input_shape[0], net.n_classes
    x_all, y_all = make_synthetic(classes, in_dim, 2000, seed, separation=2.0)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    lr, batch = 0.25, 32
    states = {name: OptimizerState(kind="sgd", lr=lr) for name in net.named_params()}
    layer = net.layers[0]
    worst = 0.0
    for _ in range(steps):
        idx = rng.choice(x_all.shape[0], size=batch, replace=False)
        _, loss = net.loss(x_all[idx], y_all[idx], mode="train")
        net.zero_grad()
        backward(loss)
        before = layer.weight.data.copy()
        for name, p in net.named_params().items():
            sgd_step(p, p.grad, states[name])
        after, g = layer.weight.data, layer.weight.grad
        # factored difference of squares avoids catastrophic cancellation
        delta = slice_dots(after - before, after + before, "dense")
        expected = lr * lr * slice_dots(g, g, "dense")
        denom = np.maximum(np.abs(expected), 1e-300)
        worst = max(worst, float((np.abs(delta - expected) / denom).max()))
    return {"name": "discrete norm growth", "worst": worst, "bound": 1e-10,
            "ok": worst <= 1e-10}


def check_exponential_decay(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    w0 = rng.uniform(-1, 1, size=64)
    worst_err = []
    for lr_lam in (1e-2, 1e-3, 1e-4):
        lr, lam = 0.1, lr_lam / 0.1
        steps = int(2.0 / lr_lam)
        w = _param(w0)
        state = OptimizerState(kind="sgd", lr=lr, weight_decay=lam)
        norms = [float(np.dot(w.data, w.data))]
        for _ in range(steps):
            sgd_step(w, np.zeros_like(w.data), state)
            norms.append(float(np.dot(w.data, w.data)))
        t = lr * np.arange(steps + 1)
        reference = norms[0] * np.exp(-2.0 * lam * t)
        worst_err.append(float(np.max(np.abs(np.array(norms) - reference) / reference)))
    bounds = (2e-2, 2e-3, 2e-4)
    ok = all(e <= b for e, b in zip(worst_err, bounds)) and (
        worst_err[0] > worst_err[1] > worst_err[2]
    )
    return {"name": "exponential decay", "worst": max(worst_err), "bound": bounds[0],
            "ok": ok}


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr.copy(), requires_grad=True)


def check_rescale_invariance(trials: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        net, x, y = random_bn_network(rng)
        before = net.forward(x, mode="train").data.copy()
        weight_rescale(net, normalize_output_layer=False)
        after = net.forward(x, mode="train").data
        worst = max(worst, float(np.abs(after - before).max()))
    return {"name": "rescale invariance", "worst": worst, "bound": 1e-10,
            "ok": worst <= 1e-10}


def check_adam_first_step(count: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    worst = 0.0
    for _ in range(count):
        theta = float(rng.uniform(-2, 2))
        g = float(rng.uniform(-2, 2))
        p = _param(np.array([theta]))
        state = OptimizerState(kind="adam", lr=lr, momentum=b1, beta2=b2, epsilon=eps)
        adam_step(p, np.array([g]), state)
        # literal six-equation sequence
        m = b1 * 0.0 + (1 - b1) * g
        v = b2 * 0.0 + (1 - b2) * g * g
        mhat = m / (1 - b1)
        vhat = v / (1 - b2)
        expected = theta - lr * mhat / (np.sqrt(vhat) + eps)
        worst = max(worst, abs(float(p.data[0]) - expected))
    return {"name": "adam first step", "worst": worst, "bound": 1e-12,
            "ok": worst <= 1e-12}


def check_adamp_tangency(steps: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    w = _param(rng.uniform(-1, 1, size=(16, 8)))
    state = OptimizerState(kind="adamp", lr=1e-2)
    worst = 0.0
    for _ in range(steps):
        g = rng.normal(size=w.data.shape)
        before = w.data.copy()
        adamp_step(w, g, state, scale_invariant=True, slice_kind="dense")
        update = w.data - before
        dots = np.abs(slice_dots(before, update, "dense"))
        scale = slice_norms(before, "dense") * slice_norms(update, "dense")
        ok = scale > 0
        if ok.any():
            worst = max(worst, float((dots[ok] / scale[ok]).max()))
    return {"name": "projected update tangency", "worst": worst, "bound": 1e-12,
            "ok": worst <= 1e-12}


def run_checks(trials: int = 100, seed: int = 0) -> list:
    """Run the full dynamics suite; returns result dicts with ok flags."""
    return [
        check_orthogonality(trials, seed),
        check_norm_growth(min(trials, 50), seed + 1),
        check_exponential_decay(seed + 2),
        check_rescale_invariance(max(10, trials // 5), seed + 3),
        check_adam_first_step(1000, seed + 4),
        check_adamp_tangency(200, seed + 5),
    ]
