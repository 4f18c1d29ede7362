"""Measurement pipeline: norm trajectories, generalized-Gaussian fits and
input-space projection of weights.

The generalized Gaussian density used throughout is

    p(x) = beta / (2 * alpha * Gamma(1/beta)) * exp(-(|x - mu| / alpha)**beta)

``beta`` controls the tails: 2 is Gaussian, 1 is Laplacian, smaller means
heavier tails (sparser values), and ``beta -> inf`` approaches a uniform
box.  Fits fix ``mu`` at the sample median and recover ``beta`` by
moment matching: the ratio ``(E|x-mu|)^2 / E(x-mu)^2`` equals
``Gamma(2/beta)^2 / (Gamma(1/beta) * Gamma(3/beta))``, which is strictly
increasing in ``beta``, so a bisection solve is exact enough and
derivative-free.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .layers import ConvLayer, Network
from .tensor import im2col, no_grad, Tensor

__all__ = [
    "NormTrajectory",
    "GGDFit",
    "CovarianceSummary",
    "record_step_metrics",
    "continuous_decay_reference",
    "fit_ggd",
    "ggd_logpdf",
    "ggd_sample",
    "estimate_feature_covariance",
    "project_weights_isp",
    "sparsity_profile",
    "ema",
    "spearman",
    "layer_tags",
]

BETA_MIN = 0.05
BETA_MAX = 50.0
MAX_FEATURE_DIM = 4096


# ---------------------------------------------------------------------------
# Step metrics and trajectories
# ---------------------------------------------------------------------------


@dataclass
class NormTrajectory:
    """Per-slice (or per-layer) record of norms over training steps."""

    layer_id: str
    slice_id: str = "all"
    steps: list = field(default_factory=list)
    weight_norms: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    effective_ratios: list = field(default_factory=list)

    def append(self, step: int, weight_norm: float, grad_norm: float, ratio: float):
        self.steps.append(int(step))
        self.weight_norms.append(float(weight_norm))
        self.grad_norms.append(float(grad_norm))
        self.effective_ratios.append(float(ratio))

    @classmethod
    def from_metric_rows(cls, rows, tag: str, slice_id: str = "all") -> "NormTrajectory":
        """Collect one layer's trajectory out of logged metric rows."""
        suffix = f".{tag}" if slice_id == "all" else f".{tag}.{slice_id}"
        traj = cls(layer_id=tag, slice_id=slice_id)
        for row in rows:
            w = row.get(f"w_norm{suffix}")
            if w is None or row.get("step") is None:
                continue
            g = row.get(f"g_norm{suffix}")
            r = row.get(f"eff_ratio{suffix}")
            traj.append(int(row["step"]), w,
                        g if g is not None else math.nan,
                        r if r is not None else math.nan)
        return traj


def layer_tags(network: Network) -> list:
    """Stable short names for the network's weight layers: h0, h1, ..., out."""
    pairs = network.weight_layers()
    tags = [f"h{n}" for n in range(len(pairs) - 1)] + ["out"]
    return [(tag, idx, layer) for tag, (idx, layer) in zip(tags, pairs)]


def record_step_metrics(network: Network, grads: dict, effective_updates: dict,
                        track_slices: int = 0) -> dict:
    """Per-layer weight/gradient norms and effective ratios for one step.

    The ratio divides the effective update norm by the weight norm; for
    the SGD family callers pass the raw gradient as the effective update.
    With ``track_slices > 0`` the first k slices of each layer get their
    own columns.
    """
    out: dict = {}
    for tag, idx, layer in layer_tags(network):
        name = f"layer{idx}.weight"
        w = layer.weight.data
        g = grads.get(name)
        u = effective_updates.get(name)
        wn = float(np.linalg.norm(w))
        out[f"w_norm.{tag}"] = wn
        out[f"g_norm.{tag}"] = float(np.linalg.norm(g)) if g is not None else math.nan
        if u is not None and wn > 0:
            out[f"eff_ratio.{tag}"] = float(np.linalg.norm(u)) / wn
        else:
            out[f"eff_ratio.{tag}"] = math.nan
        if track_slices:
            from .layers import slice_norms

            wn_s = slice_norms(w, layer.slice_kind)
            gn_s = slice_norms(g, layer.slice_kind) if g is not None else None
            un_s = slice_norms(u, layer.slice_kind) if u is not None else None
            for j in range(min(track_slices, len(wn_s))):
                out[f"w_norm.{tag}.s{j}"] = float(wn_s[j])
                out[f"g_norm.{tag}.s{j}"] = float(gn_s[j]) if gn_s is not None else math.nan
                if un_s is not None and wn_s[j] > 0:
                    out[f"eff_ratio.{tag}.s{j}"] = float(un_s[j] / wn_s[j])
                else:
                    out[f"eff_ratio.{tag}.s{j}"] = math.nan
    return out


def continuous_decay_reference(norm0_sq: float, lam: float, t_grid: Sequence[float]) -> np.ndarray:
    """Continuous-time decay curve ``norm0_sq * exp(-2 * lam * t)``."""
    if norm0_sq <= 0:
        raise ValueError(f"initial squared norm must be > 0, got {norm0_sq}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    t = np.asarray(t_grid, dtype=np.float64)
    return norm0_sq * np.exp(-2.0 * lam * t)


# ---------------------------------------------------------------------------
# Generalized Gaussian fitting
# ---------------------------------------------------------------------------


@dataclass
class GGDFit:
    beta: float
    alpha: float
    mu: float
    n_samples: int
    log_likelihood: float


def _moment_ratio(beta: float) -> float:
    """(E|x|)^2 / E x^2 for a zero-centered generalized Gaussian."""
    return math.exp(
        2.0 * math.lgamma(2.0 / beta) - math.lgamma(1.0 / beta) - math.lgamma(3.0 / beta)
    )


def ggd_logpdf(x, beta: float, alpha: float, mu: float = 0.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = math.log(beta) - math.log(2.0 * alpha) - math.lgamma(1.0 / beta)
    return norm - (np.abs(x - mu) / alpha) ** beta


def ggd_sample(beta: float, alpha: float = 1.0, mu: float = 0.0, size: int = 1,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Exact sampler: |X - mu|^beta / alpha^beta is Gamma(1/beta, 1).

    Draws ``G ~ Gamma(1/beta)`` and a random sign, returning
    ``mu + alpha * sign * G**(1/beta)``.
    """
    if beta <= 0 or alpha <= 0:
        raise ValueError(f"beta and alpha must be > 0, got beta={beta}, alpha={alpha}")
    rng = rng or np.random.default_rng()
    g = rng.gamma(1.0 / beta, 1.0, size=size)
    sign = rng.choice([-1.0, 1.0], size=size)
    return mu + alpha * sign * g ** (1.0 / beta)


def fit_ggd(samples) -> GGDFit:
    """Fit a generalized Gaussian by median location + moment matching.

    The shape is found by bisection of the moment-ratio equation inside
    ``[0.05, 50]`` to |delta beta| < 1e-4; ratios outside the attainable
    range are clamped to the box boundary with a warning.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 100:
        raise ValueError(f"fit_ggd needs at least 100 samples, got {x.size}")
    mu = float(np.median(x))
    dev = np.abs(x - mu)
    m1 = float(dev.mean())
    m2 = float((dev * dev).mean())
    if m2 == 0.0:
        raise ValueError("degenerate sample: zero variance about the median")
    ratio = m1 * m1 / m2
    lo, hi = BETA_MIN, BETA_MAX
    r_lo, r_hi = _moment_ratio(lo), _moment_ratio(hi)
    if ratio <= r_lo:
        warnings.warn(f"moment ratio {ratio:.4g} below attainable range; clamping beta to {lo}")
        beta = lo
    elif ratio >= r_hi:
        warnings.warn(f"moment ratio {ratio:.4g} above attainable range; clamping beta to {hi}")
        beta = hi
    else:
        while hi - lo > 1e-4:
            mid = 0.5 * (lo + hi)
            if _moment_ratio(mid) < ratio:
                lo = mid
            else:
                hi = mid
        beta = 0.5 * (lo + hi)
    alpha = math.sqrt(m2 * math.exp(math.lgamma(1.0 / beta) - math.lgamma(3.0 / beta)))
    loglik = float(ggd_logpdf(x, beta, alpha, mu).sum())
    return GGDFit(beta=beta, alpha=alpha, mu=mu, n_samples=int(x.size), log_likelihood=loglik)


# ---------------------------------------------------------------------------
# Feature covariance and input-space projection
# ---------------------------------------------------------------------------


@dataclass
class CovarianceSummary:
    layer_id: int
    mean: np.ndarray
    eigenvalues: np.ndarray  # non-increasing, >= 0
    eigenvectors: np.ndarray  # orthonormal columns, aligned with eigenvalues


def _layer_features(network: Network, x: np.ndarray, layer_index: int, mode: str) -> np.ndarray:
    """Input rows seen by a weight layer: feature vectors for dense layers,
    sliding-window patches for conv layers."""
    t = Tensor(np.asarray(x, dtype=np.float64))
    with no_grad():
        for layer in network.layers[:layer_index]:
            t = layer.forward(t, mode)
    feats = t.data
    layer = network.layers[layer_index]
    if isinstance(layer, ConvLayer):
        k = layer.weight.shape[0]
        cols, _, _ = im2col(feats, k, layer.stride, layer.padding)
        return cols
    if feats.ndim != 2:
        raise ValueError(f"layer {layer_index} input is not 2-D: {feats.shape}")
    return feats


def estimate_feature_covariance(network: Network, x: np.ndarray, layer_index: int,
                                batch_size: int = 256, max_rows: int = 10 ** 6,
                                seed: int = 0, mode: str = "eval") -> CovarianceSummary:
    """One-pass covariance of a layer's input features, eigendecomposed.

    Accumulates the mean and second moment over batches, forms
    ``E[h h^T] - mu mu^T``, and returns the eigensystem sorted by
    descending eigenvalue with tiny negative values clamped to zero.
    Conv layers use all sliding-window patches, uniformly subsampled with
    a fixed seed when they exceed ``max_rows``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if not any(i == layer_index for i, _ in network.weight_layers()):
        raise ValueError(f"layer {layer_index} is not a weight layer")

    probe = _layer_features(network, x[:1], layer_index, mode)
    dim = probe.shape[1]
    if dim > MAX_FEATURE_DIM:
        raise ValueError(f"feature dimension {dim} exceeds the {MAX_FEATURE_DIM} limit")
    rows_per_sample = probe.shape[0]
    total = rows_per_sample * x.shape[0]
    keep = min(1.0, max_rows / total)

    s1 = np.zeros(dim)
    s2 = np.zeros((dim, dim))
    n = 0
    for start in range(0, x.shape[0], batch_size):
        rows = _layer_features(network, x[start : start + batch_size], layer_index, mode)
        if keep < 1.0:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 31, start]))
            take = max(1, int(round(keep * rows.shape[0])))
            rows = rows[rng.choice(rows.shape[0], size=take, replace=False)]
        s1 += rows.sum(axis=0)
        s2 += rows.T @ rows
        n += rows.shape[0]
    mean = s1 / n
    sigma = s2 / n - np.outer(mean, mean)
    sigma = 0.5 * (sigma + sigma.T)
    eigenvalues, eigenvectors = np.linalg.eigh(sigma)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = eigenvalues[order]
    eigenvectors = eigenvectors[:, order]
    floor = -1e-10 * max(1.0, float(eigenvalues[0]) if eigenvalues.size else 1.0)
    if eigenvalues.size and eigenvalues[-1] < floor:
        raise ValueError(f"covariance eigenvalue {eigenvalues[-1]} strongly negative")
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    return CovarianceSummary(layer_id=layer_index, mean=mean,
                             eigenvalues=eigenvalues, eigenvectors=eigenvectors)


def project_weights_isp(weight_slice: np.ndarray, cov: CovarianceSummary) -> np.ndarray:
    """Coordinates of a weight slice in the input-feature eigenbasis (U^T w)."""
    w = np.asarray(weight_slice, dtype=np.float64)
    d = cov.eigenvectors.shape[0]
    if w.shape[0] != d:
        raise ValueError(f"weight dim {w.shape[0]} does not match eigenbasis dim {d}")
    return cov.eigenvectors.T @ w


def _slice_matrix(layer) -> np.ndarray:
    """Weight slices as columns of a (dim, n_slices) matrix."""
    w = layer.weight.data
    if layer.slice_kind == "dense":
        return w
    k, _, c_in, c_out = w.shape
    return w.reshape(k * k * c_in, c_out)


def sparsity_profile(network: Network, x: np.ndarray, batch_size: int = 256,
                     max_rows: int = 10 ** 6, seed: int = 0) -> list:
    """Shape-parameter table per hidden weight layer.

    Each row carries the generalized-Gaussian shape fit to the raw kernel
    values (``beta_param``) and to the same values expressed in the
    layer-input eigenbasis (``beta_isp``).
    """
    rows = []
    for ordinal, (idx, layer) in enumerate(network.hidden_weight_layers()):
        values = layer.weight.data.ravel()
        cov = estimate_feature_covariance(network, x, idx, batch_size=batch_size,
                                          max_rows=max_rows, seed=seed)
        coords = project_weights_isp(_slice_matrix(layer), cov).ravel()
        rows.append({
            "layer": ordinal,
            "layer_index": idx,
            "kind": layer.slice_kind,
            "n_values": int(values.size),
            "beta_param": fit_ggd(values).beta,
            "beta_isp": fit_ggd(coords).beta,
        })
    return rows


# ---------------------------------------------------------------------------
# Display helpers
# ---------------------------------------------------------------------------


def ema(values, weight: float = 0.6) -> np.ndarray:
    """Exponential moving average, ``y <- weight * x + (1 - weight) * y``,
    seeded with the first value.  Display-layer smoothing only."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v.copy()
    out = np.empty_like(v)
    out[0] = v[0]
    for i in range(1, v.size):
        out[i] = weight * v[i] + (1.0 - weight) * out[i - 1]
    return out


def _ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size, dtype=np.float64)
    ranks[order] = np.arange(1, a.size + 1)
    sorted_a = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("spearman needs two equal-length sequences of >= 2 values")
    rx, ry = _ranks(x), _ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    if denom == 0.0:
        return 0.0
    return float((rx * ry).sum() / denom)
