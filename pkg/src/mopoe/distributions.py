"""Diagonal Gaussians, mixtures, and per-modality reconstruction likelihoods.

Everything here is expressed through the tensor ops so densities and KL
terms stay differentiable inside objective graphs. Parameters may carry
a leading batch axis; reductions always run over the final (unit) axis,
so results are scalar for vector inputs and per-sample for batches.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "DimMismatch",
    "TargetOutOfRange",
    "DiagonalGaussian",
    "GaussianMixture",
    "LikelihoodSpec",
    "gaussian_log_prob",
    "rsample",
    "kl_to_standard_normal",
    "mixture_log_prob",
    "recon_log_prob",
    "default_likelihood_weights",
    "LOG_VAR_MIN",
    "LOG_VAR_MAX",
]

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class DimMismatch(T.ShapeMismatch):
    """Distribution and argument dimensions disagree."""


class TargetOutOfRange(ValueError):
    """Categorical target index outside [0, num_classes)."""


class DiagonalGaussian:
    """N(mu, diag(exp(log_var))); log_var is clamped to [-10, 10] on entry.

    Product-of-experts fusion constructs its results with clamp=False:
    a fused posterior may legitimately be sharper than the per-expert
    clamp floor (its variance floor is enforced by the fusion itself).
    """

    __slots__ = ("mu", "log_var")

    def __init__(self, mu, log_var, clamp: bool = True):
        mu = mu if isinstance(mu, Tensor) else Tensor(mu)
        log_var = log_var if isinstance(log_var, Tensor) else Tensor(log_var)
        if mu.shape != log_var.shape:
            raise DimMismatch(f"mu {mu.shape} vs log_var {log_var.shape}")
        if clamp:
            log_var = T.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)
        self.mu = mu
        self.log_var = log_var

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.mu.shape[:-1]

    @classmethod
    def standard(cls, dim: int, batch_shape: tuple[int, ...] = ()) -> "DiagonalGaussian":
        shape = batch_shape + (dim,)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)), clamp=False)

    def variance(self) -> np.ndarray:
        return np.exp(self.log_var.data)


class GaussianMixture:
    """Convex combination of same-dimension diagonal Gaussians."""

    __slots__ = ("components", "weights")

    def __init__(self, components: list[DiagonalGaussian], weights):
        if not components:
            raise ValueError("mixture needs at least one component")
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(components),):
            raise ValueError("one weight per component required")
        if np.any(weights < 0.0) or abs(weights.sum() - 1.0) >= 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        dim = components[0].dim
        if any(c.dim != dim for c in components):
            raise DimMismatch("mixture components must share dimension")
        self.components = list(components)
        self.weights = weights

    @classmethod
    def uniform(cls, components: list[DiagonalGaussian]) -> "GaussianMixture":
        k = len(components)
        return cls(components, np.full(k, 1.0 / k))


class LikelihoodSpec:
    """Output likelihood of one modality plus its reconstruction weight."""

    KINDS = ("bernoulli_logits", "categorical_logits", "gaussian_fixed_var")

    __slots__ = ("kind", "data_dims", "weight", "variance")

    def __init__(self, kind: str, data_dims: int, weight: float = 1.0, variance: float = 1.0):
        if kind not in self.KINDS:
            raise ValueError(f"unknown likelihood kind {kind!r}")
        if data_dims <= 0:
            raise ValueError("data_dims must be positive")
        if weight <= 0.0:
            raise ValueError("weight must be positive")
        if kind == "gaussian_fixed_var" and variance <= 0.0:
            raise ValueError("gaussian_fixed_var needs a positive variance")
        self.kind = kind
        self.data_dims = int(data_dims)
        self.weight = float(weight)
        self.variance = float(variance)


def default_likelihood_weights(dims: list[int]) -> list[float]:
    """Reconstruction weights: largest modality 1.0, smaller ones scaled up
    by the ratio of data dimensions."""
    biggest = max(dims)
    return [biggest / d for d in dims]


def _check_dims(q: DiagonalGaussian, z: Tensor) -> None:
    if z.shape[-1] != q.dim:
        raise DimMismatch(f"z dim {z.shape[-1]} vs distribution dim {q.dim}")


def gaussian_log_prob(q: DiagonalGaussian, z) -> Tensor:
    """Diagonal-Gaussian log density, summed over the unit axis."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    _check_dims(q, z)
    diff = z - q.mu
    per_unit = (
        Tensor(-_HALF_LOG_2PI)
        - 0.5 * q.log_var
        - T.square(diff) / (2.0 * T.exp(q.log_var))
    )
    return T.tensor_sum(per_unit, axis=-1)


def rsample(q: DiagonalGaussian, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw z = mu + exp(log_var / 2) * eps, eps ~ N(0, I).

    Gradients flow into mu and log_var; eps is a constant.
    """
    eps = Tensor(rng.standard_normal(q.mu.shape))
    return q.mu + T.exp(0.5 * q.log_var) * eps


def kl_to_standard_normal(q: DiagonalGaussian) -> Tensor:
    """Closed-form KL(q || N(0, I)), summed over the unit axis."""
    per_unit = T.square(q.mu) + T.exp(q.log_var) - 1.0 - q.log_var
    return 0.5 * T.tensor_sum(per_unit, axis=-1)


def mixture_log_prob(m: GaussianMixture, z) -> Tensor:
    """log sum_k w_k N(z; mu_k, var_k), via logsumexp over components."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    parts = []
    for comp, w in zip(m.components, m.weights):
        lp = gaussian_log_prob(comp, z) + Tensor(math.log(w))
        parts.append(T.reshape(lp, (1,) + lp.shape))
    return T.logsumexp(T.concat(parts, axis=0), axis=0)


def _bernoulli_log_prob(logits: Tensor, x: Tensor) -> Tensor:
    # x*log sigma(l) + (1-x)*log(1-sigma(l)), written with softplus so both
    # tails stay finite
    pos = x * T.negate(T.softplus(T.negate(logits)))
    neg = (Tensor(1.0) - x) * T.negate(T.softplus(logits))
    return T.tensor_sum(pos + neg, axis=-1)


def _categorical_log_prob(logits: Tensor, targets) -> Tensor:
    classes = logits.shape[-1]
    idx = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    idx = idx.astype(np.int64).reshape(logits.shape[:-1] or (1,))
    if np.any(idx < 0) or np.any(idx >= classes):
        raise TargetOutOfRange(f"target outside [0, {classes})")
    onehot = np.zeros(logits.shape if logits.data.ndim > 1 else (1, classes))
    onehot[np.arange(idx.size), idx.ravel()] = 1.0
    onehot = onehot.reshape(logits.shape)
    picked = T.tensor_sum(logits * Tensor(onehot), axis=-1)
    return picked - T.logsumexp(logits, axis=-1)


def _gaussian_fixed_var_log_prob(mean: Tensor, x: Tensor, variance: float) -> Tensor:
    const = -_HALF_LOG_2PI - 0.5 * math.log(variance)
    per_unit = Tensor(const) - T.square(x - mean) / (2.0 * variance)
    return T.tensor_sum(per_unit, axis=-1)


def recon_log_prob(spec: LikelihoodSpec, params, x) -> Tensor:
    """Weighted log-likelihood of observation x under the decoder output.

    params are logits (bernoulli/categorical) or means (gaussian); x is
    the observed tensor, or the integer class target for categorical.
    """
    params = params if isinstance(params, Tensor) else Tensor(params)
    if spec.kind == "categorical_logits":
        if params.shape[-1] != spec.data_dims:
            raise T.ShapeMismatch(
                f"logits classes {params.shape[-1]} != spec dims {spec.data_dims}"
            )
        lp = _categorical_log_prob(params, x)
    else:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if params.shape[-1] != spec.data_dims or x.shape[-1] != spec.data_dims:
            raise T.ShapeMismatch(
                f"params {params.shape} / x {x.shape} vs spec dims {spec.data_dims}"
            )
        if spec.kind == "bernoulli_logits":
            lp = _bernoulli_log_prob(params, x)
        else:
            lp = _gaussian_fixed_var_log_prob(params, x, spec.variance)
    if spec.weight == 1.0:
        return lp
    return lp * Tensor(spec.weight)
