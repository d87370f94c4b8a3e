"""Modality-subset enumeration and posterior fusion.

A joint posterior over M modalities is assembled in two stages: each
nonempty subset of the available modalities gets a product-of-experts
fusion of its unimodal posteriors (closed form for diagonal Gaussians),
and the subset posteriors are combined as a uniform mixture. Restricting
the enumeration to the full set alone, or to singletons alone, recovers
the two classic one-stage fusions.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .distributions import DiagonalGaussian, DimMismatch, GaussianMixture
from .tensor import Tensor

__all__ = [
    "MTooLarge",
    "EmptyExpertList",
    "EmptyExplicitList",
    "NoModalityPresent",
    "UnsupportedKind",
    "SubsetMask",
    "SubsetPosterior",
    "JointPosterior",
    "enumerate_subsets",
    "poe_fuse",
    "build_joint_posterior",
    "abstract_mean_density",
    "POLICIES",
    "VARIANCE_FLOOR",
]

POLICIES = ("all_nonempty", "full_only", "singletons_only")

MAX_MODALITIES = 10
VARIANCE_FLOOR = 1e-8


class MTooLarge(ValueError):
    """Modality count outside [1, 10]; 2^M enumeration refused."""


class EmptyExpertList(ValueError):
    """poe_fuse needs at least one expert."""


class EmptyExplicitList(ValueError):
    """Explicit subset policy with no masks."""


class NoModalityPresent(ValueError):
    """A joint posterior needs at least one present modality."""


class UnsupportedKind(ValueError):
    """Unknown abstract-mean kind."""


class SubsetMask:
    """Immutable membership mask over M modalities."""

    __slots__ = ("bits",)

    def __init__(self, bits, allow_empty: bool = False):
        bits = tuple(bool(b) for b in bits)
        if not allow_empty and not any(bits):
            raise ValueError("empty subset mask")
        self.bits = bits

    @property
    def size(self) -> int:
        return sum(self.bits)

    def indices(self) -> list[int]:
        return [j for j, b in enumerate(self.bits) if b]

    def value(self) -> int:
        return sum(1 << j for j, b in enumerate(self.bits) if b)

    def label(self) -> str:
        """Stable text form, e.g. 'm0+m2'; 'prior' for the empty mask."""
        if not any(self.bits):
            return "prior"
        return "+".join(f"m{j}" for j in self.indices())

    def __eq__(self, other):
        return isinstance(other, SubsetMask) and self.bits == other.bits

    def __hash__(self):
        return hash(self.bits)

    def __repr__(self):
        return f"SubsetMask({self.label()})"


class SubsetPosterior:
    """One subset's fused posterior."""

    __slots__ = ("mask", "dist")

    def __init__(self, mask: SubsetMask, dist: DiagonalGaussian):
        self.mask = mask
        self.dist = dist


class JointPosterior:
    """Uniform mixture over subset posteriors."""

    __slots__ = ("subsets", "weights")

    def __init__(self, subsets: list[SubsetPosterior]):
        if not subsets:
            raise NoModalityPresent("joint posterior with no components")
        self.subsets = list(subsets)
        k = len(subsets)
        self.weights = np.full(k, 1.0 / k)

    def mixture(self) -> GaussianMixture:
        return GaussianMixture([s.dist for s in self.subsets], self.weights)


class AbstractMeanKind:
    """Supported posterior-combination means; hook for further injective f."""

    KINDS = ("arithmetic", "geometric")

    def __init__(self, kind: str):
        if kind not in self.KINDS:
            raise UnsupportedKind(f"abstract mean kind {kind!r}")
        self.kind = kind


def enumerate_subsets(m: int, policy="all_nonempty") -> list[SubsetMask]:
    """Subset masks over m modalities, in ascending bitmask order.

    policy is one of 'all_nonempty' (2^m - 1 masks), 'full_only',
    'singletons_only', or an explicit list of masks.
    """
    if not 1 <= m <= MAX_MODALITIES:
        raise MTooLarge(f"modality count {m} outside [1, {MAX_MODALITIES}]")
    if isinstance(policy, (list, tuple)):
        masks = [b if isinstance(b, SubsetMask) else SubsetMask(b) for b in policy]
        if not masks:
            raise EmptyExplicitList("explicit subset list is empty")
        if any(len(mask.bits) != m for mask in masks):
            raise ValueError(f"explicit masks must have length {m}")
        return sorted(masks, key=SubsetMask.value)
    if policy == "all_nonempty":
        return [
            SubsetMask(tuple((v >> j) & 1 for j in range(m))) for v in range(1, 2**m)
        ]
    if policy == "full_only":
        return [SubsetMask((True,) * m)]
    if policy == "singletons_only":
        return [SubsetMask(tuple(j == i for j in range(m))) for i in range(m)]
    raise ValueError(f"unknown subset policy {policy!r}")


def poe_fuse(experts: list[DiagonalGaussian]) -> DiagonalGaussian:
    """Renormalized product of diagonal Gaussians.

    Precisions add, so the fused distribution is at least as sharp as
    every expert; the fused variance is floored at 1e-8. A single expert
    is returned unchanged.
    """
    if not experts:
        raise EmptyExpertList("poe_fuse with no experts")
    dim = experts[0].dim
    if any(e.dim != dim for e in experts):
        raise DimMismatch("experts must share dimension")
    if len(experts) == 1:
        return experts[0]
    precisions = [T.exp(T.negate(e.log_var)) for e in experts]
    total = precisions[0]
    weighted_mu = precisions[0] * experts[0].mu
    for prec, e in zip(precisions[1:], experts[1:]):
        total = total + prec
        weighted_mu = weighted_mu + prec * e.mu
    var = T.clamp(Tensor(1.0) / total, VARIANCE_FLOOR, None)
    mu = var * weighted_mu
    return DiagonalGaussian(mu, T.log(var), clamp=False)


def build_joint_posterior(
    unimodal: list[DiagonalGaussian | None],
    present=None,
    policy="all_nonempty",
    include_prior_component: bool = False,
    poe_prior_expert: bool = False,
) -> JointPosterior:
    """Mixture of per-subset PoE posteriors over the *present* modalities.

    Missing modalities simply drop out of the enumeration. With
    include_prior_component the standard normal joins the mixture as an
    empty-subset component; with poe_prior_expert every subset fusion
    additionally multiplies in a standard-normal expert.
    """
    m = len(unimodal)
    if present is None:
        present = [q is not None for q in unimodal]
    present = [bool(p) for p in present]
    if len(present) != m:
        raise ValueError("presence mask length != modality count")
    avail = [j for j, p in enumerate(present) if p]
    if not avail:
        raise NoModalityPresent("no modality available for inference")
    for j in avail:
        if unimodal[j] is None:
            raise ValueError(f"modality {j} marked present but has no posterior")

    local_masks = enumerate_subsets(len(avail), policy)
    subsets = []
    if include_prior_component:
        ref = unimodal[avail[0]]
        prior = DiagonalGaussian.standard(ref.dim, ref.batch_shape)
        subsets.append(SubsetPosterior(SubsetMask((False,) * m, allow_empty=True), prior))
    for lm in local_masks:
        bits = [False] * m
        for local_j in lm.indices():
            bits[avail[local_j]] = True
        experts = [unimodal[j] for j in range(m) if bits[j]]
        if poe_prior_expert:
            ref = experts[0]
            experts = [DiagonalGaussian.standard(ref.dim, ref.batch_shape)] + experts
        subsets.append(SubsetPosterior(SubsetMask(bits), poe_fuse(experts)))
    return JointPosterior(subsets)


def abstract_mean_density(kind, dists: list[DiagonalGaussian], weights, z) -> Tensor:
    """Density at z of the f-mean combination of the given Gaussians.

    'arithmetic' is the mixture density. 'geometric' is the renormalized
    weighted product with exponents scaled so that uniform weights give
    the plain product of all densities (the PoE).
    """
    if isinstance(kind, str):
        kind = AbstractMeanKind(kind)
    weights = np.asarray(weights, dtype=np.float64)
    if abs(weights.sum() - 1.0) >= 1e-12 or np.any(weights < 0):
        raise ValueError("weights must be normalized and nonnegative")
    if len(dists) != weights.size:
        raise ValueError("one weight per distribution required")
    from .distributions import gaussian_log_prob, mixture_log_prob

    if kind.kind == "arithmetic":
        return T.exp(mixture_log_prob(GaussianMixture(dists, weights), z))
    # geometric: p^w scales a Gaussian's precision by w; renormalizing the
    # product yields another Gaussian
    scaled = []
    for q, w in zip(dists, weights):
        exponent = w * len(dists)
        if exponent <= 0:
            continue
        scaled.append(
            DiagonalGaussian(q.mu, q.log_var - Tensor(np.log(exponent)), clamp=False)
        )
    if not scaled:
        raise EmptyExpertList("geometric mean with all-zero weights")
    fused = poe_fuse(scaled) if len(scaled) > 1 else scaled[0]
    return T.exp(gaussian_log_prob(fused, z))
