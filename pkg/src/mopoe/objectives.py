"""The multimodal ELBO family behind one parametrized code path.

Every variant is the same stratified computation over a mixture of
subset posteriors: draw from each component, reconstruct every present
modality from each draw ("cross-generation"), and regularize toward the
prior. The subset policy selects the variant: the full powerset, the
full set alone (pure product fusion), or singletons alone (pure mixture
fusion). The subset-sum objective is the convex combination of
per-subset ELBOs; with the averaged closed-form KL estimator it is
algebraically identical to the mixture objective, and both are exposed
so training runs can name what they optimize.

Two KL estimators are provided. avg_subset_kl averages the closed-form
per-subset KLs, an upper bound on the mixture KL that keeps the whole
objective analytic. mixture_mc estimates the true mixture-to-prior KL by
Monte Carlo on the component draws; it yields the tighter bound of the
two, at the cost of evaluating every component's density at every draw.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .distributions import (
    DiagonalGaussian,
    gaussian_log_prob,
    kl_to_standard_normal,
    mixture_log_prob,
    recon_log_prob,
    rsample,
)
from .fusion import JointPosterior, NoModalityPresent, build_joint_posterior
from .models import MultimodalVAE
from .tensor import Tensor

__all__ = [
    "NonFiniteLoss",
    "ObjectiveConfig",
    "ElboReport",
    "KL_ESTIMATORS",
    "OBJECTIVES",
    "mixture_elbo_core",
    "elbo_unimodal",
    "elbo_mopoe",
    "elbo_poe",
    "elbo_moe",
    "elbo_subset_sum",
    "elbo_factorized",
    "evaluate_objective",
    "train_epoch",
]

KL_ESTIMATORS = ("avg_subset_kl", "mixture_mc")

OBJECTIVES = ("mopoe", "poe", "moe", "subset_sum", "unimodal", "factorized")


class NonFiniteLoss(ArithmeticError):
    """Training aborted on a non-finite objective value."""


class ObjectiveConfig:
    """Knobs shared by every ELBO variant.

    beta >= 0 (0 is allowed and drops the KL term entirely);
    samples_per_component >= 1 reparameterized draws per mixture
    component.
    """

    __slots__ = (
        "subset_policy",
        "beta",
        "kl_estimator",
        "samples_per_component",
        "factorized",
        "include_prior_component",
        "poe_prior_expert",
    )

    def __init__(
        self,
        subset_policy="all_nonempty",
        beta: float = 1.0,
        kl_estimator: str = "avg_subset_kl",
        samples_per_component: int = 1,
        factorized: bool = False,
        include_prior_component: bool = False,
        poe_prior_expert: bool = False,
    ):
        if beta < 0:
            raise ValueError("beta must be nonnegative")
        if kl_estimator not in KL_ESTIMATORS:
            raise ValueError(f"unknown kl estimator {kl_estimator!r}")
        if samples_per_component < 1:
            raise ValueError("samples_per_component must be >= 1")
        self.subset_policy = subset_policy
        self.beta = float(beta)
        self.kl_estimator = kl_estimator
        self.samples_per_component = int(samples_per_component)
        self.factorized = bool(factorized)
        self.include_prior_component = bool(include_prior_component)
        self.poe_prior_expert = bool(poe_prior_expert)

    def replaced(self, **kw) -> "ObjectiveConfig":
        vals = {k: getattr(self, k) for k in self.__slots__}
        vals.update(kw)
        return ObjectiveConfig(**vals)


class ElboReport:
    """Per-term breakdown of one objective evaluation (batch means).

    recon maps (subset label, modality index) to that term's contribution
    to the total, i.e. already scaled by the mixture weight, the number
    of draws, and the modality's likelihood weight, so that
    total == sum(recon.values()) - beta * kl under the closed-form KL.
    """

    __slots__ = ("total", "recon", "kl", "beta", "subsets", "estimator")

    def __init__(self, total, recon, kl, beta, subsets, estimator):
        self.total = total
        self.recon = recon
        self.kl = kl
        self.beta = beta
        self.subsets = subsets
        self.estimator = estimator

    @property
    def recon_total(self) -> float:
        return sum(self.recon.values())

    def term_summary(self) -> str:
        parts = [f"total={self.total:.6f}", f"recon={self.recon_total:.6f}", f"kl={self.kl:.6f}"]
        return " ".join(parts)


def _batch_mean(x: Tensor) -> Tensor:
    return T.tensor_mean(x) if x.data.ndim else x


def mixture_elbo_core(
    joint: JointPosterior,
    recon_fn,
    config: ObjectiveConfig,
    rng: np.random.Generator,
    style_terms=None,
) -> tuple[Tensor, ElboReport]:
    """Objective over an already-built mixture of subset posteriors.

    recon_fn(z, subset) returns {modality index: weighted log-likelihood
    Tensor} for one latent draw. style_terms optionally carries an extra
    KL Tensor (the style block) from a factorized caller.
    """
    K = len(joint.subsets)
    S = config.samples_per_component
    draw_scale = 1.0 / (K * S)

    recon_report: dict[tuple[str, int], float] = {}
    total_recon = None
    mc_kl_parts = []
    mixture = joint.mixture() if config.kl_estimator == "mixture_mc" else None
    prior = None

    for sp in joint.subsets:
        for _ in range(S):
            z = rsample(sp.dist, rng)
            per_modality = recon_fn(z, sp)
            for j, term in per_modality.items():
                contrib = _batch_mean(term) * Tensor(draw_scale)
                total_recon = contrib if total_recon is None else total_recon + contrib
                key = (sp.mask.label(), j)
                recon_report[key] = recon_report.get(key, 0.0) + contrib.item()
            if mixture is not None:
                if prior is None:
                    prior = DiagonalGaussian.standard(sp.dist.dim, sp.dist.batch_shape)
                log_mix = mixture_log_prob(mixture, z)
                log_pri = gaussian_log_prob(prior, z)
                mc_kl_parts.append(_batch_mean(log_mix - log_pri))

    if config.kl_estimator == "avg_subset_kl":
        kl = None
        for sp in joint.subsets:
            term = _batch_mean(kl_to_standard_normal(sp.dist)) * Tensor(1.0 / K)
            kl = term if kl is None else kl + term
    else:
        kl = mc_kl_parts[0] * Tensor(draw_scale)
        for p in mc_kl_parts[1:]:
            kl = kl + p * Tensor(draw_scale)

    if style_terms is not None:
        kl = kl + style_terms

    total = total_recon - Tensor(config.beta) * kl
    report = ElboReport(
        total=total.item(),
        recon=recon_report,
        kl=kl.item(),
        beta=config.beta,
        subsets=[sp.mask.label() for sp in joint.subsets],
        estimator=config.kl_estimator,
    )
    return total, report


def _encode_present(model: MultimodalVAE, xs) -> tuple[list, list[bool]]:
    present = [x is not None for x in xs]
    if not any(present):
        raise NoModalityPresent("batch has no present modality")
    posts = [model.encode(j, xs[j]) if present[j] else None for j in range(model.config.M)]
    return posts, present


def _recon_fn(model: MultimodalVAE, xs, present, styles=None):
    def recon(z, sp):
        out = {}
        for j in range(model.config.M):
            if not present[j]:
                continue
            if styles is None:
                params = model.decode(j, z)
            else:
                params = model.decode(j, z, style=styles[j])
            out[j] = recon_log_prob(model.config.modalities[j].likelihood, params, xs[j])
        return out

    return recon


def elbo_mopoe(
    model: MultimodalVAE, xs, config: ObjectiveConfig, rng: np.random.Generator
) -> tuple[Tensor, ElboReport]:
    """Mixture-over-subsets ELBO; xs is one array (or None) per modality."""
    posts, present = _encode_present(model, xs)
    joint = build_joint_posterior(
        posts,
        present,
        config.subset_policy,
        include_prior_component=config.include_prior_component,
        poe_prior_expert=config.poe_prior_expert,
    )
    return mixture_elbo_core(joint, _recon_fn(model, xs, present), config, rng)


def elbo_poe(model, xs, config, rng) -> tuple[Tensor, ElboReport]:
    """Single-component special case: fuse all present modalities."""
    return elbo_mopoe(model, xs, config.replaced(subset_policy="full_only"), rng)


def elbo_moe(model, xs, config, rng) -> tuple[Tensor, ElboReport]:
    """Singleton special case: uniform mixture of unimodal posteriors."""
    return elbo_mopoe(model, xs, config.replaced(subset_policy="singletons_only"), rng)


def elbo_subset_sum(model, xs, config, rng) -> tuple[Tensor, ElboReport]:
    """Convex combination of per-subset ELBOs.

    Identical term-by-term to the mixture objective under the averaged
    closed-form KL, which is exactly how it is computed.
    """
    return elbo_mopoe(model, xs, config.replaced(kl_estimator="avg_subset_kl"), rng)


def elbo_unimodal(
    model: MultimodalVAE, x_j, config: ObjectiveConfig, rng, modality: int = 0
) -> tuple[Tensor, ElboReport]:
    """Classic single-modality ELBO."""
    xs = [None] * model.config.M
    xs[modality] = x_j
    return elbo_mopoe(model, xs, config.replaced(subset_policy="full_only"), rng)


def elbo_factorized(
    model: MultimodalVAE, xs, config: ObjectiveConfig, rng
) -> tuple[Tensor, ElboReport]:
    """Shared latent via the subset mixture plus per-modality style spaces.

    Reconstruction of modality j conditions on (style_j, shared draw);
    the KL block adds each style posterior's closed-form divergence to
    the shared-space term.
    """
    if not model.config.factorized:
        raise ValueError("model is not configured with style latents")
    M = model.config.M
    present = [x is not None for x in xs]
    if not any(present):
        raise NoModalityPresent("batch has no present modality")
    shared_posts: list = [None] * M
    style_posts: list = [None] * M
    for j in range(M):
        if present[j]:
            shared_posts[j], style_posts[j] = model.encode(j, xs[j])
    joint = build_joint_posterior(
        shared_posts,
        present,
        config.subset_policy,
        include_prior_component=config.include_prior_component,
        poe_prior_expert=config.poe_prior_expert,
    )
    styles = [rsample(style_posts[j], rng) if present[j] else None for j in range(M)]
    style_kl = None
    for j in range(M):
        if not present[j]:
            continue
        term = _batch_mean(kl_to_standard_normal(style_posts[j]))
        style_kl = term if style_kl is None else style_kl + term
    return mixture_elbo_core(
        joint,
        _recon_fn(model, xs, present, styles=styles),
        config,
        rng,
        style_terms=style_kl,
    )


_DISPATCH = {
    "mopoe": elbo_mopoe,
    "poe": elbo_poe,
    "moe": elbo_moe,
    "subset_sum": elbo_subset_sum,
    "unimodal": elbo_unimodal,
    "factorized": elbo_factorized,
}


def evaluate_objective(kind: str, model, xs, config, rng) -> tuple[Tensor, ElboReport]:
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown objective {kind!r}") from None
    return fn(model, xs, config, rng)


def train_epoch(
    model: MultimodalVAE,
    optimizer: T.OptimizerState,
    data: list[np.ndarray | None],
    config: ObjectiveConfig,
    rng: np.random.Generator,
    objective: str = "mopoe",
    batch_size: int = 64,
) -> dict[str, float]:
    """One shuffled pass of minibatch ascent on the chosen objective.

    data holds one (N, D_j) array per modality (None for a modality
    absent from the whole dataset). Returns epoch means of the
    objective's terms.
    """
    sizes = {x.shape[0] for x in data if x is not None}
    if len(sizes) != 1:
        raise ValueError("modalities disagree on sample count")
    n = sizes.pop()
    order = rng.permutation(n)
    params = model.parameters()

    sums = {"elbo": 0.0, "recon": 0.0, "kl": 0.0}
    batches = 0
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        xs = [x[idx] if x is not None else None for x in data]
        try:
            with T.Tape() as tape:
                total, report = evaluate_objective(objective, model, xs, config, rng)
                loss = T.negate(total)
        except T.DomainError as e:
            # the op set clamps or errors instead of emitting inf/nan
            raise NonFiniteLoss(f"objective overflowed at batch {batches}: {e}") from e
        if not np.isfinite(report.total):
            raise NonFiniteLoss(
                f"non-finite objective at batch {batches}: {report.term_summary()}"
            )
        grads = T.backward(tape, loss)
        grads = T.param_gradients(tape, grads, params)
        T.optimizer_step(optimizer, params, grads)
        sums["elbo"] += report.total
        sums["recon"] += report.recon_total
        sums["kl"] += report.kl
        batches += 1
    return {k: v / batches for k, v in sums.items()}
