"""Exact linear-Gaussian worlds and quadrature ground truth.

A world draws a latent z ~ N(0, I_d) and emits one observation per
modality, x_j = A_j z + noise with variance rho_j. Everything of
interest is then available in closed form: the posterior for any subset
of modalities (conjugate update), the marginal likelihood (latent-space
determinant lemma), and KLs by trapezoidal quadrature for d <= 2. These
exact quantities anchor the bound checks: the mixture-of-subset ELBO
must lower-bound the marginal likelihood, and the mixture form must
dominate the convex combination of per-subset ELBOs.

Everything here is plain numpy; nothing records gradients.
"""

from __future__ import annotations

import math

import numpy as np

from .distributions import DiagonalGaussian
from .fusion import enumerate_subsets, poe_fuse

__all__ = [
    "GridTooCoarse",
    "SingularPrecision",
    "FullGaussian",
    "LinearGaussianWorld",
    "GridSpec",
    "grid_kl",
    "grid_expectation",
    "random_world",
    "random_subset_posteriors",
    "mixture_and_subset_sum_estimates",
    "verify_lemmas",
    "poe_grid_check",
    "kl_grid_check",
    "LemmaCheck",
    "LemmaReport",
]

MC_SAMPLES_DEFAULT = 100_000


class GridTooCoarse(ValueError):
    """Quadrature did not stabilize when the resolution was doubled."""


class SingularPrecision(np.linalg.LinAlgError):
    """Posterior precision matrix is not positive definite."""


class FullGaussian:
    """Multivariate normal with a full covariance (oracle-side only)."""

    __slots__ = ("mean", "cov", "_chol")

    def __init__(self, mean: np.ndarray, cov: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        try:
            self._chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as e:
            raise SingularPrecision(str(e)) from e

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_pdf(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        diff = z - self.mean
        sol = np.linalg.solve(self._chol, diff.T)
        maha = np.sum(sol * sol, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        out = -0.5 * (self.dim * math.log(2 * math.pi) + logdet + maha)
        return out if out.size > 1 else float(out[0])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        eps = rng.standard_normal((n, self.dim))
        return self.mean + eps @ self._chol.T

    def as_diagonal(self, tol: float = 1e-12) -> DiagonalGaussian:
        off = self.cov - np.diag(np.diag(self.cov))
        if np.max(np.abs(off)) > tol:
            raise ValueError("covariance is not diagonal")
        return DiagonalGaussian(self.mean, np.log(np.diag(self.cov)), clamp=False)


def diag_logpdf(mu: np.ndarray, log_var: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Vectorized diagonal-Gaussian log density for oracle arithmetic."""
    z = np.atleast_2d(z)
    return np.sum(
        -0.5 * np.log(2 * np.pi) - 0.5 * log_var - (z - mu) ** 2 / (2 * np.exp(log_var)),
        axis=-1,
    )


class LinearGaussianWorld:
    """Latent z ~ N(0, I_d); per modality x_j = A_j z + N(0, rho_j I)."""

    __slots__ = ("d", "loadings", "noise")

    def __init__(self, loadings: list[np.ndarray], noise: list[float]):
        self.loadings = [np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in loadings]
        self.noise = [float(r) for r in noise]
        if len(self.loadings) != len(self.noise):
            raise ValueError("one noise variance per modality required")
        if any(r <= 0 for r in self.noise):
            raise ValueError("noise variances must be positive")
        dims = {a.shape[1] for a in self.loadings}
        if len(dims) != 1:
            raise ValueError("loading matrices disagree on latent dim")
        self.d = dims.pop()
        if not all(np.all(np.isfinite(a)) for a in self.loadings):
            raise ValueError("loading matrices must be finite")

    @property
    def M(self) -> int:
        return len(self.loadings)

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, list[np.ndarray]]:
        z = rng.standard_normal(self.d)
        xs = [
            a @ z + math.sqrt(r) * rng.standard_normal(a.shape[0])
            for a, r in zip(self.loadings, self.noise)
        ]
        return z, xs

    def log_lik(self, z: np.ndarray, xs: list[np.ndarray]) -> np.ndarray:
        """log p(X | z) for one z (d,) or a batch (n, d)."""
        z = np.atleast_2d(z)
        total = np.zeros(z.shape[0])
        for a, r, x in zip(self.loadings, self.noise, xs):
            mean = z @ a.T
            total += np.sum(
                -0.5 * np.log(2 * np.pi * r) - (x - mean) ** 2 / (2 * r), axis=-1
            )
        return total if total.size > 1 else float(total[0])

    def log_prior(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        out = np.sum(-0.5 * np.log(2 * np.pi) - z**2 / 2.0, axis=-1)
        return out if out.size > 1 else float(out[0])

    def exact_posterior(self, xs: list[np.ndarray], subset=None) -> FullGaussian:
        """Conjugate posterior over z given the subset's observations."""
        subset = list(range(self.M)) if subset is None else sorted(subset)
        if not subset:
            raise ValueError("posterior needs a nonempty subset")
        lam = np.eye(self.d)
        b = np.zeros(self.d)
        for j in subset:
            a, r = self.loadings[j], self.noise[j]
            lam = lam + a.T @ a / r
            b = b + a.T @ xs[j] / r
        cov = np.linalg.inv(lam)
        cov = 0.5 * (cov + cov.T)
        return FullGaussian(cov @ b, cov)

    def exact_log_marginal(self, xs: list[np.ndarray]) -> float:
        """log p(X), computed through the d-dimensional latent identity."""
        lam = np.eye(self.d)
        b = np.zeros(self.d)
        quad = 0.0
        logdet_noise = 0.0
        total_dims = 0
        for a, r, x in zip(self.loadings, self.noise, xs):
            lam = lam + a.T @ a / r
            b = b + a.T @ x / r
            quad += float(x @ x) / r
            logdet_noise += a.shape[0] * math.log(r)
            total_dims += a.shape[0]
        sign, logdet_lam = np.linalg.slogdet(lam)
        if sign <= 0:
            raise SingularPrecision("posterior precision lost positive definiteness")
        maha = quad - float(b @ np.linalg.solve(lam, b))
        return -0.5 * (total_dims * math.log(2 * math.pi) + logdet_noise + logdet_lam + maha)


class GridSpec:
    """Trapezoid grid for d <= 2; bounds must cover 6 prior deviations."""

    __slots__ = ("bounds", "points")

    def __init__(self, bounds, points: int = 257):
        self.bounds = [(float(lo), float(hi)) for lo, hi in bounds]
        if len(self.bounds) > 2:
            raise ValueError("quadrature supports d <= 2 only")
        if points < 64:
            raise ValueError("need at least 64 points per dimension")
        for lo, hi in self.bounds:
            if lo > -6.0 or hi < 6.0:
                raise ValueError("bounds must cover at least [-6, 6]")
        self.points = int(points)

    @classmethod
    def for_dim(cls, d: int, half_width: float = 10.0, points: int = 257) -> "GridSpec":
        return cls([(-half_width, half_width)] * d, points)

    def axes(self, points: int | None = None) -> list[np.ndarray]:
        n = points or self.points
        return [np.linspace(lo, hi, n) for lo, hi in self.bounds]

    def nodes(self, points: int | None = None) -> np.ndarray:
        axes = self.axes(points)
        if len(axes) == 1:
            return axes[0].reshape(-1, 1)
        za, zb = np.meshgrid(axes[0], axes[1], indexing="ij")
        return np.stack([za.ravel(), zb.ravel()], axis=1)

    def integrate(self, values: np.ndarray, points: int | None = None) -> float:
        n = points or self.points
        axes = self.axes(n)
        if len(axes) == 1:
            return float(np.trapezoid(values, axes[0]))
        grid = values.reshape(n, n)
        inner = np.trapezoid(grid, axes[1], axis=1)
        return float(np.trapezoid(inner, axes[0]))


def _converged_quadrature(f_of_nodes, grid: GridSpec, tol: float = 1e-6) -> float:
    """Integrate at the grid's resolution and at double; error if unstable."""
    coarse_n = grid.points
    fine_n = 2 * coarse_n - 1
    coarse = grid.integrate(f_of_nodes(grid.nodes(coarse_n)), coarse_n)
    fine = grid.integrate(f_of_nodes(grid.nodes(fine_n)), fine_n)
    if abs(fine - coarse) > tol:
        raise GridTooCoarse(f"quadrature moved {abs(fine - coarse):.2e} on refinement")
    return fine


def grid_kl(p_logpdf, q_logpdf, grid: GridSpec) -> float:
    """Trapezoid KL(p || q): integral of p * (log p - log q)."""

    def integrand(nodes):
        lp = np.asarray(p_logpdf(nodes), dtype=np.float64)
        lq = np.asarray(q_logpdf(nodes), dtype=np.float64)
        return np.exp(lp) * (lp - lq)

    return _converged_quadrature(integrand, grid)


def grid_expectation(q_logpdf, f, grid: GridSpec) -> float:
    """Trapezoid E_q[f(z)] for a density known through its log-pdf."""

    def integrand(nodes):
        lq = np.asarray(q_logpdf(nodes), dtype=np.float64)
        return np.exp(lq) * np.asarray(f(nodes), dtype=np.float64)

    return _converged_quadrature(integrand, grid)


def random_world(
    rng: np.random.Generator,
    d: int | None = None,
    m: int | None = None,
    diagonal: bool = False,
) -> LinearGaussianWorld:
    """A small random instance with d <= 2 and M <= 3."""
    d = int(rng.integers(1, 3)) if d is None else d
    m = int(rng.integers(1, 4)) if m is None else m
    loadings = []
    noise = []
    for _ in range(m):
        if diagonal:
            a = np.diag(rng.uniform(0.3, 1.5, size=d) * rng.choice([-1.0, 1.0], size=d))
        else:
            obs = int(rng.integers(1, 3))
            a = rng.normal(size=(obs, d))
        loadings.append(a)
        noise.append(float(rng.uniform(0.3, 2.0)))
    return LinearGaussianWorld(loadings, noise)


def random_subset_posteriors(
    world: LinearGaussianWorld, rng: np.random.Generator, spread: float = 1.0
) -> tuple[list[DiagonalGaussian], list]:
    """A random diagonal posterior per modality plus all subset fusions."""
    unimodal = [
        DiagonalGaussian(
            rng.normal(scale=spread, size=world.d),
            rng.uniform(-1.5, 0.5, size=world.d),
        )
        for _ in range(world.M)
    ]
    masks = enumerate_subsets(world.M, "all_nonempty")
    fused = [poe_fuse([unimodal[j] for j in mask.indices()]) for mask in masks]
    return unimodal, list(zip(masks, fused))


def _mixture_logpdf(components: list[DiagonalGaussian], z: np.ndarray) -> np.ndarray:
    lps = np.stack(
        [diag_logpdf(c.mu.data, c.log_var.data, z) for c in components], axis=0
    )
    m = lps.max(axis=0)
    return m + np.log(np.mean(np.exp(lps - m), axis=0))


def mixture_and_subset_sum_estimates(
    world: LinearGaussianWorld,
    xs: list[np.ndarray],
    components: list[DiagonalGaussian],
    n_samples: int,
    rng: np.random.Generator,
    mutate: str | None = None,
) -> dict:
    """Stratified MC estimates of the two bound forms on shared draws.

    Returns the mixture-form ELBO, the per-subset convex combination,
    their standard errors, and the SE of the paired difference. The
    'kl_sign' mutation deliberately flips the mixture density term to
    let fault-injection tests confirm the bound check would catch it.
    """
    K = len(components)
    n_per = max(1, n_samples // K)
    mix_means, mix_vars = [], []
    ss_means, ss_vars = [], []
    diff_means, diff_vars = [], []
    sign = -1.0 if mutate == "kl_sign" else 1.0
    for comp in components:
        mu, lv = comp.mu.data, comp.log_var.data
        z = mu + np.exp(0.5 * lv) * rng.standard_normal((n_per, world.d))
        log_lik = world.log_lik(z, xs)
        log_prior = world.log_prior(z)
        log_mix = _mixture_logpdf(components, z)
        log_comp = diag_logpdf(mu, lv, z)
        # the per-sample KL block is (log q_mix - log prior); the kl_sign
        # mutation flips exactly that block
        mix_vals = log_lik - sign * (log_mix - log_prior)
        ss_vals = log_lik + log_prior - log_comp
        diff_vals = mix_vals - ss_vals
        mix_means.append(mix_vals.mean())
        mix_vars.append(mix_vals.var(ddof=1))
        ss_means.append(ss_vals.mean())
        ss_vars.append(ss_vals.var(ddof=1))
        diff_means.append(diff_vals.mean())
        diff_vars.append(diff_vals.var(ddof=1))

    def combine(means, variances):
        est = float(np.mean(means))
        se = float(np.sqrt(np.sum(variances) / n_per) / K)
        return est, se

    mix_est, mix_se = combine(mix_means, mix_vars)
    ss_est, ss_se = combine(ss_means, ss_vars)
    diff_est, diff_se = combine(diff_means, diff_vars)
    return {
        "mixture": mix_est,
        "mixture_se": mix_se,
        "subset_sum": ss_est,
        "subset_sum_se": ss_se,
        "difference": diff_est,
        "difference_se": diff_se,
        "samples_per_component": n_per,
    }


class LemmaCheck:
    """One named check with its margin (nonnegative margin = pass)."""

    __slots__ = ("name", "instance", "margin", "passed", "detail")

    def __init__(self, name, instance, margin, passed, detail=""):
        self.name = name
        self.instance = instance
        self.margin = margin
        self.passed = passed
        self.detail = detail


class LemmaReport:
    """All checks across instances, with worst-case margins per name."""

    def __init__(self, checks: list[LemmaCheck]):
        self.checks = checks

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def worst_by_name(self) -> dict[str, LemmaCheck]:
        worst: dict[str, LemmaCheck] = {}
        for c in self.checks:
            if c.name not in worst or c.margin < worst[c.name].margin:
                worst[c.name] = c
        return worst

    def summary_lines(self) -> list[str]:
        lines = []
        for name, c in self.worst_by_name().items():
            n = sum(1 for x in self.checks if x.name == name)
            ok = sum(1 for x in self.checks if x.name == name and x.passed)
            status = "PASS" if ok == n else "FAIL"
            lines.append(
                f"{status} {name}: {ok}/{n} instances, worst margin {c.margin:+.3e} {c.detail}"
            )
        return lines


def verify_lemmas(
    n_instances: int,
    rng: np.random.Generator,
    n_samples: int = MC_SAMPLES_DEFAULT,
    identity_instances: int | None = None,
    mutate: str | None = None,
    force_d: int | None = None,
) -> LemmaReport:
    """Numerical verification of the decomposition identity, the bound,
    and the tightness ordering on random worlds.

    Per instance: (i) the marginal log-likelihood equals the averaged
    KL-to-true-posterior plus the averaged per-subset ELBO, by grid
    quadrature (d = 1 instances); (ii) the stratified MC estimate of the
    mixture ELBO stays below the exact marginal within 3 SE; (iii) the
    mixture form dominates the per-subset convex combination within 3 SE
    on the same draws.
    """
    checks: list[LemmaCheck] = []
    identity_budget = n_instances if identity_instances is None else identity_instances
    for i in range(n_instances):
        world = random_world(rng, d=force_d)
        _, xs = world.sample(rng)
        _, subset_posts = random_subset_posteriors(world, rng)
        components = [dist for _, dist in subset_posts]
        log_px = world.exact_log_marginal(xs)

        # (i) decomposition identity, by quadrature; 1-D worlds keep the
        # doubling check fast
        if world.d == 1 and i < identity_budget:
            grid = GridSpec.for_dim(1, half_width=12.0, points=513)
            posterior = world.exact_posterior(xs)
            rhs = 0.0
            for _, dist in subset_posts:
                mu, lv = dist.mu.data, dist.log_var.data
                q_lp = lambda z: diag_logpdf(mu, lv, z)
                kl_term = grid_kl(q_lp, posterior.log_pdf, grid)
                elbo_term = grid_expectation(
                    q_lp,
                    lambda z: world.log_lik(z, xs) + world.log_prior(z) - q_lp(z),
                    grid,
                )
                rhs += (kl_term + elbo_term) / len(subset_posts)
            margin = 1e-5 - abs(log_px - rhs)
            checks.append(
                LemmaCheck(
                    "decomposition_identity",
                    i,
                    margin,
                    margin >= 0,
                    f"|lhs-rhs|={abs(log_px - rhs):.2e}",
                )
            )

        # (ii) + (iii) Monte Carlo bound and ordering
        est = mixture_and_subset_sum_estimates(
            world, xs, components, n_samples, rng, mutate=mutate
        )
        gap = log_px - est["mixture"]
        margin2 = gap + 3.0 * est["mixture_se"]
        checks.append(
            LemmaCheck(
                "elbo_bound",
                i,
                margin2,
                margin2 >= 0,
                f"gap={gap:.4f} se={est['mixture_se']:.4f}",
            )
        )
        margin3 = est["difference"] + 3.0 * est["difference_se"]
        checks.append(
            LemmaCheck(
                "tightness_ordering",
                i,
                margin3,
                margin3 >= 0,
                f"diff={est['difference']:.4f} se={est['difference_se']:.4f}",
            )
        )
    return LemmaReport(checks)


def poe_grid_check(n_cases: int, rng: np.random.Generator) -> LemmaReport:
    """Fused Gaussian density vs. pointwise product renormalized on a grid."""
    z = np.linspace(-20.0, 20.0, 40001)
    checks = []
    for i in range(n_cases):
        k = int(rng.integers(2, 4))
        mus = rng.normal(size=k) * 1.5
        lvs = rng.uniform(-1.5, 1.5, size=k)
        experts = [
            DiagonalGaussian(np.array([mus[j]]), np.array([lvs[j]])) for j in range(k)
        ]
        fused = poe_fuse(experts)
        log_prod = np.zeros_like(z)
        for j in range(k):
            log_prod += diag_logpdf(
                np.array([mus[j]]), np.array([lvs[j]]), z.reshape(-1, 1)
            )
        prod = np.exp(log_prod)
        prod /= np.trapezoid(prod, z)
        mine = np.exp(diag_logpdf(fused.mu.data, fused.log_var.data, z.reshape(-1, 1)))
        err = float(np.max(np.abs(mine - prod)))
        margin = 1e-6 - err
        checks.append(LemmaCheck("poe_vs_grid", i, margin, margin >= 0, f"err={err:.2e}"))
    return LemmaReport(checks)


def kl_grid_check(n_cases: int, rng: np.random.Generator) -> LemmaReport:
    """Closed-form KL to the standard normal vs. quadrature."""
    from .distributions import kl_to_standard_normal

    checks = []
    for i in range(n_cases):
        mu = float(rng.normal() * 2.0)
        lv = float(rng.uniform(-2.5, 2.5))
        q = DiagonalGaussian(np.array([mu]), np.array([lv]))
        closed = kl_to_standard_normal(q).item()
        # bounds follow the wider of the two densities; the doubling check
        # cannot see truncation error, so cover 10 standard deviations
        half = max(10.0, abs(mu) + 10.0 * math.exp(0.5 * lv))
        grid = GridSpec.for_dim(1, half_width=half, points=2049)
        numeric = grid_kl(
            lambda z: diag_logpdf(q.mu.data, q.log_var.data, z),
            lambda z: diag_logpdf(np.zeros(1), np.zeros(1), z),
            grid,
        )
        err = abs(closed - numeric)
        margin = 1e-6 - err
        nonneg = closed >= 0.0
        checks.append(
            LemmaCheck(
                "kl_vs_grid", i, margin, margin >= 0 and nonneg, f"err={err:.2e}"
            )
        )
    return LemmaReport(checks)
