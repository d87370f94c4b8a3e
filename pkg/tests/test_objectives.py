import math

import numpy as np
import pytest

from mopoe import objectives as OBJ
from mopoe import oracle as O
from mopoe import tensor as T
from mopoe.distributions import (
    DiagonalGaussian,
    LikelihoodSpec,
    recon_log_prob,
)
from mopoe.fusion import JointPosterior, SubsetMask, SubsetPosterior
from mopoe.models import ModalityConfig, ModelConfig, MultimodalVAE
from mopoe.tensor import Tensor

from gradcheck import check_gradients


def tiny_model(m=2, input_dims=5, latent=3, factorized=False, style_dim=0, seed=0):
    mods = [
        ModalityConfig(input_dims, LikelihoodSpec("bernoulli_logits", input_dims), hidden=(6,))
        for _ in range(m)
    ]
    cfg = ModelConfig(latent, mods, factorized=factorized, style_dim=style_dim)
    return MultimodalVAE(cfg, seed=seed)


def batch_for(model, n=4, seed=0):
    rng = np.random.default_rng(seed)
    return [
        (rng.uniform(size=(n, mod.input_dims)) < 0.5).astype(float)
        for mod in model.config.modalities
    ]


def zero_params(model):
    for name in model.store.names():
        model.store[name].data = np.zeros_like(model.store[name].data)


class TestUnimodal:
    def test_zero_init_one_pixel(self):
        mods = [ModalityConfig(1, LikelihoodSpec("bernoulli_logits", 1), hidden=(4,))]
        model = MultimodalVAE(ModelConfig(2, mods), seed=0)
        zero_params(model)
        cfg = OBJ.ObjectiveConfig(beta=1.0)
        total, report = OBJ.elbo_unimodal(model, np.ones((1, 1)), cfg, np.random.default_rng(0))
        assert report.kl == 0.0
        assert report.recon_total == pytest.approx(math.log(0.5), abs=1e-12)
        assert report.total == pytest.approx(-0.693147, abs=1e-6)

    def test_beta_zero_total_is_recon(self):
        model = tiny_model()
        xs = batch_for(model)
        cfg = OBJ.ObjectiveConfig(beta=0.0)
        _, report = OBJ.elbo_unimodal(model, xs[0], cfg, np.random.default_rng(1))
        assert report.total == report.recon_total


class TestReductions:
    """The subset policy alone separates the objectives; shared RNG makes
    the special cases bit-identical."""

    def _grads(self, fn, model, xs, cfg, seed):
        params = model.parameters()
        with T.Tape() as tape:
            total, report = fn(model, xs, cfg, np.random.default_rng(seed))
            loss = T.negate(total)
        grads = T.backward(tape, loss)
        grads = T.param_gradients(tape, grads, params)
        return report, [grads[p.node_id].copy() for p in params]

    @pytest.mark.parametrize("policy,alias", [("full_only", "poe"), ("singletons_only", "moe")])
    def test_bit_identical_values_and_gradients(self, policy, alias):
        for seed in range(20):
            model = tiny_model(m=2, seed=seed)
            xs = batch_for(model, seed=seed)
            cfg = OBJ.ObjectiveConfig(subset_policy=policy, beta=1.3)
            rep_a, grads_a = self._grads(OBJ.elbo_mopoe, model, xs, cfg, seed)
            fn = OBJ.elbo_poe if alias == "poe" else OBJ.elbo_moe
            rep_b, grads_b = self._grads(fn, model, xs, cfg.replaced(subset_policy="all_nonempty"), seed)
            assert rep_a.total == rep_b.total
            assert rep_a.kl == rep_b.kl
            for ga, gb in zip(grads_a, grads_b):
                np.testing.assert_array_equal(ga, gb)

    def test_m1_poe_and_moe_equal_unimodal(self):
        model = tiny_model(m=1)
        xs = batch_for(model)
        cfg = OBJ.ObjectiveConfig(beta=1.0)
        t_poe, _ = OBJ.elbo_poe(model, xs, cfg, np.random.default_rng(3))
        t_moe, _ = OBJ.elbo_moe(model, xs, cfg, np.random.default_rng(3))
        t_uni, _ = OBJ.elbo_unimodal(model, xs[0], cfg, np.random.default_rng(3))
        assert t_poe.item() == t_uni.item() == t_moe.item()

    def test_subset_sum_matches_mopoe_avg_kl(self):
        model = tiny_model(m=3, seed=4)
        xs = batch_for(model, seed=4)
        cfg = OBJ.ObjectiveConfig(beta=2.0, kl_estimator="avg_subset_kl")
        t_a, _ = OBJ.elbo_mopoe(model, xs, cfg, np.random.default_rng(7))
        t_b, _ = OBJ.elbo_subset_sum(model, xs, cfg, np.random.default_rng(7))
        assert t_a.item() == t_b.item()


class TestBetaLinearity:
    def test_total_affine_in_beta(self):
        model = tiny_model(m=2, seed=2)
        xs = batch_for(model, seed=2)
        totals = {}
        for beta in (0.5, 1.0, 2.0):
            cfg = OBJ.ObjectiveConfig(beta=beta)
            _, rep = OBJ.elbo_mopoe(model, xs, cfg, np.random.default_rng(11))
            totals[beta] = (rep.total, rep.kl, rep.recon_total)
        t1, kl1, r1 = totals[1.0]
        t2, kl2, r2 = totals[2.0]
        assert kl1 == kl2 and r1 == r2
        assert t2 - t1 == pytest.approx(-kl1, abs=1e-12)

    def test_report_identity(self):
        model = tiny_model(m=3, seed=5)
        xs = batch_for(model, seed=5)
        cfg = OBJ.ObjectiveConfig(beta=2.5)
        _, rep = OBJ.elbo_mopoe(model, xs, cfg, np.random.default_rng(13))
        assert rep.total == pytest.approx(rep.recon_total - rep.beta * rep.kl, abs=1e-12)
        assert len(rep.subsets) == 7


class TestMissingModalities:
    def test_absent_tensor_never_touched(self):
        model = tiny_model(m=3, seed=6)
        xs = batch_for(model, seed=6)
        xs[1] = None
        seen_encode, seen_decode = [], []
        orig_encode, orig_decode = model.encode, model.decode

        def spy_encode(j, x):
            seen_encode.append(j)
            return orig_encode(j, x)

        def spy_decode(j, z, style=None):
            seen_decode.append(j)
            return orig_decode(j, z) if style is None else orig_decode(j, z, style)

        model.encode, model.decode = spy_encode, spy_decode
        _, rep = OBJ.elbo_mopoe(model, xs, OBJ.ObjectiveConfig(), np.random.default_rng(0))
        assert 1 not in seen_encode and 1 not in seen_decode
        assert len(rep.subsets) == 3  # powerset of the two present modalities

    def test_no_modality_present(self):
        model = tiny_model(m=2)
        with pytest.raises(OBJ.NoModalityPresent):
            OBJ.elbo_mopoe(model, [None, None], OBJ.ObjectiveConfig(), np.random.default_rng(0))


class TestMoeDualForm:
    def test_matches_importance_form_on_shared_samples(self):
        # mixture-estimator objective vs. averaging log p(X|z)p(z)/q_mix(z)
        # over per-component draws: same algebra, same samples
        model = tiny_model(m=3, input_dims=4, latent=2, seed=8)
        xs = batch_for(model, n=2, seed=8)
        cfg = OBJ.ObjectiveConfig(
            subset_policy="singletons_only", beta=1.0, kl_estimator="mixture_mc"
        )
        total, _ = OBJ.elbo_moe(model, xs, cfg, np.random.default_rng(21))

        # replay the identical draws
        rng = np.random.default_rng(21)
        posts = [model.encode(j, xs[j]) for j in range(3)]
        from mopoe.distributions import gaussian_log_prob, mixture_log_prob, rsample
        from mopoe.distributions import GaussianMixture

        mix = GaussianMixture.uniform(posts)
        prior = DiagonalGaussian.standard(2, (2,))
        vals = []
        for j in range(3):
            z = rsample(posts[j], rng)
            recon = None
            for k in range(3):
                term = recon_log_prob(
                    model.config.modalities[k].likelihood, model.decode(k, z), xs[k]
                )
                recon = term if recon is None else recon + term
            lw = recon + gaussian_log_prob(prior, z) - mixture_log_prob(mix, z)
            vals.append(lw.data.mean())
        assert abs(total.item() - np.mean(vals)) < 1e-10


def oracle_joint_and_recon(world, xs, dists, batch):
    """Subset posteriors tiled over a batch plus a recon_fn built from the
    world's exact emission model."""
    masks = [SubsetMask(tuple(j in idx for j in range(world.M))) for idx in dists]
    subsets = []
    for (idx, dist), mask in zip(dists.items(), masks):
        mu = np.tile(dist.mu.data, (batch, 1))
        lv = np.tile(dist.log_var.data, (batch, 1))
        subsets.append(SubsetPosterior(mask, DiagonalGaussian(mu, lv, clamp=False)))
    joint = JointPosterior(subsets)

    specs = [
        LikelihoodSpec("gaussian_fixed_var", world.loadings[j].shape[0], variance=world.noise[j])
        for j in range(world.M)
    ]

    def recon_fn(z, sp):
        out = {}
        for j in range(world.M):
            mean = T.matmul(z, Tensor(world.loadings[j].T))
            x_rep = np.tile(xs[j], (batch, 1))
            out[j] = recon_log_prob(specs[j], mean, x_rep)
        return out

    return joint, recon_fn


class TestOracleAnchors:
    def test_exact_posterior_gives_tight_elbo(self):
        rng = np.random.default_rng(41)
        world = O.random_world(rng, d=1, m=2)
        _, xs = world.sample(rng)
        exact = world.exact_posterior(xs).as_diagonal()
        n = 4000
        joint, recon_fn = oracle_joint_and_recon(
            world, xs, {tuple(range(world.M)): exact}, n
        )
        cfg = OBJ.ObjectiveConfig(subset_policy="full_only", beta=1.0)
        total, _ = OBJ.mixture_elbo_core(joint, recon_fn, cfg, np.random.default_rng(5))
        log_px = world.exact_log_marginal(xs)

        # Monte Carlo spread of the reconstruction term sets the tolerance
        z = exact.mu.data + np.exp(0.5 * exact.log_var.data) * np.random.default_rng(
            99
        ).standard_normal((n, 1))
        se = world.log_lik(z, xs).std(ddof=1) / math.sqrt(n)
        assert abs(total.item() - log_px) < 3 * se + 1e-9

    def test_mopoe_bound_and_gap_on_oracle(self):
        rng = np.random.default_rng(43)
        world = O.random_world(rng, d=1, m=2)
        _, xs = world.sample(rng)
        _, subset_posts = O.random_subset_posteriors(world, rng)
        dists = {tuple(m.indices()): d for m, d in subset_posts}
        n = 30_000
        joint, recon_fn = oracle_joint_and_recon(world, xs, dists, n)
        cfg = OBJ.ObjectiveConfig(beta=1.0, kl_estimator="mixture_mc")
        total, _ = OBJ.mixture_elbo_core(joint, recon_fn, cfg, np.random.default_rng(7))
        log_px = world.exact_log_marginal(xs)

        est = O.mixture_and_subset_sum_estimates(
            world, xs, [d for _, d in subset_posts], 3 * n, np.random.default_rng(8)
        )
        gap = log_px - total.item()
        assert gap > -3 * est["mixture_se"]
        # gap equals the mixture-to-posterior KL, computed by quadrature
        post = world.exact_posterior(xs)
        comps = [d for _, d in subset_posts]
        grid = O.GridSpec.for_dim(1, half_width=14.0, points=1025)
        kl_quad = O.grid_kl(lambda z: O._mixture_logpdf(comps, z), post.log_pdf, grid)
        assert gap == pytest.approx(kl_quad, abs=4 * est["mixture_se"] + 5e-3)

    def test_subset_sum_below_mixture_form(self):
        rng = np.random.default_rng(47)
        world = O.random_world(rng, d=1, m=2)
        _, xs = world.sample(rng)
        _, subset_posts = O.random_subset_posteriors(world, rng)
        dists = {tuple(m.indices()): d for m, d in subset_posts}
        n = 30_000
        joint, recon_fn = oracle_joint_and_recon(world, xs, dists, n)
        t_mix, _ = OBJ.mixture_elbo_core(
            joint,
            recon_fn,
            OBJ.ObjectiveConfig(beta=1.0, kl_estimator="mixture_mc"),
            np.random.default_rng(9),
        )
        t_ss, _ = OBJ.mixture_elbo_core(
            joint,
            recon_fn,
            OBJ.ObjectiveConfig(beta=1.0, kl_estimator="avg_subset_kl"),
            np.random.default_rng(9),
        )
        est = O.mixture_and_subset_sum_estimates(
            world, xs, [d for _, d in subset_posts], 3 * n, np.random.default_rng(10)
        )
        assert t_mix.item() >= t_ss.item() - 3 * est["difference_se"]


class TestFactorized:
    def test_zero_init_uniform_outputs(self):
        # singleton components stay N(0, I) under zero-init, so every KL
        # term vanishes; a fused multi-expert component would not (its
        # variance halves), which is precision addition, not a bug
        model = tiny_model(m=2, input_dims=3, factorized=True, style_dim=2, seed=9)
        zero_params(model)
        xs = batch_for(model, n=2, seed=9)
        cfg = OBJ.ObjectiveConfig(
            beta=1.0, factorized=True, subset_policy="singletons_only"
        )
        total, rep = OBJ.elbo_factorized(model, xs, cfg, np.random.default_rng(1))
        assert rep.kl == 0.0
        assert rep.total == pytest.approx(2 * 3 * math.log(0.5), abs=1e-12)

    def test_zero_init_full_powerset_kl_is_fused_sharpening(self):
        model = tiny_model(m=2, input_dims=3, latent=3, factorized=True, style_dim=2, seed=9)
        zero_params(model)
        xs = batch_for(model, n=2, seed=9)
        cfg = OBJ.ObjectiveConfig(beta=1.0, factorized=True)
        _, rep = OBJ.elbo_factorized(model, xs, cfg, np.random.default_rng(1))
        # only the {0,1} component contributes: KL(N(0,1/2) || N(0,1)) per unit
        per_unit = 0.5 * (0.5 - 1.0 - math.log(0.5))
        assert rep.kl == pytest.approx(3 * per_unit / 3.0, abs=1e-12)

    def test_requires_factorized_model(self):
        model = tiny_model(m=2)
        with pytest.raises(ValueError):
            OBJ.elbo_factorized(model, batch_for(model), OBJ.ObjectiveConfig(), np.random.default_rng(0))

    def test_gradcheck_full_graph(self):
        model = tiny_model(m=2, input_dims=3, latent=2, factorized=True, style_dim=2, seed=10)
        xs = batch_for(model, n=2, seed=10)
        cfg = OBJ.ObjectiveConfig(beta=0.7, factorized=True)

        def graph():
            total, _ = OBJ.elbo_factorized(model, xs, cfg, np.random.default_rng(33))
            return total

        check_gradients(graph, model.parameters())


class TestObjectiveGradchecks:
    @pytest.mark.parametrize("kind", ["mopoe", "poe", "moe", "subset_sum"])
    def test_full_graph_finite_differences(self, kind):
        model = tiny_model(m=2, input_dims=3, latent=2, seed=11)
        xs = batch_for(model, n=2, seed=11)
        cfg = OBJ.ObjectiveConfig(beta=1.1)

        def graph():
            total, _ = OBJ.evaluate_objective(kind, model, xs, cfg, np.random.default_rng(17))
            return total

        check_gradients(graph, model.parameters())

    def test_mixture_mc_estimator_gradcheck(self):
        model = tiny_model(m=2, input_dims=3, latent=2, seed=12)
        xs = batch_for(model, n=2, seed=12)
        cfg = OBJ.ObjectiveConfig(beta=0.9, kl_estimator="mixture_mc")

        def graph():
            total, _ = OBJ.elbo_mopoe(model, xs, cfg, np.random.default_rng(19))
            return total

        check_gradients(graph, model.parameters())


class TestTrainEpoch:
    def test_zero_learning_rate_keeps_params(self):
        model = tiny_model(m=2, seed=13)
        before = model.store.state_dict()
        opt = T.OptimizerState("sgd", 0.0)
        data = batch_for(model, n=16, seed=13)
        OBJ.train_epoch(model, opt, data, OBJ.ObjectiveConfig(), np.random.default_rng(0), batch_size=8)
        for n, arr in model.store.state_dict().items():
            np.testing.assert_array_equal(arr, before[n])

    def test_deterministic_given_seed(self):
        metrics = []
        for _ in range(2):
            model = tiny_model(m=2, seed=14)
            opt = T.OptimizerState("adam", 0.001)
            data = batch_for(model, n=32, seed=14)
            m = OBJ.train_epoch(
                model, opt, data, OBJ.ObjectiveConfig(), np.random.default_rng(42), batch_size=8
            )
            metrics.append(m)
        assert metrics[0] == metrics[1]

    def test_non_finite_loss_diagnostic(self):
        mods = [ModalityConfig(2, LikelihoodSpec("gaussian_fixed_var", 2), hidden=(4,))]
        model = MultimodalVAE(ModelConfig(2, mods), seed=0)
        data = [np.full((8, 2), 1e200)]
        opt = T.OptimizerState("sgd", 0.1)
        with pytest.raises(OBJ.NonFiniteLoss):
            OBJ.train_epoch(model, opt, data, OBJ.ObjectiveConfig(), np.random.default_rng(0), batch_size=8)

    def test_learns_oracle_world(self):
        # data from a 1-D linear-Gaussian world; the ELBO should approach
        # the exact average log-likelihood
        rng = np.random.default_rng(55)
        world = O.LinearGaussianWorld([np.array([[1.0]])], [0.5])
        n = 256
        data_x = np.array([world.sample(rng)[1][0] for _ in range(n)])
        exact = float(np.mean([world.exact_log_marginal([x]) for x in data_x]))

        mods = [
            ModalityConfig(
                1, LikelihoodSpec("gaussian_fixed_var", 1, variance=0.5), hidden=(8,)
            )
        ]
        model = MultimodalVAE(ModelConfig(1, mods), seed=3)
        opt = T.OptimizerState("adam", 0.01)
        cfg = OBJ.ObjectiveConfig(beta=1.0)
        train_rng = np.random.default_rng(7)
        last = None
        for _ in range(200):
            last = OBJ.train_epoch(model, opt, [data_x], cfg, train_rng, batch_size=64)
        assert abs(last["elbo"] - exact) < 0.1
