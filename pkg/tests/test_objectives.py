import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from metavi import distributions as D
from metavi import nets
from metavi import objectives as O
from metavi import tensor as T
from metavi.tensor import Tensor

VAR = 0.1


class FixedGaussian:
    """Inference stub emitting a given affine posterior in x."""

    posterior_kind = "gaussian"
    latent_dim = 1

    def __init__(self, a, b, logvar):
        self.a, self.b, self.logvar = a, b, logvar

    def posterior(self, x):
        x = np.asarray(x)[:, :1]
        return D.GaussianPosterior(Tensor(self.a * x + self.b), Tensor(np.full_like(x, self.logvar)))


class FixedLogit:
    posterior_kind = "bernoulli"
    latent_dim = 1

    def __init__(self, logit):
        self.logit = logit

    def posterior(self, x):
        return D.BernoulliPosterior(Tensor(np.full((len(x), 1), float(self.logit))))


def linear_gaussian():
    return nets.GenerativeModel(D.family("gaussian-fixed-var", variance=VAR), "continuous", 1, 1)


def exact_posterior():
    return FixedGaussian(1.0 / (1.0 + VAR), 0.0, math.log(VAR / (1.0 + VAR)))


@pytest.mark.parametrize("x0", [-1.3, 0.0, 0.7, 2.5])
def test_elbo_with_exact_posterior_equals_log_marginal(x0):
    # recon is quadratic in z, so +-1 noise gives the exact expectation
    x = np.full((2, 1), x0)
    noise = np.array([[1.0], [-1.0]])
    lb = O.elbo_mc(exact_posterior(), linear_gaussian(), x, noise)
    assert lb.total.item() == pytest.approx(stats.norm(0, math.sqrt(1 + VAR)).logpdf(x0), abs=1e-9)


@given(st.floats(-3, 3), st.floats(-1, 1), st.floats(-2, 1))
def test_elbo_is_a_lower_bound(x0, shift, logvar):
    n = 10_000
    x = np.full((n, 1), x0)
    noise = np.random.default_rng(1).normal(size=(n, 1))
    inf = FixedGaussian(1.0 / (1.0 + VAR), shift, logvar)
    gen = linear_gaussian()
    post = inf.posterior(x)
    z = D.reparam_sample(post, noise).data
    per = (
        stats.norm(z, math.sqrt(VAR)).logpdf(x)
        + stats.norm(0, 1).logpdf(z)
        - stats.norm(post.mean.data, np.exp(0.5 * post.logvar.data)).logpdf(z)
    )
    lb = O.elbo_mc(inf, gen, x, noise).total.item()
    log_px = stats.norm(0, math.sqrt(1 + VAR)).logpdf(x0)
    assert lb <= log_px + 3 * per.std() / math.sqrt(n) + 1e-12


def test_kl_term_vanishes_when_q_is_prior():
    lb = O.elbo_mc(FixedGaussian(0.0, 0.0, 0.0), linear_gaussian(), np.ones((4, 1)), np.zeros((4, 1)))
    assert lb.kl.item() == pytest.approx(0.0, abs=1e-15)


def test_elbo_mc_rejects_binary_posterior():
    with pytest.raises(nets.ConfigError):
        O.elbo_mc(FixedLogit(0.0), linear_gaussian(), np.ones((2, 1)), np.zeros((2, 1)))


def binary_gen(seed=0):
    return nets.build_generative(
        dict(family="gaussian-fixed-var", latent="binary", latent_dim=1, obs_dim=2, decoder_hidden=[10, 10]), np.random.default_rng(seed)
    )


def test_enumerated_elbo_deterministic_q():
    gen = binary_gen()
    x = np.random.default_rng(2).normal(size=(5, 2))
    lb = O.elbo_enumerated(FixedLogit(60.0), gen, x)
    lp1 = gen.loglik(x, np.ones((5, 1))).data.mean()
    assert lb.total.item() == pytest.approx(lp1 + math.log(0.5), abs=1e-12)


def test_enumerated_elbo_symmetric_model_ignores_logit_sign():
    gen = nets.GenerativeModel(D.family("gaussian-fixed-var"), "binary", 1, 2, T.init_mlp(np.random.default_rng(0), [1, 3, 2]))
    gen.decoder[0].weight.data[:] = 0.0  # both branches decode to the same mean
    x = np.random.default_rng(3).normal(size=(6, 2))
    a = O.elbo_enumerated(FixedLogit(1.7), gen, x).total.item()
    b = O.elbo_enumerated(FixedLogit(-1.7), gen, x).total.item()
    assert a == pytest.approx(b, abs=1e-12)


def test_enumerated_elbo_matches_brute_force_sum():
    gen = binary_gen(4)
    x = np.random.default_rng(4).normal(size=(3, 2))
    logit = 0.8
    q1 = 1 / (1 + math.exp(-logit))
    ref = 0.0
    for z, q in ((0.0, 1 - q1), (1.0, q1)):
        mean = gen.decode_tensor(np.array([[z]])).data[0]
        ll = stats.norm(mean, math.sqrt(0.1)).logpdf(x).sum(axis=1)
        ref += q * (ll + math.log(0.5) - math.log(q))
    assert O.elbo_enumerated(FixedLogit(logit), gen, x).total.item() == pytest.approx(ref.mean(), rel=1e-12)


def test_enumerated_rejects_continuous_latent():
    with pytest.raises(nets.ConfigError):
        O.elbo_enumerated(FixedLogit(0.0), linear_gaussian(), np.ones((1, 1)))


MOG_META = dict(kind="meta", posterior="bernoulli", latent_dim=1, obs_dim=2, summary_dim=10, summary_hidden=[10, 10], hidden=[10, 10])


def test_meta_elbo_singleton_equals_elbo():
    meta = nets.build_inference(MOG_META, np.random.default_rng(0))
    gen = binary_gen()
    rng = np.random.default_rng(5)
    data, x = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
    a = O.meta_elbo(meta, {"d": gen}, [("d", data, x)])
    b = O.elbo_enumerated(O.ConditionedInference(meta, data), gen, x)
    for u, v in zip(a.values().values(), b.values().values()):
        assert u == pytest.approx(v, abs=1e-9)


def test_meta_elbo_singleton_equals_elbo_gaussian():
    arch = dict(kind="meta", posterior="gaussian", latent_dim=1, obs_dim=20, summary_dim=8, summary_hidden=[8], hidden=[8])
    meta = nets.build_inference(arch, np.random.default_rng(1))
    gen = nets.GenerativeModel(D.family("exponential"), "continuous", 1, 20, prior_std=5.0)
    rng = np.random.default_rng(6)
    data, x = rng.exponential(size=(10, 20)), rng.exponential(size=(7, 20))
    noise = rng.normal(size=(7, 1))
    a = O.meta_elbo(meta, {"e": gen}, [("e", data, x)], noise).total.item()
    b = O.elbo_mc(O.ConditionedInference(meta, data), gen, x, noise).total.item()
    assert a == pytest.approx(b, abs=1e-9)


def test_meta_elbo_averages_per_set_elbos_and_decomposes():
    meta = nets.build_inference(MOG_META, np.random.default_rng(0))
    gens = {"a": binary_gen(1), "b": binary_gen(2)}
    rng = np.random.default_rng(7)
    batch = [("a", rng.normal(size=(20, 2)), rng.normal(size=(5, 2))), ("b", rng.normal(size=(8, 2)), rng.normal(size=(9, 2)))]
    lb = O.meta_elbo(meta, gens, batch)
    singles = [O.elbo_enumerated(O.ConditionedInference(meta, d), gens[i], x).total.item() for i, d, x in batch]
    assert lb.total.item() == pytest.approx(np.mean(singles), abs=1e-12)
    np.testing.assert_allclose(lb.components, singles, atol=1e-12)
    assert lb.total.item() == pytest.approx(lb.recon.item() - lb.kl.item(), abs=1e-10)


def test_meta_elbo_unknown_data_set():
    meta = nets.build_inference(MOG_META, np.random.default_rng(0))
    with pytest.raises(nets.ConfigError, match="zzz"):
        O.meta_elbo(meta, {}, [("zzz", np.ones((2, 2)), np.ones((2, 2)))])


def test_meta_elbo_gradients_match_finite_differences():
    arch = dict(MOG_META, summary_activation="softplus", hidden_activation="softplus")
    meta = nets.build_inference(arch, np.random.default_rng(3))
    gen = binary_gen(3)
    rng = np.random.default_rng(8)
    data, x = rng.normal(size=(6, 2)), rng.normal(size=(4, 2))
    params = dict(meta.parameters())
    params.update({f"g.{k}": v for k, v in gen.parameters().items()})
    res = T.grad_check(lambda: O.meta_elbo(meta, {"d": gen}, [("d", data, x)]).total, params)
    assert res.max_rel_error < 1e-4


def test_compiled_loss_is_mean_negative_log_density():
    arch = dict(kind="meta", posterior="gaussian", latent_dim=1, obs_dim=1, summary_dim=4, summary_hidden=[4], hidden=[4])
    meta = nets.build_inference(arch, np.random.default_rng(0))
    rng = np.random.default_rng(9)
    sets = [(f"s{i}", rng.normal(size=(10, 1)), rng.normal(size=(n, 1)), rng.uniform(size=n)) for i, n in enumerate((3, 6))]
    loss = O.compiled_loss(meta, sets).item()
    per_set = []
    for _, d, x, z in sets:
        post = nets.meta_infer(meta, d, x)
        sd = np.exp(0.5 * post.logvar.data[:, 0])
        per_set.append(-stats.norm(post.mean.data[:, 0], sd).logpdf(z).mean())
    assert loss == pytest.approx(np.mean(per_set), rel=1e-12)


def test_compiled_loss_target_count_mismatch():
    arch = dict(kind="meta", posterior="gaussian", latent_dim=1, obs_dim=1, summary_dim=4, summary_hidden=[4], hidden=[4])
    meta = nets.build_inference(arch, np.random.default_rng(0))
    with pytest.raises(T.DimensionError):
        O.compiled_loss(meta, [("s", np.ones((3, 1)), np.ones((2, 1)), np.ones(3))])
