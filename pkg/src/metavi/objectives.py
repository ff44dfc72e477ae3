"""Training objectives. Every bound is returned as a quantity to *maximise*;
the compiled-inference loss is a quantity to minimise."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import distributions as D
from . import tensor as T
from .nets import ConfigError, GenerativeModel, InferenceModel, MetaInferenceModel, meta_infer
from .tensor import Tensor

LOG_HALF = math.log(0.5)


@dataclass
class LossBreakdown:
    total: Tensor
    recon: Tensor
    kl: Tensor
    components: list[float] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {"total": self.total.item(), "recon": self.recon.item(), "kl": self.kl.item()}


class ConditionedInference:
    """A meta-inference model with its data set frozen in, usable anywhere a
    singly-amortized model is expected: f(x) := g(D, x)."""

    def __init__(self, meta: MetaInferenceModel, dataset):
        self.meta = meta
        self.dataset = np.asarray(dataset, dtype=np.float64)
        self.posterior_kind = meta.posterior_kind
        self.latent_dim = meta.latent_dim

    def posterior(self, x):
        return meta_infer(self.meta, self.dataset, x)


def _prior(gen: GenerativeModel, shape) -> D.GaussianPosterior:
    lv = 2.0 * math.log(gen.prior_std)
    return D.GaussianPosterior(Tensor(np.zeros(shape)), Tensor(np.full(shape, lv)))


def _gaussian_terms(post: D.GaussianPosterior, gen: GenerativeModel, x: np.ndarray, noise: np.ndarray):
    if gen.latent != "continuous":
        raise ConfigError("reparameterised ELBO needs a continuous latent")
    z = D.reparam_sample(post, noise)
    recon = gen.loglik(x, z)
    kl = D.kl_diag_gaussians(post, _prior(gen, post.mean.shape))
    return recon, kl


def _binary_terms(post: D.BernoulliPosterior, gen: GenerativeModel, x: np.ndarray):
    if gen.latent != "binary":
        raise ConfigError("enumerated ELBO needs a binary latent")
    logit = post.logit
    n = x.shape[0]
    params = gen.decode_tensor(np.array([[0.0], [1.0]]))
    if gen.decoder is None:
        lp0 = gen.loglik(x, np.zeros((n, 1)))
        lp1 = gen.loglik(x, np.ones((n, 1)))
    else:
        lp0 = D.loglik(gen.family, x, T.take_rows(params, np.zeros(n, dtype=np.int64)))
        lp1 = D.loglik(gen.family, x, T.take_rows(params, np.ones(n, dtype=np.int64)))
    q1, q0 = T.sigmoid(logit), T.sigmoid(-logit)
    lq1, lq0 = T.log_sigmoid(logit), T.log_sigmoid(-logit)
    recon = q0 * lp0 + q1 * lp1
    kl = q0 * (lq0 - LOG_HALF) + q1 * (lq1 - LOG_HALF)
    return recon, kl


def _finish(recon: Tensor, kl: Tensor) -> LossBreakdown:
    r, k = T.tmean(recon), T.tmean(kl)
    return LossBreakdown(r - k, r, k)


def elbo_mc(inf, gen: GenerativeModel, x, noise) -> LossBreakdown:
    """Single-sample reparameterised ELBO with an analytic KL, averaged over rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    post = inf.posterior(x)
    if not isinstance(post, D.GaussianPosterior):
        raise ConfigError("elbo_mc needs a Gaussian posterior")
    recon, kl = _gaussian_terms(post, gen, x, np.asarray(noise, dtype=np.float64).reshape(post.mean.shape))
    return _finish(recon, kl)


def elbo_enumerated(inf, gen: GenerativeModel, x) -> LossBreakdown:
    """Exact ELBO for a binary latent: sum over z in {0, 1}, no sampling."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    post = inf.posterior(x)
    if not isinstance(post, D.BernoulliPosterior):
        raise ConfigError("elbo_enumerated needs a Bernoulli posterior")
    recon, kl = _binary_terms(post, gen, x)
    return _finish(recon, kl)


def _stack(batch: Sequence[tuple]):
    bundles, xs = [], []
    bseg, xseg = [], []
    for s, item in enumerate(batch):
        bundle, x = np.atleast_2d(item[1]), np.atleast_2d(item[2])
        if bundle.shape[0] < 1:
            raise ValueError(f"data set {item[0]!r} has an empty bundle")
        bundles.append(bundle)
        xs.append(x)
        bseg.append(np.full(bundle.shape[0], s, dtype=np.int64))
        xseg.append(np.full(x.shape[0], s, dtype=np.int64))
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])
    return np.concatenate(bundles), np.concatenate(bseg), np.concatenate(xs), np.concatenate(xseg), bounds


def meta_elbo(
    meta: MetaInferenceModel,
    gens: Mapping,
    batch: Sequence[tuple],
    noise: np.ndarray | None = None,
) -> LossBreakdown:
    """Average over data sets of the per-set ELBO with q = g(D_i, x).

    ``batch`` holds ``(dataset_id, bundle, x)`` triples; ``noise`` (Gaussian
    posteriors only) is one standard-normal row per stacked x row.
    """
    for item in batch:
        if item[0] not in gens:
            raise ConfigError(f"no generative model for data set {item[0]!r}")
    rows, bseg, x, xseg, bounds = _stack(batch)
    out = meta.forward(rows, bseg, len(batch), x, xseg)
    recons, kls, comps = [], [], []
    for s, item in enumerate(batch):
        lo, hi = bounds[s], bounds[s + 1]
        part = T.take_rows(out, np.arange(lo, hi)) if len(batch) > 1 else out
        gen = gens[item[0]]
        xs = x[lo:hi]
        if meta.posterior_kind == "bernoulli":
            recon, kl = _binary_terms(D.BernoulliPosterior(part), gen, xs)
        else:
            if noise is None:
                raise ValueError("Gaussian posteriors need reparameterisation noise")
            post = D.GaussianPosterior(T.columns(part, 0, meta.latent_dim), T.columns(part, meta.latent_dim, 2 * meta.latent_dim))
            recon, kl = _gaussian_terms(post, gen, xs, np.asarray(noise)[lo:hi].reshape(hi - lo, meta.latent_dim))
        r, k = T.tmean(recon), T.tmean(kl)
        recons.append(r)
        kls.append(k)
        comps.append(float(r.data - k.data))
    m = 1.0 / len(batch)
    recon = _tree_sum(recons) * m
    kl = _tree_sum(kls) * m
    return LossBreakdown(recon - kl, recon, kl, comps)


def _tree_sum(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def compiled_loss(meta: MetaInferenceModel, batch: Sequence[tuple]) -> Tensor:
    """Mean of -log q(z_true | D_i, x) over ``(id, bundle, x, z)`` items."""
    if meta.posterior_kind != "gaussian":
        raise ConfigError("compiled inference uses a Gaussian posterior")
    rows, bseg, x, xseg, bounds = _stack(batch)
    z = np.concatenate([np.asarray(item[3], dtype=np.float64).reshape(-1, meta.latent_dim) for item in batch])
    if z.shape[0] != x.shape[0]:
        raise T.DimensionError(f"{z.shape[0]} targets for {x.shape[0]} observations")
    out = meta.forward(rows, bseg, len(batch), x, xseg)
    post = D.GaussianPosterior(T.columns(out, 0, meta.latent_dim), T.columns(out, meta.latent_dim, 2 * meta.latent_dim))
    nll = -D.gaussian_logpdf(z, post)
    # per-set means, then the mean over sets
    counts = np.diff(bounds).astype(np.float64)
    w = (1.0 / (counts * len(batch)))[xseg][:, None]
    return T.tsum(nll * w)


def compiled_loss_single(inf: InferenceModel, x, z) -> Tensor:
    """Compiled-inference loss for a singly-amortised model."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    post = inf.posterior(x)
    z = np.asarray(z, dtype=np.float64).reshape(post.mean.shape)
    return T.tmean(-D.gaussian_logpdf(z, post))
