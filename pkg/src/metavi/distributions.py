"""One-parameter exponential families, Bernoulli, and diagonal Gaussians.

Numeric densities and samplers work on numpy arrays; :func:`loglik` and the
posterior helpers build the same quantities out of :mod:`metavi.tensor` ops
so they can sit inside an objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import tensor as T
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)

FAMILY_TAGS = (
    "gaussian-fixed-var",
    "log-normal-fixed-var",
    "exponential",
    "beta-symmetric",
    "laplace-fixed-loc",
    "weibull-fixed-scale",
    "bernoulli",
    "gaussian-full",
)

DEFAULT_CONSTANTS = {
    "gaussian-fixed-var": {"variance": 0.1},
    "log-normal-fixed-var": {"variance": 0.1},
    "laplace-fixed-loc": {"loc": 0.0},
    "weibull-fixed-scale": {"scale": 1.0},
}

# which link maps an unconstrained latent onto the free parameter
LINKS = {
    "gaussian-fixed-var": "identity",
    "log-normal-fixed-var": "identity",
    "exponential": "softplus",
    "beta-symmetric": "softplus",
    "laplace-fixed-loc": "softplus",
    "weibull-fixed-scale": "softplus",
    "bernoulli": "sigmoid",
}


class SupportError(ValueError):
    pass


class FamilyError(ValueError):
    pass


@dataclass(frozen=True)
class Family:
    tag: str
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in FAMILY_TAGS:
            raise FamilyError(f"unknown family {self.tag!r}")
        merged = {**DEFAULT_CONSTANTS.get(self.tag, {}), **self.constants}
        object.__setattr__(self, "constants", merged)
        for key in ("variance", "scale"):
            if key in merged and not merged[key] > 0:
                raise FamilyError(f"{self.tag}: {key} must be positive, got {merged[key]}")

    def __hash__(self):
        return hash((self.tag, tuple(sorted(self.constants.items()))))


def family(tag: str, **constants) -> Family:
    return Family(tag, constants)


@dataclass
class DistParams:
    family: Family
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=np.float64))
        tag = self.family.tag
        if not np.all(np.isfinite(self.theta)):
            raise FamilyError(f"{tag}: non-finite parameter")
        if tag in ("exponential", "beta-symmetric", "laplace-fixed-loc", "weibull-fixed-scale") and np.any(self.theta <= 0):
            raise FamilyError(f"{tag}: parameter must be positive, got {self.theta}")
        if tag == "bernoulli" and np.any((self.theta <= 0) | (self.theta >= 1)):
            raise FamilyError(f"bernoulli: probability must lie in (0, 1), got {self.theta}")
        if tag == "gaussian-full" and (self.theta.size % 2 or np.any(self.theta[self.theta.size // 2 :] <= 0)):
            raise FamilyError("gaussian-full: theta is [means..., variances...] with positive variances")


# -- links -------------------------------------------------------------------------


# keeps log(rate) finite when softplus underflows for very negative inputs
POSITIVE_FLOOR = 1e-12


def positivity_link(raw):
    """softplus(raw) = log(1 + e^raw), stable for large |raw|, floored at 1e-12."""
    if isinstance(raw, Tensor):
        return T.softplus(raw) + POSITIVE_FLOOR
    return T.np_softplus(np.asarray(raw, dtype=np.float64)) + POSITIVE_FLOOR


def link(tag: str, raw):
    name = LINKS.get(tag, "identity")
    is_tensor = isinstance(raw, Tensor)
    if name == "identity":
        return raw
    if name == "softplus":
        return positivity_link(raw)
    return T.sigmoid(raw) if is_tensor else T.np_sigmoid(np.asarray(raw, dtype=np.float64))


# -- numeric densities ------------------------------------------------------------------


def _check_support(tag: str, x: np.ndarray) -> None:
    bad = None
    if tag in ("log-normal-fixed-var", "weibull-fixed-scale") and np.any(x <= 0):
        bad = "positive"
    elif tag == "exponential" and np.any(x < 0):
        bad = "non-negative"
    elif tag == "beta-symmetric" and np.any((x <= 0) | (x >= 1)):
        bad = "in (0, 1)"
    elif tag == "bernoulli" and np.any((x != 0) & (x != 1)):
        bad = "0 or 1"
    if bad:
        raise SupportError(f"{tag}: observations must be {bad}")


def log_prob(params: DistParams, x) -> float:
    """Log density (or mass) of ``x``, summed over its i.i.d. components."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    tag = params.family.tag
    c = params.family.constants
    th = params.theta
    _check_support(tag, x)
    if tag == "gaussian-fixed-var":
        var = c["variance"]
        lp = -0.5 * (LOG_2PI + math.log(var)) - (x - th) ** 2 / (2 * var)
    elif tag == "gaussian-full":
        d = th.size // 2
        mean, var = th[:d], th[d:]
        lp = -0.5 * (LOG_2PI + np.log(var)) - (x - mean) ** 2 / (2 * var)
    elif tag == "log-normal-fixed-var":
        var = c["variance"]
        lx = np.log(x)
        lp = -lx - 0.5 * (LOG_2PI + math.log(var)) - (lx - th) ** 2 / (2 * var)
    elif tag == "exponential":
        lp = np.log(th) - th * x
    elif tag == "beta-symmetric":
        a = th
        lp = (a - 1) * (np.log(x) + np.log1p(-x)) - (2 * special.gammaln(a) - special.gammaln(2 * a))
    elif tag == "laplace-fixed-loc":
        b = th
        lp = -np.log(2 * b) - np.abs(x - c["loc"]) / b
    elif tag == "weibull-fixed-scale":
        k, lam = th, c["scale"]
        z = x / lam
        lp = np.log(k / lam) + (k - 1) * np.log(z) - z**k
    elif tag == "bernoulli":
        p = th
        lp = x * np.log(p) + (1 - x) * np.log1p(-p)
    else:  # pragma: no cover - guarded by Family
        raise FamilyError(tag)
    return float(np.sum(np.broadcast_to(lp, np.broadcast_shapes(np.shape(lp), x.shape))))


# -- samplers ----------------------------------------------------------------------------


def _uniform_open(rng: np.random.Generator, size) -> np.ndarray:
    # (0, 1]: safe inside log
    return 1.0 - rng.random(size)


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    """Box-Muller transform of two uniform streams."""
    n = int(np.prod(size)) if np.ndim(size) else int(size)
    m = (n + 1) // 2
    u1 = _uniform_open(rng, m)
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
    return z.reshape(size)


def sample_gamma(rng: np.random.Generator, shape: float, size) -> np.ndarray:
    """Marsaglia-Tsang squeeze/rejection sampler for Gamma(shape, 1)."""
    n = int(np.prod(size)) if np.ndim(size) else int(size)
    if shape < 1.0:
        g = sample_gamma(rng, shape + 1.0, n)
        return (g * _uniform_open(rng, n) ** (1.0 / shape)).reshape(size)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        x = standard_normal(rng, todo.size)
        v = (1.0 + c * x) ** 3
        u = _uniform_open(rng, todo.size)
        with np.errstate(invalid="ignore", divide="ignore"):
            ok = (v > 0) & (np.log(u) < 0.5 * x * x + d - d * v + d * np.log(np.where(v > 0, v, 1.0)))
        out[todo[ok]] = d * v[ok]
        todo = todo[~ok]
    return out.reshape(size)


def sample(params: DistParams, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw i.i.d. observations; ``size`` defaults to the parameter's shape."""
    tag = params.family.tag
    c = params.family.constants
    th = params.theta
    if size is None:
        size = th.shape if tag != "gaussian-full" else (th.size // 2,)
    size = (size,) if np.isscalar(size) else tuple(size)
    if tag == "gaussian-fixed-var":
        return th + math.sqrt(c["variance"]) * standard_normal(rng, size)
    if tag == "gaussian-full":
        d = th.size // 2
        return th[:d] + np.sqrt(th[d:]) * standard_normal(rng, size)
    if tag == "log-normal-fixed-var":
        return np.exp(th + math.sqrt(c["variance"]) * standard_normal(rng, size))
    if tag == "exponential":
        return -np.log(_uniform_open(rng, size)) / th
    if tag == "weibull-fixed-scale":
        return c["scale"] * (-np.log(_uniform_open(rng, size))) ** (1.0 / th)
    if tag == "laplace-fixed-loc":
        u = rng.random(size) - 0.5
        u = np.where(u == -0.5, -0.5 + 1e-300, u)
        return c["loc"] - th * np.sign(u) * np.log1p(-2.0 * np.abs(u))
    if tag == "beta-symmetric":
        a = float(np.ravel(th)[0])
        g1 = sample_gamma(rng, a, size)
        g2 = sample_gamma(rng, a, size)
        return g1 / (g1 + g2)
    if tag == "bernoulli":
        return (rng.random(size) < th).astype(np.float64)
    raise FamilyError(tag)  # pragma: no cover


def sample_uniform(rng: np.random.Generator, low: float, high: float, size=None):
    if high < low:
        raise ValueError(f"empty range [{low}, {high}]")
    if high == low:
        return np.full(size, float(low)) if size is not None else float(low)
    return rng.uniform(low, high, size)


# -- differentiable pieces ------------------------------------------------------------------


def loglik(fam: Family, x: np.ndarray, param: Tensor, log_param: Tensor | None = None) -> Tensor:
    """Row-wise log-likelihood of observations ``x`` (B, k) given linked
    parameters ``param`` (B, 1) or (B, k). Returns shape (B, 1).

    ``log_param``, when given, replaces ``log(param)`` for the positive-parameter
    families; pass it when ``param`` may underflow.
    """
    tag = fam.tag
    c = fam.constants
    x = np.asarray(x, dtype=np.float64)
    if log_param is None and tag in ("exponential", "laplace-fixed-loc", "weibull-fixed-scale"):
        log_param = T.log(param)
    if tag == "gaussian-fixed-var":
        var = c["variance"]
        lp = -0.5 * (LOG_2PI + math.log(var)) - T.square(T.sub(x, param)) * (1.0 / (2 * var))
    elif tag == "log-normal-fixed-var":
        var = c["variance"]
        lx = np.log(x)
        lp = (-lx - 0.5 * (LOG_2PI + math.log(var))) - T.square(T.sub(lx, param)) * (1.0 / (2 * var))
    elif tag == "exponential":
        lp = T.sub(log_param, T.mul(param, x))
    elif tag == "beta-symmetric":
        s = np.log(x) + np.log1p(-x)
        lp = T.mul(param - 1.0, s) - (2.0 * T.lgamma(param) - T.lgamma(2.0 * param))
    elif tag == "laplace-fixed-loc":
        lp = (-math.log(2.0) - log_param) - T.mul(np.abs(x - c["loc"]), T.exp(-log_param))
    elif tag == "weibull-fixed-scale":
        z = x / c["scale"]
        lp = (log_param - math.log(c["scale"])) + T.mul(param - 1.0, np.log(z)) - T.power(z, param)
    elif tag == "bernoulli":
        # ``param`` is a logit here: x*log(p) + (1-x)*log(1-p)
        lp = T.mul(x, T.log_sigmoid(param)) + T.mul(1.0 - x, T.log_sigmoid(-param))
    else:
        raise FamilyError(f"loglik not defined for {tag}")
    return T.tsum(lp, axis=1) if lp.ndim == 2 else lp


@dataclass
class GaussianPosterior:
    mean: Tensor
    logvar: Tensor


@dataclass
class BernoulliPosterior:
    logit: Tensor


def reparam_sample(post: GaussianPosterior, noise) -> Tensor:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != post.mean.shape:
        raise T.DimensionError(f"noise shape {noise.shape} != mean shape {post.mean.shape}")
    return post.mean + T.exp(post.logvar * 0.5) * noise


def kl_diag_gaussians(q: GaussianPosterior, p: GaussianPosterior) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    qm, qv = T.as_tensor(q.mean), T.as_tensor(q.logvar)
    pm, pv = T.as_tensor(p.mean), T.as_tensor(p.logvar)
    if qm.shape[-1:] != pm.shape[-1:]:
        raise T.DimensionError(f"dimension mismatch {qm.shape} vs {pm.shape}")
    terms = (pv - qv) + T.div(T.exp(qv) + T.square(qm - pm), T.exp(pv)) - 1.0
    if terms.ndim <= 1:
        return T.tsum(terms) * 0.5
    return T.tsum(terms, axis=terms.ndim - 1) * 0.5


def gaussian_logpdf(z, post: GaussianPosterior) -> Tensor:
    """log N(z; mean, exp(logvar)), summed over the last axis."""
    d = T.sub(z, post.mean)
    lp = -0.5 * LOG_2PI - 0.5 * post.logvar - T.div(T.square(d), T.exp(post.logvar)) * 0.5
    return T.tsum(lp, axis=lp.ndim - 1) if lp.ndim > 1 else T.tsum(lp)
