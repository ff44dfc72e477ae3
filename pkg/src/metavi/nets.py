"""Inference networks, decoders and checkpoints.

A meta-inference model maps (data set, x) to a posterior as
``aggregator(concat(x, mean_j summary(x_j)))``. A plain inference model
maps x alone. Generative models pair a prior with either an MLP decoder or
a parameter-free one where z *is* the family's free parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import distributions as D
from . import framing
from . import tensor as T
from .config import ConfigError
from .tensor import Layer, Tensor

CHECKPOINT_MAGIC = b"MVI1"


def _ensure_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


@dataclass
class InputTransform:
    """Fixed (non-trainable) preprocessing applied to every observation."""

    kind: str = "none"  # none | log | symlog
    shift: float = 0.0
    scale: float = 1.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "log":
            x = np.log(x)
        elif self.kind == "symlog":
            # sign(x) log(1 + |x|): invertible, tames heavy right tails
            x = np.sign(x) * np.log1p(np.abs(x))
        elif self.kind != "none":
            raise ConfigError(f"unknown input transform {self.kind!r}")
        return (x - self.shift) / self.scale

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shift": self.shift, "scale": self.scale}


# -- inference side --------------------------------------------------------------------


@dataclass
class SummaryNet:
    layers: list[Layer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def pool(self, rows: np.ndarray, seg: np.ndarray, n_seg: int) -> Tensor:
        """Mean of per-element features within each of ``n_seg`` sets."""
        return T.segment_mean(T.mlp_forward(self.layers, rows), seg, n_seg)


def summarize(net: SummaryNet, dataset) -> Tensor:
    dataset = _ensure_2d(dataset)
    if dataset.shape[0] < 1:
        raise ValueError("cannot summarize an empty data set")
    if dataset.shape[1] != net.in_dim:
        raise T.DimensionError(f"observations have dim {dataset.shape[1]}, summary net expects {net.in_dim}")
    pooled = net.pool(dataset, np.zeros(dataset.shape[0], dtype=np.int64), 1)
    return T.reshape(pooled, (net.out_dim,))


def _head(out: Tensor, kind: str, latent_dim: int):
    if kind == "gaussian":
        return D.GaussianPosterior(T.columns(out, 0, latent_dim), T.columns(out, latent_dim, 2 * latent_dim))
    return D.BernoulliPosterior(out)


@dataclass
class MetaInferenceModel:
    summary: SummaryNet
    aggregator: list[Layer]
    posterior_kind: str
    latent_dim: int
    transform: InputTransform = field(default_factory=InputTransform)

    @property
    def obs_dim(self) -> int:
        return self.summary.in_dim

    def forward(self, bundle_rows, bundle_seg, n_seg: int, x, x_seg) -> Tensor:
        """Raw head outputs for query rows ``x``; ``x_seg[i]`` names the set
        (among ``n_seg`` stacked in ``bundle_rows``) that conditions row i."""
        tf = self.transform
        s = self.summary.pool(tf(bundle_rows), bundle_seg, n_seg)
        h = T.concat([tf(x), T.take_rows(s, x_seg)], axis=1)
        return T.mlp_forward(self.aggregator, h)

    def posterior(self, bundle_rows, bundle_seg, n_seg, x, x_seg):
        return _head(self.forward(bundle_rows, bundle_seg, n_seg, x, x_seg), self.posterior_kind, self.latent_dim)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.summary.layers):
            out[f"summary.{i}.weight"], out[f"summary.{i}.bias"] = layer.weight, layer.bias
        for i, layer in enumerate(self.aggregator):
            out[f"aggregator.{i}.weight"], out[f"aggregator.{i}.bias"] = layer.weight, layer.bias
        return out


def meta_infer(model: MetaInferenceModel, dataset, x):
    """Posterior for each row of ``x`` conditioned on the set ``dataset``."""
    dataset, x = _ensure_2d(dataset), _ensure_2d(x)
    if dataset.shape[0] < 1:
        raise ValueError("cannot condition on an empty data set")
    if dataset.shape[1] != model.obs_dim or x.shape[1] != model.obs_dim:
        raise T.DimensionError(
            f"model expects dim {model.obs_dim}, got data set dim {dataset.shape[1]} and x dim {x.shape[1]}"
        )
    return model.posterior(
        dataset, np.zeros(dataset.shape[0], dtype=np.int64), 1, x, np.zeros(x.shape[0], dtype=np.int64)
    )


@dataclass
class InferenceModel:
    layers: list[Layer]
    posterior_kind: str
    latent_dim: int
    transform: InputTransform = field(default_factory=InputTransform)

    @property
    def obs_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    def forward(self, x) -> Tensor:
        return T.mlp_forward(self.layers, self.transform(_ensure_2d(x)))

    def posterior(self, x):
        return _head(self.forward(x), self.posterior_kind, self.latent_dim)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"encoder.{i}.weight"], out[f"encoder.{i}.bias"] = layer.weight, layer.bias
        return out


def infer(model: InferenceModel, x):
    return model.posterior(x)


# -- generative side ----------------------------------------------------------------------


@dataclass
class GenerativeModel:
    """p(z) p(x|z). ``decoder is None`` means z is the family parameter."""

    family: D.Family
    latent: str  # binary | continuous
    latent_dim: int
    obs_dim: int
    decoder: list[Layer] | None = None
    prior_std: float = 1.0

    def __post_init__(self):
        if self.latent not in ("binary", "continuous"):
            raise ConfigError(f"latent must be binary or continuous, got {self.latent!r}")
        if self.decoder is None and self.family.tag in ("gaussian-full",):
            raise ConfigError("gaussian-full needs a decoder")
        if self.decoder is None and self.latent_dim != 1:
            raise ConfigError("parameter-free decoders take a 1-D latent")

    def n_parameters(self) -> int:
        if self.decoder is None:
            return 0
        return sum(p.data.size for p in T.layer_params(self.decoder))

    def parameters(self, prefix: str = "decoder") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.decoder or []):
            out[f"{prefix}.{i}.weight"], out[f"{prefix}.{i}.bias"] = layer.weight, layer.bias
        return out

    def decode_tensor(self, z) -> Tensor:
        """Differentiable likelihood parameters for latent rows ``z``.

        Returns the linked free parameter for parameter-free models, the
        decoder mean for Gaussian likelihoods, and logits for Bernoulli.
        """
        z = T.as_tensor(z)
        if z.ndim == 1:
            z = T.reshape(z, (z.shape[0], 1)) if self.latent_dim == 1 else T.reshape(z, (1, z.shape[0]))
        if z.shape[1] != self.latent_dim:
            raise T.DimensionError(f"latent has dim {z.shape[1]}, decoder expects {self.latent_dim}")
        if self.decoder is None:
            return D.link(self.family.tag, z)
        return T.mlp_forward(self.decoder, z)

    def loglik(self, x: np.ndarray, z) -> Tensor:
        """Row-wise log p(x | z), shape (B, 1)."""
        if self.family.tag == "bernoulli" and self.decoder is None:
            # the Bernoulli log-likelihood consumes logits, so skip the link
            z = T.as_tensor(z)
            return D.loglik(self.family, x, z if z.ndim == 2 else T.reshape(z, (z.shape[0], 1)))
        if self.decoder is None and D.LINKS.get(self.family.tag) == "softplus":
            # log(rate) straight from the raw latent: no underflow, no flat region
            raw = T.as_tensor(z)
            raw = raw if raw.ndim == 2 else T.reshape(raw, (raw.shape[0], 1))
            return D.loglik(self.family, x, T.softplus(raw), log_param=T.log_softplus(raw))
        return D.loglik(self.family, x, self.decode_tensor(z))


def decode(model: GenerativeModel, z) -> D.DistParams:
    z = np.asarray(z, dtype=np.float64)
    out = model.decode_tensor(z).data.reshape(-1)
    if model.family.tag == "bernoulli" and model.decoder is not None:
        out = T.np_sigmoid(out)
    return D.DistParams(model.family, out)


# -- construction from descriptors ---------------------------------------------------------


def _sizes(n_in: int, hidden, n_out: int) -> list[int]:
    return [n_in, *hidden, n_out]


def build_inference(arch: dict, rng: np.random.Generator):
    kind = arch["kind"]
    post = arch["posterior"]
    latent = arch["latent_dim"]
    out_dim = 2 * latent if post == "gaussian" else 1
    if post == "bernoulli" and latent != 1:
        raise ConfigError("bernoulli posteriors are 1-D")
    tf = InputTransform(**arch.get("transform", {}))
    obs = arch["obs_dim"]
    if kind == "meta":
        sdim = arch["summary_dim"]
        summary = SummaryNet(
            T.init_mlp(rng, _sizes(obs, arch["summary_hidden"], sdim), arch.get("summary_activation", "leaky-relu"), prefix="summary.")
        )
        agg = T.init_mlp(rng, _sizes(obs + sdim, arch["hidden"], out_dim), arch.get("hidden_activation", "relu"), prefix="aggregator.")
        return MetaInferenceModel(summary, agg, post, latent, tf)
    if kind == "single":
        layers = T.init_mlp(rng, _sizes(obs, arch["hidden"], out_dim), arch.get("hidden_activation", "relu"), prefix="encoder.")
        return InferenceModel(layers, post, latent, tf)
    raise ConfigError(f"unknown inference kind {kind!r}")


def build_generative(arch: dict, rng: np.random.Generator) -> GenerativeModel:
    fam = D.Family(arch["family"], dict(arch.get("constants", {})))
    latent_dim = arch["latent_dim"]
    decoder = None
    if arch.get("decoder_hidden") is not None:
        out_dim = arch["obs_dim"]
        decoder = T.init_mlp(rng, _sizes(latent_dim, arch["decoder_hidden"], out_dim), arch.get("hidden_activation", "relu"))
    return GenerativeModel(fam, arch["latent"], latent_dim, arch["obs_dim"], decoder, arch.get("prior_std", 1.0))


# -- checkpoints ----------------------------------------------------------------------------


@dataclass
class Checkpoint:
    architecture: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, Any] = field(default_factory=dict)
    rng_seed: int = 0
    rng_state: dict | None = None
    step: int = 0
    format_version: int = framing.FORMAT_VERSION
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blocks = {f"param/{k}": v for k, v in ckpt.params.items()}
    opt_meta = {}
    for group, st in ckpt.optimizer.items():
        opt_meta[group] = {k: st[k] for k in ("lr", "beta1", "beta2", "eps", "t")}
        for which in ("m", "v"):
            for name, arr in st.get(which, {}).items():
                blocks[f"adam/{group}/{which}/{name}"] = arr
    header = {
        "architecture": ckpt.architecture,
        "optimizer": opt_meta,
        "rng_seed": int(ckpt.rng_seed),
        "rng_state": ckpt.rng_state,
        "step": int(ckpt.step),
        "extra": ckpt.extra,
    }
    framing.write(path, CHECKPOINT_MAGIC, header, blocks)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, blocks = framing.read(path, CHECKPOINT_MAGIC)
    params = {k[len("param/") :]: v for k, v in blocks.items() if k.startswith("param/")}
    optimizer: dict[str, Any] = {}
    for group, meta in header["optimizer"].items():
        optimizer[group] = {**meta, "m": {}, "v": {}}
    for k, v in blocks.items():
        if k.startswith("adam/"):
            _, group, which, name = k.split("/", 3)
            optimizer[group][which][name] = v
    return Checkpoint(
        architecture=header["architecture"],
        params=params,
        optimizer=optimizer,
        rng_seed=header["rng_seed"],
        rng_state=header["rng_state"],
        step=header["step"],
        extra=header.get("extra", {}),
    )
