"""Training loops and evaluation metrics for the four demos.

``train`` turns an :class:`ExperimentConfig` plus a seed into a trained
model bundle, a checkpoint and a :class:`MetricsRecord`. The ``eval_*``
functions take that bundle (or one rebuilt from a checkpoint) and are pure
functions of their seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from . import datagen
from . import distributions as D
from . import nets
from . import objectives as O
from . import tensor as T
from .config import VAE_STATISTIC_RANGES, ConfigError, ExperimentConfig
from .datagen import DatasetBundle, MetaDataset, stream


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int, checkpoint_path: str | None = None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path


# -- metrics -----------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    run_id: str
    epochs: list[dict] = field(default_factory=list)
    final: dict[str, dict] = field(default_factory=dict)
    wall_time: float = 0.0

    def log_epoch(self, epoch: int, step: int, values: dict[str, float]) -> None:
        self.epochs.append({"epoch": epoch, "step": step, **values})

    def add(self, name: str, value, seed: int) -> None:
        if name in self.final:
            raise ValueError(f"metric {name!r} already recorded")
        if isinstance(value, np.ndarray):
            value = value.tolist()
        elif isinstance(value, np.generic):
            value = value.item()
        self.final[name] = {"value": value, "seed": int(seed)}

    def value(self, name: str):
        return self.final[name]["value"]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "step", "total", "recon", "kl"])
        for row in self.epochs:
            w.writerow([row["epoch"], row["step"], repr(row["total"]), repr(row["recon"]), repr(row["kl"])])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"run_id": self.run_id, "metrics": self.final}

    def write(self, directory) -> dict[str, Path]:
        """Persist ``metrics.csv`` and ``summary.json``; wall time goes to
        ``timing.json`` so the other two stay byte-reproducible."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "metrics": directory / "metrics.csv",
            "summary": directory / "summary.json",
            "timing": directory / "timing.json",
        }
        paths["metrics"].write_text(self.csv_text())
        paths["summary"].write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        paths["timing"].write_text(json.dumps({"wall_time": self.wall_time}) + "\n")
        return paths


# -- model bundles -----------------------------------------------------------------------------


@dataclass
class ModelBundle:
    """Everything needed to evaluate a trained run."""

    kind: str
    model: str
    inference: object  # MetaInferenceModel | InferenceModel
    generatives: dict[str, nets.GenerativeModel]
    architecture: dict

    @property
    def is_meta(self) -> bool:
        return isinstance(self.inference, nets.MetaInferenceModel)

    def named_parameters(self) -> dict[str, T.Tensor]:
        out = {f"inference/{k}": v for k, v in self.inference.parameters().items()}
        for gid, gen in self.generatives.items():
            for k, v in gen.parameters().items():
                out[f"gen/{gid}/{k}"] = v
        return out


def _inference_arch(cfg: ExperimentConfig, obs_dim: int) -> dict:
    a = cfg.architecture
    posterior = {"mog": "bernoulli"}.get(cfg.kind, "gaussian")
    arch = {
        "kind": "meta" if cfg.model == "meta" else "single",
        "posterior": posterior,
        "latent_dim": a.get("latent_dim", 1),
        "obs_dim": obs_dim,
        "hidden": list(a["hidden"]),
    }
    if cfg.model == "meta":
        arch.update(summary_dim=a["summary_dim"], summary_hidden=list(a["summary_hidden"]))
    if "transform" in a:
        arch["transform"] = dict(a["transform"])
    return arch


def _generative_arch(cfg: ExperimentConfig, bundle: DatasetBundle) -> dict | None:
    a = cfg.architecture
    if cfg.kind == "mog":
        return {
            "family": "gaussian-fixed-var",
            "constants": {"variance": cfg.generator["variance"]},
            "latent": "binary",
            "latent_dim": 1,
            "obs_dim": 2,
            "decoder_hidden": list(a["decoder_hidden"]),
        }
    if cfg.kind == "expfam":
        return {
            "family": bundle.provenance["family"],
            "latent": "continuous",
            "latent_dim": 1,
            "obs_dim": bundle.observations.shape[1],
            "decoder_hidden": None,
            "prior_std": a["prior_std"],
        }
    if cfg.kind == "mnist-pairs":
        return {
            "family": "bernoulli",
            "latent": "continuous",
            "latent_dim": a["latent_dim"],
            "obs_dim": bundle.observations.shape[1],
            "decoder_hidden": list(a["decoder_hidden"]),
        }
    return None  # physics: compiled inference needs no decoder


def build_models(cfg: ExperimentConfig, data: MetaDataset, seed: int) -> ModelBundle:
    init = stream(seed, "init")
    obs_dim = data.train[0].observations.shape[1]
    inf_arch = _inference_arch(cfg, obs_dim)
    inference = nets.build_inference(inf_arch, init)
    gens, gen_archs = {}, {}
    for b in data.train:
        ga = _generative_arch(cfg, b)
        if ga is not None:
            gens[b.id] = nets.build_generative(ga, init)
            gen_archs[b.id] = ga
    arch = {"kind": cfg.kind, "model": cfg.model, "inference": inf_arch, "generative": gen_archs}
    return ModelBundle(cfg.kind, cfg.model, inference, gens, arch)


def rebuild(architecture: dict, params: dict[str, np.ndarray]) -> ModelBundle:
    """Reconstruct a model bundle from a checkpoint's architecture + params."""
    rng = np.random.default_rng(0)  # values are overwritten below
    inference = nets.build_inference(architecture["inference"], rng)
    gens = {gid: nets.build_generative(ga, rng) for gid, ga in architecture["generative"].items()}
    mb = ModelBundle(architecture["kind"], architecture["model"], inference, gens, architecture)
    named = mb.named_parameters()
    missing = set(named) - set(params)
    if missing:
        raise nets.ConfigError(f"checkpoint lacks parameters {sorted(missing)[:3]}")
    for k, t in named.items():
        if params[k].shape != t.data.shape:
            raise T.DimensionError(f"{k}: checkpoint shape {params[k].shape} != model shape {t.data.shape}")
        t.data = np.array(params[k], dtype=np.float64)
    return mb


def load_run(path) -> tuple[ModelBundle, nets.Checkpoint]:
    ckpt = nets.load_checkpoint(path)
    return rebuild(ckpt.architecture, ckpt.params), ckpt


# -- data ------------------------------------------------------------------------------------


def mnist_paths(data_dir=None) -> tuple[Path, Path] | None:
    """Locate MNIST training IDX files under ``data_dir`` or $METAVI_DATA_DIR."""
    root = data_dir or os.environ.get("METAVI_DATA_DIR")
    if not root:
        return None
    root = Path(root)
    for img, lab in (
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
    ):
        if (root / img).exists() and (root / lab).exists():
            return root / img, root / lab
    return None


def make_data(cfg: ExperimentConfig, seed: int, data_dir=None) -> MetaDataset:
    g = cfg.generator
    if cfg.kind == "mog":
        return datagen.gen_mog_meta(seed, g["n_datasets"], g["n_samples"], mean_range=tuple(g["mean_range"]), variance=g["variance"])
    if cfg.kind == "physics":
        return datagen.gen_physics_meta(seed, g["lengths"], g["angles"], g["runs_per_sim"], g["friction_prior"], g["max_mu"])
    if cfg.kind == "expfam":
        ranges = dict(g["ranges"])
        if cfg.model == "vae":
            for tag in g["family_mix"]:
                if tag not in ranges and tag in VAE_STATISTIC_RANGES:
                    ranges[tag] = VAE_STATISTIC_RANGES[tag]
        return datagen.gen_expfam_meta(
            seed, g["family_mix"], g["vec_dim"], g["n_realizations"], ranges, g["exponential_parameterization"]
        )
    if cfg.kind == "mnist-pairs":
        paths = mnist_paths(data_dir)
        if paths is None:
            raise datagen.DataError("MNIST IDX files not found; set METAVI_DATA_DIR")
        source = datagen.load_idx(*paths)
        return datagen.make_digit_pairs(source, tuple(g["held_out"]), g["n_pairs"], seed, g["max_per_digit"], g["n_unseen"])
    raise ConfigError(f"unknown kind {cfg.kind!r}", "kind")


# -- training ----------------------------------------------------------------------------------


@dataclass
class TrainResult:
    models: ModelBundle
    checkpoint: nets.Checkpoint
    metrics: MetricsRecord
    step_losses: np.ndarray
    data: MetaDataset


def _rng_state_json(rng: np.random.Generator) -> dict:
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__array__": v.tolist(), "dtype": str(v.dtype)}
        if isinstance(v, np.integer):
            return int(v)
        return v

    return conv(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    def conv(v):
        if isinstance(v, dict) and "__array__" in v:
            return np.array(v["__array__"], dtype=v["dtype"])
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    bg = np.random.Philox()
    bg.state = conv(state)
    return np.random.Generator(bg)


def steps_per_epoch(cfg: ExperimentConfig, data: MetaDataset) -> int:
    total = sum(len(b) for b in data.train)
    return max(1, math.ceil(total / cfg.optimizer["batch_size"]))


def _objective(cfg: ExperimentConfig, mb: ModelBundle, b: DatasetBundle, xi, bi, rng) -> tuple[T.Tensor, dict]:
    """Returns (loss to minimise, breakdown values)."""
    x = b.observations[xi]
    inf = mb.inference
    if cfg.kind == "physics":
        z = b.latents[xi]
        if mb.is_meta:
            loss = O.compiled_loss(inf, [(b.id, b.observations[bi], x, z)])
        else:
            loss = O.compiled_loss_single(inf, x, z)
        v = loss.item()
        return loss, {"total": -v, "recon": -v, "kl": 0.0}
    gens = mb.generatives
    if cfg.kind == "mog":
        if mb.is_meta:
            lb = O.meta_elbo(inf, gens, [(b.id, b.observations[bi], x)])
        else:
            lb = O.elbo_enumerated(inf, gens[b.id], x)
    else:
        noise = D.standard_normal(rng, (x.shape[0], inf.latent_dim))
        if mb.is_meta:
            lb = O.meta_elbo(inf, gens, [(b.id, b.observations[bi], x)], noise)
        else:
            lb = O.elbo_mc(inf, gens[b.id], x, noise)
    return -lb.total, lb.values()


def _snapshot(mb: ModelBundle, optimizers: dict[str, T.Adam]) -> tuple[dict, dict]:
    params = {k: v.data.copy() for k, v in mb.named_parameters().items()}
    opt = {}
    for group, o in optimizers.items():
        st = o.state
        opt[group] = {
            "lr": st.lr,
            "beta1": st.beta1,
            "beta2": st.beta2,
            "eps": st.eps,
            "t": st.t,
            "m": {k: v.copy() for k, v in st.m.items()},
            "v": {k: v.copy() for k, v in st.v.items()},
        }
    return params, opt


def _checkpoint(cfg, mb, optimizers, seed, rng, step) -> nets.Checkpoint:
    params, opt = _snapshot(mb, optimizers)
    return nets.Checkpoint(
        architecture=mb.architecture,
        params=params,
        optimizer=opt,
        rng_seed=seed,
        rng_state=_rng_state_json(rng),
        step=step,
        extra={"config": cfg.to_dict()},
    )


def train(
    cfg: ExperimentConfig,
    seed: int | None = None,
    out_dir=None,
    data: MetaDataset | None = None,
    max_steps: int | None = None,
    progress: Callable[[int, int, float], None] | None = None,
) -> TrainResult:
    """Train one run. ``max_steps`` truncates the schedule (tests only)."""
    seed = cfg.seeds[0] if seed is None else int(seed)
    t0 = time.perf_counter()
    data = data if data is not None else make_data(cfg, seed)
    mb = build_models(cfg, data, seed)
    rng = stream(seed, "train")
    lr = cfg.optimizer["lr"]
    dec_lr = cfg.optimizer.get("decoder_lr", lr)
    optimizers = {"inference": T.Adam(mb.inference.parameters(), lr=lr)}
    for gid, gen in mb.generatives.items():
        if gen.n_parameters():
            optimizers[f"gen:{gid}"] = T.Adam(gen.parameters(), lr=dec_lr)

    batch = cfg.optimizer["batch_size"]
    bsize = cfg.architecture.get("bundle_size", 0)
    per_epoch = steps_per_epoch(cfg, data)
    total_steps = per_epoch * cfg.epochs
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    run_id = f"{cfg.name or cfg.kind}-seed{seed}"
    metrics = MetricsRecord(run_id)
    losses = np.empty(total_steps)
    acc = {"total": 0.0, "recon": 0.0, "kl": 0.0}
    n_acc = 0
    for step in range(total_steps):
        b = data.train[int(rng.integers(len(data.train)))]
        n = len(b)
        xi = rng.choice(n, min(batch, n), replace=False)
        bi = rng.choice(n, min(bsize, n), replace=False) if mb.is_meta else None
        with T.Tape() as tape:
            loss, vals = _objective(cfg, mb, b, xi, bi, rng)
        if not math.isfinite(loss.item()):
            _abort(cfg, mb, optimizers, seed, rng, step, out_dir, "loss is not finite")
        tape.backward(loss)
        try:
            optimizers["inference"].step()
            group = f"gen:{b.id}"
            if group in optimizers:
                optimizers[group].step()
        except T.NonFiniteGradientError as e:
            _abort(cfg, mb, optimizers, seed, rng, step, out_dir, str(e))
        losses[step] = loss.item()
        for k in acc:
            acc[k] += vals[k]
        n_acc += 1
        if (step + 1) % per_epoch == 0 or step + 1 == total_steps:
            metrics.log_epoch(math.ceil((step + 1) / per_epoch), step + 1, {k: v / n_acc for k, v in acc.items()})
            acc = dict.fromkeys(acc, 0.0)
            n_acc = 0
            if progress is not None:
                progress(step + 1, total_steps, losses[step])
    ckpt = _checkpoint(cfg, mb, optimizers, seed, rng, total_steps)
    metrics.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        out = Path(out_dir)
        nets.save_checkpoint(out / "checkpoint.mvi", ckpt)
        metrics.write(out)
    return TrainResult(mb, ckpt, metrics, losses, data)


def _abort(cfg, mb, optimizers, seed, rng, step, out_dir, why: str):
    # parameters have not been touched by the failing step, so they are the
    # last good state
    path = None
    if out_dir is not None:
        path = Path(out_dir) / "last_good.mvi"
        nets.save_checkpoint(path, _checkpoint(cfg, mb, optimizers, seed, rng, step))
    raise DivergenceError(f"training diverged at step {step}: {why}", step, None if path is None else str(path))


def smoothed(losses: np.ndarray, window: int = 50) -> np.ndarray:
    if len(losses) < window:
        return np.asarray(losses, dtype=np.float64)
    c = np.cumsum(np.insert(np.asarray(losses, dtype=np.float64), 0, 0.0))
    return (c[window:] - c[:-window]) / window


# -- clustering ---------------------------------------------------------------------------------


def clustering_error(predicted, true) -> float:
    """Mismatch rate minimised over the two labelings of a binary clustering."""
    p = np.asarray(predicted).astype(np.int64).ravel()
    t = np.asarray(true).astype(np.int64).ravel()
    if p.shape != t.shape or p.size < 1:
        raise ValueError(f"need equal non-empty label vectors, got {p.shape} and {t.shape}")
    wrong = int(np.count_nonzero(p != t))
    return min(wrong, p.size - wrong) / p.size


def bayes_labels(x: np.ndarray, means: np.ndarray) -> np.ndarray:
    """Oracle labels for an equal-weight, equal-isotropic-variance mixture:
    the true posterior favours the nearer mean."""
    d = ((x[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


def bayes_error(means: np.ndarray, variance: float) -> float:
    """Expected Bayes error Phi(-d / 2 sigma) for two isotropic components."""
    d = float(np.linalg.norm(means[0] - means[1]))
    return 0.5 * math.erfc(d / (2.0 * math.sqrt(variance)) / math.sqrt(2.0))


@dataclass
class MogEval:
    mean_error: float
    errors: np.ndarray
    oracle_errors: np.ndarray


def _mog_tests(seed: int, n_mixtures: int, n_points: int, bundle_size: int, mean_range, variance):
    for i in range(n_mixtures):
        b = datagen.mog_bundle(stream(seed, "eval-mog", i), f"eval-{i}", n_points + bundle_size, mean_range, variance)
        yield b


def eval_mog(
    mb: ModelBundle,
    n_test_mixtures: int = 1000,
    seed: int = 0,
    n_points: int = 100,
    bundle_size: int = 20,
    mean_range=(-5.0, 5.0),
    variance: float = 0.1,
) -> MogEval:
    """Mean clustering error on fresh mixtures. The meta model conditions on
    ``bundle_size`` extra draws from each mixture; labels come from the
    posterior logit thresholded at 0."""
    bundles, xs, bseg, xseg, labels, oracle = [], [], [], [], [], []
    for i, b in enumerate(_mog_tests(seed, n_test_mixtures, n_points, bundle_size, mean_range, variance)):
        obs = b.observations
        bundles.append(obs[:bundle_size])
        xs.append(obs[bundle_size:])
        bseg.append(np.full(bundle_size, i, dtype=np.int64))
        xseg.append(np.full(n_points, i, dtype=np.int64))
        labels.append(b.labels[bundle_size:])
        oracle.append(clustering_error(bayes_labels(obs[bundle_size:], np.asarray(b.provenance["means"])), b.labels[bundle_size:]))
    x = np.concatenate(xs)
    if mb.is_meta:
        logit = mb.inference.forward(np.concatenate(bundles), np.concatenate(bseg), n_test_mixtures, x, np.concatenate(xseg)).data
    else:
        logit = mb.inference.forward(x).data
    pred = (logit[:, 0] > 0).astype(np.int64)
    errors = np.array(
        [clustering_error(pred[i * n_points : (i + 1) * n_points], labels[i]) for i in range(n_test_mixtures)]
    )
    return MogEval(float(np.mean(errors)), errors, np.array(oracle))


def finetune_eval(
    mb: ModelBundle,
    target: DatasetBundle,
    fractions=(0.05, 0.10, 0.15, 0.20),
    seed: int = 0,
    steps: int = 500,
    lr: float = 3e-3,
    decoder_hidden=(10, 10),
    bundle_size: int = 20,
) -> dict[float, float]:
    """Freeze the meta-inference network, fit a fresh decoder on a fraction
    of ``target`` and report clustering error on all of ``target``, with the
    fraction serving as the conditioning set."""
    if not mb.is_meta:
        raise ConfigError("fine-tuning needs a meta-inference model")
    out = {}
    n = len(target)
    for frac in fractions:
        k = int(round(frac * n))
        if k < 2:
            raise ConfigError(f"fraction {frac} of {n} points leaves fewer than 2 samples")
        rng = stream(seed, "finetune", int(round(frac * 1000)))
        sub = target.observations[rng.choice(n, k, replace=False)]
        ga = {
            "family": "gaussian-fixed-var",
            "constants": {"variance": float(target.provenance.get("variance", 0.1))},
            "latent": "binary",
            "latent_dim": 1,
            "obs_dim": target.observations.shape[1],
            "decoder_hidden": list(decoder_hidden),
        }
        gen = nets.build_generative(ga, rng)
        opt = T.Adam(gen.parameters(), lr=lr)
        gens = {"target": gen}
        for _ in range(steps):
            xi = rng.choice(k, min(20, k), replace=False)
            bi = rng.choice(k, min(bundle_size, k), replace=False)
            with T.Tape() as tape:
                lb = O.meta_elbo(mb.inference, gens, [("target", sub[bi], sub[xi])])
                loss = -lb.total
            tape.backward(loss, params=list(gen.parameters().values()))
            opt.step()
        cond = sub[: min(bundle_size, k)]
        logit = nets.meta_infer(mb.inference, cond, target.observations).logit.data[:, 0]
        out[frac] = clustering_error((logit > 0).astype(np.int64), target.labels)
    return out


# -- physics -----------------------------------------------------------------------------------


def _grid_axis(spec) -> np.ndarray:
    lo, hi, step = spec
    return np.round(np.arange(lo, hi + 0.5 * step, step), 10)


@dataclass
class PhysicsGrid:
    lengths: np.ndarray
    angles: np.ndarray
    mse: np.ndarray  # (len(lengths), len(angles))
    prior_var: np.ndarray
    region_mse: float
    region_prior_var: float
    frac_beating_prior: float

    def rows(self):
        for i, L in enumerate(self.lengths):
            for j, A in enumerate(self.angles):
                yield float(L), float(A), float(self.mse[i, j])


def eval_physics_grid(
    mb: ModelBundle,
    lengths=(2.0, 20.0, 1.0),
    angles=(5.0, 85.0, 5.0),
    runs: int = 200,
    seed: int = 0,
    bundle_size: int = 100,
    friction_prior: str = "fixed",
    max_mu: float | None = None,
    region_angles=(20.0, 70.0),
    estimator: Callable | None = None,
) -> PhysicsGrid:
    """Posterior-mean MSE of friction per (L, A) cell over ``runs`` fresh
    simulations; the meta model conditions on ``bundle_size`` further runs
    of the same simulator."""
    Ls, As = _grid_axis(lengths), _grid_axis(angles)
    mse = np.zeros((len(Ls), len(As)))
    pvar = np.zeros_like(mse)
    for i, L in enumerate(Ls):
        for j, A in enumerate(As):
            spec = datagen.InclineSpec(float(L), float(A))
            b = datagen.physics_bundle(stream(seed, "eval-physics", i, j), "cell", spec, runs + bundle_size, friction_prior, max_mu)
            obs, mu = b.observations, b.latents[:, 0]
            if estimator is not None:
                est = estimator(obs[:bundle_size], obs[bundle_size:])
            elif mb.is_meta:
                est = nets.meta_infer(mb.inference, obs[:bundle_size], obs[bundle_size:]).mean.data[:, 0]
            else:
                est = nets.infer(mb.inference, obs[bundle_size:]).mean.data[:, 0]
            mse[i, j] = float(np.mean((est - mu[bundle_size:]) ** 2))
            pvar[i, j] = b.provenance["mu_max"] ** 2 / 12.0
    cols = (As >= region_angles[0]) & (As <= region_angles[1])
    if not cols.any():
        cols = np.ones_like(cols)  # region misses the grid: summarise all of it
    return PhysicsGrid(
        Ls,
        As,
        mse,
        pvar,
        float(mse[:, cols].mean()),
        float(pvar[:, cols].mean()),
        float(np.mean(mse[:, cols] <= pvar[:, cols])),
    )


# -- exponential families ------------------------------------------------------------------------

EXPFAM_GRIDS = {
    "gaussian-fixed-var": (-10.0, 10.0, 0.1),
    "log-normal-fixed-var": (-4.0, 4.0, 0.1),
    "exponential": (0.1, 6.0, 0.1),
    "weibull-fixed-scale": (0.1, 5.0, 0.1),
    "laplace-fixed-loc": (0.1, 5.0, 0.1),
    "beta-symmetric": (0.1, 5.0, 0.1),
}

# the region each single-family meta-distribution covers
IN_META = {
    "gaussian-fixed-var": (-5.0, 5.0),
    "log-normal-fixed-var": (-2.0, 2.0),
    "exponential": (0.0, 3.0),
}


@dataclass
class ExpfamCurve:
    family: str
    grid: np.ndarray
    mse: np.ndarray
    estimates: np.ndarray


def expfam_grid(family: str, spec=None) -> np.ndarray:
    return _grid_axis(spec or EXPFAM_GRIDS[family])


def eval_expfam(
    mb: ModelBundle,
    family: str,
    grid=None,
    seed: int = 0,
    n_realizations: int = 60,
    bundle_size: int = 10,
    vec_dim: int = 20,
) -> ExpfamCurve:
    """Per grid parameter: draw fresh random vectors, estimate the parameter
    as link(posterior mean) and average the squared error."""
    grid = expfam_grid(family) if grid is None else np.asarray(grid, dtype=np.float64)
    mse = np.zeros(len(grid))
    est_mean = np.zeros(len(grid))
    for k, p in enumerate(grid):
        b = datagen.expfam_bundle(stream(seed, "eval-expfam", family, k), "grid", family, float(p), vec_dim, n_realizations + bundle_size)
        obs = b.observations
        if mb.is_meta:
            post = nets.meta_infer(mb.inference, obs[:bundle_size], obs[bundle_size:])
        else:
            post = nets.infer(mb.inference, obs[bundle_size:])
        est = D.link(family, post.mean.data[:, 0])
        mse[k] = float(np.mean((est - p) ** 2))
        est_mean[k] = float(np.mean(est))
    return ExpfamCurve(family, grid, mse, est_mean)


# -- probes -----------------------------------------------------------------------------------------


def linear_probe(features, labels, seed: int = 0, train_fraction: float = 0.8, lam: float = 1e-4) -> float:
    """Held-out accuracy of an L2-regularised logistic regression."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise T.DimensionError(f"features {X.shape} do not match {y.shape[0]} labels")
    if X.shape[0] < 10:
        raise ConfigError(f"a probe needs at least 10 items, got {X.shape[0]}")
    rng = stream(seed, "probe")
    order = rng.permutation(X.shape[0])
    n_train = int(round(train_fraction * X.shape[0]))
    tr, te = order[:n_train], order[n_train:]
    if len(np.unique(y[tr])) < 2:
        raise ConfigError("probe training split holds a single class")
    mu = X[tr].mean(axis=0)
    sd = X[tr].std(axis=0)
    sd[sd == 0] = 1.0
    Xs = (X - mu) / sd
    w, b, _ = K.logreg_fit(Xs[tr], y[tr].astype(np.float64), lam=lam)
    pred = (Xs[te] @ w + b > 0).astype(np.int64)
    return float(np.mean(pred == y[te]))


def embed(mb: ModelBundle, items: np.ndarray, pool: np.ndarray, seed: int, bundle_size: int = 10) -> np.ndarray:
    """Posterior means for ``items``; meta models condition each item on a
    fresh draw of ``bundle_size`` rows from ``pool``."""
    if not mb.is_meta:
        return nets.infer(mb.inference, items).mean.data
    rng = stream(seed, "embed")
    n = items.shape[0]
    k = min(bundle_size, pool.shape[0])
    idx = np.stack([rng.choice(pool.shape[0], k, replace=False) for _ in range(n)])
    rows = pool[idx.ravel()]
    bseg = np.repeat(np.arange(n), k)
    out = mb.inference.forward(rows, bseg, n, items, np.arange(n))
    return out.data[:, : mb.inference.latent_dim]


def eval_digit_pairs(mb: ModelBundle, bundles: Sequence[DatasetBundle], seed: int = 0, bundle_size: int = 10, max_items: int = 1000) -> dict[str, float]:
    """Linear-probe accuracy on frozen embeddings, one entry per pair."""
    out = {}
    for b in bundles:
        n = min(len(b), max_items)
        feats = embed(mb, b.observations[:n], b.observations, seed, bundle_size)
        out[b.id] = linear_probe(feats, b.labels[:n], seed)
    return out


def mean_latent_l2(mb: ModelBundle, base: DatasetBundle, variants: Sequence[DatasetBundle], seed: int = 0, bundle_size: int = 10) -> float:
    """Mean over variants of the average L2 distance between matched items'
    embeddings (each embedded with its own bundle as the conditioning set)."""
    if not variants:
        raise ValueError("need at least one variant")
    eb = embed(mb, base.observations, base.observations, seed, bundle_size)
    dists = []
    for v in variants:
        if v.observations.shape != base.observations.shape:
            raise T.DimensionError(f"variant {v.id} shape {v.observations.shape} != base {base.observations.shape}")
        ev = embed(mb, v.observations, v.observations, seed, bundle_size)
        dists.append(float(np.mean(np.linalg.norm(eb - ev, axis=1))))
    return float(np.mean(dists))


# -- evaluation driver ---------------------------------------------------------------------------------


def evaluate(mb: ModelBundle, cfg: ExperimentConfig, seed: int, data_dir=None) -> MetricsRecord:
    """Run the configured evaluation and return a record of final metrics."""
    rec = MetricsRecord(f"{cfg.name or cfg.kind}-eval-seed{seed}")
    e = cfg.eval
    if cfg.kind == "mog":
        r = eval_mog(mb, e["n_test_mixtures"], seed, e["n_points"], e["bundle_size"], tuple(e["mean_range"]), cfg.generator["variance"])
        rec.add("mean_clustering_error", r.mean_error, seed)
        rec.add("mean_oracle_error", float(np.mean(r.oracle_errors)), seed)
        rec.add("label_rule", "logit>0, permutation matched", seed)
    elif cfg.kind == "physics":
        g = eval_physics_grid(
            mb,
            tuple(e["lengths"]),
            tuple(e["angles"]),
            e["runs"],
            seed,
            cfg.architecture.get("bundle_size", 100),
            cfg.generator["friction_prior"],
            cfg.generator["max_mu"],
            tuple(e["region_angles"]),
        )
        rec.add("region_mse", g.region_mse, seed)
        rec.add("region_prior_variance", g.region_prior_var, seed)
        rec.add("fraction_beating_prior", g.frac_beating_prior, seed)
        rec.add("grid", {"lengths": g.lengths.tolist(), "angles": g.angles.tolist(), "mse": g.mse.tolist()}, seed)
    elif cfg.kind == "expfam":
        curves = {}
        for fam in EXPFAM_GRIDS:
            c = eval_expfam(mb, fam, None, seed, e["n_realizations"], e["bundle_size"], cfg.generator["vec_dim"])
            curves[fam] = {"x": c.grid.tolist(), "mse": c.mse.tolist()}
        rec.add("curves", curves, seed)
    elif cfg.kind == "mnist-pairs":
        data = make_data(cfg, seed, data_dir)
        rec.add("probe_accuracy", eval_digit_pairs(mb, data.test, seed, e["bundle_size"], e["max_items"]), seed)
    return rec
