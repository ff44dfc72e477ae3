"""Deterministic data generators for every meta-distribution, plus MNIST IDX
ingestion.

Each bundle draws from its own RNG stream derived from ``(seed, tag, index)``
so generating bundles in any order or in parallel gives identical data.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distributions as D
from . import framing

GRAVITY = 9.8
DATASET_MAGIC = b"MVD1"

# default parameter ranges for the exponential-family meta-distributions
EXPFAM_RANGES = {
    "gaussian-fixed-var": (-5.0, 5.0),
    "log-normal-fixed-var": (-2.0, 2.0),
    "exponential": (0.0, 3.0),
    "weibull-fixed-scale": (0.0, 5.0),
    "laplace-fixed-loc": (0.0, 5.0),
    "beta-symmetric": (0.0, 5.0),
}


class DataError(ValueError):
    pass


class NonSlidingError(DataError):
    pass


class IdxError(DataError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent Philox stream for ``seed`` and a path of string/int keys."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


@dataclass
class DatasetBundle:
    id: str
    observations: np.ndarray
    labels: np.ndarray | None = None
    latents: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        if self.observations.shape[0] < 1:
            raise DataError(f"bundle {self.id!r} is empty")
        n = self.observations.shape[0]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise DataError(f"bundle {self.id!r}: {self.labels.shape[0]} labels for {n} observations")
        if self.latents is not None:
            self.latents = np.asarray(self.latents, dtype=np.float64).reshape(n, -1)

    def __len__(self) -> int:
        return self.observations.shape[0]


@dataclass
class MetaDataset:
    train: list[DatasetBundle]
    test: list[DatasetBundle]
    spec: dict

    def __post_init__(self):
        overlap = {b.id for b in self.train} & {b.id for b in self.test}
        if overlap:
            raise DataError(f"train and test share bundle ids {sorted(overlap)}")

    def by_id(self) -> dict[str, DatasetBundle]:
        return {b.id: b for b in self.train + self.test}


# -- mixtures of Gaussians ---------------------------------------------------------------


def mog_bundle(rng: np.random.Generator, bundle_id: str, n_samples: int, mean_range=(-5.0, 5.0), variance=0.1):
    """Evenly mixed two-component isotropic 2-D mixture with 0/1 labels."""
    if n_samples < 2:
        raise DataError("a mixture bundle needs at least 2 samples")
    means = D.sample_uniform(rng, mean_range[0], mean_range[1], (2, 2))
    labels = np.zeros(n_samples, dtype=np.int64)
    labels[n_samples // 2 :] = 1
    labels = labels[rng.permutation(n_samples)]
    noise = D.standard_normal(rng, (n_samples, 2)) * math.sqrt(variance)
    obs = means[labels] + noise
    prov = {"generator": "mog", "means": means.tolist(), "variance": variance}
    return DatasetBundle(bundle_id, obs, labels=labels, provenance=prov)


def gen_mog_meta(
    seed: int,
    n_datasets: int,
    n_samples: int = 100,
    n_test: int = 0,
    mean_range=(-5.0, 5.0),
    test_mean_range=None,
    variance: float = 0.1,
) -> MetaDataset:
    if n_datasets < 1:
        raise DataError("need at least one training mixture")
    test_range = tuple(test_mean_range or mean_range)
    train = [mog_bundle(stream(seed, "mog", i), f"mog-{i}", n_samples, mean_range, variance) for i in range(n_datasets)]
    test = [
        mog_bundle(stream(seed, "mog-test", i), f"mog-test-{i}", n_samples, test_range, variance) for i in range(n_test)
    ]
    spec = {
        "generator": "mog",
        "seed": seed,
        "n_datasets": n_datasets,
        "n_samples": n_samples,
        "n_test": n_test,
        "mean_range": list(mean_range),
        "test_mean_range": list(test_range),
        "variance": variance,
    }
    meta = MetaDataset(train, test, spec)
    _check_collisions(meta, "means")
    return meta


def _check_collisions(meta: MetaDataset, key: str) -> None:
    seen = {json.dumps(b.provenance.get(key)) for b in meta.train}
    for b in meta.test:
        if json.dumps(b.provenance.get(key)) in seen:
            raise DataError(f"test bundle {b.id} repeats a training parameter")


# -- exponential families -----------------------------------------------------------------


def expfam_bundle(
    rng: np.random.Generator,
    bundle_id: str,
    tag: str,
    param: float,
    vec_dim: int = 20,
    n_realizations: int = 50,
    parameterization: str = "rate",
) -> DatasetBundle:
    """``n_realizations`` i.i.d. random vectors of ``vec_dim`` draws each."""
    theta = param
    if tag == "exponential" and parameterization == "scale":
        theta = 1.0 / param
    params = D.DistParams(D.Family(tag), [theta])
    obs = D.sample(params, rng, (n_realizations, vec_dim))
    prov = {"generator": "expfam", "family": tag, "param": float(param), "parameterization": parameterization}
    return DatasetBundle(bundle_id, obs, provenance=prov)


def gen_expfam_meta(
    seed: int,
    family_mix: dict[str, int] | None = None,
    vec_dim: int = 20,
    n_realizations: int = 50,
    ranges: dict | None = None,
    exponential_parameterization: str = "rate",
) -> MetaDataset:
    family_mix = dict(family_mix or {"gaussian-fixed-var": 30})
    rng_table = {**EXPFAM_RANGES, **(ranges or {})}
    if exponential_parameterization not in ("rate", "scale"):
        raise DataError(f"unknown exponential parameterization {exponential_parameterization!r}")
    if exponential_parameterization == "scale" and not ranges:
        rng_table["exponential"] = (0.0, 5.0)
    bundles = []
    for tag in sorted(family_mix):
        count = family_mix[tag]
        lo, hi = rng_table[tag]
        if hi <= lo or (tag not in ("gaussian-fixed-var", "log-normal-fixed-var") and lo < 0):
            raise DataError(f"invalid parameter range {(lo, hi)} for {tag}")
        for i in range(count):
            r = stream(seed, "expfam", tag, i)
            p = float(D.sample_uniform(r, lo, hi))
            while p <= 0 and tag not in ("gaussian-fixed-var", "log-normal-fixed-var"):
                p = float(D.sample_uniform(r, lo, hi))
            bundles.append(expfam_bundle(r, f"{tag}-{i}", tag, p, vec_dim, n_realizations, exponential_parameterization))
    spec = {
        "generator": "expfam",
        "seed": seed,
        "family_mix": family_mix,
        "vec_dim": vec_dim,
        "n_realizations": n_realizations,
        "ranges": {k: list(rng_table[k]) for k in family_mix},
        "exponential_parameterization": exponential_parameterization,
    }
    return MetaDataset(bundles, [], spec)


# -- inclined planes -----------------------------------------------------------------------------


@dataclass(frozen=True)
class InclineSpec:
    length: float
    angle: float  # degrees
    gravity: float = GRAVITY

    def __post_init__(self):
        if not self.length > 0:
            raise DataError(f"plane length must be positive, got {self.length}")
        if not 0.0 < self.angle < 90.0:
            raise DataError(f"angle must lie strictly between 0 and 90 degrees, got {self.angle}")

    @property
    def radians(self) -> float:
        return math.radians(self.angle)


def incline_acceleration(spec: InclineSpec, mu):
    a = np.radians(spec.angle)
    return spec.gravity * (np.sin(a) - np.asarray(mu) * np.cos(a))


def simulate_incline(spec: InclineSpec, mu):
    """Descent time from rest: t = sqrt(2L / (g (sin A - mu cos A)))."""
    mu_arr = np.asarray(mu, dtype=np.float64)
    if np.any(mu_arr < 0):
        raise DataError("friction coefficient must be non-negative")
    if np.any(mu_arr >= math.tan(spec.radians)):
        raise NonSlidingError(f"mu >= tan({spec.angle} deg): the box does not slide")
    t = np.sqrt(2.0 * spec.length / incline_acceleration(spec, mu_arr))
    return float(t) if np.ndim(mu) == 0 else t


DEFAULT_MAX_MU = 0.9 * math.tan(math.radians(20.0))


def friction_bound(angle: float, prior: str = "fixed", max_mu: float | None = None) -> float:
    """Upper end of the per-run friction prior U(0, bound).

    ``fixed`` shares one range across simulators (so the set of descent times
    pins down L and A), capped at 0.9 tan A on shallow planes so boxes slide.
    ``angle-scaled`` uses 0.9 tan A everywhere.
    """
    cap = 0.9 * math.tan(math.radians(angle))
    if prior == "fixed":
        return min(DEFAULT_MAX_MU if max_mu is None else max_mu, cap)
    if prior == "angle-scaled":
        return cap
    raise DataError(f"unknown friction prior {prior!r}")


def physics_bundle(
    rng: np.random.Generator, bundle_id: str, spec: InclineSpec, runs: int, prior: str = "fixed", max_mu=None
) -> DatasetBundle:
    bound = friction_bound(spec.angle, prior, max_mu)
    if bound >= math.tan(spec.radians):
        raise NonSlidingError(f"friction prior reaches tan(A) for A={spec.angle}")
    mu = D.sample_uniform(rng, 0.0, bound, runs)
    t = simulate_incline(spec, mu)
    prov = {"generator": "physics", "length": spec.length, "angle": spec.angle, "mu_max": bound, "prior": prior}
    return DatasetBundle(bundle_id, t[:, None], latents=mu[:, None], provenance=prov)


def gen_physics_meta(
    seed: int,
    lengths=(2, 4, 6, 8, 10),
    angles=(20, 30, 40, 50, 60),
    runs_per_sim: int = 1000,
    friction_prior: str = "fixed",
    max_mu: float | None = None,
) -> MetaDataset:
    train = []
    for i, (L, A) in enumerate(itertools.product(lengths, angles)):
        spec = InclineSpec(float(L), float(A))
        train.append(physics_bundle(stream(seed, "physics", i), f"sim-L{L}-A{A}", spec, runs_per_sim, friction_prior, max_mu))
    spec = {
        "generator": "physics",
        "seed": seed,
        "lengths": list(lengths),
        "angles": list(angles),
        "runs_per_sim": runs_per_sim,
        "friction_prior": friction_prior,
        "max_mu": max_mu,
    }
    return MetaDataset(train, [], spec)


# -- MNIST ----------------------------------------------------------------------------------------


def _read_idx(path, magic: int) -> tuple[list[int], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IdxTruncatedError(f"{path}: too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = list(struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim]))
    payload = raw[4 + 4 * ndim :]
    need = int(np.prod(dims))
    if len(payload) < need:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {need}")
    return dims, payload[:need]


def load_idx(images_path, labels_path) -> DatasetBundle:
    """Images as N x (rows*cols) floats in [0, 1] and their integer labels."""
    idims, ipay = _read_idx(images_path, 0x00000803)
    ldims, lpay = _read_idx(labels_path, 0x00000801)
    if idims[0] != ldims[0]:
        raise IdxCountMismatchError(f"{idims[0]} images but {ldims[0]} labels")
    n = idims[0]
    if n < 1:
        raise IdxError("IDX files hold no items")
    pixels = np.frombuffer(ipay, dtype=np.uint8).reshape(n, idims[1] * idims[2]).astype(np.float64) / 255.0
    labels = np.frombuffer(lpay, dtype=np.uint8).astype(np.int64)
    prov = {"source": "idx", "images": str(images_path), "labels": str(labels_path)}
    return DatasetBundle("mnist", pixels, labels=labels, provenance=prov)


def digit_pair_bundle(source: DatasetBundle, pair: tuple[int, int], rng, max_per_digit: int | None = None):
    a, b = pair
    ia = np.flatnonzero(source.labels == a)
    ib = np.flatnonzero(source.labels == b)
    n = min(len(ia), len(ib))
    if max_per_digit is not None:
        n = min(n, max_per_digit)
    if n < 1:
        raise DataError(f"pair {pair} has no examples for one of its digits")
    ia = rng.permutation(ia)[:n]
    ib = rng.permutation(ib)[:n]
    idx = np.concatenate([ia, ib])
    lab = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    order = rng.permutation(2 * n)
    return DatasetBundle(
        f"digits-{a}{b}", source.observations[idx[order]], labels=lab[order], provenance={"generator": "digit-pairs", "pair": [a, b]}
    )


def make_digit_pairs(
    source: DatasetBundle,
    held_out=(3, 7),
    n_pairs: int = 10,
    seed: int = 0,
    max_per_digit: int | None = None,
    n_unseen: int = 8,
) -> MetaDataset:
    """Training bundles for ``n_pairs`` of the C(8,2) candidate pairs; test
    bundles for up to ``n_unseen`` remaining pairs plus the held-out pair."""
    held = tuple(sorted(held_out))
    digits = [d for d in range(10) if d not in held]
    candidates = list(itertools.combinations(digits, 2))
    if n_pairs > len(candidates):
        raise DataError(f"asked for {n_pairs} pairs but only {len(candidates)} exist")
    rng = stream(seed, "digit-pairs")
    order = rng.permutation(len(candidates))
    chosen = [candidates[i] for i in order[:n_pairs]]
    unseen = [candidates[i] for i in order[n_pairs : n_pairs + n_unseen]]
    train = [digit_pair_bundle(source, p, stream(seed, "pair", *p), max_per_digit) for p in chosen]
    test = [digit_pair_bundle(source, p, stream(seed, "pair", *p), max_per_digit) for p in unseen + [held]]
    spec = {"generator": "digit-pairs", "seed": seed, "held_out": list(held), "n_pairs": n_pairs, "pairs": [list(p) for p in chosen]}
    return MetaDataset(train, test, spec)


def candidate_pairs(held_out=(3, 7)) -> list[tuple[int, int]]:
    digits = [d for d in range(10) if d not in held_out]
    return list(itertools.combinations(digits, 2))


# -- persistence ---------------------------------------------------------------------------------


def save_bundle(path, bundle: DatasetBundle) -> None:
    blocks = {"observations": bundle.observations}
    if bundle.labels is not None:
        blocks["labels"] = bundle.labels.astype(np.float64)
    if bundle.latents is not None:
        blocks["latents"] = bundle.latents
    framing.write(path, DATASET_MAGIC, {"id": bundle.id, "provenance": bundle.provenance}, blocks)


def load_bundle(path) -> DatasetBundle:
    header, blocks = framing.read(path, DATASET_MAGIC)
    labels = blocks.get("labels")
    return DatasetBundle(
        header["id"],
        blocks["observations"],
        labels=None if labels is None else labels.astype(np.int64),
        latents=blocks.get("latents"),
        provenance=header["provenance"],
    )


def save_meta_dataset(directory, meta: MetaDataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"spec": meta.spec, "train": [], "test": []}
    for split in ("train", "test"):
        for i, b in enumerate(getattr(meta, split)):
            name = f"{split}-{i:04d}.mvd"
            save_bundle(directory / name, b)
            manifest[split].append(name)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_meta_dataset(directory) -> MetaDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    train = [load_bundle(directory / n) for n in manifest["train"]]
    test = [load_bundle(directory / n) for n in manifest["test"]]
    return MetaDataset(train, test, manifest["spec"])
