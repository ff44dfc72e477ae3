"""Experiment configuration: JSON in, fully resolved dataclass out.

Every value the user leaves out is filled from the defaults table for the
experiment kind and model, and the dotted key path is recorded under
``provenance`` as ``"default"`` (or ``"user"`` when supplied).
"""

from __future__ import annotations

import copy
import difflib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

KINDS = ("mog", "physics", "expfam", "mnist-pairs")
MODELS = ("meta", "vae")


class ConfigError(ValueError):
    """Bad configuration; ``path`` is the dotted key that caused it."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


_MOG_ARCH = {
    "hidden": [10, 10],
    "summary_hidden": [10, 10],
    "summary_dim": 10,
    "decoder_hidden": [10, 10],
    "bundle_size": 20,
}

DEFAULTS: dict[str, dict[str, dict]] = {
    "mog": {
        "meta": {
            "generator": {"n_datasets": 20, "n_samples": 100, "mean_range": [-5.0, 5.0], "variance": 0.1},
            "architecture": _MOG_ARCH,
            "optimizer": {"lr": 2e-4, "decoder_lr": 3e-3, "batch_size": 20},
            "epochs": 500,
            "eval": {"n_test_mixtures": 1000, "n_points": 100, "bundle_size": 20, "mean_range": [-5.0, 5.0]},
        },
        "vae": {
            "generator": {"n_datasets": 1, "n_samples": 1000, "mean_range": [-5.0, 5.0], "variance": 0.1},
            "architecture": {"hidden": [10, 10], "decoder_hidden": [10, 10]},
            "optimizer": {"lr": 1e-3, "decoder_lr": 1e-3, "batch_size": 100},
            "epochs": 200,
            "eval": {"n_test_mixtures": 1000, "n_points": 100, "bundle_size": 20, "mean_range": [-5.0, 5.0]},
        },
    },
    "physics": {
        "meta": {
            "generator": {
                "lengths": [2, 4, 6, 8, 10],
                "angles": [20, 30, 40, 50, 60],
                "runs_per_sim": 1000,
                "friction_prior": "fixed",
                "max_mu": None,
            },
            "architecture": {
                "hidden": [10, 10],
                "summary_hidden": [10, 10],
                "summary_dim": 10,
                "bundle_size": 100,
                "transform": {"kind": "log", "shift": 1.0, "scale": 1.0},
            },
            "optimizer": {"lr": 2e-4, "batch_size": 64},
            "epochs": 10,
            "eval": {"lengths": [2.0, 20.0, 1.0], "angles": [5.0, 85.0, 5.0], "runs": 200, "region_angles": [20.0, 70.0]},
        },
        "vae": {
            "generator": {
                "lengths": [10],
                "angles": [45],
                "runs_per_sim": 1000,
                "friction_prior": "fixed",
                "max_mu": None,
            },
            "architecture": {"hidden": [10, 10], "transform": {"kind": "log", "shift": 1.0, "scale": 1.0}},
            "optimizer": {"lr": 2e-4, "batch_size": 64},
            "epochs": 10,
            "eval": {"lengths": [2.0, 20.0, 1.0], "angles": [5.0, 85.0, 5.0], "runs": 200, "region_angles": [20.0, 70.0]},
        },
    },
    "expfam": {
        "meta": {
            "generator": {
                "family_mix": {"gaussian-fixed-var": 30},
                "vec_dim": 20,
                "n_realizations": 50,
                "ranges": {},
                "exponential_parameterization": "rate",
            },
            "architecture": {
                "hidden": [400, 400],
                "summary_hidden": [400, 400],
                "summary_dim": 400,
                "bundle_size": 10,
                "prior_std": 5.0,
                "transform": {"kind": "symlog", "shift": 0.0, "scale": 1.0},
            },
            "optimizer": {"lr": 2e-4, "batch_size": 20},
            "epochs": 100,
            "eval": {"n_realizations": 60, "bundle_size": 10},
        },
        "vae": {
            "generator": {
                "family_mix": {"gaussian-fixed-var": 1},
                "vec_dim": 20,
                "n_realizations": 1000,
                "ranges": {},
                "exponential_parameterization": "rate",
            },
            "architecture": {"hidden": [400, 400], "prior_std": 5.0, "transform": {"kind": "symlog", "shift": 0.0, "scale": 1.0}},
            "optimizer": {"lr": 2e-4, "batch_size": 20},
            "epochs": 100,
            "eval": {"n_realizations": 60, "bundle_size": 10},
        },
    },
    "mnist-pairs": {
        "meta": {
            "generator": {"held_out": [3, 7], "n_pairs": 20, "max_per_digit": 1000, "n_unseen": 8},
            "architecture": {
                "hidden": [400, 400],
                "summary_hidden": [400, 400],
                "summary_dim": 400,
                "decoder_hidden": [400, 400],
                "latent_dim": 40,
                "bundle_size": 10,
            },
            "optimizer": {"lr": 2e-4, "decoder_lr": 2e-4, "batch_size": 100},
            "epochs": 100,
            "eval": {"bundle_size": 10, "max_items": 1000},
        },
    },
}

# keys whose value is a free-form mapping rather than a fixed schema
_OPEN_KEYS = {"generator.family_mix", "generator.ranges"}

# baseline single-distribution statistics for the exp-family VAE
VAE_STATISTIC_RANGES = {
    "gaussian-fixed-var": (-1.2, 1.1),
    "log-normal-fixed-var": (-0.5, 1.8),
    "exponential": (1.4, 2.8),
}

TOP_LEVEL = ("kind", "model", "name", "generator", "architecture", "optimizer", "epochs", "seeds", "eval")


@dataclass
class ExperimentConfig:
    kind: str
    model: str
    generator: dict
    architecture: dict
    optimizer: dict
    epochs: int
    seeds: list[int]
    eval: dict
    name: str = ""
    provenance: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "model": self.model,
            "name": self.name,
            "generator": copy.deepcopy(self.generator),
            "architecture": copy.deepcopy(self.architecture),
            "optimizer": copy.deepcopy(self.optimizer),
            "epochs": self.epochs,
            "seeds": list(self.seeds),
            "eval": copy.deepcopy(self.eval),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        out = resolve(self.to_dict())
        out.seeds = [int(seed)]
        out.provenance = dict(self.provenance, seeds="user")
        return out


# spelled-out forms so typos of the long name still find the terse key
_LONG_NAMES = {"lr": "learning_rate", "decoder_lr": "decoder_learning_rate", "n_datasets": "num_datasets"}


def _nearest(key: str, options) -> str:
    spelled = {}
    for opt in options:
        leaf = opt.rsplit(".", 1)[-1]
        spelled.setdefault(opt, opt)
        spelled.setdefault(leaf, opt)
        if leaf in _LONG_NAMES:
            spelled.setdefault(_LONG_NAMES[leaf], opt)
    hits = difflib.get_close_matches(key, list(spelled), n=1, cutoff=0.0)
    return spelled[hits[0]] if hits else ""


def _all_paths(template: dict, prefix: str = "") -> list[str]:
    out = []
    for k, v in template.items():
        out.append(prefix + k)
        if isinstance(v, dict) and prefix + k not in _OPEN_KEYS:
            out += _all_paths(v, prefix + k + ".")
    return out


def _merge(template: dict, given: dict, prefix: str, prov: dict, strict: bool) -> dict:
    out = {}
    for key in given:
        if key not in template and strict:
            raise ConfigError(f"unknown key {key!r} (did you mean {_nearest(key, template)!r}?)", prefix + key)
    for key, default in template.items():
        path = f"{prefix}{key}"
        if key in given:
            value = given[key]
            if isinstance(default, dict) and path not in _OPEN_KEYS:
                if not isinstance(value, dict):
                    raise ConfigError(f"expected an object, got {type(value).__name__}", path)
                out[key] = _merge(default, value, path + ".", prov, strict)
            else:
                out[key] = copy.deepcopy(value)
                prov[path] = "user"
        else:
            out[key] = copy.deepcopy(default)
            _mark_default(default, path, prov)
    return out


def _mark_default(value, path: str, prov: dict) -> None:
    if isinstance(value, dict) and path not in _OPEN_KEYS and value:
        for k, v in value.items():
            _mark_default(v, f"{path}.{k}", prov)
    else:
        prov[path] = "default"


def _positive(value, path: str, integer: bool = False) -> None:
    ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value) and value > 0
    if integer:
        ok = ok and float(value).is_integer()
    if not ok:
        raise ConfigError(f"must be a positive {'integer' if integer else 'number'}, got {value!r}", path)


def _interval(value, path: str) -> None:
    if not (isinstance(value, (list, tuple)) and len(value) == 2 and value[0] < value[1]):
        raise ConfigError(f"must be an increasing pair [lo, hi], got {value!r}", path)


def _validate(cfg: ExperimentConfig) -> None:
    _positive(cfg.epochs, "epochs", integer=True)
    _positive(cfg.optimizer["lr"], "optimizer.lr")
    if "decoder_lr" in cfg.optimizer:
        _positive(cfg.optimizer["decoder_lr"], "optimizer.decoder_lr")
    _positive(cfg.optimizer["batch_size"], "optimizer.batch_size", integer=True)
    if not cfg.seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in cfg.seeds):
        raise ConfigError(f"seeds must be a non-empty list of non-negative integers, got {cfg.seeds!r}", "seeds")
    arch, gen = cfg.architecture, cfg.generator
    if "bundle_size" in arch:
        _positive(arch["bundle_size"], "architecture.bundle_size", integer=True)
    for key in ("hidden", "summary_hidden", "decoder_hidden"):
        if key in arch and not (isinstance(arch[key], list) and all(isinstance(w, int) and w > 0 for w in arch[key])):
            raise ConfigError(f"must be a list of positive widths, got {arch[key]!r}", f"architecture.{key}")
    if cfg.kind == "mog":
        _positive(gen["n_datasets"], "generator.n_datasets", integer=True)
        _positive(gen["n_samples"], "generator.n_samples", integer=True)
        if gen["n_samples"] < 2:
            raise ConfigError("a mixture needs at least 2 samples", "generator.n_samples")
        _positive(gen["variance"], "generator.variance")
        _interval(gen["mean_range"], "generator.mean_range")
        _interval(cfg.eval["mean_range"], "eval.mean_range")
        if cfg.model == "meta" and arch["bundle_size"] > gen["n_samples"]:
            raise ConfigError("bundle larger than each data set", "architecture.bundle_size")
    elif cfg.kind == "physics":
        for L in gen["lengths"]:
            if not 1.0 <= L <= 20.0:
                raise ConfigError(f"plane length {L} outside [1, 20]", "generator.lengths")
        for A in gen["angles"]:
            if not 5.0 <= A <= 85.0:
                raise ConfigError(f"angle {A} outside [5, 85]", "generator.angles")
        if gen["friction_prior"] not in ("fixed", "angle-scaled"):
            raise ConfigError(f"unknown prior {gen['friction_prior']!r}", "generator.friction_prior")
        _positive(gen["runs_per_sim"], "generator.runs_per_sim", integer=True)
    elif cfg.kind == "expfam":
        from .distributions import FAMILY_TAGS

        for tag, count in gen["family_mix"].items():
            if tag not in FAMILY_TAGS:
                raise ConfigError(f"unknown family {tag!r} (did you mean {_nearest(tag, FAMILY_TAGS)!r}?)", "generator.family_mix")
            _positive(count, f"generator.family_mix.{tag}", integer=True)
        for tag, rng in gen["ranges"].items():
            _interval(rng, f"generator.ranges.{tag}")
        if cfg.model == "meta" and arch["bundle_size"] > gen["n_realizations"]:
            raise ConfigError("bundle larger than each data set", "architecture.bundle_size")
    elif cfg.kind == "mnist-pairs":
        if not 1 <= gen["n_pairs"] <= 28:
            raise ConfigError(f"n_pairs must lie in [1, 28], got {gen['n_pairs']}", "generator.n_pairs")


def resolve(raw: dict, strict: bool = True) -> ExperimentConfig:
    """Apply defaults to a raw mapping and validate the result."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "kind" not in raw:
        raise ConfigError("missing required field", "kind")
    kind = raw["kind"]
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; choose from {', '.join(KINDS)}", "kind")
    model = raw.get("model", "meta")
    if model not in DEFAULTS[kind]:
        raise ConfigError(f"kind {kind!r} has no {model!r} model", "model")
    prov = {"kind": "user", "model": "user" if "model" in raw else "default"}
    template = DEFAULTS[kind][model]
    for key in raw:
        if key not in TOP_LEVEL and strict:
            options = list(TOP_LEVEL) + _all_paths({s: template[s] for s in ("generator", "architecture", "optimizer", "eval")})
            raise ConfigError(f"unknown key {key!r} (did you mean {_nearest(key, options)!r}?)", key)
    parts = {}
    for section in ("generator", "architecture", "optimizer", "eval"):
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"expected an object, got {type(given).__name__}", section)
        parts[section] = _merge(template[section], given, section + ".", prov, strict)
    epochs = raw.get("epochs", template["epochs"])
    prov["epochs"] = "user" if "epochs" in raw else "default"
    seeds = raw.get("seeds", [0])
    prov["seeds"] = "user" if "seeds" in raw else "default"
    cfg = ExperimentConfig(
        kind=kind,
        model=model,
        name=str(raw.get("name", "")),
        epochs=epochs,
        seeds=list(seeds) if isinstance(seeds, (list, tuple)) else seeds,
        provenance=prov,
        **parts,
    )
    _validate(cfg)
    return cfg


def parse_config(path, strict: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from None
    return resolve(raw, strict)


def preset(name: str) -> ExperimentConfig:
    """Named configs: ``mog-n10`` .. ``mog-n50`` (main-text sizes plus the
    appendix's n30), ``mog-vae``, ``physics``, ``physics-vae``, ``expfam-<family>``,
    ``expfam-mix90``, ``mnist-pairs``."""
    if name.startswith("mog-n"):
        n = int(name[len("mog-n") :])
        return resolve({"kind": "mog", "name": name, "generator": {"n_datasets": n}})
    if name == "mog-vae":
        return resolve({"kind": "mog", "model": "vae", "name": name})
    if name == "physics":
        return resolve({"kind": "physics", "name": name})
    if name == "physics-vae":
        return resolve({"kind": "physics", "model": "vae", "name": name})
    if name == "expfam-mix90":
        mix = {"gaussian-fixed-var": 30, "log-normal-fixed-var": 30, "exponential": 30}
        return resolve({"kind": "expfam", "name": name, "generator": {"family_mix": mix}})
    if name.startswith("expfam-vae-"):
        tag = name[len("expfam-vae-") :]
        return resolve({"kind": "expfam", "model": "vae", "name": name, "generator": {"family_mix": {tag: 1}}})
    if name.startswith("expfam-"):
        tag = name[len("expfam-") :]
        return resolve({"kind": "expfam", "name": name, "generator": {"family_mix": {tag: 30}}})
    if name == "mnist-pairs":
        return resolve({"kind": "mnist-pairs", "name": name})
    raise ConfigError(f"unknown preset {name!r}")


MOG_SIZES = (10, 20, 50)
MOG_SIZES_ALT = (10, 30, 50)


def dumps(cfg: ExperimentConfig) -> str:
    return cfg.to_json()


def loads(text: str, strict: bool = True) -> ExperimentConfig:
    return resolve(json.loads(text), strict)


def get_path(cfg: ExperimentConfig, dotted: str) -> Any:
    node: Any = cfg.to_dict()
    for part in dotted.split("."):
        node = node[part]
    return node
