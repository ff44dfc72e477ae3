"""Command-line entry point: ``metavi {gen-data,train,eval,sweep,plot-data}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence. Each run lives in ``<out>/<run-id>/`` next to a
``manifest.json`` that is enough to reproduce it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import config as C
from . import datagen, experiments, framing, nets

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class SchemaError(ValueError):
    pass


# -- run manifests -----------------------------------------------------------------------


def run_id(cfg: C.ExperimentConfig, seed: int) -> str:
    """Content hash of the resolved config and seed; stable under re-serialisation."""
    payload = json.dumps({"config": cfg.to_dict(), "seed": int(seed)}, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]
    return f"{cfg.name or cfg.kind}-s{seed}-{digest}"


@dataclass
class RunManifest:
    run_id: str
    config: dict
    seed: int
    artifacts: dict[str, str] = field(default_factory=dict)
    status: str = "running"
    started: float = 0.0
    finished: float | None = None
    message: str = ""

    def write(self, directory) -> Path:
        path = Path(directory) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, directory) -> "RunManifest":
        return cls(**json.loads((Path(directory) / "manifest.json").read_text()))


# -- plot data ---------------------------------------------------------------------------


def _read_table(path) -> list[dict]:
    text = Path(path).read_text()
    if not text.strip():
        raise SchemaError(f"{path}: empty metric file")
    if str(path).endswith(".json"):
        return _json_rows(json.loads(text), path)
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return rows


def _json_rows(obj, path) -> list[dict]:
    """Flatten an eval summary into rows (physics grid or exp-family curves)."""
    metrics = obj.get("metrics", obj)
    if "grid" in metrics:
        g = metrics["grid"]["value"]
        return [
            {"L": L, "A": A, "mse": g["mse"][i][j]}
            for i, L in enumerate(g["lengths"])
            for j, A in enumerate(g["angles"])
        ]
    if "curves" in metrics:
        rows = []
        for fam, c in metrics["curves"]["value"].items():
            rows += [{"x": x, "y": y, "series": fam} for x, y in zip(c["x"], c["mse"])]
        return rows
    raise SchemaError(f"{path}: neither a grid nor curves found")


def _require(rows: list[dict], columns, path) -> None:
    for col in columns:
        if col not in rows[0]:
            raise SchemaError(f"{path}: missing column {col!r}")


def emit_plot_data(paths, kind: str, out_path) -> Path:
    """Convert metric files into a plot-ready CSV. Nothing is written if any
    input fails validation."""
    if kind not in ("curve", "heatmap"):
        raise SchemaError(f"unknown plot kind {kind!r}")
    out_rows = []
    for path in paths:
        rows = _read_table(path)
        if kind == "heatmap":
            if "row" not in rows[0]:
                _require(rows, ("L", "A", "mse"), path)
                rows = [{"row": r["L"], "col": r["A"], "value": r["mse"]} for r in rows]
            _require(rows, ("row", "col", "value"), path)
            out_rows += [[r["row"], r["col"], r["value"]] for r in rows]
        else:
            _require(rows, ("x", "y"), path)
            series = Path(path).stem
            out_rows += [[r["x"], r["y"], r.get("series") or series] for r in rows]
    header = ["row", "col", "value"] if kind == "heatmap" else ["x", "y", "series"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(out_rows)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(buf.getvalue())
    return out_path


# -- subcommands -------------------------------------------------------------------------


def _load_config(args) -> C.ExperimentConfig:
    if args.config is None:
        raise C.ConfigError("--config is required")
    path = Path(args.config)
    if not path.exists():
        try:
            return C.preset(args.config)
        except C.ConfigError:
            raise C.ConfigError(f"config file not found: {path}") from None
    return C.parse_config(path, strict=args.strict)


def _seed(args, cfg: C.ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def train_run(cfg: C.ExperimentConfig, seed: int, out_root, evaluate: bool = True, log=print) -> tuple[Path, dict]:
    """Train (and optionally evaluate) one run into its own directory."""
    cfg = cfg.with_seed(seed)
    rid = run_id(cfg, seed)
    rdir = Path(out_root) / rid
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / "config.json").write_text(cfg.to_json())
    man = RunManifest(rid, cfg.to_dict(), seed, started=time.time())
    man.write(rdir)

    def progress(step, total, loss):
        log(f"[{rid}] step {step}/{total} loss {loss:.4f}")

    try:
        res = experiments.train(cfg, seed, out_dir=rdir, progress=progress)
    except experiments.DivergenceError as e:
        man.status, man.finished, man.message = "failed", time.time(), str(e)
        if e.checkpoint_path:
            man.artifacts["last_good"] = Path(e.checkpoint_path).name
        man.write(rdir)
        raise
    man.artifacts.update(checkpoint="checkpoint.mvi", metrics="metrics.csv", summary="summary.json", config="config.json")
    summary = {}
    if evaluate:
        rec = experiments.evaluate(res.models, cfg, seed)
        rec.write(rdir / "eval")
        man.artifacts["eval"] = "eval/summary.json"
        summary = {k: v["value"] for k, v in rec.final.items() if not isinstance(v["value"], (dict, list))}
    man.status, man.finished = "done", time.time()
    man.write(rdir)
    return rdir, summary


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    seed = _seed(args, cfg)
    data = experiments.make_data(cfg, seed)
    out = Path(args.out or "data") / f"{cfg.name or cfg.kind}-s{seed}"
    datagen.save_meta_dataset(out, data)
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    rdir, summary = train_run(cfg, _seed(args, cfg), args.out or "runs", evaluate=not args.no_eval, log=_stderr)
    print(json.dumps({"run_dir": str(rdir), **summary}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise C.ConfigError("--checkpoint is required")
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    mb, ckpt = experiments.load_run(ckpt_path)
    cfg = C.resolve(ckpt.extra["config"]) if args.config is None else _load_config(args)
    seed = args.seed if args.seed is not None else ckpt.rng_seed
    rec = experiments.evaluate(mb, cfg, seed)
    out = Path(args.out) if args.out else ckpt_path.parent / "eval"
    paths = rec.write(out)
    print(paths["summary"])
    return EXIT_OK


def _csv_ints(text: str, flag: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise C.ConfigError(f"{flag} expects comma-separated integers, got {text!r}") from None


def cmd_sweep(args) -> int:
    base = _load_config(args) if args.config else C.preset("mog-n20")
    sizes = _csv_ints(args.sizes, "--sizes") if args.sizes else [None]
    seeds = _csv_ints(args.seeds, "--seeds") if args.seeds else list(base.seeds)
    out_root = Path(args.out or "sweep")
    results = []
    for size in sizes:
        raw = base.to_dict()
        if size is not None:
            if base.kind != "mog":
                raise C.ConfigError("--sizes applies to mog configs only")
            raw["generator"]["n_datasets"] = size
            raw["name"] = f"mog-n{size}"
        cfg = C.resolve(raw)
        for seed in seeds:
            rdir, summary = train_run(cfg, seed, out_root, log=_stderr)
            results.append({"run_id": rdir.name, "size": size, "seed": seed, **summary})
    results.sort(key=lambda r: r["run_id"])
    keys = sorted({k for r in results for k in r})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(results)
    (out_root / "summary.csv").write_text(buf.getvalue())
    print(out_root / "summary.csv")
    return EXIT_OK


def cmd_plot_data(args) -> int:
    if not args.inputs:
        raise C.ConfigError("plot-data needs at least one metric file")
    out = emit_plot_data(args.inputs, args.kind, args.out or f"{args.kind}.csv")
    print(out)
    return EXIT_OK


def _stderr(msg: str) -> None:
    print(msg, file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metavi", description="Meta-amortized variational inference experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config path or preset name")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        mode = sp.add_mutually_exclusive_group()
        mode.add_argument("--strict", dest="strict", action="store_true", default=True)
        mode.add_argument("--lenient", dest="strict", action="store_false")

    sp = sub.add_parser("gen-data", help="materialise a meta-dataset")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)
    sp = sub.add_parser("train", help="train one run (and evaluate it)")
    common(sp)
    sp.add_argument("--no-eval", action="store_true")
    sp.set_defaults(fn=cmd_train)
    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.set_defaults(fn=cmd_eval)
    sp = sub.add_parser("sweep", help="train a size x seed grid")
    common(sp)
    sp.add_argument("--sizes")
    sp.add_argument("--seeds")
    sp.set_defaults(fn=cmd_sweep)
    sp = sub.add_parser("plot-data", help="convert metric files to plot CSV")
    sp.add_argument("kind", choices=("curve", "heatmap"))
    sp.add_argument("inputs", nargs="*")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (C.ConfigError, nets.ConfigError, SchemaError) as e:
        _stderr(f"config error: {e}")
        return EXIT_CONFIG
    except (datagen.DataError, framing.FormatError, FileNotFoundError) as e:
        _stderr(f"data error: {e}")
        return EXIT_DATA
    except experiments.DivergenceError as e:
        where = f" (last good checkpoint: {e.checkpoint_path})" if e.checkpoint_path else ""
        _stderr(f"diverged: {e}{where}")
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
