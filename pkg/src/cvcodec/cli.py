"""Command-line driver for the whole pipeline.

A workspace directory (``--out``, default ``./workspace``) holds every
artifact under fixed names::

    workspace/
      data/{train,val,test}/...        gen-data
      stats.txt                        stats
      pretrain/                        pretrain   (log, best checkpoint)
      finetune/                        finetune
      compressed/, decompressed/       compress / decompress
      eval/                            eval
      rd-sweep/                        rd-sweep

Configuration is a YAML tree with sections ``data``, ``model``,
``train.pretrain``, ``train.finetune``, ``compress``, ``sweep``; command-line
``key=value`` overrides (dotted paths) win over the file, and the fully
resolved tree is snapshotted next to each command's artifacts so any run can
be replayed bit-identically from its snapshot.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numerical failure.
"""

from __future__ import annotations

import os

# Thread count is the only environment knob; it must be set before numpy
# loads its BLAS, which is why this sits above the heavy imports.
_threads = os.environ.get("CVCODEC_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import yaml

from . import data as data_mod
from .coding.coder import CoderError
from .container import (
    MODE_CONDITIONAL,
    MODE_FACTORIZED,
    ContainerError,
    compress,
    decompress,
)
from .data import DataError, GridTensor, NormStats, SyntheticSpec
from .metrics import evaluate_pairs
from .model import CodecModel, ConfigError, ModelConfig
from .nn.checkpoint import CheckpointError
from .training import TrainConfig, TrainingError, run_phase

__all__ = ["main", "run"]


class UsageError(Exception):
    pass


# --- configuration tree ---------------------------------------------------

_DATA_KEYS = {f.name for f in dataclasses.fields(SyntheticSpec)}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"phase"}
_MODES = {"conditional": MODE_CONDITIONAL, "factorized": MODE_FACTORIZED}


def default_config() -> dict:
    """The desk-scale defaults; every run resolves against this tree."""
    return {
        "data": {f.name: f.default for f in dataclasses.fields(SyntheticSpec)},
        "model": {f.name: f.default for f in dataclasses.fields(ModelConfig)},
        "train": {
            "pretrain": {
                "peak_lr": 6e-4, "warmup_steps": 100, "total_steps": 1500,
                "batch_size": 16, "weight_decay": 1e-4, "lambda_rd": 0.01,
                "beta_kl": 1e-4, "clip_norm": 1.0, "val_every": 250, "seed": 0,
            },
            "finetune": {
                "peak_lr": 2e-4, "warmup_steps": 100, "total_steps": 1200,
                "batch_size": 16, "weight_decay": 1e-4, "lambda_rd": 0.01,
                "beta_kl": 1e-4, "clip_norm": 1.0, "val_every": 250, "seed": 0,
            },
        },
        "compress": {"mode": "conditional"},
        "sweep": {"lambdas": [0.1, 1.0, 10.0]},
    }


def _check_keys(tree: dict, schema: dict, path: str = "") -> None:
    for key, value in tree.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in schema:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(schema[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where!r} must be a mapping")
            _check_keys(value, schema[key], where)


def _check_types(tree: dict, defaults: dict, path: str = "") -> None:
    """Leaf values must match the type of the built-in default.

    Catches YAML surprises early: PyYAML reads "1e18" as a string, and a
    stray `true` is never a valid setting here.
    """
    for key, value in tree.items():
        where = f"{path}.{key}" if path else str(key)
        ref = defaults[key]
        if isinstance(ref, dict):
            _check_types(value, ref, where)
        elif isinstance(ref, list):
            continue  # sweep.lambdas gets its own validation
        elif isinstance(ref, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise UsageError(f"config key {where!r} must be a number, "
                                 f"got {value!r}")
        elif isinstance(ref, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise UsageError(f"config key {where!r} must be an integer, "
                                 f"got {value!r}")
        elif isinstance(ref, str):
            if not isinstance(value, str):
                raise UsageError(f"config key {where!r} must be a string, "
                                 f"got {value!r}")


def _schema() -> dict:
    train_leaf = {k: None for k in _TRAIN_KEYS}
    return {
        "data": {k: None for k in _DATA_KEYS},
        "model": {k: None for k in _MODEL_KEYS},
        "train": {"pretrain": train_leaf, "finetune": dict(train_leaf)},
        "compress": {"mode": None},
        "sweep": {"lambdas": None},
    }


def _merge(base: dict, extra: dict) -> None:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def _apply_override(tree: dict, item: str) -> None:
    if "=" not in item:
        raise UsageError(f"override {item!r} is not of the form key=value")
    dotted, _, raw = item.partition("=")
    keys = dotted.split(".")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise UsageError(f"cannot parse override value {raw!r}: {e}") from e
    node = tree
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise UsageError(f"unknown config key {dotted!r}")
        node = node[k]
    node[keys[-1]] = value


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text())
        except OSError as e:
            raise DataError(f"cannot read config {args.config}: {e}") from e
        except yaml.YAMLError as e:
            raise UsageError(f"config {args.config} is not valid YAML: {e}") from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must be a YAML mapping")
        _merge(cfg, loaded)
    for item in args.overrides:
        _apply_override(cfg, item)
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
        cfg["model"]["seed"] = args.seed
        cfg["train"]["pretrain"]["seed"] = args.seed
        cfg["train"]["finetune"]["seed"] = args.seed
    if getattr(args, "lambda_", None) is not None:
        cfg["model"]["lambda_rd"] = args.lambda_
        cfg["train"]["finetune"]["lambda_rd"] = args.lambda_
    _check_keys(cfg, _schema())
    _check_types(cfg, default_config())
    if cfg["compress"]["mode"] not in _MODES:
        raise UsageError(f"compress.mode must be one of {sorted(_MODES)}")
    lambdas = cfg["sweep"]["lambdas"]
    if (not isinstance(lambdas, list) or not lambdas
            or not all(isinstance(v, (int, float)) and v > 0 for v in lambdas)):
        raise UsageError("sweep.lambdas must be a non-empty list of positive numbers")
    return cfg


def _snapshot(cfg: dict, directory: Path, command: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"resolved-{command}.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))


# --- shared plumbing ------------------------------------------------------


def _workspace(args) -> Path:
    return Path(args.out)


def _spec_from(cfg: dict) -> SyntheticSpec:
    return SyntheticSpec(**cfg["data"])


def _model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def _load_split(ws: Path, spec: SyntheticSpec, split: str) -> list[GridTensor]:
    paths = data_mod.instance_paths(ws / "data", split, spec.split_sizes()[split])
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise DataError(
            f"{split} split is incomplete under {ws / 'data'}; run gen-data first "
            f"(missing {missing[0].name}{' and more' if len(missing) > 1 else ''})")
    return [data_mod.read_grid(p) for p in paths]


def _load_stats(args, ws: Path) -> NormStats:
    path = Path(args.stats) if args.stats else ws / "stats.txt"
    if not path.exists():
        raise DataError(f"stats file {path} not found; run the stats command first")
    return NormStats.load(path)


def _normalized_array(grids, stats: NormStats) -> np.ndarray:
    return np.stack([data_mod.normalize(g, stats).values for g in grids])


def _load_checkpoint(args, default: Path) -> CodecModel:
    path = Path(args.checkpoint) if args.checkpoint else default
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    return CodecModel.load(path)


def _clone_with_lambda(model: CodecModel, lam: float) -> CodecModel:
    """Deep-copy the model under a (possibly new) rate weight."""
    fresh = CodecModel(dataclasses.replace(model.cfg, lambda_rd=lam))
    for (_, src), (_, dst) in zip(model.named_parameters(), fresh.named_parameters()):
        dst.data = src.data.copy()
    return fresh


# --- commands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    ws = _workspace(args)
    _snapshot(cfg, ws, "gen-data")
    spec = _spec_from(cfg)
    files = data_mod.generate_dataset(spec, ws / "data")
    for split, paths in files.items():
        print(f"{split}: {len(paths)} instances under {ws / 'data' / split}")
    return 0


def cmd_stats(args) -> int:
    cfg = resolve_config(args)
    ws = _workspace(args)
    _snapshot(cfg, ws, "stats")
    spec = _spec_from(cfg)
    grids = _load_split(ws, spec, "train")
    stats = data_mod.compute_stats(grids)
    out = ws / "stats.txt"
    stats.save(out)
    print(f"stats over {len(grids)} training instances -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    ws = _workspace(args)
    run_dir = ws / "pretrain"
    _snapshot(cfg, run_dir, "pretrain")
    spec = _spec_from(cfg)
    stats = _load_stats(args, ws)
    train_x = _normalized_array(_load_split(ws, spec, "train"), stats)
    val_x = _normalized_array(_load_split(ws, spec, "val"), stats)
    model = CodecModel(_model_config_from(cfg))
    tc = TrainConfig(phase="pretrain", **cfg["train"]["pretrain"])
    best, records = run_phase(model, tc, train_x, val_x, run_dir)
    print(f"pretrain: {len(records)} steps, final loss {records[-1].loss:.4f}, "
          f"best checkpoint {best}")
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    ws = _workspace(args)
    run_dir = ws / "finetune"
    _snapshot(cfg, run_dir, "finetune")
    spec = _spec_from(cfg)
    stats = _load_stats(args, ws)
    train_x = _normalized_array(_load_split(ws, spec, "train"), stats)
    val_x = _normalized_array(_load_split(ws, spec, "val"), stats)
    base = _load_checkpoint(args, ws / "pretrain" / "best-pretrain.cvcp")
    tc = TrainConfig(phase="finetune", **cfg["train"]["finetune"])
    model = _clone_with_lambda(base, tc.lambda_rd)
    best, records = run_phase(model, tc, train_x, val_x, run_dir)
    print(f"finetune: {len(records)} steps, final loss {records[-1].loss:.4f}, "
          f"best checkpoint {best}")
    return 0


def cmd_compress(args) -> int:
    cfg = resolve_config(args)
    ws = _workspace(args)
    out_dir = ws / "compressed"
    _snapshot(cfg, out_dir, "compress")
    stats = _load_stats(args, ws)
    model = _load_checkpoint(args, ws / "finetune" / "best-finetune.cvcp")
    mode = _MODES[cfg["compress"]["mode"]]
    grid = data_mod.read_grid(args.input)
    blob, report = compress(grid, model, stats, mode=mode)
    out = out_dir / (Path(args.input).stem + ".cvc")
    out.write_bytes(blob)
    print(f"{args.input} -> {out}")
    print(report.summary())
    return 0


def cmd_decompress(args) -> int:
    cfg = resolve_config(args)
    ws = _workspace(args)
    out_dir = ws / "decompressed"
    _snapshot(cfg, out_dir, "decompress")
    stats = _load_stats(args, ws)
    model = _load_checkpoint(args, ws / "finetune" / "best-finetune.cvcp")
    try:
        blob = Path(args.input).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {args.input}: {e}") from e
    grid = decompress(blob, model, stats)
    out = out_dir / (Path(args.input).stem + ".grd")
    data_mod.write_grid(out, grid)
    print(f"{args.input} -> {out}")
    return 0


def _evaluate(model: CodecModel, stats: NormStats, grids, mode: int):
    import time
    pairs = []
    total_bytes = 0
    clamped = {"y": 0, "z": 0}
    enc = dec = 0.0
    for grid in grids:
        t0 = time.perf_counter()
        blob, report = compress(grid, model, stats, mode=mode)
        enc += time.perf_counter() - t0
        t0 = time.perf_counter()
        recon = decompress(blob, model, stats)
        dec += time.perf_counter() - t0
        pairs.append((grid, recon))
        total_bytes += len(blob)
        clamped["y"] += report.clamped_y
        clamped["z"] += report.clamped_z
    return evaluate_pairs(pairs, stats, total_bytes, encode_seconds=enc,
                          decode_seconds=dec, clamp_counts=clamped)


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    ws = _workspace(args)
    out_dir = ws / "eval"
    _snapshot(cfg, out_dir, "eval")
    spec = _spec_from(cfg)
    stats = _load_stats(args, ws)
    model = _load_checkpoint(args, ws / "finetune" / "best-finetune.cvcp")
    grids = _load_split(ws, spec, "test")
    report = _evaluate(model, stats, grids, _MODES[cfg["compress"]["mode"]])
    (out_dir / "report.txt").write_text(report.table_text())
    (out_dir / "report.tsv").write_text(report.tsv_text())
    print(report.table_text(), end="")
    return 0


def cmd_rd_sweep(args) -> int:
    cfg = resolve_config(args)
    ws = _workspace(args)
    out_dir = ws / "rd-sweep"
    _snapshot(cfg, out_dir, "rd-sweep")
    spec = _spec_from(cfg)
    stats = _load_stats(args, ws)
    base = _load_checkpoint(args, ws / "pretrain" / "best-pretrain.cvcp")
    train_x = _normalized_array(_load_split(ws, spec, "train"), stats)
    val_x = _normalized_array(_load_split(ws, spec, "val"), stats)
    test_grids = _load_split(ws, spec, "test")
    rows = []
    for lam in cfg["sweep"]["lambdas"]:
        lam = float(lam)
        lam_dir = out_dir / f"lambda-{lam:g}"
        tc = TrainConfig(phase="finetune",
                         **{**cfg["train"]["finetune"], "lambda_rd": lam})
        model = _clone_with_lambda(base, lam)
        best, _ = run_phase(model, tc, train_x, val_x, lam_dir)
        tuned = CodecModel.load(best)
        report = _evaluate(tuned, stats, test_grids, MODE_CONDITIONAL)
        rows.append((lam, report.bpsp, report.mse_x100))
        print(f"lambda {lam:g}: bpsp {report.bpsp:.4f}, MSE x100 {report.mse_x100:.4f}")
    table = "lambda\tbpsp\tmse_x100\n" + "".join(
        f"{lam!r}\t{bpsp!r}\t{mse!r}\n" for lam, bpsp, mse in rows)
    (out_dir / "sweep.tsv").write_text(table)
    print(f"wrote {out_dir / 'sweep.tsv'}")
    return 0


# --- argument parsing -----------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cvcodec",
                     description="Variational-transformer codec for gridded fields")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, fn, help_text, needs_input=False):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", default="workspace", help="workspace directory")
        p.add_argument("--seed", type=int, help="master seed (data, model, training)")
        p.add_argument("--lambda", dest="lambda_", type=float,
                       help="rate-distortion weight override")
        p.add_argument("--checkpoint", help="checkpoint path override")
        p.add_argument("--stats", help="normalization-stats path override")
        if needs_input:
            p.add_argument("input", help="input file")
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="dotted config overrides, e.g. train.pretrain.total_steps=500")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "generate the synthetic dataset")
    add("stats", cmd_stats, "compute normalization stats over the train split")
    add("pretrain", cmd_pretrain, "phase 1: train the latent VAE")
    add("finetune", cmd_finetune, "phase 2: train the entropy model (frozen encoder)")
    add("compress", cmd_compress, "compress one grid file", needs_input=True)
    add("decompress", cmd_decompress, "decompress one container", needs_input=True)
    add("eval", cmd_eval, "compress/decompress the test split and report metrics")
    add("rd-sweep", cmd_rd_sweep, "finetune + evaluate across sweep.lambdas")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return 1
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, ContainerError, CheckpointError, CoderError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (TrainingError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())
