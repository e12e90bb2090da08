"""Command-line entry point: ``multiresnet <subcommand> [options]``.

Options can also come from a ``key = value`` file (``--config``) or from a
previous run's ``manifest.json`` (``--manifest``); explicit flags win.
Outputs go to ``--out``, else ``$MULTIRESNET_OUT/<subcommand>``, else
``./runs/<subcommand>``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from . import parallel as par
from . import paths
from .config import ConfigError, read_config, write_config
from .data import DatasetError, load_cifar10, synth_splits
from .model import NetworkConfig, build_network, load_checkpoint, save_checkpoint
from .trainer import HyperParams, TrainingDiverged, evaluate, train

OUT_ENV = "MULTIRESNET_OUT"


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def _str(text) -> str:
    return str(text)


@dataclass(frozen=True)
class Opt:
    name: str
    kind: Callable[[str], Any]
    default: Any
    help: str = ""
    choices: Optional[tuple] = None


DATASET_OPTS = [
    Opt("dataset", _str, "synth", "'synth' or a CIFAR-10 binary directory"),
    Opt("n_train", int, 4000, "synthetic training samples"),
    Opt("n_test", int, 1000, "synthetic test samples"),
    Opt("classes", int, 2, "synthetic classes"),
    Opt("image_size", int, 8, "synthetic image side"),
    Opt("noise", float, 0.3, "synthetic pixel noise std"),
    Opt("data_seed", int, 0, "synthetic data seed"),
]

NETWORK_OPTS = [
    Opt("depth", int, 14, "network depth (6n+2 basic, 9n+2 bottleneck)"),
    Opt("k", int, 2, "residual functions per block"),
    Opt("w", int, 1, "widening factor"),
    Opt("block", _str, "basic", "block kind", ("basic", "bottleneck")),
    Opt("residual", parse_bool, True, "keep skip connections"),
]

TRAIN_OPTS = [
    Opt("epochs", int, 10, ""),
    Opt("batch_size", int, 128, ""),
    Opt("lr", float, 0.1, ""),
    Opt("momentum", float, 0.9, ""),
    Opt("weight_decay", float, 1e-4, ""),
    Opt("augment", parse_bool, True, ""),
    Opt("seed", int, 0, "initialization and shuffling seed"),
]

CHECKPOINT_OPT = Opt("checkpoint", _str, None, "checkpoint written by 'train'")

COST_OPTS = [
    Opt("t_fn", float, None, "seconds per residual function per sample"),
    Opt("t_fixed", float, None, "fixed seconds per step"),
    Opt("bandwidth", float, None, "link bytes per second"),
    Opt("latency", float, None, "seconds per transfer"),
    Opt("warp", int, 32, "thread quantum"),
    Opt("bytes_per_value", int, 4, "bytes per transferred activation or weight"),
]

FIXTURE_OPTS = [
    Opt("observations", _str, "bundled", "timing CSV ('bundled' for the shipped K80 fixture)"),
    Opt("fit_batch", int, 128, "batch size of the rows used for fitting"),
]

SUBCOMMANDS: dict[str, list[Opt]] = {
    "train": NETWORK_OPTS + DATASET_OPTS + TRAIN_OPTS,
    "evaluate": [CHECKPOINT_OPT] + DATASET_OPTS,
    "lesion": [CHECKPOINT_OPT] + DATASET_OPTS,
    "analyze": [
        Opt("n", int, 54, "blocks"),
        Opt("k", int, 1, "functions per block"),
        Opt("r", _str, "0.5", "per-function gradient decay (decimal or fraction)"),
        Opt("p", float, 0.95, "coverage of the effective range"),
        Opt("c", int, 2, "scaling factor for the deeper/wider comparison"),
    ],
    "path-gradient": [
        Opt("checkpoint", _str, "toy", "checkpoint, or 'toy' for the linearized 0.5x-identity net"),
        Opt("depths", parse_int_list, (0, 1, 2, 3, 4), "comma-separated path depths"),
        Opt("samples", int, 8, "random paths per depth"),
        Opt("batch", int, 16, "images per gradient evaluation"),
        Opt("seed", int, 0, ""),
        Opt("toy_blocks", int, 10, ""),
        Opt("toy_k", int, 1, ""),
        Opt("gain", float, 0.5, "toy residual gain"),
    ]
    + DATASET_OPTS,
    "simulate": [
        Opt("depth", int, 110, ""),
        Opt("k", int, 2, ""),
        Opt("batch_size", int, 128, ""),
        Opt("workers", int, 2, ""),
        Opt("strategy", _str, "model", "", ("data", "model", "hybrid")),
        Opt("block", _str, "basic", "", ("basic", "bottleneck")),
    ]
    + COST_OPTS,
    "calibrate": FIXTURE_OPTS + COST_OPTS[-2:],
    "speedup-table": FIXTURE_OPTS + COST_OPTS,
}


class CliError(Exception):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiresnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in SUBCOMMANDS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="key = value file")
        p.add_argument("--manifest", help="manifest.json of an earlier run to replay")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/{cmd} or ./runs/{cmd})")
        for o in opts:
            default = "" if o.default is None else f" (default {o.default})"
            p.add_argument(_flag(o.name), dest=o.name, default=argparse.SUPPRESS, help=o.help + default,
                           choices=o.choices)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then manifest, then config file, then explicit flags."""
    opts = {o.name: o for o in SUBCOMMANDS[command]}
    layers: list[dict[str, Any]] = []
    if getattr(args, "manifest", None):
        man = json.loads(Path(args.manifest).read_text())
        if man.get("subcommand") != command:
            raise CliError(f"manifest is for {man.get('subcommand')!r}, not {command!r}")
        layers.append(man["config"])
    if getattr(args, "config", None):
        layers.append(read_config(args.config))
    layers.append({k: v for k, v in vars(args).items() if k in opts})
    resolved = {name: o.default for name, o in opts.items()}
    for layer in layers:
        for key, raw in layer.items():
            if key not in opts:
                raise CliError(f"unknown option {key!r} for {command}")
            o = opts[key]
            if raw is None:
                resolved[key] = None
                continue
            if isinstance(raw, list):
                raw = ",".join(str(x) for x in raw)
            try:
                value = o.kind(raw) if isinstance(raw, str) else o.kind(str(raw))
            except ValueError as exc:
                raise CliError(f"--{key.replace('_', '-')}: {exc}") from None
            if o.choices and value not in o.choices:
                raise CliError(f"--{key.replace('_', '-')}: {value!r} not in {o.choices}")
            resolved[key] = value
    return resolved


def out_dir(command: str, args) -> Path:
    if args.out:
        d = Path(args.out)
    elif os.environ.get(OUT_ENV):
        d = Path(os.environ[OUT_ENV]) / command
    else:
        d = Path("runs") / command
    d.mkdir(parents=True, exist_ok=True)
    return d


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, artifacts: list[str], wall: float) -> Path:
    man = {
        "subcommand": command,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in config.items()},
        "seed": config.get("seed", config.get("data_seed")),
        "artifacts": {a: _sha256(out / a) for a in artifacts},
        "version": __version__,
        "wall_time": round(wall, 3),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


# -- helpers ------------------------------------------------------------------------


def load_data(cfg: dict):
    ds = cfg["dataset"]
    if ds == "synth":
        return synth_splits(
            cfg["data_seed"],
            cfg["n_train"],
            cfg["n_test"],
            num_classes=cfg["classes"],
            image_size=cfg["image_size"],
            noise=cfg["noise"],
        )
    path = Path(ds)
    if not path.exists():
        raise CliError(f"dataset path {path} does not exist")
    return load_cifar10(path, "train"), load_cifar10(path, "test")


def _need_checkpoint(cfg: dict) -> Path:
    if not cfg.get("checkpoint"):
        raise CliError("--checkpoint is required")
    path = Path(cfg["checkpoint"])
    if not path.exists():
        raise CliError(f"checkpoint {path} does not exist")
    return path


def _check_input(net, dataset) -> None:
    if net.config.input_shape != dataset.image_shape:
        raise CliError(f"checkpoint expects images {net.config.input_shape}, dataset has {dataset.image_shape}")


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _cost_model(cfg: dict, fallback: Optional[par.CostModel] = None) -> par.CostModel:
    values = {k: cfg[k] for k in ("t_fn", "t_fixed", "bandwidth", "latency") if cfg.get(k) is not None}
    base = fallback if fallback is not None else par.CostModel(warp=cfg["warp"])
    kw = dict(base.to_config())
    kw.update(values)
    kw["warp"] = cfg["warp"]
    kw["bytes_per_value"] = cfg["bytes_per_value"]
    return par.CostModel(**kw)


def _reference_rows(cfg: dict):
    src = cfg["observations"]
    return par.read_reference_csv(None if src == "bundled" else src)


# -- subcommands ------------------------------------------------------------------------


def cmd_train(cfg: dict, out: Path) -> list[str]:
    train_set, test_set = load_data(cfg)
    net_cfg = NetworkConfig.from_depth(
        cfg["depth"],
        cfg["k"],
        cfg["block"],
        w=cfg["w"],
        residual=cfg["residual"],
        num_classes=train_set.num_classes,
        input_shape=train_set.image_shape,
    )
    hyper = HyperParams(
        lr=cfg["lr"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        augment=cfg["augment"],
    )
    net = build_network(net_cfg, cfg["seed"])
    net, log = train(net, train_set, hyper, test_set)
    save_checkpoint(net, out / "checkpoint.bin", {"mean": train_set.mean, "std": train_set.std})
    log.to_csv(out / "train_log.csv", timing=False)
    _write_rows(out / "timing.csv", ["epoch", "seconds"], [[r.epoch, f"{r.seconds:.3f}"] for r in log.epochs])
    # timing.csv is wall-clock data and deliberately left out of the manifest's artifacts
    return ["checkpoint.bin", "train_log.csv"]


def cmd_evaluate(cfg: dict, out: Path) -> list[str]:
    net, _ = load_checkpoint(_need_checkpoint(cfg))
    train_set, test_set = load_data(cfg)
    _check_input(net, test_set)
    rows = [["train", repr(evaluate(net, train_set))], ["test", repr(evaluate(net, test_set))]]
    _write_rows(out / "eval.csv", ["split", "error"], rows)
    return ["eval.csv"]


def cmd_lesion(cfg: dict, out: Path) -> list[str]:
    net, _ = load_checkpoint(_need_checkpoint(cfg))
    _, test_set = load_data(cfg)
    _check_input(net, test_set)
    paths.lesion_sweep(net, test_set).to_csv(out / "lesion.csv")
    return ["lesion.csv"]


def cmd_analyze(cfg: dict, out: Path) -> list[str]:
    n, k, r, p, c = cfg["n"], cfg["k"], cfg["r"], cfg["p"], cfg["c"]
    if not 0 < p < 1:
        raise CliError(f"coverage p={p} outside (0, 1)")
    curve = paths.gradient_contribution(n, k, r)
    paths.write_distribution_csv(out / "distribution.csv", curve)
    rep = paths.compare_scaling(n, c, r, p)
    rows = [
        ("curve", n, k, paths.effective_range(curve, p)),
        ("base", n, 1, rep.base),
        ("deep", c * n, 1, rep.deep),
        ("wide", n, c, rep.wide),
    ]
    paths.write_range_csv(out / "ranges.csv", rows)
    return ["distribution.csv", "ranges.csv"]


def cmd_path_gradient(cfg: dict, out: Path) -> list[str]:
    rng = np.random.default_rng(cfg["seed"])
    if cfg["checkpoint"] == "toy":
        net = paths.LinearizedToyNet(cfg["toy_blocks"], cfg["toy_k"], cfg["gain"], seed=cfg["seed"])
        images = rng.standard_normal((cfg["batch"], net.dim))
        labels = None
        convs = 1
    else:
        net, _ = load_checkpoint(_need_checkpoint(cfg))
        _, test_set = load_data(cfg)
        _check_input(net, test_set)
        images = test_set.normalized()[: cfg["batch"]]
        labels = test_set.labels[: cfg["batch"]]
        convs = net.config.block_kind.convs
    stats = [paths.empirical_path_gradient(net, images, labels, d, cfg["samples"], rng) for d in cfg["depths"]]
    rows = [[s.depth, s.depth * convs, repr(s.mean), repr(s.std)] for s in stats]
    _write_rows(out / "path_gradient.csv", ["depth", "layer_depth", "mean_norm", "std_norm"], rows)
    artifacts = ["path_gradient.csv"]
    usable = [s for s in stats if s.mean > 0]
    if len(usable) >= 2:
        r = paths.estimate_decay([s.depth for s in usable], [s.mean for s in usable])
        write_config(out / "decay.cfg", {"r": r})
        artifacts.append("decay.cfg")
    return artifacts


def cmd_simulate(cfg: dict, out: Path) -> list[str]:
    scenario = par.SimScenario(
        cfg["depth"], cfg["k"], cfg["batch_size"], cfg["workers"], cfg["strategy"], cfg["block"]
    )
    cost = _cost_model(cfg)
    par.write_results_csv(out / "sim.csv", [par.simulate_step(scenario, cost)])
    return ["sim.csv"]


def cmd_calibrate(cfg: dict, out: Path) -> list[str]:
    rows = _reference_rows(cfg)
    fit_obs = par.reference_observations(rows, cfg["fit_batch"])
    cost = par.calibrate(fit_obs, par.CostModel(warp=cfg["warp"], bytes_per_value=cfg["bytes_per_value"]))
    write_config(out / "cost_model.cfg", cost.to_config())
    table = []
    for s, t in par.reference_observations(rows):
        pred = par.simulate_step(s, cost).step_time
        table.append([s.depth, s.k, s.batch_size, s.strategy.value, repr(t), repr(pred), repr(pred / t - 1.0),
                      int(s.batch_size == cfg["fit_batch"])])
    _write_rows(out / "residuals.csv",
                ["depth", "k", "batch", "strategy", "measured", "predicted", "rel_error", "fitted"], table)
    return ["cost_model.cfg", "residuals.csv"]


def cmd_speedup_table(cfg: dict, out: Path) -> list[str]:
    rows = _reference_rows(cfg)
    if all(cfg.get(k) is not None for k in ("t_fn", "t_fixed", "bandwidth", "latency")):
        cost = _cost_model(cfg)
    else:
        initial = par.CostModel(warp=cfg["warp"], bytes_per_value=cfg["bytes_per_value"])
        fitted = par.calibrate(par.reference_observations(rows, cfg["fit_batch"]), initial)
        cost = _cost_model(cfg, fitted)
    scenarios = [s for r in rows for s in (r.base, r.multi)]
    table = par.speedup_table(scenarios, cost)
    par.write_speedup_csv(out / "speedup.csv", table)
    (out / "speedup.md").write_text(par.speedup_markdown(table))
    return ["speedup.csv", "speedup.md"]


HANDLERS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "lesion": cmd_lesion,
    "analyze": cmd_analyze,
    "path-gradient": cmd_path_gradient,
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "speedup-table": cmd_speedup_table,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    t0 = time.perf_counter()
    try:
        cfg = resolve(command, args)
        out = out_dir(command, args)
        artifacts = HANDLERS[command](cfg, out)
        write_manifest(out, command, cfg, artifacts, time.perf_counter() - t0)
    except (CliError, ConfigError, DatasetError, TrainingDiverged, par.CalibrationError, ValueError, OSError) as exc:
        print(f"multiresnet {command}: error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {', '.join(artifacts)} to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
