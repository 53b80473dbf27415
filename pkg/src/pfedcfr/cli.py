"""Command-line front end.

    pfedcfr run config.json [--out DIR] [--seed S] [--dump-weights]
    pfedcfr compare config.json --methods fedavg,pfedcfr
    pfedcfr sweep-r config.json --r 0,2,4,6

Exit codes: 0 success, 1 runtime failure, 2 bad configuration or arguments.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import jsonschema

from . import data, nn, runtime
from .fusion import SimilarityParams, write_weights_csv

log = logging.getLogger("pfedcfr")

FINAL_WINDOW = 5


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` is a dotted path when known."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


@dataclass
class ExperimentConfig:
    method: str
    model: nn.ModelSpec
    data: dict
    partition: data.PartitionConfig
    training: runtime.MethodConfig
    output_dir: Path


def _schema() -> dict:
    return json.loads(resources.files("pfedcfr").joinpath("config.schema.json").read_text())


def _field(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def _schema_errors(raw: dict) -> list:
    validator = jsonschema.Draft202012Validator(_schema())
    problems = []
    for err in sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path))):
        path = list(err.absolute_path)
        if err.validator == "required":
            missing = [k for k in err.validator_value if k not in err.instance]
            for k in missing:
                problems.append(ConfigError("required field is missing", _field(path + [k])))
        else:
            problems.append(ConfigError(err.message, _field(path)))
    return problems


def load_config(path, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    """Parse and validate a JSON experiment file.

    Raises ConfigError (first problem; all problems are logged). ``seed``
    overrides every seed in the file; ``out`` overrides ``output_dir``.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}", str(path)) from None

    problems = _schema_errors(raw)
    if problems:
        for p in problems[1:]:
            log.error("%s: %s", path, p)
        raise problems[0]

    if seed is not None:
        raw["data"]["seed"] = raw["partition"]["seed"] = raw["training"]["seed"] = seed

    d = raw["data"]
    base = path.parent
    if d["source"] == "idx":
        for key in ("images", "labels"):
            p = Path(d[key])
            if not p.is_absolute():
                p = base / p
            if not p.exists():
                raise ConfigError(f"file not found: {p}", f"data.{key}")
            d[key] = str(p)
        n_classes = d.get("num_classes", 10)
    else:
        n_classes = d["num_classes"]
        if n_classes % d["num_clusters"]:
            raise ConfigError("num_classes must be divisible by num_clusters", "data.num_clusters")

    m = raw["model"]
    try:
        model = nn.ModelSpec.mlp(m["widths"], m.get("num_feature"))
    except ValueError as exc:
        raise ConfigError(str(exc), "model") from None
    if model.num_classes != n_classes:
        raise ConfigError(f"last width {model.num_classes} != num_classes {n_classes}", "model.widths")
    if d["source"] == "synthetic" and model.input_dim != d["dim"]:
        raise ConfigError(f"first width {model.input_dim} != data.dim {d['dim']}", "model.widths")

    pr = raw["partition"]
    part = data.PartitionConfig(
        pr["num_clients"], pr["labels_per_client"], pr["lognormal_sigma"], pr["seed"],
        pr.get("train_test_ratio", 0.8),
    )
    try:
        part.validate(n_classes)
    except data.PartitionError as exc:
        raise ConfigError(str(exc), "partition") from None

    tr = raw["training"]
    r = tr.get("r")
    if r is not None and r > model.depth:
        raise ConfigError(f"r={r} exceeds model depth {model.depth}", "training.r")
    sim = SimilarityParams(
        tr.get("alpha_t", 1e4), tr.get("sigma", 1e6), tr.get("lambda", 1.0), tr.get("mu", 1e-3)
    )
    training = runtime.MethodConfig(
        method=raw["method"],
        similarity=sim,
        r=r,
        local_steps=tr.get("local_steps", 10),
        batch_size=tr.get("batch_size", 32),
        eta=tr.get("eta", 0.005),
        rounds=tr["rounds"],
        seed=tr["seed"],
        overwrite_personalized=tr.get("overwrite_personalized", False),
    )
    out_dir = Path(out) if out else Path(raw.get("output_dir", "out"))
    if not out_dir.is_absolute() and out is None:
        out_dir = base / out_dir
    return ExperimentConfig(raw["method"], model, d, part, training, out_dir)


def build_dataset(cfg: ExperimentConfig) -> data.Dataset:
    d = cfg.data
    if d["source"] == "synthetic":
        kwargs = {k: d[k] for k in ("std", "separation", "cluster_spread") if k in d}
        return data.gen_synthetic(
            d["num_clusters"], d["samples_per_class"], d["dim"], d["num_classes"], d["seed"], **kwargs
        )
    ds = data.load_idx(d["images"], d["labels"], d.get("num_classes", 10))
    if ds.dim != cfg.model.input_dim:
        raise ConfigError(f"first width {cfg.model.input_dim} != image size {ds.dim}", "model.widths")
    return data.subsample(ds, d.get("subset"), d["seed"])


def prepare(cfg: ExperimentConfig):
    ds = build_dataset(cfg)
    return data.partition_heterogeneous(ds, cfg.partition)


def write_metrics_csv(path, history: Sequence[runtime.RoundMetrics]) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(["round", "client", "train_loss", "test_loss", "test_acc"])
        for m in history:
            for n in range(len(m.test_acc)):
                out.writerow(
                    [m.t, n, repr(float(m.train_loss[n])), repr(float(m.test_loss[n])), repr(float(m.test_acc[n]))]
                )


def execute(cfg: ExperimentConfig, shards, out_dir: Path, dump_weights: bool = False) -> dict:
    """Run one method, write metrics.csv and summary.json into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    on_round = None
    if dump_weights:
        def on_round(t, clients, metrics, fused):
            write_weights_csv(out_dir / f"weights_round_{t}.csv", [(t, fused.weights)])

    history = runtime.run_experiment(cfg.model, shards, cfg.training, on_round)
    write_metrics_csv(out_dir / "metrics.csv", history)
    acc_mean, acc_std = runtime.final_accuracy(history, FINAL_WINDOW)
    summary = {
        "method": cfg.training.method,
        "rounds": cfg.training.rounds,
        "clients": len(shards),
        "acc_mean": acc_mean,
        "acc_std": acc_std,
    }
    if cfg.training.method == "pfedcfr":
        summary["r"] = cfg.training.plan(cfg.model).r
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("%s: final accuracy %.4f +- %.4f", cfg.training.method, acc_mean, acc_std)
    return summary


def cmd_run(config_path, out=None, seed=None, dump_weights=False) -> int:
    cfg = load_config(config_path, seed, out)
    execute(cfg, prepare(cfg), cfg.output_dir, dump_weights)
    return 0


def _parse_list(text: str, what: str) -> list:
    items = [s.strip() for s in (text or "").split(",") if s.strip()]
    if not items:
        raise ConfigError(f"empty {what} list", f"--{what}")
    return items


def _dedupe(values: list, what: str) -> list:
    seen = list(dict.fromkeys(values))
    if len(seen) != len(values):
        log.warning("duplicate %s values dropped: %s -> %s", what, values, seen)
    return seen


def cmd_compare(config_path, methods, out=None, seed=None, dump_weights=False) -> int:
    if isinstance(methods, str):
        methods = _parse_list(methods, "methods")
    if not methods:
        raise ConfigError("empty methods list", "--methods")
    for m in methods:
        if m not in runtime.METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {runtime.METHODS}", "--methods")
    methods = _dedupe(list(methods), "method")
    cfg = load_config(config_path, seed, out)
    shards = prepare(cfg)
    rows = []
    for m in methods:
        sub = replace(cfg, method=m, training=replace(cfg.training, method=m))
        s = execute(sub, shards, cfg.output_dir / m, dump_weights)
        rows.append((m, s["acc_mean"], s["acc_std"]))
    rows.sort(key=lambda row: -row[1])
    _write_table(cfg.output_dir / "compare.csv", ["method", "final_acc_mean", "final_acc_std"], rows)
    return 0


def cmd_sweep_r(config_path, r_values, out=None, seed=None, dump_weights=False) -> int:
    if isinstance(r_values, str):
        try:
            r_values = [int(v) for v in _parse_list(r_values, "r")]
        except ValueError:
            raise ConfigError("r values must be integers", "--r") from None
    if not r_values:
        raise ConfigError("empty r list", "--r")
    r_values = _dedupe([int(v) for v in r_values], "r")
    cfg = load_config(config_path, seed, out)
    bad = [r for r in r_values if not 0 <= r <= cfg.model.depth]
    if bad:
        raise ConfigError(f"r values {bad} outside [0, {cfg.model.depth}]", "--r")
    shards = prepare(cfg)
    rows = []
    for r in r_values:
        sub = replace(cfg, method="pfedcfr", training=replace(cfg.training, method="pfedcfr", r=r))
        s = execute(sub, shards, cfg.output_dir / f"r{r}", dump_weights)
        rows.append((r, s["acc_mean"], s["acc_std"]))
    _write_table(cfg.output_dir / "sweep.csv", ["r", "final_acc_mean", "final_acc_std"], rows)
    return 0


def _write_table(path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        out = csv.writer(f, lineterminator="\n")
        out.writerow(header)
        for key, mean, std in rows:
            out.writerow([key, repr(float(mean)), repr(float(std))])


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message, "arguments")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="experiment JSON file")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--dump-weights", action="store_true", help="write weights_round_<t>.csv")

    parser = _Parser(prog="pfedcfr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("run", parents=[common], help="run the configured method")
    p = sub.add_parser("compare", parents=[common], help="run several methods on the same split")
    p.add_argument("--methods", required=True, help="comma-separated, e.g. fedavg,pfedcfr")
    p = sub.add_parser("sweep-r", parents=[common], help="run pfedcfr for several thresholds")
    p.add_argument("--r", required=True, dest="r_values", help="comma-separated, e.g. 0,2,4,6")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(format="%(levelname)s: %(message)s", level=logging.INFO)
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.DEBUG)
        common = dict(out=args.out, seed=args.seed, dump_weights=args.dump_weights)
        if args.command == "run":
            return cmd_run(args.config, **common)
        if args.command == "compare":
            return cmd_compare(args.config, args.methods, **common)
        return cmd_sweep_r(args.config, args.r_values, **common)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except (ValueError, ArithmeticError, OSError, KeyError) as exc:
        log.error("run failed: %s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
