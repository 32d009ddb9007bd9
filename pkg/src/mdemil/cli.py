"""Command line entry point: ``mdemil <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Output root is ``--out``, else ``$MDE_OUT``, else ``./runs``. Values given as
flags override values read from ``--config``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import List, Optional

from . import __version__
from .bags import DatasetManifest, DatasetSpec, find_manifests, generate_longtail, imbalance_ratio
from .errors import BagFormatError, NumericalError, SpecError
from .experiments import (
    ablate,
    imbalance_curves_csv,
    surface_csv,
    sweep_alpha_lambda,
    sweep_imbalance,
    sweep_records_csv,
    write_summary,
)
from .metrics import evaluate
from .trainer import TrainConfig, fit, load_fit

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

CONFIG_HELP = {
    "alpha": "weight of the distillation loss",
    "lam": "weight of the cross-expert consistency loss (file key: lambda)",
    "base_lr": "peak learning rate after warmup",
    "weight_decay": "decoupled weight decay",
    "epochs": "training epochs",
    "warmup_epochs": "epochs of linear learning-rate warmup",
    "seeds": "comma-separated run seeds",
    "ensemble": "none | separate | shared",
    "distillation": "on | off",
    "aggregator": "gated | mean",
    "fusion": "test-time expert fusion: mean-softmax | U-only | B-only",
    "embed_dim": "slide embedding width D",
    "attn_dim": "attention hidden width",
    "ffn_dim": "expert FFN hidden width",
    "text_dim": "text embedding width D_T",
    "template_len": "number of learnable template prompt rows",
    "class_token_len": "rows per class in the stub text encoder",
    "logit_scale": "scale applied to cosine similarities in the distillation loss",
    "text_seed": "seed of the stub text encoder",
    "text_dir": "directory with precomputed text embeddings (template.bag, class_<k>.bag)",
    "accumulate": "pairs per optimizer step",
}


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _float_list(text: str) -> List[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config (flags override --config file values)")
    g.add_argument("--config", help="JSON file with any of the keys below")
    for f in dataclasses.fields(TrainConfig):
        flag = "--lambda" if f.name == "lam" else "--" + f.name.replace("_", "-")
        kwargs = {"dest": f"cfg_{f.name}", "default": None, "help": f"{CONFIG_HELP[f.name]} (default: {_default(f)})"}
        if f.name == "distillation":
            kwargs["type"] = _parse_bool
        elif f.name == "seeds":
            kwargs["type"] = lambda s: tuple(int(t) for t in s.split(",") if t.strip())
        elif f.name in ("ensemble", "aggregator", "fusion", "text_dir"):
            kwargs["type"] = str
        elif isinstance(f.default, int) and not isinstance(f.default, bool):
            kwargs["type"] = int
        else:
            kwargs["type"] = float
        g.add_argument(flag, **kwargs)


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _load_config(args) -> TrainConfig:
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(EXIT_CONFIG, f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise CLIError(EXIT_CONFIG, f"{args.config}: config must be a JSON object")
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None:
            values["lambda" if f.name == "lam" else f.name] = v
    if getattr(args, "seed", None) is not None:
        values["seeds"] = [args.seed]
    try:
        return TrainConfig.from_dict(values)
    except (SpecError, TypeError) as exc:
        raise CLIError(EXIT_CONFIG, f"invalid config: {exc}") from exc


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get("MDE_OUT") or "runs")


def _load_data(data_dir):
    try:
        train_path, test_path = find_manifests(data_dir)
        train, test = DatasetManifest.load(train_path), DatasetManifest.load(test_path)
        for m in (train, test):
            for i in range(len(m)):
                if not m.path_of(i).is_file():
                    raise FileNotFoundError(f"missing bag file {m.path_of(i)}")
        return train, test
    except (OSError, SpecError, KeyError) as exc:
        raise CLIError(EXIT_DATA, f"cannot load dataset {data_dir}: {exc}") from exc


def _build_id() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_run_record(run_dir: Path, command: str, config: Optional[TrainConfig], seed, outputs, t0: float) -> None:
    record = {
        "command": command,
        "config": config.to_dict() if config is not None else None,
        "seed": seed,
        "build": _build_id(),
        "outputs": sorted(str(p) for p in outputs),
        "wall_time": round(time.perf_counter() - t0, 3),
    }
    (run_dir / "run_record.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _spec_from_args(args) -> DatasetSpec:
    values = {}
    if args.spec:
        try:
            values = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(EXIT_CONFIG, f"cannot read spec {args.spec}: {exc}") from exc
    flag_map = {
        "classes": "num_classes",
        "dim": "embed_dim",
        "head_count": "head_count",
        "ratio": "imbalance_ratio",
        "noise": "noise_sigma",
        "test_per_class": "test_per_class",
        "data_seed": "seed",
    }
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if args.instances is not None:
        values["instances_range"] = args.instances
    try:
        spec = DatasetSpec.from_dict(values)
        spec.validate()
        spec.class_counts()
    except (SpecError, TypeError) as exc:
        raise CLIError(EXIT_CONFIG, f"invalid dataset spec: {exc}") from exc
    return spec


def _add_spec_flags(p: argparse.ArgumentParser, seed_flag: str) -> None:
    g = p.add_argument_group("dataset spec (flags override --spec file values)")
    g.add_argument("--spec", help="JSON file with DatasetSpec keys")
    g.add_argument("--classes", type=int, help="number of classes C (default 4)")
    g.add_argument("--dim", type=int, help="instance embedding width d (default 64)")
    g.add_argument("--head-count", type=int, help="training bags of the largest class (default 871)")
    g.add_argument("--ratio", type=float, help="imbalance ratio r = max/min class count (default 35)")
    g.add_argument("--instances", type=int, nargs=2, metavar=("MIN", "MAX"), help="instances per bag (default 16 48)")
    g.add_argument("--noise", type=float, help="noise sigma (default 0.5)")
    g.add_argument("--test-per-class", type=int, help="balanced test bags per class (default 40)")
    g.add_argument(seed_flag, dest="data_seed", type=int, help="generator seed (default 0)")


# ------------------------------------------------------------------ subcommands


def cmd_gen_data(args) -> int:
    spec = _spec_from_args(args)
    out = Path(args.out) if args.out else _out_root(args) / "data"
    train, test = generate_longtail(spec, out)
    print(f"wrote {len(train)} train / {len(test)} test bags to {out} "
          f"(counts {train.counts}, ratio {imbalance_ratio(train.counts):.2f})")
    return 0


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args)
    train_m, _ = _load_data(args.data)
    seed = config.seeds[0]
    run_dir = _out_root(args) / f"train-{config.config_hash()}-s{seed}"
    try:
        result = fit(train_m, config, seed, run_dir)
    except BagFormatError as exc:
        raise CLIError(EXIT_DATA, str(exc)) from exc
    (run_dir / "summary.json").write_text(
        json.dumps({"config_hash": config.config_hash(), "seed": seed, **_log_summary(result.log)}, indent=2) + "\n"
    )
    _write_run_record(run_dir, "train", config, seed,
                      [run_dir / "checkpoint.bin", run_dir / "train_log.csv", run_dir / "summary.json"], t0)
    print(run_dir)
    return 0


def _log_summary(log) -> dict:
    s = log.summary()
    s.pop("wall_time")
    return s


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CLIError(EXIT_DATA, f"checkpoint {ckpt} not found")
    _, test_m = _load_data(args.data)
    try:
        result = load_fit(ckpt)
    except (BagFormatError, SpecError, KeyError, ValueError) as exc:
        raise CLIError(EXIT_DATA, f"cannot load checkpoint {ckpt}: {exc}") from exc
    fusion = args.fusion or result.config.fusion
    report = evaluate(result.bundle, test_m.load_bags(), test_m.groups, fusion)
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    doc = {"checkpoint": ckpt.name, "fusion": fusion, "class_names": test_m.class_names, **report.to_dict()}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2) + "\n")
    lines = ["class,name,f1"] + [f"{k},{n},{v:.2f}" for k, (n, v) in enumerate(zip(test_m.class_names, report.per_class))]
    (out / "per_class.csv").write_text("\n".join(lines) + "\n")
    _write_run_record(out, "eval", result.config, result.seed, [out / "metrics.json", out / "per_class.csv"], t0)
    print(json.dumps(report.row()))
    return 0


def cmd_ablate(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args)
    train_m, test_m = _load_data(args.data)
    run_dir = _out_root(args) / f"ablate-{config.config_hash()}"
    table = ablate(train_m, test_m, config, workers=args.workers)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "ablation.csv").write_text(table.mean_csv())
    (run_dir / "ablation_per_seed.csv").write_text(table.per_seed_csv())
    write_summary(run_dir / "summary.json", "ablation", config,
                  {"rows": {k: table.mean(k).to_dict() for k in table.rows}})
    _write_run_record(run_dir, "ablate", config, list(config.seeds),
                      [run_dir / n for n in ("ablation.csv", "ablation_per_seed.csv", "summary.json")], t0)
    print(table.mean_csv(), end="")
    return 0


def cmd_sweep_hparam(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args)
    train_m, test_m = _load_data(args.data)
    run_dir = _out_root(args) / f"sweep-hparam-{config.config_hash()}"
    records = sweep_alpha_lambda(
        train_m.load_bags(), test_m.load_bags(), train_m.class_names, train_m.groups, config,
        args.alphas, args.lambdas, workers=args.workers,
    )
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "surface.csv").write_text(surface_csv(records))
    (run_dir / "sweep_per_seed.csv").write_text(sweep_records_csv(records))
    write_summary(run_dir / "summary.json", "sweep-hparam", config,
                  {"alphas": args.alphas, "lambdas": args.lambdas, "runs": len(records)})
    _write_run_record(run_dir, "sweep-hparam", config, list(config.seeds),
                      [run_dir / n for n in ("surface.csv", "sweep_per_seed.csv", "summary.json")], t0)
    print(surface_csv(records), end="")
    return 0


def cmd_sweep_imbalance(args) -> int:
    t0 = time.perf_counter()
    config = _load_config(args)
    spec = _spec_from_args(args)
    for r in args.ratios:
        try:
            dataclasses.replace(spec, imbalance_ratio=r).validate()
            dataclasses.replace(spec, imbalance_ratio=r).class_counts()
        except SpecError as exc:
            raise CLIError(EXIT_CONFIG, f"ratio {r}: {exc}") from exc
    run_dir = _out_root(args) / f"sweep-imbalance-{config.config_hash()}"
    curves = sweep_imbalance(spec, args.ratios, config, workers=args.workers)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "curves.csv").write_text(imbalance_curves_csv(curves))
    write_summary(run_dir / "summary.json", "sweep-imbalance", config,
                  {"spec": spec.to_dict(), "ratios": args.ratios,
                   "tables": {str(r): {k: t.mean(k).to_dict() for k in t.rows} for r, t in curves.items()}})
    _write_run_record(run_dir, "sweep-imbalance", config, list(config.seeds),
                      [run_dir / "curves.csv", run_dir / "summary.json"], t0)
    print(imbalance_curves_csv(curves), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdemil", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic long-tailed dataset")
    p.add_argument("--out", help="dataset directory (default: <output root>/data)")
    _add_spec_flags(p, "--seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True, help="dataset directory with train/test manifests")
    p.add_argument("--seed", type=int, help="run seed (overrides seeds)")
    p.add_argument("--out", help="output root")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the balanced test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fusion", choices=("mean-softmax", "U-only", "B-only"))
    p.add_argument("--out", help="directory for metrics.json (default: checkpoint directory)")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (
        ("ablate", cmd_ablate, "component ablation: none, separate+distill, shared, shared+distill"),
        ("sweep-hparam", cmd_sweep_hparam, "alpha x lambda grid"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--out", help="output root")
        p.add_argument("--workers", type=int, default=1, help="parallel fits")
        if name == "sweep-hparam":
            p.add_argument("--alphas", type=_float_list, default=[0.05, 0.1, 0.35])
            p.add_argument("--lambdas", type=_float_list, default=[0.1, 0.25, 0.5])
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep-imbalance", help="baseline vs MDE across imbalance ratios")
    p.add_argument("--ratios", type=_float_list, default=[2.0, 8.0, 35.0])
    p.add_argument("--out", help="output root")
    p.add_argument("--workers", type=int, default=1)
    _add_spec_flags(p, "--data-seed")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep_imbalance)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
