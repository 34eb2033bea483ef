"""Command-line front end.

Subcommands: gen-task, train, eval, sweep, gradcheck, selftest. Every
run resolves its configuration from an optional JSON file plus flag
overrides, writes the resolved manifest to the output directory before
doing any work, and emits only deterministic bytes into metrics/report
files (timings go to a separate file).

Exit codes: 0 success, 1 runtime contract violation, 2 usage error,
3 configuration error, 4 numeric divergence or failed check,
5 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .config import (
    ExperimentConfig,
    TOOL_VERSION,
    canonical_json,
    config_from_dict,
    config_hash,
    load_config_file,
)
from .errors import (
    ClassPromptError,
    ConfigError,
    DataFormatError,
    DivergenceError,
)
from .verification import GRADCHECK_TOLERANCE, run_gradcheck, run_selftest

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

_OUT_ENV = "CLASSPROMPT_OUT"

# flag name -> (section, key, parser)
_OVERRIDES = {
    "weight_seed": ("encoder", "weight_seed", int),
    "num_layers": ("encoder", "num_layers", int),
    "token_dim": ("encoder", "token_dim", int),
    "classes": ("task", "num_classes", int),
    "shots": ("task", "shots_per_class", int),
    "test_per_class": ("task", "test_per_class", int),
    "sigma": ("task", "noise_sigma", float),
    "gap_strength": ("task", "gap_strength", float),
    "task_seed": ("task", "task_seed", int),
    "class_token_len": ("task", "class_token_len", int),
    "prompt_length": ("prompt", "length", int),
    "template": ("prompt", "init_mode", str),
    "d_mid": ("prompt", "d_mid", int),
    "fusion_lambda": ("injection", "fusion_weight", float),
    "temperature": ("loss", "temperature", float),
    "kg_weight": ("loss", "consistency_weight", float),
    "learning_rate": ("train", "learning_rate", float),
    "batch_size": ("train", "batch_size", int),
    "epochs": ("train", "epochs", int),
    "max_steps": ("train", "max_steps", int),
    "grad_clip": ("train", "grad_clip", float),
    "mode": ("train", "mode", str),
    "run_seed": ("train", "run_seed", int),
}


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help=f"output directory (or ${_OUT_ENV}, default ./runs/<cmd>)")
    for flag in _OVERRIDES:
        p.add_argument("--" + flag.replace("_", "-"))
    p.add_argument("--insert-layer", help="single injection layer")
    p.add_argument("--layers", help="comma-separated injection layers, e.g. 2,4")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="classprompt",
        description="Class-aware prompt tuning on a frozen text encoder, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (
        ("gen-task", "generate and save a synthetic few-shot task"),
        ("train", "train one run and write metrics plus a checkpoint"),
        ("eval", "multi-seed base-to-new evaluation"),
        ("sweep", "ablation sweep over one axis"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common_flags(p)
        if name in ("eval", "sweep"):
            p.add_argument("--seeds", default="1,2,3",
                           help="comma-separated evaluation seeds")
        if name == "sweep":
            p.add_argument("--axis", required=True)
            p.add_argument("--values", required=True,
                           help="comma-separated; layer sets use '+', e.g. 2+4")
            p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--h", type=float, default=1e-5)
    sub.add_parser("selftest", help="run the invariant battery")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    payload = {}
    if args.config:
        payload = json.loads(Path(args.config).read_text()) if Path(args.config).exists() else None
        if payload is None:
            raise ConfigError(f"config file {args.config} does not exist")
        if not isinstance(payload, dict):
            raise ConfigError("config file must hold a JSON object")
    for flag, (section, key, parse) in _OVERRIDES.items():
        raw = getattr(args, flag, None)
        if raw is None:
            continue
        try:
            value = parse(raw)
        except ValueError as err:
            raise ConfigError(f"flag --{flag.replace('_', '-')}: {err}") from err
        payload.setdefault(section, {})[key] = value
    if getattr(args, "insert_layer", None) is not None:
        payload.setdefault("injection", {})["layers"] = [int(args.insert_layer)]
    if getattr(args, "layers", None) is not None:
        payload.setdefault("injection", {})["layers"] = [
            int(v) for v in args.layers.split(",") if v
        ]
    return config_from_dict(payload)


def _out_dir(args) -> Path:
    if getattr(args, "out", None):
        base = Path(args.out)
    elif os.environ.get(_OUT_ENV):
        base = Path(os.environ[_OUT_ENV])
    else:
        base = Path("runs") / args.command
    base.mkdir(parents=True, exist_ok=True)
    return base


def _write_manifest(out: Path, command: str, cfg: ExperimentConfig, extra: dict = None) -> dict:
    manifest = {
        "format": "classprompt-manifest",
        "format_version": 1,
        "command": command,
        "tool_version": TOOL_VERSION,
        "config": cfg.to_dict(),
        "config_sha256": config_hash(cfg),
        "created_unix": int(time.time()),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    sys.stdout.write(canonical_json(manifest))
    return manifest


def _parse_seeds(raw: str):
    try:
        seeds = [int(v) for v in raw.split(",") if v]
    except ValueError as err:
        raise ConfigError(f"--seeds: {err}") from err
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def _format_float(x: float) -> str:
    return repr(float(x))


def _cmd_gen_task(args) -> int:
    from .encoder import FrozenEncoder, build_vocabulary
    from .tasks import generate_task, save_dataset

    cfg = _resolve_config(args)
    out = _out_dir(args)
    _write_manifest(out, "gen-task", cfg)
    encoder = FrozenEncoder(cfg.encoder)
    vocab = build_vocabulary(cfg.task.num_classes, cfg.task.class_token_len,
                             cfg.prompt.length, cfg.encoder.vocab_size,
                             cfg.task.task_seed)
    names = ("train_base", "test_base", "test_new")
    for name, ds in zip(names, generate_task(cfg.task, encoder, vocab)):
        save_dataset(ds, out / name)
    print(f"task written to {out} ({', '.join(names)})")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .evaluation import run_single
    from .training import save_checkpoint

    cfg = _resolve_config(args)
    out = _out_dir(args)
    _write_manifest(out, "train", cfg)
    seeds = {
        "weight_seed": cfg.encoder.weight_seed,
        "task_seed": cfg.task.task_seed,
        "run_seed": cfg.train.run_seed,
    }
    try:
        row, state, extras = run_single(cfg)
    except DivergenceError as err:
        if err.last_good is not None:
            save_checkpoint(err.last_good, out / "checkpoint.json",
                            configs=cfg.to_dict(), seeds=seeds)
            print(f"diverged; last good state kept at {out / 'checkpoint.json'}",
                  file=sys.stderr)
        raise
    _write_metrics(out, extras["metrics"], extras["timings"])
    save_checkpoint(state, out / "checkpoint.json", configs=cfg.to_dict(), seeds=seeds)
    print(f"mode={cfg.train.mode} base={row['base']:.4f} "
          f"new={row['new']:.4f} h={row['h']:.4f}")
    return EXIT_OK


def _write_metrics(out: Path, metrics, timings) -> None:
    lines = ["step,ce,kg,total"]
    for step, ce, kg, tot in metrics:
        lines.append(f"{step},{_format_float(ce)},{_format_float(kg)},{_format_float(tot)}")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    lines = ["step,wall_ms"]
    for step, ms in timings:
        lines.append(f"{step},{ms:.3f}")
    (out / "timings.csv").write_text("\n".join(lines) + "\n")


def _cmd_eval(args) -> int:
    from .evaluation import run_base_to_new, write_report

    cfg = _resolve_config(args)
    seeds = _parse_seeds(args.seeds)
    out = _out_dir(args)
    _write_manifest(out, "eval", cfg, extra={"seeds": seeds})
    rows_path = out / "rows.csv"
    rows_path.write_text("seed,base,new,h\n")

    def sink(row):
        with rows_path.open("a") as fh:
            fh.write(f"{row['seed']},{_format_float(row['base'])},"
                     f"{_format_float(row['new'])},{_format_float(row['h'])}\n")

    report = run_base_to_new(cfg, seeds, row_sink=sink)
    write_report(report, out / "report.json")
    m = report.mean
    print(f"mode={report.mode} seeds={len(seeds)} "
          f"base={m['base']:.4f} new={m['new']:.4f} h={m['h']:.4f}")
    return EXIT_OK


def _parse_sweep_values(axis: str, raw: str):
    items = [v for v in raw.split(",") if v]
    if axis in ("insert_layer", "prompt_length", "d_mid"):
        return [int(v) for v in items]
    if axis == "fusion_lambda":
        return [float(v) for v in items]
    if axis == "layer_sets":
        return [tuple(int(x) for x in v.split("+")) for v in items]
    return items


def _cmd_sweep(args) -> int:
    from .evaluation import run_sweep, validate_sweep, write_sweep_files

    cfg = _resolve_config(args)
    seeds = _parse_seeds(args.seeds)
    try:
        values = _parse_sweep_values(args.axis, args.values)
    except ValueError as err:
        raise ConfigError(f"--values: {err}") from err
    validate_sweep(cfg, args.axis, values)
    out = _out_dir(args)
    _write_manifest(out, "sweep", cfg, extra={
        "axis": args.axis,
        "values": [str(v) for v in values],
        "seeds": seeds,
        "jobs": args.jobs,
    })
    partial = out / "sweep_partial.csv"
    partial.write_text("axis,value,seed,base,new,h\n")

    def sink(row):
        with partial.open("a") as fh:
            fh.write(f"{args.axis},{row['value']},{row['seed']},"
                     f"{_format_float(row['base'])},{_format_float(row['new'])},"
                     f"{_format_float(row['h'])}\n")

    report = run_sweep(cfg, args.axis, values, seeds, jobs=args.jobs, row_sink=sink)
    write_sweep_files(report, out)
    print(f"sweep over {args.axis}: {len(values)} values x {len(seeds)} seeds "
          f"-> {out / 'sweep.csv'}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    worst, count, names = run_gradcheck(h=args.h)
    print(f"checked {count} coordinates across {', '.join(names)}")
    print(f"max relative error: {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    if worst < GRADCHECK_TOLERANCE:
        print("gradcheck PASS")
        return EXIT_OK
    print("gradcheck FAIL")
    return EXIT_NUMERIC


def _cmd_selftest(_args) -> int:
    ok = run_selftest()
    return EXIT_OK if ok else EXIT_NUMERIC


_COMMANDS = {
    "gen-task": _cmd_gen_task,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except ClassPromptError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
