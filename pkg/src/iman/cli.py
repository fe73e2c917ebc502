"""Command-line front end: ``iman {synth,train,eval,sweep,gradcheck,selftest}``.

Every subcommand reads an optional flat config file (``--config``), applies
``--set key=value`` overrides and the dedicated flags (``--seed``, ``--tol``),
and writes the fully resolved configuration to ``config.resolved`` in its
output directory.  Exit status: 0 on success, 1 on invalid input or usage,
2 on a runtime failure (including a failed gradient or self-test check).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from .config import dump_flat, load_flat, parse_value
from .data import MODALITIES
from .dataset_io import read_dataset, write_dataset
from .exceptions import (
    ConfigurationError,
    ConstraintError,
    DimensionError,
    EvaluationError,
    ParameterError,
    TrainingError,
)
from .metrics import METRIC_NAMES, format_report
from .missingness import build_table, mask_cohort
from .model import ImanModel, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import make_rng
from .synthetic import SyntheticSpec, gen_synthetic
from .training import (
    Scenario,
    TrainConfig,
    degradation_summary,
    evaluate,
    sweep_missing,
    train,
    write_history_csv,
    write_sweep_csv,
)
from .verify import format_selftest, format_suite, gradient_suite, selftest

__all__ = ["RunConfig", "run", "main", "DEFAULTS"]

_MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig) if f.name not in ("seed", "image_shape", "field_dims")]
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed"]
_SPEC_KEYS = [f.name for f in dataclasses.fields(SyntheticSpec) if f.name != "seed"]


def _defaults() -> dict:
    out = {"seed": 0}
    spec, mc, tc = SyntheticSpec(), ModelConfig(), TrainConfig()
    out.update({f"data.{k}": getattr(spec, k) for k in _SPEC_KEYS})
    out["data.missing_rates"] = (0.0,) * len(MODALITIES)
    out.update({f"model.{k}": getattr(mc, k) for k in _MODEL_KEYS})
    out.update({f"train.{k}": getattr(tc, k) for k in _TRAIN_KEYS})
    out["sweep.overall_rates"] = (0.0, 0.2, 0.4, 0.6, 0.8)
    out["sweep.allocation"] = (1.0,) * len(MODALITIES)
    out["sweep.seeds"] = (0, 1, 2)
    out["sweep.slack"] = 0.02
    out["eval.threshold"] = 0.5
    out["gradcheck.points"] = 10
    out["gradcheck.step"] = 1e-4
    out["gradcheck.tol"] = 1e-4
    out["gradcheck.coords_per_param"] = 16
    out["gradcheck.model_coords_per_param"] = 5
    return out


DEFAULTS = _defaults()


def _coerce(key: str, value, default):
    def scalar(v, like):
        if isinstance(like, bool):
            if isinstance(v, bool):
                return v
        elif isinstance(like, int):
            if isinstance(v, int) and not isinstance(v, bool):
                return v
        elif isinstance(like, float):
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                return float(v)
        elif isinstance(like, str):
            if isinstance(v, str):
                return v
        raise ConfigurationError(f"{key}: expected {type(like).__name__}, got {v!r}")

    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        return tuple(scalar(v, default[0]) for v in value)
    return scalar(value, default)


class RunConfig:
    """Resolved flat configuration; unknown keys are rejected."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value, DEFAULTS[key])

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls(load_flat(path) if path else None)
        for item in overrides:
            key, sep, text = item.partition("=")
            if not sep:
                raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
            cfg.set(key.strip(), parse_value(text.strip()))
        return cfg

    def to_text(self) -> str:
        return dump_flat(self.values)

    def write(self, directory) -> Path:
        path = Path(directory) / "config.resolved"
        path.write_text(self.to_text())
        return path

    # -- builders ------------------------------------------------------------------
    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(seed=self["seed"], **{k: self[f"data.{k}"] for k in _SPEC_KEYS})

    def model_config(self, image_shape=None, field_dims=None, seed=None) -> ModelConfig:
        return ModelConfig(
            image_shape=image_shape or self["data.image_shape"],
            field_dims=field_dims or self["data.field_dims"],
            seed=self["seed"] if seed is None else seed,
            **{k: self[f"model.{k}"] for k in _MODEL_KEYS},
        )

    def train_config(self, seed=None) -> TrainConfig:
        return TrainConfig(seed=self["seed"] if seed is None else seed, **{k: self[f"train.{k}"] for k in _TRAIN_KEYS})

    def scenarios(self) -> list:
        return [Scenario.overall(r, self["sweep.allocation"]) for r in self["sweep.overall_rates"]]


# -- argument parsing -----------------------------------------------------------------
class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


_EPILOG = "config keys and defaults (override with --config FILE or --set KEY=VALUE):\n" + "".join(
    f"  {line}\n" for line in dump_flat(DEFAULTS).splitlines()
)


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {v}")
    return v


def _common(p: argparse.ArgumentParser, seed=True) -> None:
    p.add_argument("--config", metavar="PATH", default=None, help="flat key = value config file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], help="override one config key")
    if seed:
        p.add_argument("--seed", type=_u64, default=None, help="root seed (U64); overrides the seed key")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iman", description=__doc__.splitlines()[0], formatter_class=_Formatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, help_):
        return sub.add_parser(name, help=help_, description=help_, formatter_class=_Formatter, epilog=_EPILOG)

    p = add("synth", "write a synthetic planted-signal dataset directory")
    _common(p)
    p.add_argument("--out", metavar="DIR", required=True, help="dataset directory to write")

    p = add("train", "train a model; writes model.ckpt and history.csv")
    _common(p)
    p.add_argument("--data", metavar="DIR", required=True, help="dataset directory")
    p.add_argument("--out", metavar="DIR", required=True, help="run directory to write")

    p = add("eval", "evaluate a checkpoint on one split")
    _common(p, seed=False)
    p.add_argument("--model", metavar="PATH", required=True, help="checkpoint file or run directory")
    p.add_argument("--data", metavar="DIR", required=True, help="dataset directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="split to score")
    p.add_argument("--out", metavar="DIR", default=None, help="directory for eval_<split>.csv (default: beside the checkpoint)")

    p = add("sweep", "train and test one model per (missing-rate scenario, seed)")
    _common(p)
    p.add_argument("--data", metavar="DIR", default=None, help="base dataset (default: synthesize from data.* keys)")
    p.add_argument("--out", metavar="DIR", required=True, help="directory for sweep.csv")
    p.add_argument("--jobs", metavar="N", type=int, default=1, help="worker processes")
    p.add_argument("--record-time", action="store_true", help="fill the train_minutes column (not byte-reproducible)")

    p = add("gradcheck", "finite-difference gradient certification of every layer")
    _common(p)
    p.add_argument("--tol", metavar="REAL", type=float, default=None, help="relative error tolerance; overrides gradcheck.tol")
    p.add_argument("--out", metavar="DIR", default=None, help="optional directory for gradcheck.csv")

    p = add("selftest", "oracle-equivalence checks of every module")
    _common(p)
    p.add_argument("--out", metavar="DIR", default=None, help="optional directory for selftest.csv")

    return parser


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.set)
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", args.seed)
    if getattr(args, "tol", None) is not None:
        cfg.set("gradcheck.tol", args.tol)
    return cfg


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------------
def cmd_synth(args, cfg: RunConfig) -> int:
    cohort = gen_synthetic(cfg.synthetic_spec())
    table = build_table(len(cohort), cfg["data.missing_rates"], make_rng(cfg["seed"], "mask"))
    out = _outdir(args.out)
    write_dataset(out, mask_cohort(cohort, table), table)
    cfg.write(out)
    counts = table.column_counts()
    print(f"wrote {len(cohort)} samples to {out}")
    print("absent per modality: " + ", ".join(f"{m}={int(c)}" for m, c in zip(MODALITIES, counts)))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    cohort, _ = read_dataset(args.data)
    model = ImanModel(cfg.model_config(cohort.image_shape, cohort.field_dims))
    out = _outdir(args.out)
    cfg.write(out)

    model, history = train(model, cohort, cfg.train_config())
    save_checkpoint(model, out / "model.ckpt")
    write_history_csv(out / "history.csv", history)
    last = history[-1]
    print(f"trained {len(history)} epochs, {model.parameter_count()} parameters; "
          f"final train_loss {last['train_loss']:.4f}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'history.csv'}")
    return 0


def _checkpoint_path(path) -> Path:
    p = Path(path)
    return p / "model.ckpt" if p.is_dir() else p


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = _checkpoint_path(args.model)
    if not ckpt.exists():
        raise ConfigurationError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    cohort, _ = read_dataset(args.data)
    split = cohort.split_subset(args.split)
    if len(split) == 0:
        raise DimensionError(f"split {args.split!r} is empty")
    report = evaluate(model, split, cfg["eval.threshold"])
    print(format_report(report, f"{args.split} split, n={report.n}"))
    out = _outdir(args.out) if args.out else ckpt.parent
    if args.out:
        cfg.write(out)
    with open(out / f"eval_{args.split}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("split", "n") + METRIC_NAMES + ("tp", "fp", "tn", "fn"))
        vals = ["undefined" if getattr(report, k) is None else repr(float(getattr(report, k))) for k in METRIC_NAMES]
        w.writerow([args.split, report.n] + vals + [report.tp, report.fp, report.tn, report.fn])
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    if args.jobs < 1:
        raise ConfigurationError("--jobs must be >= 1")
    if args.data:
        base, _ = read_dataset(args.data)
        if not base.present.all():
            # scenario rates are defined against a fully present cohort
            raise ConstraintError(f"{args.data}: sweep needs a dataset with every modality present")
    else:
        base = gen_synthetic(cfg.synthetic_spec())
    scenarios = cfg.scenarios()
    mc = cfg.model_config(base.image_shape, base.field_dims)
    rows = sweep_missing(base, scenarios, cfg["sweep.seeds"], cfg.train_config(), mc, args.jobs, args.record_time)
    out = _outdir(args.out)
    cfg.write(out)
    write_sweep_csv(out / "sweep.csv", rows)
    summary = degradation_summary(rows, [s.name for s in scenarios], cfg["sweep.slack"])
    lines = [f"{name:<14} mean_auc {'undefined' if v is None else f'{v:.4f}'}" for name, v in summary["mean_auc"].items()]
    lines.append(f"non-increasing within slack {cfg['sweep.slack']}: {summary['monotone']}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    results = gradient_suite(
        cfg.model_config(),
        points=cfg["gradcheck.points"],
        step=cfg["gradcheck.step"],
        tol=cfg["gradcheck.tol"],
        seed=cfg["seed"],
        coords_per_param=cfg["gradcheck.coords_per_param"],
        model_coords_per_param=cfg["gradcheck.model_coords_per_param"],
    )
    print(format_suite(results))
    if args.out:
        out = _outdir(args.out)
        cfg.write(out)
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("target", "point", "parameter", "max_relative_error", "worst_index", "analytic", "numeric", "passed"))
            for r in results:
                for i, pt in enumerate(r.points):
                    for name, rep in pt.items():
                        w.writerow((r.name, i, name, repr(rep.max_relative_error), rep.worst_index,
                                    repr(rep.analytic), repr(rep.numeric), int(rep.passed)))
    ok = all(r.passed for r in results)
    print("all gradient checks passed" if ok else "gradient check FAILED")
    return 0 if ok else 2


def cmd_selftest(args, cfg: RunConfig) -> int:
    results = selftest(cfg["seed"])
    print(format_selftest(results))
    if args.out:
        out = _outdir(args.out)
        cfg.write(out)
        with open(out / "selftest.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("check", "passed", "detail"))
            for r in results:
                w.writerow((r.name, int(r.passed), r.detail))
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if ok else 2


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}

_VALIDATION_ERRORS = (ConfigurationError, ParameterError, DimensionError, ConstraintError, FileNotFoundError, ValueError)
_RUNTIME_ERRORS = (TrainingError, EvaluationError, ArithmeticError, OSError, RuntimeError)


def run(argv=None) -> int:
    """Parse ``argv`` and execute one subcommand; returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        return _COMMANDS[args.command](args, cfg)
    except _VALIDATION_ERRORS as exc:
        print(f"iman {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as exc:
        print(f"iman {args.command}: runtime failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
