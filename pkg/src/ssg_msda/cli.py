"""Command-line entry point: ``ssg <command> --config cfg.json --out dir``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .data import SHIFT_LEVELS, write_feature_file
from .model import VARIANTS, load_checkpoint, save_checkpoint
from .trainer import (
    ExperimentConfig,
    MetricsRecord,
    evaluate,
    gradient_check,
    init_model,
    load_dataset,
    metrics_jsonl,
    run_ablation_suite,
    run_mask_sweep,
    train,
)

log = logging.getLogger("ssg_msda")

COMMANDS = ("gen-data", "train", "eval", "gradcheck", "ablate", "sweep-mask")
CURVE_COLUMNS = ("epoch", "l_src", "l_tgt", "l_ss", "l_total", "target_acc", "domain_acc")
GRADCHECK_TOL = 1e-5
DEFAULT_RATIOS = (0.0, 0.25, 0.5, 0.75, 0.9, 0.95, 1.0)


class ConfigError(ValueError):
    pass


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


# key -> (type check, range check, description of the accepted values)
SCHEMA = {
    "variant": (lambda v: isinstance(v, str), lambda v: v in VARIANTS, f"one of {list(VARIANTS)}"),
    "n_domains": (_int, lambda v: v >= 2, "an integer >= 2"),
    "n_classes": (_int, lambda v: v >= 2, "an integer >= 2"),
    "embed_dim": (_int, lambda v: v >= 1, "a positive integer"),
    "feature_dim": (_int, lambda v: v >= 1, "a positive integer"),
    "gcn_layers": (_int, lambda v: v >= 1, "a positive integer"),
    "sigma": (_num, lambda v: v > 0, "a positive number"),
    "add_self_loops": (lambda v: isinstance(v, bool), lambda v: True, "a boolean"),
    "alpha1": (_num, lambda v: v >= 0, "a number >= 0"),
    "alpha2": (_num, lambda v: v >= 0, "a number >= 0"),
    "lambda": (_num, lambda v: v >= 0, "a number >= 0"),
    "mask_ratio": (_num, lambda v: 0 <= v <= 1, "a number in [0, 1]"),
    "s_val": (_num, lambda v: True, "a number"),
    "lr": (_num, lambda v: v >= 0, "a number >= 0"),
    "epochs": (_int, lambda v: v >= 1, "an integer >= 1"),
    "batch_size": (_int, lambda v: v >= 1, "an integer >= 1"),
    "seed": (_int, lambda v: v >= 0, "a non-negative integer"),
    "data": (lambda v: isinstance(v, (dict, str)), lambda v: True, "an object or a feature-file path"),
    "drop_tgt_loss": (lambda v: isinstance(v, bool), lambda v: True, "a boolean"),
    "drop_ss_loss": (lambda v: isinstance(v, bool), lambda v: True, "a boolean"),
    "extractor_hidden": (
        lambda v: isinstance(v, list) and all(_int(h) for h in v),
        lambda v: all(h >= 1 for h in v),
        "a list of positive integers",
    ),
    "init_scale": (_num, lambda v: v >= 0, "a number >= 0"),
    "source_fraction": (lambda v: v is None or _num(v), lambda v: v is None or 0 < v <= 1, "null or a number in (0, 1]"),
    "negative_rows": (lambda v: isinstance(v, str), lambda v: v in ("all", "one"), "'all' or 'one'"),
    "freeze_prototypes": (lambda v: isinstance(v, bool), lambda v: True, "a boolean"),
    "target_domain": (lambda v: v is None or _int(v), lambda v: v is None or v >= 0, "null or a domain index"),
}

DATA_SCHEMA = {
    "samples_per_class_per_domain": (_int, lambda v: v >= 1, "a positive integer"),
    "input_dim": (_int, lambda v: v >= 2, "an integer >= 2"),
    "shift_level": (lambda v: isinstance(v, str), lambda v: v in SHIFT_LEVELS, f"one of {sorted(SHIFT_LEVELS)}"),
    "seed": (_int, lambda v: v >= 0, "a non-negative integer"),
    "class_sep": (_num, lambda v: v > 0, "a positive number"),
    "noise": (_num, lambda v: v >= 0, "a number >= 0"),
}


def _check(schema: dict, key: str, value, prefix: str = "") -> None:
    name = prefix + key
    if key not in schema:
        raise ConfigError(f"unknown config key '{name}'")
    type_ok, range_ok, desc = schema[key]
    if not type_ok(value):
        raise ConfigError(f"config key '{name}': expected {desc}, got {value!r}")
    if not range_ok(value):
        raise ConfigError(f"config key '{name}': {value!r} out of range, expected {desc}")


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def parse_config(path: str | Path | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read a flat JSON config, apply ``key=value`` overrides in order, and
    validate every key. ``data.<field>=value`` overrides one synthetic-data field."""
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    for text in overrides:
        key, value = _parse_override(text)
        if key.startswith("data."):
            data = raw.get("data", {})
            if not isinstance(data, dict):
                raise ConfigError(f"cannot override '{key}': data is a feature-file path")
            raw["data"] = {**data, key[5:]: value}
        else:
            raw[key] = value

    for key, value in raw.items():
        _check(SCHEMA, key, value)
    if isinstance(raw.get("data"), dict):
        for key, value in raw["data"].items():
            _check(DATA_SCHEMA, key, value, prefix="data.")

    kwargs = {("lam" if k == "lambda" else k): v for k, v in raw.items()}
    for key in ("sigma", "alpha1", "alpha2", "lam", "mask_ratio", "s_val", "lr", "init_scale"):
        if key in kwargs:
            kwargs[key] = float(kwargs[key])
    if "extractor_hidden" in kwargs:
        kwargs["extractor_hidden"] = tuple(kwargs["extractor_hidden"])
    try:
        return ExperimentConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def dump_config(config: ExperimentConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# artifacts


def emit_curves(metrics_text: str) -> str:
    """Turn metrics JSON Lines into a loss-curve CSV (17 significant digits)."""
    out = io.StringIO()
    out.write(",".join(CURVE_COLUMNS) + "\n")
    for lineno, line in enumerate(metrics_text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            cells = []
            for col in CURVE_COLUMNS:
                v = rec[col]
                if col == "epoch":
                    cells.append(str(int(v)))
                elif v is None:
                    cells.append("")
                else:
                    cells.append(format(float(v), ".17g"))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"metrics line {lineno}: malformed record ({exc})") from None
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _summary_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "mean", "std", "seeds"])
    for name, mean, std, seeds in rows:
        writer.writerow([name, format(mean, ".17g"), format(std, ".17g"), ";".join(str(s) for s in seeds)])
    return buf.getvalue()


def _write_run(out: Path, stem: str, metrics: Sequence[MetricsRecord]) -> None:
    text = metrics_jsonl(metrics)
    _write(out / f"{stem}.jsonl", text)
    _write(out / f"{stem}_curves.csv", emit_curves(text))


def _final_acc(metrics: Sequence[MetricsRecord]) -> float:
    acc = metrics[-1].target_acc
    return float("nan") if acc is None else acc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(config: ExperimentConfig, out: Path, args) -> int:
    ds = load_dataset(config)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_file(ds, out / "features.csv")
    write_feature_file(ds, out / "features_labeled.csv", include_heldout=True)
    print(f"wrote {len(ds)} samples to {out / 'features.csv'} (target domain {ds.target_domain})")
    return 0


def cmd_train(config: ExperimentConfig, out: Path, args) -> int:
    ds = load_dataset(config)
    result = train(config, ds, on_epoch=lambda m: log.info("epoch %d target_acc=%s", m.epoch, m.target_acc))
    _write_run(out, "metrics", result.metrics)
    _write(out / "summary.csv", _summary_csv([(config.variant, _final_acc(result.metrics), 0.0, [config.seed])]))
    save_checkpoint(result.model, out / "checkpoint.txt")
    print(f"final target accuracy {_final_acc(result.metrics):.4f}")
    return 0


def cmd_eval(config: ExperimentConfig, out: Path, args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ds = load_dataset(config)
    model = load_checkpoint(init_model(config, ds), args.checkpoint)
    res = evaluate(model, ds)
    payload = {"target_accuracy": res.target_accuracy, "domain_accuracy": res.domain_accuracy}
    _write(out / "eval.json", json.dumps(payload, indent=2) + "\n")
    print(json.dumps(payload))
    return 0


def cmd_gradcheck(config: ExperimentConfig, out: Path, args) -> int:
    reports = {}
    ok = True
    for variant in ("ssg", "linear"):
        rep = gradient_check(variant, seed=config.seed)
        passed = rep.passed(GRADCHECK_TOL)
        ok &= passed
        reports[variant] = dataclasses.asdict(rep) | {"passed": passed}
        print(
            f"{variant}: max relative error {rep.max_rel_error:.3e} "
            f"(worst {rep.worst_param}{list(rep.worst_index)}) {'PASS' if passed else 'FAIL'}"
        )
    _write(out / "gradcheck.json", json.dumps(reports, indent=2) + "\n")
    return 0 if ok else 1


def cmd_ablate(config: ExperimentConfig, out: Path, args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")]
    ds = load_dataset(config)
    result = run_ablation_suite(config, ds, seeds)
    for (name, seed), metrics in result.runs.items():
        _write_run(out / "runs", f"{name}_seed{seed}", metrics)
    _write(out / "summary.csv", _summary_csv([(r.name, r.mean, r.std, r.seeds) for r in result.rows]))
    for r in result.rows:
        print(f"{r.name:14s} {r.mean:.4f} +- {r.std:.4f}")
    return 0


def cmd_sweep_mask(config: ExperimentConfig, out: Path, args) -> int:
    ratios = [float(r) for r in args.ratios.split(",")]
    ds = load_dataset(config)
    sweep = run_mask_sweep(config, ds, ratios)
    lines = []
    for ratio, metrics in sweep.items():
        for m in metrics:
            lines.append(json.dumps({"mask_ratio": ratio, **dataclasses.asdict(m)}))
        _write(out / f"curves_ratio_{ratio:g}.csv", emit_curves(metrics_jsonl(metrics)))
    _write(out / "sweep.jsonl", "".join(line + "\n" for line in lines))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["mask_ratio", "l_ss", "domain_acc", "target_acc"])
    for ratio, metrics in sweep.items():
        last = metrics[-1]
        writer.writerow([f"{ratio:g}", format(last.l_ss, ".17g"), format(last.domain_acc, ".17g"), last.target_acc])
        print(f"mask_ratio={ratio:g} l_ss={last.l_ss:.4f} domain_acc={last.domain_acc:.3f} target_acc={last.target_acc}")
    _write(out / "summary.csv", buf.getvalue())
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "sweep-mask": cmd_sweep_mask,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssg", description="Self-supervised graph head for multi-source domain adaptation")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    parser.add_argument("--out", default="runs/latest", help="output directory")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--seeds", default="0,1,2", help="comma-separated seeds for ablate")
    parser.add_argument("--ratios", default=",".join(f"{r:g}" for r in DEFAULT_RATIOS), help="mask ratios for sweep-mask")
    parser.add_argument("--checkpoint", help="checkpoint file for eval")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def dispatch(args: argparse.Namespace) -> int:
    config = parse_config(args.config, args.overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", dump_config(config))
    return HANDLERS[args.command](config, out, args)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"ssg: config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ssg: I/O error on {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, FloatingPointError, IndexError) as exc:
        print(f"ssg: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
