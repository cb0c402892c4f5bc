"""Command-line entry point: gen-data, train, eval, ablate, inspect, curves.

Any ``--section.key VALUE`` (or ``--section.key=VALUE``) flag overrides that
key of the JSON run config. Exit codes: 0 ok, 2 usage, 3 data error,
4 numeric failure. Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import ckpt, data, metrics
from .config import ConfigError, RunConfig, apply_overrides
from .nst import FormatError
from .runner import AblationPlan, RunFailed, evaluate_delta, report_dict, run_plan, run_training
from .train import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"flag {tok} needs a value")
            i += 1
            val = extra[i]
        out[key] = val
        i += 1
    return out


def _load_config(path, overrides: dict[str, str], seed_section: str) -> RunConfig:
    doc = json.loads(Path(path).read_text()) if path else {}
    doc = apply_overrides(RunConfig.from_dict(doc).to_dict(), overrides)
    env = os.environ.get("SAMED_SEED")
    if env is not None:
        doc[seed_section]["seed"] = int(env)
    return RunConfig.from_dict(doc)


def cmd_gen_data(args, overrides) -> int:
    cfg = _load_config(args.config, overrides, "data")
    ds = data.generate(cfg.data)
    data.save(ds, args.out)
    print(f"wrote {sum(len(v) for v in ds.splits.values())} samples to {args.out}")
    return EXIT_OK


def cmd_train(args, overrides) -> int:
    cfg = _load_config(args.config, overrides, "train")
    ds = data.load(args.data)
    _, model, state = run_training(cfg, ds["train"], args.out, args.iterations)
    last = state.log[-1] if state.log else None
    msg = f"trained {state.iteration} iterations"
    if last:
        msg += f", final loss {last[-1]:.5f}"
    print(f"{msg}; delta at {Path(args.out) / 'delta.samed-delta'}")
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    if overrides:
        raise UsageError(f"eval takes no config overrides, got {sorted(overrides)}")
    ds = data.load(args.data)
    if args.split not in ds.splits:
        raise data.DataError(f"dataset has no split {args.split!r}")
    reports, mean = evaluate_delta(args.delta, ds[args.split], ds.class_names)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    if report.suffix == ".json":
        report.write_text(json.dumps(report_dict(reports, mean), indent=1, sort_keys=True) + "\n")
    else:
        report.write_text(metrics.to_csv(reports, mean, ds.class_names))
    table = metrics.to_table([], mean, ds.class_names)
    report.with_suffix(".txt").write_text(metrics.to_table(reports, mean, ds.class_names))
    print(table, end="")
    return EXIT_OK


def cmd_ablate(args, overrides) -> int:
    plan = AblationPlan.load(args.plan)
    if overrides:
        plan.base = apply_overrides(RunConfig.from_dict(plan.base).to_dict(), overrides)
    env = os.environ.get("SAMED_SEED")
    if env is not None:
        # a single seeded run per row replaces the plan's seed list
        plan.seeds = [int(env)]
    result = run_plan(plan, args.out, jobs=args.jobs)
    print(result["table"], end="")
    return EXIT_OK


def cmd_inspect(args, overrides) -> int:
    if overrides:
        raise UsageError("inspect takes no config overrides")
    info = ckpt.inspect(args.delta)
    print(f"config hash {info['config_hash']}  metadata {json.dumps(info['metadata'], sort_keys=True)}")
    rows = [[s["name"], "x".join(map(str, s["shape"])), str(s["count"]),
             "yes" if s["all_zero"] else "no"] for s in info["sections"]]
    print(metrics.format_table(["section", "shape", "count", "all zero"], rows), end="")
    print(f"stored {info['stored']} of {info['total']} parameters "
          f"(trainable fraction {100 * info['fraction']:.2f}%), {info['file_bytes']} bytes")
    return EXIT_OK


def _read_log(path: Path) -> list[dict]:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    if not rows or set(rows[0]) != {"iteration", "lr", "ce", "dice", "total"}:
        raise data.DataError(f"{path} is not a loss log (iteration,lr,ce,dice,total)")
    return rows


def _collect_logs(inputs: list[str]) -> dict[str, Path]:
    found: dict[str, Path] = {}
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            for rep in sorted(p.glob("runs/*/report.json")):
                label = json.loads(rep.read_text())["label"]
                seed = json.loads(rep.read_text())["seed"]
                found[f"{label}_seed{seed}"] = rep.parent / "loss_log.csv"
            if (p / "loss_log.csv").exists():
                found[p.name] = p / "loss_log.csv"
        elif p.exists():
            found[p.stem if p.stem != "loss_log" else p.parent.name] = p
        else:
            raise data.DataError(f"missing file {p}")
    if not found:
        raise data.DataError("no loss logs found")
    return found


def cmd_curves(args, overrides) -> int:
    if overrides:
        raise UsageError("curves takes no config overrides")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, path in _collect_logs(args.logs).items():
        rows = _read_log(path)
        ema, fname = None, "".join(c if c.isalnum() or c in "-_" else "_" for c in name).strip("_")
        with open(out / f"{fname}.csv", "w") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iteration", "lr", "ce", "dice", "total", "total_smoothed"])
            for r in rows:
                total = float(r["total"])
                ema = total if ema is None else args.smooth * ema + (1 - args.smooth) * total
                w.writerow([r["iteration"], r["lr"], r["ce"], r["dice"], r["total"], repr(ema)])
        print(f"{name}: {len(rows)} points -> {out / (fname + '.csv')}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="samed", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate the synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="customise a fresh base and save a delta")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, help="override train.early_stop_iter")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a delta on a dataset split")
    s.add_argument("--delta", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True, help=".csv or .json report path")
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run one ablation axis and print its table")
    s.add_argument("--plan", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("inspect", help="list the sections of a delta checkpoint")
    s.add_argument("--delta", required=True)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("curves", help="export loss curves as CSV")
    s.add_argument("logs", nargs="+", help="loss_log.csv files or ablation output dirs")
    s.add_argument("--out", required=True)
    s.add_argument("--smooth", type=float, default=0.9)
    s.set_defaults(func=cmd_curves)
    return p


def _fail(code: int, kind: str, message: str, run_id: str | None = None) -> int:
    doc = {"error": kind, "exit": code, "message": " ".join(str(message).split())}
    if run_id:
        doc["run_id"] = run_id
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def _classify(e: BaseException) -> int:
    if isinstance(e, (ConfigError, UsageError)):
        return EXIT_USAGE
    if isinstance(e, NumericError):
        return EXIT_NUMERIC
    if isinstance(e, (data.DataError, FormatError, ckpt.IncompatibleCheckpoint,
                      FileNotFoundError, json.JSONDecodeError)):
        return EXIT_DATA
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _split_overrides(extra)
        return args.func(args, overrides)
    except RunFailed as e:
        return _fail(_classify(e.cause), type(e.cause).__name__, str(e), e.run_id)
    except Exception as e:  # noqa: BLE001
        code = _classify(e)
        if code == 1 and not isinstance(e, (ValueError, KeyError, RuntimeError, OSError)):
            raise
        return _fail(code, type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
