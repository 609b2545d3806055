"""Command-line entry point for the fairthresh experiment harness.

Exit codes: 0 success, 1 a run, cell or calibration failed, 2 bad configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import write_json
from .data import SCHEMAS, EncodingError, IngestionError, ProvenanceError, TrainingError, build_env_pack
from .harness import (
    CalibrationError,
    ExperimentConfig,
    apply_override,
    calibrate_env,
    plot_data,
    preset,
    preset_names,
    run_experiment,
    run_oracle,
    stress_sweep,
    summarize,
    tune_pd,
)
from .policy import ConfigurationError

log = logging.getLogger("fairthresh")


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_json(Path(args.config).read_text())
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ConfigurationError("give --preset or --config")
    for item in args.override or []:
        cfg = apply_override(cfg, item)
    cfg.validate()
    return cfg


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=preset_names())
    p.add_argument("--config", help="JSON experiment config (e.g. a resolved config.json)")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="dotted config key, value parsed as JSON when possible; repeatable")
    p.add_argument("--root", default=".", help="output root; run directories are created below it")


def cmd_pack(args) -> int:
    pack = build_env_pack(args.dataset, args.csv, args.out)
    prov = pack["provenance"]
    print(f"wrote {args.out}: {prov['rows']} rows (raw {prov['rows_raw']}), sha256 {prov['sha256'][:12]}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    res = run_experiment(cfg, args.root)
    for s in res.summaries.values():
        r = s.row(cfg.task)
        print(f"{r['algorithm']:>14}  reward {r['reward_mean']:.4f}  dp {r['dp_mean']:.4f}  viol {r['viol_mean']:.2f}")
    for algo, seed, msg in res.failures:
        print(f"FAILED {algo} seed {seed}: {msg}", file=sys.stderr)
    print(f"run directory: {res.directory}")
    return 0 if res.ok else 1


def cmd_oracle(args) -> int:
    cfg = _load_config(args)
    curve = run_oracle(cfg, args.root)
    orc = curve.oracle()
    if orc is None:
        print("no feasible threshold on the grid")
    else:
        print(f"oracle theta {orc['theta']:.4f}: reward {orc['reward']:.4f}, dp {orc['dp_gap']:.4f}, acc {orc['accept_rate']:.4f}")
    return 0


def cmd_tune_pd(args) -> int:
    cfg = _load_config(args)
    out = tune_pd(cfg, args.root)
    print(f"selected eta={out.eta} mu={out.mu} ({out.rule})")
    return 0


def cmd_stress(args) -> int:
    cfg = _load_config(args)
    out = stress_sweep(cfg, args.root)
    print(json.dumps(out.winrate, indent=2))
    return 0


def _parse_search(items) -> dict:
    search = {}
    for item in items or []:
        key, _, vals = item.partition("=")
        search[key] = [json.loads(v) for v in vals.split(",") if v]
    return search


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    try:
        res = calibrate_env(cfg, _parse_search(args.search), args.min_feasible)
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        for d in exc.diagnostics:
            print(json.dumps(d), file=sys.stderr)
        return 1
    cal = cfg.replace(env={**cfg.env, **res.params})
    out = Path(args.out or f"calibrated_{cfg.task}.json")
    out.write_text(cal.to_json())
    write_json(out.with_suffix(".diagnostics.json"), res.diagnostics)
    print(f"accepted {res.params}; config written to {out}")
    return 0


def cmd_summarize(args) -> int:
    rows = summarize(args.dirs)
    for r in rows:
        print(f"{r['task']:>7} {r['algorithm']:>14}  reward {r['reward_mean']:.4f}  dp {r['dp_mean']:.4f}  viol {r['viol_mean']:.2f}")
    return 0


def cmd_plot_data(args) -> int:
    for p in plot_data(args.dirs):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fairthresh", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pack", help="build an environment pack from a dataset CSV")
    p.add_argument("--dataset", required=True, choices=sorted(SCHEMAS))
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pack)

    for name, fn, help_ in (
        ("run", cmd_run, "run all (algorithm, seed) cells of an experiment"),
        ("oracle", cmd_oracle, "fixed-threshold oracle sweep"),
        ("tune-pd", cmd_tune_pd, "primal-dual step-size grid and selection"),
        ("stress", cmd_stress, "stress sweep and win rates"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_config_args(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("calibrate", help="search env constants for binding constraints")
    _add_config_args(p)
    p.add_argument("--search", action="append", metavar="PARAM=V1,V2,...", required=True)
    p.add_argument("--min-feasible", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_calibrate)

    for name, fn in (("summarize", cmd_summarize), ("plot-data", cmd_plot_data)):
        p = sub.add_parser(name)
        p.add_argument("dirs", nargs="+")
        p.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigurationError, IngestionError, EncodingError, ProvenanceError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
