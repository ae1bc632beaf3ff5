"""Command-line entry point.

    reno run    --config exp.ini [--override key=value ...] [--out DIR] [--emit-every K]
    reno sweep  --config exp.ini [--jobs N] ...
    reno loo    --config exp.ini [--held-out NAME ...] [--jobs N] ...
    reno ablate --config exp.ini [--mask a+b ...] [--all-masks] [--jobs N] ...

Exit status: 0 on success, 2 on a config schema violation, 3 when a run aborts
on a non-finite objective, 1 on any other error. Errors are reported on stderr
as a single JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from ..optimizer import NumericAbort
from .config import ConfigError, ExperimentConfig, load_config
from .io import write_json, write_table_csv
from .studies import (StudyResult, all_nonempty_masks, run_and_write, run_leave_one_out,
                      run_reward_ablation, run_sweep, singleton_and_full_masks)

log = logging.getLogger("reno")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config file (INI)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="section.key=value, applied before validation (repeatable)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for multi-run commands")
    common.add_argument("--out", default=None, help="output directory (overrides output.directory)")
    common.add_argument("--emit-every", type=int, default=None, metavar="K",
                        help="also write an intermediate frame every K steps")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="reno", description="Reward-based initial-noise optimization.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="single optimization run")
    sub.add_parser("sweep", parents=[common], help="one run per seed (optimizer.seed .. + n_seeds)")
    loo = sub.add_parser("loo", parents=[common], help="leave-one-out reward study")
    loo.add_argument("--held-out", action="append", default=None, metavar="NAME",
                     help="term to hold out (repeatable; default: every term)")
    loo.add_argument("--n-seeds", type=int, default=None)
    ab = sub.add_parser("ablate", parents=[common], help="reward-subset ablation")
    ab.add_argument("--mask", action="append", default=None, metavar="A+B",
                    help="terms to optimize, joined by '+' (repeatable; default: singletons and all)")
    ab.add_argument("--all-masks", action="store_true", help="every non-empty subset of terms")
    ab.add_argument("--n-seeds", type=int, default=None)
    sub.choices["sweep"].add_argument("--n-seeds", type=int, default=None)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.override)
    out = cfg.output
    if args.out is not None:
        out = replace(out, directory=args.out)
    if args.emit_every is not None:
        if args.emit_every < 0:
            raise ConfigError("--emit-every", "must be >= 0")
        out = replace(out, emit_every=args.emit_every)
    return replace(cfg, output=out)


def _write_study(result: StudyResult, cfg: ExperimentConfig, out: Path, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    names = result.term_names
    write_table_csv(["label", "term", "initial", "final", "change", "improve_pct"],
                    result.table(), out / f"{stem}.csv")
    run_rows = [[r.label, r.seed, r.best_t, r.best_reward, r.full_initial, r.full_final,
                 *(r.initial[n] for n in names), *(r.final[n] for n in names)] for r in result.runs]
    write_table_csv(["label", "seed", "best_t", "best_reward", "full_initial", "full_final",
                     *(f"initial_{n}" for n in names), *(f"final_{n}" for n in names)],
                    run_rows, out / f"{stem}_runs.csv")
    write_json({"experiment": cfg.echo(), "kind": result.kind, "aggregates": result.aggregates,
                "runs": [asdict(r) for r in result.runs]}, out / f"{stem}.json")


def _print_table(result: StudyResult) -> None:
    for label, term, ini, fin, change, pct in result.table():
        print(f"{label:<40} {term:<18} {ini:>10.4f} -> {fin:>10.4f}  change {change:+.4f}  improve {pct:5.1f}%")


def _dispatch(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output.directory)
    if args.jobs < 1:
        raise ConfigError("--jobs", "must be >= 1")
    if args.command == "run":
        s = run_and_write(cfg, cfg.optimizer.seed, out)
        print(f"best reward {s.best_reward:.6g} at t={s.best_t} (initial {s.full_initial:.6g}); wrote {out}")
    elif args.command == "sweep":
        result = run_sweep(cfg, args.n_seeds, args.jobs, out_dir=out)
        _write_study(result, cfg, out, "sweep")
        _print_table(result)
    elif args.command == "loo":
        held = args.held_out or cfg.criterion.names
        for h in held:
            if h not in cfg.criterion.names:
                raise ConfigError("--held-out", f"unknown term {h!r}; have {cfg.criterion.names}")
        result = run_leave_one_out(cfg, held, args.n_seeds, args.jobs)
        _write_study(result, cfg, out, "loo")
        _print_table(result)
    else:
        names = cfg.criterion.names
        if args.all_masks:
            masks = all_nonempty_masks(names)
        elif args.mask:
            masks = [tuple(x for x in m.split("+") if x) for m in args.mask]
            for m in masks:
                if not m:
                    raise ConfigError("--mask", "masks must name at least one term")
                bad = [x for x in m if x not in names]
                if bad:
                    raise ConfigError("--mask", f"unknown term(s) {bad}; have {names}")
        else:
            masks = singleton_and_full_masks(names)
        result = run_reward_ablation(cfg, masks, args.n_seeds, args.jobs)
        _write_study(result, cfg, out, "ablation")
        _print_table(result)
    return EXIT_OK


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), field=exc.field)
    except NumericAbort as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc), t=exc.t, per_term=exc.per_term)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(EXIT_ERROR, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
