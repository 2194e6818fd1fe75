"""Command line entry point: ``lipdeq {budget,sweep,lipcheck,solve,train,eval}``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from ..budget import CALIBRATION, SENSITIVITY, SWEEP_PARAMS, default_grid, overall_bound, sensitivity_sweep, sweep_csv
from ..solvers import write_trace_csv
from .config import ConfigFileError, load_config

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RATIO_SLACK = 1e-9  # tight ops (upsampling) hit their bound up to rounding
PRESETS = {"calibration": CALIBRATION, "sensitivity": SENSITIVITY}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", metavar="PATH", help="INI run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lipdeq", description="Lipschitz multiscale deep equilibrium models")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("budget", help="print the closed-form Lipschitz budget")
    _common(p)

    p = sub.add_parser("sweep", help="one-parameter sensitivity sweep as CSV")
    _common(p)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", help="comma-separated values (default: a built-in grid)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="fixed parameters (default: from config)")
    p.add_argument("--out", metavar="PATH", help="write CSV here instead of stdout")

    p = sub.add_parser("lipcheck", help="empirical vs analytic Lipschitz ratios")
    _common(p)
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--checkpoint", metavar="DIR")

    p = sub.add_parser("solve", help="residual trace CSV of one forward solve")
    _common(p)
    p.add_argument("--index", type=int, default=0, help="dataset sample to solve for")
    p.add_argument("--checkpoint", metavar="DIR")
    p.add_argument("--mode", choices=("eval", "train"), default="eval")

    p = sub.add_parser("train", help="train a model")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", metavar="DIR", help="default: <out_dir>/last")
    return parser


def _params(run, checkpoint):
    from ..model import build_model
    from .checkpoint import load_checkpoint

    return load_checkpoint(checkpoint) if checkpoint else build_model(run.model)


def cmd_budget(args, run, out):
    print(overall_bound(run.model.lip).format(), file=out)


def cmd_sweep(args, run, out):
    cfg = PRESETS[args.preset] if args.preset else run.model.lip
    if args.values:
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}") from None
        if args.param == "n":
            values = [int(v) for v in values]
    else:
        values = default_grid(args.param, cfg).tolist()
    rows = sensitivity_sweep(cfg, args.param, values)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            sweep_csv(rows, fh)
    else:
        out.write(sweep_csv(rows))


def cmd_lipcheck(args, run, out):
    from .lipcheck import format_table, model_row, op_suite

    if args.pairs < 1:
        raise UsageError("--pairs must be >= 1")
    rows = op_suite(args.pairs, seed=run.seed)
    rows.append(model_row(_params(run, args.checkpoint), args.pairs, seed=run.seed))
    print(format_table(rows), file=out)
    worst = max(r.ratio for r in rows)
    ok = worst <= 1.0 + RATIO_SLACK
    print(f"max ratio {worst:.6g} ({'ok' if ok else 'VIOLATION'})", file=out)
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_solve(args, run, out):
    from ..equilibrium import solve_forward
    from .data import load_dataset

    params = _params(run, args.checkpoint)
    ds = load_dataset(run.data, params.cfg, run.seed)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index must lie in [0, {len(ds)})")
    x = ds.images[args.index:args.index + 1]
    res = solve_forward(params, x, run.solver_fwd, mode=args.mode, rng=np.random.default_rng(run.seed))
    write_trace_csv({str(args.index): res.forward_report}, out)


def cmd_train(args, run, out):
    from .data import load_dataset
    from .train import METRICS_COLUMNS, evaluate, train

    ds = load_dataset(run.data, run.model, run.seed)
    params, rows = train(run, ds)
    if rows:
        last = rows[-1]
        print(", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in zip(METRICS_COLUMNS, asdict(last).values())), file=out)
    ev = evaluate(params, ds, run.solver_fwd)
    print(f"train accuracy={ev.accuracy:.4f} mean_nfes={ev.mean_nfes:.3f} "
          f"mean_residual={ev.mean_residual:.3g}", file=out)
    print(f"checkpoint: {os.path.join(run.out_dir, 'last')}", file=out)


def cmd_eval(args, run, out):
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .train import evaluate

    params = load_checkpoint(args.checkpoint or os.path.join(run.out_dir, "last"))
    ds = load_dataset(run.data, params.cfg, run.seed)
    ev = evaluate(params, ds, run.solver_fwd)
    print(f"accuracy={ev.accuracy:.4f} mean_nfes={ev.mean_nfes:.3f} mean_residual={ev.mean_residual:.3g} "
          f"converged={ev.converged_fraction:.3f}", file=out)


COMMANDS = {"budget": cmd_budget, "sweep": cmd_sweep, "lipcheck": cmd_lipcheck,
            "solve": cmd_solve, "train": cmd_train, "eval": cmd_eval}


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        run = load_config(args.config, args.overrides)
        status = COMMANDS[args.command](args, run, out)
        return EXIT_OK if status is None else status
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigFileError, FileNotFoundError) as exc:
        print(f"lipdeq: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime status
        logging.getLogger(__name__).debug("failure", exc_info=True)
        print(f"lipdeq: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
