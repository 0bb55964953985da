"""Command-line entry point: ``fedltp run | accountant | pretrain``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import accountant as acct
from .config import SCHEME_ALIASES, parse_config, with_overrides
from .errors import FedLTPError
from .lth import generate_winning_tickets, save_tickets
from .metrics import bits_to_mb
from .model import mlp_layers
from .orchestrator import build_datasets, run_experiment

log = logging.getLogger("fedltp")


def _cmd_run(args) -> int:
    config = with_overrides(parse_config(args.config), seed=args.seed, scheme=args.scheme)
    result = run_experiment(config, args.out, fmt=args.format)
    s = result.summary
    print(f"scheme {config.scheme}  seed {config.seed}  d {s['d']}  q_tilde {s['q_tilde']:.6g}")
    print(f"rounds run {s['rounds_run']}  stop reason {s['stop_reason']}")
    if result.state.records:
        last = result.state.records[-1]
        print(f"epsilon {last.epsilon:.6g} (alpha {last.best_alpha}, {s['composition_mode']})")
    print(f"final round {s['final_round']}  test accuracy {s['final_test_accuracy']:.4f}")
    print(f"communication {s['comm_bits_total']:.0f} bits ({bits_to_mb(s['comm_bits_total']):.4f} MB)")
    if result.metrics_path is not None:
        print(f"metrics written to {result.metrics_path}")
    return 0


def _cmd_accountant(args) -> int:
    ledger = acct.PrivacyLedger(tau=args.tau, q=args.q, sigma=args.sigma,
                                lambda_val=args.lambda_val, delta=args.delta,
                                composition_mode=args.mode, validation_mode=args.validation_mode)
    print(f"# sigma={args.sigma} q={args.q} tau={args.tau} lambda_val={args.lambda_val} "
          f"delta={args.delta} mode={args.mode} validation={args.validation_mode}")
    print("t\tepsilon\talpha")
    for t in range(args.rounds):
        eps, alpha = acct.accumulate(ledger.advance(t + 1))
        print(f"{t}\t{eps:.10g}\t{alpha:g}")
    return 0


def _cmd_pretrain(args) -> int:
    config = parse_config(args.config)
    out = args.out or config.tickets_file
    if not out:
        raise FedLTPError("no output path: pass --out or set tickets_file in the config")
    public, private = build_datasets(config)
    layers = mlp_layers([private.dim, *config.hidden, private.class_count])
    tickets = generate_winning_tickets(
        public.features, public.labels, layers, config.tickets, config.lth_iterations,
        config.prune_degree, config.seed, lr=config.lth_lr,
        batch_size=config.lth_batch_size, mode=config.prune_mode)
    save_tickets(out, tickets, layers)
    for j, t in enumerate(tickets):
        print(f"ticket {j}: score {t.score}/{len(public)}  retention {t.retention:.4f}")
    print(f"tickets written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedltp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one federated experiment")
    run.add_argument("--config", required=True, help="config file, or a preset name such as 'demo'")
    run.add_argument("--seed", type=int)
    run.add_argument("--scheme", choices=sorted(SCHEME_ALIASES))
    run.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    run.add_argument("--format", choices=("csv", "json"), default="csv")
    run.set_defaults(func=_cmd_run)

    ac = sub.add_parser("accountant", help="print the epsilon(t) table")
    ac.add_argument("--sigma", type=float, required=True)
    ac.add_argument("--q", type=float, required=True, help="local sampling rate B/|train|")
    ac.add_argument("--tau", type=int, required=True, help="local steps per round")
    ac.add_argument("--rounds", type=int, required=True)
    ac.add_argument("--lambda-val", type=float, default=math.inf,
                    help="Laplace scale of validation releases (default: no validation cost)")
    ac.add_argument("--delta", type=float, default=1e-3)
    ac.add_argument("--mode", choices=(acct.PER_STEP, acct.PER_ROUND), default=acct.PER_STEP)
    ac.add_argument("--validation-mode", choices=(acct.VALIDATION_PAPER, acct.VALIDATION_ZCDP),
                    default=acct.VALIDATION_PAPER)
    ac.set_defaults(func=_cmd_accountant)

    pre = sub.add_parser("pretrain", help="generate winning tickets and cache them")
    pre.add_argument("--config", required=True)
    pre.add_argument("--out", help="ticket file (default: tickets_file from the config)")
    pre.set_defaults(func=_cmd_pretrain)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedLTPError as exc:
        print(f"fedltp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fedltp: I/O error: {exc}", file=sys.stderr)
        return 6


if __name__ == "__main__":
    sys.exit(main())
