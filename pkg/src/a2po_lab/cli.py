"""Command-line entry point: ``a2po-lab {train, ablate, verify-bounds}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .decmdp import DecMdp, DecMdpError
from .harness import ABLATION_AXES, BOUND_CHECKS, RunManifest, ablate, run_experiment, verify_bounds
from .oracle import OracleSizeError
from .environments import EnvSizeError
from .trainer import ConfigError

EXIT_CONFIG = 2
EXIT_SIZE = 3
EXIT_VIOLATION = 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="a2po-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a manifest for all its seeds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--output-dir")

    p = sub.add_parser("ablate", help="sweep one axis of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--output-dir")

    p = sub.add_parser("verify-bounds", help="check the exact improvement bounds on random instances")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mdp", help="DEC-MDP JSON file; policies are drawn at random")
    src.add_argument("--random", action="store_true", help="draw a fresh random MDP per trial")
    p.add_argument("--states", type=int, default=4)
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--actions", type=int, default=2)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.95)
    p.add_argument("--step", type=float, default=None,
                   help="logit perturbation from base to target (default: random per trial; 0 = identical)")
    p.add_argument("--report", help="write the bound reports as JSON here instead of stdout")
    return parser


def _train(args) -> int:
    manifest = RunManifest.load(args.manifest, args.overrides)
    summary = run_experiment(manifest, args.output_dir)
    print(json.dumps({k: summary[k] for k in ("n_seeds", "final_J_mean", "final_J_std", "initial_J_mean")}))
    return 0


def _ablate(args) -> int:
    manifest = RunManifest.load(args.manifest, args.overrides)
    table = ablate(manifest, args.axis, output_dir=args.output_dir)
    for row in table:
        print(f"{row['axis']}={row['value']}: final_J mean {row['final_J_mean']} std {row['final_J_std']}")
    return 0


def _verify(args) -> int:
    if args.trials < 1:
        raise ConfigError("trials", "must be >= 1")
    mdp = DecMdp.load(args.mdp) if args.mdp else None
    reports, tally = verify_bounds(args.trials, args.seed, mdp, args.states, args.agents, args.actions,
                                   args.lam, args.step)
    payload = json.dumps([r.to_dict() for r in reports])
    if args.report:
        Path(args.report).write_text(payload + "\n")
    else:
        print(payload)
    failed = False
    for name in BOUND_CHECKS:
        passed, applicable = tally[name]
        status = "PASS" if passed == applicable else "FAIL"
        failed |= passed != applicable
        print(f"{status} {name}: {passed}/{applicable}")
    return EXIT_VIOLATION if failed else 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"train": _train, "ablate": _ablate, "verify-bounds": _verify}
    try:
        return handlers[args.command](args)
    except DecMdpError as exc:
        print(f"error: invalid MDP field '{exc.field}': {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: invalid config field '{exc.field}': {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OracleSizeError, EnvSizeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIZE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
