"""Experiment entry points: python -m onboardsim <subcommand> --config <file>.

Exit codes: 0 success, 2 configuration error, 3 missing/invalid data,
4 invariant-audit failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, ExperimentConfig
from . import experiments
from .experiments import DataError


def _config_from(args) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config)
    if args.out_dir:
        config.out_dir = args.out_dir
    return config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="onboardsim",
        description="Onboarding preference-elicitation simulation pipelines",
    )
    parser.add_argument("--config", required=True, help="experiment config (JSON)")
    parser.add_argument("--out-dir", help="override the configured output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-world", help="build the artist corpus and sample ground-truth users")
    sub.add_parser("collect", help="collect onboarding logs under the behavior policies")
    sub.add_parser("train", help="train the state/session generators and the pCTR model")
    p_sim = sub.add_parser("simulate", help="replay a test policy through the service layer")
    p_sim.add_argument("--policy", help="policy id from the config's test policies")
    p_sweep = sub.add_parser("sweep", help="pCTR/coverage trade-off sweep")
    p_sweep.add_argument("--lambdas", help="comma-separated override of sweep lambdas")
    sub.add_parser("ordering-study", help="launch vs small-experiment vs simulation orderings")
    p_audit = sub.add_parser("audit-isolation", help="verify simulated-data isolation")
    p_audit.add_argument("--sessions", type=int, default=1000)
    sub.add_parser("pipeline", help="run gen-world, collect, train, and simulate end to end")

    args = parser.parse_args(argv)
    try:
        config = _config_from(args)
        if args.command == "gen-world":
            experiments.cmd_gen_world(config)
            out = {"status": "ok", "out_dir": config.out_dir}
        elif args.command == "collect":
            train, heldout = experiments.cmd_collect(config)
            out = {"status": "ok", "train_records": len(train),
                   "heldout_records": len(heldout)}
        elif args.command == "train":
            history = experiments.cmd_train(config)
            out = {"status": "ok",
                   "stategen_epochs": len(history["stategen"]) - 1,
                   "sessiongen_epochs": len(history["sessiongen"])}
        elif args.command == "simulate":
            spec = _pick_policy(config, args.policy)
            out = {"status": "ok", **experiments.cmd_simulate(config, spec)}
        elif args.command == "sweep":
            lambdas = ([float(x) for x in args.lambdas.split(",")]
                       if args.lambdas else None)
            rows = experiments.cmd_sweep(config, lambdas)
            out = {"status": "ok", "rows": len(rows)}
        elif args.command == "ordering-study":
            summary = experiments.cmd_ordering_study(config)
            out = {"status": "ok",
                   "sim_matches_launch": summary["n_sim_matches_launch"],
                   "reps_with_partition_disagreement":
                       summary["n_reps_with_partition_disagreement"]}
        elif args.command == "audit-isolation":
            audit = experiments.cmd_audit_isolation(config, n_sessions=args.sessions)
            out = {"status": "ok" if audit["passed"] else "audit-failed", **audit}
            if not audit["passed"]:
                print(json.dumps(out, sort_keys=True))
                return 4
        else:  # pipeline
            result = experiments.run_pipeline(config)
            out = {"status": "ok", "reports": result["reports"]}
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(out, sort_keys=True, default=str))
    return 0


def _pick_policy(config: ExperimentConfig, name: str | None):
    if name is None:
        return config.test_policies[0]
    for spec in config.test_policies:
        if experiments.policy_spec_id(spec) == name:
            return spec
    raise ConfigError(f"policy {name!r} is not in the config's test policies")


if __name__ == "__main__":
    sys.exit(main())
