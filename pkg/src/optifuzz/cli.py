"""Command line entry points: fuzz campaigns, bug replay, corpus diversity."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .campaign import CampaignConfig, diversity_report, replay, run_fuzz_loop
from .difftest import ConfigError
from .graphs import NeedTwoModels, ParseError
from .optimizer import Fault
from .tensors import Shape

EXIT_OK = 0
EXIT_CONFIG = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optifuzz",
        description="Differential fuzzer for tensor-computation-graph optimizers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fuzz = sub.add_parser("fuzz", help="run a fuzzing campaign")
    fuzz.add_argument("--config", help="JSON config file mirroring the campaign config")
    budget = fuzz.add_mutually_exclusive_group()
    budget.add_argument("--rounds", type=int)
    budget.add_argument("--duration", type=float, help="budget in seconds")
    fuzz.add_argument("--seed", type=int)
    fuzz.add_argument("--epsilon", type=float)
    fuzz.add_argument("--chain-length", type=int)
    fuzz.add_argument("--input-shape", help="N,C,H,W")
    fuzz.add_argument(
        "--fault",
        action="append",
        choices=[f.value for f in Fault],
        help="enable an injectable optimizer fault (repeatable)",
    )
    fuzz.add_argument("--disable-tensor-mutation", action="store_true")
    fuzz.add_argument("--disable-model-mutation", action="store_true")
    fuzz.add_argument(
        "--backend",
        default=None,
        help="'builtin' (default) or 'extern:<command>' for a wire-protocol subprocess",
    )
    fuzz.add_argument("--out", required=True, help="output directory")

    rep = sub.add_parser("replay", help="re-classify a stored model/tensor pair")
    rep.add_argument("model")
    rep.add_argument("tensor")
    rep.add_argument("--epsilon", type=float)
    rep.add_argument("--fault", action="append", choices=[f.value for f in Fault])
    rep.add_argument("--backend", default=None)

    div = sub.add_parser("diversity", help="mean edit distance over a model directory")
    div.add_argument("models_dir")
    return parser


def _campaign_config(args: argparse.Namespace) -> CampaignConfig:
    base: dict = {}
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            base = json.load(fh)
    cfg = CampaignConfig.from_json_dict(base) if base else None

    overrides: dict = {}
    if args.rounds is not None:
        overrides["rounds"] = args.rounds
        overrides["duration_s"] = None
    elif args.duration is not None:
        overrides["duration_s"] = args.duration
        overrides["rounds"] = None
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epsilon is not None:
        overrides["epsilon"] = args.epsilon
    if args.chain_length is not None:
        overrides["chain_length"] = args.chain_length
    if args.input_shape is not None:
        dims = tuple(int(d) for d in args.input_shape.split(","))
        overrides["input_shape"] = Shape.of(dims)
    if args.disable_tensor_mutation:
        overrides["disable_tensor_mutation"] = True
    if args.disable_model_mutation:
        overrides["disable_model_mutation"] = True
    overrides["out_dir"] = args.out
    if args.backend:
        overrides["backend_command"] = _parse_backend(args.backend)
    if args.fault:
        faults = frozenset(Fault(f) for f in args.fault)
        optimize = (cfg.optimize if cfg else CampaignConfig(rounds=1).optimize)
        overrides["optimize"] = replace(optimize, faults=faults)

    if cfg is None:
        if "rounds" not in overrides and "duration_s" not in overrides:
            overrides["rounds"] = 100  # default budget
        overrides.setdefault("rounds", None)
        overrides.setdefault("duration_s", None)
        return CampaignConfig(**overrides)
    return replace(cfg, **overrides)


def _parse_backend(spec: str) -> str | None:
    if spec == "builtin":
        return None
    if spec.startswith("extern:"):
        command = spec.split(":", 1)[1]
        if not command:
            raise ConfigError("extern backend needs a command")
        return command
    raise ConfigError(f"unknown backend {spec!r}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "fuzz":
            cfg = _campaign_config(args)
            report = run_fuzz_loop(cfg)
            bugs = sum(report.unique_bugs.values())
            print(
                f"completed {report.rounds_completed} rounds: "
                f"{bugs} unique bug(s) {report.unique_bugs}, "
                f"{report.discarded_rounds} discarded"
            )
            print(f"report written to {args.out}/report.json")
            return EXIT_OK
        if args.command == "replay":
            faults = frozenset(Fault(f) for f in args.fault) if args.fault else frozenset()
            cfg = CampaignConfig(
                rounds=1,
                epsilon=args.epsilon if args.epsilon is not None else 0.15,
                optimize=replace(CampaignConfig(rounds=1).optimize, faults=faults),
                backend_command=_parse_backend(args.backend) if args.backend else None,
            )
            result = replay(args.model, args.tensor, cfg)
            if result.bug is not None:
                print(f"classification: {result.status.value}")
                for pair, value in sorted(result.bug.inconsistency_values.items()):
                    print(f"  inconsistency {pair}: {value}")
                if result.bug.crash_signature:
                    sig = result.bug.crash_signature
                    print(f"  crash: {sig.error_kind} [{sig.op_kind}] {sig.message_template}")
            else:
                print(f"classification: {result.status.value} (no bug)")
                if result.discard_reason:
                    print(f"  reason: {result.discard_reason}")
            return EXIT_OK
        if args.command == "diversity":
            med, histogram = diversity_report(args.models_dir)
            print(f"mean edit distance: {med:.4f}")
            for distance, count in histogram.items():
                print(f"  distance {distance}: {count} pair(s)")
            return EXIT_OK
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ParseError, NeedTwoModels, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
