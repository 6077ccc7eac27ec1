"""Command-line front end: ``privneg negotiate | group | pipeline | bench``.

Exit codes: 0 success (or GRANTED), 1 error or bad usage, 2 REJECTED,
3 group candidate space over the cap.
"""

from __future__ import annotations

import argparse
import csv
import math
import statistics
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .errors import CombinatorialLimit, PrivnegError
from .group import DEFAULT_CAP, CandidatePolicy, GroupResult, load_group
from .negotiation import Outcome, run_negotiation, serve_owner
from .pipeline import (
    Mode,
    PipelineConfig,
    StageDelays,
    load_delays,
    run_pipeline,
    synthetic_frames,
    write_milestones,
)
from .policy import FormFactorSet, load_policy
from .scenarios import all_setups
from .transport import LatencyProfile, Scenario, load_profile
from .utility import ScoringModel, load_scoring

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_REJECTED = 2
EXIT_LIMIT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _weights(text: str) -> tuple[float, float]:
    try:
        w_b, w_pe = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected w_b,w_pe, got {text!r}") from None
    if not all(math.isfinite(w) and w > 0 for w in (w_b, w_pe)):
        raise argparse.ArgumentTypeError("weights must be positive and finite")
    return w_b, w_pe


def _scoring(path: Optional[str]) -> ScoringModel:
    return load_scoring(path) if path else ScoringModel()


def _fmt_ms(value: float) -> str:
    return f"{value:.3f}"


# --- negotiate -------------------------------------------------------------------

def print_outcome(outcome: Outcome, out=None) -> None:
    out = out or sys.stdout
    if outcome.granted:
        print(f"GRANTED {outcome.rule}", file=out)
    else:
        print("REJECTED", file=out)
    print(f"phases: {outcome.phases}", file=out)
    print("transcript:", file=out)
    for entry in outcome.transcript:
        print(f"  {entry}", file=out)
    print("milestones (ms):", file=out)
    for ms in outcome.milestones:
        print(f"  {ms.label:<20} {_fmt_ms(ms.elapsed_ms)}", file=out)
    if outcome.owner_milestones:
        print("owner milestones (ms):", file=out)
        for ms in outcome.owner_milestones:
            print(f"  {ms.label:<20} {_fmt_ms(ms.elapsed_ms)}", file=out)
    for v in outcome.violations:
        print(f"violation: {v}", file=out)
    print(f"total_ms: {_fmt_ms(outcome.total_ms)}", file=out)


def cmd_negotiate(args) -> int:
    user = load_policy(args.user_policy, strict=args.strict)
    owner = load_policy(args.owner_policy, strict=args.strict)
    model = _scoring(args.scoring)
    profile = load_profile(args.profile)
    outcome = run_negotiation(
        user, owner, args.data_type, model, args.transport,
        profile=profile, address=args.address, pushes=args.pushes, seed=args.seed,
        negotiate=not args.no_negotiate,
    )
    print_outcome(outcome)
    return EXIT_OK if outcome.granted else EXIT_REJECTED


# --- group -----------------------------------------------------------------------

def print_group(result: GroupResult, out=None, show_frontier: bool = False) -> None:
    out = out or sys.stdout
    print("boundary:", file=out)
    for f in result.boundary.factors:
        print(f"  {f}", file=out)
    if result.initial_boundary != result.boundary:
        print("boundary before second round:", file=out)
        for f in result.initial_boundary.factors:
            print(f"  {f}", file=out)
    print(f"candidates: {result.candidate_count}", file=out)
    print(f"pareto frontier: {len(result.pareto)}", file=out)
    for c in result.pareto if show_frontier else ():
        print(f"  exposure={c.score_exposure:g} benefit={c.score_benefit:g}  {c}", file=out)
    print(f"chosen: {result.chosen}", file=out)
    print(f"  exposure={result.chosen.score_exposure:g} benefit={result.chosen.score_benefit:g}", file=out)
    print(f"contacts: {len(result.contacts)}", file=out)
    for c in result.contacts:
        print(f"  {c.user_id} on {c.sensor}: {c.proposal} -> {c.verdict.value}", file=out)
    print(f"notifications: {len(result.notifications)}", file=out)
    for n in result.notifications:
        print(f"  notify {n.user_id} ({len(n.frame)} bytes)", file=out)


def cmd_group(args) -> int:
    session = load_group(args.group_file)
    try:
        result = session.run(_scoring(args.scoring), args.weights, args.cap)
    except CombinatorialLimit as exc:
        print(f"error: {exc.cardinality} candidates exceed the cap of {exc.cap}", file=sys.stderr)
        return EXIT_LIMIT
    print_group(result, show_frontier=args.show_frontier)
    return EXIT_OK


# --- pipeline --------------------------------------------------------------------

def _default_policy() -> CandidatePolicy:
    return CandidatePolicy((FormFactorSet("image"),), (True,))


def _pipeline_policy(args) -> Optional[CandidatePolicy]:
    if args.group:
        return load_group(args.group).run(_scoring(args.scoring)).chosen
    return _default_policy()


def _mean_total(records) -> float:
    return statistics.fmean(r.total_ms for r in records) if records else 0.0


def cmd_pipeline(args) -> int:
    mode = Mode.parse(args.mode)
    delays = load_delays(args.delays_file) if args.delays_file else StageDelays()
    if args.frames < 1:
        raise PrivnegError("--frames must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy = _pipeline_policy(args) if mode is not Mode.NO_PRIVACY else None
    config = PipelineConfig(mode, delays, queue_capacity=args.queue_capacity)
    records = run_pipeline(
        config, synthetic_frames(args.frames, args.seed), policy,
        store_dir=out / "store", out_dir=out / "out",
    )
    write_milestones(out / "milestones.csv", records)
    total = _mean_total(records)
    line = f"{mode.value}: frames={len(records)} total_ms_per_frame={_fmt_ms(total)}"
    if args.baseline:
        base_records = run_pipeline(PipelineConfig(Mode.NO_PRIVACY, delays), synthetic_frames(args.frames, args.seed))
        base = _mean_total(base_records)
        line += f" baseline_ms={_fmt_ms(base)} overhead_pct={(total - base) / base * 100:.2f}"
    print(line)
    return EXIT_OK


# --- bench -----------------------------------------------------------------------

BENCH_HEADER = ["scenario", "flow", "milestone", "n", "mean_ms", "stderr_ms"]


def _stderr(values: Sequence[float]) -> float:
    if len(set(values)) == 1:
        return 0.0
    return statistics.stdev(values) / math.sqrt(len(values))


def bench_rows(scenarios: Sequence[str], repeat: int, transport: str, model: ScoringModel, seed: int = 0) -> list[list]:
    """Repeat every canonical flow ``repeat`` times; aggregate each milestone."""
    rows = []
    for scenario_name in scenarios:
        for setup in all_setups():
            samples: dict[str, list[float]] = {}
            if transport == "sim":
                profile = LatencyProfile.default(Scenario.parse(scenario_name))
                runs = [
                    run_negotiation(setup.user, setup.owner, setup.data_type, model, "sim",
                                    profile=profile, seed=seed, negotiate=setup.negotiate)
                    for _ in range(repeat)
                ]
            else:
                with serve_owner("127.0.0.1:0", setup.owner, model, seed=seed,
                                 negotiate=setup.negotiate) as listener:
                    runs = [
                        run_negotiation(setup.user, setup.owner, setup.data_type, model, "tcp",
                                        address=listener.address, seed=seed, negotiate=setup.negotiate)
                        for _ in range(repeat)
                    ]
            for outcome in runs:
                for ms in outcome.milestones:
                    samples.setdefault(ms.label, []).append(ms.elapsed_ms)
                samples.setdefault("total", []).append(outcome.total_ms)
            for label, values in samples.items():
                rows.append([scenario_name, setup.flow.value, label, len(values),
                             _fmt_ms(statistics.fmean(values)), _fmt_ms(_stderr(values))])
    return rows


def cmd_bench(args) -> int:
    if args.repeat < 2:
        print("error: --repeat must be at least 2 to report a standard error", file=sys.stderr)
        return EXIT_ERROR
    if args.transport == "tcp":
        scenarios = ["loopback"]
    elif args.scenario == "all":
        scenarios = [s.value for s in Scenario]
    else:
        scenarios = [Scenario.parse(args.scenario).value]
    rows = bench_rows(scenarios, args.repeat, args.transport, _scoring(args.scoring), args.seed)
    fh = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BENCH_HEADER)
        writer.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# --- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="privneg", description="Privacy policy negotiation for IoT data exchange.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("negotiate", help="negotiate one data item between a user and an owner")
    p.add_argument("user_policy")
    p.add_argument("owner_policy")
    p.add_argument("data_type")
    p.add_argument("--profile", default="user",
                   help="latency profile: user, edge, cloud, or a profile XML file (default: user)")
    p.add_argument("--scoring", help="scoring model XML file")
    p.add_argument("--transport", choices=("sim", "tcp"), default="sim")
    p.add_argument("--address", help="owner server host:port for tcp (default: temporary loopback server)")
    p.add_argument("--pushes", type=int, default=1, help="data frames to relay on grant")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-negotiate", action="store_true", help="run the no-negotiation baseline")
    p.add_argument("--strict", action="store_true", help="reject malformed policy files instead of repairing them")
    p.set_defaults(func=cmd_negotiate)

    p = sub.add_parser("group", help="aggregate and optimise a group policy")
    p.add_argument("group_file")
    p.add_argument("--scoring")
    p.add_argument("--weights", type=_weights, default=(1.0, 1.0), help="w_b,w_pe (default 1,1)")
    p.add_argument("--cap", type=int, default=DEFAULT_CAP, help="maximum candidate count")
    p.add_argument("--show-frontier", action="store_true", help="list every frontier candidate")
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("pipeline", help="run the capture/store/filter/publish pipeline")
    p.add_argument("--mode", default="NoPrivacy", help="NoPrivacy, PrivacyNoUpdate or PrivacyWithUpdate")
    p.add_argument("--delays-file")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", action="store_true", help="also run NoPrivacy and report the overhead")
    p.add_argument("--group", help="group file whose chosen policy the filter applies")
    p.add_argument("--scoring")
    p.add_argument("--queue-capacity", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("bench", help="repeat the canonical flows and report mean and standard error")
    p.add_argument("--scenario", default="all", help="all, user, edge or cloud (sim only)")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--transport", choices=("sim", "tcp"), default="sim")
    p.add_argument("--scoring")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CombinatorialLimit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LIMIT
    except (PrivnegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
