"""Command-line front end.

Subcommands:
  run         execute one scenario; write trace/report; exit 0 only if
              every security verdict is Secure (1 on violation, 2 on a
              scenario error)
  grid        enumerate the adversary grid over a base scenario and print
              a Secure/Violation matrix (exit 3 when the grid exceeds the
              configured cap)
  collateral  run the same payment in staggered and constant-timeout mode
              under a stalling receiver and compare per-hop lock times
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .errors import ConfigInvalid, GridTooLarge
from .harness import (
    FinalState,
    GridDims,
    ScenarioConfig,
    default_grid_dims,
    enumerate_adversary_grid,
    run_scenario,
)
from .routing import CONSTANT_TIMEOUT, STAGGERED, collateral_lock_time
from .scenario import ScenarioParseError, load_scenario

DEFAULT_SEED = 1


def _apply_seed(cfg: ScenarioConfig, seedless: bool) -> ScenarioConfig:
    return replace(cfg, seed=DEFAULT_SEED) if seedless else cfg


def _write_or_print(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def format_report(cfg: ScenarioConfig, final: FinalState, trace) -> str:
    lines = [f"seed: {cfg.seed}"]
    lines.append("payments:")
    for record in final.payments:
        outcome = record.outcome.status if record.outcome else "not-started"
        extra = ""
        if record.outcome and record.outcome.hop is not None:
            extra = f" hop={record.outcome.hop}"
        if record.outcome and record.outcome.reason:
            extra += f" reason={record.outcome.reason}"
        lines.append(f"  {record.index} {'->'.join(record.spec.path)}"
                     f" amount={record.spec.amount} outcome={outcome}{extra}")
    lines.append("closes:")
    for cid, close in sorted(final.close_records.items()):
        lines.append(f"  {cid} t_close={close.t_close} initiator={close.initiator}")
    lines.append("verdicts:")
    for (user, cid), verdict in sorted(final.verdicts.items()):
        lines.append(
            f"  {user} {cid} {verdict.label}"
            f" correct_balance={verdict.correct_balance}"
            f" swept_by_deadline={verdict.swept_by_deadline}"
            f" deadline={verdict.deadline}")
    revocations = [e for e in trace if e.kind == "confirmed"
                   and dict(e.data).get("purpose") == "revocation"]
    for event in revocations:
        lines.append(f"revocation claimed: {_revocation_amount(event, final)}")
    lines.append("balances:")
    for user in sorted(final.balances):
        lines.append(f"  {user} {final.balances[user]}")
    initial = sum(final.initial_funds.values())
    ok = "ok" if final.unspent_total == initial else "MISMATCH"
    lines.append(f"conservation: unspent={final.unspent_total} initial={initial} {ok}")
    violations = [v for v in final.verdicts.values() if not v.secure]
    total = len(final.verdicts)
    if violations:
        lines.append(f"result: VIOLATION ({total - len(violations)}/{total} secure)")
    else:
        lines.append(f"result: SECURE ({total}/{total} secure)")
    return "\n".join(lines) + "\n"


def _revocation_amount(event, final: FinalState) -> int:
    txid = dict(event.data).get("tx")
    for _, _, _, amount, sweep_txid in final.sweeps:
        if sweep_txid == txid:
            return amount
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_scenario(args.scenario, allow_unsafe_watch=args.allow_unsafe_timing)
    except ScenarioParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    cfg = _apply_seed(cfg, args.seedless)
    trace, final = run_scenario(cfg)
    if args.trace:
        _write_or_print("\n".join(trace.format_lines()) + "\n", args.trace)
    _write_or_print(format_report(cfg, final, trace), args.report)
    if any(not v.secure for v in final.verdicts.values()):
        return 1
    return 0


def _parse_dims(spec: str | None, base: ScenarioConfig) -> GridDims:
    dims = default_grid_dims(base)
    if not spec:
        return dims
    fields = {}
    for part in spec.split(","):
        if not part:
            continue
        name, _, values = part.partition("=")
        if not values:
            raise ConfigInvalid(f"bad --dims entry: {part}")
        fields[name.strip()] = tuple(values.split(":"))
    mapping = {
        "strategies": ("strategies", str),
        "actions": ("actions", int),
        "conf": ("conf_delays", int),
        "sync": ("sync_delays", int),
        "phase": ("watch_phases", int),
    }
    updates = {}
    for name, raw in fields.items():
        if name not in mapping:
            raise ConfigInvalid(f"unknown --dims dimension: {name}")
        attr, cast = mapping[name]
        updates[attr] = tuple(cast(v) for v in raw)
    return replace(dims, **updates)


def _grid_worker(payload: tuple[dict, bool]) -> tuple[str, list[tuple[str, str, bool, int]]]:
    data, allow_unsafe = payload
    cfg = ScenarioConfig.from_dict(data, allow_unsafe_watch=allow_unsafe)
    _, final = run_scenario(cfg)
    rows = [(user, cid, verdict.secure, verdict.shortfall)
            for (user, cid), verdict in sorted(final.verdicts.items())]
    return cfg.canonical_key(), rows


def cmd_grid(args: argparse.Namespace) -> int:
    try:
        base = load_scenario(args.scenario, allow_unsafe_watch=args.allow_unsafe_timing)
        base = _apply_seed(base, args.seedless)
        dims = _parse_dims(args.dims, base)
        configs = enumerate_adversary_grid(base, dims, max_configs=args.max_configs)
    except GridTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ScenarioParseError, ConfigInvalid) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    payloads = [(cfg.to_dict(), args.allow_unsafe_timing) for cfg in configs]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_grid_worker, payloads))
    else:
        results = [_grid_worker(p) for p in payloads]

    secure_count = 0
    violation_rows = []
    for cfg, (_, rows) in zip(configs, results):
        cell_secure = all(secure for _, _, secure, _ in rows)
        if cell_secure:
            secure_count += 1
        else:
            adv = cfg.adversaries[0]
            violation_rows.append(
                (adv.strategy, dict(adv.params), cfg.conf_delay, cfg.sync_delay,
                 [(u, c, s) for u, c, sec, s in rows if not sec]))
    print(f"{secure_count}/{len(configs)} Secure")
    for strategy, params, conf, sync, rows in violation_rows:
        print(f"  Violation strategy={strategy} params={params} conf_delay={conf} "
              f"sync_delay={sync} -> {rows}")
    return 0 if secure_count == len(configs) else 1


def cmd_collateral(args: argparse.Namespace) -> int:
    try:
        cfg = load_scenario(args.scenario, allow_unsafe_watch=False)
    except ScenarioParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    cfg = _apply_seed(cfg, args.seedless)
    if cfg.ledger_mode != "global":
        print("error: the constant-timeout comparison requires ledger_mode \"global\"",
              file=sys.stderr)
        return 2
    spans: dict[str, dict[int, int]] = {}
    for mode in (STAGGERED, CONSTANT_TIMEOUT):
        run_cfg = replace(
            cfg, payments=tuple(replace(p, mode=mode) for p in cfg.payments))
        trace, final = run_scenario(run_cfg)
        locks = collateral_lock_time(trace, 0)
        spans[mode] = {hop: t1 - t0 for hop, (t0, t1) in sorted(locks.items())}
    hops = sorted(set(spans[STAGGERED]) | set(spans[CONSTANT_TIMEOUT]))
    print("hop  staggered  constant_timeout")
    for hop in hops:
        s = spans[STAGGERED].get(hop, "-")
        c = spans[CONSTANT_TIMEOUT].get(hop, "-")
        print(f"{hop:>3}  {s!s:>9}  {c!s:>16}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcnsim",
        description="payment channel network simulator and security checker")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario")
    run_p.add_argument("scenario")
    run_p.add_argument("--trace", default=None, help="write the event trace to this file")
    run_p.add_argument("--report", default=None, help="write the report here (default stdout)")
    run_p.add_argument("--seedless", action="store_true",
                       help="ignore the scenario seed and use the fixed default")
    run_p.add_argument("--allow-unsafe-timing", action="store_true",
                       help="accept a watch_interval violating the safety precondition")
    run_p.set_defaults(func=cmd_run)

    grid_p = sub.add_parser("grid", help="run the adversary grid over a base scenario")
    grid_p.add_argument("scenario")
    grid_p.add_argument("--dims", default=None,
                        help="dimension overrides, e.g. strategies=honest:silent_after,"
                             "actions=20:21,conf=1:5,sync=0:2,phase=0:9")
    grid_p.add_argument("--max-configs", type=int, default=100_000)
    grid_p.add_argument("--parallel", type=int, default=1)
    grid_p.add_argument("--seedless", action="store_true")
    grid_p.add_argument("--allow-unsafe-timing", action="store_true")
    grid_p.set_defaults(func=cmd_grid)

    col_p = sub.add_parser("collateral",
                           help="compare per-hop collateral lock times across modes")
    col_p.add_argument("scenario")
    col_p.add_argument("--seedless", action="store_true")
    col_p.set_defaults(func=cmd_collateral)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
