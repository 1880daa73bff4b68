"""``chunkkv`` command line: generate | replay | compare | verify-rope.

Exit codes: 0 success, 1 usage or config error, 2 runtime error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from collections.abc import Sequence
from pathlib import Path

from chunkkv.config import RunConfig, resolve_config
from chunkkv.errors import ConfigError, KvCacheError
from chunkkv.replay import (
    build_engine,
    compare,
    replay,
    write_latency_csv,
    write_series_csv,
    write_summary_csv,
)
from chunkkv.trace import (
    PRESETS,
    generate,
    mean_request_tokens,
    measure_reuse,
    read_trace,
    write_trace,
)
from chunkkv.verify import fused_equivalence, shift_invariance

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file (version = 1)")
    p.add_argument("--seed", type=int, help="random seed (falls back to $MEPIC_SIM_SEED)")


def _engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("trace", help="trace file written by 'generate'")
    p.add_argument("--capacity-blocks", type=int)
    p.add_argument("--block-size", type=int)
    p.add_argument("--epic-n", type=int, help="tokens recomputed per chunk by epic")
    p.add_argument("--cacheblend-p", type=float, help="fraction recomputed per chunk by cacheblend")
    p.add_argument("--prefill-ticks-per-token", type=float)
    p.add_argument("--remote-latency-ticks", type=int)
    p.add_argument("--remote-bandwidth-blocks-per-tick", type=float)
    p.add_argument("--block-bytes", type=int)
    p.add_argument("--remote-policy", choices=["always_fetch", "always_recompute", "cost_based"])
    p.add_argument("--remote-dir", help="mirror offloaded chunk records into this directory")
    p.add_argument("--retry-limit", type=int)
    p.add_argument("--retain-prefix", action="store_true", default=None)
    p.add_argument("--no-offload", dest="offload", action="store_false", default=None)
    p.add_argument("-o", "--out-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chunkkv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic trace")
    _common(g)
    g.add_argument("--preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    g.add_argument("-o", "--out", required=True, help="trace output path")
    g.add_argument("--block-size", type=int)
    for name, typ in (
        ("n-requests", int),
        ("n-distinct-chunks", int),
        ("chunks-per-request", int),
        ("zipf-s", float),
        ("mean-chunk-tokens", int),
        ("mean-prompt-tokens", int),
        ("qps", float),
        ("mean-decode-ticks", int),
    ):
        g.add_argument(f"--{name}", type=typ)

    r = sub.add_parser("replay", help="replay a trace under one policy")
    _common(r)
    _engine_flags(r)
    r.add_argument("--policy", help="canonical | naive | full | epic[(N)] | cacheblend[(p)]")

    c = sub.add_parser("compare", help="replay a trace under several policies")
    _common(c)
    _engine_flags(c)
    c.add_argument("--policies", help="comma-separated policy list")

    v = sub.add_parser("verify-rope", help="check fused rotary attention numerically")
    _common(v)
    v.add_argument("--dtype", choices=["f32", "f64"])
    v.add_argument("--instances", dest="rope_instances", type=int)
    v.add_argument(
        "--inject-error",
        type=float,
        nargs="?",
        const=1e-3,
        default=0.0,
        help="add this offset to every fused output (harness self-test)",
    )
    return parser


_NON_CONFIG = {"command", "config", "out", "trace", "inject_error"}


def _resolve(args: argparse.Namespace) -> RunConfig:
    cli = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    return resolve_config(cli, args.config)


def _print_row(row: dict[str, object]) -> None:
    print("  ".join(f"{k}={v}" for k, v in row.items()))


def cmd_generate(args: argparse.Namespace, cfg: RunConfig) -> int:
    spec = cfg.workload_spec()
    trace = generate(spec)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(trace, out)
    print(
        f"wrote {out}: {len(trace.requests)} requests, {len(trace.chunk_table)} chunks, "
        f"mean {mean_request_tokens(trace):.1f} tokens, reuse {100 * measure_reuse(trace):.2f}%"
    )
    return EXIT_OK


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_replay(args: argparse.Namespace, cfg: RunConfig) -> int:
    trace = read_trace(args.trace)
    policy = cfg.make_policy(cfg.policy)
    engine = build_engine(
        cfg.pool_config(), cfg.cost_model(), cfg.engine_options(),
        Path(cfg.remote_dir) if cfg.remote_dir else None,
    )
    report = replay(trace, policy, cfg.pool_config(), cfg.cost_model(), cfg.engine_options(), engine)
    out = _out_dir(cfg)
    stem = policy.name.replace("(", "_").replace(")", "")
    write_series_csv(report, out / f"series_{stem}.csv")
    write_latency_csv(report, out / f"latency_{stem}.csv")
    write_summary_csv([report.summary_row()], out / f"summary_{stem}.csv")
    _print_row(report.summary_row())
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, cfg: RunConfig) -> int:
    policies = [cfg.make_policy(n) for n in cfg.policy_names()]
    if len({p.name for p in policies}) != len(policies) or len(policies) < 2:
        raise ConfigError("compare needs at least two distinct policies")
    trace = read_trace(args.trace)
    table = compare(trace, policies, cfg.pool_config(), cfg.cost_model(), cfg.engine_options())
    out = _out_dir(cfg)
    rows = [r.summary_row() for r in table.reports] + table.ratio_rows()
    for r in table.reports:
        stem = r.policy.replace("(", "_").replace(")", "")
        write_series_csv(r, out / f"series_{stem}.csv")
    write_summary_csv(rows, out / "comparison.csv")
    for row in rows:
        _print_row({k: v for k, v in row.items() if v != ""})
    return EXIT_OK


def cmd_verify_rope(args: argparse.Namespace, cfg: RunConfig) -> int:
    ok = True
    for suite in (fused_equivalence, shift_invariance):
        res = suite(cfg.rope_instances, cfg.dtype, cfg.seed, args.inject_error)
        status = "PASS" if res.passed else "FAIL"
        print(
            f"{status} {res.name} dtype={cfg.dtype} instances={res.instances} "
            f"max_deviation={res.max_deviation:.3e} tolerance={res.tolerance:.0e}"
        )
        ok &= res.passed
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {
    "generate": cmd_generate,
    "replay": cmd_replay,
    "compare": cmd_compare,
    "verify-rope": cmd_verify_rope,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _resolve(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KvCacheError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
