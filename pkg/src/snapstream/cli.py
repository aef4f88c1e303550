"""``snapstream`` command line: compress, generate, simulate, selftest.

Reports are JSON on stdout (``--pretty`` for aligned text). Exit status is
0 on success, 2 for invalid configuration or input, 3 for a runtime contract
violation, 4 for I/O failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from typing import Sequence

from . import snapshot
from .engine import Engine, first_divergence
from .errors import ConfigError, SnapStreamError
from .runconfig import (
    CONFIG_ENV,
    RunConfig,
    check_output_path,
    jsonl_bytes,
    load_run_config,
    read_prompt,
    read_workload,
    resolve_config_path,
    write_output,
)
from .scheduler import simulate, throughput_sweep
from .selftest import run_selftest

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONTRACT = 3
EXIT_IO = 4

log = logging.getLogger("snapstream")


def _emit(report, pretty: bool) -> None:
    if pretty:
        if isinstance(report, dict):
            width = max((len(k) for k in report), default=0)
            for key, value in report.items():
                print(f"{key:<{width}}  {value}")
        else:
            print(report)
    else:
        print(json.dumps(report))


def _load(args) -> RunConfig:
    cfg = load_run_config(resolve_config_path(args.config))
    return cfg.with_overrides(mode=getattr(args, "mode", None), seed=args.seed)


def _engine(cfg: RunConfig, mode: str) -> Engine:
    return Engine(cfg.model, cfg.cache, mode, block_len=cfg.run.block_len)


# -- commands ------------------------------------------------------------------

def cmd_compress(args) -> int:
    cfg = _load(args)
    check_output_path(args.out)
    prompt = read_prompt(args.prompt, cfg)
    _, state = _engine(cfg, "snapstream").prefill(prompt)
    cache = state.cache
    if args.out:
        write_output(args.out, snapshot.dumps(cache))
    report = {
        "L": len(prompt),
        "l_snapstream": cfg.cache.l_snapstream,
        "valid_topk": cache.valid_topk,
        "bytes_full": state.full_cache.nbytes,
        "bytes_compressed": cache.nbytes,
    }
    report["ratio"] = report["bytes_full"] / report["bytes_compressed"]
    _emit(report, args.pretty)
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load(args)
    for path in (args.out, args.stats):
        check_output_path(path)
    prompt = read_prompt(args.prompt, cfg)
    max_new = cfg.run.max_new if args.max_new is None else args.max_new
    if max_new < 0:
        raise ConfigError("--max-new must be >= 0")
    mode = cfg.run.mode

    result = _engine(cfg, mode).generate(prompt, max_new, cfg.run.stop_on_eos)
    report = {"mode": mode, "L": len(prompt), "generated": len(result.tokens),
              "stop_reason": result.stop_reason}
    if args.compare:
        other_mode = "full" if mode == "snapstream" else "snapstream"
        other = _engine(cfg, other_mode).generate(prompt, max_new, cfg.run.stop_on_eos)
        div = first_divergence(result.tokens, other.tokens)
        report["compare"] = "identical" if div is None else div
    if args.out:
        write_output(args.out, "".join(f"{t}\n" for t in result.tokens).encode())
    else:
        report["tokens"] = result.tokens
    if args.stats:
        write_output(args.stats, jsonl_bytes(
            {k: v for k, v in s.to_dict().items() if k != "valid_bytes"} for s in result.stats))
    _emit(report, args.pretty)
    return EXIT_OK


def _sweep_table(rows) -> str:
    header = ("prefill_seq", "compressed_seq", "max_batch_full", "max_batch_snapstream",
              "throughput_full", "throughput_snapstream", "improvement")
    lines = ["  ".join(f"{h:>21}" for h in header)]
    for row in rows:
        d = row.to_dict()
        cells = [f"{d['prefill_seq'] // 1024}K", f"{d['compressed_seq'] // 1024}K",
                 d["max_batch_full"], d["max_batch_snapstream"],
                 f"{d['throughput_full']:.0f}", f"{d['throughput_snapstream']:.0f}",
                 f"{d['improvement']:.2f}x"]
        lines.append("  ".join(f"{c:>21}" for c in cells))
    return "\n".join(lines)


def cmd_simulate(args) -> int:
    cfg = _load(args)
    check_output_path(args.out)
    seed = 0 if args.seed is None else args.seed
    if args.sweep:
        rows = throughput_sweep(cfg.cost, requests_per_slot=cfg.run.requests_per_slot, seed=seed)
        if args.pretty:
            print(_sweep_table(rows))
        else:
            print(json.dumps([r.to_dict() for r in rows]))
        return EXIT_OK
    if args.workload is None:
        raise ConfigError("simulate needs a workload file (or --sweep)")
    requests, malformed = read_workload(args.workload)
    for lineno, reason in malformed:
        log.warning("workload line %d rejected: %s", lineno, reason)
    trace = simulate(requests, cfg.cost, cfg.run.mode, seed,
                     l_max=cfg.run.serve_l_max, l_snapstream=cfg.run.serve_l_compressed)
    trace.summary["malformed_lines"] = len(malformed)
    data = jsonl_bytes(trace.records())
    if args.out:
        write_output(args.out, data)
    report = dict(trace.summary)
    report["trace_sha256"] = hashlib.sha256(data).hexdigest()
    _emit(report, args.pretty)
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_selftest(args.trials)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CONTRACT


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help=f"JSON run config (default: ${CONFIG_ENV}, else built-in defaults)")
    common.add_argument("--seed", type=int, help="model seed (generate/compress) or trace seed")
    common.add_argument("--pretty", action="store_true", help="human-readable report")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="snapstream", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", parents=[common], help="prefill a prompt and snapshot its compressed cache")
    p.add_argument("prompt", help="whitespace-separated token ids, or - for stdin")
    p.add_argument("--out", metavar="PATH", help="snapshot file to write")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("generate", parents=[common], help="greedy generation from a prompt")
    p.add_argument("prompt", help="whitespace-separated token ids, or - for stdin")
    p.add_argument("--mode", choices=("full", "snapstream"))
    p.add_argument("--max-new", type=int, help="decode steps (default: run.max_new)")
    p.add_argument("--compare", action="store_true",
                   help="also run the other mode and report the first divergence")
    p.add_argument("--out", metavar="PATH", help="token stream, one id per line")
    p.add_argument("--stats", metavar="PATH", help="per-step cache stats as JSON lines")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", parents=[common], help="serving simulation over a workload")
    p.add_argument("workload", nargs="?", help="JSON-lines workload file, or - for stdin")
    p.add_argument("--mode", choices=("full", "snapstream"))
    p.add_argument("--sweep", action="store_true", help="throughput table for both modes")
    p.add_argument("--out", metavar="PATH", help="trace file (JSON lines)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("selftest", parents=[common], help="run built-in correctness checks")
    p.add_argument("--trials", type=int, default=100, help="random oracle trials")
    p.set_defaults(func=cmd_selftest)
    return parser


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_VALIDATION, "validation", exc)
    except SnapStreamError as exc:
        return _fail(EXIT_CONTRACT, "contract", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)


if __name__ == "__main__":
    sys.exit(main())
