"""Command line: ``pooledcs matrix|decode|experiment``.

Exit codes: 0 success, 1 infeasible parameters / bad input / I/O failure,
2 certificate failure, 3 decoder budget exhausted, 64 invalid flags.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cs import DecoderConfig
from .decoders import NONADAPTIVE, decode
from .errors import ConfigError, DimensionMismatch, InfeasibleParameters
from .matrix import DEFAULT_BUDGET, PoolingMatrix, certify, construct_balanced

EXIT_OK, EXIT_ERROR, EXIT_PROPERTY, EXIT_BUDGET, EXIT_USAGE = 0, 1, 2, 3, 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def _fail(msg: str, code: int = EXIT_ERROR) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_matrix(args) -> int:
    if args.action == "gen":
        try:
            M = construct_balanced(args.n, args.m, args.r, args.c, args.seed,
                                   max_restarts=args.max_restarts)
        except InfeasibleParameters as exc:
            return _fail(str(exc))
        text = M.to_text()
        if args.out in (None, "-"):
            sys.stdout.write(text)
        else:
            try:
                Path(args.out).write_text(text)
            except OSError as exc:
                return _fail(f"cannot write {args.out}: {exc.strerror or exc}")
        return EXIT_OK
    try:
        M = PoolingMatrix.load(args.inp)
    except (OSError, ValueError) as exc:
        return _fail(f"cannot read matrix {args.inp}: {exc}")
    try:
        cert = certify(M, disjunct=args.disjunct, rip1=args.rip1, budget=args.budget)
    except ValueError as exc:
        return _fail(str(exc))
    report = {
        "shape": [M.m, M.n], "r": M.r, "c": M.c,
        "balanced": cert.balanced,
        "disjunctness_order": cert.disjunctness_order,
        "disjunct_check": cert.disjunct_check,
        "mutual_coherence": cert.mutual_coherence,
        "rip1": cert.rip1,
        "erdos_bound_ok": cert.erdos_bound_ok,
        "passed": cert.passed(),
    }
    print(json.dumps(_json_safe(report), indent=2))
    return EXIT_OK if cert.passed() else EXIT_PROPERTY


def _read_vector(path) -> np.ndarray:
    text = Path(path).read_text().strip()
    tokens = text.replace(",", " ").split()
    if len(tokens) == 1 and len(tokens[0]) > 1 and set(tokens[0]) <= {"0", "1"}:
        return np.array([int(ch) for ch in tokens[0]])
    return np.array([int(tok) for tok in tokens])


def cmd_decode(args) -> int:
    try:
        M = PoolingMatrix.load(args.matrix)
        y = _read_vector(args.counts if args.counts else args.outcomes)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    if args.outcomes and args.decoder not in ("comp", "ncomp"):
        return _fail("binary outcomes can only be decoded with comp or ncomp")
    try:
        cfg = DecoderConfig(lam=args.lam, tau=args.tau, max_nodes=args.max_nodes, max_iter=args.max_iter)
        res = decode(args.decoder, M, y, cfg, t=args.t)
    except DimensionMismatch as exc:
        return _fail(str(exc))
    except ValueError as exc:
        return _fail(str(exc))
    line = "".join(str(int(v)) for v in res.x) + "\n"
    if args.out in (None, "-"):
        sys.stdout.write(line)
    else:
        try:
            Path(args.out).write_text(line)
        except OSError as exc:
            return _fail(f"cannot write {args.out}: {exc.strerror or exc}")
    if not res.ok:
        return _fail(f"{args.decoder} ran out of budget; verdict is the best incumbent", EXIT_BUDGET)
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .harness import ExperimentConfig, sweep_and_emit

    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.default_sweep()
        overrides = {}
        if args.mode:
            overrides["mode"] = args.mode
        if args.seed is not None:
            overrides["master_seed"] = args.seed
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.repeats is not None:
            overrides["repeats"] = args.repeats
        if args.dump_verdicts:
            overrides["dump_verdicts"] = True
        if overrides:
            cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
    except ConfigError as exc:
        return _fail(f"invalid config: {exc}")
    try:
        paths = sweep_and_emit(cfg, args.out)
    except (ConfigError, InfeasibleParameters) as exc:
        return _fail(f"invalid config: {exc}")
    except OSError as exc:
        return _fail(str(exc))
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pooledcs", description="Pooled screening via group testing and compressed sensing.")
    p.add_argument("--version", action="version", version=f"pooledcs {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pm = sub.add_parser("matrix", help="generate or certify a pooling matrix")
    msub = pm.add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = msub.add_parser("gen", help="construct a balanced matrix")
    g.add_argument("--n", type=int, required=True, help="items (columns)")
    g.add_argument("--m", type=int, required=True, help="pools (rows)")
    g.add_argument("--r", type=int, required=True, help="items per pool")
    g.add_argument("--c", type=int, required=True, help="pools per item")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-restarts", type=int, default=10_000)
    g.add_argument("--out", default=None, help="output file (default stdout)")
    ck = msub.add_parser("check", help="print a certificate as JSON")
    ck.add_argument("--in", dest="inp", required=True)
    ck.add_argument("--disjunct", type=int, default=None, metavar="D",
                    help="check D-disjunctness exhaustively")
    ck.add_argument("--rip1", type=int, default=None, metavar="K",
                    help="certify RIP-1 of order 2K by vertex expansion")
    ck.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    pm.set_defaults(func=cmd_matrix)

    pd = sub.add_parser("decode", help="decode one chunk of pool observations")
    pd.add_argument("--matrix", required=True)
    obs = pd.add_mutually_exclusive_group(required=True)
    obs.add_argument("--counts", help="file with m integer pool counts")
    obs.add_argument("--outcomes", help="file with m binary pool outcomes")
    pd.add_argument("--decoder", choices=NONADAPTIVE, required=True)
    pd.add_argument("--lam", type=float, default=0.1)
    pd.add_argument("--tau", type=float, default=0.5)
    pd.add_argument("--t", type=int, default=2, help="NCOMP tolerance")
    pd.add_argument("--max-nodes", type=int, default=200_000)
    pd.add_argument("--max-iter", type=int, default=10_000)
    pd.add_argument("--out", default=None, help="verdict file (default stdout)")
    pd.set_defaults(func=cmd_decode)

    pe = sub.add_parser("experiment", help="run a prevalence sweep and emit CSV + manifest")
    pe.add_argument("--config", default=None, help="JSON config (default: the built-in nine-prevalence sweep)")
    pe.add_argument("--out", required=True, help="output directory")
    pe.add_argument("--mode", choices=("classification", "outlier"), default=None)
    pe.add_argument("--seed", type=int, default=None, help="override master_seed")
    pe.add_argument("--repeats", type=int, default=None)
    pe.add_argument("--workers", type=int, default=None)
    pe.add_argument("--dump-verdicts", action="store_true")
    pe.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
