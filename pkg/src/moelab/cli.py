"""Command-line front end.

Subcommands: analyze (closed-form accounting), simulate (one layer, both
variants, shared plan), sweep (top_k grid), gradcheck (numerical gradient
oracle on tiny configs), fit-toy (SGD trainability check).

Exit codes: 0 success, 1 usage or config error, 2 a check ran and failed.
Outputs carry no timestamps and floats print in round-trip form, so
repeated invocations with identical inputs are byte-identical. --out
writes atomically (temp file then rename) to never leave torn files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

from . import analytics, ep_sim
from .config import BIGMAC, FINE_GRAINED, VARIANTS, ConfigError, load_config
from .moe_block import gradcheck_block
from .tensor_core import set_matmul_grad_fault
from .toy_fit import run_toy_fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CHECK = 2

GRADCHECK_THRESHOLD = 1e-4
GRADCHECK_MAX_H = 16
FIT_TOY_MAX_H = 64


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="PATH",
                     help="flat key = value config file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override one config key "
                     "(repeatable)")
    sub.add_argument("--seed", type=int, default=1234)
    sub.add_argument("--format", choices=("json", "csv", "table"),
                     default="table")
    sub.add_argument("--out", metavar="PATH",
                     help="write output here instead of stdout")


def build_parser() -> _Parser:
    parser = _Parser(prog="moelab",
                     description="fine_grained vs bigmac MoE laboratory")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("analyze", parents=[], help="closed-form "
                          "parameter, FLOP, and all-to-all accounting")
    _add_common(sub)

    sub = subs.add_parser("simulate", help="simulate one MoE layer for "
                          "both variants under a shared routing plan")
    _add_common(sub)
    sub.add_argument("--mode", choices=ep_sim.ROUTING_MODES,
                     default="uniform_random")

    sub = subs.add_parser("sweep", help="simulate across a top_k grid")
    _add_common(sub)
    sub.add_argument("--mode", choices=ep_sim.ROUTING_MODES,
                     default="uniform_random")
    sub.add_argument("--topk-list", default="1,2,4,6,8",
                     metavar="K1,K2,...")

    sub = subs.add_parser("gradcheck", help="compare autodiff gradients "
                          "against central differences for all variants")
    _add_common(sub)

    sub = subs.add_parser("fit-toy", help="SGD-train one block per variant "
                          "against a frozen random teacher")
    _add_common(sub)
    sub.add_argument("--steps", type=int, default=500)
    sub.add_argument("--lr", type=float, default=0.05)
    sub.add_argument("--no-aux-loss", action="store_true",
                     help="drop the load-balance penalty from the objective")
    return parser


def _write_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".moelab-out-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(args, text: str) -> None:
    if args.out:
        _write_atomic(args.out, text)
    else:
        sys.stdout.write(text)


def _table(columns: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(columns[i]), *(len(r[i]) for r in rows)) if rows
              else len(columns[i]) for i in range(len(columns))]
    def fmt(cells):
        return "  ".join(c.ljust(widths[i]) if i == 0 else c.rjust(widths[i])
                         for i, c in enumerate(cells))
    lines = [fmt(columns), fmt(["-" * w for w in widths])]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def cmd_analyze(args) -> int:
    cfg, _ = load_config(args.config, args.overrides)
    report = analytics.analyze(cfg)
    if args.format == "json":
        _emit(args, analytics.report_to_json(report))
    elif args.format == "csv":
        _emit(args, analytics.report_to_csv(report))
    else:
        _emit(args, analytics.report_to_text(report))
    return EXIT_OK


def _paired_extras(cfg, reports) -> list[dict]:
    """bytes_ratio and the per-layer formula value for each report.

    Reports arrive grouped per top_k with the fine_grained row first; the
    ratio repeats on both rows of a pair so every row is self-describing.
    """
    from dataclasses import replace
    extras = []
    by_key = {}
    for rep in reports:
        by_key[(rep.top_k, rep.variant)] = rep
    for rep in reports:
        fg = by_key[(rep.top_k, FINE_GRAINED)]
        bm = by_key[(rep.top_k, BIGMAC)]
        ratio = (bm.a2a_bytes_fwd / fg.a2a_bytes_fwd
                 if fg.a2a_bytes_fwd else None)
        cfg_k = replace(cfg, top_k=rep.top_k)
        formula = analytics.a2a_transfer_formula(cfg_k, rep.variant) // cfg.l
        extras.append({"bytes_ratio": ratio, "a2a_bytes_formula": formula})
    return extras


def _emit_reports(args, cfg, reports) -> None:
    extras = _paired_extras(cfg, reports)
    if args.format == "json":
        _emit(args, ep_sim.reports_to_json(reports, extras))
    elif args.format == "csv":
        _emit(args, ep_sim.reports_to_csv(reports, extras))
    else:
        columns = list(ep_sim.CSV_COLUMNS) + ["bytes_ratio",
                                              "a2a_bytes_formula"]
        rows = []
        for rep, ext in zip(reports, extras):
            row = rep.to_dict()
            row.update(ext)
            rows.append([_cell(row[c]) for c in columns])
        _emit(args, _table(columns, rows))


def cmd_simulate(args) -> int:
    cfg, cost = load_config(args.config, args.overrides)
    reports = ep_sim.sweep_topk(cfg, cost, [cfg.top_k], mode=args.mode,
                                seed=args.seed)
    _emit_reports(args, cfg, reports)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, cost = load_config(args.config, args.overrides)
    try:
        topk_list = [int(tok) for tok in args.topk_list.split(",") if tok]
    except ValueError:
        raise ConfigError(f"--topk-list expects comma-separated integers, "
                          f"got {args.topk_list!r}") from None
    if not topk_list:
        raise ConfigError("--topk-list is empty")
    reports = ep_sim.sweep_topk(cfg, cost, topk_list, mode=args.mode,
                                seed=args.seed)
    _emit_reports(args, cfg, reports)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg, _ = load_config(args.config, args.overrides)
    if cfg.h > GRADCHECK_MAX_H:
        raise ConfigError(
            f"gradcheck probes every weight numerically; keep h <= "
            f"{GRADCHECK_MAX_H} (try: moelab gradcheck --set h=8 --set e=4 "
            f"--set top_k=2 --set ep=1 --set r=0.5)")
    fault = os.environ.get("MOELAB_CORRUPT_BACKWARD")
    if fault:
        set_matmul_grad_fault(float(fault))
    try:
        results = {v: gradcheck_block(cfg, v, seed=args.seed)
                   for v in VARIANTS}
    finally:
        set_matmul_grad_fault(1.0)
    ok = {v: err < GRADCHECK_THRESHOLD for v, err in results.items()}
    if args.format == "json":
        payload = {v: {"max_rel_error": results[v], "passed": ok[v],
                       "threshold": GRADCHECK_THRESHOLD} for v in VARIANTS}
        _emit(args, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    elif args.format == "csv":
        lines = ["variant,max_rel_error,threshold,status"]
        for v in VARIANTS:
            lines.append(f"{v},{results[v]!r},{GRADCHECK_THRESHOLD!r},"
                         f"{'pass' if ok[v] else 'FAIL'}")
        _emit(args, "\n".join(lines) + "\n")
    else:
        rows = [[v, f"{results[v]:.3e}", f"{GRADCHECK_THRESHOLD:.0e}",
                 "pass" if ok[v] else "FAIL"] for v in VARIANTS]
        _emit(args, _table(["variant", "max_rel_error", "threshold",
                            "status"], rows))
    return EXIT_OK if all(ok.values()) else EXIT_CHECK


def cmd_fit_toy(args) -> int:
    cfg, _ = load_config(args.config, args.overrides)
    if cfg.h > FIT_TOY_MAX_H:
        raise ConfigError(
            f"fit-toy runs dense autodiff; keep h <= {FIT_TOY_MAX_H} "
            f"(try: moelab fit-toy --set h=16 --set e=8 --set top_k=2 "
            f"--set ep=1)")
    if args.steps < 1:
        raise ConfigError(f"--steps must be positive (got {args.steps})")
    result = run_toy_fit(cfg, steps=args.steps, lr=args.lr, seed=args.seed,
                         use_aux=not args.no_aux_loss)
    if args.format == "csv":
        lines = ["variant,step,loss"]
        for v in VARIANTS:
            for step, loss in enumerate(result.losses[v]):
                lines.append(f"{v},{step},{loss!r}")
        _emit(args, "\n".join(lines) + "\n")
    elif args.format == "json":
        payload = {v: {"initial_loss": result.initial(v),
                       "final_loss": result.final(v),
                       "steps": len(result.losses[v]) - 1,
                       "losses": result.losses[v]} for v in VARIANTS}
        _emit(args, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    else:
        rows = []
        for v in VARIANTS:
            initial, final = result.initial(v), result.final(v)
            rows.append([v, f"{initial:.6f}", f"{final:.6f}",
                         f"{final / initial:.4f}" if initial else "n/a"])
        _emit(args, _table(["variant", "initial_loss", "final_loss",
                            "final/initial"], rows))
    if result.diverged:
        sys.stderr.write(f"fit-toy diverged (loss went non-finite): "
                         f"{', '.join(result.diverged)}\n")
        return EXIT_CHECK
    return EXIT_OK


_COMMANDS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "fit-toy": cmd_fit_toy,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        sys.stderr.write(f"moelab: {exc}\n")
        return EXIT_USAGE
    except OSError as exc:
        sys.stderr.write(f"moelab: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
