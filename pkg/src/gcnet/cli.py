"""``gcnet`` command line: summary, gradcheck, selftest, train-toy, eval, gates.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import gradcheck, toybench, weights
from .accounting import model_count, render_percentage_table
from .backbone import build_network, format_config, parse_config, spec_from_options
from .errors import ConfigError, DimensionError, FormatError

WEIGHTS_FILE = "weights.gcw"
CONFIG_FILE = "model.cfg"
LOG_FILE = "log.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gcnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("summary", help="analytic parameter / MAC report")
    s.add_argument("--arch", choices=["tsn", "tsm", "gst"], default="tsn")
    s.add_argument("--depth", default="50")
    s.add_argument("--p", default="0", help="partition ratio; 0 disables GC")
    s.add_argument("--placement", choices=["standard", "loop"], default="standard")
    s.add_argument("--mask", default=None, help="per-stage insertion mask, e.g. 1111")
    s.add_argument("--calibrators", default="GSTL", help="subset of GSTL to build")
    s.add_argument("--comparison", choices=["SE3D", "GE3D_G", "GE3D_C", "S3DG"], default=None)
    s.add_argument("--frames", type=_positive, default=8)
    s.add_argument("--res", type=_positive, default=224)
    s.add_argument("--classes", type=int, default=174)
    s.add_argument("--csv", default=None, help="also write layer,params,macs CSV here")
    s.add_argument("--brief", action="store_true", help="totals only")

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trials", type=_positive, default=20)
    g.add_argument("--with-blocks", action="store_true", help="also check whole bottleneck blocks")
    g.add_argument("--ops", default=None, help="comma-separated subset of cases to run")

    sub.add_parser("selftest", help="run the invariant suite")

    t = sub.add_parser("train-toy", help="train the micro-net on the synthetic axial dataset")
    t.add_argument("--steps", type=_non_negative, default=1200)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--gc", choices=["on", "off"], default="on")
    t.add_argument("--calibrators", default="GSTL")
    t.add_argument("--batch-size", type=_positive, default=16)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--per-class", type=_positive, default=400)
    t.add_argument("--noise", type=float, default=0.05)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="accuracy of saved weights on the validation split")
    e.add_argument("--weights", required=True)
    e.add_argument("--per-class", type=_positive, default=100)
    e.add_argument("--noise", type=float, default=0.05)
    e.add_argument("--data-seed", type=int, default=None)

    q = sub.add_parser("gates", help="per-class mean gate logits as CSV")
    q.add_argument("--weights", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--per-class", type=_positive, default=100)
    q.add_argument("--noise", type=float, default=0.05)
    q.add_argument("--data-seed", type=int, default=None)
    return parser


def _thread_limit():
    limit = os.environ.get("GC_THREADS")
    if not limit:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=int(limit))


def _print_config(args) -> None:
    items = {k: v for k, v in sorted(vars(args).items())}
    print("config: " + " ".join(f"{k}={v}" for k, v in items.items()))


# ----------------------------------------------------------------- commands

def cmd_summary(args) -> int:
    spec = spec_from_options(
        style=args.arch, depth=args.depth, p=args.p, placement=args.placement, mask=args.mask,
        frames=args.frames, resolution=args.res, classes=args.classes,
        calibrators=args.calibrators, comparison=args.comparison,
    )
    report = model_count(spec)
    print(report.render_text(per_layer=not args.brief))
    if spec.gc is not None and any(b.site is not None for _, b, _ in _blocks(spec)):
        paper = model_count(spec, "paper", with_baseline=True)
        print(f"paper-mode params (no bias/BN): {paper.params:,}; calibrators carry bias "
              f"and BatchNorm at runtime, counted in the full-mode total above")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        print(f"wrote {args.csv}")
    return 0


def _blocks(spec):
    from .backbone import iter_blocks

    return list(iter_blocks(spec))


def cmd_gradcheck(args) -> int:
    cases = dict(gradcheck.CASES)
    if args.with_blocks:
        cases.update(gradcheck.EXTRA_CASES)
    if args.ops:
        known = {**gradcheck.CASES, **gradcheck.EXTRA_CASES}
        names = [n.strip() for n in args.ops.split(",") if n.strip()]
        unknown = [n for n in names if n not in known]
        if unknown or not names:
            raise UsageError(f"unknown gradcheck case(s) {unknown}; choose from {sorted(known)}")
        cases = {n: known[n] for n in names}
    results = gradcheck.run_all(args.trials, args.seed, cases)
    width = max(len(r.name) for r in results) + 2
    print(f"{'op':<{width}}{'trials':>7}{'max rel err':>14}{'max abs diff':>14}  result")
    for r in results:
        verdict = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}{r.trials:>7}{r.max_rel_error:>14.3e}{r.max_abs_error:>14.3e}  {verdict}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed))
        return 1
    print(f"PASS {len(results)}/{len(results)}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    print(render_percentage_table())
    results = run_selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
    passed = sum(ok for _, ok, _ in results)
    if passed == len(results):
        print(f"PASS {passed}/{len(results)}")
        return 0
    print(f"FAIL {len(results) - passed}/{len(results)}")
    return 1


def cmd_train_toy(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = toybench.run_experiment(
        args.gc, args.calibrators, seed=args.seed, steps=args.steps, n_train=args.per_class,
        noise_sigma=args.noise, batch_size=args.batch_size, lr=args.lr,
    )
    model, log, spec = run.model, run.log, run.model.spec
    weights.save(out / WEIGHTS_FILE, model.state_dict())
    (out / CONFIG_FILE).write_text(format_config(spec) + f"seed={args.seed}\n")
    (out / LOG_FILE).write_text(log.to_csv())
    if log.losses:
        print(f"final loss {log.losses[-1]:.4f}")
    acc = [a for a in log.accuracies if a == a]
    if acc:
        print(f"final validation accuracy {acc[-1]:.4f}")
    print(f"wrote {out / WEIGHTS_FILE}, {out / CONFIG_FILE}, {out / LOG_FILE}")
    return 0


def _load_model(path: str):
    wpath = Path(path)
    cpath = wpath.with_name(CONFIG_FILE)
    if not wpath.is_file():
        raise UsageError(f"weights file not found: {wpath}")
    if not cpath.is_file():
        raise UsageError(f"model config not found next to weights: {cpath}")
    text = cpath.read_text()
    seed = 0
    lines = []
    for line in text.splitlines():
        if line.startswith("seed="):
            seed = int(line.split("=", 1)[1])
        else:
            lines.append(line)
    spec = parse_config("\n".join(lines))
    model = build_network(spec, seed=0, dtype=np.float32)
    model.load_state_dict(weights.load(wpath))
    return model, seed


def _val_split(args, seed):
    data_seed = args.data_seed if args.data_seed is not None else 2 * seed + 2
    return toybench.generate_dataset(n_per_class=args.per_class, noise_sigma=args.noise, seed=data_seed)


def cmd_eval(args) -> int:
    model, seed = _load_model(args.weights)
    val = _val_split(args, seed)
    overall, per_class = toybench.evaluate(model, val)
    print(f"accuracy {overall:.4f}")
    for k, v in per_class.items():
        print(f"  {k} {toybench.CLASS_NAMES[k]:<12} {v:.4f}")
    return 0


def cmd_gates(args) -> int:
    model, seed = _load_model(args.weights)
    val = _val_split(args, seed)
    stats = toybench.gate_stats(model, val)
    Path(args.out).write_text(stats.to_csv())
    print(f"wrote {args.out} ({len(stats.sums)} site/calibrator pairs)")
    return 0


COMMANDS = {
    "summary": cmd_summary,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
    "train-toy": cmd_train_toy,
    "eval": cmd_eval,
    "gates": cmd_gates,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"gcnet: error: {exc}", file=sys.stderr)
        return 2
    _print_config(args)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DimensionError, FormatError, OSError) as exc:
        print(f"gcnet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
