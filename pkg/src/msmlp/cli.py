"""``msmlp`` command line: FLOPs reports, checks, scaling sweeps and training.

Exit codes: 0 success, 1 a check failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional, Sequence


EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _preset_spec(name: str, image_size: Optional[int] = None):
    from .model import preset

    try:
        return preset(name, image_size=image_size)
    except KeyError as e:
        raise _UsageError(str(e.args[0]) if e.args else f"unknown preset {name!r}")
    except ValueError as e:
        raise _UsageError(str(e))


def _write(path, text: str):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def cmd_presets(args) -> int:
    from .model import PRESET_NAMES

    for name in PRESET_NAMES:
        print(name)
    return EXIT_OK


def cmd_flops(args) -> int:
    from .flops import count_flops

    spec = _preset_spec(args.preset, args.image_size)
    try:
        rep = count_flops(spec)
    except ValueError as e:
        raise _UsageError(str(e))
    if args.json:
        out = dict(rep.summary(), preset=args.preset)
        print(json.dumps(out))
    else:
        print(f"preset        {args.preset}")
        print(f"image size    {rep.image_size}")
        print(f"params        {rep.total_params:,} ({rep.total_params / 1e6:.2f}M)")
        print(f"MACs          {rep.total_macs:,} ({rep.total_macs / 1e9:.2f}G)")
        print(f"spatial mix   {rep.spatial_mix_macs:,} MACs")
    if args.csv:
        path = _write(args.csv, rep.to_csv())
        if not args.no_plot:
            from .plotting import figure_path, plot_flops

            plot_flops(rep, figure_path(path, "flops"), title=f"{args.preset} @ {rep.image_size}px")
    return EXIT_OK


def cmd_params(args) -> int:
    from .flops import count_params

    rep = count_params(_preset_spec(args.preset))
    if args.json:
        print(json.dumps({"preset": args.preset, "total_params": rep.total_params}))
    else:
        print(f"{args.preset}: {rep.total_params:,} parameters ({rep.total_params / 1e6:.2f}M)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_model_gradcheck, run_primitive_gradchecks

    results = run_primitive_gradchecks(seed=args.seed, tol=args.primitive_tol)
    if not args.skip_model:
        results += run_model_gradcheck(seed=args.seed, tol=args.tol)
    failed = [r for r in results if not r.ok]
    if args.json:
        print(json.dumps({
            "seed": args.seed,
            "checks": len(results),
            "failed": [r.name for r in failed],
            "max_rel_err": max(r.value for r in results),
        }))
    else:
        for r in results:
            if args.verbose or not r.ok:
                print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:60s} {r.value:.3e} (tol {r.tol:g})")
        print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed; "
              f"worst relative error {max(r.value for r in results):.3e}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_oracle(args) -> int:
    from .checks import run_oracle

    if args.cases < 1:
        raise _UsageError("--cases must be positive")
    n, worst = run_oracle(cases=args.cases, seed=args.seed)
    ok = worst <= args.tol
    if args.json:
        print(json.dumps({"cases": n, "max_abs_dev": worst, "tol": args.tol, "ok": ok}))
    else:
        print(f"{n} cases, max |fast - reference| = {worst:.3e} (tol {args.tol:g}): {'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(args) -> int:
    from .bench import fit_scaling, parse_sizes, records_to_csv, run_scaling_sweep

    try:
        sizes = parse_sizes(args.sizes)
        records = run_scaling_sweep(args.op, sizes, channels=args.channels, reps=args.reps, seed=args.seed)
    except ValueError as e:
        raise _UsageError(str(e))
    fit = fit_scaling(records) if len({r.tokens for r in records}) >= 4 and len(records) >= 4 else None
    if args.json:
        print(json.dumps({
            "op": args.op,
            "records": [r.__dict__ for r in records],
            "slope": None if fit is None else fit.slope,
            "r2": None if fit is None else fit.r2,
        }))
    else:
        for r in records:
            print(f"{r.op:10s} {r.h:4d}x{r.w:<4d} C={r.c:<4d} median {r.median_s:.4e}s  MACs {r.macs:,}")
        if fit is not None:
            print(f"log-log slope {fit.slope:.3f} (R^2 {fit.r2:.4f})")
    if args.csv:
        path = _write(args.csv, records_to_csv(records))
        if not args.no_plot:
            from .plotting import figure_path, plot_scaling

            plot_scaling(records, figure_path(path, "scaling"))
    return EXIT_OK


def cmd_train(args) -> int:
    from .model import build_model
    from .train import SyntheticTask, evaluate, make_synthetic_task, train_loop

    spec = _preset_spec(args.preset)
    task = SyntheticTask(image_size=spec.image_size, num_classes=spec.num_classes, seed=args.seed,
                         num_samples=args.samples)
    try:
        images, labels = make_synthetic_task(task)
    except ValueError as e:
        raise _UsageError(str(e))
    model = build_model(spec, seed=args.seed)
    try:
        history = train_loop(model, images, labels, steps=args.steps, lr=args.lr, weight_decay=args.weight_decay,
                             batch_size=args.batch_size, seed=args.seed)
    except FloatingPointError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_FAIL
    loss, acc = evaluate(model, images, labels)
    if args.json:
        print(json.dumps({"preset": args.preset, "steps": args.steps, "final_loss": loss, "train_acc": acc}))
    else:
        print(f"{args.preset}: {args.steps} steps, final train loss {loss:.4f}, train accuracy {acc:.4f}")
    if args.csv:
        buf = [("step", "loss", "acc")] + [(m.step, repr(m.loss), repr(m.acc)) for m in history]
        path = Path(args.csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(buf)
        if not args.no_plot:
            from .plotting import figure_path, plot_training

            plot_training(history, figure_path(path, "training"), title=f"{args.preset} on the synthetic task")
    if args.min_acc is not None and acc < args.min_acc:
        return EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msmlp", description="Mix-Shift MLP toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("presets", help="list preset names")
    s.set_defaults(func=cmd_presets)

    s = sub.add_parser("flops", help="per-layer MACs and parameters for a preset")
    s.add_argument("--preset", required=True)
    s.add_argument("--image-size", type=int, default=None)
    s.add_argument("--csv", default=None, help="write per-layer rows here (plus a bar chart next to it)")
    s.add_argument("--json", action="store_true")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("params", help="total parameter count for a preset")
    s.add_argument("--preset", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("gradcheck", help="tape gradients against central differences")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-5, help="model-level tolerance")
    s.add_argument("--primitive-tol", type=float, default=1e-6)
    s.add_argument("--skip-model", action="store_true")
    s.add_argument("--json", action="store_true")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("oracle", help="fast operator against the per-token loop reference")
    s.add_argument("--cases", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("bench", help="wall-clock scaling sweep")
    s.add_argument("--op", required=True, help="mix-shift or global-mix")
    s.add_argument("--sizes", required=True, help="comma-separated HxW list, e.g. 28x28,56x56")
    s.add_argument("--channels", type=int, default=96)
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv", default=None, help="write records here (plus a log-log plot next to it)")
    s.add_argument("--json", action="store_true")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("train", help="train a preset on the synthetic task")
    s.add_argument("--preset", default="tiny-desk")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--weight-decay", type=float, default=0.05)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--min-acc", type=float, default=None, help="exit 1 if final train accuracy is below this")
    s.add_argument("--csv", default=None, help="write step,loss,acc history here (plus a curve next to it)")
    s.add_argument("--json", action="store_true")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_train)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            raise _UsageError("msmlp: error: a subcommand is required")
        return args.func(args)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
