"""Command-line entry point.

Subcommands: gen, encode, gradcheck, train, noise-sweep, neighbor-sweep,
invariance, eval. Every piece of randomness derives from --seed (or the
config file's seed when --seed is not given), outputs land under --out,
and repeating an invocation reproduces its output files byte for byte
(except `neighbor-sweep --timing`, which adds wall-clock measurements).

Exit codes: 0 success, 1 validation or usage error, 2 check or suite
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .graphconv import load_parameters, save_parameters
from .harness import SweepSpec, format_invariance_report, run_invariance_suite, \
    run_neighbor_sweep, run_noise_sweep, suite_passed
from .hslayer import LinearMap, load_encoder_spec
from .metrics import compute_report, format_report, load_records
from .pointcloud import FORMATS, SHAPE_KINDS, ShapeSpec, generate_shape, load_pointcloud, \
    save_pointcloud
from .pointcloud import center_to_mean
from .hslayer import hs_encoder_forward
from .training import collect_params, default_toy_task, make_toy_dataset, \
    model_gradcheck_problem, gradcheck, param_arrays, train_toy_rotation, ParamVector, \
    assign_params

DEFAULT_DIMS = {
    "sphere": (0.1,),
    "box": (0.2, 0.12, 0.06),
    "cylinder": (0.06, 0.2),
    "mug": (0.05, 0.12),
    "laptop": (0.3, 0.2),
}


class CliError(Exception):
    """Validation problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _say(args, message):
    if not args.quiet:
        print(message)


def _effective_seed(args, spec_seed=None):
    if args.seed is not None:
        return args.seed
    if spec_seed is not None:
        return spec_seed
    return 0


def _guess_format(path, explicit):
    if explicit:
        return explicit
    return "ply_ascii" if str(path).endswith(".ply") else "xyz_text"


def _load_spec(args):
    if not args.config:
        raise CliError("--config is required for this subcommand")
    try:
        return load_encoder_spec(args.config)
    except FileNotFoundError:
        raise CliError(f"config file not found: {args.config}") from None
    except ValueError as exc:
        raise CliError(f"bad config {args.config}: {exc}") from None


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _task_from_args(args):
    return default_toy_task(
        n_train=args.samples,
        n_test=args.test_samples,
        n_points=args.points,
        train_seed=args.task_seed * 2 + 1,
        test_seed=args.task_seed * 2 + 2,
    )


def cmd_gen(args) -> int:
    if args.shape not in SHAPE_KINDS:
        raise CliError(f"--shape must be one of {sorted(SHAPE_KINDS)}")
    dims = DEFAULT_DIMS[args.shape]
    if args.dims:
        try:
            dims = tuple(float(v) for v in args.dims.split(","))
        except ValueError:
            raise CliError(f"--dims must be comma-separated numbers, got {args.dims!r}") from None
    seed = _effective_seed(args)
    try:
        spec = ShapeSpec(args.shape, dims, seed)
        pc = generate_shape(spec, args.n)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if not args.out:
        raise CliError("--out is required for gen")
    fmt = _guess_format(args.out, args.format)
    save_pointcloud(pc, args.out, fmt)
    _say(args, f"gen: wrote {pc.n} points ({args.shape}, seed {seed}) to {args.out}")
    return 0


def cmd_encode(args) -> int:
    spec = _load_spec(args)
    seed = _effective_seed(args, spec.seed)
    cfg = spec.build(seed=seed)
    if not args.input:
        raise CliError("--input is required for encode")
    fmt = _guess_format(args.input, args.format)
    pc = load_pointcloud(args.input, fmt)
    if args.params:
        named = load_parameters(args.params)
        live = param_arrays(cfg)
        missing = [k for k in live if k not in named]
        if missing:
            raise CliError(f"checkpoint lacks parameters: {missing[:3]}...")
        assign_params(cfg, None, ParamVector.from_dict({k: named[k] for k in live}))
    centered, centroid = center_to_mean(pc)
    out_pc, fm = hs_encoder_forward(centered, cfg)
    if not args.out:
        raise CliError("--out is required for encode")
    lines = [
        f"# encoded features: {out_pc.n} points, {fm.shape[1]} channels",
        f"# input centroid: {centroid[0]:.17g} {centroid[1]:.17g} {centroid[2]:.17g}",
        "# columns: x y z f0 f1 ...",
    ]
    for p, f in zip(out_pc.points, fm):
        vals = [f"{v:.17g}" for v in (*p, *f)]
        lines.append(" ".join(vals))
    Path(args.out).write_text("\n".join(lines) + "\n")
    _say(args, f"encode: {pc.n} -> {out_pc.n} points, {fm.shape[1]} channels, to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    spec = _load_spec(args)
    seed = _effective_seed(args, spec.seed)
    cfg = spec.build(seed=seed)
    head = LinearMap.init(cfg.d_out, 3, seed=seed + 1)
    max_m = max(max(l.m_rff, l.resolved_m_orl()) for l in spec.layers)
    n_points = max(args.points, max_m + 2)
    task = default_toy_task(n_points=n_points, n_train=1, n_test=1)

    def sample_builder(sample_seed):
        train, _ = make_toy_dataset(
            default_toy_task(n_points=n_points, n_train=1, n_test=1,
                             train_seed=sample_seed, test_seed=sample_seed + 1)
        )
        return train[0]

    report = gradcheck(model_gradcheck_problem(cfg, head, sample_builder),
                       tol=args.tol, seed=seed, coords_per_group=args.coords)
    status = "PASS" if report.passed else "FAIL"
    _say(args, f"gradcheck: {status} max relative error {report.max_rel_err:.3e} "
               f"over {report.n_checked} coordinates (tol {args.tol:g})")
    if not report.passed and not args.quiet:
        for group, idx, a, n, err in report.failing[:5]:
            print(f"  {group}[{idx}]: analytic {a:.6e} numeric {n:.6e} rel {err:.3e}")
    return 0 if report.passed else 2


def cmd_train(args) -> int:
    spec = _load_spec(args)
    seed = _effective_seed(args, spec.seed)
    cfg = spec.build(seed=seed)
    head = LinearMap.init(cfg.d_out, 3, seed=seed + 1)
    args.task_seed = seed
    task = _task_from_args(args)
    out = _out_dir(args)
    result = train_toy_rotation(task, cfg, head, args.epochs, args.lr, seed,
                                log_path=out / f"train_{seed}.log",
                                checkpoint_path=out / f"checkpoint_{seed}.params")
    _say(args, f"train: median test error {result.median_test_error_deg:.2f} deg "
               f"after {args.epochs} epochs (seed {seed}); logs under {out}")
    return 0


def cmd_noise_sweep(args) -> int:
    spec = _load_spec(args)
    seed = _effective_seed(args, spec.seed)
    try:
        ratios = tuple(float(v) for v in args.ratios.split(","))
    except ValueError:
        raise CliError(f"--ratios must be comma-separated numbers, got {args.ratios!r}") from None
    args.task_seed = seed
    sweep = SweepSpec(
        variable="outlier_ratio", values=ratios, base_config=spec,
        task=_task_from_args(args), trials=args.trials, seed=seed,
        epochs=args.epochs, lr=args.lr,
    )
    result = run_noise_sweep(sweep)
    out = _out_dir(args)
    (out / f"noise_sweep_{seed}.csv").write_text(result.to_csv())
    (out / f"noise_sweep_{seed}_summary.txt").write_text(result.summary())
    inc_full = float(np.median(result.error_increases("full")))
    inc_plain = float(np.median(result.error_increases("plain_gc")))
    _say(args, f"noise-sweep: median increase full {inc_full:.2f} deg vs "
               f"plain_gc {inc_plain:.2f} deg; results under {out}")
    return 0


def cmd_neighbor_sweep(args) -> int:
    spec = _load_spec(args)
    seed = _effective_seed(args, spec.seed)
    try:
        values = tuple(int(v) for v in args.values.split(","))
    except ValueError:
        raise CliError(f"--values must be comma-separated integers, got {args.values!r}") from None
    args.task_seed = seed
    sweep = SweepSpec(
        variable=args.variable, values=values, base_config=spec,
        task=_task_from_args(args), trials=args.trials, seed=seed,
        epochs=args.epochs, lr=args.lr,
    )
    result = run_neighbor_sweep(sweep, measure_timing=args.timing,
                                timing_runs=args.timing_runs)
    out = _out_dir(args)
    (out / f"neighbor_sweep_{seed}.csv").write_text(result.to_csv())
    (out / f"neighbor_sweep_{seed}_summary.txt").write_text(result.summary())
    _say(args, f"neighbor-sweep: {len(values)} values x {args.trials} trials; "
               f"results under {out}")
    return 0


def cmd_invariance(args) -> int:
    spec = _load_spec(args)
    seed = _effective_seed(args, spec.seed)
    cfg = spec.build(seed=seed)
    checks = run_invariance_suite(cfg, seed=seed)
    report = format_invariance_report(checks)
    if args.out:
        out = _out_dir(args)
        (out / f"invariance_{seed}.txt").write_text(report)
    if not args.quiet:
        print(report, end="")
    return 0 if suite_passed(checks) else 2


def cmd_eval(args) -> int:
    if not args.records:
        raise CliError("--records is required for eval")
    try:
        records = load_records(args.records)
    except FileNotFoundError:
        raise CliError(f"records file not found: {args.records}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    seed = _effective_seed(args)
    report = compute_report(records, samples=args.samples, seed=seed)
    table = format_report(report)
    if args.out:
        Path(args.out).write_text(table)
    if not args.quiet:
        print(table, end="")
    headline = ", ".join(f"IoU{int(t * 100)}={v:.3f}" for t, v in report.iou_scores.items())
    _say(args, f"eval: {len(records)} records; {headline}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hspoint", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="root seed (default: config seed, else 0)")
    common.add_argument("--config", help="encoder config file")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--quiet", action="store_true", help="suppress summary lines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic shape cloud")
    p.add_argument("--shape", required=True, help=f"one of {sorted(SHAPE_KINDS)}")
    p.add_argument("--n", type=int, required=True, help="number of points")
    p.add_argument("--dims", help="comma-separated shape dimensions")
    p.add_argument("--format", choices=FORMATS, help="file format (default: by extension)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("encode", parents=[common], help="run the encoder on a cloud")
    p.add_argument("--input", required=True, help="input cloud file")
    p.add_argument("--params", help="parameter checkpoint to load")
    p.add_argument("--format", choices=FORMATS, help="input format (default: by extension)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="verify analytic gradients against finite differences")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")
    p.add_argument("--coords", type=int, default=50, help="sampled coordinates per group")
    p.add_argument("--points", type=int, default=32, help="cloud size for the check")
    p.set_defaults(func=cmd_gradcheck)

    def add_train_flags(p, epochs, samples):
        p.add_argument("--epochs", type=int, default=epochs)
        p.add_argument("--lr", type=float, default=0.3)
        p.add_argument("--samples", type=int, default=samples, help="training samples")
        p.add_argument("--test-samples", type=int, default=40)
        p.add_argument("--points", type=int, default=96, help="points per cloud")

    p = sub.add_parser("train", parents=[common], help="train on the toy up-axis task")
    add_train_flags(p, epochs=30, samples=200)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("noise-sweep", parents=[common],
                       help="outlier-robustness sweep, full vs plain-convolution")
    p.add_argument("--ratios", default="0,0.1,0.2,0.3,0.4")
    p.add_argument("--trials", type=int, default=5)
    add_train_flags(p, epochs=15, samples=120)
    p.set_defaults(func=cmd_noise_sweep)

    p = sub.add_parser("neighbor-sweep", parents=[common],
                       help="neighbor-count sweep with per-value retraining")
    p.add_argument("--variable", choices=("m_rff", "m_orl", "m_both"), default="m_both")
    p.add_argument("--values", default="3,5,10,20")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--timing", action="store_true",
                   help="measure forward wall-clock (breaks byte-identical reruns)")
    p.add_argument("--timing-runs", type=int, default=50)
    add_train_flags(p, epochs=15, samples=120)
    p.set_defaults(func=cmd_neighbor_sweep)

    p = sub.add_parser("invariance", parents=[common], help="run the invariance suite")
    p.set_defaults(func=cmd_invariance)

    p = sub.add_parser("eval", parents=[common], help="evaluate pose records")
    p.add_argument("--records", required=True, help="JSON-lines record file")
    p.add_argument("--samples", type=int, default=100_000,
                   help="Monte-Carlo samples per IoU")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
