"""Experiment harnesses: invariance suite, outlier-robustness sweep, and
neighbor-count sweep, all emitting machine-readable results.

The robustness sweep trains two variants on clean data and evaluates
both on byte-identical noise-injected test sets: the full hybrid-scope
encoder, and a plain-convolution ablation with the encoding and
adjustment paths zeroed out (and frozen) and point-metric receptive
fields everywhere. Background outliers come from a uniform cube around
the scene; every row carries the seeds and the test-set content hash
needed to reproduce it in isolation.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, replace

import numpy as np

from .hslayer import EncoderConfig, EncoderSpec, LinearMap, hs_encoder_forward, \
    hs_layer_forward
from .neighbors import knn_points
from .pointcloud import PointCloud, center_to_mean, inject_outliers
from .rng import child_seeds, make_rng
from .training import ToyTask, evaluate_up_axis, make_toy_dataset, train_toy_rotation

SWEEP_VARIABLES = ("outlier_ratio", "m_rff", "m_orl", "m_both")

# Side length of the uniform background cube the sweep samples outliers
# from; large relative to desk-scale objects so outliers sit off-object.
BACKGROUND_SIDE = 1.5
BACKGROUND_POINTS = 4096


@dataclass(frozen=True)
class SweepSpec:
    """One sweep: which variable moves, over which values, how many trials."""

    variable: str
    values: tuple
    base_config: EncoderSpec
    task: ToyTask
    trials: int = 5
    seed: int = 0
    epochs: int = 15
    lr: float = 0.3

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ValueError(f"variable must be one of {SWEEP_VARIABLES}")
        vals = tuple(self.values)
        if not vals or any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("values must be nonempty and strictly increasing")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        object.__setattr__(self, "values", vals)


def plain_gc_variant(spec: EncoderSpec) -> EncoderSpec:
    """Ablated structure: point-metric receptive fields in every layer."""
    return replace(spec, layers=tuple(replace(l, use_rff=False) for l in spec.layers))


def zero_ste_orl(cfg: EncoderConfig) -> None:
    """Zero-disable the encoding and adjustment paths in place."""
    for layer in cfg.layers:
        layer.ste.weights[:] = 0.0
        layer.ste.bias[:] = 0.0
        layer.orl.weights[:] = 0.0
        layer.orl.bias[:] = 0.0


def _gc_only(name: str) -> bool:
    return ".ste." not in name and ".orl." not in name


def cloud_set_hash(clouds) -> str:
    digest = hashlib.sha256()
    for pc in clouds:
        digest.update(np.ascontiguousarray(pc.points).tobytes())
    return digest.hexdigest()


def make_background(seed: int) -> PointCloud:
    rng = make_rng(seed)
    half = BACKGROUND_SIDE / 2.0
    return PointCloud(rng.uniform(-half, half, size=(BACKGROUND_POINTS, 3)))


@dataclass
class NoiseSweepRow:
    ratio: float
    trial: int
    trial_seed: int
    variant: str  # "full" or "plain_gc"
    median_error_deg: float
    testset_sha256: str


@dataclass
class NoiseSweepResult:
    rows: list
    ratios: tuple
    trials: int

    def median_errors(self, variant: str) -> dict:
        out = {}
        for ratio in self.ratios:
            vals = [r.median_error_deg for r in self.rows
                    if r.variant == variant and r.ratio == ratio]
            out[ratio] = float(np.median(vals))
        return out

    def error_increases(self, variant: str) -> list:
        """Per-trial error increase from the lowest to the highest ratio."""
        lo, hi = self.ratios[0], self.ratios[-1]
        out = []
        for trial in range(self.trials):
            base = [r.median_error_deg for r in self.rows
                    if r.variant == variant and r.trial == trial and r.ratio == lo]
            top = [r.median_error_deg for r in self.rows
                   if r.variant == variant and r.trial == trial and r.ratio == hi]
            out.append(top[0] - base[0])
        return out

    def to_csv(self) -> str:
        lines = ["ratio,trial,trial_seed,variant,median_error_deg,testset_sha256"]
        for r in sorted(self.rows, key=lambda r: (r.ratio, r.trial, r.variant)):
            lines.append(f"{r.ratio:g},{r.trial},{r.trial_seed},{r.variant},"
                         f"{r.median_error_deg:.17g},{r.testset_sha256}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = [
            "outlier-robustness sweep",
            "baseline 'plain_gc' = same encoder with the encoding and adjustment",
            "paths zero-disabled and point-metric receptive fields everywhere",
            f"trials: {self.trials}",
            "",
            "ratio    full_median_deg    plain_gc_median_deg",
        ]
        full = self.median_errors("full")
        plain = self.median_errors("plain_gc")
        for ratio in self.ratios:
            lines.append(f"{ratio:<8g} {full[ratio]:<18.3f} {plain[ratio]:.3f}")
        inc_full = float(np.median(self.error_increases("full")))
        inc_plain = float(np.median(self.error_increases("plain_gc")))
        lines += [
            "",
            f"median error increase {self.ratios[0]:g} -> {self.ratios[-1]:g}: "
            f"full {inc_full:.3f} deg, plain_gc {inc_plain:.3f} deg",
        ]
        return "\n".join(lines) + "\n"


def run_noise_sweep(spec: SweepSpec) -> NoiseSweepResult:
    """Train both variants on clean data, evaluate on shared noisy test sets."""
    if spec.variable != "outlier_ratio":
        raise ValueError("noise sweep requires variable='outlier_ratio'")
    if any(not (0.0 <= v < 1.0) for v in spec.values):
        raise ValueError("outlier ratios must lie in [0, 1)")
    rows = []
    trial_seeds = child_seeds(spec.seed, spec.trials)
    for trial, trial_seed in enumerate(trial_seeds):
        (task_train, task_test, init_seed, train_seed, bg_seed,
         inject_root) = child_seeds(trial_seed, 6)
        task = replace(spec.task, train_seed=task_train, test_seed=task_test)
        _, test = make_toy_dataset(task)

        variants = {}
        cfg_full = spec.base_config.build(seed=init_seed)
        head_full = LinearMap.init(cfg_full.d_out, 3, seed=init_seed + 1)
        train_toy_rotation(task, cfg_full, head_full, spec.epochs, spec.lr, train_seed)
        variants["full"] = (cfg_full, head_full)

        cfg_plain = plain_gc_variant(spec.base_config).build(seed=init_seed)
        head_plain = LinearMap.init(cfg_plain.d_out, 3, seed=init_seed + 1)
        zero_ste_orl(cfg_plain)
        train_toy_rotation(task, cfg_plain, head_plain, spec.epochs, spec.lr,
                           train_seed, include=_gc_only)
        variants["plain_gc"] = (cfg_plain, head_plain)

        background = make_background(bg_seed)
        for ratio in spec.values:
            inject_seeds = child_seeds(inject_root + int(round(ratio * 1000)), len(test))
            noisy = [
                replace(s, cloud=inject_outliers(s.cloud, ratio, background, js))
                for s, js in zip(test, inject_seeds)
            ]
            digest = cloud_set_hash(s.cloud for s in noisy)
            for name, (cfg, head) in variants.items():
                errors = evaluate_up_axis(cfg, head, noisy)
                rows.append(NoiseSweepRow(ratio, trial, trial_seed, name,
                                          float(np.median(errors)), digest))
    return NoiseSweepResult(rows, spec.values, spec.trials)


@dataclass
class NeighborSweepRow:
    variable: str
    value: int
    trial: int
    trial_seed: int
    median_error_deg: float
    median_forward_seconds: float | None = None


@dataclass
class NeighborSweepResult:
    rows: list
    variable: str
    values: tuple
    trials: int

    def median_errors(self) -> dict:
        return {
            v: float(np.median([r.median_error_deg for r in self.rows if r.value == v]))
            for v in self.values
        }

    def median_timings(self) -> dict:
        out = {}
        for v in self.values:
            vals = [r.median_forward_seconds for r in self.rows
                    if r.value == v and r.median_forward_seconds is not None]
            out[v] = float(np.median(vals)) if vals else None
        return out

    def to_csv(self) -> str:
        timed = any(r.median_forward_seconds is not None for r in self.rows)
        header = "variable,value,trial,trial_seed,median_error_deg"
        if timed:
            header += ",median_forward_seconds"
        lines = [header]
        for r in sorted(self.rows, key=lambda r: (r.value, r.trial)):
            line = (f"{r.variable},{r.value},{r.trial},{r.trial_seed},"
                    f"{r.median_error_deg:.17g}")
            if timed:
                line += f",{r.median_forward_seconds:.17g}"
            lines.append(line)
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = [f"neighbor-count sweep over {self.variable}", ""]
        errs = self.median_errors()
        times = self.median_timings()
        lines.append("value    median_error_deg    median_forward_seconds")
        for v in self.values:
            t = "-" if times[v] is None else f"{times[v]:.6f}"
            lines.append(f"{v:<8d} {errs[v]:<19.3f} {t}")
        return "\n".join(lines) + "\n"


def _with_neighbor_count(spec: EncoderSpec, variable: str, value: int) -> EncoderSpec:
    # pin the untouched count at its resolved value so changing m_rff does
    # not drag a defaulted m_orl along with it
    layers = []
    for layer in spec.layers:
        m_rff = layer.m_rff
        m_orl = layer.resolved_m_orl()
        if variable in ("m_rff", "m_both"):
            m_rff = value
        if variable in ("m_orl", "m_both"):
            m_orl = value
        layers.append(replace(layer, m_rff=m_rff, m_orl=m_orl))
    return replace(spec, layers=tuple(layers))


def measure_forward_seconds(cfg: EncoderConfig, cloud: PointCloud, runs: int = 50,
                            warmups: int = 5) -> float:
    """Median wall-clock of a full encoder forward pass."""
    centered, _ = center_to_mean(cloud)
    for _ in range(warmups):
        hs_encoder_forward(centered, cfg)
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter()
        hs_encoder_forward(centered, cfg)
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples))


def run_neighbor_sweep(spec: SweepSpec, measure_timing: bool = False,
                       timing_runs: int = 50, timing_warmups: int = 5) -> NeighborSweepResult:
    """Retrain per neighbor-count value (fixed seeds) and evaluate on clean data."""
    if spec.variable not in ("m_rff", "m_orl", "m_both"):
        raise ValueError("neighbor sweep requires variable in {m_rff, m_orl, m_both}")
    if any(v < 1 or v > spec.task.n_points - 1 for v in spec.values):
        raise ValueError(f"values must lie in [1, {spec.task.n_points - 1}]")
    rows = []
    trial_seeds = child_seeds(spec.seed, spec.trials)
    for value in spec.values:
        cfg_spec = _with_neighbor_count(spec.base_config, spec.variable, int(value))
        for trial, trial_seed in enumerate(trial_seeds):
            task_train, task_test, init_seed, train_seed = child_seeds(trial_seed, 4)
            task = replace(spec.task, train_seed=task_train, test_seed=task_test)
            cfg = cfg_spec.build(seed=init_seed)
            head = LinearMap.init(cfg.d_out, 3, seed=init_seed + 1)
            result = train_toy_rotation(task, cfg, head, spec.epochs, spec.lr, train_seed)
            timing = None
            if measure_timing:
                _, test = make_toy_dataset(task)
                timing = measure_forward_seconds(cfg, test[0].cloud,
                                                 runs=timing_runs, warmups=timing_warmups)
            rows.append(NeighborSweepRow(spec.variable, int(value), trial, trial_seed,
                                         result.median_test_error_deg, timing))
    return NeighborSweepResult(rows, spec.variable, spec.values, spec.trials)


# ---------------------------------------------------------------------------
# Invariance suite
# ---------------------------------------------------------------------------


@dataclass
class InvarianceCheck:
    name: str
    status: str  # "pass", "fail", or "skipped"
    max_deviation: float
    detail: str = ""


def suite_passed(checks) -> bool:
    return all(c.status != "fail" for c in checks)


def run_invariance_suite(cfg: EncoderConfig, seed: int = 0, transforms: int = 20,
                         n_points: int = 128) -> list:
    """Randomized checks of the layer-level invariance contracts.

    Returns one InvarianceCheck per contract; failures are entries, not
    exceptions.
    """
    rng = make_rng(seed)
    checks = []
    first = cfg.layers[0]
    pc = PointCloud(rng.normal(scale=0.2, size=(n_points, 3)))

    # geometric path (convolution + adjustment) under rigid translation
    # and uniform scaling, with the encoding path zeroed
    from .hslayer import HSLayerParams

    geo_params = HSLayerParams(
        gc=first.gc,
        ste=LinearMap.zeros(first.ste.d_in, first.ste.d_out),
        orl=first.orl,
        m_rff=first.m_rff,
        m_orl=first.m_orl,
        is_first_layer=True,
        use_rff=first.use_rff,
    )
    base = hs_layer_forward(pc, None, geo_params)
    dev = 0.0
    for _ in range(transforms):
        t = rng.uniform(-10, 10, size=3)
        c = float(rng.uniform(0.01, 100.0))
        moved = hs_layer_forward(PointCloud(pc.points * c + t), None, geo_params)
        dev = max(dev, float(np.max(np.abs(moved - base))))
    checks.append(InvarianceCheck(
        "geometric-path-translation-scale-invariance",
        "pass" if dev <= 1e-9 else "fail", dev,
        f"{transforms} random rigid translations and uniform scalings",
    ))

    # encoding path must break translation invariance
    if np.all(first.ste.weights == 0.0):
        checks.append(InvarianceCheck(
            "encoding-path-translation-variance", "skipped", 0.0,
            "encoding weights are all zero (vacuous)",
        ))
    else:
        moved = hs_layer_forward(PointCloud(pc.points + [1.0, 0.0, 0.0]), None, first)
        base_full = hs_layer_forward(pc, None, first)
        dev = float(np.max(np.abs(moved - base_full)))
        checks.append(InvarianceCheck(
            "encoding-path-translation-variance",
            "pass" if dev > 1e-6 else "fail", dev,
            "translation by (1, 0, 0) must change the first-layer output",
        ))

    # first layer must form receptive fields with the point metric
    _, cache = hs_layer_forward(pc, None, first, return_cache=True)
    rfp = knn_points(pc, first.m_rff)
    mismatches = int(np.count_nonzero(cache.nbrs.ids != rfp.ids))
    checks.append(InvarianceCheck(
        "first-layer-point-metric-rule",
        "pass" if mismatches == 0 else "fail", float(mismatches),
        "layer-1 neighbor ids equal point-metric ids",
    ))

    # zero adjustment parameters leave features untouched
    from .hslayer import orl_forward

    fm = rng.normal(size=(pc.n, first.d_out))
    rfp_orl = knn_points(pc, first.m_orl)
    out = orl_forward(pc, fm, rfp_orl, LinearMap.zeros(2 * first.d_out, first.d_out))
    ident = np.array_equal(out, fm)
    checks.append(InvarianceCheck(
        "adjustment-residual-identity",
        "pass" if ident else "fail",
        0.0 if ident else float(np.max(np.abs(out - fm))),
        "zero adjustment map must be the identity, bit-exactly",
    ))

    # permuting the rows permutes the output
    perm = rng.permutation(pc.n)
    base_full = hs_layer_forward(pc, None, first)
    permuted = hs_layer_forward(PointCloud(pc.points[perm]), None, first)
    dev = float(np.max(np.abs(permuted - base_full[perm])))
    checks.append(InvarianceCheck(
        "permutation-equivariance",
        "pass" if dev <= 1e-9 else "fail", dev,
        "row permutation commutes with the layer",
    ))
    return checks


def format_invariance_report(checks) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{c.name.ljust(width)}  {c.status.upper():7s}  max deviation {c.max_deviation:.3e}"
             for c in checks]
    verdict = "ALL CHECKS PASSED" if suite_passed(checks) else "FAILURES PRESENT"
    return "\n".join(lines + [verdict]) + "\n"
