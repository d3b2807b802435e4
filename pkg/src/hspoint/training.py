"""Finite-difference oracle, gradient checking, SGD, and a toy task that
regresses an object's up axis from its point cloud.

The toy task is the desk-scale stand-in used by the sweeps: shapes are
posed with a bounded tilt plus a free spin about their own axis, the
label is the rotated up axis, and the model output is the normalized
prediction of a linear head over the mean encoder feature. Training is
plain per-sample SGD and is bit-deterministic for fixed seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .graphconv import save_parameters
from .hslayer import EncoderConfig, LinearMap, encoder_tie_margin, hs_encoder_backward, \
    hs_encoder_forward
from .pointcloud import PointCloud, Pose, ShapeSpec, apply_pose, center_to_mean, \
    generate_shape, rotation_about_axis
from .rng import child_seeds, make_rng


@dataclass(frozen=True)
class ParamVector:
    """Flat view of named parameter arrays plus the manifest to rebuild them."""

    values: np.ndarray
    manifest: tuple  # ((name, shape), ...)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        total = sum(int(np.prod(shape)) for _, shape in self.manifest)
        if vals.shape != (total,):
            raise ValueError(f"expected {total} values, got {vals.shape}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "manifest", tuple((n, tuple(s)) for n, s in self.manifest))

    def to_dict(self) -> dict:
        out = {}
        pos = 0
        for name, shape in self.manifest:
            size = int(np.prod(shape))
            out[name] = self.values[pos:pos + size].reshape(shape).copy()
            pos += size
        return out

    @classmethod
    def from_dict(cls, named: dict) -> "ParamVector":
        manifest = tuple((name, tuple(np.shape(arr))) for name, arr in named.items())
        if named:
            values = np.concatenate([np.ravel(np.asarray(a, dtype=np.float64))
                                     for a in named.values()])
        else:
            values = np.zeros(0)
        return cls(values, manifest)

    def group_slices(self) -> dict:
        slices = {}
        pos = 0
        for name, shape in self.manifest:
            size = int(np.prod(shape))
            slices[name] = slice(pos, pos + size)
            pos += size
        return slices


def param_arrays(cfg: EncoderConfig, head: LinearMap | None = None,
                 include=None) -> dict:
    """Live references to every learnable array, keyed by a stable name."""
    named = {}
    for i, layer in enumerate(cfg.layers):
        named[f"layer{i}.gc.center_weights"] = layer.gc.center_weights
        named[f"layer{i}.gc.support_dirs"] = layer.gc.support_dirs
        named[f"layer{i}.gc.support_weights"] = layer.gc.support_weights
        named[f"layer{i}.ste.weights"] = layer.ste.weights
        named[f"layer{i}.ste.bias"] = layer.ste.bias
        named[f"layer{i}.orl.weights"] = layer.orl.weights
        named[f"layer{i}.orl.bias"] = layer.orl.bias
    if head is not None:
        named["head.weights"] = head.weights
        named["head.bias"] = head.bias
    if include is not None:
        named = {k: v for k, v in named.items() if include(k)}
    return named


def collect_params(cfg, head=None, include=None) -> ParamVector:
    return ParamVector.from_dict(param_arrays(cfg, head, include))


def assign_params(cfg, head, pv: ParamVector, include=None) -> None:
    """Copy a flat vector back into the live arrays and revalidate."""
    live = param_arrays(cfg, head, include)
    new = pv.to_dict()
    if list(new) != list(live):
        raise ValueError("parameter vector manifest does not match the model")
    for name, arr in new.items():
        np.copyto(live[name], arr)
    for layer in cfg.layers:
        layer.gc.validate()


def sgd_step(params: ParamVector, grads: ParamVector, lr: float) -> ParamVector:
    """One gradient-descent step: p - lr * g."""
    if params.manifest != grads.manifest:
        raise ValueError("parameter and gradient manifests differ")
    return ParamVector(params.values - lr * grads.values, params.manifest)


def finite_diff_grad(f, params: ParamVector, step: float) -> ParamVector:
    """Central-difference gradient of a scalar function of the parameters."""
    if step <= 0:
        raise ValueError("step must be positive")
    grad = np.empty_like(params.values)
    base = params.values
    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[i] += step
        minus[i] -= step
        fp = f(ParamVector(plus, params.manifest))
        fm = f(ParamVector(minus, params.manifest))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2 * step)
    return ParamVector(grad, params.manifest)


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a), abs(n))


@dataclass
class GradcheckProblem:
    """A differentiable scalar problem at a concrete parameter point."""

    value_and_grad: object  # callable(ParamVector) -> (float, ParamVector)
    params: ParamVector
    tie_margin: float = np.inf

    def value(self, pv: ParamVector) -> float:
        return self.value_and_grad(pv)[0]


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_err: float
    failing: list  # (group, flat index, analytic, numeric, rel err)
    n_checked: int
    seed_used: int


def gradcheck(build_problem, tol: float = 1e-4, seed: int = 0,
              coords_per_group: int | None = 50, step: float = 1e-6,
              margin_threshold: float = 1e-4, max_retries: int = 5) -> GradcheckReport:
    """Compare analytic gradients with central differences on sampled coordinates.

    `build_problem(seed)` returns a GradcheckProblem; when its tie margin
    is below `margin_threshold` (the parameter point sits too close to an
    argmax or neighbor-selection tie) the seed is advanced, up to
    `max_retries` times. Pass/fail uses the relative error
    |a - n| / max(1e-8, |a|, |n|) against `tol` over the sampled
    coordinates (all coordinates when coords_per_group is None).
    """
    problem = None
    seed_used = seed
    for attempt in range(max_retries):
        seed_used = seed + attempt
        problem = build_problem(seed_used)
        if problem.tie_margin >= margin_threshold:
            break
    else:
        raise ValueError(f"tie proximity persisted across {max_retries} seeds")
    _, analytic = problem.value_and_grad(problem.params)
    slices = problem.params.group_slices()
    base = problem.params.values
    rng = make_rng(seed_used)
    failing = []
    max_rel = 0.0
    n_checked = 0
    for name, sl in slices.items():
        size = sl.stop - sl.start
        if coords_per_group is None or size <= coords_per_group:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=coords_per_group, replace=False)
        for c in coords:
            i = sl.start + int(c)
            plus = base.copy()
            minus = base.copy()
            plus[i] += step
            minus[i] -= step
            numeric = (problem.value(ParamVector(plus, problem.params.manifest))
                       - problem.value(ParamVector(minus, problem.params.manifest))) / (2 * step)
            err = relative_error(float(analytic.values[i]), float(numeric))
            max_rel = max(max_rel, err)
            n_checked += 1
            if err > tol:
                failing.append((name, int(c), float(analytic.values[i]), float(numeric), err))
    return GradcheckReport(not failing, max_rel, failing, n_checked, seed_used)


# ---------------------------------------------------------------------------
# Toy up-axis regression task
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToySample:
    cloud: PointCloud  # posed scene-frame cloud, not yet centered
    label: np.ndarray  # unit up-axis

    def __post_init__(self):
        lab = np.asarray(self.label, dtype=np.float64)
        if lab.shape != (3,) or abs(np.linalg.norm(lab) - 1.0) > 1e-9:
            raise ValueError("label must be a unit 3-vector")
        object.__setattr__(self, "label", lab)


@dataclass(frozen=True)
class ToyTask:
    """Dataset recipe: shapes, pose distribution, and split seeds."""

    shape_specs: tuple
    n_train: int = 200
    n_test: int = 50
    n_points: int = 96
    max_tilt_deg: float = 60.0
    max_spin_deg: float = 0.0  # spin about the object's own axis (label-invisible)
    scale_range: tuple = (0.8, 1.2)
    translation_range: float = 0.05
    train_seed: int = 0
    test_seed: int = 1

    def __post_init__(self):
        if not self.shape_specs:
            raise ValueError("task needs at least one shape")
        if self.n_train < 1 or self.n_test < 1 or self.n_points < 8:
            raise ValueError("bad dataset sizes")
        if not (0 <= self.max_tilt_deg <= 180):
            raise ValueError("max tilt must be in [0, 180] degrees")
        if not (0 <= self.max_spin_deg <= 360):
            raise ValueError("max spin must be in [0, 360] degrees")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("bad scale range")


def default_toy_task(**overrides) -> ToyTask:
    """Elongated boxes and cylinders at desk scale.

    Both shapes extend along their own z axis, so the up-axis label is
    the rotated dominant axis; the free spin about that axis leaves the
    label unchanged while varying the cloud.
    """
    specs = (ShapeSpec.box(0.08, 0.05, 0.24), ShapeSpec.cylinder(0.05, 0.24))
    return ToyTask(shape_specs=specs, max_spin_deg=360.0, **overrides)


def _make_sample(task: ToyTask, spec: ShapeSpec, seed: int) -> ToySample:
    shape_seed, pose_seed = child_seeds(seed, 2)
    shape = generate_shape(replace(spec, seed=shape_seed), task.n_points)
    rng = make_rng(pose_seed)
    phi = rng.uniform(0, 2 * math.pi)
    tilt = math.radians(rng.uniform(0, task.max_tilt_deg))
    spin = math.radians(rng.uniform(0, task.max_spin_deg))
    r_tilt = rotation_about_axis(np.array([math.cos(phi), math.sin(phi), 0.0]), tilt)
    r = r_tilt @ rotation_about_axis(np.array([0.0, 0.0, 1.0]), spin)
    scale = rng.uniform(*task.scale_range)
    t = rng.uniform(-task.translation_range, task.translation_range, size=3)
    pose = Pose(r, t, np.full(3, scale))
    label = r @ np.array([0.0, 0.0, 1.0])
    label /= np.linalg.norm(label)
    return ToySample(apply_pose(shape, pose), label)


def make_toy_dataset(task: ToyTask) -> tuple[list, list]:
    """Deterministic (train, test) sample lists for the task seeds."""
    splits = []
    for count, split_seed in ((task.n_train, task.train_seed), (task.n_test, task.test_seed)):
        seeds = child_seeds(split_seed, count)
        samples = [
            _make_sample(task, task.shape_specs[i % len(task.shape_specs)], seeds[i])
            for i in range(count)
        ]
        splits.append(samples)
    return splits[0], splits[1]


def predict_up_axis(cfg: EncoderConfig, head: LinearMap, cloud: PointCloud) -> np.ndarray:
    """Centered cloud -> encoder -> mean feature -> head -> unit vector."""
    centered, _ = center_to_mean(cloud)
    _, fm = hs_encoder_forward(centered, cfg)
    v = fm.mean(axis=0) @ head.weights + head.bias
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise ValueError("degenerate head output (zero vector)")
    return v / norm


def angular_error_deg(pred: np.ndarray, label: np.ndarray) -> float:
    dot = float(np.clip(pred @ label, -1.0, 1.0))
    return math.degrees(math.acos(dot))


def up_axis_loss_and_grads(cfg, head, sample: ToySample, include=None):
    """Cosine loss of one sample and its gradients as a ParamVector.

    Returns (loss, grads, tie_margin). Neighbor selections and argmaxes
    are frozen at the forward pass, matching the backward convention.
    """
    centered, _ = center_to_mean(sample.cloud)
    (_, fm), cache = hs_encoder_forward(centered, cfg, return_cache=True)
    n_out = fm.shape[0]
    gfeat = fm.mean(axis=0)
    v = gfeat @ head.weights + head.bias
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        raise ValueError("degenerate head output (zero vector)")
    u = v / norm
    label = sample.label
    loss = 1.0 - float(u @ label)
    if not math.isfinite(loss):
        raise ValueError("non-finite loss")
    grad_v = -(label - (label @ u) * u) / norm
    grad_gfeat = head.weights @ grad_v
    grad_fm = np.broadcast_to(grad_gfeat / n_out, fm.shape)
    layer_grads = hs_encoder_backward(cfg, cache, grad_fm)
    named = {}
    for i, lg in enumerate(layer_grads):
        named[f"layer{i}.gc.center_weights"] = lg.gc.center_weights
        named[f"layer{i}.gc.support_dirs"] = lg.gc.support_dirs
        named[f"layer{i}.gc.support_weights"] = lg.gc.support_weights
        named[f"layer{i}.ste.weights"] = lg.ste.weights
        named[f"layer{i}.ste.bias"] = lg.ste.bias
        named[f"layer{i}.orl.weights"] = lg.orl.weights
        named[f"layer{i}.orl.bias"] = lg.orl.bias
    named["head.weights"] = np.outer(gfeat, grad_v)
    named["head.bias"] = grad_v
    if include is not None:
        named = {k: v for k, v in named.items() if include(k)}
    return loss, ParamVector.from_dict(named), encoder_tie_margin(cache)


def model_gradcheck_problem(cfg, head, sample_builder):
    """build_problem callable for `gradcheck` over a full encoder + head.

    `sample_builder(seed)` must return a ToySample; the seed also
    reinitializes nothing else, so retries move only the data point.
    """

    def build(seed: int) -> GradcheckProblem:
        sample = sample_builder(seed)

        def value_and_grad(pv: ParamVector):
            assign_params(cfg, head, pv)
            loss, grads, _ = up_axis_loss_and_grads(cfg, head, sample)
            return loss, grads

        params = collect_params(cfg, head)
        _, _, margin = up_axis_loss_and_grads(cfg, head, sample)
        return GradcheckProblem(value_and_grad, params, margin)

    return build


@dataclass
class TrainResult:
    epoch_losses: list
    epoch_test_medians: list
    test_errors_deg: np.ndarray
    median_test_error_deg: float


def evaluate_up_axis(cfg, head, samples) -> np.ndarray:
    return np.array([
        angular_error_deg(predict_up_axis(cfg, head, s.cloud), s.label) for s in samples
    ])


def train_toy_rotation(task: ToyTask, cfg: EncoderConfig, head: LinearMap,
                       epochs: int, lr: float, seed: int, include=None,
                       log_path=None, checkpoint_path=None) -> TrainResult:
    """Per-sample SGD on the cosine loss; deterministic for fixed seeds.

    Updates cfg and head in place. Writes a plain-text metrics log
    (epoch, mean loss, test median error) and a binary checkpoint when
    paths are given.
    """
    train, test = make_toy_dataset(task)
    params = collect_params(cfg, head, include)
    epoch_seeds = child_seeds(seed, max(epochs, 1))
    epoch_losses = []
    epoch_medians = []
    log_lines = ["# epoch mean_loss test_median_error_deg"]
    for epoch in range(epochs):
        order = make_rng(epoch_seeds[epoch]).permutation(len(train))
        losses = []
        for idx in order:
            loss, grads, _ = up_axis_loss_and_grads(cfg, head, train[idx], include)
            params = sgd_step(params, grads, lr)
            assign_params(cfg, head, params, include)
            losses.append(loss)
        errors = evaluate_up_axis(cfg, head, test)
        epoch_losses.append(float(np.mean(losses)))
        epoch_medians.append(float(np.median(errors)))
        log_lines.append(f"{epoch} {epoch_losses[-1]:.17g} {epoch_medians[-1]:.17g}")
    test_errors = evaluate_up_axis(cfg, head, test)
    result = TrainResult(epoch_losses, epoch_medians, test_errors,
                         float(np.median(test_errors)))
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
    if checkpoint_path is not None:
        save_parameters(checkpoint_path, param_arrays(cfg, head))
    return result
