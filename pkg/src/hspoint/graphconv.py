"""Deformable-kernel graph convolution over point-cloud receptive fields.

A kernel holds one center weight vector plus S learnable support
directions with their weight vectors. Its response at point i is

    out = f_i . w_C + sum_s max_m (f_m . w_s) * cos(p_m - p_i, k_s)

where the max runs over the M neighbors of i and the cosine normalizes
both the neighbor offset and the support direction, which is what makes
the response invariant to rigid translation and uniform scaling of the
cloud. Gradients are written by hand; the max routes to its argmax
neighbor (first index wins on ties) and point positions are treated as
data, never differentiated.

All arithmetic is float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .neighbors import NeighborIndex
from .pointcloud import PointCloud
from .rng import make_rng

# Offsets shorter than this contribute a zero direction cosine instead
# of a blown-up quotient; duplicate points then carry no directional
# signal and no gradient.
DEGENERATE_OFFSET = 1e-12
# Support directions must stay clearly away from the zero vector.
MIN_SUPPORT_NORM = 1e-8

# Test-only fault switch: when True the direction cosine skips the
# offset-length normalization, which deliberately breaks scale
# invariance so the invariance suite can prove it would notice.
_FAULT_UNNORMALIZED_SIM = False


@dataclass(frozen=True)
class GCKernel:
    """One output channel's kernel: S support directions and their weights."""

    support_dirs: np.ndarray  # (S, 3)
    center_weights: np.ndarray  # (D_in,)
    support_weights: np.ndarray  # (S, D_in)

    def __post_init__(self):
        kd = np.asarray(self.support_dirs, dtype=np.float64)
        cw = np.asarray(self.center_weights, dtype=np.float64)
        sw = np.asarray(self.support_weights, dtype=np.float64)
        if kd.ndim != 2 or kd.shape[1] != 3:
            raise ValueError(f"support_dirs must be (S, 3), got {kd.shape}")
        if cw.ndim != 1:
            raise ValueError("center_weights must be a vector")
        if sw.shape != (kd.shape[0], cw.shape[0]):
            raise ValueError(
                f"support_weights must be (S, D_in)=({kd.shape[0]}, {cw.shape[0]}), "
                f"got {sw.shape}"
            )
        for arr in (kd, cw, sw):
            if not np.all(np.isfinite(arr)):
                raise ValueError("kernel parameters must be finite")
        if kd.shape[0] > 0 and np.any(np.linalg.norm(kd, axis=1) < MIN_SUPPORT_NORM):
            raise ValueError("support directions must have norm >= 1e-8")
        object.__setattr__(self, "support_dirs", kd)
        object.__setattr__(self, "center_weights", cw)
        object.__setattr__(self, "support_weights", sw)

    @property
    def s(self) -> int:
        return self.support_dirs.shape[0]

    @property
    def d_in(self) -> int:
        return self.center_weights.shape[0]


class GCLayer:
    """D_out kernels sharing S and D_in, stored stacked for vectorized passes.

    center_weights: (D_out, D_in)
    support_dirs:   (D_out, S, 3)
    support_weights:(D_out, S, D_in)
    """

    def __init__(self, center_weights, support_dirs, support_weights):
        self.center_weights = np.asarray(center_weights, dtype=np.float64)
        self.support_dirs = np.asarray(support_dirs, dtype=np.float64)
        self.support_weights = np.asarray(support_weights, dtype=np.float64)
        self.validate()

    def validate(self):
        cw, kd, sw = self.center_weights, self.support_dirs, self.support_weights
        if cw.ndim != 2:
            raise ValueError("center_weights must be (D_out, D_in)")
        d_out, d_in = cw.shape
        if kd.shape[:1] != (d_out,) or kd.ndim != 3 or kd.shape[2] != 3:
            raise ValueError(f"support_dirs must be (D_out, S, 3), got {kd.shape}")
        s = kd.shape[1]
        if sw.shape != (d_out, s, d_in):
            raise ValueError(f"support_weights must be ({d_out}, {s}, {d_in}), got {sw.shape}")
        for arr in (cw, kd, sw):
            if not np.all(np.isfinite(arr)):
                raise ValueError("layer parameters must be finite")
        if s > 0 and np.any(np.linalg.norm(kd, axis=2) < MIN_SUPPORT_NORM):
            raise ValueError("support directions must have norm >= 1e-8")

    @property
    def d_in(self) -> int:
        return self.center_weights.shape[1]

    @property
    def d_out(self) -> int:
        return self.center_weights.shape[0]

    @property
    def s(self) -> int:
        return self.support_dirs.shape[1]

    @property
    def kernels(self) -> list[GCKernel]:
        return [
            GCKernel(self.support_dirs[c], self.center_weights[c], self.support_weights[c])
            for c in range(self.d_out)
        ]

    @classmethod
    def from_kernels(cls, kernels: list[GCKernel]) -> "GCLayer":
        if not kernels:
            raise ValueError("need at least one kernel")
        return cls(
            np.stack([k.center_weights for k in kernels]),
            np.stack([k.support_dirs for k in kernels]),
            np.stack([k.support_weights for k in kernels]),
        )

    @classmethod
    def init(cls, d_in: int, d_out: int, s: int, seed: int) -> "GCLayer":
        """Seeded init: unit-sphere support directions, fan-in-scaled uniform weights."""
        rng = make_rng(seed)
        dirs = rng.normal(size=(d_out, s, 3))
        if s > 0:
            dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        stdv = 1.0 / np.sqrt(d_in)
        cw = rng.uniform(-stdv, stdv, size=(d_out, d_in))
        sw = rng.uniform(-stdv, stdv, size=(d_out, s, d_in))
        return cls(cw, dirs, sw)


@dataclass
class GCGrads:
    """Gradients for one GCLayer, same field shapes as the layer."""

    center_weights: np.ndarray
    support_dirs: np.ndarray
    support_weights: np.ndarray


@dataclass
class GCCache:
    """Forward intermediates needed to route gradients."""

    nbr_ids: np.ndarray  # (N, M)
    unit: np.ndarray  # (N, M, 3) unit offsets, zero rows where degenerate
    argmax: np.ndarray  # (N, C, S) neighbor slot of each winning similarity
    a_star: np.ndarray  # (N, C, S) feature response at the winner
    b_star: np.ndarray  # (N, C, S) direction cosine at the winner
    tie_margin: float  # min gap between best and second-best similarity


def similarity(p_i, p_m, f_m, k_s, w_s) -> float:
    """Single neighbor-vs-support response: (f_m . w_s) * cos(p_m - p_i, k_s)."""
    p_i = np.asarray(p_i, dtype=np.float64)
    p_m = np.asarray(p_m, dtype=np.float64)
    f_m = np.asarray(f_m, dtype=np.float64)
    k_s = np.asarray(k_s, dtype=np.float64)
    w_s = np.asarray(w_s, dtype=np.float64)
    k_norm = np.linalg.norm(k_s)
    if k_norm < MIN_SUPPORT_NORM:
        raise ValueError("support direction too close to zero")
    d = p_m - p_i
    d_norm = np.linalg.norm(d)
    if d_norm < DEGENERATE_OFFSET:
        cos = 0.0
    else:
        cos = float(d @ k_s) / (d_norm * k_norm)
    return float(f_m @ w_s) * cos


def _unit_offsets(points: np.ndarray, nbr_ids: np.ndarray) -> np.ndarray:
    diff = points[nbr_ids] - points[:, None, :]
    norms = np.linalg.norm(diff, axis=2, keepdims=True)
    if _FAULT_UNNORMALIZED_SIM:
        return diff
    unit = np.zeros_like(diff)
    np.divide(diff, norms, out=unit, where=norms >= DEGENERATE_OFFSET)
    return unit


def _check_forward_args(pc, fm, nbrs, layer):
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 2 or fm.shape[0] != pc.n:
        raise ValueError(f"feature map must be ({pc.n}, D_in), got {fm.shape}")
    if fm.shape[1] != layer.d_in:
        raise ValueError(f"feature dim {fm.shape[1]} does not match layer d_in {layer.d_in}")
    if nbrs.n != pc.n:
        raise ValueError(f"neighbor index covers {nbrs.n} points, cloud has {pc.n}")
    if layer.s > 0 and nbrs.m < 1:
        raise ValueError("kernels with support vectors need at least one neighbor")
    return fm


def gc_forward(pc: PointCloud, fm, nbrs: NeighborIndex, layer: GCLayer, return_cache=False):
    """Convolve every point's receptive field with every kernel.

    Returns the (N, D_out) feature map, plus a GCCache when
    return_cache=True.
    """
    fm = _check_forward_args(pc, fm, nbrs, layer)
    n = pc.n
    out = fm @ layer.center_weights.T
    if layer.s == 0:
        if return_cache:
            cache = GCCache(
                nbr_ids=nbrs.ids,
                unit=np.zeros((n, nbrs.m, 3)),
                argmax=np.zeros((n, layer.d_out, 0), dtype=np.int64),
                a_star=np.zeros((n, layer.d_out, 0)),
                b_star=np.zeros((n, layer.d_out, 0)),
                tie_margin=np.inf,
            )
            return out, cache
        return out

    unit = _unit_offsets(pc.points, nbrs.ids)
    k_norm = np.linalg.norm(layer.support_dirs, axis=2, keepdims=True)
    khat = layer.support_dirs / k_norm
    # sim[n, m, c, s] = (f_m . w_s^c) * (u_nm . khat^cs)
    cosines = np.einsum("nmx,csx->nmcs", unit, khat)
    fresp = np.einsum("nmd,csd->nmcs", fm[nbrs.ids], layer.support_weights)
    sim = fresp * cosines
    arg = sim.argmax(axis=1)  # first index wins ties
    top = np.take_along_axis(sim, arg[:, None, :, :], axis=1)[:, 0]
    out = out + top.sum(axis=2)
    if not return_cache:
        return out
    if nbrs.m >= 2:
        top2 = np.partition(sim, nbrs.m - 2, axis=1)[:, nbrs.m - 2]
        tie_margin = float(np.min(top - top2))
    else:
        tie_margin = np.inf
    cache = GCCache(
        nbr_ids=nbrs.ids,
        unit=unit,
        argmax=arg,
        a_star=np.take_along_axis(fresp, arg[:, None, :, :], axis=1)[:, 0],
        b_star=np.take_along_axis(cosines, arg[:, None, :, :], axis=1)[:, 0],
        tie_margin=tie_margin,
    )
    return out, cache


def gc_backward(
    pc: PointCloud,
    fm,
    nbrs: NeighborIndex,
    layer: GCLayer,
    grad_out,
    cache: GCCache | None = None,
):
    """Exact gradients of gc_forward w.r.t. features and kernel parameters.

    The max is routed to the cached argmax neighbor. Positions receive
    no gradient. Returns (grad_fm, GCGrads).
    """
    fm = _check_forward_args(pc, fm, nbrs, layer)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (pc.n, layer.d_out):
        raise ValueError(f"grad_out must be ({pc.n}, {layer.d_out}), got {grad_out.shape}")
    grad_cw = grad_out.T @ fm
    grad_fm = grad_out @ layer.center_weights
    if layer.s == 0:
        return grad_fm, GCGrads(grad_cw, np.zeros_like(layer.support_dirs),
                                np.zeros_like(layer.support_weights))
    if cache is None:
        _, cache = gc_forward(pc, fm, nbrs, layer, return_cache=True)

    n = pc.n
    rows = np.arange(n)[:, None, None]
    j_star = cache.nbr_ids[rows, cache.argmax]  # (N, C, S) winning point ids
    u_star = cache.unit[rows, cache.argmax]  # (N, C, S, 3)
    coeff = grad_out[:, :, None]  # (N, C, 1) broadcast over S

    # d sim / d w_s = b * f_j ; d sim / d f_j = b * w_s
    cb = coeff * cache.b_star  # (N, C, S)
    grad_sw = np.einsum("ncs,ncsd->csd", cb, fm[j_star])
    contrib = cb[..., None] * layer.support_weights[None]  # (N, C, S, D_in)
    np.add.at(grad_fm, j_star.ravel(), contrib.reshape(-1, layer.d_in))

    # d sim / d k = a * (u - b * khat) / |k|
    k_norm = np.linalg.norm(layer.support_dirs, axis=2, keepdims=True)
    khat = layer.support_dirs / k_norm
    ca = coeff * cache.a_star  # (N, C, S)
    term_u = np.einsum("ncs,ncsx->csx", ca, u_star)
    term_k = (ca * cache.b_star).sum(axis=0)[..., None] * khat
    grad_kd = (term_u - term_k) / k_norm
    return grad_fm, GCGrads(grad_cw, grad_kd, grad_sw)


@dataclass
class PoolCache:
    """Survivor ids and, per survivor and channel, the source row of the max."""

    survivors: np.ndarray  # (keep,)
    src_rows: np.ndarray  # (keep, D) row in the pre-pool cloud
    n_before: int


def graph_max_pool(
    pc: PointCloud,
    fm,
    nbrs: NeighborIndex,
    keep: int,
    seed: int,
    return_cache=False,
):
    """Subsample `keep` points (seeded) and max-pool features over their
    receptive fields (the point itself plus its M neighbors).

    Survivors keep their original relative order.
    """
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 2 or fm.shape[0] != pc.n:
        raise ValueError(f"feature map must be ({pc.n}, D), got {fm.shape}")
    if nbrs.n != pc.n:
        raise ValueError("neighbor index does not match the cloud")
    if keep < 1 or keep > pc.n:
        raise ValueError(f"keep={keep} must be in [1, {pc.n}]")
    survivors = np.sort(make_rng(seed).choice(pc.n, size=keep, replace=False))
    field = np.concatenate([np.arange(pc.n)[:, None], nbrs.ids], axis=1)  # (N, M+1)
    gathered = fm[field[survivors]]  # (keep, M+1, D)
    arg = gathered.argmax(axis=1)  # (keep, D)
    pooled = np.take_along_axis(gathered, arg[:, None, :], axis=1)[:, 0]
    labels = pc.labels[survivors] if pc.labels is not None else None
    out_pc = PointCloud(pc.points[survivors], labels)
    if not return_cache:
        return out_pc, pooled
    src_rows = np.take_along_axis(field[survivors], arg, axis=1)
    return (out_pc, pooled), PoolCache(survivors, src_rows, pc.n)


def graph_max_pool_backward(cache: PoolCache, grad_pooled) -> np.ndarray:
    """Scatter pooled-feature gradients back to their source rows."""
    grad_pooled = np.asarray(grad_pooled, dtype=np.float64)
    keep, d = cache.src_rows.shape
    if grad_pooled.shape != (keep, d):
        raise ValueError(f"grad must be ({keep}, {d}), got {grad_pooled.shape}")
    grad_fm = np.zeros((cache.n_before, d))
    np.add.at(grad_fm, (cache.src_rows, np.broadcast_to(np.arange(d), (keep, d))), grad_pooled)
    return grad_fm


# ---------------------------------------------------------------------------
# Parameter serialization: a flat binary layout plus a text dump for diffing.
# Both round-trip float64 values bit-exactly.
# ---------------------------------------------------------------------------

_MAGIC = b"HSPTPRM1"
_VERSION = 1


def save_parameters(path, named: dict) -> None:
    """Write named float64 arrays: magic, version, count, then per array
    a name, a shape header, and row-major little-endian float64 data."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(named)))
        for name, arr in named.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_parameters(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a parameter file (bad magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        named = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8")
            if data.size != size:
                raise ValueError(f"{path}: truncated data for {name!r}")
            named[name] = data.reshape(shape).astype(np.float64)
        return named


def save_parameters_text(path, named: dict) -> None:
    """Equivalent plain-text dump, one value per line, 17 significant digits."""
    lines = [f"hspoint-params {_VERSION}", str(len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr, dtype=np.float64)
        lines.append(f"{name} {arr.ndim} " + " ".join(str(d) for d in arr.shape))
        lines.extend(f"{v:.17g}" for v in arr.ravel(order="C"))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_parameters_text(path) -> dict:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("hspoint-params "):
        raise ValueError(f"{path}: not a text parameter dump")
    count = int(lines[1])
    named = {}
    pos = 2
    for _ in range(count):
        head = lines[pos].split()
        name, ndim = head[0], int(head[1])
        shape = tuple(int(d) for d in head[2 : 2 + ndim])
        size = int(np.prod(shape)) if ndim else 1
        vals = np.array([float(v) for v in lines[pos + 1 : pos + 1 + size]])
        named[name] = vals.reshape(shape)
        pos += 1 + size
    return named
