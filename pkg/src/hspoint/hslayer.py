"""Hybrid-scope layer: a scale/translation-encoding path in parallel with a
geometric path, summed element-wise.

The geometric path forms receptive fields by feature distance (point
distance in the first layer, where features are initialized to all
ones), runs the graph convolution, then adjusts each point feature with
an outlier-robust global summary (local channel-wise max, global mean,
linear correction, residual add). The parallel linear path restores the
size and translation information the geometric path is invariant to; in
the first layer it reads the raw point positions.

Backward passes hold all discrete selections (neighbor sets, argmaxes)
fixed and differentiate the values that flow through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphconv import GCCache, GCGrads, GCLayer, gc_backward, gc_forward, graph_max_pool, \
    graph_max_pool_backward, PoolCache
from .neighbors import NeighborIndex, knn_features, knn_points
from .pointcloud import PointCloud
from .rng import child_seeds, make_rng


@dataclass
class LinearMap:
    """Affine map on rows: out = x @ weights + bias."""

    weights: np.ndarray  # (D_in, D_out)
    bias: np.ndarray  # (D_out,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be (D_in, D_out)")
        if self.bias.shape != (self.weights.shape[1],):
            raise ValueError("bias length must equal D_out")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("linear parameters must be finite")

    @property
    def d_in(self) -> int:
        return self.weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, d_in: int, d_out: int, seed: int) -> "LinearMap":
        rng = make_rng(seed)
        stdv = 1.0 / np.sqrt(d_in)
        return cls(rng.uniform(-stdv, stdv, size=(d_in, d_out)),
                   rng.uniform(-stdv, stdv, size=d_out))

    @classmethod
    def zeros(cls, d_in: int, d_out: int) -> "LinearMap":
        return cls(np.zeros((d_in, d_out)), np.zeros(d_out))


@dataclass
class LinearGrads:
    weights: np.ndarray
    bias: np.ndarray


def ste_forward(x, lm: LinearMap) -> np.ndarray:
    """Per-point affine encoding; rows of x are features or raw positions."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != lm.d_in:
        raise ValueError(f"input must be (N, {lm.d_in}), got {x.shape}")
    return x @ lm.weights + lm.bias


def ste_backward(x, lm: LinearMap, grad_out) -> tuple[np.ndarray, LinearGrads]:
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    grad_x = grad_out @ lm.weights.T
    return grad_x, LinearGrads(x.T @ grad_out, grad_out.sum(axis=0))


@dataclass
class ORLCache:
    rfp: NeighborIndex
    src_rows: np.ndarray  # (N, D) row whose feature won each local max
    f_global: np.ndarray  # (D,)
    fm_in: np.ndarray  # (N, D)
    tie_margin: float


def orl_forward(pc: PointCloud, fm, rfp: NeighborIndex, orl: LinearMap, return_cache=False):
    """Outlier-robust adjustment: local max, global mean, linear correction,
    residual add.

    g_n is the channel-wise max over the point itself and its neighbors;
    their mean is the global feature; each output row is
    f_n + linear(concat(global, f_n)).
    """
    fm = np.asarray(fm, dtype=np.float64)
    n, d = fm.shape
    if n != pc.n or rfp.n != n:
        raise ValueError("cloud, features, and neighbor index sizes disagree")
    if orl.d_in != 2 * d or orl.d_out != d:
        raise ValueError(f"adjustment map must be ({2 * d} -> {d}), got "
                         f"({orl.d_in} -> {orl.d_out})")
    field_rows = np.concatenate([np.arange(n)[:, None], rfp.ids], axis=1)
    gathered = fm[field_rows]  # (N, M+1, D)
    arg = gathered.argmax(axis=1)  # (N, D)
    g = np.take_along_axis(gathered, arg[:, None, :], axis=1)[:, 0]
    f_global = g.mean(axis=0)
    concat = np.concatenate([np.broadcast_to(f_global, (n, d)), fm], axis=1)
    out = fm + concat @ orl.weights + orl.bias
    if not return_cache:
        return out
    if gathered.shape[1] >= 2:
        second = np.partition(gathered, gathered.shape[1] - 2, axis=1)[:, gathered.shape[1] - 2]
        tie_margin = float(np.min(g - second))
    else:
        tie_margin = np.inf
    src_rows = np.take_along_axis(field_rows[:, :, None], arg[:, None, :], axis=1)[:, 0]
    return out, ORLCache(rfp, src_rows, f_global, fm, tie_margin)


def orl_backward(orl: LinearMap, cache: ORLCache, grad_out):
    """Gradients of orl_forward w.r.t. the input features and the linear map."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    n, d = cache.fm_in.shape
    if grad_out.shape != (n, d):
        raise ValueError(f"grad must be ({n}, {d}), got {grad_out.shape}")
    w_global = orl.weights[:d]  # rows applied to the global feature
    w_self = orl.weights[d:]
    grad_fm = grad_out + grad_out @ w_self.T
    # through the global feature: mean of local maxes
    grad_fglobal = (grad_out @ w_global.T).sum(axis=0)
    grad_g = np.broadcast_to(grad_fglobal / n, (n, d))
    np.add.at(grad_fm, (cache.src_rows, np.broadcast_to(np.arange(d), (n, d))), grad_g)
    grad_w = np.concatenate(
        [np.outer(cache.f_global, grad_out.sum(axis=0)), cache.fm_in.T @ grad_out], axis=0
    )
    return grad_fm, LinearGrads(grad_w, grad_out.sum(axis=0))


@dataclass
class HSLayerParams:
    """Parameters and receptive-field settings for one hybrid-scope layer.

    The first layer reads positions in the encoding path, uses the
    point-distance metric, and feeds all-ones features to the
    convolution. `use_rff=False` forces the point metric in later layers
    too (the plain-convolution ablation).
    """

    gc: GCLayer
    ste: LinearMap
    orl: LinearMap
    m_rff: int
    m_orl: int
    is_first_layer: bool
    use_rff: bool = True

    def __post_init__(self):
        d_out = self.gc.d_out
        if self.ste.d_out != d_out:
            raise ValueError("encoding path output dim must match the geometric path")
        if self.orl.d_in != 2 * d_out or self.orl.d_out != d_out:
            raise ValueError(f"adjustment map must be ({2 * d_out} -> {d_out})")
        expected_ste_in = 3 if self.is_first_layer else self.gc.d_in
        if self.ste.d_in != expected_ste_in:
            raise ValueError(f"encoding path input dim must be {expected_ste_in}")
        if self.is_first_layer and self.gc.d_in != 1:
            raise ValueError("first layer convolves all-ones features of dim 1")
        if self.m_rff < 1 or self.m_orl < 1:
            raise ValueError("neighbor counts must be >= 1")

    @property
    def d_in(self) -> int:
        return self.gc.d_in

    @property
    def d_out(self) -> int:
        return self.gc.d_out

    @classmethod
    def init(cls, d_in, d_out, s, m_rff, m_orl, is_first_layer, seed, use_rff=True):
        gc_seed, ste_seed, orl_seed = child_seeds(seed, 3)
        return cls(
            gc=GCLayer.init(d_in, d_out, s, gc_seed),
            ste=LinearMap.init(3 if is_first_layer else d_in, d_out, ste_seed),
            orl=LinearMap.init(2 * d_out, d_out, orl_seed),
            m_rff=m_rff,
            m_orl=m_orl,
            is_first_layer=is_first_layer,
            use_rff=use_rff,
        )


@dataclass
class HSLayerCache:
    nbrs: NeighborIndex  # receptive fields fed to the convolution
    rfp_orl: NeighborIndex
    gc_in: np.ndarray
    gc_cache: GCCache
    z: np.ndarray  # convolution output, input of the adjustment
    orl_cache: ORLCache
    ste_in: np.ndarray

    @property
    def tie_margin(self) -> float:
        return min(self.gc_cache.tie_margin, self.orl_cache.tie_margin)


@dataclass
class HSLayerGrads:
    gc: GCGrads
    ste: LinearGrads
    orl: LinearGrads


def hs_layer_forward(pc: PointCloud, fm, params: HSLayerParams, return_cache=False):
    """One hybrid-scope layer. `fm` must be None for the first layer."""
    if pc.n <= max(params.m_rff, params.m_orl):
        raise ValueError(
            f"need more than max(m_rff, m_orl)={max(params.m_rff, params.m_orl)} "
            f"points, have {pc.n}"
        )
    if params.is_first_layer:
        if fm is not None:
            raise ValueError("first layer takes no input features (pass None)")
        gc_in = np.ones((pc.n, 1))
        ste_in = pc.points
        nbrs = knn_points(pc, params.m_rff)
    else:
        if fm is None:
            raise ValueError("non-first layer requires input features")
        gc_in = np.asarray(fm, dtype=np.float64)
        ste_in = gc_in
        if params.use_rff:
            nbrs = knn_features(gc_in, params.m_rff)
        else:
            nbrs = knn_points(pc, params.m_rff)
    z, gc_cache = gc_forward(pc, gc_in, nbrs, params.gc, return_cache=True)
    rfp_orl = knn_points(pc, params.m_orl)
    geo, orl_cache = orl_forward(pc, z, rfp_orl, params.orl, return_cache=True)
    out = geo + ste_forward(ste_in, params.ste)
    if not return_cache:
        return out
    return out, HSLayerCache(nbrs, rfp_orl, gc_in, gc_cache, z, orl_cache, ste_in)


def hs_layer_backward(pc: PointCloud, params: HSLayerParams, cache: HSLayerCache, grad_out):
    """Gradients of hs_layer_forward with all neighbor selections frozen.

    Returns (grad_fm or None for the first layer, HSLayerGrads).
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    grad_z, orl_grads = orl_backward(params.orl, cache.orl_cache, grad_out)
    grad_gc_in, gc_grads = gc_backward(pc, cache.gc_in, cache.nbrs, params.gc, grad_z,
                                       cache.gc_cache)
    grad_ste_in, ste_grads = ste_backward(cache.ste_in, params.ste, grad_out)
    if params.is_first_layer:
        grad_fm = None  # constant ones and raw positions receive no gradient
    else:
        grad_fm = grad_gc_in + grad_ste_in
    return grad_fm, HSLayerGrads(gc_grads, ste_grads, orl_grads)


@dataclass(frozen=True)
class PoolStage:
    keep: int
    m: int

    def __post_init__(self):
        if self.keep < 1 or self.m < 0:
            raise ValueError("pool stage needs keep >= 1 and m >= 0")


@dataclass
class EncoderConfig:
    """Stacked hybrid-scope layers with optional pooling after given layers."""

    layers: list
    pool_after: dict = field(default_factory=dict)
    pool_seed: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        if not self.layers[0].is_first_layer:
            raise ValueError("layer 0 must be marked is_first_layer")
        for i, layer in enumerate(self.layers[1:], start=1):
            if layer.is_first_layer:
                raise ValueError(f"layer {i} must not be marked is_first_layer")
            if layer.d_in != self.layers[i - 1].d_out:
                raise ValueError(
                    f"layer {i} input dim {layer.d_in} does not chain from "
                    f"layer {i - 1} output dim {self.layers[i - 1].d_out}"
                )
        for idx in self.pool_after:
            if not (0 <= idx < len(self.layers)):
                raise ValueError(f"pool stage index {idx} out of range")

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out


@dataclass
class EncoderCache:
    clouds: list  # cloud entering each layer
    layer_caches: list
    pool_caches: dict  # layer index -> PoolCache


def hs_encoder_forward(pc: PointCloud, cfg: EncoderConfig, return_cache=False):
    """Run the layer stack with configured pooling; returns (cloud, features)."""
    clouds, layer_caches, pool_caches = [], [], {}
    pool_seeds = child_seeds(cfg.pool_seed, len(cfg.layers))
    fm = None
    for i, params in enumerate(cfg.layers):
        clouds.append(pc)
        fm, cache = hs_layer_forward(pc, fm, params, return_cache=True)
        layer_caches.append(cache)
        if i in cfg.pool_after:
            stage = cfg.pool_after[i]
            nbrs = knn_points(pc, stage.m)
            (pc, fm), pcache = graph_max_pool(pc, fm, nbrs, stage.keep, pool_seeds[i],
                                              return_cache=True)
            pool_caches[i] = pcache
    if return_cache:
        return (pc, fm), EncoderCache(clouds, layer_caches, pool_caches)
    return pc, fm


def hs_encoder_backward(cfg: EncoderConfig, cache: EncoderCache, grad_out):
    """Backpropagate through the stack; returns per-layer HSLayerGrads."""
    grads = [None] * len(cfg.layers)
    grad = np.asarray(grad_out, dtype=np.float64)
    for i in range(len(cfg.layers) - 1, -1, -1):
        if i in cache.pool_caches:
            grad = graph_max_pool_backward(cache.pool_caches[i], grad)
        grad, grads[i] = hs_layer_backward(cache.clouds[i], cfg.layers[i],
                                           cache.layer_caches[i], grad)
    return grads


def encoder_tie_margin(cache: EncoderCache) -> float:
    return min(lc.tie_margin for lc in cache.layer_caches)


# ---------------------------------------------------------------------------
# Structural description and plain-text config format
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    d_out: int
    s: int = 1
    m_rff: int = 10
    m_orl: int | None = None  # defaults to m_rff
    use_rff: bool = True

    def resolved_m_orl(self) -> int:
        return self.m_rff if self.m_orl is None else self.m_orl


@dataclass(frozen=True)
class EncoderSpec:
    """Structure of an encoder; `build` turns it into seeded parameters."""

    layers: tuple
    pools: tuple = ()  # (layer index, keep, m) triples
    seed: int = 0

    def build(self, seed: int | None = None) -> EncoderConfig:
        root = self.seed if seed is None else seed
        seeds = child_seeds(root, len(self.layers) + 1)
        layers = []
        d_in = 1
        for i, spec in enumerate(self.layers):
            layers.append(HSLayerParams.init(
                d_in=d_in,
                d_out=spec.d_out,
                s=spec.s,
                m_rff=spec.m_rff,
                m_orl=spec.resolved_m_orl(),
                is_first_layer=(i == 0),
                seed=seeds[i],
                use_rff=spec.use_rff,
            ))
            d_in = spec.d_out
        pool_after = {idx: PoolStage(keep, m) for idx, keep, m in self.pools}
        return EncoderConfig(layers, pool_after, pool_seed=seeds[-1])


_TRUE = {"true", "1", "yes"}
_FALSE = {"false", "0", "no"}


def parse_encoder_spec(text: str) -> EncoderSpec:
    """Parse the key-value encoder config format.

    Keys: `seed`, `layer.<i>.<d_out|s|m_rff|m_orl|use_rff>`, and
    `pool.<i>.<keep|m>` where <i> is the layer index the pool follows.
    Lines starting with `#` and blank lines are ignored.
    """
    seed = 0
    layer_kv: dict[int, dict] = {}
    pool_kv: dict[int, dict] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key == "seed":
            seed = int(val)
            continue
        parts = key.split(".")
        if len(parts) != 3 or parts[0] not in ("layer", "pool"):
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            idx = int(parts[1])
        except ValueError:
            raise ValueError(f"line {lineno}: bad index in {key!r}") from None
        bucket = layer_kv if parts[0] == "layer" else pool_kv
        fields = {"d_out", "s", "m_rff", "m_orl", "use_rff"} if parts[0] == "layer" \
            else {"keep", "m"}
        if parts[2] not in fields:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if parts[2] == "use_rff":
            low = val.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(f"line {lineno}: use_rff must be true/false")
            bucket.setdefault(idx, {})[parts[2]] = low in _TRUE
        else:
            bucket.setdefault(idx, {})[parts[2]] = int(val)
    if not layer_kv:
        raise ValueError("config declares no layers")
    indices = sorted(layer_kv)
    if indices != list(range(len(indices))):
        raise ValueError(f"layer indices must be contiguous from 0, got {indices}")
    layers = []
    for i in indices:
        kv = layer_kv[i]
        if "d_out" not in kv:
            raise ValueError(f"layer {i} is missing d_out")
        layers.append(LayerSpec(**kv))
    pools = []
    for i in sorted(pool_kv):
        kv = pool_kv[i]
        if "keep" not in kv or "m" not in kv:
            raise ValueError(f"pool after layer {i} needs both keep and m")
        if i not in layer_kv:
            raise ValueError(f"pool references missing layer {i}")
        pools.append((i, kv["keep"], kv["m"]))
    return EncoderSpec(tuple(layers), tuple(pools), seed)


def load_encoder_spec(path) -> EncoderSpec:
    return parse_encoder_spec(Path(path).read_text())


def format_encoder_spec(spec: EncoderSpec) -> str:
    lines = [f"seed = {spec.seed}"]
    for i, layer in enumerate(spec.layers):
        lines.append(f"layer.{i}.d_out = {layer.d_out}")
        lines.append(f"layer.{i}.s = {layer.s}")
        lines.append(f"layer.{i}.m_rff = {layer.m_rff}")
        lines.append(f"layer.{i}.m_orl = {layer.resolved_m_orl()}")
        if not layer.use_rff:
            lines.append(f"layer.{i}.use_rff = false")
    for idx, keep, m in spec.pools:
        lines.append(f"pool.{idx}.keep = {keep}")
        lines.append(f"pool.{idx}.m = {m}")
    return "\n".join(lines) + "\n"
