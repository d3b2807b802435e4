"""Hybrid-scope layer and encoder: path composition, invariances, gradients."""

import numpy as np
import pytest

from hspoint.graphconv import GCLayer, gc_forward
from hspoint.hslayer import (
    EncoderConfig,
    EncoderSpec,
    HSLayerParams,
    LayerSpec,
    LinearMap,
    PoolStage,
    encoder_tie_margin,
    format_encoder_spec,
    hs_encoder_backward,
    hs_encoder_forward,
    hs_layer_backward,
    hs_layer_forward,
    orl_backward,
    orl_forward,
    parse_encoder_spec,
    ste_backward,
    ste_forward,
)
from hspoint.neighbors import knn_features, knn_points
from hspoint.pointcloud import PointCloud, ShapeSpec, generate_shape
from hspoint.rng import make_rng


def rel_err(a, n):
    return abs(a - n) / max(1e-8, abs(a), abs(n))


def zeroed(params: HSLayerParams, gc=False, ste=False, orl=False) -> HSLayerParams:
    """Copy of a layer with selected parameter groups zeroed."""
    gc_layer = params.gc
    if gc:
        gc_layer = GCLayer(
            np.zeros_like(gc_layer.center_weights),
            gc_layer.support_dirs,
            np.zeros_like(gc_layer.support_weights),
        )
    return HSLayerParams(
        gc=gc_layer,
        ste=LinearMap.zeros(params.ste.d_in, params.ste.d_out) if ste else params.ste,
        orl=LinearMap.zeros(params.orl.d_in, params.orl.d_out) if orl else params.orl,
        m_rff=params.m_rff,
        m_orl=params.m_orl,
        is_first_layer=params.is_first_layer,
        use_rff=params.use_rff,
    )


class TestSTE:
    def test_zero_weights_gives_bias_rows(self):
        lm = LinearMap(np.zeros((3, 4)), np.array([1.0, -2.0, 0.5, 3.0]))
        out = ste_forward(np.ones((6, 3)), lm)
        assert np.array_equal(out, np.tile(lm.bias, (6, 1)))

    def test_identity_weights(self):
        lm = LinearMap(np.eye(3), np.zeros(3))
        x = make_rng(0).normal(size=(5, 3))
        assert np.array_equal(ste_forward(x, lm), x)

    def test_matches_matmul_oracle(self):
        rng = make_rng(1)
        lm = LinearMap(rng.normal(size=(4, 3)), rng.normal(size=3))
        x = rng.normal(size=(5, 4))
        expect = np.array([[row @ lm.weights[:, c] + lm.bias[c] for c in range(3)]
                           for row in x])
        assert np.allclose(ste_forward(x, lm), expect, atol=1e-14)

    def test_dim_mismatch(self):
        lm = LinearMap(np.zeros((3, 2)), np.zeros(2))
        with pytest.raises(ValueError):
            ste_forward(np.zeros((4, 5)), lm)


class TestORL:
    def _instance(self, seed, n=6, d=2, m=2):
        rng = make_rng(seed)
        pc = PointCloud(rng.normal(size=(n, 3)))
        fm = rng.normal(size=(n, d))
        rfp = knn_points(pc, m)
        orl = LinearMap(rng.normal(size=(2 * d, d)), rng.normal(size=d))
        return pc, fm, rfp, orl

    def test_constant_features(self):
        pc, _, rfp, orl = self._instance(0)
        c = np.array([1.5, -0.5])
        fm = np.tile(c, (6, 1))
        out = orl_forward(pc, fm, rfp, orl)
        expect_row = c + np.concatenate([c, c]) @ orl.weights + orl.bias
        assert np.allclose(out, np.tile(expect_row, (6, 1)), atol=1e-12)

    def test_zero_parameters_is_identity(self):
        pc, fm, rfp, _ = self._instance(1)
        out = orl_forward(pc, fm, rfp, LinearMap.zeros(4, 2))
        assert np.array_equal(out, fm)

    def test_hand_oracle(self):
        pc, fm, rfp, orl = self._instance(2)
        out = orl_forward(pc, fm, rfp, orl)
        # step-by-step reference
        n, d = fm.shape
        g = np.empty_like(fm)
        for i in range(n):
            members = [i] + list(rfp.ids[i])
            g[i] = fm[members].max(axis=0)
        f_global = g.mean(axis=0)
        expect = np.empty_like(fm)
        for i in range(n):
            expect[i] = fm[i] + np.concatenate([f_global, fm[i]]) @ orl.weights + orl.bias
        assert np.allclose(out, expect, atol=1e-13)

    def test_backward_matches_finite_differences(self):
        pc, fm, rfp, orl = self._instance(3, n=8, d=3, m=2)
        rng = make_rng(30)
        grad_out = rng.normal(size=fm.shape)
        _, cache = orl_forward(pc, fm, rfp, orl, return_cache=True)
        assert cache.tie_margin > 1e-4
        grad_fm, grads = orl_backward(orl, cache, grad_out)
        eps = 1e-6

        def loss(fm_v, w, b):
            return float((orl_forward(pc, fm_v, rfp, LinearMap(w, b)) * grad_out).sum())

        for which, (arr, analytic) in enumerate(
            [(fm, grad_fm), (orl.weights, grads.weights), (orl.bias, grads.bias)]
        ):
            for flat in range(arr.size):
                args = [fm.copy(), orl.weights.copy(), orl.bias.copy()]
                args[which].flat[flat] += eps
                lp = loss(*args)
                args[which].flat[flat] -= 2 * eps
                lm_ = loss(*args)
                numeric = (lp - lm_) / (2 * eps)
                assert rel_err(analytic.flat[flat], numeric) <= 1e-5


def first_layer(seed=0, d_out=3, s=1, m=2, use_rff=True):
    return HSLayerParams.init(1, d_out, s, m, m, True, seed, use_rff)


def later_layer(seed=0, d_in=2, d_out=3, s=1, m=2, use_rff=True):
    return HSLayerParams.init(d_in, d_out, s, m, m, False, seed, use_rff)


class TestHSLayerForward:
    def test_zero_geometric_path_leaves_ste(self):
        rng = make_rng(0)
        pc = PointCloud(rng.normal(size=(12, 3)))
        params = zeroed(first_layer(seed=1), gc=True, orl=True)
        out = hs_layer_forward(pc, None, params)
        assert np.array_equal(out, ste_forward(pc.points, params.ste))

    def test_zero_ste_leaves_geometric_path(self):
        rng = make_rng(1)
        pc = PointCloud(rng.normal(size=(12, 3)))
        fm = rng.normal(size=(12, 2))
        params = zeroed(later_layer(seed=2), ste=True)
        out = hs_layer_forward(pc, fm, params)
        nbrs = knn_features(fm, params.m_rff)
        z = gc_forward(pc, fm, nbrs, params.gc)
        geo = orl_forward(pc, z, knn_points(pc, params.m_orl), params.orl)
        assert np.array_equal(out, geo)

    def test_composed_oracle(self):
        rng = make_rng(2)
        pc = PointCloud(rng.normal(size=(12, 3)))
        fm = rng.normal(size=(12, 2))
        params = later_layer(seed=3, d_in=2, d_out=3, s=1, m=2)
        out = hs_layer_forward(pc, fm, params)
        nbrs = knn_features(fm, 2)
        z = gc_forward(pc, fm, nbrs, params.gc)
        geo = orl_forward(pc, z, knn_points(pc, 2), params.orl)
        expect = geo + ste_forward(fm, params.ste)
        assert np.array_equal(out, expect)

    def test_first_layer_uses_point_metric(self):
        pc = generate_shape(ShapeSpec.sphere(1.0, seed=5), 40)
        params = first_layer(seed=4, m=3)
        _, cache = hs_layer_forward(pc, None, params, return_cache=True)
        assert np.array_equal(cache.nbrs.ids, knn_points(pc, 3).ids)

    def test_translation_changes_output_through_encoding_path(self):
        pc = generate_shape(ShapeSpec.box(0.2, 0.12, 0.06, seed=6), 40)
        params = first_layer(seed=7, m=3)
        base = hs_layer_forward(pc, None, params)
        moved = hs_layer_forward(PointCloud(pc.points + [1.0, 0.0, 0.0]), None, params)
        assert np.max(np.abs(moved - base)) > 1e-6

    def test_geometric_path_invariant_when_ste_zeroed(self):
        pc = generate_shape(ShapeSpec.box(0.2, 0.12, 0.06, seed=8), 40)
        params = zeroed(first_layer(seed=9, m=3), ste=True)
        base = hs_layer_forward(pc, None, params)
        rng = make_rng(10)
        for _ in range(5):
            t = rng.uniform(-10, 10, size=3)
            c = float(rng.uniform(0.01, 100))
            out = hs_layer_forward(PointCloud(pc.points * c + t), None, params)
            assert np.max(np.abs(out - base)) <= 1e-9

    def test_permutation_equivariance(self):
        rng = make_rng(11)
        pc = PointCloud(rng.normal(size=(20, 3)))
        fm = rng.normal(size=(20, 2))
        params = later_layer(seed=12)
        base = hs_layer_forward(pc, fm, params)
        perm = rng.permutation(20)
        out = hs_layer_forward(PointCloud(pc.points[perm]), fm[perm], params)
        assert np.max(np.abs(out - base[perm])) <= 1e-9

    def test_too_few_points_rejected(self):
        pc = PointCloud(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            hs_layer_forward(pc, None, first_layer(m=5))

    def test_first_layer_rejects_features(self):
        pc = PointCloud(make_rng(0).normal(size=(10, 3)))
        with pytest.raises(ValueError):
            hs_layer_forward(pc, np.ones((10, 1)), first_layer())


class TestHSLayerBackward:
    def _forward_frozen(self, pc, fm, params, cache):
        """Recompute the layer output with the cached neighbor selections."""
        z = gc_forward(pc, cache.gc_in if params.is_first_layer else fm,
                       cache.nbrs, params.gc)
        geo = orl_forward(pc, z, cache.rfp_orl, params.orl)
        ste_in = cache.ste_in if params.is_first_layer else fm
        return geo + ste_forward(ste_in, params.ste)

    def test_zero_grad_out(self):
        rng = make_rng(0)
        pc = PointCloud(rng.normal(size=(10, 3)))
        fm = rng.normal(size=(10, 2))
        params = later_layer(seed=1)
        out, cache = hs_layer_forward(pc, fm, params, return_cache=True)
        grad_fm, grads = hs_layer_backward(pc, params, cache, np.zeros_like(out))
        assert np.all(grad_fm == 0)
        for arr in (grads.gc.center_weights, grads.gc.support_dirs,
                    grads.gc.support_weights, grads.ste.weights, grads.ste.bias,
                    grads.orl.weights, grads.orl.bias):
            assert np.all(arr == 0)

    def test_ste_only_matches_plain_affine_grads(self):
        rng = make_rng(2)
        pc = PointCloud(rng.normal(size=(10, 3)))
        fm = rng.normal(size=(10, 2))
        params = zeroed(later_layer(seed=3), gc=True, orl=True)
        out, cache = hs_layer_forward(pc, fm, params, return_cache=True)
        grad_out = rng.normal(size=out.shape)
        _, grads = hs_layer_backward(pc, params, cache, grad_out)
        _, direct = ste_backward(fm, params.ste, grad_out)
        assert np.array_equal(grads.ste.weights, direct.weights)
        assert np.array_equal(grads.ste.bias, direct.bias)

    @pytest.mark.parametrize("is_first", [True, False])
    def test_matches_finite_differences(self, is_first):
        rng = make_rng(4)
        pc = PointCloud(rng.normal(size=(12, 3)))
        if is_first:
            params, fm = first_layer(seed=5, d_out=3, s=2, m=3), None
        else:
            params, fm = later_layer(seed=6, d_in=2, d_out=3, s=2, m=3), rng.normal(size=(12, 2))
        out, cache = hs_layer_forward(pc, fm, params, return_cache=True)
        assert cache.tie_margin > 1e-4
        grad_out = rng.normal(size=out.shape)
        grad_fm, grads = hs_layer_backward(pc, params, cache, grad_out)

        groups = {
            "gc.center_weights": (params.gc.center_weights, grads.gc.center_weights),
            "gc.support_dirs": (params.gc.support_dirs, grads.gc.support_dirs),
            "gc.support_weights": (params.gc.support_weights, grads.gc.support_weights),
            "ste.weights": (params.ste.weights, grads.ste.weights),
            "ste.bias": (params.ste.bias, grads.ste.bias),
            "orl.weights": (params.orl.weights, grads.orl.weights),
            "orl.bias": (params.orl.bias, grads.orl.bias),
        }
        if not is_first:
            groups["input"] = (fm, grad_fm)
        eps = 1e-6
        for name, (arr, analytic) in groups.items():
            for flat in range(arr.size):
                orig = arr.flat[flat]
                arr.flat[flat] = orig + eps
                lp = float((self._forward_frozen(pc, fm, params, cache) * grad_out).sum())
                arr.flat[flat] = orig - eps
                lm_ = float((self._forward_frozen(pc, fm, params, cache) * grad_out).sum())
                arr.flat[flat] = orig
                numeric = (lp - lm_) / (2 * eps)
                assert rel_err(analytic.flat[flat], numeric) <= 1e-4, name


class TestEncoder:
    def _spec(self, **kw):
        return EncoderSpec(
            layers=(LayerSpec(d_out=4, s=1, m_rff=3), LayerSpec(d_out=3, s=1, m_rff=3)),
            **kw,
        )

    def test_single_layer_equals_hs_layer(self):
        rng = make_rng(0)
        pc = PointCloud(rng.normal(size=(20, 3)))
        cfg = EncoderSpec(layers=(LayerSpec(d_out=4, s=1, m_rff=3),), seed=1).build()
        out_pc, fm = hs_encoder_forward(pc, cfg)
        direct = hs_layer_forward(pc, None, cfg.layers[0])
        assert np.array_equal(fm, direct)
        assert np.array_equal(out_pc.points, pc.points)

    def test_zero_second_layer_gives_zeros(self):
        rng = make_rng(1)
        pc = PointCloud(rng.normal(size=(20, 3)))
        cfg = self._spec(seed=2).build()
        cfg.layers[1] = zeroed(cfg.layers[1], gc=True, ste=True, orl=True)
        _, fm = hs_encoder_forward(pc, cfg)
        assert np.all(fm == 0.0)

    def test_pooled_shapes_and_finiteness(self):
        pc = generate_shape(ShapeSpec.sphere(0.1, seed=3), 256)
        spec = EncoderSpec(
            layers=(LayerSpec(d_out=8, m_rff=5), LayerSpec(d_out=6, m_rff=5)),
            pools=((0, 64, 4),),
            seed=4,
        )
        out_pc, fm = hs_encoder_forward(pc, spec.build())
        assert out_pc.n == 64
        assert fm.shape == (64, 6)
        assert np.all(np.isfinite(fm))

    def test_build_deterministic(self):
        a = self._spec(seed=5).build()
        b = self._spec(seed=5).build()
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.gc.center_weights, lb.gc.center_weights)
            assert np.array_equal(la.ste.weights, lb.ste.weights)
            assert np.array_equal(la.orl.weights, lb.orl.weights)

    def test_backward_matches_finite_differences_on_encoder(self):
        rng = make_rng(6)
        pc = PointCloud(rng.normal(size=(14, 3)))
        spec = EncoderSpec(
            layers=(LayerSpec(d_out=3, s=1, m_rff=3), LayerSpec(d_out=2, s=1, m_rff=3)),
            pools=((0, 10, 2),),
            seed=7,
        )
        cfg = spec.build()
        (out_pc, fm), cache = hs_encoder_forward(pc, cfg, return_cache=True)
        assert encoder_tie_margin(cache) > 1e-4
        grad_out = rng.normal(size=fm.shape)
        grads = hs_encoder_backward(cfg, cache, grad_out)

        def loss_with(layer_idx, field_path, flat, delta):
            arr = {
                "gc.center_weights": cfg.layers[layer_idx].gc.center_weights,
                "gc.support_weights": cfg.layers[layer_idx].gc.support_weights,
                "gc.support_dirs": cfg.layers[layer_idx].gc.support_dirs,
                "ste.weights": cfg.layers[layer_idx].ste.weights,
                "orl.weights": cfg.layers[layer_idx].orl.weights,
            }[field_path]
            orig = arr.flat[flat]
            arr.flat[flat] = orig + delta
            _, fm2 = hs_encoder_forward(pc, cfg)
            arr.flat[flat] = orig
            return float((fm2 * grad_out).sum())

        eps = 1e-6
        rng2 = make_rng(8)
        for layer_idx in range(2):
            for path, g in [
                ("gc.center_weights", grads[layer_idx].gc.center_weights),
                ("gc.support_weights", grads[layer_idx].gc.support_weights),
                ("gc.support_dirs", grads[layer_idx].gc.support_dirs),
                ("ste.weights", grads[layer_idx].ste.weights),
                ("orl.weights", grads[layer_idx].orl.weights),
            ]:
                coords = rng2.choice(g.size, size=min(6, g.size), replace=False)
                for flat in coords:
                    numeric = (loss_with(layer_idx, path, flat, eps)
                               - loss_with(layer_idx, path, flat, -eps)) / (2 * eps)
                    assert rel_err(g.flat[flat], numeric) <= 1e-4, (layer_idx, path)


class TestConfigFormat:
    TEXT = """\
# two-layer encoder
seed = 42
layer.0.d_out = 16
layer.0.s = 1
layer.0.m_rff = 10
layer.1.d_out = 16
layer.1.m_orl = 6
layer.1.use_rff = false
pool.0.keep = 64
pool.0.m = 4
"""

    def test_parse_fields(self):
        spec = parse_encoder_spec(self.TEXT)
        assert spec.seed == 42
        assert spec.layers[0] == LayerSpec(d_out=16, s=1, m_rff=10)
        assert spec.layers[1].m_orl == 6
        assert spec.layers[1].use_rff is False
        assert spec.pools == ((0, 64, 4),)

    def test_roundtrip_through_format(self):
        spec = parse_encoder_spec(self.TEXT)
        again = parse_encoder_spec(format_encoder_spec(spec))
        assert again.seed == spec.seed
        assert again.pools == spec.pools
        assert [l.d_out for l in again.layers] == [16, 16]
        assert again.layers[1].resolved_m_orl() == 6

    @pytest.mark.parametrize("bad", [
        "layer.0.bogus = 3",
        "layer.1.d_out = 4",           # missing layer 0
        "seed notanassignment",
        "pool.0.keep = 10",            # missing pool m and layers
        "layer.0.d_out = 4\nlayer.0.use_rff = maybe",
    ])
    def test_malformed_rejected(self, bad):
        with pytest.raises(ValueError):
            parse_encoder_spec(bad)

    def test_chain_validation(self):
        good = EncoderSpec(layers=(LayerSpec(d_out=4), LayerSpec(d_out=2)), seed=0).build()
        with pytest.raises(ValueError):
            EncoderConfig(layers=[good.layers[1]])  # non-first layer first
        with pytest.raises(ValueError):
            EncoderConfig(layers=good.layers, pool_after={5: PoolStage(4, 2)})
