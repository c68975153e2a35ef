import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointrwkv.lgm import LGM, lgm_forward, lgm_translation_check
from pointrwkv.numerics import Tensor, fd_check_many, no_grad, ops
from pointrwkv.pointops import radius_graph_celllist


def _graph(rng, v=24, radius=0.5):
    anchors = rng.uniform(-1, 1, size=(v, 3))
    return anchors, Tensor(rng.normal(size=(v, 8)))


def literal_lgm(anchors, feats, lgm, edges):
    """Per-vertex loop over the update rule, concatenating inputs literally."""
    v = feats.copy()
    net = lgm.nets[0]

    def mlp(m, x):
        with no_grad():
            return m(Tensor(x)).data

    for _ in range(lgm.iterations):
        dx = mlp(net.h, v) if lgm.stabilizer else np.zeros((len(v), 3))
        new = v.copy()
        for i in range(len(v)):
            nbrs = edges[edges[:, 0] == i, 1]
            if len(nbrs):
                inp = np.concatenate([anchors[nbrs] - anchors[i] + dx[i], v[nbrs]], axis=1)
                rho = mlp(net.f, inp).max(axis=0)
            else:
                rho = np.zeros(net.f.layers[-1].weight.shape[1])
            new[i] = mlp(net.g, np.concatenate([rho, v[i]])[None])[0] + v[i]
        v = new
    return v


class TestLGMForward:
    def test_default_iterations(self, rng):
        assert LGM(8, rng).iterations == 3

    def test_zero_iterations_is_identity(self, rng):
        anchors, feats = _graph(rng)
        out = lgm_forward(anchors, feats, LGM(8, rng, iterations=0))
        assert out.data.tobytes() == feats.data.tobytes()

    def test_matches_literal_loop(self, rng):
        anchors, feats = _graph(rng, v=15)
        lgm = LGM(8, rng, radius=0.7)
        edges = lgm.build_edges(anchors)
        with no_grad():
            out = lgm_forward(anchors, feats, lgm, edges).data
        np.testing.assert_allclose(out, literal_lgm(anchors, feats.data, lgm, edges), atol=1e-12)

    def test_zero_stabilizer_equals_plain_update_bitwise(self, rng):
        anchors, feats = _graph(rng)
        on = LGM(8, np.random.default_rng(3), stabilizer=True)
        off = LGM(8, np.random.default_rng(3), stabilizer=False)
        last = on.nets[0].h.layers[-1]
        last.weight.data[...] = 0.0
        last.bias.data[...] = 0.0
        a = lgm_forward(anchors, feats, on).data
        b = lgm_forward(anchors, feats, off).data
        assert a.tobytes() == b.tobytes()

    def test_isolated_vertex_uses_zero_aggregate(self, rng):
        anchors = np.array([[0, 0, 0], [0.1, 0, 0], [5, 5, 5]], dtype=float)
        feats = Tensor(rng.normal(size=(3, 8)))
        lgm = LGM(8, rng, radius=0.3, iterations=1)
        out = lgm_forward(anchors, feats, lgm).data
        g = lgm.nets[0].g
        expected = g(Tensor(np.concatenate([np.zeros(8), feats.data[2]])[None])).data[0] + feats.data[2]
        np.testing.assert_allclose(out[2], expected, atol=1e-14)

    def test_empty_edge_set(self, rng):
        anchors, feats = _graph(rng, v=4)
        lgm = LGM(8, rng, iterations=2)
        out = lgm_forward(anchors, feats, lgm, np.zeros((0, 2), dtype=np.intp))
        assert out.shape == feats.shape and np.all(np.isfinite(out.data))

    def test_untied_and_mean(self, rng):
        anchors, feats = _graph(rng, v=10)
        lgm = LGM(8, rng, tied=False, aggregate="mean", radius=0.8)
        assert len(lgm.nets) == 3
        assert lgm_forward(anchors, feats, lgm).shape == (10, 8)

    @pytest.mark.parametrize("kw", [dict(iterations=-1), dict(radius=0.0), dict(aggregate="sum")])
    def test_bad_config(self, rng, kw):
        with pytest.raises(ValueError):
            LGM(8, rng, **kw)


class TestInvariance:
    def test_delta_zero(self, rng):
        anchors, feats = _graph(rng)
        assert lgm_translation_check(anchors, feats, np.zeros(3), LGM(8, rng))

    @pytest.mark.parametrize("seed", range(20))
    def test_translation(self, seed):
        rng = np.random.default_rng(seed)
        anchors, feats = _graph(rng, v=int(rng.integers(5, 40)))
        assert lgm_translation_check(anchors, feats, np.array([10.0, -3.0, 0.5]), LGM(8, rng, radius=0.6))

    def test_rotation_is_not_invariant(self, rng):
        anchors, feats = _graph(rng)
        lgm = LGM(8, rng, radius=0.6)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        edges = lgm.build_edges(anchors)  # distances are preserved, so the graph is too
        with no_grad():
            a = lgm_forward(anchors, feats, lgm, edges).data
            b = lgm_forward(anchors @ q.T, feats, lgm, edges).data
        assert np.max(np.abs(a - b)) > 1e-6

    @pytest.mark.parametrize("seed", range(20))
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(100 + seed)
        anchors, feats = _graph(rng, v=20)
        lgm = LGM(8, rng, radius=0.7)
        perm = rng.permutation(20)
        inv = np.argsort(perm)
        edges = lgm.build_edges(anchors)
        with no_grad():
            a = lgm_forward(anchors, feats, lgm, edges).data
            b = lgm_forward(anchors[perm], Tensor(feats.data[perm]), lgm, inv[edges]).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_duplicate_edge_is_harmless_under_max(self, rng):
        anchors, feats = _graph(rng)
        lgm = LGM(8, rng, radius=0.6)
        edges = lgm.build_edges(anchors)
        dup = np.concatenate([edges, edges[:5]])
        a = lgm_forward(anchors, feats, lgm, edges).data
        b = lgm_forward(anchors, feats, lgm, dup).data
        np.testing.assert_array_equal(a, b)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 30), st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 999))
    def test_translation_property(self, v, dx, dy, dz, seed):
        rng = np.random.default_rng(seed)
        anchors, feats = _graph(rng, v=v)
        assert lgm_translation_check(anchors, feats, np.array([dx, dy, dz]), LGM(8, rng, radius=0.8))


class TestGradients:
    @pytest.mark.parametrize("tied,aggregate", [(True, "max"), (False, "max"), (True, "mean")])
    def test_six_vertex_graph(self, rng, tied, aggregate):
        anchors = rng.uniform(-0.4, 0.4, size=(6, 3))
        feats = Tensor(rng.normal(size=(6, 8)), requires_grad=True)
        lgm = LGM(8, rng, radius=0.6, tied=tied, aggregate=aggregate)
        for p in lgm.parameters():
            p.data = p.data + rng.normal(0.0, 0.2, size=p.shape)
        edges = radius_graph_celllist(anchors, 0.6).edges
        assert len(edges) > 0
        w = Tensor(rng.normal(size=(6, 8)))
        errs = fd_check_many(
            lambda: ops.sum(lgm_forward(anchors, feats, lgm, edges) * w),
            list(lgm.named_parameters()) + [("feats", feats)],
        )
        assert max(errs.values()) <= 1e-4, errs
