import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointrwkv.numerics import (
    CheckpointError,
    ContractError,
    DimensionError,
    LayerNorm,
    Linear,
    MLP,
    Module,
    Tensor,
    backward,
    fd_check,
    fd_check_many,
    load_arrays,
    load_module,
    no_grad,
    ops,
    precision,
    save_arrays,
    save_module,
    trace,
)

from conftest import leaf


def _loss(t):
    """Scalar projection with a fixed random direction, so every output coordinate matters."""
    w = np.random.default_rng(99).normal(size=t.shape)
    return ops.sum(t * Tensor(w))


class TestMatmul:
    def test_identity(self):
        out = ops.matmul(Tensor(np.eye(2)), Tensor([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5.0], [7.0]])

    def test_forced_arithmetic(self):
        out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_gradient(self, rng):
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        f = lambda: _loss(ops.matmul(a, b))  # noqa: E731
        assert fd_check(f, a) <= 1e-6
        assert fd_check(f, b) <= 1e-6

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_gradient(self, rng):
        a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
        f = lambda: _loss(ops.matmul(a, b))  # noqa: E731
        assert fd_check(f, a) <= 1e-6
        assert fd_check(f, b) <= 1e-6


class TestLayerNorm:
    def test_constant_row(self):
        out = ops.layernorm(Tensor([[3.0, 3.0, 3.0, 3.0]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_symmetric_pair(self):
        out = ops.layernorm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-14)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-12)

    def test_population_variance(self, rng):
        x = rng.normal(size=(3, 6))
        out = ops.layernorm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=1e-5).data
        ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(out, ref, atol=1e-13)

    def test_gradient(self, rng):
        x, g, b = leaf(rng.normal(size=(2, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
        f = lambda: _loss(ops.layernorm(x, g, b))  # noqa: E731
        for t in (x, g, b):
            assert fd_check(f, t) <= 1e-6

    def test_grouped_gradient(self, rng):
        x, g, b = leaf(rng.normal(size=(3, 8))), leaf(rng.normal(size=8)), leaf(rng.normal(size=8))
        f = lambda: _loss(ops.layernorm(x, g, b, groups=2))  # noqa: E731
        assert fd_check(f, x) <= 1e-6

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            ops.layernorm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            ops.layernorm(Tensor(np.zeros((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


ACTS = {
    "silu": ops.silu,
    "sigmoid": ops.sigmoid,
    "tanh": ops.tanh,
    "exp": ops.exp,
    "squared_relu": ops.squared_relu,
    "relu": ops.relu,
}


class TestActivations:
    def test_values(self):
        assert ops.silu(Tensor(0.0)).item() == 0.0
        assert ops.sigmoid(Tensor(0.0)).item() == 0.5
        assert ops.squared_relu(Tensor(-2.0)).item() == 0.0
        assert ops.squared_relu(Tensor(3.0)).item() == 9.0

    @pytest.mark.parametrize("name", sorted(ACTS))
    def test_gradient_on_random_scalars(self, name, rng):
        x = rng.normal(scale=2.0, size=100)
        if name in ("squared_relu", "relu"):
            x = np.where(np.abs(x) < 1e-3, 0.5, x)  # branch point is at 0
        worst = 0.0
        for xi in x:
            t = leaf([xi])
            worst = max(worst, fd_check(lambda: ops.sum(ACTS[name](t)), t))
        assert worst <= 1e-6

    def test_saturation_is_finite(self):
        x = Tensor(np.array([-1e4, 1e4]))
        assert np.all(np.isfinite(ops.sigmoid(x).data))
        assert np.all(np.isfinite(ops.silu(x).data))
        assert np.all(np.isfinite(ops.tanh(x).data))


class TestConcatSlice:
    def test_round_trip_exact(self, rng):
        a, b = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 5)))
        c = ops.concat_last_axis([a, b])
        assert c.shape == (3, 7)
        np.testing.assert_array_equal(ops.slice_last_axis(c, 0, 2).data, a.data)
        np.testing.assert_array_equal(ops.slice_last_axis(c, 2, 7).data, b.data)

    def test_quarters(self, rng):
        parts = [Tensor(rng.normal(size=(4, 3))) for _ in range(4)]
        assert ops.concat_last_axis(parts).shape == (4, 12)

    def test_slice_gradient_routes_only_to_region(self, rng):
        x = leaf(rng.normal(size=(2, 6)))
        backward(ops.sum(ops.slice_last_axis(x, 1, 4)))
        expected = np.zeros((2, 6))
        expected[:, 1:4] = 1.0
        np.testing.assert_array_equal(x.grad, expected)
        assert fd_check(lambda: _loss(ops.slice_last_axis(x, 1, 4)), x) <= 1e-6

    def test_concat_gradient(self, rng):
        a, b = leaf(rng.normal(size=(3, 2))), leaf(rng.normal(size=(3, 4)))
        f = lambda: _loss(ops.concat([a, b], axis=-1))  # noqa: E731
        assert fd_check(f, a) <= 1e-6 and fd_check(f, b) <= 1e-6

    @pytest.mark.parametrize("lo,hi", [(-1, 2), (2, 2), (0, 7), (3, 1)])
    def test_bad_bounds(self, lo, hi):
        with pytest.raises(IndexError):
            ops.slice_last_axis(Tensor(np.zeros((2, 6))), lo, hi)

    def test_mismatched_parts(self):
        with pytest.raises(DimensionError):
            ops.concat_last_axis([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 5), min_size=1, max_size=5), st.integers(1, 4))
    def test_round_trip_property(self, widths, rows):
        r = np.random.default_rng(sum(widths) + rows)
        parts = [Tensor(r.normal(size=(rows, w))) for w in widths]
        c = ops.concat_last_axis(parts)
        lo = 0
        for p in parts:
            hi = lo + p.shape[-1]
            np.testing.assert_array_equal(ops.slice_last_axis(c, lo, hi).data, p.data)
            lo = hi


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.normal(size=(2, 3, 4)))
        backward(ops.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square_gives_twice(self, rng):
        x = leaf(rng.normal(size=(5,)))
        backward(ops.sum(x * x))
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=0)

    def test_shared_subexpression_doubles(self, rng):
        x = leaf(rng.normal(size=4))
        y = ops.tanh(x)
        backward(ops.sum(y + y))
        np.testing.assert_allclose(x.grad, 2 * (1 - np.tanh(x.data) ** 2), atol=1e-15)

    def test_accumulates_until_zeroed(self, rng):
        x = leaf(rng.normal(size=3))
        backward(ops.sum(x))
        backward(ops.sum(x))
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))
        x.zero_grad()
        backward(ops.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_non_scalar_loss(self, rng):
        with pytest.raises(ContractError):
            backward(leaf(rng.normal(size=3)) * 2.0)

    def test_unconnected_loss(self):
        with pytest.raises(ContractError):
            backward(Tensor(1.0))

    def test_no_grad_records_nothing(self, rng):
        x = leaf(rng.normal(size=3))
        with no_grad():
            y = ops.sum(x * x)
        assert not y.requires_grad and y._parents == ()

    def test_trace_is_topological_and_unique(self, rng):
        x = leaf(rng.normal(size=3))
        a = ops.tanh(x)
        b = a * a
        loss = ops.sum(b + a)
        order = trace(loss)
        pos = {id(n): i for i, n in enumerate(order)}
        assert len(pos) == len(order)
        for node in order:
            for p in node._parents:
                assert pos[id(p)] < pos[id(node)]
        assert order[-1] is loss

    def test_tiny_block_every_parameter(self, rng):
        from pointrwkv.model import ModelConfig, PRWKVBlock

        cfg = ModelConfig(scale_sizes=(6,), ks=(2,), width=8, heads=2, encoder_blocks=(1,),
                          decoder_blocks=(1,), lgm_radius=(0.9,), hidden_ratio=2)
        blk = PRWKVBlock(cfg, rng, radius=0.9)
        for p in blk.parameters():
            p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)
        x = Tensor(rng.normal(size=(1, 6, 8)))
        anchors = rng.uniform(-0.5, 0.5, size=(1, 6, 3))
        errs = fd_check_many(lambda: _loss(blk(x, anchors)), list(blk.named_parameters()), h=1e-5)
        assert max(errs.values()) <= 1e-4, errs


class TestFdCheck:
    def test_linear_map_is_exact(self, rng):
        x = leaf(rng.normal(size=5))
        assert fd_check(lambda: ops.sum(x * 3.0), x) <= 1e-9

    def test_silu_matmul(self, rng):
        a, w = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        assert fd_check(lambda: _loss(ops.silu(ops.matmul(a, w))), w) <= 1e-6

    def test_branch_away_from_zero(self):
        x = leaf([-1.5, -0.3, 0.4, 2.0])
        assert fd_check(lambda: _loss(ops.relu(x)), x) <= 1e-6

    def test_detects_a_wrong_gradient(self, rng):
        x = leaf(rng.normal(size=4))

        def bad():
            return ops.sum(Tensor._make(x.data**2, (x,), lambda g: (g * x.data,), "bad_square"))

        assert fd_check(bad, x) > 0.1


class TestScatterOps:
    def test_take_gradient_with_repeats(self, rng):
        x = leaf(rng.normal(size=(5, 3)))
        idx = np.array([[0, 4], [4, 4], [2, 0]])
        assert fd_check(lambda: _loss(ops.take(x, idx)), x) <= 1e-6

    def test_take_padding(self, rng):
        x = leaf(rng.normal(size=(3, 2)))
        out = ops.take(x, np.array([0, -1, 2]), pad=True)
        np.testing.assert_array_equal(out.data[1], 0.0)
        assert fd_check(lambda: _loss(ops.take(x, np.array([0, -1, 2]), pad=True)), x) <= 1e-6

    def test_take_out_of_range(self):
        with pytest.raises(IndexError):
            ops.take(Tensor(np.zeros((3, 2))), np.array([3]))

    def test_segment_max_matches_loop(self, rng):
        x = rng.normal(size=(9, 4))
        seg = np.array([2, 0, 2, 1, 0, 2, 1, 1, 0])
        out = ops.segment_max(Tensor(x), seg, 4).data
        for s in range(3):
            np.testing.assert_array_equal(out[s], x[seg == s].max(axis=0))
        np.testing.assert_array_equal(out[3], 0.0)  # empty segment

    def test_segment_max_gradient(self, rng):
        x = leaf(rng.normal(size=(8, 3)))
        seg = np.array([1, 0, 1, 1, 0, 2, 2, 0])
        assert fd_check(lambda: _loss(ops.segment_max(x, seg, 4)), x) <= 1e-6

    def test_segment_max_tie_goes_to_first_row(self):
        x = leaf([[1.0], [1.0], [0.0]])
        backward(ops.sum(ops.segment_max(x, np.array([0, 0, 0]), 1)))
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0], [0.0]])

    def test_segment_mean_gradient(self, rng):
        x = leaf(rng.normal(size=(7, 2)))
        seg = np.array([0, 0, 2, 2, 2, 1, 0])
        out = ops.segment_mean(x, seg, 4)
        np.testing.assert_allclose(out.data[2], x.data[2:5].mean(axis=0), atol=1e-15)
        assert fd_check(lambda: _loss(ops.segment_mean(x, seg, 4)), x) <= 1e-6

    def test_max_over_axis_gradient(self, rng):
        x = leaf(rng.normal(size=(3, 5, 2)))
        assert fd_check(lambda: _loss(ops.max(x, axis=1)), x) <= 1e-6

    def test_cross_entropy(self, rng):
        z = leaf(rng.normal(size=(4, 3)))
        labels = np.array([0, 2, 1, 2])
        p = np.exp(z.data) / np.exp(z.data).sum(1, keepdims=True)
        ref = -np.mean(np.log(p[np.arange(4), labels]))
        assert abs(ops.cross_entropy(z, labels).item() - ref) < 1e-12
        assert fd_check(lambda: ops.cross_entropy(z, labels), z) <= 1e-6

    def test_chamfer_gradient(self, rng):
        p, t = leaf(rng.normal(size=(2, 5, 3))), leaf(rng.normal(size=(2, 4, 3)))
        f = lambda: ops.chamfer_distance(p, t)  # noqa: E731
        assert fd_check(f, p) <= 1e-6 and fd_check(f, t) <= 1e-6


class TestModules:
    def test_named_parameters_are_stable(self, rng):
        m = MLP([3, 4, 2], rng)
        names = [n for n, _ in m.named_parameters()]
        assert names == ["layers.0.weight", "layers.0.bias", "layers.1.weight", "layers.1.bias"]
        assert m.num_parameters() == 3 * 4 + 4 + 4 * 2 + 2

    def test_linear_and_layernorm_shapes(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 3)))
        assert Linear(3, 7, rng)(x).shape == (2, 5, 7)
        assert LayerNorm(3)(x).shape == (2, 5, 3)

    def test_finite_outputs(self, rng):
        m = MLP([3, 16, 4], rng)
        for _ in range(20):
            x = Tensor(rng.normal(scale=10.0, size=(8, 3)))
            assert np.all(np.isfinite(m(x).data))

    def test_precision_switch(self):
        with precision(32):
            assert Tensor([1.0]).data.dtype == np.float32
        assert Tensor([1.0]).data.dtype == np.float64


class _Pair(Module):
    def __init__(self, rng):
        self.a = Linear(3, 2, rng)
        self.b = [LayerNorm(2), Linear(2, 1, rng)]


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        arrays = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5)}
        save_arrays(tmp_path / "c.ckpt", arrays)
        back = load_arrays(tmp_path / "c.ckpt")
        assert list(back) == list(arrays)
        for k in arrays:
            assert back[k].tobytes() == arrays[k].tobytes() and back[k].shape == arrays[k].shape

    def test_header(self, tmp_path):
        save_arrays(tmp_path / "c.ckpt", {"x": np.zeros(2)})
        blob = (tmp_path / "c.ckpt").read_bytes()
        assert blob[:4] == b"PRWK"
        assert int.from_bytes(blob[4:8], "little") == 1

    def test_module_round_trip(self, tmp_path):
        m1, m2 = _Pair(np.random.default_rng(0)), _Pair(np.random.default_rng(1))
        save_module(tmp_path / "m.ckpt", m1)
        load_module(tmp_path / "m.ckpt", m2)
        for (n1, p1), (n2, p2) in zip(m1.named_parameters(), m2.named_parameters()):
            assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()

    def test_shape_mismatch_rejected_by_name(self, tmp_path, rng):
        m = _Pair(rng)
        arrays = m.state_dict()
        arrays["a.weight"] = np.zeros((4, 2))
        save_arrays(tmp_path / "bad.ckpt", arrays)
        with pytest.raises(CheckpointError, match="a.weight"):
            load_module(tmp_path / "bad.ckpt", m)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE" + b"\0" * 8)
        with pytest.raises(CheckpointError, match="magic"):
            load_arrays(tmp_path / "x.ckpt")

    def test_truncated(self, tmp_path, rng):
        save_arrays(tmp_path / "c.ckpt", {"w": rng.normal(size=(3, 4))})
        blob = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(blob[:-5])
        with pytest.raises(CheckpointError):
            load_arrays(tmp_path / "t.ckpt")
