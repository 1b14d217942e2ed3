import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cdecnet import checkpoint
from cdecnet.autograd import (
    ShapeError,
    Tensor,
    add,
    backward,
    broadcast_shape,
    concat,
    elementwise,
    matmul,
    mul,
    permute,
    reshape,
    take_rows,
    tsum,
    upsample_nearest,
)
from cdecnet.losses import sigmoid_binary_cross_entropy, smooth_l1, softmax, softmax_cross_entropy
from cdecnet.optim import SGD, LRSchedule, MissingGradError, sgd_step

import gradsuite
from oracles import numeric_grad, rel_err


class TestElementwise:
    def test_add_scalar_and_row(self):
        out = add(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([10.0, 20.0]))
        np.testing.assert_array_equal(out.data, [[11, 22], [13, 24]])

    def test_broadcast_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))

    def test_broadcast_shape_rule(self):
        assert broadcast_shape((3, 1, 5), (4, 1)) == (3, 4, 5)

    def test_broadcast_grad_sums_over_expanded_axes(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        tsum(add(a, b)).backward()
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_dispatch(self):
        a, b = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
        np.testing.assert_array_equal(elementwise("mul", a, b).data, [3.0, -8.0])
        np.testing.assert_array_equal(elementwise("relu", a).data, [1.0, 0.0])
        with pytest.raises(ValueError):
            elementwise("pow", a, b)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients(self, seed):
        assert gradsuite.elementwise(seed) < 1e-6


class TestMatmulAndShapes:
    def test_inner_mismatch(self):
        with pytest.raises(ShapeError, match="inner"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    @pytest.mark.parametrize("seed", range(5))
    def test_matmul_gradient(self, seed):
        assert gradsuite.matmul_grad(seed) < 1e-6

    def test_reshape_permute_concat_roundtrip_grads(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3, 1)), requires_grad=True)
        r = rng.normal(size=(5, 3, 2))

        def f():
            out = permute(concat([a, b], axis=2), (2, 1, 0))
            return tsum(mul(reshape(out, (5, 3, 2)), Tensor(r)))

        f().backward()
        for t in (a, b):
            num = numeric_grad(lambda: float(f().data), t.data)
            assert rel_err(t.grad, num) < 1e-8

    def test_take_rows_duplicates_accumulate(self):
        a = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        tsum(take_rows(a, np.array([0, 0, 2]))).backward()
        np.testing.assert_array_equal(a.grad, [[2, 2], [0, 0], [1, 1]])

    def test_upsample_backward_sums_blocks(self):
        a = Tensor(np.arange(4.0).reshape(1, 2, 2), requires_grad=True)
        out = upsample_nearest(a, 2)
        assert out.shape == (1, 4, 4)
        tsum(out).backward()
        np.testing.assert_array_equal(a.grad, np.full((1, 2, 2), 4.0))


class TestBackward:
    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            backward(Tensor(np.ones(3), requires_grad=True))

    def test_leaf_grads_accumulate_across_calls(self):
        x = Tensor(2.0, requires_grad=True)
        for _ in range(2):
            mul(x, x).backward()
        assert x.grad == pytest.approx(8.0)

    def test_shared_subexpression(self):
        x = Tensor(3.0, requires_grad=True)
        y = mul(x, x)
        add(y, y).backward()
        assert x.grad == pytest.approx(12.0)

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = add(y, Tensor(0.0))
        y.backward()
        assert x.grad == 1.0

    def test_item_requires_single_element(self):
        assert Tensor([[2.5]]).item() == 2.5
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()


class TestLosses:
    def test_cross_entropy_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((4, 3))), [0, 1, 2, 0])
        assert loss.item() == pytest.approx(np.log(3.0))

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_cross_entropy_empty_batch_is_zero(self):
        assert softmax_cross_entropy(Tensor(np.zeros((0, 3))), []).item() == 0.0

    def test_bce_at_zero_logit(self):
        loss = sigmoid_binary_cross_entropy(Tensor(np.zeros(5)), np.array([0, 1, 1, 0, 1.0]))
        assert loss.item() == pytest.approx(np.log(2.0))

    def test_bce_extreme_logits_finite(self):
        loss = sigmoid_binary_cross_entropy(Tensor([800.0, -800.0]), np.array([0.0, 1.0]))
        assert loss.item() == pytest.approx(800.0)

    def test_smooth_l1_pieces(self):
        pred = Tensor([[0.5, 3.0]])
        assert smooth_l1(pred, np.zeros((1, 2)), 1.0).item() == pytest.approx((0.125 + 2.5) / 2)

    @pytest.mark.parametrize("seed", range(5))
    def test_loss_gradients(self, seed):
        assert gradsuite.losses(seed) < 1e-6

    @given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
    def test_softmax_rows_sum_to_one(self, z):
        np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-12)


class TestOptim:
    def test_plain_sgd_step(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.array([0.5, -1.0])
        sgd_step([p], lr=0.1)
        np.testing.assert_allclose(p.data, [0.95, 2.1])

    def test_missing_grad_raises(self):
        with pytest.raises(MissingGradError):
            sgd_step([Tensor(np.ones(2), requires_grad=True)], lr=0.1)

    def test_momentum_matches_closed_form(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = SGD([p], lr=1.0, momentum=0.5)
        for _ in range(3):
            p.grad = np.array([1.0])
            opt.step()
        # velocities 1, 1.5, 1.75
        assert p.data[0] == pytest.approx(-4.25)

    def test_step_clears_grads(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.ones(2)
        SGD([p], lr=0.1).step()
        assert p.grad is None

    def test_clip_norm_bounds_update(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([30.0, 40.0])
        SGD([p], lr=1.0, momentum=0.0, clip_norm=5.0).step()
        assert np.linalg.norm(p.data) == pytest.approx(5.0)

    def test_schedule_warmup_and_decay(self):
        s = LRSchedule(0.00125, warmup_iters=500, warmup_ratio=0.0033, decay_epochs=(25, 40))
        assert s(0, 0) == pytest.approx(0.00125 * 0.0033)
        assert s(500, 0) == pytest.approx(0.00125)
        assert s(10_000, 25) == pytest.approx(0.000125)
        assert s(10_000, 40) == pytest.approx(0.0000125)

    @given(st.integers(0, 2000), st.integers(0, 60))
    def test_schedule_never_exceeds_base(self, it, epoch):
        s = LRSchedule(0.01, 500, 0.0033, (25, 40))
        assert 0 < s(it, epoch) <= 0.01


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"a.weight": rng.normal(size=(3, 2, 3, 3)), "b": np.array(1.5), "c": np.zeros((0, 4))}
        checkpoint.save(tmp_path / "m.ckpt", params)
        back = checkpoint.load(tmp_path / "m.ckpt")
        assert list(back) == list(params)
        for k in params:
            assert back[k].shape == params[k].shape
            assert back[k].tobytes() == params[k].tobytes()

    def test_truncated_file_rejected(self):
        buf = checkpoint.dumps({"w": np.ones(4)})
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(buf[:-3])

    def test_bad_magic_and_trailing_bytes(self):
        buf = checkpoint.dumps({"w": np.ones(4)})
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(b"X" + buf[1:])
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(buf + b"\0")

    @settings(max_examples=30)
    @given(st.dictionaries(st.text("abcdefgh._", min_size=1, max_size=12),
                           hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                                      elements=st.floats(allow_nan=False)), max_size=4))
    def test_roundtrip_property(self, params):
        back = checkpoint.loads(checkpoint.dumps(params))
        assert {k: v.tobytes() for k, v in back.items()} == {k: v.tobytes() for k, v in params.items()}
