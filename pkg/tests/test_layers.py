import numpy as np
import pytest

from tenconv import tensor
from tenconv.autodiff import Tape
from tenconv.errors import BadGeometry, BatchTooSmall, ShapeMismatch
from tenconv.layers import (
    ORDER_PRELU_BN,
    BatchNorm,
    FeatureMap,
    FullyConnected,
    PReLU,
    ResidualBlock,
    ScalarConv2d,
    TensorConv,
    conv_output_extent,
    weight_cell_shape,
)

from oracles import loop_scalar_conv, loop_tensor_conv, random_tensor


def make_fm(tape, values):
    values = np.asarray(values)
    node = tape.leaf(values, param="input")
    cell = tuple(values.shape[4:])
    return FeatureMap(node, values.shape[1], values.shape[2], values.shape[3], cell)


def fd_param(build, arr, i, step=1e-6):
    old = arr.flat[i]
    arr.flat[i] = old + step
    plus = build()
    arr.flat[i] = old - step
    minus = build()
    arr.flat[i] = old
    return (plus - minus) / (2 * step)


class TestGeometry:
    def test_table_downsampling_chain(self):
        # 32 -> 15 -> 7 -> 3 and 64 -> 31 -> 15 -> 7 -> 3 with k=3, s=2, p=0
        for chain in ([32, 15, 7, 3], [64, 31, 15, 7, 3]):
            for a, b in zip(chain, chain[1:]):
                assert conv_output_extent(a, 3, 2, 0) == b

    def test_shape_preserving(self):
        assert conv_output_extent(15, 3, 1, 1) == 15

    def test_bad_geometry(self):
        with pytest.raises(BadGeometry):
            conv_output_extent(2, 3, 1, 0)


class TestWeightCellShape:
    def test_expand_rgb(self):
        assert weight_cell_shape((3, 1), (6, 6, 6, 6), 2) == (1, 3, 6, 6, 6, 6)

    def test_preserve(self):
        assert weight_cell_shape((6, 6, 6, 6), (6, 6, 6, 6), 2) == (6, 6, 6, 6)

    def test_compress_full(self):
        assert weight_cell_shape((6, 6, 6, 6), (), 4) == (6, 6, 6, 6)

    def test_carryover_violation(self):
        from tenconv.errors import IncompatibleSpec

        with pytest.raises(IncompatibleSpec):
            weight_cell_shape((2, 3, 4), (5, 9), 2)


class TestTensorConv:
    def test_identity_kernel(self):
        # k=1, s=1, m=1 with a contraction-identity weight reproduces each cell
        conv = TensorConv("c", 1, 1, (2, 2), (2, 2), r=2, kernel=1)
        w = np.zeros((1, 1, 1, 1, 2, 2, 2, 2))
        for i0 in range(2):
            for i1 in range(2):
                w[0, 0, 0, 0, i0, i1, i1, i0] = 1.0
        conv.weight = w
        rng = np.random.default_rng(0)
        x = random_tensor(rng, (2, 1, 3, 3, 2, 2))
        tape = Tape()
        out = conv.forward(tape, make_fm(tape, x))
        np.testing.assert_allclose(tape.value(out.node), x, rtol=1e-12)

    @pytest.mark.parametrize(
        "in_cell,out_cell,r,stride,pad",
        [
            ((2, 2), (2, 2), 1, 1, 0),  # preserve, partial contraction
            ((2, 2), (2, 2), 2, 1, 1),  # preserve, full cell
            ((3, 1), (2, 2, 2, 2), 2, 2, 0),  # expand
            ((2, 2, 2), (), 3, 1, 0),  # compress to scalars
            ((2, 3), (2, 2), 1, 2, 1),  # carried leading axis
        ],
    )
    def test_matches_window_enumeration_oracle(self, in_cell, out_cell, r, stride, pad):
        rng = np.random.default_rng(hash((in_cell, r, stride, pad)) % 2**31)
        conv = TensorConv("c", 2, 3, in_cell, out_cell, r=r, kernel=3, stride=stride, pad=pad, rng=rng)
        x = random_tensor(rng, (2, 2, 5, 5) + in_cell)
        tape = Tape()
        out = conv.forward(tape, make_fm(tape, x))
        want = loop_tensor_conv(x, conv.weight, r, stride, pad, out_cell)
        assert tape.value(out.node).shape == want.shape
        np.testing.assert_allclose(tape.value(out.node), want, rtol=1e-10, atol=1e-12)

    def test_eq6_decomposition(self):
        # conv equals explicit per-window contract + linear_combine
        rng = np.random.default_rng(9)
        conv = TensorConv("c", 1, 1, (2, 2), (2, 2), r=2, kernel=3, stride=1, pad=0, rng=rng)
        x = random_tensor(rng, (1, 1, 5, 5, 2, 2))
        tape = Tape()
        out = conv.forward(tape, make_fm(tape, x))
        got = tape.value(out.node)
        for oy in range(3):
            for ox in range(3):
                win = tensor.slice_window(x, oy, ox, 3)
                summands = [
                    tensor.contract(win[0, 0, ky, kx], conv.weight[0, 0, ky, kx], 2)
                    for ky in range(3)
                    for kx in range(3)
                ]
                np.testing.assert_allclose(
                    got[0, 0, oy, ox], tensor.linear_combine(summands), rtol=1e-12
                )

    def test_input_expand_tcnn0_first_layer_shapes(self):
        conv = TensorConv("in", 1, 1, (3, 1), (6, 6, 6, 6), r=2, kernel=3, stride=2, pad=0)
        assert conv.weight.shape == (1, 1, 3, 3, 1, 3, 6, 6, 6, 6)
        x = np.zeros((2, 1, 32, 32, 3, 1))
        tape = Tape()
        out = conv.forward(tape, make_fm(tape, x))
        assert (out.height, out.width, out.cell_shape) == (15, 15, (6, 6, 6, 6))
        # all-zero image -> all-zero output cells
        assert np.all(tape.value(out.node) == 0.0)

    def test_input_expand_tcnn2_cell(self):
        conv = TensorConv("in", 1, 1, (3, 1), (3,) * 6, r=2, kernel=3, stride=2, pad=0)
        assert conv.weight.shape[4:] == (1, 3, 3, 3, 3, 3, 3, 3)
        x = np.zeros((1, 1, 8, 8, 3, 1))
        tape = Tape()
        out = conv.forward(tape, make_fm(tape, x))
        assert out.cell_shape == (3, 3, 3, 3, 3, 3)

    def test_final_compress_shapes_and_zero_weight(self):
        conv = TensorConv("f", 1, 10, (6, 6, 6, 6), (), r=4, kernel=3, stride=1, pad=0)
        conv.weight[:] = 0.0
        rng = np.random.default_rng(3)
        x = random_tensor(rng, (2, 1, 3, 3, 6, 6, 6, 6))
        tape = Tape()
        out = conv.forward(tape, make_fm(tape, x))
        assert (out.channels, out.height, out.width, out.cell_shape) == (10, 1, 1, ())
        assert np.all(tape.value(out.node) == 0.0)

    def test_final_compress_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        conv = TensorConv("f", 1, 4, (2, 2), (), r=2, kernel=3, stride=1, pad=0, rng=rng)
        x = random_tensor(rng, (2, 1, 3, 3, 2, 2))
        tape = Tape()
        out = conv.forward(tape, make_fm(tape, x))
        want = loop_tensor_conv(x, conv.weight, 2, 1, 0, ())
        np.testing.assert_allclose(tape.value(out.node), want, rtol=1e-10)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        conv = TensorConv("c", 1, 2, (2, 2), (2, 2), r=2, kernel=3, stride=2, pad=1, rng=rng)
        x = random_tensor(rng, (2, 1, 5, 5, 2, 2))

        def run():
            tape = Tape()
            out = conv.forward(tape, make_fm(tape, x))
            return tape, tape.mean_all(tape.mul(out.node, out.node))

        tape, loss = run()
        grads = tape.backward(loss).params
        for name, arr in [("c.weight", conv.weight), ("input", x)]:
            sample = np.random.default_rng(6).choice(arr.size, size=40, replace=False)
            for i in sample:
                fd = fd_param(lambda: float(run()[0].value(run()[1])), arr, i, step=1e-5)
                got = grads[name].flat[i]
                assert abs(fd - got) < 1e-6 + 1e-5 * abs(fd), f"{name}[{i}]"

    def test_rank_mode_law(self):
        # interior layers preserve cell rank, first layer raises it, final drops to 0
        interior = TensorConv("i", 1, 1, (4, 4), (4, 4), r=1, kernel=1)
        first = TensorConv("e", 1, 1, (3, 1), (4, 4, 4, 4), r=2, kernel=1)
        final = TensorConv("f", 1, 1, (4, 4), (), r=2, kernel=1)
        assert len(interior.out_cell) == len(interior.in_cell)
        assert len(first.out_cell) > len(first.in_cell)
        assert len(final.out_cell) == 0


class TestPReLU:
    def test_quarter_slope(self):
        layer = PReLU("p", 1)
        tape = Tape()
        x = np.array([-4.0, 2.0]).reshape(1, 1, 1, 2)
        out = layer.forward(tape, make_fm(tape, x))
        np.testing.assert_array_equal(tape.value(out.node).ravel(), [-1.0, 2.0])

    def test_gradients(self):
        rng = np.random.default_rng(7)
        layer = PReLU("p", 2)
        layer.slope[:] = [0.1, 0.3]
        x = random_tensor(rng, (2, 2, 3, 3, 2))

        def run():
            tape = Tape()
            out = layer.forward(tape, make_fm(tape, x))
            return tape, tape.mean_all(tape.mul(out.node, out.node))

        tape, loss = run()
        grads = tape.backward(loss).params
        for name, arr in [("p.slope", layer.slope), ("input", x)]:
            for i in range(arr.size):
                fd = fd_param(lambda: float(run()[0].value(run()[1])), arr, i, step=1e-6)
                assert abs(fd - grads[name].flat[i]) < 1e-6 + 1e-5 * abs(fd)

    def test_derivative_at_zero_is_negative_side_slope(self):
        layer = PReLU("p", 1)
        layer.slope[:] = 0.25
        x = np.zeros((2, 1, 1, 1))
        tape = Tape()
        out = layer.forward(tape, make_fm(tape, x))
        loss = tape.sum_all(out.node)
        grads = tape.backward(loss).params
        np.testing.assert_array_equal(
            grads["input"], np.full((2, 1, 1, 1), 0.25)
        )


class TestBatchNorm:
    def test_training_mode_normalizes(self):
        rng = np.random.default_rng(8)
        layer = BatchNorm("bn", 2, (3,))
        x = random_tensor(rng, (8, 2, 4, 4, 3)) * 3.0 + 1.5
        tape = Tape()
        out = layer.forward(tape, make_fm(tape, x), train=True)
        y = tape.value(out.node)
        mean = y.mean(axis=(0, 2, 3))
        var = y.var(axis=(0, 2, 3))
        np.testing.assert_allclose(mean, 0.0, atol=1e-12)
        np.testing.assert_allclose(var, 1.0, atol=1e-4)  # eps shrinks variance slightly

    def test_running_stats_match_two_pass_oracle(self):
        rng = np.random.default_rng(9)
        layer = BatchNorm("bn", 1, (2,), momentum=0.1)
        b1 = random_tensor(rng, (4, 1, 2, 2, 2))
        b2 = random_tensor(rng, (4, 1, 2, 2, 2)) + 2.0
        for b in (b1, b2):
            tape = Tape()
            layer.forward(tape, make_fm(tape, b), train=True)
        mean, var = np.zeros((1, 2)), np.ones((1, 2))
        for b in (b1, b2):
            mean = 0.9 * mean + 0.1 * b.mean(axis=(0, 2, 3))
            var = 0.9 * var + 0.1 * b.var(axis=(0, 2, 3))
        np.testing.assert_allclose(layer.running_mean, mean, rtol=1e-12)
        np.testing.assert_allclose(layer.running_var, var, rtol=1e-12)

    def test_inference_uses_running_stats(self):
        layer = BatchNorm("bn", 1, ())
        layer.running_mean[:] = 2.0
        layer.running_var[:] = 4.0
        x = np.full((2, 1, 1, 1), 4.0)
        tape = Tape()
        out = layer.forward(tape, make_fm(tape, x), train=False)
        np.testing.assert_allclose(tape.value(out.node), (4.0 - 2.0) / np.sqrt(4.0 + 1e-5))

    def test_batch_of_one_rejected(self):
        layer = BatchNorm("bn", 1, ())
        tape = Tape()
        with pytest.raises(BatchTooSmall):
            layer.forward(tape, make_fm(tape, np.ones((1, 1, 3, 3))), train=True)

    def test_gradients_full_batch_derivative(self):
        rng = np.random.default_rng(10)
        layer = BatchNorm("bn", 2, (2,))
        layer.gamma[:] = random_tensor(rng, (2, 2)) + 1.5
        layer.beta[:] = random_tensor(rng, (2, 2))
        x = random_tensor(rng, (4, 2, 2, 2, 2))

        def run(train=True):
            tape = Tape()
            out = layer.forward(tape, make_fm(tape, x), train=train)
            target = np.arange(float(tape.value(out.node).size)).reshape(tape.value(out.node).shape)
            diff = tape.sub(out.node, tape.leaf(target))
            return tape, tape.mean_all(tape.mul(diff, diff))

        tape, loss = run()
        grads = tape.backward(loss).params
        rm, rv = layer.running_mean.copy(), layer.running_var.copy()
        for name, arr in [("bn.gamma", layer.gamma), ("bn.beta", layer.beta), ("input", x)]:
            for i in range(min(arr.size, 32)):
                fd = fd_param(lambda: float(run()[0].value(run()[1])), arr, i, step=1e-5)
                assert abs(fd - grads[name].flat[i]) < 1e-6 + 1e-4 * abs(fd), name
        layer.running_mean[:], layer.running_var[:] = rm, rv  # restore after FD churn
        # inference-mode input gradient
        tape, loss = run(train=False)
        grads = tape.backward(loss).params
        for i in range(24):
            fd = fd_param(lambda: float(run(False)[0].value(run(False)[1])), x, i, step=1e-5)
            assert abs(fd - grads["input"].flat[i]) < 1e-6 + 1e-4 * abs(fd)


class TestResidualBlocks:
    def test_zero_weight_block_reduces_to_skip(self):
        rng = np.random.default_rng(11)
        block = ResidualBlock("b", "block1", 1, 1, (2, 2), (2, 2), r=2, stride=1, rng=rng)
        for conv, _, _ in block.units:
            conv.weight[:] = 0.0
        x = random_tensor(rng, (3, 1, 4, 4, 2, 2))
        tape = Tape()
        out = block.forward(tape, make_fm(tape, x))
        # chain emits exactly zero (BN of zeros is beta=0, PReLU of 0 is 0)
        np.testing.assert_array_equal(tape.value(out.node), x)

    def test_shape_preserving_block(self):
        rng = np.random.default_rng(12)
        block = ResidualBlock("b", "block1", 1, 1, (2, 2), (2, 2), r=2, stride=1, rng=rng)
        x = random_tensor(rng, (2, 1, 6, 6, 2, 2))
        tape = Tape()
        out = block.forward(tape, make_fm(tape, x))
        assert tape.value(out.node).shape == x.shape

    def test_downsampling_block_15_to_7(self):
        rng = np.random.default_rng(13)
        block = ResidualBlock("b", "block1", 1, 1, (2, 2), (2, 2), r=2, stride=2, rng=rng)
        x = random_tensor(rng, (2, 1, 15, 15, 2, 2))
        tape = Tape()
        out = block.forward(tape, make_fm(tape, x))
        assert (out.height, out.width) == (7, 7)

    def test_expanding_block_uses_projection_skip(self):
        rng = np.random.default_rng(14)
        block = ResidualBlock("b", "block1", 1, 1, (3, 1), (2, 2, 2, 2), r=2, stride=2, rng=rng)
        assert block.projection is not None
        x = random_tensor(rng, (2, 1, 8, 8, 3, 1))
        tape = Tape()
        out = block.forward(tape, make_fm(tape, x))
        assert (out.height, out.width, out.cell_shape) == (3, 3, (2, 2, 2, 2))

    def test_block2_has_four_layers(self):
        block = ResidualBlock("b", "block2", 1, 1, (2, 2), (2, 2), r=2, stride=1)
        assert len(block.units) == 4
        x = np.zeros((2, 1, 5, 5, 2, 2))
        tape = Tape()
        out = block.forward(tape, make_fm(tape, x))
        assert tape.value(out.node).shape == x.shape

    def test_order_switch_changes_output(self):
        rng = np.random.default_rng(15)
        x = random_tensor(rng, (3, 1, 5, 5, 2))
        outs = []
        for order in ("bn_prelu", ORDER_PRELU_BN):
            block = ResidualBlock(
                "b", "block1", 1, 1, (2,), (2,), r=1, stride=1,
                order=order, rng=np.random.default_rng(99),
            )
            tape = Tape()
            out = block.forward(tape, make_fm(tape, x))
            outs.append(tape.value(out.node))
        assert not np.allclose(outs[0], outs[1])

    def test_block_gradients(self):
        rng = np.random.default_rng(16)
        block = ResidualBlock("b", "block1", 1, 1, (3, 1), (2, 2), r=2, stride=2, rng=rng)
        x = random_tensor(rng, (2, 1, 5, 5, 3, 1))
        labels_like = None

        def run():
            tape = Tape()
            out = block.forward(tape, make_fm(tape, x))
            return tape, tape.mean_all(tape.mul(out.node, out.node))

        tape, loss = run()
        grads = tape.backward(loss).params
        params = dict(block.params())
        sampler = np.random.default_rng(17)
        for name, arr in params.items():
            idx = sampler.choice(arr.size, size=min(10, arr.size), replace=False)
            for i in idx:
                fd = fd_param(lambda: float(run()[0].value(run()[1])), arr, i, step=1e-5)
                assert abs(fd - grads[name].flat[i]) < 1e-6 + 1e-4 * abs(fd), name


class TestScalarLayers:
    def test_one_by_one_identity_conv(self):
        conv = ScalarConv2d("c", 2, 2, kernel=1)
        conv.weight[:] = np.eye(2).reshape(2, 2, 1, 1)
        conv.bias[:] = 0.0
        rng = np.random.default_rng(18)
        x = random_tensor(rng, (2, 2, 4, 4))
        tape = Tape()
        out = conv.forward(tape, make_fm(tape, x))
        np.testing.assert_allclose(tape.value(out.node), x, rtol=1e-12)

    def test_conv_matches_loop_oracle(self):
        rng = np.random.default_rng(19)
        conv = ScalarConv2d("c", 2, 3, kernel=3, stride=2, pad=1, rng=rng)
        conv.bias[:] = random_tensor(rng, (3,))
        x = random_tensor(rng, (2, 2, 5, 5))
        tape = Tape()
        out = conv.forward(tape, make_fm(tape, x))
        want = loop_scalar_conv(x, conv.weight, conv.bias, 2, 1)
        np.testing.assert_allclose(tape.value(out.node), want, rtol=1e-10)

    def test_fc_one_hot_selects_column(self):
        fc = FullyConnected("fc", 4, 3)
        x = np.zeros((1, 4))
        x[0, 2] = 1.0
        tape = Tape()
        out = fc.forward(tape, tape.leaf(x))
        np.testing.assert_allclose(tape.value(out)[0], fc.weight[2] + fc.bias)

    def test_scalar_layer_gradients(self):
        rng = np.random.default_rng(20)
        conv = ScalarConv2d("c", 1, 2, kernel=3, stride=1, pad=0, rng=rng)
        fc = FullyConnected("fc", 2 * 3 * 3, 3, rng=rng)
        x = random_tensor(rng, (2, 1, 5, 5))

        def run():
            tape = Tape()
            out = conv.forward(tape, make_fm(tape, x))
            flat = tape.reshape(out.node, (2, 2 * 3 * 3))
            y = fc.forward(tape, flat)
            return tape, tape.mean_all(tape.mul(y, y))

        tape, loss = run()
        grads = tape.backward(loss).params
        for name, arr in dict(conv.params() + fc.params()).items():
            idx = np.random.default_rng(21).choice(arr.size, size=min(12, arr.size), replace=False)
            for i in idx:
                fd = fd_param(lambda: float(run()[0].value(run()[1])), arr, i, step=1e-5)
                assert abs(fd - grads[name].flat[i]) < 1e-6 + 1e-4 * abs(fd), name
