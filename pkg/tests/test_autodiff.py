"""Tape engine and primitive ops: values against loop oracles, gradients
against central finite differences."""

import numpy as np
import pytest

import phaseforge.autodiff as ad
from phaseforge.autodiff import Tape
from phaseforge.errors import ConfigurationError
from phaseforge.selfcheck import check_primitives, gradcheck, max_rel_err

from oracles import naive_conv2d, naive_dft2, naive_global_avg_pool

RNG = np.random.default_rng(20240811)


def leaf(tape, a):
    return tape.leaf(np.asarray(a, dtype=np.float64))


class TestTapeMechanics:
    def test_node_ids_increase_in_creation_order(self):
        tape = Tape()
        a = leaf(tape, RNG.standard_normal((3, 3)))
        b = ad.mul(a, a)
        c = ad.sum_(b)
        assert a.node_id < b.node_id < c.node_id

    def test_backward_rejects_non_scalar_loss(self):
        tape = Tape()
        a = leaf(tape, RNG.standard_normal((3, 3)))
        with pytest.raises(ConfigurationError):
            tape.backward(ad.mul(a, 2.0))

    def test_grad_before_backward_raises(self):
        tape = Tape()
        a = leaf(tape, RNG.standard_normal(4))
        with pytest.raises(RuntimeError):
            _ = a.grad

    def test_unreached_node_gets_zero_grad(self):
        tape = Tape()
        a = leaf(tape, RNG.standard_normal(4))
        b = leaf(tape, RNG.standard_normal(4))
        tape.backward(ad.sum_(a))
        assert np.all(b.grad == 0)

    def test_sum_gradient_is_all_ones(self):
        tape = Tape()
        a = leaf(tape, RNG.standard_normal((5, 2)))
        tape.backward(ad.sum_(a))
        assert np.array_equal(a.grad, np.ones((5, 2)))

    def test_half_sum_of_squares_gradient_is_identity(self):
        tape = Tape()
        x = RNG.standard_normal((4, 4))
        a = leaf(tape, x)
        tape.backward(ad.scale(ad.sum_(ad.mul(a, a)), 0.5))
        assert max_rel_err(a.grad, x) < 1e-12

    def test_fanout_accumulates_both_paths(self):
        tape = Tape()
        x = RNG.standard_normal(6)
        a = leaf(tape, x)
        tape.backward(ad.sum_(ad.add(a, a)))
        assert np.allclose(a.grad, 2.0)

    def test_backward_is_bit_deterministic(self):
        def run():
            tape = Tape()
            a = tape.leaf(np.linspace(-1, 1, 12).reshape(3, 4))
            b = tape.leaf(np.linspace(0.5, 2, 4))
            out = ad.sum_(ad.mul(ad.sigmoid(ad.mul(a, b)), a))
            tape.backward(out)
            return a.grad.copy(), b.grad.copy()

        ga1, gb1 = run()
        ga2, gb2 = run()
        assert np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)


class TestValuesAgainstOracles:
    def test_conv2d_scalar_multiply_add(self):
        tape = Tape()
        x = leaf(tape, np.array([[[2.0]]]))
        w = leaf(tape, np.array([[[[3.0]]]]))
        b = leaf(tape, np.array([1.0]))
        out = ad.conv2d(x, w, b, 1)
        assert out.value.shape == (1, 1, 1)
        assert out.value[0, 0, 0] == pytest.approx(7.0)

    def test_conv2d_identity_kernel_preserves_input(self):
        tape = Tape()
        x = RNG.standard_normal((6, 6, 1))
        w = np.zeros((3, 3, 1, 1))
        w[1, 1, 0, 0] = 1.0
        out = ad.conv2d(leaf(tape, x), leaf(tape, w), leaf(tape, np.zeros(1)), 1)
        assert np.allclose(out.value, x, atol=1e-14)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv2d_matches_nested_loop_oracle(self, stride):
        tape = Tape()
        x = RNG.standard_normal((5, 5, 2))
        w = RNG.standard_normal((3, 3, 2, 3))
        b = RNG.standard_normal(3)
        out = ad.conv2d(leaf(tape, x), leaf(tape, w), leaf(tape, b), stride)
        ref = naive_conv2d(x, w, b, stride)
        assert out.value.shape == ref.shape
        assert np.max(np.abs(out.value - ref)) < 1e-12

    def test_conv2d_batch_matches_per_sample(self):
        tape = Tape()
        x = RNG.standard_normal((3, 5, 5, 2))
        w = RNG.standard_normal((3, 3, 2, 4))
        b = RNG.standard_normal(4)
        out = ad.conv2d(leaf(tape, x), leaf(tape, w), leaf(tape, b), 2)
        for i in range(3):
            assert np.max(np.abs(out.value[i] - naive_conv2d(x[i], w, b, 2))) < 1e-12

    def test_conv2d_channel_mismatch_is_configuration_error(self):
        tape = Tape()
        with pytest.raises(ConfigurationError):
            ad.conv2d(
                leaf(tape, RNG.standard_normal((4, 4, 3))),
                leaf(tape, RNG.standard_normal((3, 3, 2, 1))),
                leaf(tape, np.zeros(1)),
                1,
            )

    def test_instance_norm_constant_channel_is_zero(self):
        tape = Tape()
        x = np.full((4, 4, 2), 5.0)
        out = ad.instance_norm(leaf(tape, x), leaf(tape, np.ones(2)), leaf(tape, np.zeros(2)))
        assert np.allclose(out.value, 0.0)

    def test_instance_norm_two_point_channel(self):
        # channel [1, -1] is already zero-mean with unit population variance
        tape = Tape()
        x = np.array([1.0, -1.0]).reshape(2, 1, 1)
        out = ad.instance_norm(
            leaf(tape, x), leaf(tape, np.ones(1)), leaf(tape, np.zeros(1)), eps=1e-12
        )
        assert np.allclose(out.value.ravel(), [1.0, -1.0], atol=1e-9)

    def test_instance_norm_statistics(self):
        # large input scale keeps the eps bias on the variance below 1e-6
        tape = Tape()
        x = 20.0 * RNG.standard_normal((4, 4, 3)) + 7.0
        out = ad.instance_norm(leaf(tape, x), leaf(tape, np.ones(3)), leaf(tape, np.zeros(3)))
        mean = out.value.mean(axis=(0, 1))
        var = out.value.var(axis=(0, 1))
        assert np.max(np.abs(mean)) < 1e-12
        assert np.max(np.abs(var - 1.0)) < 1e-6

    def test_leaky_relu_example(self):
        tape = Tape()
        out = ad.leaky_relu(leaf(tape, np.array([-1.0, 2.0])), 0.2)
        assert np.allclose(out.value, [-0.2, 2.0])

    def test_nearest_upsample_replicates(self):
        tape = Tape()
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        out = ad.nearest_upsample2(leaf(tape, x))
        expect = np.array(
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float
        ).reshape(4, 4, 1)
        assert np.array_equal(out.value, expect)

    def test_global_avg_pool_matches_loop(self):
        tape = Tape()
        x = RNG.standard_normal((8, 8, 4))
        out = ad.global_avg_pool(leaf(tape, x))
        assert np.max(np.abs(out.value - naive_global_avg_pool(x))) < 1e-14

    def test_fft2_delta_gives_flat_spectrum(self):
        tape = Tape()
        pair = np.zeros((4, 4, 2))
        pair[0, 0, 0] = 1.0
        out = ad.fft2(leaf(tape, pair))
        assert np.allclose(out.value[..., 0], 1.0) and np.allclose(out.value[..., 1], 0.0)

    def test_fft2_constant_concentrates_at_dc(self):
        tape = Tape()
        pair = np.zeros((4, 4, 2))
        pair[..., 0] = 2.5
        out = ad.fft2(leaf(tape, pair))
        spectrum = out.value[..., 0] + 1j * out.value[..., 1]
        assert spectrum[0, 0] == pytest.approx(2.5 * 16)
        spectrum[0, 0] = 0
        assert np.max(np.abs(spectrum)) < 1e-12

    def test_fft2_matches_naive_dft_oracle(self):
        tape = Tape()
        pair = RNG.standard_normal((8, 8, 2))
        out = ad.fft2(leaf(tape, pair))
        ref = naive_dft2(pair[..., 0] + 1j * pair[..., 1])
        got = out.value[..., 0] + 1j * out.value[..., 1]
        assert np.max(np.abs(got - ref)) < 1e-9

    def test_fft2_is_linear(self):
        tape = Tape()
        a = RNG.standard_normal((4, 4, 2))
        b = RNG.standard_normal((4, 4, 2))
        far = ad.fft2(leaf(tape, 2.0 * a + 3.0 * b)).value
        fa = ad.fft2(leaf(tape, a)).value
        fb = ad.fft2(leaf(tape, b)).value
        assert np.max(np.abs(far - (2.0 * fa + 3.0 * fb))) < 1e-10

    def test_ifft2_round_trip(self):
        tape = Tape()
        pair = RNG.standard_normal((8, 8, 2))
        back = ad.ifft2(ad.fft2(leaf(tape, pair)))
        assert max_rel_err(back.value, pair) < 1e-12

    def test_parseval(self):
        tape = Tape()
        pair = RNG.standard_normal((8, 8, 2))
        spec = ad.fft2(leaf(tape, pair)).value
        lhs = np.sum(pair**2)
        rhs = np.sum(spec**2) / 64
        assert abs(lhs - rhs) / abs(lhs) < 1e-9

    def test_magnitude_replace_hits_target_exactly(self):
        tape = Tape()
        pair = RNG.standard_normal((6, 6, 2)) + 0.5
        target = 0.3 + RNG.random((6, 6))
        out = ad.magnitude_replace(leaf(tape, pair), target)
        got = np.hypot(out.value[..., 0], out.value[..., 1])
        assert np.max(np.abs(got - target)) < 1e-12

    def test_magnitude_replace_keeps_phase(self):
        tape = Tape()
        pair = RNG.standard_normal((6, 6, 2)) + 0.5
        target = 0.3 + RNG.random((6, 6))
        out = ad.magnitude_replace(leaf(tape, pair), target)
        before = np.angle(pair[..., 0] + 1j * pair[..., 1])
        after = np.angle(out.value[..., 0] + 1j * out.value[..., 1])
        assert np.max(np.abs(before - after)) < 1e-12

    def test_magnitude_replace_zero_input_takes_phase_zero(self):
        tape = Tape()
        pair = np.zeros((3, 3, 2))
        target = 1.0 + RNG.random((3, 3))
        out = ad.magnitude_replace(leaf(tape, pair), target)
        assert np.array_equal(out.value[..., 0], target)
        assert np.all(out.value[..., 1] == 0.0)

    def test_magnitude_replace_shape_mismatch_raises(self):
        tape = Tape()
        with pytest.raises(ConfigurationError):
            ad.magnitude_replace(leaf(tape, np.zeros((3, 3, 2))), np.zeros((4, 4)))

    def test_narrow_out_of_range_raises(self):
        tape = Tape()
        with pytest.raises(ConfigurationError):
            ad.narrow(leaf(tape, np.zeros((3, 3))), 1, 2, 5)


class TestGradients:
    def test_every_primitive_passes_finite_differences(self):
        results = check_primitives(seed=7)
        worst = {name: err for name, err in results}
        assert all(err < 1e-4 for err in worst.values()), worst

    def test_float32_graph_runs_end_to_end(self):
        tape = Tape()
        x = tape.leaf(RNG.standard_normal((4, 4, 2)).astype(np.float32))
        w = tape.leaf(RNG.standard_normal((3, 3, 2, 2)).astype(np.float32))
        b = tape.leaf(np.zeros(2, dtype=np.float32))
        out = ad.sum_(ad.abs_(ad.conv2d(x, w, b, 1)))
        tape.backward(out)
        assert x.grad.dtype == np.float32

    def test_composite_graph_gradcheck(self):
        w_out = RNG.standard_normal((2, 2, 2, 2))

        def build(x, w, b, g, be):
            y = ad.conv2d(x, w, b, 2)
            y = ad.instance_norm(y, g, be)
            y = ad.leaky_relu(y, 0.2)
            y = ad.fft2(y)
            return ad.sum_(ad.mul(y, w_out))

        err = gradcheck(
            build,
            [
                RNG.standard_normal((4, 4, 2)),
                0.3 * RNG.standard_normal((3, 3, 2, 2)),
                0.1 * RNG.standard_normal(2),
                1.0 + 0.1 * RNG.standard_normal(2),
                0.1 * RNG.standard_normal(2),
            ],
        )
        assert err < 1e-4
