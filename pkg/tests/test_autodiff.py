import zlib

import numpy as np
import pytest

from rafsim import autodiff as ad
from rafsim.tensor import build_upsample_op

from _util import op_fd, rel_err


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


OPS = {
    "add": (lambda a, b: ad.add(a, b), lambda r: [r.normal(size=(2, 3, 3, 2)), r.normal(size=(2,))]),
    "sub": (lambda a, b: ad.sub(a, b), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
    "scale": (lambda a: ad.scale(a, -1.7), lambda r: [r.normal(size=(3, 2))]),
    "relu": (lambda a: ad.relu(a), lambda r: [_away_from_zero(r, (2, 3, 4))]),
    "sum": (lambda a, b: ad.total([ad.sum_squares(a), ad.sum_squares(b)]), lambda r: [r.normal(size=(2,)), r.normal(size=(3,))]),
    "sum_squares": (lambda a: ad.sum_squares(a), lambda r: [r.normal(size=(2, 3))]),
    "mse": (lambda a, b: ad.mse(a, b, 3.0), lambda r: [r.normal(size=(2, 2, 2, 1)), r.normal(size=(2, 2, 2, 1))]),
    "conv2d_stride": (lambda x, k: ad.conv2d(x, k, stride=2), lambda r: [r.normal(size=(2, 6, 4, 2)), r.normal(size=(2, 2, 2, 3))]),
    "conv2d_pad": (lambda x, k: ad.conv2d(x, k, stride=1, padding=1), lambda r: [r.normal(size=(1, 4, 3, 2)), r.normal(size=(3, 3, 2, 2))]),
    "depthwise": (lambda x, k: ad.depthwise_conv3x3(x, k), lambda r: [r.normal(size=(2, 4, 3, 2)), r.normal(size=(3, 3, 2))]),
    "pointwise": (lambda x, k: ad.pointwise_conv1x1(x, k), lambda r: [r.normal(size=(2, 3, 2, 3)), r.normal(size=(3, 2))]),
    "upsample": (lambda x: ad.upsample(x, build_upsample_op(2, 3, 4, 5)), lambda r: [r.normal(size=(2, 2, 3, 2))]),
    "bilinear_upsample": (lambda x: ad.bilinear_upsample(x, 2), lambda r: [r.normal(size=(1, 3, 2, 2))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name):
    build, make = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        arrays = make(rng)
        ad_grads, fd_grads = op_fd(build, arrays)
        worst = max(worst, max(rel_err(a, f) for a, f in zip(ad_grads, fd_grads)))
    assert worst <= 1e-4, worst


def test_relu_values():
    t = ad.Tape()
    np.testing.assert_array_equal(ad.relu(t.constant(np.array([-1.0, 2.0]))).value, [0.0, 2.0])


def test_mse_of_equal_inputs_is_zero():
    t = ad.Tape()
    x = t.param(np.arange(6.0).reshape(2, 3))
    assert ad.mse(x, x).value == 0.0


def test_identity_kernel_conv_leaves_image_unchanged():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(2, 5, 4, 1))
    k = np.zeros((3, 3, 1, 1))
    k[1, 1, 0, 0] = 1.0
    t = ad.Tape()
    out = ad.conv2d(t.constant(img), t.constant(k), stride=1, padding=1)
    np.testing.assert_array_equal(out.value, img)


def test_scalar_square_gradient():
    t = ad.Tape()
    w = t.param(np.array(3.0), "w")
    g = ad.backward(t, ad.mse(w, t.constant(np.array(0.0))))
    assert g["w"] == 6.0


def test_stop_gradient_blocks_everything_upstream():
    t = ad.Tape()
    w = t.param(np.array([1.0, -2.0]), "w")
    y = ad.stop_gradient(ad.scale(w, 3.0))
    np.testing.assert_array_equal(y.value, [3.0, -6.0])
    g = ad.backward(t, ad.sum_squares(y))
    assert np.array_equal(g["w"], np.zeros(2))


def test_stop_gradient_teacher_equals_student_gives_zero():
    t = ad.Tape()
    w = t.param(np.array([0.5, 1.5]), "w")
    g_w = ad.scale(w, 2.0)
    loss = ad.mse(ad.stop_gradient(g_w), g_w)
    assert loss.value == 0.0
    assert np.array_equal(ad.backward(t, loss)["w"], np.zeros(2))


def test_stop_gradient_matches_frozen_constant():
    rng = np.random.default_rng(1)
    for _ in range(20):
        w0 = rng.normal(size=(3,))

        def grads(frozen):
            t = ad.Tape()
            w = t.param(w0, "w")
            f = ad.relu(ad.scale(w, 1.3))
            g = ad.scale(w, -0.4)
            teacher = t.constant(f.value) if frozen else ad.stop_gradient(f)
            return ad.backward(t, ad.mse(teacher, g))["w"]

        assert np.array_equal(grads(True), grads(False))


def test_fan_out_accumulates():
    t = ad.Tape()
    w = t.param(np.array(2.0), "w")
    loss = ad.total([ad.sum_squares(w), ad.sum_squares(ad.scale(w, 3.0))])  # 10 w^2
    assert ad.backward(t, loss)["w"] == 40.0


def test_backward_is_deterministic():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 6, 4, 2))
    k = rng.normal(size=(2, 2, 2, 3))

    def run():
        t = ad.Tape()
        kn = t.param(k, "k")
        y = ad.relu(ad.conv2d(t.constant(x), kn, stride=2))
        z = ad.add(y, ad.depthwise_conv3x3(y, t.param(np.full((3, 3, 3), 0.1), "d")))
        return ad.backward(t, ad.sum_squares(z))

    a, b = run(), run()
    assert all(np.array_equal(a[n], b[n]) for n in a)


def test_backward_rejects_non_scalar_loss():
    t = ad.Tape()
    w = t.param(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(t, w)


def test_unreached_params_get_zero_gradients():
    t = ad.Tape()
    a = t.param(np.ones(2), "a")
    t.param(np.ones(4), "b")
    g = ad.backward(t, ad.sum_squares(a))
    assert np.array_equal(g["b"], np.zeros(4))


@pytest.mark.parametrize(
    "build",
    [
        lambda t: ad.sub(t.constant(np.ones(2)), t.constant(np.ones(3))),
        lambda t: ad.mse(t.constant(np.ones(2)), t.constant(np.ones(3))),
        lambda t: ad.conv2d(t.constant(np.ones((1, 4, 4, 2))), t.constant(np.ones((2, 2, 3, 1)))),
        lambda t: ad.depthwise_conv3x3(t.constant(np.ones((1, 4, 4, 2))), t.constant(np.ones((3, 3, 3)))),
        lambda t: ad.pointwise_conv1x1(t.constant(np.ones((1, 4, 4, 2))), t.constant(np.ones((3, 3)))),
        lambda t: ad.upsample(t.constant(np.ones((1, 3, 3, 1))), build_upsample_op(2, 2, 4, 4)),
        lambda t: ad.add(t.constant(np.ones((2, 3))), t.constant(np.ones((3, 2)))),
        lambda t: ad.total([]),
    ],
)
def test_shape_errors(build):
    with pytest.raises(ValueError):
        build(ad.Tape())


def test_nodes_from_different_tapes_are_rejected():
    a, b = ad.Tape(), ad.Tape()
    with pytest.raises(ValueError):
        ad.add(a.constant(np.ones(2)), b.constant(np.ones(2)))


def test_release_empties_the_tape_and_keeps_gradients():
    tape = ad.Tape()
    x = tape.param(np.arange(3.0), "x")
    loss = ad.sum_squares(x)
    g = ad.backward(tape, loss)
    tape.release()
    assert tape.nodes == [] and tape.param_ids == []
    np.testing.assert_array_equal(g["x"], 2 * np.arange(3.0))
