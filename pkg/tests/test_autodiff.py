import numpy as np
import pytest

import sndmseg._kernels as kernels
import sndmseg.autodiff as ad
from sndmseg.errors import CheckpointCorruptError, NoForwardPassError, ShapeMismatchError

RNG = np.random.Generator(np.random.Philox(101))


def finite_difference_check(make_graph, arrays, samples=6, step=1e-6):
    """Max error of analytic grads vs central differences, float64 arrays."""
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    make_graph(tensors).backward()
    worst = 0.0
    for which, tensor in enumerate(tensors):
        for _ in range(min(samples, tensor.data.size)):
            idx = np.unravel_index(int(RNG.integers(tensor.data.size)), tensor.data.shape)

            def value(eps):
                probe = [a.copy() for a in arrays]
                probe[which][idx] += eps
                return float(make_graph([ad.Tensor(p) for p in probe]).data)

            numeric = (value(step) - value(-step)) / (2 * step)
            analytic = float(tensor.grad[idx])
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4))
    return worst


def test_relu_tanh_fixtures():
    x = ad.Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    y = ad.tsum(ad.relu(x))
    assert y.data == 2.0
    y.backward()
    assert x.grad.tolist() == [0.0, 1.0]
    assert ad.tanh(ad.Tensor(np.array([0.0]))).data.tolist() == [0.0]


def test_sum_grad_is_ones():
    x = ad.Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    ad.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_conv_delta_kernel_is_identity():
    x = ad.Tensor(RNG.normal(size=(1, 1, 6, 6)))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    y = ad.conv2d(x, ad.Tensor(w), ad.Tensor(np.zeros(1)))
    assert np.allclose(y.data, x.data, atol=1e-12)


def test_backward_requires_scalar():
    x = ad.Tensor(RNG.normal(size=(2, 2)), requires_grad=True)
    with pytest.raises(ShapeMismatchError):
        ad.relu(x).backward()


def test_backward_requires_recorded_graph():
    with pytest.raises(NoForwardPassError):
        ad.Tensor(np.array(1.0), requires_grad=True).backward()


def test_elementwise_and_structural_gradients():
    x = RNG.normal(size=(2, 3, 6, 6))
    mult = RNG.normal(size=(2, 3, 6, 6))
    bias = RNG.normal(size=(3, 1, 1))
    checks = {
        "relu": lambda ts: ad.tsum(ad.mul(ad.relu(ts[0]), ad.Tensor(mult))),
        "tanh": lambda ts: ad.tsum(ad.mul(ad.tanh(ts[0]), ad.Tensor(mult))),
        "sigmoid": lambda ts: ad.tsum(ad.mul(ad.sigmoid(ts[0]), ad.Tensor(mult))),
        "mean": lambda ts: ad.tmean(ad.mul(ts[0], ts[0])),
        "l2norm": lambda ts: ad.tsum(ad.mul(ad.l2_normalize(ts[0], axis=1), ad.Tensor(mult))),
        "bias-add": lambda ts: ad.tsum(ad.mul(ad.add(ts[0], ts[1]), ad.Tensor(mult))),
    }
    for name, graph in checks.items():
        arrays = [x, bias] if name == "bias-add" else [x]
        assert finite_difference_check(graph, arrays) < 1e-6, name


def test_concat_slice_transpose_reshape_gradients():
    x = RNG.normal(size=(2, 3, 4, 4))
    y = RNG.normal(size=(2, 2, 4, 4))
    mult = RNG.normal(size=(1, 5, 4, 4))
    graph = lambda ts: ad.tsum(  # noqa: E731
        ad.mul(ad.slice_batch(ad.concat([ts[0], ts[1]], axis=1), 0, 1), ad.Tensor(mult))
    )
    assert finite_difference_check(graph, [x, y]) < 1e-6
    tr = RNG.normal(size=(2, 3, 5))
    mult2 = RNG.normal(size=(2, 15))
    graph2 = lambda ts: ad.tsum(ad.mul(ad.reshape(ad.transpose(ts[0], (0, 2, 1)), (2, 15)), ad.Tensor(mult2)))  # noqa: E731
    assert finite_difference_check(graph2, [tr]) < 1e-6


def test_matmul_gradients():
    a = RNG.normal(size=(2, 4, 3))
    b = RNG.normal(size=(2, 3, 5))
    mult = RNG.normal(size=(2, 4, 5))
    graph = lambda ts: ad.tsum(ad.mul(ad.matmul(ts[0], ts[1]), ad.Tensor(mult)))  # noqa: E731
    assert finite_difference_check(graph, [a, b]) < 1e-6


def test_conv2d_gradients_both_routes():
    x = RNG.normal(size=(2, 5, 6, 6))
    mult_wide = RNG.normal(size=(2, 4, 6, 6))
    w_wide = RNG.normal(size=(4, 5, 3, 3)) * 0.5
    b_wide = RNG.normal(size=(4,))
    graph = lambda ts: ad.tsum(ad.mul(ad.conv2d(ts[0], ts[1], ts[2]), ad.Tensor(mult_wide)))  # noqa: E731
    assert finite_difference_check(graph, [x, w_wide, b_wide]) < 1e-6
    # single-output-channel route
    mult_head = RNG.normal(size=(2, 1, 6, 6))
    w_head = RNG.normal(size=(1, 5, 3, 3)) * 0.5
    b_head = RNG.normal(size=(1,))
    graph2 = lambda ts: ad.tsum(ad.mul(ad.conv2d(ts[0], ts[1], ts[2]), ad.Tensor(mult_head)))  # noqa: E731
    assert finite_difference_check(graph2, [x, w_head, b_head]) < 1e-6


def test_conv_transpose_gradients():
    x = RNG.normal(size=(2, 3, 5, 4))
    w = RNG.normal(size=(3, 4, 2, 2)) * 0.5
    b = RNG.normal(size=(4,))
    mult = RNG.normal(size=(2, 4, 10, 8))
    graph = lambda ts: ad.tsum(ad.mul(ad.conv_transpose2d(ts[0], ts[1], ts[2]), ad.Tensor(mult)))  # noqa: E731
    assert finite_difference_check(graph, [x, w, b]) < 1e-6
    y = ad.conv_transpose2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b))
    assert y.data.shape == (2, 4, 10, 8)


def test_max_pool_gradients_and_shape():
    x = RNG.normal(size=(2, 3, 6, 8))
    mult = RNG.normal(size=(2, 3, 3, 4))
    graph = lambda ts: ad.tsum(ad.mul(ad.max_pool2(ts[0]), ad.Tensor(mult)))  # noqa: E731
    assert finite_difference_check(graph, [x]) < 1e-6
    with pytest.raises(ShapeMismatchError):
        ad.max_pool2(ad.Tensor(RNG.normal(size=(1, 1, 5, 4))))


def test_batch_norm_train_and_eval_gradients():
    x = RNG.normal(size=(3, 4, 5, 5))
    gamma = np.abs(RNG.normal(size=4)) + 0.5
    beta = RNG.normal(size=4) * 0.3
    mult = RNG.normal(size=(3, 4, 5, 5))
    rm, rv = np.zeros(4), np.ones(4)
    graph_train = lambda ts: ad.tsum(  # noqa: E731
        ad.mul(ad.batch_norm(ts[0], ts[1], ts[2], rm.copy(), rv.copy(), training=True, update_stats=False), ad.Tensor(mult))
    )
    assert finite_difference_check(graph_train, [x, gamma, beta]) < 1e-6
    rm2 = RNG.normal(size=4) * 0.2
    rv2 = np.abs(RNG.normal(size=4)) + 0.4
    graph_eval = lambda ts: ad.tsum(ad.mul(ad.batch_norm(ts[0], ts[1], ts[2], rm2, rv2, training=False), ad.Tensor(mult)))  # noqa: E731
    assert finite_difference_check(graph_eval, [x, gamma, beta]) < 1e-6


def test_batch_norm_eval_is_pure_affine():
    x = RNG.normal(size=(2, 3, 4, 4)).astype(np.float32)
    gamma = np.array([1.0, 2.0, 0.5], dtype=np.float32)
    beta = np.array([0.1, -0.2, 0.0], dtype=np.float32)
    rm = np.array([0.3, -0.1, 0.0], dtype=np.float32)
    rv = np.array([1.5, 0.7, 2.0], dtype=np.float32)
    y = ad.batch_norm(ad.Tensor(x), ad.Tensor(gamma), ad.Tensor(beta), rm, rv, training=False)
    scale = gamma / np.sqrt(rv + 1e-5)
    expected = x * scale[None, :, None, None] + (beta - rm * scale)[None, :, None, None]
    assert np.allclose(y.data, expected, atol=1e-6)
    # eval mode never touches the buffers
    assert np.array_equal(rm, np.array([0.3, -0.1, 0.0], dtype=np.float32))


def test_batch_norm_running_stats_update():
    x = RNG.normal(size=(4, 2, 3, 3)).astype(np.float32) * 2 + 1
    rm, rv = np.zeros(2, dtype=np.float32), np.ones(2, dtype=np.float32)
    ad.batch_norm(ad.Tensor(x), ad.Tensor(np.ones(2, np.float32)), ad.Tensor(np.zeros(2, np.float32)), rm, rv, training=True)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    assert np.allclose(rm, 0.1 * mean, atol=1e-5)
    assert np.allclose(rv, 0.9 + 0.1 * var, atol=1e-5)


def test_sigmoid_matches_logistic():
    x = RNG.normal(size=(50,))
    y = ad.sigmoid(ad.Tensor(x))
    assert np.allclose(y.data, 1.0 / (1.0 + np.exp(-x)), atol=1e-12)


def test_map_loss_bridges_value_and_gradient():
    from sndmseg.losses import LossReport

    def sq(pred, gt, cfg):
        diff = pred - gt
        return LossReport(float((diff * diff).sum()), 2.0 * diff)

    pred = ad.Tensor(RNG.normal(size=(3, 1, 4, 4)), requires_grad=True)
    gts = RNG.normal(size=(3, 4, 4))
    loss = ad.map_loss(pred, gts, sq, None)
    expected = np.mean([((pred.data[i, 0] - gts[i]) ** 2).sum() for i in range(3)])
    assert abs(float(loss.data) - expected) < 1e-12
    loss.backward()
    assert np.allclose(pred.grad, 2.0 * (pred.data - gts[:, None]) / 3.0, atol=1e-12)


def test_determinism_bitwise():
    def run():
        rng = np.random.Generator(np.random.Philox(7))
        x = ad.Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), requires_grad=True)
        b = ad.Tensor(np.zeros(4, np.float32), requires_grad=True)
        loss = ad.tmean(ad.mul(ad.tanh(ad.conv2d(x, w, b)), ad.tanh(ad.conv2d(x, w, b))))
        loss.backward()
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    first = run()
    second = run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_kernels_match_numpy_references():
    if not kernels.HAVE_NUMBA:
        pytest.skip("numba unavailable; numpy paths are already in use")
    x = RNG.normal(size=(3, 5, 8, 6)).astype(np.float32)
    g = RNG.normal(size=x.shape).astype(np.float32)
    mean, var = kernels.bn_stats_np(x)
    mean_nb, var_nb = kernels.bn_stats_nb(x)
    assert np.allclose(mean, mean_nb, atol=1e-6) and np.allclose(var, var_nb, atol=1e-6)
    inv_std = (1.0 / np.sqrt(var + 1e-5)).astype(np.float32)
    gamma = RNG.normal(size=5).astype(np.float32)
    for training in (True, False):
        ref = kernels.bn_backward_np(x, g, mean, inv_std, gamma, training)
        fast = kernels.bn_backward_nb(x, g, mean, inv_std, gamma, training)
        for r, f in zip(ref, fast):
            assert np.allclose(r, f, atol=1e-4)
    y_ref, i_ref = kernels.maxpool_forward_np(x)
    y_nb, i_nb = kernels.maxpool_forward_nb(x)
    assert np.array_equal(y_ref, y_nb) and np.array_equal(i_ref, i_nb)
    gp = RNG.normal(size=y_ref.shape).astype(np.float32)
    assert np.array_equal(
        kernels.maxpool_backward_np(gp, i_ref, 8, 6), kernels.maxpool_backward_nb(gp, i_nb, 8, 6)
    )
    ym = RNG.normal(size=(2, 3, 4, 6, 2, 2)).astype(np.float32)
    bias = RNG.normal(size=6).astype(np.float32)
    assert np.allclose(kernels.deconv_place_np(ym, bias), kernels.deconv_place_nb(ym, bias), atol=1e-6)
    gd = RNG.normal(size=(2, 6, 6, 8)).astype(np.float32)
    assert np.array_equal(kernels.deconv_gather_np(gd), kernels.deconv_gather_nb(gd))
    assert np.array_equal(kernels.channels_last_np(x), kernels.channels_last_nb(x))
    rows = RNG.normal(size=(3 * 8 * 6, 5)).astype(np.float32)
    assert np.array_equal(kernels.channels_first_np(rows, 3, 8, 6), kernels.channels_first_nb(rows, 3, 8, 6))
    xp = RNG.normal(size=(2, 4, 9, 8))
    w1 = RNG.normal(size=(4, 3, 3))
    gg = RNG.normal(size=(2, 7, 6))
    ref = kernels.conv1_backward_np(xp, w1, gg)
    fast = kernels.conv1_backward_nb(xp, w1, gg)
    assert np.allclose(ref[0], fast[0], atol=1e-10) and np.allclose(ref[1], fast[1], atol=1e-10)


def test_checkpoint_round_trip(tmp_path):
    tensors = {
        "a.weight": RNG.normal(size=(3, 2, 3, 3)).astype(np.float32),
        "b.bias": RNG.normal(size=(7,)).astype(np.float32),
    }
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(str(path), "key = value\n", tensors)
    header, back = ad.load_checkpoint(str(path))
    assert header == "key = value\n"
    assert set(back) == set(tensors)
    for name in tensors:
        assert np.array_equal(back[name], tensors[name])


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(str(path), "", {"x": np.ones(4, np.float32)})
    data = bytearray(path.read_bytes())
    bad_magic = tmp_path / "bad.ckpt"
    bad_magic.write_bytes(b"NOPE" + bytes(data[4:]))
    with pytest.raises(CheckpointCorruptError):
        ad.load_checkpoint(str(bad_magic))
    truncated = tmp_path / "trunc.ckpt"
    truncated.write_bytes(bytes(data[:-8]))
    with pytest.raises(CheckpointCorruptError):
        ad.load_checkpoint(str(truncated))
