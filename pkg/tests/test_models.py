import math

import numpy as np
import pytest

from riskmeta import autodiff as ad
from riskmeta import models

from _fd import central_diff, rel_close


def _nodes(theta):
    t = ad.Tape()
    return [t.variable(p) for p in theta]


def test_zero_params_give_zero_logits():
    spec = models.MlpSpec([3, 4, 2])
    theta = [np.zeros(s) for s in spec.param_shapes]
    out = models.forward(spec, _nodes(theta), np.ones((5, 3)))
    np.testing.assert_array_equal(out.value, np.zeros((5, 2)))


def test_identity_linear_layer():
    spec = models.MlpSpec([3, 3])
    X = np.arange(6.0).reshape(2, 3)
    out = models.forward(spec, _nodes([np.eye(3), np.zeros(3)]), X)
    np.testing.assert_array_equal(out.value, X)


def test_forward_shape_errors():
    spec = models.MlpSpec([3, 2])
    with pytest.raises(ad.ShapeError):
        models.forward(spec, _nodes([np.zeros((3, 2)), np.zeros(2)]), np.ones((4, 5)))
    with pytest.raises(ad.ShapeError):
        models.forward(spec, _nodes([np.zeros((2, 2)), np.zeros(2)]), np.ones((4, 3)))
    with pytest.raises(ValueError):
        models.MlpSpec([3])


def test_forward_gradient_matches_fd(rng):
    spec = models.MlpSpec([4, 5, 3], init_seed=2)
    theta = models.init_params(spec)
    theta[1] = rng.normal(size=5)
    X = rng.normal(size=(6, 4))
    nodes = _nodes(theta)
    grads = ad.backward(ad.sum(models.forward(spec, nodes, X)), nodes)
    for i, p in enumerate(theta):
        def f(v, i=i):
            th = list(theta)
            th[i] = v
            return float(models.forward_array(spec, th, X).sum())
        assert rel_close(grads[i], central_diff(f, p), 1e-5, atol=1e-8)


def test_forward_array_matches_node_path(rng):
    spec = models.MlpSpec([4, 7, 7, 3], init_seed=5)
    theta = models.init_params(spec)
    X = rng.normal(size=(9, 4))
    np.testing.assert_array_equal(models.forward(spec, _nodes(theta), X).value, models.forward_array(spec, theta, X))


def test_init_is_seeded_glorot():
    spec = models.MlpSpec([10, 30, 5], init_seed=7)
    a, b = models.init_params(spec), models.init_params(spec)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    s = math.sqrt(6 / 40)
    assert np.abs(a[0]).max() <= s
    assert not a[1].any()


def test_cross_entropy_examples():
    t = ad.Tape()
    out = models.cross_entropy_per_sample(t.variable(np.zeros((3, 10))), [0, 4, 9])
    np.testing.assert_allclose(out.value, [math.log(10)] * 3, rtol=0, atol=1e-15)
    z = np.zeros((1, 5))
    z[0, 2] = 30.0
    assert models.cross_entropy_per_sample(z, [2])[0] < 1e-9
    assert models.cross_entropy_per_sample(np.zeros((1, 2)), [0])[0] == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        models.cross_entropy_per_sample(np.zeros((2, 3)), [0, 3])


def test_cross_entropy_properties(rng):
    z = rng.normal(scale=4, size=(20, 6))
    y = rng.integers(0, 6, size=20)
    loss = models.cross_entropy_per_sample(z, y)
    assert np.all(loss >= 0)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(loss, -np.log(p[np.arange(20), y]), rtol=0, atol=1e-12)
    shifted = models.cross_entropy_per_sample(z + rng.normal(size=(20, 1)) * 50, y)
    np.testing.assert_allclose(shifted, loss, rtol=0, atol=1e-12)
    node_loss = models.cross_entropy_per_sample(ad.Tape().variable(z), y).value
    np.testing.assert_allclose(node_loss, loss, rtol=0, atol=1e-12)


def test_loss_gradient_matches_fd(rng):
    spec = models.MlpSpec([3, 4, 3], init_seed=1)
    theta = models.init_params(spec)
    X = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, size=5)
    nodes = _nodes(theta)
    grads = ad.backward(ad.mean(models.cross_entropy_per_sample(models.forward(spec, nodes, X), y)), nodes)
    for i, p in enumerate(theta):
        def f(v, i=i):
            th = list(theta)
            th[i] = v
            return float(models.cross_entropy_per_sample(models.forward_array(spec, th, X), y).mean())
        assert rel_close(grads[i], central_diff(f, p), 1e-5, atol=1e-9)


def test_accuracy():
    assert models.accuracy(np.eye(3) * 5, [0, 1, 2]) == 1.0
    assert models.accuracy(np.zeros((4, 3)), [0, 0, 0, 0]) == 1.0
    logits = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    assert models.accuracy(logits, [0, 1, 1, 0]) == 0.5


def test_checkpoint_roundtrip(tmp_path):
    spec = models.MlpSpec([4, 6, 3], init_seed=3)
    theta = models.init_params(spec)
    path = tmp_path / "ck.bin"
    models.save_checkpoint(path, spec, theta)
    raw = path.read_bytes()
    assert raw.startswith(b"riskmeta-checkpoint v1\nwidths 4 6 3\nW0 4 6\nb0 6\nW1 6 3\nb1 3\nend\n")
    spec2, back = models.load_checkpoint(path, spec)
    assert spec2.layer_widths == spec.layer_widths
    for a, b in zip(theta, back):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_mismatch(tmp_path):
    spec = models.MlpSpec([4, 6, 3])
    path = tmp_path / "ck.bin"
    models.save_checkpoint(path, spec, models.init_params(spec))
    with pytest.raises(models.CheckpointError):
        models.load_checkpoint(path, models.MlpSpec([4, 5, 3]))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(models.CheckpointError, match="data bytes"):
        models.load_checkpoint(path)
    (tmp_path / "junk").write_bytes(b"hello\nend\n")
    with pytest.raises(models.CheckpointError):
        models.load_checkpoint(tmp_path / "junk")
