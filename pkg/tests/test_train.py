import numpy as np
import pytest

from xncaps.data import synthetic_blobs
from xncaps.train import Adam, CapsModel, TrainConfig, conv_out, im2col, train_demo


def test_im2col_matches_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 7, 6, 3))
    cols = im2col(x, 3, 2)
    assert cols.shape == (2, conv_out(7, 3, 2), conv_out(6, 3, 2), 27)
    for b, i, j in np.ndindex(cols.shape[:3]):
        patch = x[b, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]
        np.testing.assert_array_equal(cols[b, i, j], patch.reshape(-1))


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -2.0])}
    opt = Adam(params, lr=0.1)
    opt.step(params, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(params["w"], [0.9, -1.9], rtol=1e-6)


def test_model_gradients_match_finite_differences():
    data = synthetic_blobs(4, size=9, seed=1)
    cfg = TrainConfig(layer="capsfc", kernel=3, stride=3, capsule_types=1, dim_in=4, dim_out=3, iterations=2)
    model = CapsModel.init(data.images.shape[1:], data.num_classes, cfg)
    targets = data.one_hot()
    _, grads, _ = model.loss_and_grads(data.images, targets)
    h = 1e-6
    for name in ("conv_w", "conv_b", "caps_w"):
        param = model.params[name]
        fd = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + h
            up = model.loss_and_grads(data.images, targets)[0]
            param[idx] = old - h
            down = model.loss_and_grads(data.images, targets)[0]
            param[idx] = old
            fd[idx] = (up - down) / (2 * h)
        err = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert err <= 1e-4, name


def test_kernel_larger_than_image():
    with pytest.raises(ValueError):
        CapsModel.init((4, 4, 1), 2, TrainConfig(kernel=5))


def test_short_training_reduces_loss():
    result = train_demo(synthetic_blobs(64, seed=2), TrainConfig(epochs=3, layer="capsfc"))
    assert len(result.losses) == 4
    assert result.losses[-1] < result.losses[0]
    assert result.as_dict()["final_loss"] == result.losses[-1]
