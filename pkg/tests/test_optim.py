import numpy as np
import pytest

from apnet.config import OptimConfig
from apnet.optim import (
    CHECKPOINT_VERSION,
    CheckpointError,
    OptimizerError,
    OptimizerState,
    adamw_step,
    epoch_end,
    group_of,
    load_checkpoint,
    restore_params,
    save_checkpoint,
    zero_grad,
)
from apnet.tensor import Value


def _param(data, grad=None):
    p = Value(np.array(data, dtype=np.float64), requires_grad=True)
    if grad is not None:
        p.grad = np.array(grad, dtype=np.float64)
    return p


def _reference_adamw(x, grads, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        x = x - lr * weight_decay * x
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
    return x


class TestAdamW:
    def test_zero_gradient_without_decay_is_fixed_point(self):
        state = OptimizerState(weight_decay=0.0)
        p = _param([1.0, -2.0], [0.0, 0.0])
        adamw_step(state, {"fusion.w": p})
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_decoupled_weight_decay(self):
        state = OptimizerState(lr=0.1, weight_decay=0.5)
        p = _param([2.0], [0.0])
        adamw_step(state, {"fusion.w": p})
        np.testing.assert_allclose(p.data, [2.0 * (1 - 0.05)])

    def test_step_opposes_gradient(self):
        state = OptimizerState(lr=0.01, weight_decay=0.0)
        p = _param([0.0, 0.0], [3.0, -0.5])
        adamw_step(state, {"a.w": p})
        # первый шаг Adam: величина ≈ lr независимо от масштаба градиента
        np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-5)
        assert state.step == 1

    def test_p_group_moves_five_times_faster(self):
        state = OptimizerState.from_config(OptimConfig(weight_decay=0.0))
        pa, pp = _param([0.0], [1.0]), _param([0.0], [1.0])
        adamw_step(state, {"a.w": pa, "p.w": pp})
        assert pp.data[0] == pytest.approx(5 * pa.data[0])

    @pytest.mark.parametrize("weight_decay", [0.0, 0.01])
    def test_ten_steps_match_textbook_update(self, rng, weight_decay):
        state = OptimizerState.from_config(OptimConfig(weight_decay=weight_decay))
        start = {"a.w": rng.normal(size=4), "p.w": rng.normal(size=4), "head_a.w": rng.normal(size=(2, 2))}
        grads = {name: [rng.normal(size=x.shape) for _ in range(10)] for name, x in start.items()}
        params = {name: _param(x) for name, x in start.items()}
        for step in range(10):
            for name, p in params.items():
                p.grad = grads[name][step]
            adamw_step(state, params)
        lr = {"a.w": 1e-3, "p.w": 5e-3, "head_a.w": 1e-3}
        for name, p in params.items():
            expected = _reference_adamw(start[name], grads[name], lr[name], weight_decay)
            np.testing.assert_allclose(p.data, expected, rtol=1e-12, atol=1e-15)

    def test_learning_rate_schedule(self):
        state = OptimizerState.from_config(OptimConfig())
        epoch_end(state)
        epoch_end(state)
        assert state.group_lr("a") == pytest.approx(0.0009025)
        assert state.group_lr("p") == pytest.approx(5 * 0.0009025)
        assert state.group_lr("fusion") == pytest.approx(0.0009025)

    def test_missing_gradient(self):
        with pytest.raises(OptimizerError):
            adamw_step(OptimizerState(), {"a.w": _param([1.0])})

    def test_minimizes_quadratic(self):
        state = OptimizerState(lr=0.05, weight_decay=0.0)
        p = _param([3.0, -4.0])
        for _ in range(500):
            zero_grad({"w": p})
            ((p - Value([1.0, 2.0])) ** 2).sum().backward()
            adamw_step(state, {"w": p})
        np.testing.assert_allclose(p.data, [1.0, 2.0], atol=5e-2)

    def test_groups(self):
        assert group_of("a.enc0.w") == "a"
        assert group_of("p.enc0.w") == "p"
        assert group_of("head_a.w") == "fusion"
        assert group_of("fusion.kernel") == "fusion"


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = {"a.w": _param(np.arange(6.0).reshape(2, 3)), "fusion.b": _param(np.float64(1.5))}
        path = save_checkpoint(tmp_path / "ckpt", params, meta={"strategy": "gaf", "seed": "3"})
        assert path.suffix == ".bin"
        assert path.with_suffix(".manifest").read_text().splitlines()[0] == CHECKPOINT_VERSION

        arrays, meta = load_checkpoint(tmp_path / "ckpt.bin")
        assert meta == {"strategy": "gaf", "seed": "3"}
        np.testing.assert_array_equal(arrays["a.w"], params["a.w"].data)
        assert arrays["fusion.b"].shape == ()

        target = {"a.w": _param(np.zeros((2, 3))), "fusion.b": _param(np.float64(0.0))}
        restore_params(target, arrays)
        np.testing.assert_array_equal(target["a.w"].data, params["a.w"].data)
        assert target["fusion.b"].data == 1.5

    def test_float32_round_trip(self, tmp_path):
        p = Value(np.array([0.1, 0.2], dtype=np.float32), requires_grad=True)
        save_checkpoint(tmp_path / "c", {"w": p})
        arrays, _ = load_checkpoint(tmp_path / "c")
        assert arrays["w"].dtype == np.float32
        np.testing.assert_array_equal(arrays["w"], p.data)

    def test_missing_files(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nothing")

    def test_wrong_version(self, tmp_path):
        save_checkpoint(tmp_path / "c", {"w": _param([1.0])})
        (tmp_path / "c.manifest").write_text("other-format\n")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c")

    def test_truncated_payload(self, tmp_path):
        save_checkpoint(tmp_path / "c", {"w": _param(np.ones(10))})
        (tmp_path / "c.bin").write_bytes(b"\0" * 8)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c")

    def test_restore_mismatch(self):
        with pytest.raises(CheckpointError):
            restore_params({"w": _param([1.0])}, {"v": np.ones(1)})
        with pytest.raises(CheckpointError):
            restore_params({"w": _param([1.0])}, {"w": np.ones(2)})
