import numpy as np
import pytest

import phaselab.numerics as nm
from phaselab.numerics import Tape, Tensor

from oracles import adam_reference, finite_difference_grads, relative_error

FD_TOL = 1e-4


def _grad_case(build, params_np, seed=None):
    """Compare tape gradients against central finite differences."""

    def scalar(arrays):
        tensors = {k: Tensor(v) for k, v in arrays.items()}
        out, _ = build(tensors, None)
        return float(out.data)

    tensors = {k: Tensor(v) for k, v in params_np.items()}
    tape = Tape()
    out, wrt = build(tensors, tape)
    grads = nm.backward(tape, out, wrt or tensors)
    fd = finite_difference_grads(scalar, params_np)
    for name in (wrt or tensors):
        assert relative_error(grads[name], fd[name]) < FD_TOL, name
    return grads


class TestForwardSemantics:
    def test_relu_values(self):
        out = nm.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_affine_matches_numpy(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
        out = nm.affine(Tensor(x), Tensor(w), Tensor(b))
        assert np.allclose(out.data, x @ w + b)

    def test_conv1x1_identity_filter(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 7, 4))
        out = nm.conv1x1(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert np.array_equal(out.data, x)

    def test_conv1x1_equals_per_cell_affine_loop(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 3, 4))
        w = rng.normal(size=(4, 6))
        b = rng.normal(size=6)
        out = nm.conv1x1(Tensor(x), Tensor(w), Tensor(b))
        expected = np.empty((5, 3, 6))
        for i in range(5):
            for j in range(3):
                expected[i, j] = x[i, j] @ w + b
        # identical math; only BLAS accumulation order may differ
        assert np.abs(out.data - expected).max() < 1e-12

    def test_embed_rows(self):
        table = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = nm.embed(table, np.array([[0, 1], [1, 1]]))
        assert np.array_equal(out.data, [[[1, 2], [3, 4]], [[3, 4], [3, 4]]])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            nm.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), Tensor(np.ones(5)))
        with pytest.raises(ValueError):
            nm.take(Tensor(np.ones((2, 3))), np.array([5]), axis=0)

    def test_debug_mode_rejects_non_finite(self):
        nm.debug_checks = True
        try:
            with pytest.raises(ValueError):
                nm.relu(Tensor([np.nan]))
        finally:
            nm.debug_checks = False

    def test_ops_do_not_mutate_inputs(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(3, 4)))
        before = x.data.copy()
        nm.relu(x)
        nm.add(x, x)
        nm.mul_elem(x, x)
        nm.sum_axis(x, 0)
        nm.concat([x, x], axis=1)
        assert np.array_equal(x.data, before)

    def test_huber_quadratic_and_linear_regions(self):
        pred = Tensor([[0.5, 3.0]])
        target = Tensor([[0.0, 0.0]])
        mask = Tensor([[1.0, 1.0]])
        out = nm.huber_loss(pred, target, mask, delta=1.0)
        # 0.5*0.25 + (3 - 0.5) = 0.125 + 2.5, averaged over batch of 1
        assert np.isclose(float(out.data), 0.125 + 2.5)


class TestGradients:
    def test_affine_gradient_random(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            params = {
                "x": rng.normal(size=(4, 3)),
                "w": rng.normal(size=(3, 5)),
                "b": rng.normal(size=5),
            }

            def build(t, tape):
                out = nm.affine(t["x"], t["w"], t["b"], tape)
                return nm.sum_axis(nm.sum_axis(out, 1, tape), 0, tape), None

            _grad_case(build, params)

    def test_chained_affine_relu_gradient(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            params = {
                "x": rng.normal(size=(3, 4)),
                "w1": rng.normal(size=(4, 6)),
                "b1": rng.normal(size=6),
                "w2": rng.normal(size=(6, 2)),
                "b2": rng.normal(size=2),
            }

            def build(t, tape):
                h = nm.relu(nm.affine(t["x"], t["w1"], t["b1"], tape), tape)
                out = nm.affine(h, t["w2"], t["b2"], tape)
                return nm.sum_axis(nm.sum_axis(out, 1, tape), 0, tape), None

            _grad_case(build, params)

    OPS = ["add", "mul_elem", "concat", "take", "embed", "sum_axis", "conv1x1", "reshape", "huber"]

    @pytest.mark.parametrize("op_name", OPS)
    def test_each_primitive_gradient(self, op_name):
        rng = np.random.default_rng(100 + self.OPS.index(op_name))
        for _ in range(20):
            if op_name == "add":
                params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(1, 4))}

                def build(t, tape):
                    out = nm.add(t["a"], t["b"], tape)
                    return nm.sum_axis(nm.sum_axis(out, 1, tape), 0, tape), None

            elif op_name == "mul_elem":
                params = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(3, 4))}

                def build(t, tape):
                    out = nm.mul_elem(t["a"], t["b"], tape)
                    out = nm.sum_axis(nm.sum_axis(nm.sum_axis(out, 2, tape), 1, tape), 0, tape)
                    return out, None

            elif op_name == "concat":
                params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 2))}

                def build(t, tape):
                    out = nm.concat([t["a"], t["b"]], axis=1, tape=tape)
                    w = Tensor(np.arange(5.0)[:, None])
                    out = nm.affine(out, w, Tensor(np.zeros(1)), tape)
                    return nm.sum_axis(nm.sum_axis(out, 1, tape), 0, tape), None

            elif op_name == "take":
                idx = np.array([[0, 2, 0], [1, 1, 2]])
                params = {"x": rng.normal(size=(2, 3, 4))}

                def build(t, tape):
                    out = nm.take(t["x"], idx, axis=1, tape=tape)
                    for ax in (3, 2, 1, 0):
                        out = nm.sum_axis(out, ax, tape)
                    return out, None

            elif op_name == "embed":
                idx = np.array([0, 1, 1, 0, 1])
                params = {"table": rng.normal(size=(2, 4))}

                def build(t, tape):
                    out = nm.embed(t["table"], idx, tape)
                    w = Tensor(rng.normal(size=(4, 1)))
                    out = nm.conv1x1(out, Tensor(np.ones((4, 1))), Tensor(np.zeros(1)), tape)
                    return nm.sum_axis(nm.sum_axis(out, 1, tape), 0, tape), None

            elif op_name == "sum_axis":
                params = {"x": rng.normal(size=(3, 4, 2))}

                def build(t, tape):
                    out = nm.sum_axis(t["x"], 1, tape)
                    return nm.sum_axis(nm.sum_axis(out, 1, tape), 0, tape), None

            elif op_name == "conv1x1":
                params = {
                    "x": rng.normal(size=(4, 3, 5)),
                    "w": rng.normal(size=(5, 2)),
                    "b": rng.normal(size=2),
                }

                def build(t, tape):
                    out = nm.conv1x1(t["x"], t["w"], t["b"], tape)
                    for ax in (2, 1, 0):
                        out = nm.sum_axis(out, ax, tape)
                    return out, None

            elif op_name == "reshape":
                params = {"x": rng.normal(size=(3, 4))}

                def build(t, tape):
                    out = nm.reshape(t["x"], (2, 6), tape)
                    out = nm.mul_elem(out, out, tape)
                    return nm.sum_axis(nm.sum_axis(out, 1, tape), 0, tape), None

            else:  # huber
                while True:  # central differences are invalid at the |r|=delta kink
                    pred = rng.normal(size=(4, 3)) * 2
                    target = rng.normal(size=(4, 3))
                    if np.all(np.abs(np.abs(pred - target) - 1.0) > 0.05):
                        break
                params = {
                    "pred": pred,
                    "target": target,
                    "mask": rng.uniform(0.1, 1.0, size=(4, 3)),
                }

                def build(t, tape):
                    return nm.huber_loss(t["pred"], t["target"], t["mask"], 1.0, tape), None

            _grad_case(build, params)

    def test_backward_loss_must_be_scalar(self):
        tape = Tape()
        x = Tensor(np.ones((2, 2)))
        out = nm.relu(x, tape)
        with pytest.raises(ValueError):
            nm.backward(tape, out, {"x": x})

    def test_backward_loss_must_be_on_tape(self):
        tape = Tape()
        x = Tensor(np.ones(3))
        nm.relu(x, tape)
        stray = nm.sum_axis(Tensor(np.ones(3)), 0)  # recorded nowhere
        with pytest.raises(ValueError):
            nm.backward(tape, stray, {"x": x})

    def test_sum_of_parameter_gives_ones(self):
        tape = Tape()
        x = Tensor(np.arange(6.0).reshape(2, 3))
        loss = nm.sum_axis(nm.sum_axis(x, 1, tape), 0, tape)
        grads = nm.backward(tape, loss, {"x": x})
        assert np.array_equal(grads["x"], np.ones((2, 3)))

    def test_disconnected_parameter_gets_zero(self):
        tape = Tape()
        x = Tensor(np.ones(3))
        unused = Tensor(np.ones(4))
        loss = nm.sum_axis(x, 0, tape)
        grads = nm.backward(tape, loss, {"x": x, "unused": unused})
        assert np.array_equal(grads["unused"], np.zeros(4))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = {"p": Tensor([1.0, -2.0])}
        state = nm.adam_init(params)
        out = nm.adam_update(params, {"p": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(out["p"].data, params["p"].data)
        assert state.step == 1

    def test_single_step_decreases_param(self):
        params = {"p": Tensor([1.0])}
        state = nm.adam_init(params)
        out = nm.adam_update(params, {"p": np.ones(1)}, state, lr=0.1)
        assert out["p"].data[0] < 1.0

    def test_two_steps_match_hand_recurrence(self):
        params = {"p": Tensor([1.0])}
        state = nm.adam_init(params)
        grads = [0.7, -0.3]
        expected = adam_reference(1.0, grads, lr=0.1)
        for g in grads:
            params = nm.adam_update(params, {"p": np.array([g])}, state, lr=0.1)
        assert np.isclose(params["p"].data[0], expected, rtol=0, atol=1e-12)

    def test_nan_gradient_names_parameter(self):
        params = {"bad_param": Tensor([1.0])}
        state = nm.adam_init(params)
        with pytest.raises(ValueError, match="bad_param"):
            nm.adam_update(params, {"bad_param": np.array([np.nan])}, state, lr=0.1)

    def test_key_mismatch_rejected(self):
        params = {"a": Tensor([1.0])}
        with pytest.raises(ValueError):
            nm.adam_update(params, {"b": np.ones(1)}, nm.adam_init(params), lr=0.1)


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        arrays = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5)}
        path = nm.save_arrays(tmp_path / "ckpt.bin", arrays)
        loaded = nm.load_arrays(path)
        assert set(loaded) == set(arrays)
        for k in arrays:
            assert np.array_equal(loaded[k], arrays[k])

    def test_manifest_is_little_endian_with_offsets(self, tmp_path):
        import json

        arrays = {"b": np.ones(2), "a": np.zeros(3)}
        path = nm.save_arrays(tmp_path / "ckpt.bin", arrays)
        manifest = json.loads((tmp_path / "ckpt.json").read_text())
        assert manifest["byte_order"] == "little"
        entries = manifest["arrays"]
        assert [e["name"] for e in entries] == ["a", "b"]  # name order
        assert entries[0]["offset"] == 0
        assert entries[1]["offset"] == 3 * 8
        assert all(e["dtype"] == "<f8" for e in entries)
