import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bcib.autodiff import (
    CheckpointError,
    LrSchedule,
    NonFiniteGradientError,
    ParamSet,
    ShapeError,
    TensorNode,
    adam,
    adamw,
    clip_grad_norm,
    gradcheck,
    inject_fault,
    lr_at,
    ops,
    optimizer_step,
    params_from_bytes,
    params_to_bytes,
)
from bcib.autodiff.opcheck import OP_CASES, check_op


def leaf(value):
    return TensorNode(np.asarray(value, dtype=float), requires_grad=True)


def test_relu_definition():
    assert ops.relu(TensorNode([-1.0, 0.0, 2.0])).value.tolist() == [[0.0, 0.0, 2.0]]


def test_logsumexp_large_inputs_do_not_overflow():
    out = ops.logsumexp(TensorNode([1000.0, 1000.0])).item()
    assert out == pytest.approx(1000 + math.log(2), abs=1e-12)


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4))
    expected = np.zeros((2, 4))
    for i in range(2):
        for j in range(4):
            for k in range(3):
                expected[i, j] += a[i, k] * b[k, j]
    out = ops.matmul(TensorNode(a), TensorNode(b))
    assert out.shape == (2, 4)
    np.testing.assert_allclose(out.value, expected, rtol=0, atol=1e-14)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ops.matmul(TensorNode(np.zeros((2, 3))), TensorNode(np.zeros((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        ops.add(TensorNode(np.zeros((2, 3))), TensorNode(np.zeros((3, 2))))


def test_backward_of_sum_is_ones():
    x = leaf([[1.0, -2.0, 5.0]])
    ops.sum(x).backward()
    assert x.grad.tolist() == [[1.0, 1.0, 1.0]]


def test_mse_gradient_at_zero_weight_matches_hand_derivative():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 1))
    y = rng.normal(size=(6, 1))
    w = leaf([[0.0]])
    ops.mse(ops.matmul(TensorNode(x), w), TensorNode(y)).backward()
    assert w.grad[0, 0] == pytest.approx(-2 * np.mean(x * y), rel=1e-12)


def test_non_scalar_root_rejected():
    with pytest.raises(ShapeError):
        leaf(np.ones((2, 2))).backward()


def test_backward_twice_doubles_every_gradient():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    h = ops.tanh(ops.matmul(a, b))
    loss = ops.sum(ops.mul(h, h))
    loss.backward()
    first = (a.grad.copy(), b.grad.copy())
    loss.backward()
    assert np.array_equal(a.grad, 2 * first[0])
    assert np.array_equal(b.grad, 2 * first[1])


def test_shared_node_gradients_accumulate():
    x = leaf([[3.0]])
    y = ops.mul(x, x)
    ops.add(y, x).backward()
    assert x.grad[0, 0] == 7.0


def test_no_grad_records_nothing():
    from bcib.autodiff import no_grad

    x = leaf([[1.0, 2.0]])
    with no_grad():
        y = ops.tanh(x)
    assert not y.requires_grad and y.parents == ()


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_passes_finite_differences(name):
    report = check_op(name, seed=11)
    assert report.passed, report.max_rel_error


@pytest.mark.parametrize("name", ["matmul", "tanh", "logsumexp", "softmax", "take_rows"])
def test_corrupted_backward_rule_is_reported(name):
    with inject_fault(name):
        report = check_op(name, seed=11)
    assert not report.passed


def test_gradcheck_quadratic_and_empty():
    p = ParamSet()
    w = p.add("w", np.random.default_rng(2).normal(size=(3, 3)))
    report = gradcheck(p, lambda: ops.sum(ops.mul(w, w)), tolerance=1e-4)
    assert report.passed and set(report.max_rel_error) == {"w"}
    empty = gradcheck(ParamSet(), lambda: TensorNode(0.0), tolerance=1e-4)
    assert empty.passed and empty.max_rel_error == {}


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        a = leaf(rng.normal(size=(5, 4)))
        loss = ops.logsumexp(ops.tanh(ops.matmul(a, TensorNode(rng.normal(size=(4, 3))))))
        loss.backward()
        return loss.value.tobytes(), a.grad.tobytes()

    assert run() == run()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-20, 20)))
def test_logsumexp_matches_naive_formula(x):
    assert ops.logsumexp(TensorNode(x)).item() == pytest.approx(np.log(np.sum(np.exp(x))), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e6, 1e6)))
def test_logsumexp_finite_for_huge_inputs(x):
    assert np.isfinite(ops.logsumexp(TensorNode(x)).item())


def test_softmax_rows_sum_to_one():
    y = ops.softmax(TensorNode(np.random.default_rng(0).normal(size=(4, 5)) * 30)).value
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-15)


# ---------------------------------------------------------------------------
# optimizers and schedule


def _single(value, grad):
    p = ParamSet()
    node = p.add("w", np.array([[value]]))
    node.grad = np.array([[grad]])
    return p, node


@pytest.mark.parametrize("g", [0.3, -2.0, 1e3])
def test_first_adam_step_moves_by_lr_times_sign(g):
    p, w = _single(1.0, g)
    opt = adam(lr=0.01)
    optimizer_step(opt, p)
    assert w.value[0, 0] - 1.0 == pytest.approx(-0.01 * np.sign(g), abs=1e-6)
    assert opt.step == 1
    assert w.grad[0, 0] == g


def test_zero_gradient_adam_unchanged_adamw_decays():
    p, w = _single(2.0, 0.0)
    optimizer_step(adam(lr=0.1), p)
    assert w.value[0, 0] == 2.0
    p, w = _single(2.0, 0.0)
    optimizer_step(adamw(lr=0.1, weight_decay=0.01), p)
    assert w.value[0, 0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), rel=1e-15)


def test_adam_minimizes_quadratic():
    p = ParamSet()
    w = p.add("w", np.zeros((1, 1)))
    opt = adam(lr=0.1)
    for _ in range(100):
        p.zero_grad()
        d = ops.sub(w, 3.0)
        ops.sum(ops.mul(d, d)).backward()
        optimizer_step(opt, p)
    assert abs(w.value[0, 0] - 3.0) < 0.1
    assert opt.step == 100


def test_nan_gradient_names_parameter():
    p = ParamSet()
    p.add("head/l0/w", np.zeros((2, 2))).grad[0, 1] = np.nan
    with pytest.raises(NonFiniteGradientError, match="head/l0/w"):
        optimizer_step(adam(), p)


def test_clip_grad_norm_caps_global_norm():
    p = ParamSet()
    a = p.add("a", np.zeros((1, 2)))
    b = p.add("b", np.zeros((1, 1)))
    a.grad = np.array([[300.0, 0.0]])
    b.grad = np.array([[400.0]])
    assert clip_grad_norm(p, 100.0) == pytest.approx(500.0)
    norm = math.sqrt(np.sum(a.grad**2) + np.sum(b.grad**2))
    assert norm == pytest.approx(100.0, rel=1e-6)


def test_cosine_schedule_endpoints():
    s = LrSchedule(base_lr=1e-3, total_steps=100)
    assert lr_at(s, 0) == 1e-3
    assert lr_at(s, 50) == pytest.approx(5e-4, rel=1e-12)
    assert lr_at(s, 100) == 0.0
    assert all(lr_at(s, k) > 0 for k in range(100))
    with pytest.raises(ValueError):
        lr_at(s, 101)
    with pytest.raises(ValueError):
        lr_at(s, -1)
    assert lr_at(LrSchedule(2e-4, 10, kind="constant"), 7) == 2e-4


def test_warmup_is_positive_and_reaches_base():
    s = LrSchedule(base_lr=1.0, total_steps=20, warmup_steps=4)
    assert [lr_at(s, k) for k in range(4)] == [0.25, 0.5, 0.75, 1.0]
    assert lr_at(s, 4) == 1.0


# ---------------------------------------------------------------------------
# ParamSet and checkpoint format


def test_paramset_lexicographic_order_and_unique_paths():
    p = ParamSet()
    for path in ["head/b", "enc/a", "fuse/z"]:
        p.add(path, np.zeros((1, 1)))
    assert list(p) == ["enc/a", "fuse/z", "head/b"]
    with pytest.raises(KeyError):
        p.add("enc/a", np.zeros((1, 1)))
    with pytest.raises(ValueError):
        p["x"] = TensorNode(0.0)


def test_checkpoint_roundtrip_byte_exact():
    rng = np.random.default_rng(0)
    values = {"mine/l0/w": rng.normal(size=(3, 4)), "mine/l0/b": rng.normal(size=(1, 4))}
    blob = params_to_bytes(values, trailer=b'{"a": 1}')
    loaded, trailer = params_from_bytes(blob)
    assert trailer == b'{"a": 1}'
    assert params_to_bytes(loaded, trailer) == blob
    for k in values:
        assert np.array_equal(loaded[k], values[k])


def test_checkpoint_layout_header():
    blob = params_to_bytes({"ab": np.array([[1.5]])})
    assert blob[:4] == b"BCIB"
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    assert struct.unpack_from("<H", blob, 12) == (2,)
    assert blob[14:16] == b"ab"
    assert struct.unpack_from("<IId", blob, 16) == (1, 1, 1.5)


def test_checkpoint_rejects_unknown_version_and_magic():
    blob = bytearray(params_to_bytes({"a": np.zeros((1, 1))}))
    blob[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version"):
        params_from_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        params_from_bytes(b"XXXX" + bytes(blob[4:]))
