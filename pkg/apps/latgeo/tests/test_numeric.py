"""Autodiff engine: op values, backward contracts, optimizer and gradient checks."""

import math

import numpy as np
import pytest

from src.core.exceptions import (
    ContractError,
    DegenerateMaskError,
    DimensionError,
    EmbeddingIndexError,
    TrainingDivergenceError,
)
from src.core.rng import SeedStreams
from src.infra.latgeo_core.factory import build_model
from src.infra.numeric import ops
from src.infra.numeric.gradcheck import check_gradients, relative_error
from src.infra.numeric.module import Linear, Module
from src.infra.numeric.optim import Adam, OptimizerState, adam_step, clip_grad_norm, noam_lr
from src.infra.numeric.tensor import Tensor, backward, no_grad
from src.services.gradcheck_service import (
    OP_CASES,
    check_micro_models,
    check_ops,
    micro_config,
    micro_vocabulary,
    run_gradcheck,
)


def test_matmul_examples():
    b = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert np.array_equal(ops.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])
    assert not ops.matmul(Tensor(b.T), Tensor(np.zeros((2, 2)))).data.any()


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(DimensionError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_rows_examples():
    assert np.allclose(ops.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3, 1 / 3, 1 / 3]])
    assert np.allclose(ops.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]])
    masked = ops.softmax_rows(Tensor([[5.0, 7.0]]), mask=np.array([[True, False]]))
    assert np.array_equal(masked.data, [[1.0, 0.0]])


def test_softmax_rows_fully_masked_row_is_degenerate():
    with pytest.raises(DegenerateMaskError):
        ops.softmax_rows(Tensor(np.zeros((2, 2))), mask=np.array([[True, False], [False, False]]))


def test_softmax_rows_unit_bias_is_bit_identical():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    assert np.array_equal(ops.softmax_rows(x).data, ops.softmax_rows(x, bias=np.ones((3, 4))).data)


def test_elementwise_examples():
    assert np.array_equal(ops.elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert ops.elementwise("sigmoid", Tensor(0.0)).item() == 0.5
    assert ops.elementwise("sigmoid", Tensor(math.log(3.0))).item() == pytest.approx(0.75, abs=1e-15)
    assert np.array_equal(ops.elementwise("scale", Tensor([1.0, 2.0]), 3.0).data, [3.0, 6.0])
    with pytest.raises(ContractError):
        ops.elementwise("tanh", Tensor(0.0))


def test_broadcast_only_against_scalars():
    assert np.array_equal(ops.add(Tensor([1.0, 2.0]), 1.0).data, [2.0, 3.0])
    with pytest.raises(DimensionError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_layer_norm_examples():
    gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert np.array_equal(ops.layer_norm(Tensor([[2.0, 2.0]]), gain, bias).data, [[0.0, 0.0]])
    assert np.allclose(ops.layer_norm(Tensor([[1.0, 3.0]]), gain, bias, eps=0.0).data, [[-1.0, 1.0]])
    shifted = ops.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.zeros(2)), Tensor([0.5, -0.5]))
    assert np.array_equal(shifted.data, [[0.5, -0.5]])


def test_embed_lookup_duplicate_rows_sum_gradients():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    assert np.array_equal(ops.embed_lookup(table, [0]).data, [[0.0, 1.0, 2.0]])
    rows = ops.embed_lookup(table, [2, 2])
    backward(ops.sum(rows))
    assert np.array_equal(table.grad[2], [2.0, 2.0, 2.0])
    assert not table.grad[[0, 1, 3]].any()


def test_embed_lookup_out_of_range():
    with pytest.raises(EmbeddingIndexError):
        ops.embed_lookup(Tensor(np.zeros((4, 2))), [4])


def test_backward_examples():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    backward(ops.sum(x))
    assert np.array_equal(x.grad, np.ones(3))

    y = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    backward(ops.sum(ops.mul(y, y)))
    assert np.array_equal(y.grad, 2 * y.data)


def test_backward_accumulates_into_shared_leaf():
    x = Tensor([2.0], requires_grad=True)
    backward(ops.sum(ops.add(ops.mul(x, x), ops.scale(x, 3.0))))
    assert x.grad[0] == pytest.approx(7.0)


def test_backward_rejects_non_scalar_and_reuse():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(ops.scale(x, 2.0))
    loss = ops.sum(x)
    backward(loss)
    with pytest.raises(ContractError):
        backward(loss)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        out = ops.sum(x)
    assert not out.requires_grad
    with pytest.raises(ContractError):
        backward(out)


def test_adam_zero_gradient_leaves_parameters():
    p = Tensor([1.0, 2.0], requires_grad=True)
    p.grad = np.zeros(2)
    state = adam_step({"p": p}, OptimizerState(), lr=0.1)
    assert state.t == 1
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor([0.5], requires_grad=True)
    p.grad = np.array([1.0])
    adam_step({"p": p}, OptimizerState(beta1=0.9, beta2=0.999, eps=0.0), lr=0.01)
    assert p.data[0] == pytest.approx(0.5 - 0.01, abs=1e-12)


def test_adam_identical_parameters_get_identical_updates():
    a, b = Tensor([0.3, -0.2], requires_grad=True), Tensor([0.3, -0.2], requires_grad=True)
    a.grad = b.grad = np.array([0.7, 0.1])
    adam_step({"a": a, "b": b}, OptimizerState(), lr=0.05)
    assert np.array_equal(a.data, b.data)


def test_adam_rejects_bad_input():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractError):
        adam_step({"p": p}, OptimizerState(), lr=0.0)
    p.grad = np.array([np.nan])
    with pytest.raises(TrainingDivergenceError):
        adam_step({"p": p}, OptimizerState(), lr=0.1)


def test_adam_wraps_module_parameters():
    class Tiny(Module):
        def __init__(self):
            self.layer = Linear(np.random.default_rng(0), 3, 2)

    module = Tiny()
    optimizer = Adam(module)
    before = module.state_dict()
    backward(ops.sum(module.layer(Tensor(np.ones((1, 3))))))
    optimizer.step(1e-2)
    after = module.state_dict()
    assert set(before) == {"layer.weight", "layer.bias"}
    assert optimizer.state.t == 1
    assert not np.array_equal(before["layer.bias"], after["layer.bias"])


def test_clip_grad_norm_scales_to_max_norm():
    a, b = Tensor([0.0], requires_grad=True), Tensor([0.0], requires_grad=True)
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    assert a.grad[0] == pytest.approx(0.6)
    assert b.grad[0] == pytest.approx(0.8)
    assert clip_grad_norm({"a": a, "b": b}, 10.0) == pytest.approx(1.0)
    assert a.grad[0] == pytest.approx(0.6)


def test_noam_lr_values():
    assert noam_lr(10000, 512, 10000) == pytest.approx(4.4194e-4, rel=1e-4)
    assert noam_lr(1, 512, 10000) == pytest.approx(4.4194e-8, rel=1e-4)
    # Both branches meet at the peak
    assert 10000 ** -0.5 == pytest.approx(10000 * 10000 ** -1.5)
    with pytest.raises(ContractError):
        noam_lr(0, 512, 10000)


def test_relative_error_is_tensor_wise():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-6])) == pytest.approx(1e-6)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_check_gradients_flags_a_wrong_vjp():
    from src.infra.numeric.tensor import make_node

    x = Tensor([0.3, -0.4], requires_grad=True)

    def broken_square(t):
        # Forward x^2 but claims the gradient is x
        return make_node(t.data ** 2, (t,), lambda g: (g * t.data,), "broken")

    results = check_gradients(lambda: ops.sum(broken_square(x)), {"x": x})
    assert not results[0].passed


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_matches_finite_differences(name):
    rng = np.random.default_rng(11)
    loss_fn, inputs = OP_CASES[name](rng)
    for result in check_gradients(loss_fn, inputs):
        assert result.passed, f"{name}.{result.name}: {result.max_rel_error:.3e}"


def test_check_ops_keeps_worst_per_input_over_hundred_cases():
    results = check_ops(cases=100, seed=1)
    names = {r.name for r in results}
    assert "matmul.a" in names and "softmax_rows.bias" in names
    assert all(r.passed for r in results)


def test_micro_models_cover_every_parameter():
    model = build_model(micro_config(), micro_vocabulary(), SeedStreams(0))
    results = check_micro_models(cases=3, seed=0, max_coords=2)
    assert {r.name for r in results} == {f"model.{name}" for name, _ in model.named_parameters()}
    assert [r.name for r in results if not r.passed] == []


@pytest.mark.slow
def test_hundred_seeded_micro_models_match_finite_differences():
    results = check_micro_models(cases=100, seed=0, max_coords=3)
    assert [r.name for r in results if not r.passed] == []


def test_run_gradcheck_passes_on_fresh_build():
    report = run_gradcheck(cases=1, seed=0, max_coords=3)
    assert report.passed, [f.name for f in report.failures]
    assert any(r.name.startswith("model.") for r in report.results)
