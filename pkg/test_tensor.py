import numpy as np
import pytest

from facefit.errors import ContractViolation, DomainError
from facefit.gradcheck import check_gradients, run_gradcheck
from facefit.tensor import (
    Function,
    Tape,
    Tensor,
    backward,
    bilinear_sample,
    elementwise,
    matvec,
    normalize3,
    numerical_gradient,
    reduce,
    rodrigues,
    smooth_clamp,
)


class TestElementwise:
    def test_add_seeds_both_operands(self) -> None:
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        out = a + b
        out.sum().backward()
        np.testing.assert_array_equal(out.data, [4.0, 6.0])
        np.testing.assert_array_equal(a.grad, [1.0, 1.0])
        np.testing.assert_array_equal(b.grad, [1.0, 1.0])

    def test_max0_subgradient_is_zero_at_zero(self) -> None:
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        out = x.max0()
        out.sum().backward()
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_pow_scalar(self) -> None:
        assert (Tensor(0.5) ** 20).item() == pytest.approx(9.5367e-7, rel=1e-4)

    def test_square_gradient(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_broadcast_gradient_is_reduced(self) -> None:
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        (a * b).sum().backward()
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_shape_mismatch(self) -> None:
        with pytest.raises(ContractViolation):
            _ = Tensor(np.zeros(2)) + Tensor(np.zeros(3))

    def test_unknown_kind(self) -> None:
        with pytest.raises(ContractViolation):
            elementwise("tanh", Tensor(1.0))

    @pytest.mark.parametrize(
        ("kind", "values"),
        [("log", [0.0, 1.0]), ("sqrt", [-1.0, 4.0])],
    )
    def test_domain_errors(self, kind: str, values: list[float]) -> None:
        with pytest.raises(DomainError, match=kind):
            elementwise(kind, Tensor(values))

    def test_division_by_zero(self) -> None:
        with pytest.raises(DomainError, match="div"):
            _ = Tensor([1.0, 2.0]) / Tensor([1.0, 0.0])

    def test_smooth_clamp_limits(self) -> None:
        out = smooth_clamp(Tensor([-1.0, 0.5, 2.0]), 0.0, 1.0, 0.1)
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])

    def test_smooth_clamp_is_continuous_at_band_edges(self) -> None:
        band = 0.1
        edges = np.array([-band, band, 1.0 - band, 1.0 + band])
        inside = smooth_clamp(Tensor(edges - 1e-9), 0.0, 1.0, band).data
        outside = smooth_clamp(Tensor(edges + 1e-9), 0.0, 1.0, band).data
        np.testing.assert_allclose(inside, outside, atol=1e-8)


class TestReductions:
    def test_sum(self) -> None:
        assert Tensor([1.0, 2.0, 3.0]).sum().item() == 6.0

    def test_mean_gradient(self) -> None:
        x = Tensor(np.zeros(4), requires_grad=True)
        x.mean().backward()
        np.testing.assert_array_equal(x.grad, np.full(4, 0.25))

    def test_axes_and_keepdims(self) -> None:
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert x.sum(1).shape == (2,)
        assert x.mean(0, keepdims=True).shape == (1, 3)

    def test_invalid_axis(self) -> None:
        with pytest.raises(ContractViolation):
            Tensor(np.zeros((2, 3))).sum(2)

    def test_norm_of_zero_has_zero_gradient(self) -> None:
        x = Tensor(np.zeros(3), requires_grad=True)
        reduce("norm", x).backward()
        np.testing.assert_array_equal(x.grad, np.zeros(3))


class TestLinearAlgebra:
    def test_matvec_identity(self) -> None:
        x = Tensor([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(matvec(Tensor(np.eye(3)), x).data, x.data)

    def test_matvec_diagonal(self) -> None:
        out = matvec(Tensor(np.diag([2.0, 3.0])), Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(out.data, [2.0, 3.0])

    def test_matvec_mismatch(self) -> None:
        with pytest.raises(ContractViolation):
            matvec(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))

    def test_matvec_gradients(self, rng: np.random.Generator) -> None:
        error = check_gradients(lambda t: matvec(t[0], t[1]), [rng.standard_normal((5, 4)), rng.standard_normal(4)])
        assert error < 1e-6

    def test_normalize3(self) -> None:
        out = normalize3(Tensor([[3.0, 0.0, 0.0], [1.0, 1.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1.0, 0.0, 0.0], [0.70711, 0.70711, 0.0]], atol=1e-5)

    def test_normalize3_gradients(self, rng: np.random.Generator) -> None:
        assert check_gradients(lambda t: normalize3(t[0]), [rng.standard_normal((6, 3))]) < 1e-6

    def test_normalize3_rejects_zero_vectors(self) -> None:
        with pytest.raises(DomainError):
            normalize3(Tensor([[1e-13, 0.0, 0.0]]))

    def test_rodrigues_is_a_rotation(self, rng: np.random.Generator) -> None:
        matrix = rodrigues(Tensor(rng.standard_normal(3))).data
        np.testing.assert_allclose(matrix @ matrix.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(matrix) == pytest.approx(1.0)

    def test_rodrigues_quarter_turn(self) -> None:
        matrix = rodrigues(Tensor([0.0, 0.0, np.pi / 2.0])).data
        np.testing.assert_allclose(matrix @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)


class TestBilinearSample:
    def test_texel_centres_return_texels(self) -> None:
        texture = np.arange(16.0).reshape(1, 4, 4)
        cols, rows = np.meshgrid(np.arange(4), np.arange(4))
        uv = np.stack([(cols.reshape(-1) + 0.5) / 4.0, (rows.reshape(-1) + 0.5) / 4.0], axis=1)
        out = bilinear_sample(Tensor(texture), Tensor(uv))
        np.testing.assert_allclose(out.data[:, 0], texture[0, rows.reshape(-1), cols.reshape(-1)])

    def test_centre_of_checkerboard_is_the_mean(self) -> None:
        texture = np.array([[[0.0, 1.0], [1.0, 0.0]]])
        out = bilinear_sample(Tensor(texture), Tensor([[0.5, 0.5]]))
        assert out.data[0, 0] == pytest.approx(0.5)

    def test_weights_sum_to_one(self, rng: np.random.Generator) -> None:
        for uv in rng.uniform(0.0, 1.0, (5, 2)):
            texture = Tensor(rng.standard_normal((1, 6, 6)), requires_grad=True)
            bilinear_sample(texture, Tensor(uv[None])).sum().backward()
            assert texture.grad.sum() == pytest.approx(1.0, abs=1e-12)

    def test_shape_contract(self) -> None:
        with pytest.raises(ContractViolation):
            bilinear_sample(Tensor(np.zeros((4, 4))), Tensor(np.zeros((1, 2))))


class TestBackward:
    def test_non_scalar_root(self) -> None:
        with pytest.raises(ContractViolation):
            backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_constant_graph_writes_no_gradient(self) -> None:
        x = Tensor([1.0, 2.0])
        backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, np.zeros(2))

    def test_repeated_backward_accumulates(self) -> None:
        x = Tensor([1.0, -3.0], requires_grad=True)
        y = (x * x).sum()
        backward(y)
        once = x.grad.copy()
        backward(y)
        np.testing.assert_array_equal(x.grad, 2.0 * once)

    def test_zero_grad(self) -> None:
        x = Tensor([1.0], requires_grad=True)
        (x * 3.0).sum().backward()
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_shared_subexpression(self) -> None:
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_item_of_non_scalar_is_rejected(self) -> None:
        with pytest.raises(ContractViolation, match="single-element"):
            Tensor([1.0, 2.0]).item()
        assert Tensor([[4.0]]).item() == 4.0


class TestTape:
    def test_topological_order(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ((x * 2.0).exp() + x).sum()
        tape = Tape.from_root(y)
        position = {id(tensor): index for index, tensor in enumerate(tape.nodes)}
        for tensor in tape.nodes:
            if tensor.creator is None:
                continue
            for parent in tensor.creator.inputs:
                if parent.requires_grad:
                    assert position[id(parent)] < position[id(tensor)]
        assert tape.nodes[-1] is y
        assert tape.leaves() == [x]

    def test_replay_is_deterministic(self) -> None:
        x = Tensor([0.3, -0.7, 1.1], requires_grad=True)
        y = (normalize3(x.reshape(1, 3)).exp() * x).sum()
        tape = Tape.from_root(y)
        first, second = tape.replay(), tape.replay()
        for node, a, b in zip(tape.nodes, first, second, strict=True):
            np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(a, node.data)


class TestGradients:
    def test_ops_scope(self) -> None:
        results = run_gradcheck("ops")
        assert results
        assert all(result.passed for result in results), [(result.name, result.error) for result in results if not result.passed]

    def test_detects_a_wrong_backward(self, rng: np.random.Generator) -> None:
        class Doubled(Function):
            kind = "doubled"

            def forward(self, a: np.ndarray) -> np.ndarray:
                return 2.0 * a

            def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
                return (grad,)

        assert check_gradients(lambda t: Doubled.apply(t[0]), [rng.standard_normal(4)]) > 0.1

    def test_numerical_gradient(self) -> None:
        grad = numerical_gradient(lambda x: float(np.sum(x**3)), np.array([1.0, 2.0]))
        np.testing.assert_allclose(grad, [3.0, 12.0], rtol=1e-6)
