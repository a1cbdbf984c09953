import logging
from collections.abc import Callable, Sequence
from typing import Any, ClassVar, Self

import numpy as np
from numpy.typing import ArrayLike, NDArray

from facefit.constants import CLAMP_BAND, EPSILON
from facefit.errors import ContractViolation, DomainError

logger = logging.getLogger(__name__)

type Array = NDArray[np.float64]
type Operand = Tensor | float | int | Array


class Function:
    """
    A node of the reverse-mode tape.

    `forward` receives the raw arrays of the inputs and returns the output array, saving whatever the
    vector-Jacobian product needs on `self`. `backward` maps the output gradient to one gradient per input
    (None for inputs that do not require one).
    """

    kind: ClassVar[str] = "function"

    def __init__(self, *inputs: "Tensor") -> None:
        self.inputs: tuple[Tensor, ...] = inputs
        self.kwargs: dict[str, Any] = {}

    def forward(self, *args: Array, **kwargs: Any) -> Array:
        raise NotImplementedError(self.kind)

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        raise NotImplementedError(self.kind)

    def needs(self, index: int) -> bool:
        return self.inputs[index].requires_grad

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*inputs)
        func.kwargs = kwargs
        data = func.forward(*(tensor.data for tensor in inputs), **kwargs)
        return Tensor(data, requires_grad=any(tensor.requires_grad for tensor in inputs), creator=func)


def unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Dense float64 array with a gradient slot.

    Tensors built by operations keep a reference to the `Function` that created them; leaves have no creator.
    Only leaves created with `requires_grad=True` receive gradients from `backward`.
    """

    __array_priority__: ClassVar[float] = 1000.0

    def __init__(self, data: ArrayLike, *, requires_grad: bool = False, creator: Function | None = None) -> None:
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad: bool = requires_grad
        self.creator: Function | None = creator
        self.__grad: Array | None = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    @property
    def grad(self) -> Array:
        if self.__grad is None:
            return np.zeros_like(self.data)
        return self.__grad

    def accumulate(self, grad: Array) -> None:
        if grad.shape != self.data.shape:
            msg = f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}"
            raise ContractViolation(msg)
        self.__grad = grad.copy() if self.__grad is None else self.__grad + grad

    def zero_grad(self) -> None:
        self.__grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            msg = f"item() needs a single-element tensor, got shape {self.data.shape}"
            raise ContractViolation(msg)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Operand) -> "Tensor":
        return elementwise("add", self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return elementwise("add", other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return elementwise("sub", self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return elementwise("sub", other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return elementwise("mul", self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return elementwise("mul", other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return elementwise("div", self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return elementwise("div", other, self)

    def __neg__(self) -> "Tensor":
        return elementwise("mul", self, -1.0)

    def __pow__(self, exponent: Operand) -> "Tensor":
        if isinstance(exponent, Tensor):
            return elementwise("pow", self, exponent)
        return elementwise("pow_scalar", self, float(exponent))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if other.ndim == 1:
            return matvec(self, other)
        return MatMul.apply(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    def sum(self, axes: int | Sequence[int] | None = None, *, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axes, keepdims=keepdims)

    def mean(self, axes: int | Sequence[int] | None = None, *, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axes, keepdims=keepdims)

    def norm(self) -> "Tensor":
        return Norm.apply(self)

    def max0(self) -> "Tensor":
        return elementwise("max0", self)

    def exp(self) -> "Tensor":
        return elementwise("exp", self)

    def log(self) -> "Tensor":
        return elementwise("log", self)

    def abs(self) -> "Tensor":
        return elementwise("abs", self)

    def sqrt(self) -> "Tensor":
        return elementwise("sqrt", self)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes or tuple(reversed(range(self.ndim))))


def as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tape:
    """Topologically ordered gradient-carrying nodes reachable from a root."""

    def __init__(self, nodes: list[Tensor]) -> None:
        self.nodes: list[Tensor] = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_root(cls, root: Tensor) -> Self:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor.creator is None:
                continue
            stack.extend((parent, False) for parent in tensor.creator.inputs if parent.requires_grad and id(parent) not in visited)
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [tensor for tensor in self.nodes if tensor.is_leaf]

    def replay(self) -> list[Array]:
        values: list[Array] = []
        for tensor in self.nodes:
            if tensor.creator is None:
                values.append(tensor.data)
                continue
            func = tensor.creator
            values.append(func.forward(*(parent.data for parent in func.inputs), **func.kwargs))
        return values

    def backward(self, root: Tensor) -> None:
        grads: dict[int, Array] = {id(root): np.ones_like(root.data)}
        for tensor in reversed(self.nodes):
            grad = grads.pop(id(tensor), None)
            if grad is None:
                continue
            if tensor.creator is None:
                tensor.accumulate(grad)
                continue
            for parent, parent_grad in zip(tensor.creator.inputs, tensor.creator.backward(grad), strict=True):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def backward(root: Tensor) -> None:
    if root.size != 1:
        msg = f"backward needs a scalar root, got shape {root.shape}"
        raise ContractViolation(msg)
    if not root.requires_grad:
        return
    Tape.from_root(root).backward(root)


# Elementwise


class Binary(Function):
    def check(self, a: Array, b: Array) -> None:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as error:
            msg = f"{self.kind}: shapes {a.shape} and {b.shape} do not broadcast"
            raise ContractViolation(msg) from error

    def reduce_grads(self, grad_a: Array | None, grad_b: Array | None) -> tuple[Array | None, Array | None]:
        a, b = self.inputs
        return (
            unbroadcast(grad_a, a.shape) if grad_a is not None and self.needs(0) else None,
            unbroadcast(grad_b, b.shape) if grad_b is not None and self.needs(1) else None,
        )


class Add(Binary):
    kind = "add"

    def forward(self, a: Array, b: Array) -> Array:
        self.check(a, b)
        return a + b

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return self.reduce_grads(grad, grad)


class Sub(Binary):
    kind = "sub"

    def forward(self, a: Array, b: Array) -> Array:
        self.check(a, b)
        return a - b

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return self.reduce_grads(grad, -grad)


class Mul(Binary):
    kind = "mul"

    def forward(self, a: Array, b: Array) -> Array:
        self.check(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return self.reduce_grads(grad * self.b, grad * self.a)


class Div(Binary):
    kind = "div"

    def forward(self, a: Array, b: Array) -> Array:
        self.check(a, b)
        if np.any(b == 0.0):
            msg = "div: division by zero"
            raise DomainError(msg)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return self.reduce_grads(grad / self.b, -grad * self.a / (self.b * self.b))


class Pow(Binary):
    kind = "pow"

    def forward(self, a: Array, b: Array) -> Array:
        self.check(a, b)
        if np.any(a < 0.0):
            msg = "pow: negative base with a tensor exponent"
            raise DomainError(msg)
        self.a, self.b = a, b
        self.out = np.power(a, b)
        return self.out

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        positive = self.a > 0.0
        safe = np.where(positive, self.a, 1.0)
        grad_a = np.where(positive, self.b * np.power(safe, self.b - 1.0), 0.0)
        grad_b = np.where(positive, self.out * np.log(safe), 0.0)
        return self.reduce_grads(grad * grad_a, grad * grad_b)


class Unary(Function):
    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (grad * self.derivative(),)

    def derivative(self) -> Array:
        raise NotImplementedError(self.kind)


class Max0(Unary):
    kind = "max0"

    def forward(self, a: Array) -> Array:
        self.a = a
        return np.maximum(a, 0.0)

    def derivative(self) -> Array:
        # subgradient 0 at exactly 0
        return (self.a > 0.0).astype(np.float64)


class PowScalar(Unary):
    kind = "pow_scalar"

    def forward(self, a: Array, exponent: float) -> Array:
        if not float(exponent).is_integer() and np.any(a < 0.0):
            msg = f"pow_scalar: negative base with exponent {exponent}"
            raise DomainError(msg)
        self.a, self.exponent = a, exponent
        return np.power(a, exponent)

    def derivative(self) -> Array:
        if self.exponent == 0.0:
            return np.zeros_like(self.a)
        return self.exponent * np.power(self.a, self.exponent - 1.0)


class Exp(Unary):
    kind = "exp"

    def forward(self, a: Array) -> Array:
        self.out = np.exp(a)
        return self.out

    def derivative(self) -> Array:
        return self.out


class Log(Unary):
    kind = "log"

    def forward(self, a: Array) -> Array:
        if np.any(a <= 0.0):
            msg = "log: non-positive input"
            raise DomainError(msg)
        self.a = a
        return np.log(a)

    def derivative(self) -> Array:
        return 1.0 / self.a


class Abs(Unary):
    kind = "abs"

    def forward(self, a: Array) -> Array:
        self.a = a
        return np.abs(a)

    def derivative(self) -> Array:
        return np.sign(self.a)


class Sqrt(Unary):
    kind = "sqrt"

    def forward(self, a: Array) -> Array:
        if np.any(a < 0.0):
            msg = "sqrt: negative input"
            raise DomainError(msg)
        self.out = np.sqrt(a)
        return self.out

    def derivative(self) -> Array:
        positive = self.out > 0.0
        return np.where(positive, 0.5 / np.where(positive, self.out, 1.0), 0.0)


class Sin(Unary):
    kind = "sin"

    def forward(self, a: Array) -> Array:
        self.a = a
        return np.sin(a)

    def derivative(self) -> Array:
        return np.cos(self.a)


class Cos(Unary):
    kind = "cos"

    def forward(self, a: Array) -> Array:
        self.a = a
        return np.cos(a)

    def derivative(self) -> Array:
        return -np.sin(self.a)


class Softplus(Unary):
    kind = "softplus"

    def forward(self, a: Array) -> Array:
        self.a = a
        return np.logaddexp(0.0, a)

    def derivative(self) -> Array:
        return np.exp(-np.logaddexp(0.0, -self.a))


class SmoothClamp(Unary):
    """Clamp to [low, high] with quadratic C1 blends of half-width `band` around both limits."""

    kind = "smooth_clamp"

    def forward(self, a: Array, low: float = 0.0, high: float = 1.0, band: float = CLAMP_BAND) -> Array:
        self.a, self.low, self.high, self.band = a, low, high, band
        lower = low + (a - low + band) ** 2 / (4.0 * band)
        upper = high - (high + band - a) ** 2 / (4.0 * band)
        out = np.where(a <= low - band, low, np.where(a < low + band, lower, a))
        return np.where(a >= high + band, high, np.where(a > high - band, upper, out))

    def derivative(self) -> Array:
        a, low, high, band = self.a, self.low, self.high, self.band
        lower = (a - low + band) / (2.0 * band)
        upper = (high + band - a) / (2.0 * band)
        out = np.where(a <= low - band, 0.0, np.where(a < low + band, lower, 1.0))
        return np.where(a >= high + band, 0.0, np.where(a > high - band, upper, out))


ELEMENTWISE: dict[str, type[Function]] = {
    cls.kind: cls for cls in (Add, Sub, Mul, Div, Pow, Max0, PowScalar, Exp, Log, Abs, Sqrt, Sin, Cos, Softplus)
}


def elementwise(kind: str, a: Operand, b: Operand | None = None) -> Tensor:
    if kind not in ELEMENTWISE:
        msg = f"unknown elementwise op {kind!r}"
        raise ContractViolation(msg)
    cls = ELEMENTWISE[kind]
    if kind == "pow_scalar":
        return cls.apply(as_tensor(a), exponent=float(b))  # type: ignore[arg-type]
    if issubclass(cls, Binary):
        if b is None:
            msg = f"{kind} needs two operands"
            raise ContractViolation(msg)
        return cls.apply(as_tensor(a), as_tensor(b))
    return cls.apply(as_tensor(a))


def smooth_clamp(a: Tensor, low: float = 0.0, high: float = 1.0, band: float = CLAMP_BAND) -> Tensor:
    return SmoothClamp.apply(a, low=low, high=high, band=band)


def softplus(a: Tensor) -> Tensor:
    return elementwise("softplus", a)


def sin(a: Tensor) -> Tensor:
    return elementwise("sin", a)


def cos(a: Tensor) -> Tensor:
    return elementwise("cos", a)


# Reductions


def _axes(ndim: int, axes: int | Sequence[int] | None) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    requested = (axes,) if isinstance(axes, int) else tuple(axes)
    normalized: list[int] = []
    for axis in requested:
        if not -ndim <= axis < ndim:
            msg = f"axis {axis} is invalid for a tensor with {ndim} dimensions"
            raise ContractViolation(msg)
        normalized.append(axis % ndim)
    return tuple(sorted(set(normalized)))


class Sum(Function):
    kind = "sum"

    def forward(self, a: Array, axes: tuple[int, ...], keepdims: bool = False) -> Array:
        self.shape, self.axes, self.keepdims = a.shape, axes, keepdims
        return np.sum(a, axis=axes, keepdims=keepdims)

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Sum):
    kind = "mean"

    def forward(self, a: Array, axes: tuple[int, ...], keepdims: bool = False) -> Array:
        self.count = int(np.prod([a.shape[axis] for axis in axes])) if axes else 1
        return super().forward(a, axes, keepdims) / self.count

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (super().backward(grad)[0] / self.count,)  # type: ignore[operator]


class Norm(Function):
    kind = "norm"

    def forward(self, a: Array) -> Array:
        self.a = a
        self.value = float(np.sqrt(np.sum(a * a)))
        return np.asarray(self.value)

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        if self.value == 0.0:
            return (np.zeros_like(self.a),)
        return (grad * self.a / self.value,)


def reduce(kind: str, a: Tensor, axes: int | Sequence[int] | None = None, *, keepdims: bool = False) -> Tensor:
    match kind:
        case "sum":
            return Sum.apply(a, axes=_axes(a.ndim, axes), keepdims=keepdims)
        case "mean":
            return Mean.apply(a, axes=_axes(a.ndim, axes), keepdims=keepdims)
        case "norm":
            return Norm.apply(a)
        case _:
            msg = f"unknown reduction {kind!r}"
            raise ContractViolation(msg)


# Shape plumbing


class Reshape(Function):
    kind = "reshape"

    def forward(self, a: Array, shape: tuple[int, ...]) -> Array:
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as error:
            msg = f"reshape: cannot view {a.shape} as {shape}"
            raise ContractViolation(msg) from error

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (grad.reshape(self.shape),)


class Transpose(Function):
    kind = "transpose"

    def forward(self, a: Array, axes: tuple[int, ...]) -> Array:
        self.inverse = tuple(np.argsort(axes))
        return np.transpose(a, axes)

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (np.transpose(grad, self.inverse),)


def _basic(index: Any) -> bool:
    """True for indices made only of ints, slices, Ellipsis and None, which never repeat an element."""
    parts = index if isinstance(index, tuple) else (index,)
    return all(part is None or part is Ellipsis or isinstance(part, (int, np.integer, slice)) for part in parts)


class GetItem(Function):
    kind = "getitem"

    def forward(self, a: Array, index: Any) -> Array:
        self.shape, self.index = a.shape, index
        try:
            return np.array(a[index], dtype=np.float64)
        except IndexError as error:
            msg = f"getitem: {error}"
            raise ContractViolation(msg) from error

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        out = np.zeros(self.shape)
        if _basic(self.index):
            out[self.index] = grad
        else:
            np.add.at(out, self.index, grad)
        return (out,)


class ScatterAdd(Function):
    kind = "scatter_add"

    def forward(self, a: Array, index: NDArray[np.intp], size: int) -> Array:
        self.index = index
        out = np.zeros((size, *a.shape[1:]))
        np.add.at(out, index, a)
        return out

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (grad[self.index],)


class Concat(Function):
    kind = "concat"

    def forward(self, *arrays: Array, axis: int = 0) -> Array:
        self.axis = axis
        self.splits = np.cumsum([array.shape[axis] for array in arrays])[:-1]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as error:
            msg = f"concat: {error}"
            raise ContractViolation(msg) from error

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


def take(a: Tensor, index: ArrayLike) -> Tensor:
    return GetItem.apply(a, index=np.asarray(index, dtype=np.intp))


def scatter_add(a: Tensor, index: ArrayLike, size: int) -> Tensor:
    return ScatterAdd.apply(a, index=np.asarray(index, dtype=np.intp), size=size)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [tensor.reshape(*tensor.shape[:axis], 1, *tensor.shape[axis:]) for tensor in tensors]
    return concat(expanded, axis=axis)


# Linear algebra


class MatVec(Function):
    kind = "matvec"

    def forward(self, a: Array, x: Array) -> Array:
        if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
            msg = f"matvec: cannot multiply {a.shape} by {x.shape}"
            raise ContractViolation(msg)
        self.a, self.x = a, x
        return a @ x

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (np.outer(grad, self.x) if self.needs(0) else None, self.a.T @ grad if self.needs(1) else None)


class MatMul(Function):
    kind = "matmul"

    def forward(self, a: Array, b: Array) -> Array:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            msg = f"matmul: cannot multiply {a.shape} by {b.shape}"
            raise ContractViolation(msg)
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (grad @ self.b.T if self.needs(0) else None, self.a.T @ grad if self.needs(1) else None)


class Normalize3(Function):
    kind = "normalize3"

    def forward(self, v: Array) -> Array:
        if v.shape[-1] != 3:
            msg = f"normalize3: trailing dimension must be 3, got {v.shape}"
            raise ContractViolation(msg)
        self.norms = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
        if np.any(self.norms < EPSILON):
            msg = "normalize3: vector norm below 1e-12"
            raise DomainError(msg)
        self.out = v / self.norms
        return self.out

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        radial = np.sum(self.out * grad, axis=-1, keepdims=True)
        return ((grad - self.out * radial) / self.norms,)


class Cross(Function):
    kind = "cross"

    def forward(self, a: Array, b: Array) -> Array:
        if a.shape[-1] != 3 or b.shape[-1] != 3:
            msg = f"cross: trailing dimension must be 3, got {a.shape} and {b.shape}"
            raise ContractViolation(msg)
        self.a, self.b = np.broadcast_arrays(a, b)
        return np.cross(a, b)

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        a, b = self.inputs
        return (
            unbroadcast(np.cross(self.b, grad), a.shape) if self.needs(0) else None,
            unbroadcast(np.cross(grad, self.a), b.shape) if self.needs(1) else None,
        )


def skew(v: Array) -> Array:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotation_from_vector(r: Array) -> Array:
    theta = float(np.linalg.norm(r))
    if theta < EPSILON:
        return np.eye(3) + skew(r)
    k = skew(r / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


class Rodrigues(Function):
    """Exponential map from a rotation vector to a 3x3 rotation matrix."""

    kind = "rodrigues"

    def forward(self, r: Array) -> Array:
        if r.shape != (3,):
            msg = f"rodrigues: expected a 3-vector, got {r.shape}"
            raise ContractViolation(msg)
        self.r = r
        self.out = rotation_from_vector(r)
        return self.out

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        theta_sq = float(self.r @ self.r)
        identity = np.eye(3)
        out = np.zeros(3)
        for i in range(3):
            if theta_sq < 1e-16:
                derivative = skew(identity[i])
            else:
                column = np.cross(self.r, (identity - self.out) @ identity[i])
                derivative = (self.r[i] * skew(self.r) + skew(column)) @ self.out / theta_sq
            out[i] = np.sum(grad * derivative)
        return (out,)


def matvec(a: Tensor, x: Tensor) -> Tensor:
    return MatVec.apply(a, x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def normalize3(v: Tensor) -> Tensor:
    return Normalize3.apply(v)


def cross(a: Tensor, b: Tensor) -> Tensor:
    return Cross.apply(a, b)


def rodrigues(r: Tensor) -> Tensor:
    return Rodrigues.apply(r)


def dot3(a: Tensor, b: Operand) -> Tensor:
    return (a * b).sum(-1)


# Images and textures


class BilinearSample(Function):
    kind = "bilinear_sample"

    def forward(self, texture: Array, uv: Array) -> Array:
        if texture.ndim != 3 or uv.ndim != 2 or uv.shape[1] != 2:
            msg = f"bilinear_sample: expected CxHxW texture and Px2 uv, got {texture.shape} and {uv.shape}"
            raise ContractViolation(msg)
        _, height, width = texture.shape
        self.texture = np.transpose(texture, (1, 2, 0))
        x = uv[:, 0] * width - 0.5
        y = uv[:, 1] * height - 0.5
        xc = np.clip(x, 0.0, width - 1.0)
        yc = np.clip(y, 0.0, height - 1.0)
        self.inside_x = (x == xc).astype(np.float64) * width
        self.inside_y = (y == yc).astype(np.float64) * height
        self.x0 = np.minimum(np.floor(xc).astype(np.intp), max(width - 2, 0))
        self.y0 = np.minimum(np.floor(yc).astype(np.intp), max(height - 2, 0))
        self.x1 = np.minimum(self.x0 + 1, width - 1)
        self.y1 = np.minimum(self.y0 + 1, height - 1)
        self.fx = (xc - self.x0)[:, None]
        self.fy = (yc - self.y0)[:, None]
        return (
            self.texture[self.y0, self.x0] * (1.0 - self.fx) * (1.0 - self.fy)
            + self.texture[self.y0, self.x1] * self.fx * (1.0 - self.fy)
            + self.texture[self.y1, self.x0] * (1.0 - self.fx) * self.fy
            + self.texture[self.y1, self.x1] * self.fx * self.fy
        )

    def weights(self) -> tuple[Array, Array, Array, Array]:
        fx, fy = self.fx[:, 0], self.fy[:, 0]
        return (1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        grad_texture = None
        if self.needs(0):
            accumulated = np.zeros_like(self.texture)
            for (rows, cols), weight in zip(
                ((self.y0, self.x0), (self.y0, self.x1), (self.y1, self.x0), (self.y1, self.x1)), self.weights(), strict=True
            ):
                np.add.at(accumulated, (rows, cols), grad * weight[:, None])
            grad_texture = np.transpose(accumulated, (2, 0, 1))
        grad_uv = None
        if self.needs(1):
            t00, t01 = self.texture[self.y0, self.x0], self.texture[self.y0, self.x1]
            t10, t11 = self.texture[self.y1, self.x0], self.texture[self.y1, self.x1]
            d_x = (1.0 - self.fy) * (t01 - t00) + self.fy * (t11 - t10)
            d_y = (1.0 - self.fx) * (t10 - t00) + self.fx * (t11 - t01)
            grad_uv = np.stack([np.sum(grad * d_x, axis=1) * self.inside_x, np.sum(grad * d_y, axis=1) * self.inside_y], axis=1)
        return grad_texture, grad_uv


def bilinear_sample(texture: Tensor, uv: Tensor) -> Tensor:
    return BilinearSample.apply(texture, uv)


class Conv2d(Function):
    """Same-padded cross-correlation of a CxHxW image with a frozen OxCxKxK filter array."""

    kind = "conv2d"

    def forward(self, image: Array, filters: Array) -> Array:
        if image.ndim != 3 or filters.ndim != 4 or filters.shape[1] != image.shape[0] or filters.shape[2] % 2 == 0:
            msg = f"conv2d: image {image.shape} does not fit filters {filters.shape}"
            raise ContractViolation(msg)
        self.filters = filters
        self.pad = filters.shape[2] // 2
        return self.correlate(image, filters)

    def correlate(self, image: Array, filters: Array) -> Array:
        size = filters.shape[2]
        padded = np.pad(image, ((0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(1, 2))
        return np.einsum("chwij,ocij->ohw", windows, filters, optimize=True)

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        flipped = np.ascontiguousarray(np.transpose(self.filters[:, :, ::-1, ::-1], (1, 0, 2, 3)))
        return (self.correlate(grad, flipped),)


class MaxPool2(Function):
    kind = "max_pool2"

    def forward(self, image: Array) -> Array:
        channels, height, width = image.shape
        self.shape = image.shape
        h, w = height // 2, width // 2
        blocks = image[:, : 2 * h, : 2 * w].reshape(channels, h, 2, w, 2).transpose(0, 1, 3, 2, 4).reshape(channels, h, w, 4)
        self.argmax = np.argmax(blocks, axis=-1)
        return np.take_along_axis(blocks, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        channels, height, width = self.shape
        h, w = grad.shape[1:]
        blocks = np.zeros((channels, h, w, 4))
        np.put_along_axis(blocks, self.argmax[..., None], grad[..., None], axis=-1)
        out = np.zeros(self.shape)
        out[:, : 2 * h, : 2 * w] = blocks.reshape(channels, h, w, 2, 2).transpose(0, 1, 3, 2, 4).reshape(channels, 2 * h, 2 * w)
        return (out,)


class Resample(Function):
    """Separable linear resampling: out[c] = rows @ image[c] @ cols.T."""

    kind = "resample"

    def forward(self, image: Array, rows: Array, cols: Array) -> Array:
        self.rows, self.cols = rows, cols
        return np.einsum("ij,cjk,lk->cil", rows, image, cols, optimize=True)

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (np.einsum("ij,cil,lk->cjk", self.rows, grad, self.cols, optimize=True),)


def conv2d(image: Tensor, filters: Array) -> Tensor:
    return Conv2d.apply(image, filters=filters)


def max_pool2(image: Tensor) -> Tensor:
    return MaxPool2.apply(image)


def resample(image: Tensor, rows: Array, cols: Array) -> Tensor:
    return Resample.apply(image, rows=rows, cols=cols)


def numerical_gradient(func: Callable[[Array], float], x: Array, step: float = 1e-6) -> Array:
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = func(x)
        flat[i] = original - step
        lower = func(x)
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * step)
    return grad
