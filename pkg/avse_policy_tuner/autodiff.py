"""
A minimal reverse-mode differentiation tape over dense numpy arrays.

Every operation records its parents and a closure that pushes the output gradient back to
them. `DiffTensor.backward()` replays the recorded graph in reverse topological order, so
each node's closure runs exactly once, after all of its consumers have contributed.

Nothing is recorded when no input requires a gradient, so frozen models run as plain numpy.
"""

from __future__ import annotations

from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from avse_policy_tuner.logging.tuner_error import InvalidArgumentError

ArrayLike = Union[np.ndarray, float, int]
Operand = Union["DiffTensor", ArrayLike]


class DiffTensor:
    """
    A dense array paired with a gradient accumulator of the same shape.

    :param values: The array (stored as float64).
    :param requires_grad: Whether gradients should be accumulated into this tensor.
    :param name: Optional label, used for parameters.
    """

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        values: ArrayLike,
        requires_grad: bool = False,
        name: str = "",
        parents: Tuple[DiffTensor, ...] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
    ) -> None:
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"DiffTensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def detach(self) -> DiffTensor:
        """A constant copy that no gradient flows through."""
        return DiffTensor(self.values.copy())

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """
        Accumulate d(self)/d(leaf) into every reachable tensor that requires a gradient.

        :param seed: Upstream gradient; defaults to 1 and is then only valid for scalars.
        """
        if seed is None:
            if self.size != 1:
                raise InvalidArgumentError(
                    f"backward() without a seed needs a scalar, got shape {self.shape}."
                )
            seed = np.ones_like(self.values)

        order: List[DiffTensor] = []
        visited = set()
        stack: List[Tuple[DiffTensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = self.grad + np.broadcast_to(seed, self.shape)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # Operator sugar, so losses read like the formulas they implement.
    def __add__(self, other: Operand) -> DiffTensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> DiffTensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> DiffTensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> DiffTensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> DiffTensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> DiffTensor:
        return mul(other, self)

    def __neg__(self) -> DiffTensor:
        return mul(self, -1.0)

    def __truediv__(self, other: float) -> DiffTensor:
        return mul(self, 1.0 / other)

    def __pow__(self, exponent: float) -> DiffTensor:
        return power(self, exponent)


def lift(x: Operand) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def parameter(values: ArrayLike, name: str = "") -> DiffTensor:
    """A leaf tensor that accumulates gradients."""
    return DiffTensor(values, requires_grad=True, name=name)


def _accumulate(tensor: DiffTensor, grad: np.ndarray) -> None:
    if tensor.requires_grad:
        tensor.grad = tensor.grad + grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(
    values: np.ndarray, parents: Sequence[DiffTensor], backward: Callable[[np.ndarray], None]
) -> DiffTensor:
    if any(p.requires_grad for p in parents):
        return DiffTensor(values, requires_grad=True, parents=tuple(parents), backward=backward)
    return DiffTensor(values)


def add(a: Operand, b: Operand) -> DiffTensor:
    a, b = lift(a), lift(b)

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.values + b.values, (a, b), _backward)


def sub(a: Operand, b: Operand) -> DiffTensor:
    a, b = lift(a), lift(b)

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.values - b.values, (a, b), _backward)


def mul(a: Operand, b: Operand) -> DiffTensor:
    a, b = lift(a), lift(b)

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _node(a.values * b.values, (a, b), _backward)


def power(x: DiffTensor, exponent: float) -> DiffTensor:
    def _backward(g: np.ndarray) -> None:
        _accumulate(x, g * exponent * x.values ** (exponent - 1))

    return _node(x.values**exponent, (x,), _backward)


def with_local_grad(x: DiffTensor, values: ArrayLike, local_grad: np.ndarray) -> DiffTensor:
    """
    Wrap a value computed outside the tape whose derivative with respect to `x` is known.

    For an elementwise map `local_grad` is the elementwise derivative; for a scalar
    reduction it is the full gradient with respect to `x`.
    """

    def _backward(g: np.ndarray) -> None:
        _accumulate(x, g * local_grad)

    return _node(np.asarray(values, dtype=np.float64), (x,), _backward)


def exp(x: DiffTensor) -> DiffTensor:
    out = np.exp(x.values)
    return with_local_grad(x, out, out)


def relu(x: DiffTensor) -> DiffTensor:
    return with_local_grad(x, np.maximum(x.values, 0.0), (x.values > 0).astype(np.float64))


def sigmoid(x: DiffTensor) -> DiffTensor:
    out = expit(x.values)
    return with_local_grad(x, out, out * (1.0 - out))


def clip(x: DiffTensor, low: float, high: float) -> DiffTensor:
    """Clamp to [low, high]; the gradient is zero wherever the clamp is active."""
    inside = ((x.values > low) & (x.values < high)).astype(np.float64)
    return with_local_grad(x, np.clip(x.values, low, high), inside)


def minimum(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    """Elementwise minimum; ties send the gradient to `a`."""
    a, b = lift(a), lift(b)
    pick_a = a.values <= b.values

    def _backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        _accumulate(b, _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return _node(np.where(pick_a, a.values, b.values), (a, b), _backward)


def prelu(x: DiffTensor, alpha: DiffTensor) -> DiffTensor:
    """x for x > 0, alpha * x otherwise, with one learnable slope per layer."""
    positive = x.values > 0
    slope = np.where(positive, 1.0, alpha.values)

    def _backward(g: np.ndarray) -> None:
        _accumulate(x, g * slope)
        _accumulate(alpha, np.reshape(np.sum(np.where(positive, 0.0, g * x.values)), alpha.shape))

    return _node(x.values * slope, (x, alpha), _backward)


def sum_all(x: DiffTensor) -> DiffTensor:
    def _backward(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _node(np.sum(x.values), (x,), _backward)


def mean_all(x: DiffTensor) -> DiffTensor:
    return mul(sum_all(x), 1.0 / max(x.size, 1))


def concat(tensors: Sequence[DiffTensor], axis: int = 0) -> DiffTensor:
    tensors = [lift(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g: np.ndarray) -> None:
        for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            _accumulate(t, np.take(g, np.arange(start, stop), axis=axis))

    return _node(np.concatenate([t.values for t in tensors], axis=axis), tensors, _backward)


def matmul_const(x: DiffTensor, matrix: np.ndarray) -> DiffTensor:
    """x @ matrix for a constant right operand (used for time interpolation)."""

    def _backward(g: np.ndarray) -> None:
        _accumulate(x, g @ matrix.T)

    return _node(x.values @ matrix, (x,), _backward)


def pad_time(x: DiffTensor, left: int, right: int) -> DiffTensor:
    """Zero-pad the last axis."""
    width = [(0, 0)] * (x.values.ndim - 1) + [(left, right)]
    length = x.shape[-1]

    def _backward(g: np.ndarray) -> None:
        _accumulate(x, g[..., left : left + length])

    return _node(np.pad(x.values, width), (x,), _backward)


def fit_length(x: DiffTensor, length: int) -> DiffTensor:
    """Trim or zero-pad the last axis to exactly `length`."""
    current = x.shape[-1]
    if current >= length:

        def _backward(g: np.ndarray) -> None:
            grad = np.zeros_like(x.values)
            grad[..., :length] = g
            _accumulate(x, grad)

        return _node(x.values[..., :length], (x,), _backward)
    return pad_time(x, 0, length - current)


def conv_output_length(length: int, kernel: int, stride: int = 1, dilation: int = 1) -> int:
    return (length - dilation * (kernel - 1) - 1) // stride + 1


def _tap(j: int, out_len: int, stride: int, dilation: int) -> slice:
    start = j * dilation
    return slice(start, start + stride * (out_len - 1) + 1, stride)


def conv1d(
    x: DiffTensor,
    weight: DiffTensor,
    bias: Optional[DiffTensor] = None,
    stride: int = 1,
    dilation: int = 1,
) -> DiffTensor:
    """
    Valid 1-D convolution (cross-correlation).

    :param x: Input, shape (C_in, T).
    :param weight: Kernel, shape (C_out, C_in, k).
    :param bias: Optional bias, shape (C_out,).
    :return: Output, shape (C_out, floor((T - dilation*(k-1) - 1) / stride) + 1).
    """
    c_out, c_in, k = weight.shape
    if x.shape[0] != c_in:
        raise InvalidArgumentError(f"conv1d expects {c_in} input channels, got {x.shape[0]}.")
    out_len = conv_output_length(x.shape[1], k, stride, dilation)
    if out_len < 1:
        raise InvalidArgumentError(
            f"conv1d input of length {x.shape[1]} is shorter than the receptive field."
        )
    taps = [_tap(j, out_len, stride, dilation) for j in range(k)]

    out = np.zeros((c_out, out_len))
    for j, tap in enumerate(taps):
        out += weight.values[:, :, j] @ x.values[:, tap]
    if bias is not None:
        out += bias.values[:, None]

    def _backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.values)
            for j, tap in enumerate(taps):
                gx[:, tap] += weight.values[:, :, j].T @ g
            _accumulate(x, gx)
        if weight.requires_grad:
            _accumulate(weight, np.stack([g @ x.values[:, tap].T for tap in taps], axis=2))
        if bias is not None:
            _accumulate(bias, g.sum(axis=1))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, _backward)


def depthwise_conv1d(
    x: DiffTensor, weight: DiffTensor, bias: DiffTensor, dilation: int = 1
) -> DiffTensor:
    """
    Per-channel dilated convolution with "same" zero padding (odd kernels).

    :param x: Input, shape (C, T).
    :param weight: Kernel, shape (C, k).
    :param bias: Bias, shape (C,).
    """
    channels, k = weight.shape
    if x.shape[0] != channels:
        raise InvalidArgumentError(f"depthwise_conv1d expects {channels} channels, got {x.shape[0]}.")
    half = dilation * (k - 1) // 2
    padded = pad_time(x, half, dilation * (k - 1) - half)
    out_len = x.shape[1]
    taps = [_tap(j, out_len, 1, dilation) for j in range(k)]

    out = bias.values[:, None] + sum(
        weight.values[:, j : j + 1] * padded.values[:, tap] for j, tap in enumerate(taps)
    )

    def _backward(g: np.ndarray) -> None:
        if padded.requires_grad:
            gp = np.zeros_like(padded.values)
            for j, tap in enumerate(taps):
                gp[:, tap] += weight.values[:, j : j + 1] * g
            _accumulate(padded, gp)
        if weight.requires_grad:
            _accumulate(
                weight, np.stack([np.sum(g * padded.values[:, tap], axis=1) for tap in taps], axis=1)
            )
        _accumulate(bias, g.sum(axis=1))

    return _node(out, (padded, weight, bias), _backward)


def conv_transpose1d(x: DiffTensor, weight: DiffTensor, stride: int) -> DiffTensor:
    """
    Transposed 1-D convolution with overlap-add.

    :param x: Input, shape (C_in, K).
    :param weight: Kernel, shape (C_in, C_out, k).
    :return: Output, shape (C_out, (K - 1) * stride + k).
    """
    c_in, c_out, k = weight.shape
    if x.shape[0] != c_in:
        raise InvalidArgumentError(
            f"conv_transpose1d expects {c_in} input channels, got {x.shape[0]}."
        )
    n_frames = x.shape[1]
    taps = [_tap(j, n_frames, stride, 1) for j in range(k)]

    out = np.zeros((c_out, (n_frames - 1) * stride + k))
    for j, tap in enumerate(taps):
        out[:, tap] += weight.values[:, :, j].T @ x.values

    def _backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, sum(weight.values[:, :, j] @ g[:, tap] for j, tap in enumerate(taps)))
        if weight.requires_grad:
            _accumulate(weight, np.stack([x.values @ g[:, tap].T for tap in taps], axis=2))

    return _node(out, (x, weight), _backward)


def linear_interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """
    Constant (n_in, n_out) matrix M such that v @ M linearly resamples the time axis of v
    from n_in to n_out frames, aligning the first and last frames.
    """
    if n_in < 1 or n_out < 1:
        raise InvalidArgumentError(f"Interpolation needs positive lengths, got {n_in} -> {n_out}.")
    matrix = np.zeros((n_in, n_out))
    if n_in == 1:
        matrix[0, :] = 1.0
        return matrix
    positions = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    lower = np.minimum(np.floor(positions).astype(int), n_in - 2)
    frac = positions - lower
    columns = np.arange(n_out)
    matrix[lower, columns] = 1.0 - frac
    matrix[lower + 1, columns] += frac
    return matrix


def interpolate_time(x: DiffTensor, n_out: int) -> DiffTensor:
    return matmul_const(x, linear_interpolation_matrix(x.shape[-1], n_out))


def finite_difference_grad(
    fn: Callable[[], float],
    tensor: DiffTensor,
    indices: Optional[Iterable[Tuple[int, ...]]] = None,
    h: float = 1e-5,
) -> np.ndarray:
    """
    Central finite-difference estimate of d fn() / d tensor at `indices` (default: all).

    `fn` must re-run the computation from `tensor.values`. Entries not in `indices` are 0.
    """
    estimate = np.zeros_like(tensor.values)
    if indices is None:
        indices = list(np.ndindex(*tensor.shape))
    for index in indices:
        original = tensor.values[index]
        tensor.values[index] = original + h
        upper = fn()
        tensor.values[index] = original - h
        lower = fn()
        tensor.values[index] = original
        estimate[index] = (upper - lower) / (2 * h)
    return estimate
