"""
Differentiable operations on Tensor.

Broadcasting is limited to scalar-against-tensor and equal shapes; everything
else (row biases, per-row scaling) has an explicit op with its own contract.
"""

from typing import Optional, Sequence, Union

import numpy as np

from src.core.exceptions import (
    ContractError,
    DegenerateMaskError,
    DimensionError,
    EmbeddingIndexError,
)
from src.infra.numeric.tensor import Tensor, make_node

Operand = Union[Tensor, float, int, np.ndarray]


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _data(value: Union[Tensor, np.ndarray, None]) -> Optional[np.ndarray]:
    if value is None:
        return None
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


# --- Elementwise ---

def _broadcast_pair(op: str, a: Tensor, b: Tensor) -> tuple[bool, bool]:
    """Return (a_is_scalar, b_is_scalar) for a supported broadcast."""
    if a.shape == b.shape:
        return False, False
    if a.size == 1:
        return True, False
    if b.size == 1:
        return False, True
    raise DimensionError(op, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, is_scalar: bool, shape: tuple[int, ...]) -> np.ndarray:
    return grad.sum().reshape(shape) if is_scalar else grad


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    a_s, b_s = _broadcast_pair("add", a, b)
    av = a.data.reshape(()) if a_s else a.data
    bv = b.data.reshape(()) if b_s else b.data

    def vjp(g):
        return _reduce_to(g, a_s, a.shape), _reduce_to(g, b_s, b.shape)

    return make_node(av + bv, (a, b), vjp, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    a_s, b_s = _broadcast_pair("sub", a, b)
    av = a.data.reshape(()) if a_s else a.data
    bv = b.data.reshape(()) if b_s else b.data

    def vjp(g):
        return _reduce_to(g, a_s, a.shape), _reduce_to(-g, b_s, b.shape)

    return make_node(av - bv, (a, b), vjp, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    a_s, b_s = _broadcast_pair("mul", a, b)
    av = a.data.reshape(()) if a_s else a.data
    bv = b.data.reshape(()) if b_s else b.data

    def vjp(g):
        return _reduce_to(g * bv, a_s, a.shape), _reduce_to(g * av, b_s, b.shape)

    return make_node(av * bv, (a, b), vjp, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return make_node(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def relu(a: Tensor) -> Tensor:
    # Subgradient at 0 is 0
    positive = a.data > 0
    return make_node(np.where(positive, a.data, 0.0), (a,), lambda g: (g * positive,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_node(np.log(x), (a,), lambda g: (g / x,), "log")


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "add": add,
    "mul": mul,
    "scale": scale,
}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name: relu | sigmoid | add | mul | scale."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"Unknown elementwise op '{kind}'") from None
    return fn(*args)


# --- Linear algebra and shape ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    av, bv = a.data, b.data

    def vjp(g):
        return g @ bv.T, av.T @ g

    return make_node(av @ bv, (a, b), vjp, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose", a.shape)
    return make_node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError("reshape", a.shape, shape)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[m×n] + bias[n] broadcast over rows."""
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError("add_bias", x.shape, bias.shape)
    return make_node(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def scale_rows(x: Tensor, factors: Operand) -> Tensor:
    """Multiply row i of x[m×n] by factors[i]."""
    factors = as_tensor(factors)
    if x.data.ndim != 2 or factors.shape != (x.shape[0],):
        raise DimensionError("scale_rows", x.shape, factors.shape)
    xv, fv = x.data, factors.data[:, None]

    def vjp(g):
        return g * fv, (g * xv).sum(axis=1)

    return make_node(xv * fv, (x, factors), vjp, "scale_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError("slice_cols", x.shape, (start, stop))

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_node(x.data[:, start:stop].copy(), (x,), vjp, "slice_cols")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[0]:
        raise DimensionError("slice_rows", x.shape, (start, stop))

    def vjp(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return make_node(x.data[start:stop].copy(), (x,), vjp, "slice_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError("concat_cols", *[p.shape for p in parts])
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return make_node(np.concatenate([p.data for p in parts], axis=1), parts, vjp, "concat_cols")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError("concat_rows", *[p.shape for p in parts])
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return [g[bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return make_node(np.concatenate([p.data for p in parts], axis=0), parts, vjp, "concat_rows")


def take(x: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Gather x[rows[i], cols[i]] into a vector."""
    rows, cols = np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)
    if x.data.ndim != 2 or rows.shape != cols.shape:
        raise DimensionError("take", x.shape, rows.shape, cols.shape)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return make_node(x.data[rows, cols], (x,), vjp, "take")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the tensor op name
    return make_node(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return make_node(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean")


# --- Normalization ---

def softmax_rows(
    x: Tensor,
    mask: Optional[np.ndarray] = None,
    bias: Optional[Operand] = None,
) -> Tensor:
    """
    Row softmax over unmasked entries, optionally weighted by a positive bias:

        w[i, j] = bias[i, j] * exp(x[i, j]) / sum_l bias[i, l] * exp(x[i, l])

    Masked entries are exactly 0. With bias == 1 the result is bit-identical
    to the unbiased softmax.

    Raises:
        DegenerateMaskError: If a row has no unmasked entry or a zero normalizer
    """
    if x.data.ndim != 2:
        raise DimensionError("softmax_rows", x.shape)
    allowed = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if allowed.shape != x.shape:
        raise DimensionError("softmax_rows mask", x.shape, allowed.shape)
    if not allowed.any(axis=1).all():
        raise DegenerateMaskError("softmax_rows: a row has every entry masked")

    shifted = np.where(allowed, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    raw = np.where(allowed, np.exp(shifted), 0.0)

    bias_t = None if bias is None else as_tensor(bias)
    if bias_t is not None and bias_t.shape != x.shape:
        raise DimensionError("softmax_rows bias", x.shape, bias_t.shape)
    weighted = raw if bias_t is None else raw * bias_t.data
    norm = weighted.sum(axis=1, keepdims=True)
    if np.any(norm <= 0):
        raise DegenerateMaskError("softmax_rows: zero normalizer")
    out = weighted / norm

    def vjp(g):
        centered = g - (g * out).sum(axis=1, keepdims=True)
        gx = out * centered
        if bias_t is None:
            return (gx,)
        return gx, (raw / norm) * centered

    parents = (x,) if bias_t is None else (x, bias_t)
    return make_node(out, parents, vjp, "softmax_rows")


def log_softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row log-softmax; masked entries are -inf and receive no gradient."""
    if x.data.ndim != 2:
        raise DimensionError("log_softmax_rows", x.shape)
    allowed = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not allowed.any(axis=1).all():
        raise DegenerateMaskError("log_softmax_rows: a row has every entry masked")

    shifted = np.where(allowed, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    lse = np.log(np.where(allowed, np.exp(shifted), 0.0).sum(axis=1, keepdims=True))
    out = shifted - lse
    probs = np.where(allowed, np.exp(out), 0.0)

    def vjp(g):
        g = np.where(allowed, g, 0.0)
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return make_node(out, (x,), vjp, "log_softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data
    reduce_axes = tuple(range(x.data.ndim - 1))

    def vjp(g):
        gxhat = g * gain.data
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return make_node(out, (x, gain, bias), vjp, "layer_norm")


# --- Lookup and regularization ---

def embed_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(list(ids), dtype=np.int64)
    vocab = table.shape[0]
    for token_id in ids:
        if not 0 <= token_id < vocab:
            raise EmbeddingIndexError(int(token_id), vocab)

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return make_node(table.data[ids], (table,), vjp, "embed_lookup")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; the identity (same tensor) in eval mode or at rate 0."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
