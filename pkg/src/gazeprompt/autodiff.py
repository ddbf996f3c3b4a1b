"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every backward rule is written in terms of the differentiable ops defined in
this module, so gradients can themselves be differentiated
(``grad(..., create_graph=True)``). That is what the exact meta-gradient needs.

Tensors are 32-bit by default. ``float64_mode()`` switches the default dtype
for the gradient-check oracles.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Raised when a parameter block does not match the geometry it is used with."""


class ContractError(RuntimeError):
    """Raised when a caller breaks an op precondition (e.g. non-scalar loss)."""


class GradCheckError(RuntimeError):
    """Raised by the finite-difference oracle when the function misbehaves."""


_ids = itertools.count()


class _State(threading.local):
    # per-thread so no_grad in one worker cannot switch off recording in another
    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)


_state = _State()


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = _state.grad_enabled
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def float64_mode():
    """Make newly created tensors 64-bit. Used by the verification oracles only."""
    prev = _state.dtype
    _state.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _state.dtype = prev


def default_dtype() -> np.dtype:
    return _state.dtype


class Tensor:
    """A dense array plus the bookkeeping needed to differentiate through it.

    ``node_id`` increases monotonically with creation time, so sorting graph
    nodes by id gives a valid topological order.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_vjp", "op", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _state.dtype
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf"
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scalar_mul(self, 1.0 / other)

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mean_all(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype or _state.dtype), requires_grad=requires_grad)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _state.dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def _const(arr: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(arr.astype(like.dtype, copy=False))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out.op = op
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for axis, (m, n) in enumerate(itertools.zip_longest(a.shape, b.shape)):
            if m != n:
                raise DimensionError(f"{op}: shape mismatch on axis {axis}: {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, scalar_mul(g, -1.0)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)), "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.dtype.type(c), (a,), lambda g: (scalar_mul(g, c),), "scalar_mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,),
                 lambda g: (mul(g, _const(mask, g)),), "relu")


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at exactly zero
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (mul(g, _const(sign, g)),), "abs")


# --------------------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected 2 axes, got {a.ndim}")
    return _make(a.data.T.copy(), (a,), lambda g: (transpose(g),), "transpose")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Numpy-style broadcast; the source must have the target's rank."""
    shape = tuple(shape)
    if a.ndim != len(shape):
        raise DimensionError(f"broadcast_to: rank {a.ndim} vs target rank {len(shape)}")
    for axis, (m, n) in enumerate(zip(a.shape, shape)):
        if m != n and m != 1:
            raise DimensionError(f"broadcast_to: axis {axis} has size {m}, cannot expand to {n}")
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (sum_to(g, src),), "broadcast_to")


def sum_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Sum over the axes along which ``shape`` has size 1 (inverse of broadcast_to)."""
    shape = tuple(shape)
    if a.ndim != len(shape):
        raise DimensionError(f"sum_to: rank {a.ndim} vs target rank {len(shape)}")
    axes = tuple(i for i, (m, n) in enumerate(zip(a.shape, shape)) if m != n)
    for i in axes:
        if shape[i] != 1:
            raise DimensionError(f"sum_to: axis {i} has size {a.shape[i]}, cannot reduce to {shape[i]}")
    src = a.shape
    out = a.data.sum(axis=axes, keepdims=True) if axes else a.data.copy()
    return _make(out, (a,), lambda g: (broadcast_to(g, src),), "sum_to")


def sum_all(a: Tensor) -> Tensor:
    if a.ndim == 0:
        return a
    return reshape(sum_to(a, (1,) * a.ndim), ())


def mean_all(a: Tensor) -> Tensor:
    return scalar_mul(sum_all(a), 1.0 / a.size)


def flip_horizontal(a: Tensor) -> Tensor:
    """Mirror along the last (width) axis. Self-adjoint."""
    return _make(a.data[..., ::-1].copy(), (a,), lambda g: (flip_horizontal(g),), "flip")


def select_columns(a: Tensor, signs: Sequence[float]) -> Tensor:
    """Multiply column k of a 2-D tensor by ``signs[k]``."""
    if a.ndim != 2 or a.shape[1] != len(signs):
        raise DimensionError(f"select_columns: expected (*, {len(signs)}), got {a.shape}")
    s = np.asarray(signs, dtype=a.dtype)[None, :]
    return mul(a, _const(np.broadcast_to(s, a.shape), a))


# --------------------------------------------------------------------------- dense layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner axis mismatch {a.shape[1]} vs {b.shape[0]}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear: expected 2-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: axis 1 of input ({x.shape[1]}) != axis 1 of weight ({weight.shape[1]})")
    y = matmul(x, transpose(weight))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        y = add(y, broadcast_to(reshape(bias, (1, weight.shape[0])), y.shape))
    return y


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected 4 axes, got {x.shape}")
    n, c, h, w = x.shape
    return reshape(scalar_mul(sum_to(x, (n, c, 1, 1)), 1.0 / (h * w)), (n, c))


# --------------------------------------------------------------------------- convolution


def _conv_out(h: int, k: int, stride: int) -> int:
    return (h - k) // stride + 1


# Convolutions run as k*k shifted GEMMs over a polyphase NHWC buffer: phase
# (r, q) holds x[:, :, r::s, q::s] flattened to rows, so kernel tap (a, b)
# becomes a contiguous row slice of phase (a % s, b % s). Output rows live on
# the same (N, Hs, Ws) grid; positions past (Ho, Wo) are junk and dropped.


class _Grid(NamedTuple):
    n: int
    h: int
    w: int
    hs: int
    ws: int
    ho: int
    wo: int
    rows: int
    tail: int


def _grid(n: int, h: int, w: int, k: int, stride: int) -> _Grid:
    hs, ws = -(-h // stride), -(-w // stride)
    reach = (k - 1) // stride
    return _Grid(n, h, w, hs, ws, _conv_out(h, k, stride), _conv_out(w, k, stride),
                 n * hs * ws, reach * ws + reach)


def _tap_offset(grid: _Grid, a: int, b: int, stride: int) -> int:
    return (a // stride) * grid.ws + b // stride


def _phases(x: np.ndarray, grid: _Grid, stride: int) -> np.ndarray:
    c = x.shape[1]
    buf = np.zeros((stride, stride, grid.rows + grid.tail, c), dtype=x.dtype)
    xh = x.transpose(0, 2, 3, 1)
    for r in range(stride):
        for q in range(stride):
            sub = xh[:, r::stride, q::stride, :]
            view = buf[r, q, : grid.rows].reshape(grid.n, grid.hs, grid.ws, c)
            view[:, : sub.shape[1], : sub.shape[2]] = sub
    return buf


def _unphase(buf: np.ndarray, grid: _Grid, stride: int) -> np.ndarray:
    c = buf.shape[-1]
    out = np.empty((grid.n, grid.h, grid.w, c), dtype=buf.dtype)
    for r in range(stride):
        for q in range(stride):
            view = buf[r, q, : grid.rows].reshape(grid.n, grid.hs, grid.ws, c)
            hr, wq = len(range(r, grid.h, stride)), len(range(q, grid.w, stride))
            out[:, r::stride, q::stride, :] = view[:, :hr, :wq]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _out_rows(g: np.ndarray, grid: _Grid) -> np.ndarray:
    o = g.shape[1]
    full = np.zeros((grid.n, grid.hs, grid.ws, o), dtype=g.dtype)
    full[:, : grid.ho, : grid.wo] = g.transpose(0, 2, 3, 1)
    return full.reshape(grid.rows, o)


def _conv_valid(x: np.ndarray, w: np.ndarray, stride: int, buf: np.ndarray | None = None) -> np.ndarray:
    o, _, k, _ = w.shape
    grid = _grid(x.shape[0], x.shape[2], x.shape[3], k, stride)
    if buf is None:
        buf = _phases(x, grid, stride)
    taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # k, k, C, O
    out = np.zeros((grid.rows, o), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            off = _tap_offset(grid, a, b, stride)
            out += buf[a % stride, b % stride, off: off + grid.rows] @ taps[a, b]
    out = out.reshape(grid.n, grid.hs, grid.ws, o)[:, : grid.ho, : grid.wo]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_hw: tuple[int, int], stride: int) -> np.ndarray:
    c, k = w.shape[1], w.shape[2]
    grid = _grid(g.shape[0], in_hw[0], in_hw[1], k, stride)
    gf = _out_rows(g, grid)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # k, k, O, C
    dbuf = np.zeros((stride, stride, grid.rows + grid.tail, c), dtype=g.dtype)
    for a in range(k):
        for b in range(k):
            off = _tap_offset(grid, a, b, stride)
            dbuf[a % stride, b % stride, off: off + grid.rows] += gf @ taps[a, b]
    return _unphase(dbuf, grid, stride)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int,
                      buf: np.ndarray | None = None) -> np.ndarray:
    o, c = g.shape[1], x.shape[1]
    grid = _grid(x.shape[0], x.shape[2], x.shape[3], k, stride)
    if buf is None:
        buf = _phases(x, grid, stride)
    gf = _out_rows(g, grid)
    dw = np.empty((o, c, k, k), dtype=g.dtype)
    for a in range(k):
        for b in range(k):
            off = _tap_offset(grid, a, b, stride)
            dw[:, :, a, b] = gf.T @ buf[a % stride, b % stride, off: off + grid.rows]
    return dw


# The three conv primitives are partial derivatives of one trilinear form
# T(x, w, g) = sum g[n,o,i,j] x[n,c,i*s+a,j*s+b] w[o,c,a,b], so each one's
# backward is expressed with the other two.


def _conv_core(x: Tensor, w: Tensor, stride: int) -> Tensor:
    in_hw = x.shape[2:]
    k = w.shape[2]
    cols = _phases(x.data, _grid(x.shape[0], in_hw[0], in_hw[1], k, stride), stride)

    def vjp(g):
        gx = conv_input_grad(g, w, in_hw, stride) if x.requires_grad else None
        gw = conv_weight_grad(x, g, k, stride, cols) if w.requires_grad else None
        return gx, gw

    return _make(_conv_valid(x.data, w.data, stride, cols), (x, w), vjp, "conv2d")


def conv_input_grad(g: Tensor, w: Tensor, in_hw: tuple[int, int], stride: int) -> Tensor:
    def vjp(u):
        return _conv_core(u, w, stride), conv_weight_grad(u, g, w.shape[2], stride)

    return _make(_conv_input_grad(g.data, w.data, in_hw, stride), (g, w), vjp, "conv_input_grad")


def conv_weight_grad(x: Tensor, g: Tensor, k: int, stride: int, cols: np.ndarray | None = None) -> Tensor:
    in_hw = x.shape[2:]

    def vjp(u):
        return conv_input_grad(g, u, in_hw, stride), _conv_core(x, u, stride)

    return _make(_conv_weight_grad(x.data, g.data, k, stride, cols), (x, g), vjp, "conv_weight_grad")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid cross-correlation. ``x`` must already be padded.

    x: (N, C_in, H, W), weight: (C_out, C_in, k, k), bias: (C_out,).
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must have 4 axes (N, C, H, W), got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d: weight must be (C_out, C_in, k, k), got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: axis 1 (channels) of input is {x.shape[1]}, weight expects {weight.shape[1]}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be positive, got {stride}")
    k = weight.shape[2]
    for axis in (2, 3):
        if x.shape[axis] < k:
            raise DimensionError(f"conv2d: axis {axis} of input ({x.shape[axis]}) is smaller than kernel {k}")
    y = _conv_core(x, weight, stride)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"conv2d: axis 0 of bias is {bias.shape}, expected ({weight.shape[0]},)")
        y = add(y, broadcast_to(reshape(bias, (1, weight.shape[0], 1, 1)), y.shape))
    return y


# --------------------------------------------------------------------------- prompt padding


def border_size(channels: int, h: int, w: int, width: int) -> int:
    """Number of frame cells around a (channels, h, w) map padded by ``width``."""
    return channels * ((h + 2 * width) * (w + 2 * width) - h * w)


def _frame_mask(h: int, w: int, width: int) -> np.ndarray:
    mask = np.ones((h + 2 * width, w + 2 * width), dtype=bool)
    mask[width : width + h, width : width + w] = False
    return mask


def _embed_frame(values: np.ndarray, channels: int, h: int, w: int, width: int) -> np.ndarray:
    # values: (..., n) in canonical order -> (..., C, H+2w, W+2w) with zero interior
    mask = _frame_mask(h, w, width)
    lead = values.shape[:-1]
    out = np.zeros(lead + (channels,) + mask.shape, dtype=values.dtype)
    out[..., mask] = values.reshape(lead + (channels, -1))
    return out


def _gather_frame(padded: np.ndarray, width: int) -> np.ndarray:
    # (..., C, H+2w, W+2w) -> (..., n) in canonical order
    hp, wp = padded.shape[-2:]
    mask = _frame_mask(hp - 2 * width, wp - 2 * width, width)
    sel = padded[..., mask]  # (..., C, per_channel)
    return sel.reshape(sel.shape[:-2] + (-1,))


def pad_with_prompt(x: Tensor, border: Tensor | None, width: int) -> Tensor:
    """Pad (N, C, H, W) by ``width`` using ``border`` as the frame values.

    ``border`` is either shared across the batch, shape (n,), or per-sample,
    shape (N, n), with n = C*((H+2w)(W+2w) - H*W). Canonical order: channel
    major, then a row-major scan of the padded frame skipping the interior.
    ``border=None`` is conventional zero padding.
    """
    if x.ndim != 4:
        raise DimensionError(f"pad_with_prompt: expected (N, C, H, W), got {x.shape}")
    if width < 1:
        raise ConfigurationError(f"pad_with_prompt: width must be >= 1, got {width}")
    n, c, h, w = x.shape
    expected = border_size(c, h, w, width)
    out = np.zeros((n, c, h + 2 * width, w + 2 * width), dtype=x.dtype)
    out[:, :, width : width + h, width : width + w] = x.data
    parents: tuple[Tensor, ...] = (x,)
    if border is not None:
        if border.shape not in ((expected,), (n, expected)):
            raise ConfigurationError(
                f"pad_with_prompt: border has shape {border.shape}, expected ({expected},) or ({n}, {expected}) "
                f"for input {(c, h, w)} with width {width}"
            )
        frame = _embed_frame(border.data, c, h, w, width)
        out += frame if border.ndim == 2 else frame[None]
        parents = (x, border)
    shared = border is not None and border.ndim == 1

    def vjp(g):
        gx = crop_interior(g, width) if x.requires_grad else None
        if border is None:
            return (gx,)
        return gx, extract_border(g, width, shared)

    return _make(out, parents, vjp, "pad_with_prompt")


def crop_interior(a: Tensor, width: int) -> Tensor:
    """Adjoint of zero padding."""
    hp, wp = a.shape[2], a.shape[3]
    data = a.data[:, :, width : hp - width, width : wp - width].copy()
    return _make(data, (a,), lambda g: (pad_with_prompt(g, None, width),), "crop_interior")


def extract_border(a: Tensor, width: int, shared: bool) -> Tensor:
    """Frame values of a padded map, canonical order; summed over batch if ``shared``."""
    n, c, hp, wp = a.shape
    vals = _gather_frame(a.data, width)  # N, n_border
    data = vals.sum(axis=0) if shared else vals

    def vjp(g):
        return (embed_border(g, (n, c, hp - 2 * width, wp - 2 * width), width),)

    return _make(np.ascontiguousarray(data), (a,), vjp, "extract_border")


def embed_border(values: Tensor, interior_shape: tuple[int, int, int, int], width: int) -> Tensor:
    """Frame-only padded map (zero interior); adjoint of ``extract_border``."""
    n, c, h, w = interior_shape
    shared = values.ndim == 1
    frame = _embed_frame(values.data, c, h, w, width)
    if shared:
        frame = np.broadcast_to(frame[None], (n,) + frame.shape).copy()
    return _make(frame, (values,), lambda g: (extract_border(g, width, shared),), "embed_border")


# --------------------------------------------------------------------------- backward


def _topo(roots: Iterable[Tensor]) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [r for r in roots if r.requires_grad]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen[t.node_id] = t
        stack.extend(p for p in t._parents if p.requires_grad and p.node_id not in seen)
    return [seen[k] for k in sorted(seen, reverse=True)]


def _accumulate(buf: dict[int, Tensor], t: Tensor, g: Tensor) -> None:
    if g.shape != t.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match tensor shape {t.shape} ({t.op})")
    prev = buf.get(t.node_id)
    buf[t.node_id] = g if prev is None else add(prev, g)


def _run_backward(loss: Tensor, create_graph: bool) -> dict[int, Tensor]:
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    buf: dict[int, Tensor] = {}
    if not loss.requires_grad:
        return buf
    with _grad_mode(create_graph):
        buf[loss.node_id] = Tensor(np.ones(loss.shape, dtype=loss.dtype))
        for node in _topo([loss]):
            g = buf.get(node.node_id)
            if g is None or node._vjp is None:
                continue
            grads = node._vjp(g)
            for parent, pg in zip(node._parents, grads):
                if parent.requires_grad and pg is not None:
                    _accumulate(buf, parent, pg)
    return buf


def grad(loss: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. ``inputs`` (leaves or intermediates).

    Inputs that do not influence the loss get zeros. With ``create_graph`` the
    returned tensors are themselves differentiable.
    """
    buf = _run_backward(loss, create_graph)
    out = []
    for t in inputs:
        g = buf.get(t.node_id)
        out.append(g if g is not None else Tensor(np.zeros(t.shape, dtype=t.dtype)))
    return out


def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Returns the gradient buffers keyed by ``node_id``. Leaves passed explicitly
    but not reached by the graph get zero gradients.
    """
    buf = _run_backward(loss, create_graph=False)
    out: dict[int, np.ndarray] = {}
    for node in _topo([loss]):
        if node.is_leaf() and node.node_id in buf:
            node.grad = buf[node.node_id].data
            out[node.node_id] = node.grad
    for leaf in leaves or ():
        if leaf.node_id not in out:
            leaf.grad = np.zeros(leaf.shape, dtype=leaf.dtype)
            out[leaf.node_id] = leaf.grad
    return out


# --------------------------------------------------------------------------- finite differences


def fd_gradient(fn: Callable[[Tensor], Tensor], point: np.ndarray, h: float = 1e-4,
                kink_tol: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of a scalar function, plus a mask of kink coordinates.

    A coordinate is flagged as a kink when its forward and backward one-sided
    differences disagree by more than ``kink_tol * max(1, |central|)``.
    """
    x = np.array(point, dtype=np.float64)
    flat = x.reshape(-1)
    central = np.zeros_like(flat)
    kink = np.zeros(flat.shape, dtype=bool)

    def f(arr):
        # requires_grad so functions that take gradients internally see a live leaf
        v = fn(Tensor(arr.reshape(x.shape).copy(), requires_grad=True, dtype=np.float64))
        return float(np.asarray(v.data).reshape(-1)[0])

    f0 = f(flat)
    if not math.isfinite(f0):
        raise GradCheckError("function is not finite at the base point")
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(flat)
        flat[i] = orig - h
        fm = f(flat)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise GradCheckError(f"function returned a non-finite value at coordinate {i}")
        central[i] = (fp - fm) / (2 * h)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        kink[i] = abs(fwd - bwd) > kink_tol * max(1.0, abs(central[i]))
    return central.reshape(x.shape), kink.reshape(x.shape)


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-4, kink_tol: float = 1e-3) -> float:
    """Max over coordinates of |analytic - central| / max(1, |central|), in 64-bit.

    Coordinates sitting on a kink (see ``fd_gradient``) are excluded.
    """
    x = np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with float64_mode():
        leaf = Tensor(x.copy(), requires_grad=True, dtype=np.float64)
        out = fn(leaf)
        if not np.all(np.isfinite(out.data)):
            raise GradCheckError("function returned a non-finite value at the base point")
        (analytic,) = grad(out, [leaf])
        numeric, kink = fd_gradient(fn, x, h, kink_tol)
    err = np.abs(analytic.data - numeric) / np.maximum(1.0, np.abs(numeric))
    err = np.where(kink, 0.0, err)
    return float(err.max()) if err.size else 0.0
