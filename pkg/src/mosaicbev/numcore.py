"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every tensor stores a float64 ndarray. Ops build a graph of closures; calling
``backward()`` on a scalar result fills ``grad`` on every ancestor that has
``requires_grad=True``. Elementwise binary ops accept either two tensors of
identical shape or one tensor and a python scalar; there is no implicit
broadcasting beyond that.

Subgradient conventions (fixed so training is reproducible):
  * relu and abs use derivative 0 at the kink,
  * maximum/minimum route the gradient to the first operand on ties,
  * log clamps its argument at LOG_CLAMP before the log, with zero gradient
    in the clamped region.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

LOG_CLAMP = 1e-12

TENSOR_MAGIC = b"YBEVT"


class DimensionError(Exception):
    """Shapes passed to an op are incompatible."""


class ContractError(Exception):
    """An op was used outside its contract (for example backward on a non-scalar)."""


class SerializationError(Exception):
    """A tensor blob failed to parse."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference and finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    # -- autodiff ------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar; accumulates into ``grad`` on ancestors."""
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            for parent, vjp in node._parents:
                pg = vjp(g)
                if pg.shape != parent.data.shape:
                    raise ContractError(
                        f"vjp produced shape {pg.shape} for parent of shape {parent.data.shape}"
                    )
                acc = grads.get(id(parent))
                if acc is None:
                    # Copy anything that aliases g (identity vjps, views) so the
                    # in-place accumulation below cannot corrupt other entries.
                    grads[id(parent)] = pg.copy() if (pg is g or pg.base is not None) else pg
                else:
                    acc += pg


def _node(data: np.ndarray, *pairs) -> Tensor:
    """Build a result tensor wired to the parents that need gradients."""
    parents = tuple((p, vjp) for p, vjp in pairs if p.requires_grad)
    out = Tensor(data, requires_grad=_grad_enabled and bool(parents))
    if out.requires_grad:
        out._parents = parents
    return out


def _coerce_pair(a, b, op: str):
    """Return (a, b) with scalars wrapped; reject shape mismatches."""
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and b_t:
        if a.data.shape != b.data.shape:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
        return a, b
    if a_t and np.isscalar(b):
        return a, float(b)
    if b_t and np.isscalar(a):
        return float(a), b
    raise ContractError(f"{op}: expected tensors or python scalars")


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "add")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return _node(a.data + b.data, (a, lambda g: g), (b, lambda g: g))
    t, c = (a, b) if isinstance(a, Tensor) else (b, a)
    return _node(t.data + c, (t, lambda g: g))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "sub")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return _node(a.data - b.data, (a, lambda g: g), (b, lambda g: -g))
    if isinstance(a, Tensor):
        return _node(a.data - b, (a, lambda g: g))
    return _node(a - b.data, (b, lambda g: -g))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b, "mul")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        ad, bd = a.data, b.data
        return _node(ad * bd, (a, lambda g: g * bd), (b, lambda g: g * ad))
    t, c = (a, b) if isinstance(a, Tensor) else (b, a)
    return _node(t.data * c, (t, lambda g: g * c))


def div(a, b) -> Tensor:
    """Elementwise quotient. The caller guarantees the denominator is nonzero."""
    a, b = _coerce_pair(a, b, "div")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        ad, bd = a.data, b.data
        out = ad / bd
        return _node(out, (a, lambda g: g / bd), (b, lambda g: -g * out / bd))
    if isinstance(a, Tensor):
        return _node(a.data / b, (a, lambda g: g / b))
    out = a / b.data
    bd = b.data
    return _node(out, (b, lambda g: -g * out / bd))


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(t.data * c, (t, lambda g: g * c))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to the first operand."""
    a, b = _coerce_pair(a, b, "maximum")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        first = a.data >= b.data
        out = np.where(first, a.data, b.data)
        return _node(
            out,
            (a, lambda g: g * first),
            (b, lambda g: g * ~first),
        )
    if isinstance(a, Tensor):
        first = a.data >= b
        return _node(np.where(first, a.data, b), (a, lambda g: g * first))
    first = a >= b.data
    return _node(np.where(first, a, b.data), (b, lambda g: g * ~first))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to the first operand."""
    a, b = _coerce_pair(a, b, "minimum")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        first = a.data <= b.data
        out = np.where(first, a.data, b.data)
        return _node(
            out,
            (a, lambda g: g * first),
            (b, lambda g: g * ~first),
        )
    if isinstance(a, Tensor):
        first = a.data <= b
        return _node(np.where(first, a.data, b), (a, lambda g: g * first))
    first = a <= b.data
    return _node(np.where(first, a, b.data), (b, lambda g: g * ~first))


def absolute(t: Tensor) -> Tensor:
    sign = np.sign(t.data)  # sign(0) = 0 pins the subgradient at the kink
    return _node(np.abs(t.data), (t, lambda g: g * sign))


def square(t: Tensor) -> Tensor:
    d = t.data
    return _node(d * d, (t, lambda g: g * (2.0 * d)))


def log(t: Tensor) -> Tensor:
    """Natural log of max(x, LOG_CLAMP); zero gradient where the clamp engaged."""
    clamped = np.maximum(t.data, LOG_CLAMP)
    active = t.data >= LOG_CLAMP
    return _node(np.log(clamped), (t, lambda g: g * active / clamped))


# -- nonlinearities ------------------------------------------------------


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0  # derivative 0 at the kink
    return _node(t.data * mask, (t, lambda g: g * mask))


def sigmoid(t: Tensor) -> Tensor:
    x = t.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])  # split form avoids overflow for large negatives
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (t, lambda g: g * out * (1.0 - out)))


def tanh(t: Tensor) -> Tensor:
    out = np.tanh(t.data)
    return _node(out, (t, lambda g: g * (1.0 - out * out)))


def cos(t: Tensor) -> Tensor:
    d = t.data
    return _node(np.cos(d), (t, lambda g: g * -np.sin(d)))


def sin(t: Tensor) -> Tensor:
    d = t.data
    return _node(np.sin(d), (t, lambda g: g * np.cos(d)))


# -- reductions and reshaping --------------------------------------------


def tsum(t: Tensor) -> Tensor:
    shape = t.data.shape
    return _node(np.asarray(t.data.sum()), (t, lambda g: np.broadcast_to(g, shape)))


def mean(t: Tensor) -> Tensor:
    n = t.data.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return scale(tsum(t), 1.0 / n)


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate 1-D tensors."""
    if not parts:
        raise ContractError("concat of an empty list")
    for p in parts:
        if p.ndim != 1:
            raise DimensionError(f"concat expects 1-D tensors, got shape {p.shape}")
    sizes = [p.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp_for(i):
        return lambda g: g[offsets[i]:offsets[i + 1]]

    data = np.concatenate([p.data for p in parts])
    return _node(data, *[(p, vjp_for(i)) for i, p in enumerate(parts)])


def gather(t: Tensor, indices) -> Tensor:
    """Pick elements by flat (C-order) index; returns a 1-D tensor."""
    idx = np.asarray(indices, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= t.data.size):
        raise DimensionError(f"gather index out of range for size {t.data.size}")
    flat = t.data.ravel()
    shape = t.data.shape

    def vjp(g):
        out = np.zeros(flat.size)
        np.add.at(out, idx, g)
        return out.reshape(shape)

    return _node(flat[idx], (t, vjp))


def slice_channel(t: Tensor, c: int) -> Tensor:
    """Select channel ``c`` of a (B, C, H, W) tensor, giving (B, H, W)."""
    if t.ndim != 4:
        raise DimensionError(f"slice_channel expects 4-D (B, C, H, W), got {t.shape}")
    B, C, H, W = t.shape
    if not 0 <= c < C:
        raise DimensionError(f"channel {c} out of range for C={C}")

    def vjp(g):
        out = np.zeros((B, C, H, W))
        out[:, c] = g
        return out

    return _node(t.data[:, c].copy(), (t, vjp))


# -- convolution ----------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (B, C, H, W) with (O, C, kh, kw) plus bias (O,).

    Output spatial size is (H + 2 * padding - kh) // stride + 1 (same for W).
    Implemented as one GEMM per kernel tap so the heavy lifting stays in BLAS.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D (B, C, H, W), got {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-D (O, C, kh, kw), got {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"conv2d channel mismatch: input C={C}, weight C={Cw}")
    if b is not None and b.shape != (O,):
        raise DimensionError(f"conv2d bias must have shape ({O},), got {b.shape}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d stride must be >= 1 and padding >= 0")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(
            f"conv2d kernel ({kh}x{kw}) larger than padded input ({Hp}x{Wp})"
        )
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    if padding:
        xp = np.zeros((B, C, Hp, Wp))
        xp[:, :, padding:padding + H, padding:padding + W] = x.data
    else:
        xp = x.data

    wd = w.data
    acc = np.zeros((B, Ho, Wo, O))
    for di in range(kh):
        for dj in range(kw):
            xs = xp[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride]
            acc += np.tensordot(xs, wd[:, :, di, dj], axes=([1], [1]))
    if b is not None:
        acc += b.data
    out_data = np.ascontiguousarray(np.moveaxis(acc, 3, 1))

    pairs = []
    if x.requires_grad:
        def vjp_x(g):
            gm = np.moveaxis(g, 1, 3)
            dxp = np.zeros((B, C, Hp, Wp))
            for di in range(kh):
                for dj in range(kw):
                    d = np.tensordot(gm, wd[:, :, di, dj], axes=([3], [0]))
                    dxp[:, :, di:di + stride * Ho:stride,
                        dj:dj + stride * Wo:stride] += np.moveaxis(d, 3, 1)
            if padding:
                return dxp[:, :, padding:padding + H, padding:padding + W]
            return dxp
        pairs.append((x, vjp_x))
    if w.requires_grad:
        def vjp_w(g):
            gm = np.moveaxis(g, 1, 3)
            dw = np.zeros_like(wd)
            for di in range(kh):
                for dj in range(kw):
                    xs = xp[:, :, di:di + stride * Ho:stride,
                            dj:dj + stride * Wo:stride]
                    dw[:, :, di, dj] = np.tensordot(
                        gm, xs, axes=([0, 1, 2], [0, 2, 3])
                    )
            return dw
        pairs.append((w, vjp_w))
    if b is not None and b.requires_grad:
        pairs.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _node(out_data, *pairs)


# -- gradient checking -----------------------------------------------------


def grad_check(f, x0: np.ndarray, h: float = 1e-5, skip_mask=None) -> float:
    """Compare backward() against central differences, coordinate by coordinate.

    ``f`` maps a Tensor to a scalar Tensor. Returns the worst relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)``. Coordinates
    where ``skip_mask`` is True are left out (used to dodge subgradient kinks).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    out = f(x)
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    flat = x0.ravel()
    skip = (np.zeros(x0.shape, dtype=bool) if skip_mask is None
            else np.asarray(skip_mask, dtype=bool))
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            if skip.ravel()[i]:
                continue
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            fp = f(Tensor(bumped.reshape(x0.shape))).item()
            bumped[i] = flat[i] - h
            fm = f(Tensor(bumped.reshape(x0.shape))).item()
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.ravel()[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


# -- serialization ----------------------------------------------------------


def write_tensor(fh, arr: np.ndarray) -> None:
    """Write one float64 array as a YBEVT blob to a binary file object."""
    # Note: ascontiguousarray would promote 0-d arrays to 1-d; tobytes below
    # copies as needed, so plain asarray preserves the true rank.
    arr = np.asarray(arr, dtype=np.float64)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(arr.astype("<f8").tobytes(order="C"))


def read_tensor(fh) -> np.ndarray:
    """Read one YBEVT blob; raises SerializationError on any mismatch."""
    magic = fh.read(len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise SerializationError(f"bad tensor magic {magic!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise SerializationError("truncated tensor header")
    rank, = struct.unpack("<I", raw)
    if rank > 8:
        raise SerializationError(f"implausible tensor rank {rank}")
    dims = []
    for _ in range(rank):
        raw = fh.read(8)
        if len(raw) != 8:
            raise SerializationError("truncated tensor dims")
        dims.append(struct.unpack("<Q", raw)[0])
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise SerializationError(
            f"truncated tensor payload: wanted {8 * count} bytes, got {len(payload)}"
        )
    # astype copies out of the read-only buffer; reshape of that contiguous
    # copy stays contiguous, and 0-d rank is preserved.
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
