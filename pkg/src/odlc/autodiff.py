"""Reverse-mode automatic differentiation over CHW numpy arrays.

The op set is deliberately small: exactly what a recurrent convolutional
codec, an MS-SSIM loss and a VGG-style classifier need. Every op records
onto an explicit Tape; backward replays the tape in reverse execution
order, visiting each record exactly once. Forward passes without an
active tape run in inference mode and record nothing.

Convolution here means cross-correlation (no kernel flip), the CNN
convention. Same-padding pads with zeros and produces ceil(H/stride)
outputs. float32 is the working precision; float64 exists for gradient
verification.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "ShapeError", "backward", "record_op",
    "conv2d", "conv_gru_cell", "GruParams", "depth_to_space", "space_to_depth",
    "tanh", "sigmoid", "relu", "add", "sub", "mul", "div", "scale", "add_const",
    "square", "pow_const", "clamp_min", "mean", "avg_pool2", "global_avg_pool",
    "dense", "reshape", "channel_affine", "cross_entropy_logits", "elementwise",
    "xavier_uniform",
]

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes or dtypes violate an op's contract."""


class Tensor:
    """Dense n-d float array plus a gradient slot.

    ``grad`` is populated by :func:`backward` for every tensor on a path
    that requires gradients; it has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
            arr = data
        else:
            arr = np.asarray(data, dtype=np.float32)
        if arr.dtype not in FLOAT_DTYPES:
            raise ShapeError(f"tensor dtype must be float32/float64, got {arr.dtype}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Parameter:
    """Named trainable tensor with a persistent gradient buffer."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data, dtype=np.float32):
        self.name = name
        # owns its buffer: np.array copies, so later in-place updates can
        # never alias caller data
        self.tensor = Tensor(np.array(data, dtype=dtype), requires_grad=True)
        self.tensor.ensure_grad()

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @value.setter
    def value(self, arr: np.ndarray):
        if arr.shape != self.tensor.data.shape:
            raise ShapeError(f"parameter {self.name}: cannot assign shape {arr.shape} over {self.tensor.data.shape}")
        self.tensor.data = np.array(arr, dtype=self.tensor.data.dtype)

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.ensure_grad()

    @grad.setter
    def grad(self, arr):
        if arr.shape != self.tensor.data.shape:
            raise ShapeError(f"parameter {self.name}: grad shape {arr.shape} != value shape {self.tensor.data.shape}")
        self.tensor.grad = arr

    def zero_grad(self):
        self.tensor.ensure_grad()[...] = 0.0

    def freeze(self):
        self.tensor.requires_grad = False

    def unfreeze(self):
        self.tensor.requires_grad = True

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


_STATE = threading.local()


def _tape_stack():
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager; ops executed inside record themselves.
    ``backward`` walks the records once, in reverse execution order.
    """

    def __init__(self):
        self.records = []  # (out, inputs, vjps)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)


def record_op(out: Tensor, inputs: tuple, vjps: tuple) -> Tensor:
    """Attach a backward rule to ``out``. ``vjps[i]`` maps the output
    gradient to the gradient contribution for ``inputs[i]`` (or is None
    for non-differentiable arguments)."""
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.records.append((out, inputs, vjps))
    return out


def backward(loss: Tensor, tape: Tape):
    """Populate grads of everything reachable from ``loss`` on ``tape``.

    Gradients accumulate (fan-out sums); parameters keep their persistent
    buffers, so callers zero them between steps. Tensors not on a path to
    the loss keep grad None (parameters keep their zero buffer).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.grad is None:
        loss.grad = seed
    else:
        loss.grad = loss.grad + seed
    for out, inputs, vjps in reversed(tape.records):
        g = out.grad
        if g is None:
            continue
        for inp, vjp in zip(inputs, vjps):
            if vjp is None or not inp.requires_grad:
                continue
            contrib = vjp(g)
            if inp.grad is None:
                inp.grad = contrib.copy() if contrib.base is not None or contrib is g else contrib
            else:
                inp.grad += contrib


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: operand dtypes differ, {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# convolution


def _same_pad_amount(size: int, k: int, stride: int):
    out = -(-size // stride)  # ceil
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return out, lo, total - lo


def _zero_pad(x: np.ndarray, pt: int, pb: int, pl: int, pr: int) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, h + pt + pb, w + pl + pr), dtype=x.dtype)
    out[:, pt : pt + h, pl : pl + w] = x
    return out


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, xp_shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp_shape[0]
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    dc = dcols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dc[:, i, j]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlate a CHW tensor with an OIHW kernel, add bias.

    same-padding zero-pads so the output is ceil(H/stride) x ceil(W/stride);
    valid-padding requires the kernel to fit and floors.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d: input must be CHW, got ndim {x.data.ndim}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be OIHW, got ndim {kernel.data.ndim}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if kh % 2 != 1:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if kc != c_in:
        raise ShapeError(f"conv2d: kernel expects {kc} input channels, input has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    if x.dtype != kernel.dtype:
        raise ShapeError(f"conv2d: input dtype {x.dtype} differs from kernel dtype {kernel.dtype}")
    k = kh

    if padding == "same":
        ho, pt, pb = _same_pad_amount(h, k, stride)
        wo, pl, pr = _same_pad_amount(w, k, stride)
    elif padding == "valid":
        if h < k or w < k:
            raise ShapeError(f"conv2d: valid padding needs input >= kernel, got {h}x{w} vs {k}")
        ho = (h - k) // stride + 1
        wo = (w - k) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ShapeError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")

    if pt or pb or pl or pr:
        xp = _zero_pad(x.data, pt, pb, pl, pr)
    else:
        xp = x.data
    cols = _im2col(xp, k, stride, ho, wo)
    kmat = kernel.data.reshape(c_out, c_in * k * k)
    out_mat = kmat @ cols
    if bias is not None:
        out_mat = out_mat + bias.data[:, None]
    out = Tensor(out_mat.reshape(c_out, ho, wo))

    operands = (x, kernel) if bias is None else (x, kernel, bias)
    if active_tape() is None or not any(t.requires_grad for t in operands):
        return out  # inference: drop the column buffer immediately

    xp_shape = xp.shape

    def vjp_x(g):
        gm = g.reshape(c_out, ho * wo)
        dcols = kmat.T @ gm
        dxp = _col2im(dcols, xp_shape, k, stride, ho, wo)
        if pt or pb or pl or pr:
            return dxp[:, pt : pt + h, pl : pl + w]
        return dxp

    def vjp_k(g):
        gm = g.reshape(c_out, ho * wo)
        return (gm @ cols.T).reshape(c_out, c_in, k, k)

    def vjp_b(g):
        return g.sum(axis=(1, 2))

    if bias is None:
        return record_op(out, (x, kernel), (vjp_x, vjp_k))
    return record_op(out, (x, kernel, bias), (vjp_x, vjp_k, vjp_b))


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unary(x: Tensor, fwd, make_vjp) -> Tensor:
    out = Tensor(fwd(x.data))
    return record_op(out, (x,), (make_vjp(x.data, out.data),))


def tanh(x: Tensor) -> Tensor:
    return _unary(x, np.tanh, lambda xd, yd: lambda g: g * (1.0 - yd * yd))


def sigmoid(x: Tensor) -> Tensor:
    def fwd(xd):
        # exp of -|x| never overflows; branchless sign fixup
        t = np.exp(-np.abs(xd))
        t /= 1.0 + t
        return np.where(xd >= 0, 1.0 - t, t)
    return _unary(x, fwd, lambda xd, yd: lambda g: g * yd * (1.0 - yd))


def relu(x: Tensor) -> Tensor:
    return _unary(x, lambda xd: np.maximum(xd, 0), lambda xd, yd: lambda g: g * (xd > 0))


def square(x: Tensor) -> Tensor:
    return _unary(x, np.square, lambda xd, yd: lambda g: g * (2.0 * xd))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _unary(x, lambda xd: xd * np.asarray(s, dtype=xd.dtype),
                  lambda xd, yd: lambda g: g * np.asarray(s, dtype=g.dtype))


def add_const(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(x, lambda xd: xd + np.asarray(c, dtype=xd.dtype),
                  lambda xd, yd: lambda g: g)


def pow_const(x: Tensor, p: float) -> Tensor:
    """x**p for a constant exponent; callers guard the domain (x > 0 for
    fractional p)."""
    p = float(p)
    out = Tensor(np.power(x.data, np.asarray(p, dtype=x.dtype)))
    xd = x.data

    def vjp(g):
        return g * (p * np.power(xd, np.asarray(p - 1.0, dtype=xd.dtype)))

    return record_op(out, (x,), (vjp,))


def clamp_min(x: Tensor, m: float) -> Tensor:
    """max(x, m); subgradient passes only where x > m."""
    m = float(m)
    return _unary(x, lambda xd: np.maximum(xd, m), lambda xd, yd: lambda g: g * (xd > m))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    out = Tensor(a.data + b.data)
    return record_op(out, (a, b), (lambda g: g, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    out = Tensor(a.data - b.data)
    return record_op(out, (a, b), (lambda g: g, lambda g: -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return record_op(out, (a, b), (lambda g: g * bd, lambda g: g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    out = Tensor(a.data / b.data)
    ad, bd = a.data, b.data
    return record_op(out, (a, b), (lambda g: g / bd, lambda g: -g * ad / (bd * bd)))


def mean(x: Tensor) -> Tensor:
    """Reduce to a shape-(1,) scalar tensor."""
    out = Tensor(np.asarray([x.data.mean()], dtype=x.dtype))
    n = x.data.size
    shp = x.data.shape

    def vjp(g):
        return np.full(shp, g.reshape(-1)[0] / n, dtype=g.dtype)

    return record_op(out, (x,), (vjp,))


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on a CHW tensor; a trailing odd
    row/column is dropped."""
    c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2: spatial dims {h}x{w} too small")
    v = x.data[:, : 2 * ho, : 2 * wo].reshape(c, ho, 2, wo, 2)
    out = Tensor(v.mean(axis=(2, 4)))

    def vjp(g):
        dx = np.zeros((c, h, w), dtype=g.dtype)
        spread = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * np.asarray(0.25, dtype=g.dtype)
        dx[:, : 2 * ho, : 2 * wo] = spread
        return dx

    return record_op(out, (x,), (vjp,))


def global_avg_pool(x: Tensor) -> Tensor:
    """CHW -> per-channel spatial mean, shape (C,)."""
    c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(1, 2)))

    def vjp(g):
        return np.broadcast_to(g[:, None, None] / (h * w), (c, h, w)).astype(g.dtype)

    return record_op(out, (x,), (vjp,))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    orig = x.shape
    return record_op(out, (x,), (lambda g: g.reshape(orig),))


def channel_affine(x: Tensor, mul_c: np.ndarray, add_c: np.ndarray) -> Tensor:
    """Per-channel y = x * mul_c + add_c on a CHW tensor; the per-channel
    constants are not differentiated (used for image (de)normalization)."""
    c = x.shape[0]
    m = np.asarray(mul_c, dtype=x.dtype).reshape(c, 1, 1)
    a = np.asarray(add_c, dtype=x.dtype).reshape(c, 1, 1)
    out = Tensor(x.data * m + a)
    return record_op(out, (x,), (lambda g: g * m,))


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = W @ x + b for a flat vector x."""
    if x.data.ndim != 1:
        raise ShapeError(f"dense: input must be 1-d, got shape {x.shape}")
    m, n = weight.shape
    if x.shape != (n,):
        raise ShapeError(f"dense: weight expects input length {n}, got {x.shape[0]}")
    if bias.shape != (m,):
        raise ShapeError(f"dense: bias length {bias.shape[0]} != output length {m}")
    out = Tensor(weight.data @ x.data + bias.data)
    wd, xd = weight.data, x.data
    return record_op(out, (x, weight, bias),
                     (lambda g: wd.T @ g, lambda g: np.outer(g, xd), lambda g: g))


def cross_entropy_logits(logits: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy against an integer label, shape-(1,) result."""
    z = logits.data
    if z.ndim != 1:
        raise ShapeError(f"cross_entropy_logits: logits must be 1-d, got {logits.shape}")
    if not 0 <= label < z.shape[0]:
        raise ShapeError(f"cross_entropy_logits: label {label} out of range for {z.shape[0]} classes")
    zmax = z.max()
    ez = np.exp(z - zmax)
    denom = ez.sum()
    loss = np.log(denom) + zmax - z[label]
    out = Tensor(np.asarray([loss], dtype=z.dtype))
    probs = ez / denom

    def vjp(g):
        d = probs.copy()
        d[label] -= 1.0
        return g.reshape(-1)[0] * d

    return record_op(out, (logits,), (vjp,))


# spec-facing dispatcher for the core elementwise kinds
ELEMENTWISE = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "square": square,
    "mean": mean,
}


def elementwise(kind: str, *operands):
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ShapeError(f"elementwise: unknown kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# pixel shuffle


def depth_to_space(x: Tensor, r: int) -> Tensor:
    """[C, H, W] -> [C/r^2, rH, rW]; channel (c*r*r + dy*r + dx) lands at
    output pixel offset (dy, dx)."""
    c, h, w = x.shape
    if r < 1:
        raise ShapeError(f"depth_to_space: factor must be >= 1, got {r}")
    if c % (r * r) != 0:
        raise ShapeError(f"depth_to_space: channel count {c} not divisible by r^2 = {r * r}")
    co = c // (r * r)
    out_data = x.data.reshape(co, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(co, h * r, w * r)
    out = Tensor(np.ascontiguousarray(out_data))

    def vjp(g):
        return _s2d_data(g, r)

    return record_op(out, (x,), (vjp,))


def _s2d_data(arr: np.ndarray, r: int) -> np.ndarray:
    c, h, w = arr.shape
    ho, wo = h // r, w // r
    out = arr.reshape(c, ho, r, wo, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, ho, wo)
    return np.ascontiguousarray(out)


def space_to_depth(x: Tensor, r: int) -> Tensor:
    """Exact inverse of depth_to_space."""
    c, h, w = x.shape
    if r < 1:
        raise ShapeError(f"space_to_depth: factor must be >= 1, got {r}")
    if h % r != 0 or w % r != 0:
        raise ShapeError(f"space_to_depth: spatial dims {h}x{w} not divisible by {r}")
    out = Tensor(_s2d_data(x.data, r))
    co, ho, wo = out.shape

    def vjp(g):
        back = g.reshape(c, r, r, h // r, w // r).transpose(0, 3, 1, 4, 2).reshape(c, h, w)
        return np.ascontiguousarray(back)

    return record_op(out, (x,), (vjp,))


# ---------------------------------------------------------------------------
# convolutional GRU cell


@dataclass
class GruParams:
    """Gate parameters of one convolutional GRU layer.

    The input-to-hidden convolutions may be strided (spatial downsampling);
    hidden-to-hidden convolutions are always stride 1. One bias per gate,
    applied on the input path.
    """

    wxu: Parameter
    whu: Parameter
    bu: Parameter
    wxr: Parameter
    whr: Parameter
    br: Parameter
    wxc: Parameter
    whc: Parameter
    bc: Parameter
    stride: int = 1

    def parameters(self):
        return [self.wxu, self.whu, self.bu, self.wxr, self.whr, self.br,
                self.wxc, self.whc, self.bc]

    @staticmethod
    def init(rng: np.random.Generator, prefix: str, c_in: int, c_hidden: int,
             k: int = 3, stride: int = 1, dtype=np.float32) -> "GruParams":
        def conv_w(name, ci, co):
            return Parameter(f"{prefix}.{name}", xavier_uniform(rng, (co, ci, k, k)), dtype=dtype)

        def bias(name, co):
            return Parameter(f"{prefix}.{name}", np.zeros(co), dtype=dtype)

        return GruParams(
            wxu=conv_w("wxu", c_in, c_hidden), whu=conv_w("whu", c_hidden, c_hidden), bu=bias("bu", c_hidden),
            wxr=conv_w("wxr", c_in, c_hidden), whr=conv_w("whr", c_hidden, c_hidden), br=bias("br", c_hidden),
            wxc=conv_w("wxc", c_in, c_hidden), whc=conv_w("whc", c_hidden, c_hidden), bc=bias("bc", c_hidden),
            stride=stride,
        )


def conv_gru_cell(x: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """One GRU step: u = sig(conv(x)+conv(h)), r = sig(conv(x)+conv(h)),
    c = tanh(conv(x)+conv(r*h)), h' = (1-u)*h + u*c."""
    s = p.stride
    _, xh, xw = x.shape
    exp_h = -(-xh // s)
    exp_w = -(-xw // s)
    if h.shape[1:] != (exp_h, exp_w):
        raise ShapeError(
            f"conv_gru_cell: hidden spatial dims {h.shape[1:]} misaligned with "
            f"input {x.shape[1:]} at stride {s} (expected {(exp_h, exp_w)})")
    u = sigmoid(add(conv2d(x, p.wxu.tensor, p.bu.tensor, stride=s),
                    conv2d(h, p.whu.tensor)))
    r = sigmoid(add(conv2d(x, p.wxr.tensor, p.br.tensor, stride=s),
                    conv2d(h, p.whr.tensor)))
    c = tanh(add(conv2d(x, p.wxc.tensor, p.bc.tensor, stride=s),
                 conv2d(mul(r, h), p.whc.tensor)))
    return add(sub(h, mul(u, h)), mul(u, c))


# ---------------------------------------------------------------------------
# initialization


def xavier_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Glorot-uniform init; fans derived from OIHW or (out, in) shapes."""
    if len(shape) == 4:
        rec = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rec, shape[0] * rec
    elif len(shape) == 2:
        fan_in, fan_out = shape[1], shape[0]
    else:
        fan_in = fan_out = int(np.prod(shape))
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape)
