"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records every primitive applied during one forward pass.
Node ids increase in creation order, so walking them in reverse is already
a valid topological order for backpropagation; no sort is needed. Tapes are
cheap, single-use objects: build one per forward pass, call
:meth:`Tape.backward` once on a scalar node, read gradients off the leaves,
drop the tape.

Values are plain ``numpy.ndarray`` objects and are never mutated after a
node is recorded. Gradient accumulation always allocates (``a + b`` rather
than ``+=``) so backward functions may safely return views of upstream
gradients. All primitives follow the dtype of their inputs; float64 is the
expected default and float32 works end to end when a caller opts in.

Shape conventions: spatial operators accept a single sample ``(H, W, C)``
or a batch ``(B, H, W, C)``. Complex-valued signals travel as a trailing
axis of size 2 holding (real, imaginary); the Fourier primitives
:func:`fft2`, :func:`ifft2` and :func:`magnitude_replace` operate on that
layout with the spatial axes at positions ``(-3, -2)``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError

# Magnitudes below this are treated as zero when dividing by |z| or
# differentiating sqrt; keeps every primitive finite everywhere.
EPS_MAG = 1e-12


class Tape:
    """Single-use record of one forward computation."""

    def __init__(self) -> None:
        self._backwards: list[Callable[[np.ndarray], Sequence[np.ndarray | None]] | None] = []
        self._parents: list[tuple[int, ...]] = []
        self._grads: list[np.ndarray | None] | None = None
        self._released = False

    def __len__(self) -> int:
        return len(self._backwards)

    def leaf(self, value: np.ndarray) -> "TapeTensor":
        """Register an input node (parameter or constant-with-gradient)."""
        return self._record(np.asarray(value), None, ())

    def _record(self, value, backward, parents) -> "TapeTensor":
        if self._released:
            raise ConfigurationError("cannot record on a released tape")
        nid = len(self._backwards)
        self._backwards.append(backward)
        self._parents.append(parents)
        return TapeTensor(self, nid, value)

    def release(self) -> None:
        """Drop the recorded graph, closure caches, and gradients.

        Values already read off TapeTensors stay valid, but the tape can
        no longer record or backpropagate. Loops that build one tape per
        batch call this so the large cached buffers are freed immediately
        by reference counting instead of waiting on the cycle collector.
        """
        self._backwards = []
        self._parents = []
        self._grads = None
        self._released = True

    def backward(self, loss: "TapeTensor") -> None:
        """Backpropagate from a scalar node through the recorded graph."""
        if self._released:
            raise ConfigurationError("cannot backpropagate on a released tape")
        if loss.tape is not self:
            raise ConfigurationError("loss tensor belongs to a different tape")
        if loss.value.shape != ():
            raise ConfigurationError(
                f"backward requires a scalar loss node, got shape {loss.value.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self._backwards)
        grads[loss.node_id] = np.ones((), dtype=loss.value.dtype)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            fn = self._backwards[nid]
            if g is None or fn is None:
                continue
            for pid, pg in zip(self._parents[nid], fn(g)):
                if pg is None:
                    continue
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        self._grads = grads


class TapeTensor:
    """An array value bound to one node of a :class:`Tape`."""

    __slots__ = ("tape", "node_id", "value")

    def __init__(self, tape: Tape, node_id: int, value: np.ndarray) -> None:
        self.tape = tape
        self.node_id = node_id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def grad(self) -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. this node.

        Nodes the loss does not depend on get an all-zero gradient.
        """
        if self.tape._grads is None:
            raise RuntimeError("gradient requested before backward() ran")
        g = self.tape._grads[self.node_id]
        if g is None:
            return np.zeros_like(self.value)
        return np.broadcast_to(g, self.value.shape) if g.shape != self.value.shape else g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"TapeTensor(node={self.node_id}, shape={self.value.shape})"


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, TapeTensor):
            return a.tape
    raise ConfigurationError("at least one operand must be a TapeTensor")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, forward, grad_a, grad_b) -> TapeTensor:
    tape = _tape_of(a, b)
    a_t = isinstance(a, TapeTensor)
    b_t = isinstance(b, TapeTensor)
    av = a.value if a_t else np.asarray(a)
    bv = b.value if b_t else np.asarray(b)
    out = forward(av, bv)
    parents = tuple(x.node_id for x, is_t in ((a, a_t), (b, b_t)) if is_t)

    def backward(g):
        res = []
        if a_t:
            res.append(_unbroadcast(grad_a(g, av, bv), av.shape))
        if b_t:
            res.append(_unbroadcast(grad_b(g, av, bv), bv.shape))
        return res

    return tape._record(out, backward, parents)


def add(a, b) -> TapeTensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> TapeTensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> TapeTensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a: TapeTensor, c: float) -> TapeTensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return a.tape._record(a.value * c, backward, (a.node_id,))


def abs_(a: TapeTensor) -> TapeTensor:
    """Elementwise absolute value; subgradient 0 at the origin."""
    sign = np.sign(a.value)

    def backward(g):
        return (g * sign,)

    return a.tape._record(np.abs(a.value), backward, (a.node_id,))


def sqrt_(a: TapeTensor) -> TapeTensor:
    """Elementwise square root of a non-negative operand.

    The gradient divisor is clamped at EPS_MAG so the derivative stays
    finite at zero.
    """
    root = np.sqrt(a.value)

    def backward(g):
        return (g * (0.5 / np.sqrt(np.maximum(a.value, EPS_MAG))),)

    return a.tape._record(root, backward, (a.node_id,))


def leaky_relu(a: TapeTensor, slope: float = 0.2) -> TapeTensor:
    pos = a.value >= 0
    out = np.where(pos, a.value, slope * a.value)

    def backward(g):
        return (g * np.where(pos, 1.0, slope),)

    return a.tape._record(out, backward, (a.node_id,))


def sigmoid(a: TapeTensor) -> TapeTensor:
    # branch on sign so exp never sees a large positive argument
    x = a.value
    neg = x < 0
    ex = np.exp(np.where(neg, x, -x))
    out = np.where(neg, ex / (1.0 + ex), 1.0 / (1.0 + ex))

    def backward(g):
        return (g * out * (1.0 - out),)

    return a.tape._record(out, backward, (a.node_id,))


def sum_(a: TapeTensor) -> TapeTensor:
    """Reduce to a scalar node (shape ())."""
    out = np.asarray(a.value.sum(), dtype=a.value.dtype)

    def backward(g):
        return (np.full(a.value.shape, g, dtype=a.value.dtype),)

    return a.tape._record(out, backward, (a.node_id,))


def narrow(a: TapeTensor, axis: int, start: int, length: int) -> TapeTensor:
    """Slice `length` entries from `start` along one axis."""
    n = a.value.shape[axis]
    if start < 0 or length < 0 or start + length > n:
        raise ConfigurationError(
            f"narrow range [{start}, {start + length}) exceeds axis of size {n}"
        )
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        gx = np.zeros(a.value.shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return a.tape._record(a.value[idx], backward, (a.node_id,))


def reshape(a: TapeTensor, shape: tuple[int, ...]) -> TapeTensor:
    def backward(g):
        return (g.reshape(a.value.shape),)

    return a.tape._record(a.value.reshape(shape), backward, (a.node_id,))


def concat(tensors: Sequence[TapeTensor], axis: int = -1) -> TapeTensor:
    tape = _tape_of(*tensors)
    values = [t.value for t in tensors]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes[:-1])

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._record(out, backward, tuple(t.node_id for t in tensors))


def nearest_upsample2(a: TapeTensor) -> TapeTensor:
    """Nearest-neighbor 2x upsampling of the spatial axes of (..., H, W, C)."""
    out = a.value.repeat(2, axis=-3).repeat(2, axis=-2)
    h, w = a.value.shape[-3], a.value.shape[-2]
    lead = a.value.shape[:-3]
    c = a.value.shape[-1]

    def backward(g):
        return (g.reshape(*lead, h, 2, w, 2, c).sum(axis=(-4, -2)),)

    return a.tape._record(out, backward, (a.node_id,))


def global_avg_pool(a: TapeTensor) -> TapeTensor:
    """Mean over the spatial axes: (..., H, W, C) -> (..., C)."""
    h, w = a.value.shape[-3], a.value.shape[-2]
    out = a.value.mean(axis=(-3, -2))

    def backward(g):
        return (np.broadcast_to(g[..., None, None, :] / (h * w), a.value.shape),)

    return a.tape._record(out, backward, (a.node_id,))


def dense(x: TapeTensor, w: TapeTensor, b: TapeTensor) -> TapeTensor:
    """Affine map on the trailing axis: (..., Cin) @ (Cin, Cout) + (Cout,)."""
    cin = x.value.shape[-1]
    if w.value.shape[0] != cin:
        raise ConfigurationError(
            f"dense weight expects {w.value.shape[0]} input features, got {cin}"
        )
    out = x.value @ w.value + b.value

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.value.reshape(-1, cin)
        return (
            (g2 @ w.value.T).reshape(x.value.shape),
            x2.T @ g2,
            g2.sum(axis=0),
        )

    return x.tape._record(out, backward, (x.node_id, w.node_id, b.node_id))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Strided sliding windows of a padded batch: (B, Ho, Wo, kh, kw, C)."""
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # view: (B, Hf, Wf, C, kh, kw)
    view = view[:, ::stride, ::stride]
    return np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3))


def conv2d(x: TapeTensor, w: TapeTensor, b: TapeTensor, stride: int = 1) -> TapeTensor:
    """2-D convolution with zero 'same' padding.

    x: (H, W, Cin) or (B, H, W, Cin); w: (kh, kw, Cin, Cout); b: (Cout,).
    Stride-1 output preserves H x W; stride s yields ceil(H/s) x ceil(W/s).
    Implemented as im2col plus one matrix product.
    """
    xv = x.value
    squeeze = xv.ndim == 3
    if squeeze:
        xv = xv[None]
    if xv.ndim != 4:
        raise ConfigurationError(f"conv2d input must be 3- or 4-D, got {x.value.ndim}-D")
    kh, kw, cin, cout = w.value.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError("conv2d kernel sides must be odd for same padding")
    if xv.shape[-1] != cin:
        raise ConfigurationError(
            f"conv2d weight expects {cin} input channels, got {xv.shape[-1]}"
        )
    if stride < 1:
        raise ConfigurationError("conv2d stride must be >= 1")
    bsz, h, wdt = xv.shape[0], xv.shape[1], xv.shape[2]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xv, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = _im2col(xp, kh, kw, stride)
    ho, wo = cols.shape[1], cols.shape[2]
    cols2 = cols.reshape(bsz * ho * wo, kh * kw * cin)
    wmat = w.value.reshape(kh * kw * cin, cout)
    out = (cols2 @ wmat + b.value).reshape(bsz, ho, wo, cout)
    if squeeze:
        out = out[0]

    def backward(g):
        g2 = g.reshape(bsz * ho * wo, cout)
        gw = (cols2.T @ g2).reshape(kh, kw, cin, cout)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(bsz, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                gxp[
                    :,
                    ki : ki + (ho - 1) * stride + 1 : stride,
                    kj : kj + (wo - 1) * stride + 1 : stride,
                    :,
                ] += gcols[:, :, :, ki, kj, :]
        gx = gxp[:, ph : ph + h, pw : pw + wdt, :]
        return (gx.reshape(x.value.shape), gw, gb)

    return x.tape._record(out, backward, (x.node_id, w.node_id, b.node_id))


def instance_norm(
    x: TapeTensor, gamma: TapeTensor, beta: TapeTensor, eps: float = 1e-5
) -> TapeTensor:
    """Normalize each channel over its spatial extent, then scale and shift.

    Uses the population variance of each (sample, channel) plane. gamma and
    beta have shape (C,).
    """
    if gamma.value.shape != (x.value.shape[-1],):
        raise ConfigurationError(
            f"instance_norm gamma shape {gamma.value.shape} does not match "
            f"{x.value.shape[-1]} channels"
        )
    axes = (-3, -2)
    mu = x.value.mean(axis=axes, keepdims=True)
    var = x.value.var(axis=axes, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = (x.value - mu) / s
    out = xhat * gamma.value + beta.value
    reduce_axes = tuple(range(x.value.ndim - 1))

    def backward(g):
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        gxhat = g * gamma.value
        gx = (
            gxhat
            - gxhat.mean(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
        ) / s
        return (gx, ggamma, gbeta)

    return x.tape._record(out, backward, (x.node_id, gamma.node_id, beta.node_id))


def _as_complex(pair: np.ndarray) -> np.ndarray:
    return pair[..., 0] + 1j * pair[..., 1]


def _as_pair(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1)


def fft2(a: TapeTensor) -> TapeTensor:
    """Unnormalized 2-D DFT of a (..., H, W, 2) real/imaginary pair."""
    if a.value.shape[-1] != 2:
        raise ConfigurationError("fft2 expects a trailing (re, im) axis of size 2")
    z = _as_complex(a.value)
    out = _as_pair(np.fft.fft2(z, axes=(-2, -1)))
    hw = z.shape[-2] * z.shape[-1]

    def backward(g):
        gz = np.fft.ifft2(_as_complex(g), axes=(-2, -1)) * hw
        return (_as_pair(gz),)

    return a.tape._record(out.astype(a.value.dtype, copy=False), backward, (a.node_id,))


def ifft2(a: TapeTensor) -> TapeTensor:
    """Inverse of :func:`fft2` (carries the 1/(H*W) factor)."""
    if a.value.shape[-1] != 2:
        raise ConfigurationError("ifft2 expects a trailing (re, im) axis of size 2")
    z = _as_complex(a.value)
    out = _as_pair(np.fft.ifft2(z, axes=(-2, -1)))
    hw = z.shape[-2] * z.shape[-1]

    def backward(g):
        gz = np.fft.fft2(_as_complex(g), axes=(-2, -1)) / hw
        return (_as_pair(gz),)

    return a.tape._record(out.astype(a.value.dtype, copy=False), backward, (a.node_id,))


def magnitude_replace(a: TapeTensor, target: np.ndarray) -> TapeTensor:
    """Replace the magnitude of a (..., H, W, 2) pair with a fixed target.

    Where the input magnitude is below EPS_MAG the output takes the target
    magnitude at phase zero and the gradient vanishes; everywhere else the
    phase is kept exactly. `target` is a non-negative constant (no gradient).
    """
    if a.value.shape[-1] != 2:
        raise ConfigurationError("magnitude_replace expects a trailing (re, im) axis")
    target = np.asarray(target)
    if target.shape != a.value.shape[:-1]:
        raise ConfigurationError(
            f"target magnitude shape {target.shape} does not match field "
            f"shape {a.value.shape[:-1]}"
        )
    re, im = a.value[..., 0], a.value[..., 1]
    m = np.hypot(re, im)
    small = m < EPS_MAG
    msafe = np.where(small, 1.0, m)
    out = np.empty_like(a.value)
    out[..., 0] = np.where(small, target, target * re / msafe)
    out[..., 1] = np.where(small, 0.0, target * im / msafe)

    def backward(g):
        g0, g1 = g[..., 0], g[..., 1]
        common = np.where(small, 0.0, target / (msafe * msafe * msafe))
        gx = np.empty_like(a.value)
        gx[..., 0] = common * (g0 * im * im - g1 * re * im)
        gx[..., 1] = common * (g1 * re * re - g0 * re * im)
        return (gx,)

    return a.tape._record(out, backward, (a.node_id,))
