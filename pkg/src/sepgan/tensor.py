"""Dense 4-D tensors with tape-based reverse-mode differentiation.

Everything flowing through the models is a float64 array of shape
(N, C, H, W); scalars are (1, 1, 1, 1).  Primitives record themselves on the
active :class:`Tape` (if any); running outside a tape is plain inference.
No broadcasting anywhere: shape alignment is explicit at every call site.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not line up."""


class Tensor:
    """4-D float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (N,C,H,W); got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def detached(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar used by the loss algebra
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, scalar: float) -> "Tensor":
        return scale(self, float(scalar))

    __rmul__ = __mul__


def scalar(value: float) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), float(value)))


def full(shape: Sequence[int], value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(tuple(shape), float(value)), requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of primitive ops for one backward pass.

    Recording order equals execution order, so walking the list in reverse is
    a valid topological order of the computation graph.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[tuple[Tensor, Callable], ...]]] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def record(self, out: Tensor, pairs: tuple[tuple[Tensor, Callable], ...]) -> None:
        self._ops.append((out, pairs))
        self._outputs.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every requires_grad tensor reachable from loss.

        Grads accumulate; callers that want fresh gradients zero first.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise RuntimeError("loss was not produced on the active tape")
        loss.accumulate_grad(np.ones_like(loss.data))
        for out, pairs in reversed(self._ops):
            g = out.grad
            if g is None:
                continue
            for tensor, pull in pairs:
                if tensor.requires_grad:
                    tensor.accumulate_grad(pull(g))

    def __len__(self) -> int:
        return len(self._ops)


def _emit(out_data: np.ndarray, pairs: tuple[tuple[Tensor, Callable], ...]) -> Tensor:
    """Wrap a forward result, recording backward rules if a tape is active."""
    tape = _ACTIVE_TAPE
    needs = tape is not None and any(t.requires_grad for t, _ in pairs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, pairs)
    return out


# --------------------------------------------------------------------------
# convolution family
# --------------------------------------------------------------------------

def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv_args(k: int, stride: int, pad: int, h: int, w: int) -> None:
    if k < 1 or stride < 1 or pad < 0:
        raise ValueError(f"invalid conv arguments k={k} stride={stride} pad={pad}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"kernel {k} larger than padded input {h}x{w} with pad {pad}")


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x_pad: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N,C,H',W',K,K) view, strided by `stride`."""
    win = np.lib.stride_tricks.sliding_window_view(x_pad, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _scatter_windows(shape_pad, dcol_fn, k: int, stride: int) -> np.ndarray:
    """col2im: accumulate per-(u,v) window contributions into a padded buffer.

    dcol_fn(u, v) must return the (N,C,H',W') contribution of kernel tap (u,v).
    """
    out = np.zeros(shape_pad)
    n, c, hp, wp = shape_pad
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    h_span = (h_out - 1) * stride + 1
    w_span = (w_out - 1) * stride + 1
    for u in range(k):
        for v in range(k):
            out[:, :, u:u + h_span:stride, v:v + w_span:stride] += dcol_fn(u, v)
    return out


def _crop_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


def _bias_pairs(bias: Tensor | None, gsum: Callable) -> tuple:
    return ((bias, gsum),) if bias is not None else ()


def _check_bias(bias: Tensor | None, channels: int, op: str) -> None:
    if bias is not None and bias.shape != (1, channels, 1, 1):
        raise ShapeError(f"{op}: bias shape {bias.shape} != (1,{channels},1,1)")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N,Cin,H,W) with (Cout,Cin,K,K) filters."""
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {weight.shape}")
    if cin != wcin:
        raise ShapeError(
            f"conv2d: input shape {x.shape} has {cin} channels but "
            f"weight shape {weight.shape} expects {wcin}")
    _check_conv_args(k, stride, pad, h, w)
    _check_bias(bias, cout, "conv2d")

    xp = _pad_hw(x.data, pad)
    win = _windows(xp, k, stride)            # (N,Cin,H',W',K,K)
    n_, _, ho, wo = win.shape[0], win.shape[1], win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n_ * ho * wo, cin * k * k)
    wmat = weight.data.reshape(cout, cin * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data

    def pull_x(g: np.ndarray) -> np.ndarray:
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dcols = (gmat @ wmat).reshape(n, ho, wo, cin, k, k)
        gx = _scatter_windows(xp.shape, lambda u, v: dcols[..., u, v].transpose(0, 3, 1, 2),
                              k, stride)
        return _crop_pad(gx, pad)

    def pull_w(g: np.ndarray) -> np.ndarray:
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        return (gmat.T @ cols).reshape(cout, cin, k, k)

    pairs = ((x, pull_x), (weight, pull_w)) + _bias_pairs(
        bias, lambda g: g.sum(axis=(0, 2, 3), keepdims=True))
    return _emit(out, pairs)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel spatial convolution; channel c of the output depends only
    on channel c of the input."""
    n, c, h, w = x.shape
    wc, one, k, k2 = weight.shape
    if one != 1 or k != k2:
        raise ShapeError(f"depthwise_conv2d: weight must be (C,1,K,K), got {weight.shape}")
    if wc != c:
        raise ShapeError(
            f"depthwise_conv2d: weight shape {weight.shape} has {wc} channels "
            f"but input shape {x.shape} has {c}")
    _check_conv_args(k, stride, pad, h, w)
    _check_bias(bias, c, "depthwise_conv2d")

    xp = _pad_hw(x.data, pad)
    win = _windows(xp, k, stride)            # (N,C,H',W',K,K)
    wk = weight.data[:, 0]                   # (C,K,K)
    out = np.einsum("nchwuv,cuv->nchw", win, wk, optimize=True)
    if bias is not None:
        out = out + bias.data

    def pull_x(g: np.ndarray) -> np.ndarray:
        gx = _scatter_windows(xp.shape,
                              lambda u, v: g * wk[None, :, u, v, None, None],
                              k, stride)
        return _crop_pad(gx, pad)

    def pull_w(g: np.ndarray) -> np.ndarray:
        return np.einsum("nchwuv,nchw->cuv", win, g, optimize=True)[:, None]

    pairs = ((x, pull_x), (weight, pull_w)) + _bias_pairs(
        bias, lambda g: g.sum(axis=(0, 2, 3), keepdims=True))
    return _emit(out, pairs)


def pointwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution mixing channels at each spatial site."""
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if k != 1 or k2 != 1:
        raise ShapeError(f"pointwise_conv2d: kernel must be 1x1, got {weight.shape}")
    if cin != wcin:
        raise ShapeError(
            f"pointwise_conv2d: input shape {x.shape} has {cin} channels but "
            f"weight shape {weight.shape} expects {wcin}")
    _check_bias(bias, cout, "pointwise_conv2d")

    wmat = weight.data[:, :, 0, 0]           # (Cout,Cin)
    out = np.einsum("nchw,oc->nohw", x.data, wmat, optimize=True)
    if bias is not None:
        out = out + bias.data

    def pull_x(g: np.ndarray) -> np.ndarray:
        return np.einsum("nohw,oc->nchw", g, wmat, optimize=True)

    def pull_w(g: np.ndarray) -> np.ndarray:
        return np.einsum("nchw,nohw->oc", x.data, g, optimize=True)[:, :, None, None]

    pairs = ((x, pull_x), (weight, pull_w)) + _bias_pairs(
        bias, lambda g: g.sum(axis=(0, 2, 3), keepdims=True))
    return _emit(out, pairs)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of conv2d: (N,Cin,H,W) x (Cin,Cout,K,K) -> (N,Cout,H',W')
    with H' = (H-1)*stride - 2*pad + K."""
    n, cin, h, w = x.shape
    wcin, cout, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv_transpose2d: non-square kernel {weight.shape}")
    if cin != wcin:
        raise ShapeError(
            f"conv_transpose2d: input shape {x.shape} has {cin} channels but "
            f"weight shape {weight.shape} expects {wcin}")
    if stride < 1 or pad < 0 or k < 1:
        raise ValueError(f"invalid arguments stride={stride} pad={pad} k={k}")
    ho = (h - 1) * stride - 2 * pad + k
    wo = (w - 1) * stride - 2 * pad + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: output {ho}x{wo} is empty")
    _check_bias(bias, cout, "conv_transpose2d")

    full_shape = (n, cout, (h - 1) * stride + k, (w - 1) * stride + k)
    wmat = weight.data                        # (Cin,Cout,K,K)
    full_out = _scatter_windows(
        full_shape,
        lambda u, v: np.einsum("nchw,co->nohw", x.data, wmat[:, :, u, v], optimize=True),
        k, stride)
    out = _crop_pad(full_out, pad)
    if bias is not None:
        out = out + bias.data

    def pull_x(g: np.ndarray) -> np.ndarray:
        gp = _pad_hw(g, pad)
        win = _windows(gp, k, stride)         # (N,Cout,H,W,K,K)
        return np.einsum("nohwuv,couv->nchw", win, wmat, optimize=True)

    def pull_w(g: np.ndarray) -> np.ndarray:
        gp = _pad_hw(g, pad)
        win = _windows(gp, k, stride)         # (N,Cout,H,W,K,K)
        return np.einsum("nchw,nohwuv->couv", x.data, win, optimize=True)

    pairs = ((x, pull_x), (weight, pull_w)) + _bias_pairs(
        bias, lambda g: g.sum(axis=(0, 2, 3), keepdims=True))
    return _emit(out, pairs)


def depthwise_conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                               stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel transposed convolution, weight (C,1,K,K)."""
    n, c, h, w = x.shape
    wc, one, k, k2 = weight.shape
    if one != 1 or k != k2:
        raise ShapeError(f"depthwise_conv_transpose2d: weight must be (C,1,K,K), got {weight.shape}")
    if wc != c:
        raise ShapeError(
            f"depthwise_conv_transpose2d: weight shape {weight.shape} has {wc} "
            f"channels but input shape {x.shape} has {c}")
    ho = (h - 1) * stride - 2 * pad + k
    wo = (w - 1) * stride - 2 * pad + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"depthwise_conv_transpose2d: output {ho}x{wo} is empty")
    _check_bias(bias, c, "depthwise_conv_transpose2d")

    wk = weight.data[:, 0]                    # (C,K,K)
    full_shape = (n, c, (h - 1) * stride + k, (w - 1) * stride + k)
    full_out = _scatter_windows(
        full_shape, lambda u, v: x.data * wk[None, :, u, v, None, None], k, stride)
    out = _crop_pad(full_out, pad)
    if bias is not None:
        out = out + bias.data

    def pull_x(g: np.ndarray) -> np.ndarray:
        gp = _pad_hw(g, pad)
        win = _windows(gp, k, stride)         # (N,C,H,W,K,K)
        return np.einsum("nchwuv,cuv->nchw", win, wk, optimize=True)

    def pull_w(g: np.ndarray) -> np.ndarray:
        gp = _pad_hw(g, pad)
        win = _windows(gp, k, stride)
        return np.einsum("nchw,nchwuv->cuv", x.data, win, optimize=True)[:, None]

    pairs = ((x, pull_x), (weight, pull_w)) + _bias_pairs(
        bias, lambda g: g.sum(axis=(0, 2, 3), keepdims=True))
    return _emit(out, pairs)


# --------------------------------------------------------------------------
# normalization and activations
# --------------------------------------------------------------------------

def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalization over H,W with population variance."""
    n, c, h, w = x.shape
    if h * w < 2:
        raise ShapeError(f"instance_norm needs H*W >= 2, got {h}x{w}")
    if eps <= 0:
        raise ValueError(f"instance_norm needs eps > 0, got {eps}")
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ShapeError(
            f"instance_norm: affine shapes {gamma.shape}/{beta.shape} != (1,{c},1,1)")

    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def pull_x(g: np.ndarray) -> np.ndarray:
        gh = g * gamma.data
        mean_g = gh.mean(axis=(2, 3), keepdims=True)
        mean_gx = (gh * xhat).mean(axis=(2, 3), keepdims=True)
        return inv * (gh - mean_g - xhat * mean_gx)

    def pull_gamma(g: np.ndarray) -> np.ndarray:
        return (g * xhat).sum(axis=(0, 2, 3), keepdims=True)

    def pull_beta(g: np.ndarray) -> np.ndarray:
        return g.sum(axis=(0, 2, 3), keepdims=True)

    return _emit(out, ((x, pull_x), (gamma, pull_gamma), (beta, pull_beta)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), ((x, lambda g: g * mask),))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return _emit(x.data * factor, ((x, lambda g: g * factor),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, ((x, lambda g: g * (1.0 - y * y)),))


# --------------------------------------------------------------------------
# structural ops
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit(a.data + b.data, ((a, lambda g: g), (b, lambda g: g)))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit(x.data * factor, ((x, lambda g: g * factor),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} differ off-channel")
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit(out, ((a, lambda g: g[:, :ca]), (b, lambda g: g[:, ca:])))


# --------------------------------------------------------------------------
# reductions and losses
# --------------------------------------------------------------------------

def mean(x: Tensor) -> Tensor:
    size = x.size
    out = np.full((1, 1, 1, 1), x.data.mean())
    return _emit(out, ((x, lambda g: np.full(x.shape, g.reshape(())[()] / size)),))


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; subgradient 0 where a == b."""
    if a.shape != b.shape:
        raise ShapeError(f"l1: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    size = diff.size
    out = np.full((1, 1, 1, 1), np.abs(diff).mean())
    sgn = np.sign(diff)

    def pull_a(g):
        return sgn * (g.reshape(())[()] / size)

    def pull_b(g):
        return sgn * (-g.reshape(())[()] / size)

    return _emit(out, ((a, pull_a), (b, pull_b)))


def bce_with_logits(logits: Tensor, target: float | np.ndarray) -> Tensor:
    """Mean binary cross-entropy in the stable log-sum-exp form.

    `target` is a constant (scalar 0/1 or an array matching the logits);
    gradients flow into the logits only.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(logits.shape, t)
    if t.shape != logits.data.shape:
        raise ShapeError(f"bce_with_logits: target shape {t.shape} != logits {logits.shape}")
    z = logits.data
    size = z.size
    out = np.full((1, 1, 1, 1), (np.logaddexp(0.0, z) - z * t).mean())

    def pull(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return (sig - t) * (g.reshape(())[()] / size)

    return _emit(out, ((logits, pull),))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (N,D,1,1) logits against integer class labels."""
    n, d, h, w = logits.shape
    if h != 1 or w != 1:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N,D,1,1), got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= d:
        raise IndexError(f"label index out of range [0, {d}): {labels}")
    z = logits.data[:, :, 0, 0]
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    picked = z[np.arange(n), labels]
    out = np.full((1, 1, 1, 1), (lse - picked).mean())

    def pull(g):
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (p * (g.reshape(())[()] / n))[:, :, None, None]

    return _emit(out, ((logits, pull),))
