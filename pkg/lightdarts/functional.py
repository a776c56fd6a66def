"""
Differentiable primitives over ``Tensor``.

Every primitive computes its forward value with numpy in float64 and records
a vector-Jacobian product on the active tape. Only the primitives the
candidate operations, the cells and the classifier head need are provided.
"""

from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ShapeError
from .tensor import Tensor, record


def _require_ndim(name: str, x: Tensor, ndim: int) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{name} expects a {ndim}-D tensor, got shape {x.shape}")


def _require_same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _require_batch(name: str, x: Tensor) -> None:
    if x.shape[0] == 0:
        raise ShapeError(f"{name}: empty batch")


def _conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    Grouped, dilated 2-D cross-correlation.

    Args:
        x: Input of shape (N, C, H, W)
        kernel: Weights of shape (Co, C/groups, kh, kw)
        stride: Step between output positions
        dilation: Spacing between kernel taps
        groups: Number of channel groups
        padding: Zero padding on every spatial border

    Returns:
        Tensor of shape (N, Co, H', W')

    Raises:
        ShapeError: If channel counts, groups or spatial sizes disagree
    """
    _require_ndim("conv2d input", x, 4)
    _require_ndim("conv2d kernel", kernel, 4)
    if stride < 1 or dilation < 1 or groups < 1 or padding < 0:
        raise ShapeError(
            f"conv2d: invalid stride={stride}, dilation={dilation}, "
            f"groups={groups}, padding={padding}"
        )
    n, c, h, w = x.shape
    co, cg, kh, kw = kernel.shape
    if c % groups != 0 or co % groups != 0:
        raise ShapeError(
            f"conv2d: input channels {c} and output channels {co} "
            f"must both be divisible by groups={groups}"
        )
    if cg != c // groups:
        raise ShapeError(
            f"conv2d: kernel expects {cg} channels per group, input has "
            f"{c} channels / {groups} groups = {c // groups}"
        )
    ho = _conv_output_size(h, kh, stride, dilation, padding)
    wo = _conv_output_size(w, kw, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} (dilation {dilation}) does not fit "
            f"input {h}x{w} with padding {padding}"
        )

    cog = co // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    windows = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :ho, :wo]
    cols = windows.reshape(n, groups, cg, ho, wo, kh, kw)
    wg = kernel.data.reshape(groups, cog, cg, kh, kw)
    out = np.einsum("ngchwab,gocab->ngohw", cols, wg).reshape(n, co, ho, wo)

    def vjp(g: np.ndarray):
        gg = g.reshape(n, groups, cog, ho, wo)
        dkernel = np.einsum("ngohw,ngchwab->gocab", gg, cols).reshape(kernel.shape)
        dcols = np.einsum("ngohw,gocab->ngchwab", gg, wg).reshape(n, c, ho, wo, kh, kw)
        dxp = np.zeros_like(xp)
        for a in range(kh):
            top = a * dilation
            for b in range(kw):
                left = b * dilation
                dxp[
                    :,
                    :,
                    top : top + stride * (ho - 1) + 1 : stride,
                    left : left + stride * (wo - 1) + 1 : stride,
                ] += dcols[:, :, :, :, a, b]
        dx = dxp[:, :, padding : padding + h, padding : padding + w]
        return dx, dkernel

    return record("conv2d", (x, kernel), out, vjp)


def pool2d(x: Tensor, kind: str, window: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """
    Windowed average or maximum.

    The average divides by the number of in-bounds elements only. Max ties go
    to the first window position in row-major order.
    """
    _require_ndim("pool2d input", x, 4)
    if kind not in ("avg", "max"):
        raise ValueError(f"pool2d kind must be 'avg' or 'max', got {kind!r}")
    if stride not in (1, 2):
        raise ShapeError(f"pool2d stride must be 1 or 2, got {stride}")
    if padding < 0 or padding >= window:
        raise ShapeError(f"pool2d padding {padding} invalid for window {window}")

    n, c, h, w = x.shape
    ho = _conv_output_size(h, window, stride, 1, padding)
    wo = _conv_output_size(w, window, stride, 1, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool2d: window {window} does not fit input {h}x{w}")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))

    def scatter(per_offset, shape):
        dxp = np.zeros(shape)
        for a in range(window):
            for b in range(window):
                dxp[
                    :,
                    :,
                    a : a + stride * (ho - 1) + 1 : stride,
                    b : b + stride * (wo - 1) + 1 : stride,
                ] += per_offset(a, b)
        return dxp[:, :, padding : padding + h, padding : padding + w]

    if kind == "avg":
        xp = np.pad(x.data, pad)
        inside = np.pad(np.ones((h, w)), pad[2:])
        windows = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
        counts = sliding_window_view(inside, (window, window))[::stride, ::stride]
        counts = counts.sum(axis=(-1, -2))
        out = windows[:, :, :ho, :wo].sum(axis=(-1, -2)) / counts[:ho, :wo]

        def vjp_avg(g: np.ndarray):
            share = g / counts[:ho, :wo]
            return (scatter(lambda a, b: share, xp.shape),)

        return record("avg_pool2d", (x,), out, vjp_avg)

    xp = np.pad(x.data, pad, constant_values=-np.inf)
    windows = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows[:, :, :ho, :wo].reshape(n, c, ho, wo, window * window)
    argmax = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def vjp_max(g: np.ndarray):
        return (scatter(lambda a, b: g * (argmax == a * window + b), xp.shape),)

    return record("max_pool2d", (x,), out, vjp_max, branch=argmax)


def elementwise_max(a: Tensor, b: Tensor) -> Tensor:
    """Coordinatewise maximum; the subgradient of a tie goes to ``a``."""
    _require_same_shape("elementwise_max", a, b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g: np.ndarray):
        return g * take_a, g * ~take_a

    return record("elementwise_max", (a, b), out, vjp, branch=take_a)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    out = x.data * positive

    def vjp(g: np.ndarray):
        return (g * positive,)

    return record("relu", (x,), out, vjp, branch=positive)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), out, vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g: np.ndarray):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", (x,), out, vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean negative log-likelihood of integer ``labels`` under ``logits``.

    Raises:
        ShapeError: On an empty batch or labels that do not match the logits
    """
    _require_ndim("cross_entropy logits", logits, 2)
    _require_batch("cross_entropy", logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but labels have shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"cross_entropy: labels must lie in [0, {k}), got {labels.tolist()}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    out = np.array(-log_probs[rows, labels].mean())

    def vjp(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return record("cross_entropy", (logits,), out, vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, D) and weight of shape (O, D)."""
    _require_ndim("linear input", x, 2)
    _require_ndim("linear weight", weight, 2)
    _require_batch("linear", x)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input has {x.shape[1]} features, weight expects {weight.shape[1]}"
        )
    out = x.data @ weight.data.T
    inputs: Tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape}, expected ({weight.shape[0]},)")
        out = out + bias.data
        inputs = (x, weight, bias)

    def vjp(g: np.ndarray):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record("linear", inputs, out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)

    def vjp(g: np.ndarray):
        return g, g

    return record("add", (a, b), a.data + b.data, vjp)


def sum_all(x: Tensor) -> Tensor:
    def vjp(g: np.ndarray):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", (x,), np.array(x.data.sum()), vjp)


def weighted_sum(xs: Sequence[Tensor], weights: Tensor) -> Tensor:
    """``sum_k weights[k] * xs[k]`` accumulated in list order."""
    if weights.ndim != 1 or weights.shape[0] != len(xs):
        raise ShapeError(f"weighted_sum: {len(xs)} inputs but weights have shape {weights.shape}")
    if not xs:
        raise ShapeError("weighted_sum: no inputs")
    for other in xs[1:]:
        _require_same_shape("weighted_sum", xs[0], other)
    out = np.zeros(xs[0].shape)
    for k, term in enumerate(xs):
        out = out + weights.data[k] * term.data

    def vjp(g: np.ndarray):
        grads = [weights.data[k] * g for k in range(len(xs))]
        grads.append(np.array([(g * term.data).sum() for term in xs]))
        return grads

    return record("weighted_sum", (*xs, weights), out, vjp)


def index_row(m: Tensor, row: int) -> Tensor:
    _require_ndim("index_row", m, 2)
    if not 0 <= row < m.shape[0]:
        raise ShapeError(f"index_row: row {row} outside [0, {m.shape[0]})")

    def vjp(g: np.ndarray):
        grad = np.zeros_like(m.data)
        grad[row] = g
        return (grad,)

    return record("index_row", (m,), m.data[row].copy(), vjp)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: no inputs")
    for x in xs:
        _require_ndim("concat_channels", x, 4)
        if x.shape[0] != xs[0].shape[0] or x.shape[2:] != xs[0].shape[2:]:
            raise ShapeError(
                f"concat_channels: shapes {xs[0].shape} and {x.shape} differ outside channels"
            )
    out = np.concatenate([x.data for x in xs], axis=1)
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def vjp(g: np.ndarray):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs))]

    return record("concat_channels", tuple(xs), out, vjp)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    _require_ndim("channel_slice", x, 4)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel_slice [{start}, {stop}) outside {x.shape[1]} channels")

    def vjp(g: np.ndarray):
        grad = np.zeros_like(x.data)
        grad[:, start:stop] = g
        return (grad,)

    return record("channel_slice", (x,), x.data[:, start:stop].copy(), vjp)


def offset_pixels(x: Tensor) -> Tensor:
    """Shift the image one pixel up and left, filling the last row and column with 0."""
    _require_ndim("offset_pixels", x, 4)
    out = np.zeros_like(x.data)
    out[:, :, :-1, :-1] = x.data[:, :, 1:, 1:]

    def vjp(g: np.ndarray):
        grad = np.zeros_like(x.data)
        grad[:, :, 1:, 1:] = g[:, :, :-1, :-1]
        return (grad,)

    return record("offset_pixels", (x,), out, vjp)


def zeros_strided(x: Tensor, stride: int) -> Tensor:
    """Zeros shaped like ``x`` subsampled by ``stride``; the gradient is zero."""
    _require_ndim("zeros_strided", x, 4)
    out = np.zeros_like(x.data[:, :, ::stride, ::stride])

    def vjp(g: np.ndarray):
        return (np.zeros_like(x.data),)

    return record("zeros_strided", (x,), out, vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_ndim("global_avg_pool", x, 4)
    _require_batch("global_avg_pool", x)
    n, c, h, w = x.shape

    def vjp(g: np.ndarray):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return record("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), vjp)


def channel_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tensor:
    """
    Per-channel normalisation with learned scale and shift.

    Statistics are taken over batch and spatial dims of ``x`` unless frozen
    ``stats`` (mean, variance) are supplied.
    """
    _require_ndim("channel_norm", x, 4)
    _require_batch("channel_norm", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"channel_norm: {c} channels but gamma {gamma.shape} and beta {beta.shape}"
        )
    if stats is None:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
    else:
        mean, var = stats
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    count = x.shape[0] * x.shape[2] * x.shape[3]

    def vjp(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if stats is not None:
            dx = dxhat * inv_std[None, :, None, None]
        else:
            dx = (
                inv_std[None, :, None, None]
                / count
                * (
                    count * dxhat
                    - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
        return dx, dgamma, dbeta

    return record("channel_norm", (x, gamma, beta), out, vjp)
