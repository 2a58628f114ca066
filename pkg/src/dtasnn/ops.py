"""Convolution, affine, and normalization primitives.

All convolutions use cross-correlation semantics (no kernel flip). Forward
kernels build strided window views over the zero-padded input and contract
them with einsum; backward scatters per kernel tap, which keeps every
reduction a plain numpy sum with deterministic ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import GeometryError, ShapeError, Tensor, apply_primitive


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation over (B, Cin, H, W) with (Cout, Cin/g, kh, kw).

    ``groups=Cin`` with single-channel kernels gives a depth-wise convolution,
    1x1 kernels give a point-wise one, and ``dilation > 1`` spreads the taps.
    Three kernel paths (point-wise matmul, depth-wise tap loop, general
    im2col + matmul) share one contract and are oracle-tested against a naive
    loop nest.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    Cout, Cg, kh, kw = w.shape
    if C % groups or Cout % groups:
        raise ShapeError(f"channels ({C} in, {Cout} out) not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(f"weight expects {Cg} channels per group, input provides {C // groups}")
    Ho = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if Ho < 1 or Wo < 1:
        raise GeometryError(
            f"conv2d output extent {Ho}x{Wo} invalid for input {H}x{W}, kernel "
            f"{kh}x{kw}, stride {stride}, padding {padding}, dilation {dilation}")

    xv, wv = x.values, w.values
    xp = xv if padding == 0 else np.pad(
        xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    def tap(arr, u, v):
        return arr[:, :,
                   u * dilation:u * dilation + stride * Ho:stride,
                   v * dilation:v * dilation + stride * Wo:stride]

    def crop(gxp):
        return gxp[:, :, padding:padding + H, padding:padding + W]

    if kh == 1 and kw == 1 and groups == 1:
        # point-wise: one matmul over channels
        xs = tap(xp, 0, 0)
        w2 = wv[:, :, 0, 0]
        out = np.moveaxis(np.tensordot(w2, xs, axes=([1], [1])), 0, 1)

        def bwd(g):
            gxs = np.moveaxis(np.tensordot(w2, g, axes=([0], [1])), 0, 1)
            if padding == 0 and stride == 1:
                gx = gxs
            else:
                gxp = np.zeros_like(xp)
                tap(gxp, 0, 0)[...] = gxs
                gx = crop(gxp)
            gw = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            if bias is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))

    elif groups == C and Cg == 1 and Cout == C:
        # depth-wise: accumulate one scaled shifted slice per kernel tap
        out = np.zeros((B, C, Ho, Wo), dtype=xv.dtype)
        buf = np.empty_like(out)
        for u in range(kh):
            for v in range(kw):
                np.multiply(tap(xp, u, v), wv[:, 0, u, v][None, :, None, None], out=buf)
                out += buf

        def bwd(g):
            gw = np.empty_like(wv)
            gxp = np.zeros_like(xp)
            scratch = np.empty_like(g)
            for u in range(kh):
                for v in range(kw):
                    gw[:, 0, u, v] = np.einsum("bchw,bchw->c", g, tap(xp, u, v))
                    np.multiply(g, wv[:, 0, u, v][None, :, None, None], out=scratch)
                    tap(gxp, u, v)[...] += scratch
            gx = crop(gxp) if padding else gxp
            if bias is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))

    else:
        # general (possibly grouped): im2col then one matmul per group
        eff_h = dilation * (kh - 1) + 1
        eff_w = dilation * (kw - 1) + 1
        win = sliding_window_view(xp, (eff_h, eff_w), axis=(2, 3))
        win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
        # (B, Ho, Wo, C, kh, kw) contiguous, flattened per group below
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
        cols = cols.reshape(B * Ho * Wo, groups, Cg * kh * kw)
        w2 = wv.reshape(groups, Cout // groups, Cg * kh * kw)
        out_flat = np.empty((B * Ho * Wo, groups, Cout // groups), dtype=xv.dtype)
        for gi in range(groups):
            out_flat[:, gi, :] = cols[:, gi, :] @ w2[gi].T
        out = np.ascontiguousarray(
            out_flat.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

        def bwd(g):
            g_flat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(
                B * Ho * Wo, groups, Cout // groups)
            gw = np.empty_like(w2)
            gcols = np.empty_like(cols)
            for gi in range(groups):
                gw[gi] = g_flat[:, gi, :].T @ cols[:, gi, :]
                gcols[:, gi, :] = g_flat[:, gi, :] @ w2[gi]
            gcols = gcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    tap(gxp, u, v)[...] += gcols[:, :, :, :, u, v]
            gx = crop(gxp) if padding else gxp
            if bias is None:
                return gx, gw.reshape(w.shape)
            return gx, gw.reshape(w.shape), g.sum(axis=(0, 2, 3))

    if bias is not None:
        out = out + bias.values[None, :, None, None]

    inputs = (x, w) if bias is None else (x, w, bias)
    return apply_primitive(inputs, out, bwd)


def conv1d(x: Tensor, w: Tensor, padding: int | None = None) -> Tensor:
    """Length-preserving 1-D cross-correlation over (B, S, L) with (S_out, S, k).

    The kernel must be odd; padding defaults to (k-1)/2 so that the output
    length equals the input length. The S dimension mixes as channels.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input and weight, got {x.shape} and {w.shape}")
    B, S, L = x.shape
    Sout, Sin, k = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel length must be odd, got {k}")
    if Sin != S:
        raise ShapeError(f"conv1d weight expects {Sin} channels, input provides {S}")
    if padding is None:
        padding = (k - 1) // 2
    Lo = L + 2 * padding - k + 1
    if Lo < 1:
        raise GeometryError(f"conv1d output length {Lo} invalid for input {L}, kernel {k}")

    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding)))
    win = sliding_window_view(xp, k, axis=2)
    out = np.einsum("bslk,osk->bol", win, w.values)

    def bwd(g):
        gw = np.einsum("bol,bslk->osk", g, win)
        gxp = np.zeros_like(xp)
        for i in range(k):
            gxp[:, :, i:i + Lo] += np.einsum("bol,os->bsl", g, w.values[:, :, i])
        return gxp[:, :, padding:padding + L], gw

    return apply_primitive((x, w), out, bwd)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map (B, n) @ (m, n)^T + (m,)."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear inner dimensions differ: input {x.shape} vs weight {w.shape}")
    out = x.values @ w.values.T
    if bias is not None:
        out = out + bias.values[None, :]

    def bwd(g):
        gx = g @ w.values
        gw = g.T @ x.values
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w) if bias is None else (x, w, bias)
    return apply_primitive(inputs, out, bwd)


@dataclass
class BatchNormState:
    """Running statistics of a 2-D batch norm layer.

    ``running = momentum * running + (1 - momentum) * batch`` on every
    training-mode forward; eval mode uses the stored values and refuses to run
    before any batch has been tracked.
    """

    num_features: int
    momentum: float = 0.9
    eps: float = 1e-5
    dtype: np.dtype = np.float32
    running_mean: np.ndarray = field(init=False)
    running_var: np.ndarray = field(init=False)
    batches_tracked: int = field(default=0, init=False)

    def __post_init__(self):
        self.running_mean = np.zeros(self.num_features, dtype=self.dtype)
        self.running_var = np.ones(self.num_features, dtype=self.dtype)


def batch_norm_2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                  training: bool) -> Tensor:
    """Per-channel normalization of (N, C, H, W) over the (N, H, W) axes.

    Training mode normalizes with batch statistics (biased variance) and
    updates *state* in place; eval mode applies the stored statistics.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm_2d expects 4-D input, got {x.shape}")
    C = x.shape[1]
    if C != state.num_features:
        raise ShapeError(f"batch_norm_2d input has {C} channels, state tracks {state.num_features}")
    axes = (0, 2, 3)
    gv = gamma.values[None, :, None, None]
    xv = x.values

    if training:
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1.0 - m) * mu).astype(state.dtype)
        state.running_var = (m * state.running_var + (1.0 - m) * var).astype(state.dtype)
        state.batches_tracked += 1
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (xv - mu[None, :, None, None]) * inv[None, :, None, None]
        out = gv * xhat + beta.values[None, :, None, None]

        def bwd(g):
            gh = g * gv
            gx = inv[None, :, None, None] * (
                gh - gh.mean(axis=axes, keepdims=True)
                - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        if state.batches_tracked == 0:
            raise RuntimeError("batch_norm_2d eval mode before any statistics were recorded")
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xv - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = gv * xhat + beta.values[None, :, None, None]

        def bwd(g):
            return (g * gv * inv[None, :, None, None],
                    (g * xhat).sum(axis=axes),
                    g.sum(axis=axes))

    return apply_primitive((x, gamma, beta), out.astype(xv.dtype, copy=False), bwd)
