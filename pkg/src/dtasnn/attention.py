"""Dual temporal-channel attention over spike tensors.

Two branches gate the output of a spiking layer:

* the identical cross-attention branch runs the same local 1-D-convolution
  attention twice, once targeting the time dimension and once the channel
  dimension, and multiplies the results;
* the non-identical branch folds time and channels into one axis and combines
  a local path (depth-wise, dilated depth-wise, point-wise convolutions) with
  a global path (spatial pooling into a squeeze/expand bottleneck).

The fused gate is ``sigmoid(cross * non_identical) * spikes``, so the output
vanishes wherever no spike fired and stays strictly below 1 in magnitude for
binary spikes.

Spike tensors are laid out (T, B, C, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .ops import conv1d, conv2d, linear
from .tensor import ShapeError, Tensor


def _uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


@dataclass
class TxaParams:
    """Learnable state of the identical cross-attention branch.

    One 1-D kernel per target dimension (time / channel) plus one scalar
    scale each. Scales start at zero so the branch begins as an identity.
    """

    tla_kernel: Tensor  # (C, C, k_t), slides along T
    cla_kernel: Tensor  # (T, T, k_c), slides along C
    p_t: Tensor
    p_c: Tensor

    @classmethod
    def init(cls, time_steps: int, channels: int, rng: np.random.Generator,
             k_t: int = 3, k_c: int = 3, dtype=np.float32) -> "TxaParams":
        if k_t % 2 == 0 or k_c % 2 == 0:
            raise ValueError("cross-attention kernel sizes must be odd")
        return cls(
            tla_kernel=_uniform_fan_in(rng, (channels, channels, k_t), channels * k_t, dtype),
            cla_kernel=_uniform_fan_in(rng, (time_steps, time_steps, k_c), time_steps * k_c, dtype),
            p_t=Tensor(np.zeros(1), requires_grad=True, dtype=dtype),
            p_c=Tensor(np.zeros(1), requires_grad=True, dtype=dtype),
        )

    def parameters(self) -> list[Tensor]:
        return [self.tla_kernel, self.cla_kernel, self.p_t, self.p_c]


@dataclass
class TnaParams:
    """Learnable state of the non-identical branch over the fused T*C axis.

    Local path: depth-wise 5x5, dilated depth-wise 7x7 (dilation 3),
    point-wise 1x1 - the large-kernel-attention decomposition. Global path:
    squeeze/expand bottleneck with ratio r. Encode/decode are 1x1 projections
    around the whole block; decode starts anywhere, but an all-zero decode
    reduces the block to an identity.
    """

    encode: Tensor       # (TC, TC, 1, 1)
    dw: Tensor           # (TC, 1, k_dw, k_dw), groups=TC
    ddw: Tensor          # (TC, 1, k_ddw, k_ddw), groups=TC, dilated
    pw: Tensor           # (TC, TC, 1, 1)
    mb_squeeze_w: Tensor  # (TC/r, TC)
    mb_squeeze_b: Tensor
    mb_expand_w: Tensor   # (TC, TC/r)
    mb_expand_b: Tensor
    decode: Tensor       # (TC, TC, 1, 1)
    k_dw: int = 5
    k_ddw: int = 7
    dilation: int = 3

    @classmethod
    def init(cls, time_steps: int, channels: int, rng: np.random.Generator,
             ratio: int = 4, k_dw: int = 5, k_ddw: int = 7, dilation: int = 3,
             dtype=np.float32) -> "TnaParams":
        tc = time_steps * channels
        if ratio < 1 or tc % ratio:
            raise ValueError(f"bottleneck ratio {ratio} does not divide {tc} fused channels")
        hidden = tc // ratio
        return cls(
            encode=_uniform_fan_in(rng, (tc, tc, 1, 1), tc, dtype),
            dw=_uniform_fan_in(rng, (tc, 1, k_dw, k_dw), k_dw * k_dw, dtype),
            ddw=_uniform_fan_in(rng, (tc, 1, k_ddw, k_ddw), k_ddw * k_ddw, dtype),
            pw=_uniform_fan_in(rng, (tc, tc, 1, 1), tc, dtype),
            mb_squeeze_w=_uniform_fan_in(rng, (hidden, tc), tc, dtype),
            mb_squeeze_b=Tensor(np.zeros(hidden), requires_grad=True, dtype=dtype),
            mb_expand_w=_uniform_fan_in(rng, (tc, hidden), hidden, dtype),
            mb_expand_b=Tensor(np.zeros(tc), requires_grad=True, dtype=dtype),
            decode=_uniform_fan_in(rng, (tc, tc, 1, 1), tc, dtype),
            k_dw=k_dw, k_ddw=k_ddw, dilation=dilation,
        )

    def parameters(self) -> list[Tensor]:
        return [self.encode, self.dw, self.ddw, self.pw, self.mb_squeeze_w,
                self.mb_squeeze_b, self.mb_expand_w, self.mb_expand_b, self.decode]


@dataclass
class DtaParams:
    """Both attention branches bundled for one block."""

    txa: TxaParams
    tna: TnaParams

    @classmethod
    def init(cls, time_steps: int, channels: int, rng: np.random.Generator,
             dtype=np.float32, **tna_kwargs) -> "DtaParams":
        return cls(
            txa=TxaParams.init(time_steps, channels, rng, dtype=dtype),
            tna=TnaParams.init(time_steps, channels, rng, dtype=dtype, **tna_kwargs),
        )

    def parameters(self) -> list[Tensor]:
        return self.txa.parameters() + self.tna.parameters()


@dataclass
class AttentionOutput:
    """Branch outputs plus the fused gate, all shaped like the input."""

    o_txa: Tensor
    o_tna: Tensor
    o_dta: Tensor


def _require_5d(x: Tensor, name: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{name} expects a (T, B, C, H, W) tensor, got {x.shape}")


def smp(x: Tensor) -> Tensor:
    """Spatial mean pooling: average a (T, B, C, H, W) tensor over H and W."""
    _require_5d(x, "smp")
    return tz.mean(x, axes=(3, 4))


def local_attention(x: Tensor, pooled: Tensor, kernel: Tensor, scale: Tensor,
                    target_dim: str) -> Tensor:
    """One identical-branch pass: 1-D conv along the target dim, sigmoid,
    learnable scale, then a residual add broadcast over the spatial axes.

    ``target_dim`` is "t" (slide along time, mix channels) or "c" (slide
    along channels, mix time). ``pooled`` is the (T, B, C) spatial mean of x.
    """
    _require_5d(x, "local_attention")
    if pooled.shape != x.shape[:3]:
        raise ShapeError(f"pooled map {pooled.shape} does not match input {x.shape[:3]}")
    T, B, C = pooled.shape
    if target_dim == "t":
        lane = tz.transpose(pooled, (1, 2, 0))          # (B, C, T)
        attn = scale * tz.sigmoid(conv1d(lane, kernel))
        attn = tz.transpose(attn, (2, 0, 1))            # (T, B, C)
    elif target_dim == "c":
        lane = tz.transpose(pooled, (1, 0, 2))          # (B, T, C)
        attn = scale * tz.sigmoid(conv1d(lane, kernel))
        attn = tz.transpose(attn, (1, 0, 2))            # (T, B, C)
    else:
        raise ValueError(f"target_dim must be 't' or 'c', got {target_dim!r}")
    return x + tz.reshape(attn, (T, B, C, 1, 1))


def t_xa(x: Tensor, p: TxaParams) -> Tensor:
    """Identical cross attention: product of the time- and channel-target passes."""
    pooled = smp(x)
    tla = local_attention(x, pooled, p.tla_kernel, p.p_t, "t")
    cla = local_attention(x, pooled, p.cla_kernel, p.p_c, "c")
    return tla * cla


def ltca(f: Tensor, p: TnaParams) -> Tensor:
    """Local path over (B, TC, H, W): depth-wise, dilated depth-wise, point-wise.

    All three convolutions are padded to preserve the spatial extents.
    """
    tc = f.shape[1]
    h = conv2d(f, p.dw, padding=(p.k_dw - 1) // 2, groups=tc)
    h = conv2d(h, p.ddw, padding=p.dilation * (p.k_ddw - 1) // 2,
               dilation=p.dilation, groups=tc)
    return conv2d(h, p.pw)


def gtca(f: Tensor, p: TnaParams) -> Tensor:
    """Global path: spatial average pool into the squeeze/expand bottleneck.

    Returns a (B, TC, 1, 1) map, broadcastable over the spatial axes.
    """
    B, tc = f.shape[0], f.shape[1]
    pooled = tz.reshape(tz.global_avg_pool(f), (B, tc))
    h = tz.relu(linear(pooled, p.mb_squeeze_w, p.mb_squeeze_b))
    h = linear(h, p.mb_expand_w, p.mb_expand_b)
    return tz.reshape(h, (B, tc, 1, 1))


def t_na(x: Tensor, p: TnaParams) -> Tensor:
    """Non-identical attention over the fused time-channel axis.

    Folds (T, B, C, H, W) to (B, T*C, H, W), encodes with a 1x1 conv + GELU,
    gates the encoding with the local and global paths, decodes with a 1x1
    conv, and adds the fold back as a residual before unfolding.
    """
    _require_5d(x, "t_na")
    T, B, C, H, W = x.shape
    folded = tz.reshape(tz.transpose(x, (1, 0, 2, 3, 4)), (B, T * C, H, W))
    feat = tz.gelu(conv2d(folded, p.encode))
    attended = ltca(feat, p) * gtca(feat, p) * feat
    out = conv2d(attended, p.decode) + folded
    return tz.transpose(tz.reshape(out, (B, T, C, H, W)), (1, 0, 2, 3, 4))


def dta(spikes: Tensor, txa: TxaParams | None, tna: TnaParams | None,
        enable_txa: bool, enable_tna: bool) -> Tensor:
    """Fused gate: ``sigmoid(txa * tna) * spikes``.

    A disabled branch contributes an all-ones factor; with both disabled the
    spikes pass through untouched. The input must be binary, as produced by a
    spiking layer.
    """
    _require_5d(spikes, "dta")
    sv = spikes.values
    if not np.all((sv == 0) | (sv == 1)):
        raise ValueError("dta input must be binary spikes")
    if enable_txa and txa is None:
        raise ValueError("cross-attention branch enabled but no parameters given")
    if enable_tna and tna is None:
        raise ValueError("non-identical branch enabled but no parameters given")
    if not enable_txa and not enable_tna:
        return spikes
    if enable_txa and enable_tna:
        gate = t_xa(spikes, txa) * t_na(spikes, tna)
    elif enable_txa:
        gate = t_xa(spikes, txa)
    else:
        gate = t_na(spikes, tna)
    return tz.sigmoid(gate) * spikes


def dta_components(spikes: Tensor, p: DtaParams) -> AttentionOutput:
    """Both branch outputs and the fused result for one fully enabled block."""
    o_txa = t_xa(spikes, p.txa)
    o_tna = t_na(spikes, p.tna)
    o_dta = tz.sigmoid(o_txa * o_tna) * spikes
    return AttentionOutput(o_txa=o_txa, o_tna=o_tna, o_dta=o_dta)
