"""Membrane-shortcut residual spiking backbone with one attention block.

Dataflow: stem conv + batch norm -> spiking layer -> dual temporal-channel
attention on the spikes -> residual stages -> spiking layer -> global average
pool -> per-step classifier head, averaged over time.

Residual blocks are pre-activation (spike -> conv -> norm, twice) and their
identity path carries real-valued activations; the only binarization points
are the spiking layers. Time is folded into the batch axis for convolutions
and batch norm, which is value-identical to a per-step loop for those
per-sample operations (batch norm is *defined* over the folded T*B batch).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .attention import TnaParams, TxaParams, dta
from .neuron import LifParams, lif_unroll
from .ops import BatchNormState, batch_norm_2d, conv2d, linear
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"DTASNN01"


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint container."""


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative backbone description.

    ``stages`` is a tuple of (channels, block_count, stride); strides must be
    1 or 2. ``dta_enabled`` switches the two attention branches independently,
    which is how the ablation sweep builds its variants.
    """

    time_steps: int = 4
    in_channels: int = 3
    stem_channels: int = 16
    stages: tuple = ((16, 1, 1), (32, 1, 2))
    num_classes: int = 10
    dta_enabled: tuple = (True, True)
    lif: LifParams = field(default_factory=LifParams)

    def __post_init__(self):
        if self.time_steps < 1:
            raise ValueError(f"time_steps must be >= 1, got {self.time_steps}")
        if self.in_channels < 1 or self.stem_channels < 1 or self.num_classes < 1:
            raise ValueError("channel and class counts must be positive")
        if not self.stages:
            raise ValueError("stages must be non-empty")
        for ch, blocks, stride in self.stages:
            if ch < 1 or blocks < 1:
                raise ValueError(f"invalid stage ({ch}, {blocks}, {stride})")
            if stride not in (1, 2):
                raise ValueError(f"stage stride must be 1 or 2, got {stride}")
        if len(self.dta_enabled) != 2:
            raise ValueError("dta_enabled must be a (enable_txa, enable_tna) pair")

    def to_dict(self) -> dict:
        return {
            "time_steps": self.time_steps,
            "in_channels": self.in_channels,
            "stem_channels": self.stem_channels,
            "stages": [list(s) for s in self.stages],
            "num_classes": self.num_classes,
            "dta_enabled": list(self.dta_enabled),
            "lif": {
                "tau": self.lif.tau,
                "v_th": self.lif.v_th,
                "alpha": self.lif.alpha,
                "reset_detached": self.lif.reset_detached,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        lif = d.get("lif", {})
        return cls(
            time_steps=int(d["time_steps"]),
            in_channels=int(d["in_channels"]),
            stem_channels=int(d["stem_channels"]),
            stages=tuple(tuple(int(v) for v in s) for s in d["stages"]),
            num_classes=int(d["num_classes"]),
            dta_enabled=tuple(bool(v) for v in d["dta_enabled"]),
            lif=LifParams(tau=float(lif["tau"]), v_th=float(lif["v_th"]),
                          alpha=float(lif["alpha"]),
                          reset_detached=bool(lif["reset_detached"])),
        )


def spec_mismatch(a: NetworkSpec, b: NetworkSpec) -> str | None:
    """Name of the first differing field, or None when compatible."""
    da, db = a.to_dict(), b.to_dict()
    for key in da:
        if key == "lif":
            for sub in da["lif"]:
                if da["lif"][sub] != db["lif"][sub]:
                    return f"lif.{sub}"
        elif da[key] != db[key]:
            return key
    return None


def _init_conv(rng, cout, cin_per_group, kh, kw, dtype=np.float32) -> Tensor:
    fan_in = cin_per_group * kh * kw
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(cout, cin_per_group, kh, kw)),
                  requires_grad=True, dtype=dtype)


class Conv2dLayer:
    """Bias-free convolution layer (normalization follows every conv here)."""

    def __init__(self, rng, cin, cout, k, stride=1, padding=None, dtype=np.float32):
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.weight = _init_conv(rng, cout, cin, k, k, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, padding=self.padding)

    def named_parameters(self, prefix):
        return [(f"{prefix}.weight", self.weight)]


class BatchNorm2dLayer:
    def __init__(self, channels, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.state = BatchNormState(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm_2d(x, self.gamma, self.beta, self.state, training)

    def named_parameters(self, prefix):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def buffers(self):
        return self.state


class LinearLayer:
    def __init__(self, rng, n_in, n_out, dtype=np.float32):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_out, n_in)),
                             requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def named_parameters(self, prefix):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


def _fold(x: Tensor) -> Tensor:
    T, B = x.shape[0], x.shape[1]
    return tz.reshape(x, (T * B,) + x.shape[2:])


def _unfold(x: Tensor, t: int, b: int) -> Tensor:
    return tz.reshape(x, (t, b) + x.shape[1:])


def _spike_layer(x: Tensor, p: LifParams) -> Tensor:
    """Run the spiking dynamics over the leading time axis of a stacked tensor."""
    steps = [tz.index(x, t, axis=0) for t in range(x.shape[0])]
    return tz.stack(lif_unroll(steps, p))


class MsBlock:
    """Pre-activation residual block with a membrane (un-spiked) shortcut."""

    def __init__(self, rng, cin, cout, stride, lif: LifParams, dtype=np.float32):
        self.lif = lif
        self.conv1 = Conv2dLayer(rng, cin, cout, 3, stride=stride, dtype=dtype)
        self.bn1 = BatchNorm2dLayer(cout, dtype=dtype)
        self.conv2 = Conv2dLayer(rng, cout, cout, 3, dtype=dtype)
        self.bn2 = BatchNorm2dLayer(cout, dtype=dtype)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = Conv2dLayer(rng, cin, cout, 1, stride=stride, padding=0,
                                          dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        t, b = x.shape[0], x.shape[1]
        h = _spike_layer(x, self.lif)
        h = _unfold(self.bn1(self.conv1(_fold(h)), training), t, b)
        h = _spike_layer(h, self.lif)
        h = _unfold(self.bn2(self.conv2(_fold(h)), training), t, b)
        identity = x
        if self.downsample is not None:
            identity = _unfold(self.downsample(_fold(x)), t, b)
        return h + identity

    def named_parameters(self, prefix):
        out = (self.conv1.named_parameters(f"{prefix}.conv1")
               + self.bn1.named_parameters(f"{prefix}.bn1")
               + self.conv2.named_parameters(f"{prefix}.conv2")
               + self.bn2.named_parameters(f"{prefix}.bn2"))
        if self.downsample is not None:
            out += self.downsample.named_parameters(f"{prefix}.downsample")
        return out

    def bn_layers(self):
        return [self.bn1, self.bn2]


def _pick_bottleneck_ratio(tc: int) -> int:
    """Largest divisor of tc that is at most 4 (never less than 1)."""
    for r in range(min(4, tc), 0, -1):
        if tc % r == 0:
            return r
    return 1


class Network:
    """A built backbone: layers, parameters, and the forward pass."""

    def __init__(self, spec: NetworkSpec, seed: int, dtype=np.float32):
        self.spec = spec
        rng = np.random.default_rng(seed)
        lif = spec.lif
        self.stem_conv = Conv2dLayer(rng, spec.in_channels, spec.stem_channels, 3,
                                     dtype=dtype)
        self.stem_bn = BatchNorm2dLayer(spec.stem_channels, dtype=dtype)

        enable_txa, enable_tna = spec.dta_enabled
        self.txa: TxaParams | None = None
        self.tna: TnaParams | None = None
        if enable_txa:
            self.txa = TxaParams.init(spec.time_steps, spec.stem_channels, rng, dtype=dtype)
        if enable_tna:
            tc = spec.time_steps * spec.stem_channels
            self.tna = TnaParams.init(spec.time_steps, spec.stem_channels, rng,
                                      ratio=_pick_bottleneck_ratio(tc), dtype=dtype)

        self.blocks: list[MsBlock] = []
        cin = spec.stem_channels
        for ch, count, stride in spec.stages:
            for i in range(count):
                self.blocks.append(MsBlock(rng, cin, ch, stride if i == 0 else 1,
                                           lif, dtype=dtype))
                cin = ch
        self.head = LinearLayer(rng, cin, spec.num_classes, dtype=dtype)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        """Logits (B, num_classes) from input (T, B, Cin, H, W)."""
        spec = self.spec
        if x.ndim != 5:
            raise ShapeError(f"network input must be (T, B, C, H, W), got {x.shape}")
        if x.shape[0] != spec.time_steps or x.shape[2] != spec.in_channels:
            raise ShapeError(
                f"input {x.shape} does not match spec (T={spec.time_steps}, "
                f"Cin={spec.in_channels})")
        t, b = x.shape[0], x.shape[1]
        h = _unfold(self.stem_bn(self.stem_conv(_fold(x)), training), t, b)
        spikes = _spike_layer(h, spec.lif)
        enable_txa, enable_tna = spec.dta_enabled
        a = dta(spikes, self.txa, self.tna, enable_txa, enable_tna)
        for block in self.blocks:
            a = block(a, training)
        s_out = _spike_layer(a, spec.lif)
        pooled = tz.mean(s_out, axes=(3, 4))                       # (T, B, C)
        logits_steps = self.head(tz.reshape(pooled, (t * b, pooled.shape[2])))
        logits_steps = tz.reshape(logits_steps, (t, b, spec.num_classes))
        return tz.mean(logits_steps, axes=(0,))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = (self.stem_conv.named_parameters("stem_conv")
               + self.stem_bn.named_parameters("stem_bn"))
        if self.txa is not None:
            names = ["tla_kernel", "cla_kernel", "p_t", "p_c"]
            out += list(zip((f"txa.{n}" for n in names), self.txa.parameters()))
        if self.tna is not None:
            names = ["encode", "dw", "ddw", "pw", "mb_squeeze_w", "mb_squeeze_b",
                     "mb_expand_w", "mb_expand_b", "decode"]
            out += list(zip((f"tna.{n}" for n in names), self.tna.parameters()))
        for i, block in enumerate(self.blocks):
            out += block.named_parameters(f"block{i}")
        out += self.head.named_parameters("head")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def bn_layers(self) -> list[BatchNorm2dLayer]:
        out = [self.stem_bn]
        for block in self.blocks:
            out += block.bn_layers()
        return out

    def state_arrays(self) -> list[np.ndarray]:
        """Parameters plus batch-norm buffers, in declaration order."""
        arrays = [p.values for p in self.parameters()]
        for bn in self.bn_layers():
            st = bn.state
            arrays += [st.running_mean, st.running_var,
                       np.array([st.batches_tracked], dtype=np.float32)]
        return arrays


def build(spec: NetworkSpec, seed: int) -> Network:
    """Deterministically initialized network; same seed, same bits."""
    return Network(spec, seed)


# ---------------------------------------------------------------------------
# checkpoint container: magic, length-prefixed JSON spec, then tensors as
# little-endian float32 runs with u32 element-count prefixes


def save_checkpoint(path, net: Network) -> None:
    payload = json.dumps(net.spec.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for arr in net.state_arrays():
            flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
            fh.write(struct.pack("<I", flat.size))
            fh.write(flat.tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:8]!r}")
    off = 8
    (jlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    spec = NetworkSpec.from_dict(json.loads(blob[off:off + jlen].decode("utf-8")))
    off += jlen
    net = build(spec, seed=0)

    def read_run(expected_size):
        nonlocal off
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        if n != expected_size:
            raise CheckpointError(f"tensor run of {n} elements, expected {expected_size}")
        vals = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
        off += 4 * n
        return vals

    for p in net.parameters():
        p.values[...] = read_run(p.size).reshape(p.shape).astype(p.dtype)
    for bn in net.bn_layers():
        st = bn.state
        st.running_mean[...] = read_run(st.running_mean.size).astype(st.dtype)
        st.running_var[...] = read_run(st.running_var.size).astype(st.dtype)
        st.batches_tracked = int(read_run(1)[0])
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes in checkpoint")
    return net
