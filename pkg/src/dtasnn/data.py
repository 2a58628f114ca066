"""Dataset ingestion, synthetic temporal spike patterns, coding, augmentation.

Three sources feed the engine: the canonical CIFAR-10 binary batches, IDX
image/label pairs (MNIST layout), and a seeded synthetic generator whose
classes differ only in *which* time steps fire, so that a model must use
temporal structure to separate them. Static images are replicated across time
steps (direct coding) before entering the network.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

# community-standard CIFAR-10 channel statistics
CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)

CIFAR10_RECORD_BYTES = 3073
CIFAR10_FILE_BYTES = 10000 * CIFAR10_RECORD_BYTES

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTH_MAGIC = b"DTASNN01"


class FormatError(ValueError):
    """A dataset file does not match its declared binary format."""


@dataclass
class Sample:
    """One temporal input (T, C, H, W) with its class index."""

    input: np.ndarray
    label: int


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic temporal-pattern task description.

    ``temporal_signature[c]`` lists the active time steps of class c; pixels
    fire with probability ``rate_on`` on active steps and ``rate_off``
    elsewhere. The default signatures split the time axis into contiguous
    per-class windows, so classes share their overall firing budget and
    differ only in timing.
    """

    classes: int = 2
    time_steps: int = 6
    channels: int = 2
    height: int = 8
    width: int = 8
    rate_on: float = 0.9
    rate_off: float = 0.05
    temporal_signature: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if not 0.0 <= self.rate_off < self.rate_on <= 1.0:
            raise ValueError(f"need 0 <= rate_off < rate_on <= 1, got "
                             f"{self.rate_off} and {self.rate_on}")
        if not self.temporal_signature:
            object.__setattr__(self, "temporal_signature", self.default_signature())
        if len(self.temporal_signature) != self.classes:
            raise ValueError("one signature per class required")
        for sig in self.temporal_signature:
            for t in sig:
                if not 0 <= t < self.time_steps:
                    raise ValueError(f"signature step {t} outside [0, {self.time_steps})")

    def default_signature(self) -> tuple:
        window = max(1, self.time_steps // self.classes)
        sigs = []
        for c in range(self.classes):
            start = (c * window) % self.time_steps
            sigs.append(tuple((start + j) % self.time_steps for j in range(window)))
        return tuple(sigs)


def gen_synthetic(spec: SynthSpec, n: int) -> list[Sample]:
    """Balanced seeded Bernoulli spike patterns; exactly binary inputs.

    When n is not divisible by the class count, the first ``n % K`` classes
    receive one extra sample, so the last classes get one fewer.
    """
    rng = np.random.default_rng(spec.seed)
    counts = [n // spec.classes + (1 if c < n % spec.classes else 0)
              for c in range(spec.classes)]
    samples: list[Sample] = []
    for c, count in enumerate(counts):
        rates = np.full(spec.time_steps, spec.rate_off, dtype=np.float64)
        rates[list(spec.temporal_signature[c])] = spec.rate_on
        for _ in range(count):
            u = rng.random((spec.time_steps, spec.channels, spec.height, spec.width))
            x = (u < rates[:, None, None, None]).astype(np.float32)
            samples.append(Sample(input=x, label=c))
    return samples


def direct_code(x: np.ndarray, time_steps: int) -> np.ndarray:
    """Replicate a static (C, H, W) image across T leading time steps."""
    if time_steps < 1:
        raise ValueError(f"time_steps must be >= 1, got {time_steps}")
    return np.repeat(x[None], time_steps, axis=0)


def augment(x: np.ndarray, pad: int, flip_prob: float,
            rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, random-crop back to size, and maybe flip a (C, H, W) image."""
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    c, h, w = x.shape
    out = x
    if pad > 0:
        padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        out = padded[:, dy:dy + h, dx:dx + w]
    if flip_prob > 0.0 and rng.random() < flip_prob:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches: 3073-byte records, 1 label byte + 3x1024 pixels


def parse_cifar_records(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Decode whole 3073-byte records: label byte, then channel-planar pixels."""
    if len(raw) % CIFAR10_RECORD_BYTES:
        raise FormatError(f"{len(raw)} bytes is not a whole number of "
                          f"{CIFAR10_RECORD_BYTES}-byte records")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    pixels = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32)
    pixels /= 255.0
    return pixels, labels


def _read_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    size = os.path.getsize(path)
    if size != CIFAR10_FILE_BYTES:
        raise FormatError(f"{path}: {size} bytes, expected {CIFAR10_FILE_BYTES}")
    with open(path, "rb") as fh:
        return parse_cifar_records(fh.read())


def normalize_cifar(pixels: np.ndarray, copy: bool = True) -> np.ndarray:
    """Per-channel standardization; ``copy=False`` normalizes in place."""
    out = pixels.copy() if copy else pixels
    out -= CIFAR10_MEAN[:, None, None]
    out /= CIFAR10_STD[:, None, None]
    return out


def load_cifar10_binary(directory):
    """Train and test splits from the canonical binary batches.

    Returns ``(train_images, train_labels, test_images, test_labels)`` with
    images already per-channel normalized. The 600 MB of float pixels are
    assembled into preallocated buffers and normalized in place.
    """
    train_x = np.empty((50000, 3, 32, 32), dtype=np.float32)
    train_y = np.empty(50000, dtype=np.int64)
    for i in range(1, 6):
        path = os.path.join(directory, f"data_batch_{i}.bin")
        if not os.path.exists(path):
            raise FormatError(f"missing CIFAR-10 batch {path}")
        x, y = _read_cifar_file(path)
        train_x[(i - 1) * 10000:i * 10000] = x
        train_y[(i - 1) * 10000:i * 10000] = y
    test_path = os.path.join(directory, "test_batch.bin")
    if not os.path.exists(test_path):
        raise FormatError(f"missing CIFAR-10 batch {test_path}")
    test_x, test_y = _read_cifar_file(test_path)
    return (normalize_cifar(train_x, copy=False), train_y,
            normalize_cifar(test_x, copy=False), test_y)


# ---------------------------------------------------------------------------
# IDX (MNIST layout): big-endian magic + dims, then raw bytes


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Grayscale images in [0, 1] (N, 1, H, W) plus labels from IDX files."""
    with open(images_path, "rb") as fh:
        magic, n, h, w = struct.unpack(">IIII", fh.read(16))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{images_path}: bad magic {magic:#010x}, "
                              f"expected {IDX_IMAGES_MAGIC:#010x}")
        buf = fh.read(n * h * w)
    if len(buf) != n * h * w:
        raise FormatError(f"{images_path}: truncated pixel data")
    images = np.frombuffer(buf, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float32) / 255.0

    with open(labels_path, "rb") as fh:
        magic, n_lab = struct.unpack(">II", fh.read(8))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: bad magic {magic:#010x}, "
                              f"expected {IDX_LABELS_MAGIC:#010x}")
        lab = fh.read(n_lab)
    if len(lab) != n_lab:
        raise FormatError(f"{labels_path}: truncated label data")
    if n_lab != n:
        raise FormatError(f"{n} images but {n_lab} labels")
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# synthetic sets reuse the checkpoint container layout for CI fixtures


def save_synthetic(path, spec: SynthSpec, samples: list[Sample]) -> None:
    header = {
        "classes": spec.classes, "time_steps": spec.time_steps,
        "channels": spec.channels, "height": spec.height, "width": spec.width,
        "rate_on": spec.rate_on, "rate_off": spec.rate_off,
        "temporal_signature": [list(s) for s in spec.temporal_signature],
        "seed": spec.seed, "count": len(samples),
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    inputs = np.stack([s.input for s in samples]).astype("<f4")
    labels = np.array([s.label for s in samples], dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(SYNTH_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for arr in (inputs.reshape(-1), labels):
            fh.write(struct.pack("<I", arr.size))
            fh.write(arr.tobytes())


def load_synthetic(path) -> tuple[SynthSpec, list[Sample]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != SYNTH_MAGIC:
        raise FormatError(f"bad container magic {blob[:8]!r}")
    off = 8
    (jlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off:off + jlen].decode("utf-8"))
    off += jlen
    spec = SynthSpec(
        classes=header["classes"], time_steps=header["time_steps"],
        channels=header["channels"], height=header["height"], width=header["width"],
        rate_on=header["rate_on"], rate_off=header["rate_off"],
        temporal_signature=tuple(tuple(s) for s in header["temporal_signature"]),
        seed=header["seed"])

    def read_run():
        nonlocal off
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        vals = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
        off += 4 * n
        return vals

    count = header["count"]
    shape = (count, spec.time_steps, spec.channels, spec.height, spec.width)
    inputs = read_run().reshape(shape).astype(np.float32)
    labels = read_run().astype(np.int64)
    samples = [Sample(input=np.ascontiguousarray(inputs[i]), label=int(labels[i]))
               for i in range(count)]
    return spec, samples
