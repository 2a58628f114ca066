"""Central-finite-difference gradient checking.

Used by the test suite and by the ``gradcheck`` CLI command. Checks run in
float64 so that the h=1e-3 central difference resolves the tight tolerances;
the analytic path exercises exactly the same kernels the float32 engine uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import ComputationRecord, Tensor, backward, zero_grads


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` w.r.t. ``t.values``."""
    flat = t.values.reshape(-1)
    grad = np.zeros_like(flat, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f().item()
        flat[i] = orig - h
        lo = f().item()
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * h)
    return grad.reshape(t.shape)


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    zero_grads(params)
    with ComputationRecord():
        loss = f()
        backward(loss)
    return [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| scaled by the larger gradient magnitude (floored at 1e-6)."""
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), 1e-6)
    return float(np.abs(a - b).max(initial=0.0)) / scale


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-3,
              flip_sign: bool = False) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``flip_sign`` negates the analytic gradients; the CLI uses it as a
    fault-injection self-test that must make the check fail.
    """
    analytic = analytic_grads(f, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        if flip_sign:
            a = -a
        n = numerical_grad(f, p, h=h)
        worst = max(worst, max_relative_error(a.astype(np.float64), n))
    return worst


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def lif_input_grad_oracle(current_values: list[np.ndarray],
                          p) -> list[np.ndarray]:
    """d(sum of all spikes)/d(current at each step) by forward recurrence.

    Differentiates the membrane recurrence by hand, substituting the
    triangular surrogate for the firing step's derivative, independently of
    the taped backward pass.
    """
    from .neuron import surrogate_values

    T = len(current_values)
    us, ss = [], []
    u = np.zeros_like(current_values[0])
    s = np.zeros_like(u)
    for t in range(T):
        u = p.tau * u * (1.0 - s) + current_values[t]
        s = (u >= p.v_th).astype(u.dtype)
        us.append(u)
        ss.append(s)
    grads = []
    for k in range(T):
        du = np.zeros_like(u)
        total = np.zeros_like(u)
        for t in range(k, T):
            if t == k:
                du = np.ones_like(u)
            else:
                carry = (1.0 - ss[t - 1])
                if not p.reset_detached:
                    carry = carry - us[t - 1] * surrogate_values(us[t - 1], p)
                du = p.tau * du * carry
            total = total + surrogate_values(us[t], p) * du
        grads.append(total)
    return grads


def run_suite(break_op: str | None = None, seed: int = 0) -> list[CheckResult]:
    """Gradcheck every smooth primitive plus the composed attention/neuron paths.

    Each operation appears exactly once. Smooth operations are checked against
    central differences; the spiking unroll (a step function forward, so not
    finite-differentiable) is checked against the hand-unrolled recurrence
    oracle. ``break_op`` flips the sign of that operation's analytic gradient
    so the harness can prove it detects faults.
    """
    from . import attention, neuron, ops, training
    from . import tensor as tz

    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def param(*shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)

    def probe(*shape):
        return Tensor(rng.standard_normal(shape), dtype=np.float64)

    def run(name, tol, f, params):
        err = gradcheck(f, params, flip_sign=(break_op == name))
        results.append(CheckResult(name, err, tol))

    a = param(2, 3)
    b = param(1, 3)
    run("add", 1e-3, lambda: tz.tsum(tz.add(a, b)), [a, b])
    run("sub", 1e-3, lambda: tz.tsum(tz.sub(a, b)), [a, b])
    c = param(2, 3)
    pm = probe(2, 3)
    run("mul", 1e-3, lambda: tz.tsum(tz.mul(a, c) * pm), [a, c])

    s = param(3, 4)
    w_probe = probe(3, 4)
    run("sigmoid", 1e-3, lambda: tz.tsum(tz.sigmoid(s) * w_probe), [s])
    run("gelu", 1e-3, lambda: tz.tsum(tz.gelu(s) * w_probe), [s])
    rl = param(3, 4)
    rl.values += 0.05 * np.sign(rl.values)  # keep points away from the kink
    run("relu", 1e-3, lambda: tz.tsum(tz.relu(rl) * w_probe), [rl])
    p_mean = probe(3)
    run("mean", 1e-3, lambda: tz.tsum(tz.mean(s, axes=(1,)) * p_mean), [s])
    p_flat = probe(4, 3)
    run("reshape", 1e-3, lambda: tz.tsum(tz.reshape(s, (4, 3)) * p_flat), [s])
    run("transpose", 1e-3, lambda: tz.tsum(tz.transpose(s, (1, 0)) * p_flat), [s])

    x2 = param(2, 4, 5, 5, scale=0.5)
    w2 = param(4, 2, 3, 3, scale=0.5)
    b2 = param(4, scale=0.1)
    probe2 = Tensor(rng.standard_normal((2, 4, 3, 3)), dtype=np.float64)
    run("conv2d", 1e-3,
        lambda: tz.tsum(ops.conv2d(x2, w2, b2, stride=2, padding=1, groups=2) * probe2),
        [x2, w2, b2])

    x1 = param(1, 2, 5, scale=0.5)
    w1 = param(2, 2, 3, scale=0.5)
    probe1 = Tensor(rng.standard_normal((1, 2, 5)), dtype=np.float64)
    run("conv1d", 1e-4, lambda: tz.tsum(ops.conv1d(x1, w1) * probe1), [x1, w1])

    xl = param(3, 4, scale=0.5)
    wl = param(2, 4, scale=0.5)
    bl = param(2, scale=0.1)
    probel = Tensor(rng.standard_normal((3, 2)), dtype=np.float64)
    run("linear", 1e-4, lambda: tz.tsum(ops.linear(xl, wl, bl) * probel), [xl, wl, bl])

    xb = param(4, 2, 3, 3)
    gb = param(2, scale=0.5)
    gb.values += 1.0
    bb = param(2, scale=0.1)
    probeb = Tensor(rng.standard_normal((4, 2, 3, 3)), dtype=np.float64)

    def bn_loss():
        st = ops.BatchNormState(2, dtype=np.float64)
        return tz.tsum(ops.batch_norm_2d(xb, gb, bb, st, training=True) * probeb)

    run("batch_norm_2d", 1e-3, bn_loss, [xb, gb, bb])

    logits = param(3, 4)
    labels = [0, 2, 1]
    run("cross_entropy", 1e-4, lambda: training.cross_entropy(logits, labels), [logits])

    # LIF unroll against the hand-differentiated recurrence, not finite
    # differences: the spiking forward is a step function.
    lif_p = neuron.LifParams(tau=0.5, v_th=1.0, alpha=1.0)
    cs = [param(4, scale=0.4) for _ in range(3)]
    for ct in cs:
        ct.values += 0.8  # membrane potentials land inside the surrogate support

    def lif_loss():
        spikes = neuron.lif_unroll(cs, lif_p)
        return tz.tsum(tz.stack(spikes))

    analytic = analytic_grads(lif_loss, cs)
    if break_op == "lif_unroll":
        analytic = [-g for g in analytic]
    oracle = lif_input_grad_oracle([ct.values for ct in cs], lif_p)
    lif_err = max(max_relative_error(g, o) for g, o in zip(analytic, oracle))
    results.append(CheckResult("lif_unroll", lif_err, 1e-3))

    # full attention block over fixed binary spikes, grads on all parameters
    spk = Tensor((rng.random((2, 1, 2, 4, 4)) < 0.5).astype(np.float64))
    dta_p = attention.DtaParams.init(time_steps=2, channels=2, rng=rng, dtype=np.float64)
    for p in dta_p.parameters():
        p.values[...] = rng.standard_normal(p.shape) * 0.3
    probe_d = Tensor(rng.standard_normal(spk.shape), dtype=np.float64)

    def dta_loss():
        out = attention.dta(spk, dta_p.txa, dta_p.tna, True, True)
        return tz.tsum(out * probe_d)

    run("dta_block", 1e-3, dta_loss, dta_p.parameters())

    return results
