"""Iterative leaky integrate-and-fire layer with a triangular surrogate gradient.

The membrane update is ``u(t) = tau * u(t-1) * (1 - s(t-1)) + c(t)`` with a
hard reset through the ``(1 - s(t-1))`` factor, and spikes fire whenever the
potential reaches the threshold (boundary inclusive). Forward spikes are
exactly binary; the backward pass substitutes a triangle of width ``2/alpha``
centered on the threshold for the step function's derivative, so training
unrolls into plain backpropagation through time on the record.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, apply_primitive


@dataclass(frozen=True)
class LifParams:
    """Neuron constants: membrane decay, firing threshold, surrogate width.

    ``reset_detached`` removes the reset factor from the gradient graph; the
    default keeps it, so gradients also flow through the previous step's spike.
    """

    tau: float = 0.5
    v_th: float = 1.0
    alpha: float = 1.0
    reset_detached: bool = False

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.v_th <= 0.0:
            raise ValueError(f"v_th must be positive, got {self.v_th}")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass
class LifState:
    """Membrane potential and previous-step spikes; ``None`` means fresh zeros."""

    u: Tensor | None = None
    s_prev: Tensor | None = None

    @classmethod
    def fresh(cls) -> "LifState":
        return cls()


def surrogate_values(u: np.ndarray, p: LifParams) -> np.ndarray:
    """Triangular stand-in for the spike derivative, as a raw array.

    ``alpha * (1 - alpha * |u - v_th|)`` inside ``|u - v_th| < 1/alpha``,
    zero outside; peak value alpha, support width 2/alpha, unit area.
    """
    delta = np.abs(u - p.v_th)
    return np.where(delta < 1.0 / p.alpha, p.alpha * (1.0 - p.alpha * delta), 0.0).astype(u.dtype)


def surrogate_grad(u: Tensor, p: LifParams) -> Tensor:
    """Tensor wrapper over :func:`surrogate_values` (constant, no grad path)."""
    return Tensor(surrogate_values(u.values, p))


def _fire(u: Tensor, p: LifParams) -> Tensor:
    """Binary spikes from membrane potential; backward uses the surrogate."""
    out = (u.values >= p.v_th).astype(u.dtype)
    uv = u.values

    def bwd(g):
        return (g * surrogate_values(uv, p),)

    return apply_primitive((u,), out, bwd)


def lif_step(state: LifState, c: Tensor, p: LifParams) -> tuple[Tensor, LifState]:
    """One membrane update and firing decision.

    A fresh state adopts the shape of the input current. Returns the binary
    spike tensor and the successor state.
    """
    if state.u is None:
        u = c
    else:
        if state.u.shape != c.shape:
            raise ShapeError(f"current shape {c.shape} does not match state shape {state.u.shape}")
        s_prev = state.s_prev
        reset = (1.0 - s_prev.detach()) if p.reset_detached else (1.0 - s_prev)
        u = p.tau * state.u * reset + c
    spikes = _fire(u, p)
    return spikes, LifState(u=u, s_prev=spikes)


def lif_unroll(currents, p: LifParams) -> list[Tensor]:
    """Apply :func:`lif_step` over a sequence of per-step currents.

    Starts from a fresh zero state; the record retains the temporal
    dependencies, so backward flows through both the decay path and (unless
    detached) the reset factor.
    """
    currents = list(currents)
    if not currents:
        raise ValueError("lif_unroll requires at least one time step")
    state = LifState.fresh()
    spikes = []
    for c in currents:
        s, state = lif_step(state, c, p)
        spikes.append(s)
    return spikes
