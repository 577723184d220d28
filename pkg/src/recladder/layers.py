"""Dense and GRU layer primitives with selectable noise injection.

Two noise schemes exist for the recurrent layer. With feed-forward noise
("FFN") the recurrent layer adds no fresh noise of its own: corruption
reaches it only through its (already noisy) input. With recurrent noise
("RN") fresh Gaussian noise is added to the candidate preactivation, and the
noisy candidate only affects the layer's output and its shortcut value; the
state carried to the next time step is always the un-noised one, so noise
never accumulates inside the recurrence.

The GRU's "preactivation" exposed to shortcuts and reconstruction costs is
the candidate-state preactivation (the quantity entering tanh). Gate
preactivations are never noised and never leave the layer. An alternative
policy (noising the layer output h instead of the candidate) is conceivable
but not implemented.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .tensor import Rng, Tensor, add_rowvec, gaussian, softmax_rows

ACTIVATIONS = ("tanh", "softmax", "linear")
NOISE_VARIANTS = ("FFN", "RN")


@dataclass
class DenseParams:
    W: Tensor  # [out, in]
    b: Tensor  # [out]
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.data.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(
                f"dense params inconsistent: W {self.W.shape}, b {self.b.shape}")


@dataclass
class GruParams:
    Wz: Tensor  # update gate, input weights [H, D]
    Wr: Tensor  # reset gate, input weights [H, D]
    Wc: Tensor  # candidate, input weights [H, D]
    Uz: Tensor  # update gate, recurrent weights [H, H]
    Ur: Tensor  # reset gate, recurrent weights [H, H]
    Uc: Tensor  # candidate, recurrent weights [H, H]
    bz: Tensor  # [H]
    br: Tensor  # [H]
    bc: Tensor  # [H]

    def __post_init__(self):
        h, d = self.Wz.shape
        for name in ("Wz", "Wr", "Wc"):
            if getattr(self, name).shape != (h, d):
                raise ShapeError(f"gru params: {name} must be {(h, d)}")
        for name in ("Uz", "Ur", "Uc"):
            if getattr(self, name).shape != (h, h):
                raise ShapeError(f"gru params: {name} must be {(h, h)}")
        for name in ("bz", "br", "bc"):
            if getattr(self, name).shape != (h,):
                raise ShapeError(f"gru params: {name} must be {(h,)}")

    @property
    def hidden(self) -> int:
        return self.Wz.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Wz.shape[1]


@dataclass(frozen=True)
class NoiseScheme:
    """Noise variant plus std-dev; fixed for a whole model."""

    variant: str  # "FFN" or "RN"
    sigma: float

    def __post_init__(self):
        if self.variant not in NOISE_VARIANTS:
            raise ValueError(f"unknown noise variant {self.variant!r}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    def with_sigma(self, sigma: float) -> "NoiseScheme":
        return replace(self, sigma=sigma)


def dense_forward(x: Tensor, p: DenseParams, noise=None):
    """Affine map z = x W^T + b (+ Gaussian noise), then the activation.

    ``noise`` is an optional (sigma, rng) pair; sigma 0 (or None) leaves the
    clean path untouched, bit for bit. Returns (preactivation, activation).
    """
    if x.data.ndim != 2 or x.shape[1] != p.W.shape[1]:
        raise ShapeError(
            f"dense input {x.shape} does not match weights {p.W.shape}")
    z = add_rowvec(x @ p.W.T, p.b)
    if noise is not None:
        sigma, rng = noise
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        if sigma > 0:
            z = z + gaussian(z.shape, sigma, rng, dtype=z.dtype)
    if p.activation == "tanh":
        h = z.tanh()
    elif p.activation == "softmax":
        h = softmax_rows(z)
    else:
        h = z
    return z, h


class GruStepper:
    """One GRU layer unrolled step by step; weight transposes built once."""

    def __init__(self, p: GruParams):
        self.p = p
        self.WzT, self.WrT, self.WcT = p.Wz.T, p.Wr.T, p.Wc.T
        self.UzT, self.UrT, self.UcT = p.Uz.T, p.Ur.T, p.Uc.T

    def init_state(self, batch: int, dtype) -> Tensor:
        return Tensor(np.zeros((batch, self.p.hidden), dtype=dtype))

    def gates(self, x_t: Tensor, h_prev: Tensor):
        p = self.p
        u = add_rowvec(x_t @ self.WzT + h_prev @ self.UzT, p.bz).sigmoid()
        r = add_rowvec(x_t @ self.WrT + h_prev @ self.UrT, p.br).sigmoid()
        zc = add_rowvec(x_t @ self.WcT + (r * h_prev) @ self.UcT, p.bc)
        return r, u, zc

    @staticmethod
    def combine(u: Tensor, h_prev: Tensor, candidate: Tensor) -> Tensor:
        return (1.0 - u) * h_prev + u * candidate

    def step(self, x_t: Tensor, h_prev: Tensor):
        """Clean step: returns (candidate preactivation, new hidden state)."""
        _, u, zc = self.gates(x_t, h_prev)
        return zc, self.combine(u, h_prev, zc.tanh())

    def step_noisy(self, x_t: Tensor, h_carry: Tensor, scheme: NoiseScheme,
                   rng: Rng | None):
        """Noisy-path step; returns (noisy preactivation, noisy output, carry).

        The carry is always the un-noised state: under RN the noise perturbs
        only the candidate entering this step's output, never the recurrence.
        Under FFN (or sigma 0) the step is exactly the clean one.
        """
        _, u, zc = self.gates(x_t, h_carry)
        h = self.combine(u, h_carry, zc.tanh())
        if scheme.variant == "RN" and scheme.sigma > 0:
            if rng is None:
                raise ValueError("RN scheme with sigma > 0 needs an rng")
            z_noisy = zc + gaussian(zc.shape, scheme.sigma, rng, dtype=zc.dtype)
            h_noisy = self.combine(u, h_carry, z_noisy.tanh())
            return z_noisy, h_noisy, h
        return zc, h, h


def gru_step(x_t: Tensor, h_prev: Tensor, p: GruParams):
    """Single clean GRU step on a [batch, D] input and [batch, H] state."""
    _check_step_shapes(x_t, h_prev, p)
    return GruStepper(p).step(x_t, h_prev)


def gru_step_noisy(x_t: Tensor, h_carry: Tensor, p: GruParams,
                   scheme: NoiseScheme, rng: Rng | None):
    """Single noisy-path GRU step; see GruStepper.step_noisy."""
    _check_step_shapes(x_t, h_carry, p)
    return GruStepper(p).step_noisy(x_t, h_carry, scheme, rng)


def _check_step_shapes(x_t: Tensor, h_prev: Tensor, p: GruParams):
    if x_t.data.ndim != 2 or x_t.shape[1] != p.input_dim:
        raise ShapeError(f"gru input {x_t.shape} does not match D={p.input_dim}")
    if h_prev.shape != (x_t.shape[0], p.hidden):
        raise ShapeError(
            f"gru state {h_prev.shape} does not match batch {x_t.shape[0]}, "
            f"H={p.hidden}")
