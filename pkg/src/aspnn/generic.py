"""
GENERIC (metriplectic) time step with learned gradient matrices.

For the state ``z = (x, y, vx, vy)`` the discrete evolution is

    z_next = z + dt * (L @ A(z) @ z + M @ B(z) @ z)

with a constant skew-symmetric ``L`` (reversible part), a constant
symmetric positive semi-definite ``M`` (dissipative part), and gradient
matrices ``A``, ``B`` predicted by a network from the normalised state.
``A z`` and ``B z`` play the role of the discrete energy and entropy
gradients; the degeneracy conditions ``L B z = 0`` and ``M A z = 0`` are
enforced softly through a residual loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DenseNet, net_forward

STATE_DIM = 4
SPNN_SIZES = (4, 16, 64, 128, 64, 16, 32)

L_MATRIX = np.array([
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0, 0.0],
    [0.0, -1.0, 0.0, 0.0],
])
M_MATRIX = np.array([
    [1.0, -0.5, 0.0, 0.0],
    [-0.5, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, -0.5],
    [0.0, 0.0, -0.5, 1.0],
])


class DivergenceError(FloatingPointError):
    """A time step produced non-finite values."""


@dataclass(frozen=True)
class GenericOperators:
    L: np.ndarray = field(default_factory=lambda: L_MATRIX.copy())
    M: np.ndarray = field(default_factory=lambda: M_MATRIX.copy())

    def __post_init__(self) -> None:
        if not np.array_equal(self.L, -self.L.T):
            raise ValueError("L must be skew-symmetric")
        if not np.array_equal(self.M, self.M.T):
            raise ValueError("M must be symmetric")
        if np.linalg.eigvalsh(self.M).min() < -1e-12:
            raise ValueError("M must be positive semi-definite")


@dataclass
class GradientMatrices:
    """``A`` and ``B`` as ``(4, 4)`` or stacked ``(N, 4, 4)`` arrays."""

    A: np.ndarray
    B: np.ndarray

    @classmethod
    def from_output(cls, out: np.ndarray) -> "GradientMatrices":
        out = np.asarray(out, dtype=float)
        lead = out.shape[:-1]
        return cls(out[..., :16].reshape(lead + (4, 4)), out[..., 16:].reshape(lead + (4, 4)))


def spnn_net(rng: np.random.Generator, name: str = "spnn") -> DenseNet:
    return DenseNet.create(SPNN_SIZES, rng, name=name)


def predict_gradient_matrices(net: DenseNet, z_norm) -> GradientMatrices:
    """Evaluate the gradient-matrix network on one state or a batch."""
    out = net_forward(net, z_norm)
    if out.shape[-1] != 32:
        raise ValueError(f"gradient-matrix network must output 32 values, got {out.shape[-1]}")
    return GradientMatrices.from_output(out)


def _apply(mat: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", mat, z)


def generic_step(z, ops: GenericOperators, g: GradientMatrices, dt: float = 1.0) -> np.ndarray:
    """Explicit step: the right-hand side is evaluated at the current state."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = np.asarray(z, dtype=float)
    z_next = z + dt * (_apply(ops.L, _apply(g.A, z)) + _apply(ops.M, _apply(g.B, z)))
    if not np.all(np.isfinite(z_next)):
        raise DivergenceError("GENERIC step produced non-finite state")
    return z_next


def degeneracy_residual(ops: GenericOperators, g: GradientMatrices, z) -> tuple:
    """``(|L B z|^2, |M A z|^2)``; batched inputs give per-state arrays."""
    z = np.asarray(z, dtype=float)
    r_l = _apply(ops.L, _apply(g.B, z))
    r_m = _apply(ops.M, _apply(g.A, z))
    return (r_l ** 2).sum(axis=-1), (r_m ** 2).sum(axis=-1)


def thermo_increments(z, z_next, g: GradientMatrices) -> tuple:
    """Energy and entropy increments ``(A z).dz`` and ``(B z).dz``."""
    z = np.asarray(z, dtype=float)
    dz = np.asarray(z_next, dtype=float) - z
    return (_apply(g.A, z) * dz).sum(axis=-1), (_apply(g.B, z) * dz).sum(axis=-1)


@dataclass
class ThermoTrace:
    """Per-frame increments; row 0 is the initial state with zero increments."""

    dE: np.ndarray
    dS: np.ndarray

    def __post_init__(self) -> None:
        self.dE = np.asarray(self.dE, dtype=float)
        self.dS = np.asarray(self.dS, dtype=float)

    def __len__(self) -> int:
        return len(self.dE)

    @property
    def E(self) -> np.ndarray:
        return np.cumsum(self.dE)

    @property
    def S(self) -> np.ndarray:
        return np.cumsum(self.dS)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("frame", "dE", "dS", "E_cum", "S_cum"))
            for k, row in enumerate(zip(self.dE, self.dS, self.E, self.S)):
                w.writerow([k] + [repr(float(x)) for x in row])
