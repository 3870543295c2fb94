"""
Environmental correction network (CoNN) and the final combining layer.

The CoNN maps the 23 normalised environment features to a velocity
estimate; the combiner is a single affine layer taking
``(v_spnn_x, v_spnn_y, v_conn_x, v_conn_y)`` to the output velocity.
All velocities here are in normalised units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import DenseNet, net_forward

CONN_SIZES = (23, 181, 297, 149, 295, 2)
DOMINANCE = ("spnn", "conn", "balanced")


def conn_net(rng: np.random.Generator, name: str = "conn") -> DenseNet:
    return DenseNet.create(CONN_SIZES, rng, name=name)


def conn_forward(net: DenseNet, features) -> np.ndarray:
    return net_forward(net, features)


@dataclass
class CombinerLayer:
    weight: np.ndarray  # (2, 4)
    bias: np.ndarray  # (2,)

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.shape != (2, 4) or self.bias.shape != (2,):
            raise ValueError("combiner needs a (2, 4) weight and a (2,) bias")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("combiner parameters must be finite")

    def parameters(self) -> dict[str, np.ndarray]:
        return {"combiner.weight": self.weight, "combiner.bias": self.bias}

    def copy(self) -> "CombinerLayer":
        return CombinerLayer(self.weight.copy(), self.bias.copy())


def init_combiner(dominance: str = "spnn") -> CombinerLayer:
    """Per-axis weights 0.9/0.1 toward the dominant input (0.5/0.5 when balanced)."""
    if dominance not in DOMINANCE:
        raise ValueError(f"dominance must be one of {DOMINANCE}")
    w_s, w_c = {"spnn": (0.9, 0.1), "conn": (0.1, 0.9), "balanced": (0.5, 0.5)}[dominance]
    eye = np.eye(2)
    return CombinerLayer(np.hstack([w_s * eye, w_c * eye]), np.zeros(2))


def combine(v_spnn, v_conn, layer: CombinerLayer) -> np.ndarray:
    u = np.concatenate([np.asarray(v_spnn, float), np.asarray(v_conn, float)], axis=-1)
    return u @ layer.weight.T + layer.bias


def contribution_split(layer: CombinerLayer, v_spnn, v_conn) -> tuple[np.ndarray, np.ndarray]:
    """Input-times-weight shares of each submodel; ``spnn + conn + bias`` is the output."""
    spnn = np.asarray(v_spnn, float) @ layer.weight[:, :2].T
    conn = np.asarray(v_conn, float) @ layer.weight[:, 2:].T
    return spnn, conn


@dataclass
class ContributionTrace:
    spnn: np.ndarray  # (T, 2)
    conn: np.ndarray
    bias: np.ndarray  # (2,)

    @property
    def output(self) -> np.ndarray:
        return self.spnn + self.conn + self.bias

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("frame", "spnn_vx", "spnn_vy", "conn_vx", "conn_vy",
                        "bias_x", "bias_y", "out_vx", "out_vy"))
            out = self.output
            for k in range(len(self.spnn)):
                row = [*self.spnn[k], *self.conn[k], *self.bias, *out[k]]
                w.writerow([k + 1] + [repr(float(x)) for x in row])
