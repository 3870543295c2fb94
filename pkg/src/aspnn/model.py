"""
The assembled model: gradient-matrix network, CoNN, combiner, and the
normalisation statistics they were trained with, plus checkpoint I/O.

:func:`frame_step` is the single definition of one prediction frame and
is shared by training (teacher forcing or unrolled) and roll-out.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DenseNet, GradientTape, Layer, Var, net_forward
from .combiner import CombinerLayer, conn_net, init_combiner
from .dataset import NormStats
from .generic import GenericOperators, spnn_net

CHECKPOINT_FORMAT = "aspnn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelBundle:
    spnn: DenseNet
    conn: DenseNet
    combiner: CombinerLayer
    state_stats: NormStats
    feature_stats: NormStats
    ops: GenericOperators = field(default_factory=GenericOperators)
    mitosis: DenseNet | None = None
    mitosis_stats: NormStats | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, rng: np.random.Generator, state_stats: NormStats, feature_stats: NormStats,
               dominance: str = "spnn", meta: dict | None = None) -> "ModelBundle":
        return cls(spnn_net(rng), conn_net(rng), init_combiner(dominance), state_stats,
                   feature_stats, meta=dict(meta or {}))

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        params.update(self.spnn.parameters())
        params.update(self.conn.parameters())
        params.update(self.combiner.parameters())
        return params

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        return load_checkpoint(path)


# ---------------------------------------------------------------------------
# One frame of the pipeline
# ---------------------------------------------------------------------------


@dataclass
class StepVars:
    """Tape variables produced by one frame (all normalised unless noted)."""

    gm: Var  # (N, 32) flattened A | B
    a: Var  # A z
    b: Var  # B z
    z_spnn: Var
    v_spnn: Var
    v_conn: Var
    v_out: Var
    p_next: Var  # physical pixels
    z_pred: Var
    r_l: Var  # (N,)
    r_m: Var


def frame_step(bundle: ModelBundle, tape: GradientTape, z_norm, p_phys, feats_norm) -> StepVars:
    """Predict the next state for a batch of ``N`` cells.

    ``z_norm`` is the normalised input state ``(N, 4)``, ``p_phys`` the
    matching positions in pixels and ``feats_norm`` the normalised
    environment features ``(N, 23)``.
    """
    z = z_norm if isinstance(z_norm, Var) else tape.variable(z_norm)
    n = z.shape[0]
    gm = net_forward(bundle.spnn, z, tape)
    A = ad.reshape(gm[:, :16], (n, 4, 4))
    B = ad.reshape(gm[:, 16:], (n, 4, 4))
    a = ad.batched_matvec(A, z)
    b = ad.batched_matvec(B, z)
    L, M = bundle.ops.L, bundle.ops.M
    z_spnn = z + ad.matmul(a, L.T) + ad.matmul(b, M.T)
    v_spnn = z_spnn[:, 2:4]

    v_conn = net_forward(bundle.conn, feats_norm, tape)
    u = ad.concat([v_spnn, v_conn], axis=1)
    w = tape.param("combiner.weight", bundle.combiner.weight)
    c = tape.param("combiner.bias", bundle.combiner.bias)
    v_out = ad.matmul(u, ad.transpose(w)) + c

    st = bundle.state_stats
    half_span = st.span[2:4] / 2.0
    v_phys = v_out * half_span + (half_span + st.min[2:4])
    p_next = v_phys + p_phys
    p_next_norm = p_next * st.scale[0:2] + st.offset[0:2]
    z_pred = ad.concat([p_next_norm, v_out], axis=1)

    r_l = ad.sum_(ad.square(ad.matmul(b, L.T)), axis=1)
    r_m = ad.sum_(ad.square(ad.matmul(a, M.T)), axis=1)
    return StepVars(gm, a, b, z_spnn, v_spnn, v_conn, v_out, p_next, z_pred, r_l, r_m)


def feature_positions(bundle: ModelBundle, p_phys, feats_norm):
    """Overwrite the position slots of normalised features with ``p_phys``."""
    fs = bundle.feature_stats
    if isinstance(p_phys, Var):
        p_feat = p_phys * fs.scale[0:2] + fs.offset[0:2]
        rest = feats_norm[:, 2:] if isinstance(feats_norm, Var) else np.asarray(feats_norm)[:, 2:]
        return ad.concat([p_feat, rest], axis=1)
    out = np.array(feats_norm, dtype=float, copy=True)
    out[:, 0:2] = np.asarray(p_phys) * fs.scale[0:2] + fs.offset[0:2]
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _net_to_dict(net: DenseNet) -> dict:
    return {
        "name": net.name,
        "layers": [
            {"in": l.in_dim, "out": l.out_dim, "activation": l.activation,
             "weight": l.weight.ravel().tolist(), "bias": l.bias.tolist()}
            for l in net.layers
        ],
    }


def _net_from_dict(d: dict) -> DenseNet:
    layers = [
        Layer(np.array(l["weight"], dtype=float).reshape(l["out"], l["in"]),
              np.array(l["bias"], dtype=float), l["activation"])
        for l in d["layers"]
    ]
    return DenseNet(layers, d["name"])


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(bundle: ModelBundle, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "networks": {"spnn": _net_to_dict(bundle.spnn), "conn": _net_to_dict(bundle.conn)},
        "combiner": {"weight": bundle.combiner.weight.ravel().tolist(),
                     "bias": bundle.combiner.bias.tolist()},
        "norm": {"state": bundle.state_stats.to_dict(), "features": bundle.feature_stats.to_dict()},
        "operators": {"L": bundle.ops.L.tolist(), "M": bundle.ops.M.tolist()},
        "meta": bundle.meta,
        "config_hash": config_hash(bundle.meta.get("config", {})),
    }
    if bundle.mitosis is not None:
        doc["networks"]["mitosis"] = _net_to_dict(bundle.mitosis)
        doc["norm"]["mitosis"] = bundle.mitosis_stats.to_dict()
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> ModelBundle:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an aspnn checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    nets = doc["networks"]
    mitosis = _net_from_dict(nets["mitosis"]) if "mitosis" in nets else None
    return ModelBundle(
        spnn=_net_from_dict(nets["spnn"]),
        conn=_net_from_dict(nets["conn"]),
        combiner=CombinerLayer(np.array(doc["combiner"]["weight"]).reshape(2, 4),
                               np.array(doc["combiner"]["bias"])),
        state_stats=NormStats.from_dict(doc["norm"]["state"]),
        feature_stats=NormStats.from_dict(doc["norm"]["features"]),
        ops=GenericOperators(np.array(doc["operators"]["L"]), np.array(doc["operators"]["M"])),
        mitosis=mitosis,
        mitosis_stats=NormStats.from_dict(doc["norm"]["mitosis"]) if mitosis else None,
        meta=doc.get("meta", {}),
    )
