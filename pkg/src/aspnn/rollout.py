"""
Roll-out prediction, the velocity accuracy metric, and plot-ready exports.

A roll-out only sees the initial state; afterwards the predicted position
and velocity are fed back every frame. Environment features come from
observations, with their position slots replaced by the predicted
position unless ``observed_positions`` is set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import GradientTape
from .combiner import ContributionTrace, contribution_split
from .generic import DivergenceError, GradientMatrices, ThermoTrace, thermo_increments
from .model import ModelBundle, feature_positions, frame_step

DEFAULT_MAX_FRAMES = 105


class MetricError(ValueError):
    """The metric is undefined for the given data."""


@dataclass
class RolloutResult:
    states: np.ndarray  # (n + 1, 4) pixels; row 0 is the initial state
    thermo: ThermoTrace
    contributions: ContributionTrace

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, 0:2]

    @property
    def velocities(self) -> np.ndarray:
        return self.states[:, 2:4]


def rollout(bundle: ModelBundle, initial, env_features, n_frames: int | None = None,
            observed_positions: bool = False, thermo: str = "generic") -> RolloutResult:
    """Predict ``n_frames`` steps from ``initial = (x, y, vx, vy)``.

    ``env_features`` holds physical 23-component vectors; row ``k`` is the
    environment of the frame the ``k``-th step starts from.

    Thermodynamic increments are taken along the GENERIC step made from
    each roll-out state (``thermo="generic"``), or along consecutive
    combined roll-out states (``thermo="state"``), which also carry the
    unstructured correction network's contribution.
    """
    if thermo not in ("generic", "state"):
        raise ValueError(f"thermo must be 'generic' or 'state', got {thermo!r}")
    feats = np.atleast_2d(np.asarray(env_features, dtype=float))
    n = len(feats) if n_frames is None else n_frames
    if n > len(feats):
        raise ValueError(f"n_frames={n} exceeds the {len(feats)} available feature frames")
    st = bundle.state_stats
    feats_norm = bundle.feature_stats.normalize(feats)
    state = np.asarray(initial, dtype=float).copy()
    states = [state]
    dE, dS = [0.0], [0.0]
    spnn_share, conn_share = [], []
    for k in range(n):
        z = st.normalize(state)[None, :]
        p = state[None, 0:2]
        f = feats_norm[k:k + 1] if observed_positions else feature_positions(bundle, p, feats_norm[k:k + 1])
        s = frame_step(bundle, GradientTape(), z, p, f)
        v_out = s.v_out.value[0]
        nxt = np.concatenate([s.p_next.value[0], st.denormalize(np.r_[0.0, 0.0, v_out])[2:4]])
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"roll-out diverged at frame {k + 1}")
        g = GradientMatrices.from_output(s.gm.value[0])
        target = s.z_spnn if thermo == "generic" else s.z_pred
        e, h = thermo_increments(z[0], target.value[0], g)
        dE.append(float(e))
        dS.append(float(h))
        a, b = contribution_split(bundle.combiner, s.v_spnn.value[0], s.v_conn.value[0])
        spnn_share.append(a)
        conn_share.append(b)
        state = nxt
        states.append(state)
    return RolloutResult(
        np.array(states),
        ThermoTrace(dE, dS),
        ContributionTrace(np.array(spnn_share).reshape(-1, 2), np.array(conn_share).reshape(-1, 2),
                          bundle.combiner.bias.copy()),
    )


def velocity_accuracy(pred, gt, eps: float = 1e-6) -> tuple[float, float]:
    """Per-axis mean of ``100 * (1 - |(pred - gt) / gt|)``, clamped at 0.

    Frames where ``|gt| < eps`` on an axis are left out for that axis.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    gt = np.asarray(gt, dtype=float).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    out = []
    for axis in (0, 1):
        keep = np.abs(gt[:, axis]) >= eps
        if not keep.any():
            raise MetricError(f"accuracy undefined on axis {axis}: every |v_gt| < {eps}")
        rel = np.abs((pred[keep, axis] - gt[keep, axis]) / gt[keep, axis])
        out.append(float(np.mean(np.clip(100.0 * (1.0 - rel), 0.0, None))))
    return out[0], out[1]


def rmse(a, b) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.sqrt(np.mean(d * d)))


def export_traces(result: RolloutResult, gt_positions, trajectory_path, thermo_path,
                  contribution_path) -> None:
    """Write trajectory, thermodynamic and contribution CSVs."""
    gt = np.asarray(gt_positions, dtype=float).reshape(-1, 2)
    for p in (trajectory_path, thermo_path, contribution_path):
        parent = Path(p).parent
        if not parent.is_dir():
            raise OSError(f"cannot write {p}: directory {parent} does not exist")
    with open(trajectory_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("frame", "x_pred", "y_pred", "x_gt", "y_gt"))
        for k, (pp, g) in enumerate(zip(result.positions, gt)):
            w.writerow([k] + [repr(float(x)) for x in (*pp, *g)])
    result.thermo.to_csv(thermo_path)
    result.contributions.to_csv(contribution_path)


def read_csv_columns(path) -> dict[str, np.ndarray]:
    """Load a numeric CSV written by the exporters into column arrays."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(x) for x in row] for row in reader]
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    return {name: data[:, i] for i, name in enumerate(header)}
