"""
Loss assembly and the joint training loop.

Each epoch visits the training trajectories in a seeded order. For every
trajectory the whole pipeline is run over its frames, the data and
degeneracy losses are accumulated, one reverse pass is made, and the
three components (gradient-matrix network, CoNN, combiner) are stepped
by their own Adam optimisers and learning-rate schedules.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, OptimizerState, backward, optimizer_step, scheduler_step
from .combiner import DOMINANCE
from .dataset import CellTrack, NormStats, TrajectorySet, track_features
from .generic import DivergenceError
from .model import ModelBundle, feature_positions, frame_step

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    lr: float
    step_epochs: int
    gamma: float


# learning rate, epochs between decays, decay factor per component
CASES = {
    "insilico": dict(spnn=Schedule(1e-2, 500, 0.1), conn=Schedule(1e-3, 500, 0.2),
                     combiner=Schedule(1e-2, 500, 0.1), dominance="spnn"),
    "insilico-noise": dict(spnn=Schedule(1e-2, 500, 0.1), conn=Schedule(1e-2, 500, 0.1),
                           combiner=Schedule(1e-2, 500, 0.1), dominance="spnn"),
    "real": dict(spnn=Schedule(5e-5, 100, 0.9), conn=Schedule(5e-4, 100, 0.9),
                 combiner=Schedule(5e-4, 100, 0.9), dominance="conn"),
}


@dataclass
class TrainConfig:
    spnn: Schedule = field(default_factory=lambda: Schedule(1e-2, 500, 0.1))
    conn: Schedule = field(default_factory=lambda: Schedule(1e-3, 500, 0.2))
    combiner: Schedule = field(default_factory=lambda: Schedule(1e-2, 500, 0.1))
    epochs: int = 5000
    lambda_d: float = 100.0
    dominance: str = "spnn"
    seed: int = 0
    teacher_forcing: bool = True

    def __post_init__(self) -> None:
        for name in ("spnn", "conn", "combiner"):
            s = getattr(self, name)
            if isinstance(s, dict):
                setattr(self, name, s := Schedule(**s))
            if not s.lr > 0 or s.step_epochs < 0 or not 0 < s.gamma <= 1:
                raise ValueError(f"invalid {name} schedule {s}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lambda_d < 0:
            raise ValueError("lambda_d must be >= 0")
        if self.dominance not in DOMINANCE:
            raise ValueError(f"dominance must be one of {DOMINANCE}")

    @classmethod
    def for_case(cls, case: str, **overrides) -> "TrainConfig":
        if case not in CASES:
            raise ValueError(f"unknown case {case!r}; expected one of {sorted(CASES)}")
        params = dict(CASES[case])
        params.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**params)

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDivergence(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Model-ready trajectory: frames with a defined velocity only."""

    cell_id: int
    frames: np.ndarray
    states: np.ndarray  # (T, 4) x, y, vx, vy in pixels
    features: np.ndarray  # (T, 23) physical units

    def __len__(self) -> int:
        return len(self.frames)


def build_trajectory(ts: TrajectorySet, track: CellTrack) -> Trajectory:
    feats = track_features(ts, track)
    return Trajectory(track.cell_id, track.frames[1:], track.states(), feats[1:])


def build_trajectories(ts: TrajectorySet, tracks) -> list[Trajectory]:
    items = tracks.values() if isinstance(tracks, dict) else tracks
    return [build_trajectory(ts, t) for t in items if len(t) >= 3]


def fit_stats(trajectories: list[Trajectory]) -> tuple[NormStats, NormStats]:
    states = np.vstack([t.states for t in trajectories])
    feats = np.vstack([t.features for t in trajectories])
    return NormStats.fit(states), NormStats.fit(feats)


@dataclass
class _Prepared:
    cell_id: int
    z: np.ndarray
    f: np.ndarray
    p: np.ndarray


def _prepare(bundle: ModelBundle, traj: Trajectory) -> _Prepared:
    return _Prepared(traj.cell_id, bundle.state_stats.normalize(traj.states),
                     bundle.feature_stats.normalize(traj.features), traj.states[:, 0:2].copy())


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def data_loss(z_pred, z_gt) -> float:
    """Mean squared error over components, frames and trajectories."""
    d = np.asarray(z_pred, dtype=float) - np.asarray(z_gt, dtype=float)
    return float(np.mean(d * d))


def total_loss(l_data: float, l_deg: float, lambda_d: float) -> float:
    return lambda_d * l_data + l_deg


def trajectory_loss(bundle: ModelBundle, prep: _Prepared, lambda_d: float, tape: GradientTape,
                    teacher_forcing: bool = True):
    """Record the loss of one trajectory; returns ``(total, l_data, l_deg)`` vars."""
    if teacher_forcing:
        s = frame_step(bundle, tape, prep.z[:-1], prep.p[:-1], prep.f[:-1])
        diff = s.z_pred - prep.z[1:]
        l_data = ad.mean(ad.square(diff))
        l_deg = ad.mean(s.r_l + s.r_m)
    else:
        z = tape.variable(prep.z[0:1])
        p = prep.p[0:1]
        sq, deg = [], []
        for k in range(len(prep.z) - 1):
            f = feature_positions(bundle, p, prep.f[k:k + 1]) if k else prep.f[0:1]
            s = frame_step(bundle, tape, z, p, f)
            sq.append(ad.sum_(ad.square(s.z_pred - prep.z[k + 1:k + 2])))
            deg.append(ad.sum_(s.r_l + s.r_m))
            z, p = s.z_pred, s.p_next
        n = len(prep.z) - 1
        l_data = ad.mul(_sum_all(sq), 1.0 / (4 * n))
        l_deg = ad.mul(_sum_all(deg), 1.0 / n)
    total = ad.mul(l_data, lambda_d) + l_deg
    return total, l_data, l_deg


def _sum_all(vs):
    out = vs[0]
    for v in vs[1:]:
        out = out + v
    return out


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    l_data: list[float] = field(default_factory=list)
    l_deg: list[float] = field(default_factory=list)
    lr_spnn: list[float] = field(default_factory=list)
    lr_conn: list[float] = field(default_factory=list)
    lr_comb: list[float] = field(default_factory=list)

    COLUMNS = ("epoch", "l_data", "l_deg", "lr_spnn", "lr_conn", "lr_comb")

    def __len__(self) -> int:
        return len(self.epoch)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for row in zip(*(getattr(self, c) for c in self.COLUMNS)):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


def _optimizers(config: TrainConfig) -> dict[str, OptimizerState]:
    return {
        name: OptimizerState(lr=s.lr, step_epochs=s.step_epochs, gamma=s.gamma)
        for name, s in (("spnn", config.spnn), ("conn", config.conn), ("combiner", config.combiner))
    }


def train(config: TrainConfig, trajectories: list[Trajectory], stats=None,
          bundle: ModelBundle | None = None, log_every: int = 0, callback=None):
    """Train a bundle on ``trajectories``; returns ``(bundle, history)``.

    Normalisation statistics are fitted on ``trajectories`` unless given.
    ``callback(epoch, bundle, history)`` runs after every epoch.
    """
    if not trajectories:
        raise ValueError("no training trajectories")
    rng = np.random.default_rng(config.seed)
    if bundle is None:
        state_stats, feature_stats = stats if stats is not None else fit_stats(trajectories)
        bundle = ModelBundle.create(rng, state_stats, feature_stats, config.dominance)
    bundle.meta.update(config=config.to_dict(), teacher_forcing=config.teacher_forcing)
    prepared = [_prepare(bundle, t) for t in trajectories]
    opts = _optimizers(config)
    groups = {
        "spnn": bundle.spnn.parameters(),
        "conn": bundle.conn.parameters(),
        "combiner": bundle.combiner.parameters(),
    }
    history = History()
    for epoch in range(config.epochs):
        lrs = {name: scheduler_step(opt, epoch) for name, opt in opts.items()}
        sum_data = sum_deg = 0.0
        for idx in rng.permutation(len(prepared)):
            prep = prepared[idx]
            tape = GradientTape()
            total, l_data, l_deg = trajectory_loss(bundle, prep, config.lambda_d, tape,
                                                   config.teacher_forcing)
            if not np.isfinite(total.value):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}, trajectory of cell {prep.cell_id}")
            grads = backward(tape, np.float64(1.0), output=total)
            try:
                for name, params in groups.items():
                    optimizer_step(opts[name], params, {k: grads[k] for k in params})
            except ad.AutodiffError as exc:
                raise TrainingDivergence(
                    f"epoch {epoch}, trajectory of cell {prep.cell_id}: {exc}") from exc
            sum_data += float(l_data.value)
            sum_deg += float(l_deg.value)
        n = len(prepared)
        history.epoch.append(epoch)
        history.l_data.append(sum_data / n)
        history.l_deg.append(sum_deg / n)
        history.lr_spnn.append(lrs["spnn"])
        history.lr_conn.append(lrs["conn"])
        history.lr_comb.append(lrs["combiner"])
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            log.info("epoch %d  l_data=%.3e  l_deg=%.3e", epoch, history.l_data[-1],
                     history.l_deg[-1])
        if callback is not None:
            callback(epoch, bundle, history)
    return bundle, history


def evaluate_losses(bundle: ModelBundle, trajectories: list[Trajectory], lambda_d: float = 1.0,
                    teacher_forcing: bool = True) -> tuple[float, float]:
    """Mean ``(l_data, l_deg)`` over trajectories without updating anything."""
    ld = lg = 0.0
    for t in trajectories:
        _, l_data, l_deg = trajectory_loss(bundle, _prepare(bundle, t), lambda_d, GradientTape(),
                                           teacher_forcing)
        ld += float(l_data.value)
        lg += float(l_deg.value)
    return ld / len(trajectories), lg / len(trajectories)


__all__ = [
    "CASES", "DivergenceError", "History", "Schedule", "TrainConfig", "Trajectory",
    "TrainingDivergence", "build_trajectories", "data_loss", "evaluate_losses", "fit_stats",
    "total_loss", "train", "trajectory_loss",
]
