"""
Mitosis-event probability model and its windowed evaluation.

Inputs per frame are the 23 environment features, the cell velocity,
the area change over the last 2 frames and the brightness change over
the last 3 frames (27 values). The network ends in a two-class softmax
``(p_neg, p_pos)`` and is trained with binary cross-entropy on ``p_pos``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import (DenseNet, GradientTape, OptimizerState, backward, net_forward,
                       optimizer_step, scheduler_step)
from .dataset import (CellTrack, NormStats, TrajectoryRecord, TrajectorySet, recursive_variation,
                      track_features)
from .simulator import SimConfig, simulate

MITOSIS_SIZES = (27, 48, 96, 64, 32, 2)
AREA_WINDOW = 2
BRIGHTNESS_WINDOW = 3
EVENT_WINDOW = 3
THRESHOLD = 0.6
EPS = 1e-12


def mitosis_net(rng: np.random.Generator, name: str = "mitosis") -> DenseNet:
    return DenseNet.create(MITOSIS_SIZES, rng, name=name, output="softmax")


@dataclass
class MitosisSamples:
    """Per-trajectory inputs and labels (frames that have a velocity)."""

    cell_id: int
    frames: np.ndarray
    features: np.ndarray  # (T, 27)
    labels: np.ndarray | None


def mitosis_samples(ts: TrajectorySet, track: CellTrack) -> MitosisSamples:
    feats = track_features(ts, track)
    area_var = recursive_variation(track.area, AREA_WINDOW)
    bright_var = recursive_variation(track.brightness, BRIGHTNESS_WINDOW)
    x = np.hstack([feats, track.velocity, area_var[:, None], bright_var[:, None]])[1:]
    labels = None if track.mitosis is None else track.mitosis[1:].astype(float)
    return MitosisSamples(track.cell_id, track.frames[1:], x, labels)


def mitosis_forward(net: DenseNet, sample) -> np.ndarray:
    """``(..., 2)`` probabilities ``(p_neg, p_pos)``."""
    return net_forward(net, sample)


def bce_loss(p_pos, label, eps: float = EPS):
    """Binary cross-entropy; ``p_pos`` is clipped to ``[eps, 1 - eps]``."""
    p = np.clip(np.asarray(p_pos, dtype=float), eps, 1.0 - eps)
    y = np.asarray(label, dtype=float)
    out = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(out) if out.ndim == 0 else out


def _bce_var(tape: GradientTape, net: DenseNet, x: np.ndarray, y: np.ndarray):
    probs = net_forward(net, x, tape)
    p = ad.clip(probs[:, 1], EPS, 1.0 - EPS)
    ll = ad.mul(ad.log(p), y) + ad.mul(ad.log(1.0 - p), 1.0 - y)
    return ad.mul(ad.mean(ll), -1.0)


@dataclass
class MitosisConfig:
    lr: float = 2e-4
    step_epochs: int = 40000
    gamma: float = 0.5
    epochs: int = 20000
    seed: int = 0


@dataclass
class MitosisModel:
    net: DenseNet
    stats: NormStats

    def predict(self, features) -> np.ndarray:
        """``p_pos`` for raw (unnormalised) 27-component inputs."""
        return mitosis_forward(self.net, self.stats.normalize(features))[..., 1]


def train_mitosis(config: MitosisConfig, samples: list[MitosisSamples],
                  stats: NormStats | None = None) -> tuple[MitosisModel, list[float]]:
    """Minimise mean per-frame BCE; one Adam step per trajectory per epoch.

    Returns the model and the per-epoch mean training BCE.
    """
    samples = [s for s in samples if s.labels is not None and len(s.frames)]
    if not samples:
        raise ValueError("no labelled mitosis samples")
    rng = np.random.default_rng(config.seed)
    if stats is None:
        stats = NormStats.fit(np.vstack([s.features for s in samples]))
    net = mitosis_net(rng)
    opt = OptimizerState(lr=config.lr, step_epochs=config.step_epochs, gamma=config.gamma)
    params = net.parameters()
    data = [(stats.normalize(s.features), s.labels) for s in samples]
    history = []
    for epoch in range(config.epochs):
        scheduler_step(opt, epoch)
        total = 0.0
        for idx in rng.permutation(len(data)):
            x, y = data[idx]
            tape = GradientTape()
            loss = _bce_var(tape, net, x, y)
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"mitosis training diverged at epoch {epoch}")
            grads = backward(tape, np.float64(1.0), output=loss)
            optimizer_step(opt, params, grads)
            total += float(loss.value)
        history.append(total / len(data))
    return MitosisModel(net, stats), history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EventReport:
    trajectory: int
    frame_index: int
    detected: bool
    offsets: list[int]  # window offsets with p_pos above threshold


@dataclass
class MitosisEvaluation:
    precision: float  # NaN when there are no labelled events
    false_positive_rate: float
    n_events: int
    n_detected: int
    n_false_positive: int
    n_negative: int
    events: list[EventReport] = field(default_factory=list)

    def report(self) -> str:
        lines = []
        for e in self.events:
            status = "detected" if e.detected else "missed"
            offs = ",".join(f"{o:+d}" for o in e.offsets) or "-"
            lines.append(f"trajectory {e.trajectory} frame {e.frame_index}: {status} offsets {offs}")
        prec = "undefined (no events)" if self.n_events == 0 else f"{self.precision:.4f}"
        lines.append(f"precision={prec} detected={self.n_detected}/{self.n_events}")
        lines.append(f"false_positive_rate={self.false_positive_rate:.6f} "
                     f"({self.n_false_positive}/{self.n_negative} negative frames)")
        return "\n".join(lines) + "\n"


def evaluate_mitosis(predictions, labels, window: int = EVENT_WINDOW,
                     threshold: float = THRESHOLD) -> MitosisEvaluation:
    """Windowed event precision and false-positive rate.

    ``predictions`` and ``labels`` are per-frame sequences, or lists of them
    (one per trajectory). An event is detected when some ``p_pos`` within
    ``window`` frames either side exceeds ``threshold``; a frame above
    threshold outside every event window is a false positive.
    """
    if len(predictions) and np.ndim(predictions[0]) == 0:
        predictions, labels = [predictions], [labels]
    n_events = n_detected = n_fp = n_neg = 0
    events = []
    for t, (p, y) in enumerate(zip(predictions, labels)):
        p = np.asarray(p, dtype=float)
        y = np.asarray(y).astype(int)
        if p.shape != y.shape:
            raise ValueError(f"trajectory {t}: predictions and labels differ in length")
        above = p > threshold
        covered = np.zeros(len(p), dtype=bool)
        for f in np.flatnonzero(y == 1):
            lo, hi = max(0, f - window), min(len(p), f + window + 1)
            covered[lo:hi] = True
            offsets = [int(k - f) for k in range(lo, hi) if above[k]]
            n_events += 1
            n_detected += bool(offsets)
            events.append(EventReport(t, int(f), bool(offsets), offsets))
        n_fp += int(np.sum(above & ~covered))
        n_neg += int(np.sum(y == 0))
    precision = n_detected / n_events if n_events else float("nan")
    fp_rate = n_fp / n_neg if n_neg else 0.0
    return MitosisEvaluation(precision, fp_rate, n_events, n_detected, n_fp, n_neg, events)


def write_predictions(path, rows) -> None:
    """``rows`` of ``(frame, cell_id, p_pos, label)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("frame", "cell_id", "p_pos", "label"))
        for frame, cid, p, label in rows:
            w.writerow([int(frame), int(cid), repr(float(p)), "" if label is None else int(label)])


# ---------------------------------------------------------------------------
# Synthetic data with planted events
# ---------------------------------------------------------------------------


def synthetic_mitosis_records(n_cells: int = 30, frames: int = 100, seed: int = 0,
                              max_events: int = 2, area_noise: float = 0.5,
                              brightness_noise: float = 1.0) -> list[TrajectoryRecord]:
    """Simulated channel cells with planted mitosis signatures.

    Before each labelled frame ``f`` brightness rises by 8 per frame over
    ``f-2..f`` and area falls by 6 per frame over ``f-1..f``; both relax
    back over the following 6 frames.
    """
    rng = np.random.default_rng(seed)
    sim = simulate(SimConfig(n_cells=n_cells, frames=frames, seed=seed, spawn="channel"))
    area = {}
    bright = {}
    label = {}
    for cid in range(n_cells):
        a = np.zeros(frames)
        b = np.zeros(frames)
        lab = np.zeros(frames, dtype=int)
        k = int(rng.integers(0, max_events + 1))
        candidates = list(range(10, frames - 10))
        chosen = []
        while len(chosen) < k and candidates:
            f = int(rng.choice(candidates))
            chosen.append(f)
            candidates = [c for c in candidates if abs(c - f) >= 20]
        for f in chosen:
            lab[f] = 1
            steps_b = np.zeros(frames)
            steps_b[f - 2:f + 1] = 8.0
            steps_b[f + 1:f + 7] = -4.0
            steps_a = np.zeros(frames)
            steps_a[f - 1:f + 1] = -6.0
            steps_a[f + 1:f + 7] = 2.0
            b += np.cumsum(steps_b)
            a += np.cumsum(steps_a)
        area[cid] = a + rng.normal(0.0, area_noise, frames)
        bright[cid] = b + rng.normal(0.0, brightness_noise, frames)
        label[cid] = lab
    return [
        replace(r, area=r.area + area[r.cell_id][r.frame],
                brightness=r.brightness + bright[r.cell_id][r.frame],
                mitosis=int(label[r.cell_id][r.frame]))
        for r in sim
    ]
