"""
Command-line entry point.

    aspnn simulate --out cells.csv [--noise 0.10]
    aspnn train insilico cells.csv --out run/
    aspnn rollout run/model.json cells.csv --out run/rollout/
    aspnn eval run/rollout/traj_*.csv
    aspnn mitosis labelled.csv --out run/mitosis/
    aspnn features cells.csv --out features.csv

Settings may come from a TOML file (``--config``) with one table per
command (``[simulate]``, ``[train]``, ``[rollout]``, ``[mitosis]``);
command-line flags win over file values.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

import numpy as np

from .dataset import (DataError, MIN_TRAJECTORY_FRAMES, export_feature_matrix,
                      filter_correct_trajectories, load_trajectories, split_tracks,
                      track_features, write_trajectories)
from .generic import DivergenceError
from .mitosis import (MitosisConfig, evaluate_mitosis, mitosis_samples, synthetic_mitosis_records,
                      train_mitosis, write_predictions)
from .model import ModelBundle
from .rollout import DEFAULT_MAX_FRAMES, MetricError, export_traces, read_csv_columns, rollout, \
    velocity_accuracy
from .simulator import SimConfig, SimulationError, simulate
from .training import CASES, TrainConfig, TrainingDivergence, build_trajectories, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("aspnn")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load_section(path: str | None, section: str) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    unknown = set(doc) - {"simulate", "train", "rollout", "mitosis"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return dict(doc.get(section, {}))


def _merge(file_values: dict, allowed: set[str], **flags) -> dict:
    unknown = set(file_values) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    out = dict(file_values)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


@contextmanager
def _atomic(path: Path):
    """Yield a temporary path that replaces ``path`` only on success."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _model_tracks(ts, case: str, min_frames: int | None):
    if case == "real":
        correct, _ = filter_correct_trajectories(ts, min_frames or MIN_TRAJECTORY_FRAMES)
        return correct
    return {cid: t for cid, t in ts.tracks.items() if len(t) >= (min_frames or 3)}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    allowed = {f.name for f in fields(SimConfig)} | {"format"}
    values = _merge(_load_section(args.config, "simulate"), allowed, seed=args.seed,
                    noise_fraction=args.noise, frames=args.frames, n_cells=args.n_cells,
                    spawn=args.spawn)
    fmt = values.pop("format", args.format or "csv")
    try:
        config = SimConfig(**values)
        config.validate()
    except (TypeError, SimulationError) as exc:
        raise ConfigError(str(exc)) from exc
    records = simulate(config)
    out = Path(args.out)
    with _atomic(out) as tmp:
        write_trajectories(records, tmp, fmt, config.channel_width, config.channel_height)
    print(f"wrote {len(records)} records for {config.n_cells} cells to {out}")
    return 0


def cmd_train(args) -> int:
    section = _load_section(args.config, "train")
    allowed = {f.name for f in fields(TrainConfig)} | {"test_fraction", "min_frames", "width",
                                                       "height", "mitosis_epochs"}
    values = _merge(section, allowed, seed=args.seed, epochs=args.epochs,
                    lambda_d=args.lambda_d, teacher_forcing=args.teacher_forcing,
                    dominance=args.dominance)
    test_fraction = values.pop("test_fraction", args.test_fraction)
    min_frames = values.pop("min_frames", args.min_frames)
    width, height = values.pop("width", args.width), values.pop("height", args.height)
    mitosis_epochs = values.pop("mitosis_epochs", args.mitosis_epochs)
    try:
        config = TrainConfig.for_case(args.case, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    ts = load_trajectories(args.data, width=width, height=height)
    tracks = _model_tracks(ts, args.case, min_frames)
    if not tracks:
        raise DataError(f"{args.data}: no usable trajectories")
    train_ids, test_ids = split_tracks(list(tracks), test_fraction, config.seed)
    trajs = build_trajectories(ts, {cid: tracks[cid] for cid in train_ids})
    logging.getLogger("aspnn.training").setLevel(logging.INFO if args.verbose else logging.WARNING)
    bundle, history = train(config, trajs, log_every=max(1, config.epochs // 20))
    bundle.meta.update(case=args.case, train_ids=train_ids, test_ids=test_ids)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mitosis:
        labelled = [tracks[c] for c in train_ids if tracks[c].mitosis is not None]
        if not labelled:
            raise DataError("--mitosis requested but the data has no mitosis labels")
        model, mhist = train_mitosis(MitosisConfig(epochs=mitosis_epochs, seed=config.seed),
                                     [mitosis_samples(ts, t) for t in labelled])
        bundle.mitosis, bundle.mitosis_stats = model.net, model.stats
        _write_series(out / "mitosis_history.csv", "bce", mhist)
    history.to_csv(out / "history.csv")
    bundle.save(out / "model.json")
    print(f"trained {len(trajs)} trajectories for {config.epochs} epochs: "
          f"l_data={history.l_data[-1]:.3e} l_deg={history.l_deg[-1]:.3e}")
    print(f"wrote {out / 'model.json'} and {out / 'history.csv'}")
    return 0


def _write_series(path: Path, name: str, values) -> None:
    with open(path, "w") as fh:
        fh.write(f"epoch,{name}\n")
        for k, v in enumerate(values):
            fh.write(f"{k},{float(v)!r}\n")


def cmd_rollout(args) -> int:
    section = _load_section(args.config, "rollout")
    values = _merge(section, {"frames", "observed_positions", "cells"}, frames=args.frames,
                    cells=args.cells)
    max_frames = int(values.get("frames", DEFAULT_MAX_FRAMES))
    observed = bool(values.get("observed_positions", args.observed_positions))
    bundle = _load_bundle(args.checkpoint)
    ts = load_trajectories(args.data, width=args.width, height=args.height)
    case = bundle.meta.get("case", "insilico")
    tracks = _model_tracks(ts, case, None)
    cells = values.get("cells")
    if cells:
        ids = [int(c) for c in str(cells).split(",")] if not isinstance(cells, list) else cells
    else:
        ids = bundle.meta.get("test_ids") or sorted(tracks)
    missing = [c for c in ids if c not in tracks]
    if missing:
        raise DataError(f"cells {missing} have no usable trajectory in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    accs = []
    for traj in build_trajectories(ts, {c: tracks[c] for c in ids}):
        n = min(max_frames - 1, len(traj) - 1)
        result = rollout(bundle, traj.states[0], traj.features[:n], n, observed)
        export_traces(result, traj.states[:n + 1, 0:2], out / f"traj_{traj.cell_id}.csv",
                      out / f"thermo_{traj.cell_id}.csv", out / f"contrib_{traj.cell_id}.csv")
        acc = velocity_accuracy(result.velocities[1:], traj.states[1:n + 1, 2:4])
        accs.append(acc)
        print(f"cell {traj.cell_id}: acc_x={acc[0]:.2f}% acc_y={acc[1]:.2f}%")
    mean = np.mean(accs, axis=0)
    print(f"acc_x={mean[0]:.2f}% acc_y={mean[1]:.2f}%")
    return 0


def cmd_eval(args) -> int:
    accs = []
    for path in args.trajectories:
        try:
            cols = read_csv_columns(path)
            pred = np.diff(np.column_stack([cols["x_pred"], cols["y_pred"]]), axis=0)
            gt = np.diff(np.column_stack([cols["x_gt"], cols["y_gt"]]), axis=0)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"{path}: {exc}") from exc
        accs.append(velocity_accuracy(pred, gt, eps=args.eps))
    mean = np.mean(accs, axis=0)
    print(f"acc_x={mean[0]:.2f}% acc_y={mean[1]:.2f}%")
    return 0


def cmd_mitosis(args) -> int:
    section = _load_section(args.config, "mitosis")
    allowed = {f.name for f in fields(MitosisConfig)} | {"test_fraction", "window", "threshold"}
    values = _merge(section, allowed, epochs=args.epochs, seed=args.seed)
    test_fraction = values.pop("test_fraction", args.test_fraction)
    window = int(values.pop("window", args.window))
    threshold = float(values.pop("threshold", args.threshold))
    try:
        config = MitosisConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        path = out / "synthetic_mitosis.csv"
        write_trajectories(synthetic_mitosis_records(seed=config.seed), path, width=300.0,
                           height=100.0)
        data = path
    else:
        if not args.data:
            raise ConfigError("give a trajectory file or --synthetic")
        data = args.data
    ts = load_trajectories(data, width=args.width, height=args.height)
    tracks = {c: t for c, t in ts.tracks.items() if t.mitosis is not None and len(t) >= 3}
    if not tracks:
        raise DataError(f"{data}: no labelled trajectories")
    train_ids, test_ids = split_tracks(list(tracks), test_fraction, config.seed)
    samples = {c: mitosis_samples(ts, tracks[c]) for c in tracks}
    model, history = train_mitosis(config, [samples[c] for c in train_ids])
    _write_series(out / "mitosis_history.csv", "bce", history)

    rows, preds, labels = [], [], []
    for c in test_ids:
        s = samples[c]
        p = model.predict(s.features)
        preds.append(p)
        labels.append(s.labels)
        rows.extend(zip(s.frames, [c] * len(p), p, s.labels))
    write_predictions(out / "mitosis_predictions.csv", rows)
    result = evaluate_mitosis(preds, labels, window=window, threshold=threshold)
    (out / "mitosis_events.txt").write_text(result.report())
    prec = "undefined" if result.n_events == 0 else f"{100 * result.precision:.1f}%"
    print(f"precision={prec} false_positive_rate={100 * result.false_positive_rate:.3f}%")
    return 0


def cmd_features(args) -> int:
    ts = load_trajectories(args.data, width=args.width, height=args.height)
    feats, vels = [], []
    for track in ts.tracks.values():
        if len(track) < 2:
            continue
        feats.append(track_features(ts, track)[1:])
        vels.append(track.velocity[1:])
    out = Path(args.out)
    with _atomic(out) as tmp:
        export_feature_matrix(tmp, np.vstack(feats), np.vstack(vels))
    print(f"wrote {sum(len(f) for f in feats)} feature rows to {out}")
    return 0


def _load_bundle(path) -> ModelBundle:
    try:
        return ModelBundle.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from exc


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aspnn", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def image_dims(sp):
        sp.add_argument("--width", type=float, help="image width in pixels (overrides file metadata)")
        sp.add_argument("--height", type=float, help="image height in pixels")

    s = sub.add_parser("simulate", help="generate an in-silico trajectory file")
    s.add_argument("--config", help="TOML config file")
    s.add_argument("--out", required=True, help="output trajectory file")
    s.add_argument("--seed", type=int, help="random seed")
    s.add_argument("--noise", type=float, help="position noise as a fraction of speed (e.g. 0.10)")
    s.add_argument("--frames", type=int, help="number of frames (default 100)")
    s.add_argument("--n-cells", type=int, help="number of cells (default 20)")
    s.add_argument("--spawn", choices=("inlet", "channel"), help="initial placement region")
    s.add_argument("--format", choices=("csv", "jsonl"), help="output format (default csv)")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train the trajectory model")
    t.add_argument("case", choices=sorted(CASES), help="training schedule preset")
    t.add_argument("data", help="trajectory file (csv or jsonl)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config", help="TOML config file")
    t.add_argument("--seed", type=int, help="random seed")
    t.add_argument("--epochs", type=int, help="training epochs (default 5000)")
    t.add_argument("--lambda-d", type=float, help="weight of the data loss (default 100)")
    t.add_argument("--teacher-forcing", type=_on_off, help="on|off (default on)")
    t.add_argument("--dominance", choices=("spnn", "conn", "balanced"),
                   help="initial combiner weighting (default per case)")
    t.add_argument("--test-fraction", type=float, default=0.2, help="held-out share of cells")
    t.add_argument("--min-frames", type=int, help="minimum trajectory length")
    t.add_argument("--mitosis", action="store_true", help="also train the mitosis model")
    t.add_argument("--mitosis-epochs", type=int, default=20000, help="mitosis training epochs")
    image_dims(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="roll out trajectories from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("data")
    r.add_argument("--out", required=True, help="output directory for CSV traces")
    r.add_argument("--config", help="TOML config file")
    r.add_argument("--frames", type=int, help=f"maximum frames per roll-out (default {DEFAULT_MAX_FRAMES})")
    r.add_argument("--cells", help="comma-separated cell ids (default: held-out cells)")
    r.add_argument("--observed-positions", action="store_true",
                   help="feed observed instead of predicted positions into the features")
    image_dims(r)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("eval", help="velocity accuracy of exported trajectory CSVs")
    e.add_argument("trajectories", nargs="+", help="traj_*.csv files from rollout")
    e.add_argument("--eps", type=float, default=1e-6, help="skip frames with |v_gt| below this")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mitosis", help="train and evaluate the mitosis model")
    m.add_argument("data", nargs="?", help="labelled trajectory file")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--config", help="TOML config file")
    m.add_argument("--synthetic", action="store_true", help="use a generated dataset with planted events")
    m.add_argument("--seed", type=int, help="random seed")
    m.add_argument("--epochs", type=int, help="training epochs (default 20000)")
    m.add_argument("--test-fraction", type=float, default=0.3, help="held-out share of cells")
    m.add_argument("--window", type=int, default=3, help="frames either side of an event")
    m.add_argument("--threshold", type=float, default=0.6, help="detection probability threshold")
    image_dims(m)
    m.set_defaults(func=cmd_mitosis)

    f = sub.add_parser("features", help="export the 23-feature matrix with velocity targets")
    f.add_argument("data")
    f.add_argument("--out", required=True)
    image_dims(f)
    f.set_defaults(func=cmd_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MetricError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, DivergenceError, FloatingPointError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
