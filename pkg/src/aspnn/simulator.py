"""
In-silico cell channel: rigid discs in a walled 2-D channel.

Every frame each cell's velocity grows by a fixed increment ``(dvx, dvy)``
and its position advances by one frame of that velocity. Walls reflect
the normal velocity component; touching discs exchange their normal
velocity components (equal-mass elastic collision) and are then pushed
apart along the contact normal so no two discs overlap.

Cells start at rest. By default they are seeded in an inlet region sized
so that the imposed drift keeps them inside the channel for the whole
run (``spawn="inlet"``); ``spawn="channel"`` scatters them over the full
channel, which makes wall bounces and collisions common.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dataset import TrajectoryRecord

OVERLAP_TOL = 1e-9
_MAX_PLACEMENT_TRIES = 200_000
_MAX_SEPARATION_PASSES = 200


class SimulationError(ValueError):
    """Invalid configuration or an unresolvable simulation state."""


@dataclass
class SimConfig:
    channel_width: float = 300.0
    channel_height: float = 100.0
    n_cells: int = 20
    radius: float = 5.0
    frames: int = 100
    dvx: float = 0.05
    dvy: float = 0.005
    noise_fraction: float = 0.0
    noise_clamp: bool = True
    seed: int = 0
    spawn: str = "inlet"
    brightness: float = 128.0

    def validate(self) -> None:
        for name in ("channel_width", "channel_height", "radius"):
            if not getattr(self, name) > 0:
                raise SimulationError(f"{name} must be positive")
        if self.n_cells < 1 or self.frames < 1:
            raise SimulationError("n_cells and frames must be >= 1")
        if self.noise_fraction < 0:
            raise SimulationError("noise_fraction must be >= 0")
        if self.spawn not in ("inlet", "channel"):
            raise SimulationError(f"unknown spawn region {self.spawn!r}")
        if 2 * self.radius > min(self.channel_width, self.channel_height):
            raise SimulationError("cell diameter exceeds channel size")

    def spawn_box(self) -> tuple[float, float, float, float]:
        """(x_lo, x_hi, y_lo, y_hi) allowed for initial centres."""
        r = self.radius
        x_lo, x_hi = r, self.channel_width - r
        y_lo, y_hi = r, self.channel_height - r
        if self.spawn == "inlet":
            steps = self.frames - 1
            drift_x = self.dvx * steps * (steps + 1) / 2
            drift_y = self.dvy * steps * (steps + 1) / 2
            nx_lo, nx_hi = x_lo + max(0.0, -drift_x), x_hi - max(0.0, drift_x)
            ny_lo, ny_hi = y_lo + max(0.0, -drift_y), y_hi - max(0.0, drift_y)
            # fall back to the full extent when the drift crosses the channel
            if nx_hi - nx_lo > 2 * r:
                x_lo, x_hi = nx_lo, nx_hi
            if ny_hi - ny_lo > 2 * r:
                y_lo, y_hi = ny_lo, ny_hi
        return x_lo, x_hi, y_lo, y_hi


@dataclass
class SimCell:
    id: int
    position: np.ndarray
    velocity: np.ndarray
    radius: float
    eccentricity: float = 0.0
    brightness: float = 128.0

    @property
    def area(self) -> float:
        return math.pi * self.radius ** 2


def resolve_elastic_collision(a: SimCell, b: SimCell) -> tuple[SimCell, SimCell]:
    """Swap the normal velocity components of two equal-mass discs.

    Pairs that are not approaching along the centre line are returned
    unchanged.
    """
    delta = b.position - a.position
    dist = float(np.hypot(*delta))
    if dist == 0.0:
        raise SimulationError(f"cells {a.id} and {b.id} have coincident centres")
    n = delta / dist
    closing = float(np.dot(a.velocity - b.velocity, n))
    if closing <= 0.0:
        return a, b
    impulse = closing * n
    return (replace(a, velocity=a.velocity - impulse),
            replace(b, velocity=b.velocity + impulse))


def initial_cells(config: SimConfig, rng: np.random.Generator) -> list[SimCell]:
    """Rejection-sample non-overlapping centres inside the spawn box."""
    config.validate()
    x_lo, x_hi, y_lo, y_hi = config.spawn_box()
    min_d = 2 * config.radius
    # crude area bound: discs of diameter min_d cannot tile beyond the box
    capacity = ((x_hi - x_lo) / min_d + 1) * ((y_hi - y_lo) / min_d + 1) * 2 / math.sqrt(3)
    if config.n_cells > capacity:
        raise SimulationError(f"cannot place {config.n_cells} cells of radius {config.radius} "
                              f"in a {x_hi - x_lo:.1f}x{y_hi - y_lo:.1f} px spawn region")
    centres: list[np.ndarray] = []
    tries = 0
    while len(centres) < config.n_cells:
        tries += 1
        if tries > _MAX_PLACEMENT_TRIES:
            raise SimulationError(f"packing infeasible: placed {len(centres)} of "
                                  f"{config.n_cells} cells without overlap")
        p = np.array([rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)])
        if all(np.hypot(*(p - q)) >= min_d for q in centres):
            centres.append(p)
    return [SimCell(i, p, np.zeros(2), config.radius, brightness=config.brightness)
            for i, p in enumerate(centres)]


def _reflect_walls(cells: list[SimCell], width: float, height: float) -> None:
    for c in cells:
        r = c.radius
        for axis, size in ((0, width), (1, height)):
            lo, hi = r, size - r
            p = c.position[axis]
            if p < lo:
                c.position[axis] = min(2 * lo - p, hi)
                c.velocity[axis] = abs(c.velocity[axis])
            elif p > hi:
                c.position[axis] = max(2 * hi - p, lo)
                c.velocity[axis] = -abs(c.velocity[axis])


def _overlapping_pairs(cells: list[SimCell]) -> list[tuple[int, int]]:
    xy = np.array([c.position for c in cells])
    radii = np.array([c.radius for c in cells])
    d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    contact = radii[:, None] + radii[None, :]
    i, j = np.nonzero(np.triu(d < contact - 1e-12, k=1))
    return list(zip(i.tolist(), j.tolist()))


def _separate(cells: list[SimCell], width: float, height: float) -> None:
    """Push overlapping discs apart along their normals, equal split, until clean."""
    for _ in range(_MAX_SEPARATION_PASSES):
        pairs = _overlapping_pairs(cells)
        if not pairs:
            return
        for i, j in pairs:
            a, b = cells[i], cells[j]
            delta = b.position - a.position
            dist = float(np.hypot(*delta))
            if dist == 0.0:
                raise SimulationError(f"cells {a.id} and {b.id} have coincident centres")
            n = delta / dist
            push = 0.5 * (a.radius + b.radius - dist) + 1e-12
            a.position -= push * n
            b.position += push * n
        for c in cells:
            r = c.radius
            c.position[0] = min(max(c.position[0], r), width - r)
            c.position[1] = min(max(c.position[1], r), height - r)
    raise SimulationError("could not separate overlapping cells")


def step(cells: list[SimCell], config: SimConfig) -> list[tuple[int, int]]:
    """Advance all cells one frame in place; returns the colliding pairs."""
    dv = np.array([config.dvx, config.dvy])
    for c in cells:
        c.velocity += dv
        c.position += c.velocity
    _reflect_walls(cells, config.channel_width, config.channel_height)
    pairs = _overlapping_pairs(cells)
    for i, j in pairs:  # ascending id order, single pass
        cells[i], cells[j] = resolve_elastic_collision(cells[i], cells[j])
    _separate(cells, config.channel_width, config.channel_height)
    return pairs


def _records(cells: list[SimCell], frame: int) -> list[TrajectoryRecord]:
    return [
        TrajectoryRecord(frame, c.id, float(c.position[0]), float(c.position[1]), c.area,
                         c.eccentricity, c.brightness)
        for c in cells
    ]


def simulate(config: SimConfig) -> list[TrajectoryRecord]:
    """Run the channel simulation; one record per cell per frame (frame 0 = initial)."""
    config.validate()
    seq = np.random.SeedSequence(config.seed)
    place_rng, noise_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    cells = initial_cells(config, place_rng)
    records = _records(cells, 0)
    for frame in range(1, config.frames):
        step(cells, config)
        records.extend(_records(cells, frame))
    if config.noise_fraction > 0:
        records = add_noise(records, config.noise_fraction, noise_rng, clamp=config.noise_clamp)
    return records


def position_noise(speed: np.ndarray, noise_fraction: float, rng: np.random.Generator,
                   clamp: bool = True) -> np.ndarray:
    """Per-axis perturbations ``(n, 2)`` with sigma ``noise_fraction*|v|/3``,
    clipped to ``+-noise_fraction*|v|``."""
    bound = noise_fraction * np.asarray(speed, dtype=float)[:, None]
    delta = rng.normal(size=(len(bound), 2)) * (bound / 3.0)
    if clamp:
        delta = np.clip(delta, -bound, bound)
    return delta


def add_noise(records: list[TrajectoryRecord], noise_fraction: float, seed,
              clamp: bool = True) -> list[TrajectoryRecord]:
    """Perturb recorded positions in proportion to each cell's current speed.

    The speed at a frame is the clean backward difference of positions
    (zero at a cell's first frame). Velocities seen downstream are then
    recomputed from the perturbed positions.
    """
    if noise_fraction < 0:
        raise SimulationError("noise_fraction must be >= 0")
    if noise_fraction == 0:
        return list(records)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ordered = sorted(records, key=lambda r: (r.cell_id, r.frame))
    prev: dict[int, TrajectoryRecord] = {}
    speeds = np.zeros(len(ordered))
    for k, r in enumerate(ordered):
        p = prev.get(r.cell_id)
        if p is not None and p.frame == r.frame - 1:
            speeds[k] = math.hypot(r.x - p.x, r.y - p.y)
        prev[r.cell_id] = r
    delta = position_noise(speeds, noise_fraction, rng, clamp)
    noisy = [replace(r, x=float(r.x + dx), y=float(r.y + dy)) for r, (dx, dy) in zip(ordered, delta)]
    return sorted(noisy, key=lambda r: (r.frame, r.cell_id))
