"""Synthetic roadside scenario simulator.

A straight two-lane road runs along x with a roadside unit (RSU) set back on
the negative-y side, mast above vehicle height. Vehicles sweep the road at
constant speed with lane jitter; box-shaped blockers travel a service lane
between the road and the RSU and occlude line of sight when the sight line
passes through them below their height. Every frame gets a two-ray channel
(direct + ground bounce via the image method), per-frame shadowing draws, the
best codebook beam under each label rule, and idealized top-down sensor
renderings for the five modalities.

Axis conventions: azimuth is measured from the road normal (atan2(dx, dy) at
the RSU), elevation from the mast's downward vertical, so a distant vehicle
sits near pi/2 elevation and a vehicle straight across from the RSU has
azimuth 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .channel import (AntennaConfig, ChannelParams, PropagationPath, build_codebook,
                      link_status, optimal_beam, rss)

REFLECTION_LOSS_DB = 12.0  # extra loss charged to the ground-bounce ray

# rectangle footprints (length along x, width along y) and heights in meters
VEHICLE_BOX = (4.5, 2.0, 1.6)
RSSI_NOISE_DB = 0.5


def splitmix64(seed: int, index: int) -> int:
    """Derived stream seed: one splitmix64 step over seed + index."""
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


@dataclass
class ScenarioConfig:
    task: str = "beam"
    num_vehicles: int = 1
    frames: int = 105
    tau: int = 5
    dt: float = 0.3
    road_half: float = 30.0
    lane_ys: tuple[float, ...] = (0.0, 3.5)
    speed_range: tuple[float, float] = (2.5, 4.5)
    rsu_xy: tuple[float, float] = (0.0, -10.0)
    rsu_z: float = 8.0
    antenna_z: float = 1.5
    blocker_prob: float = 0.7
    blocker_size: tuple[float, float, float] = (8.0, 2.5, 4.0)
    blocker_lane_y: float = -3.0
    blocker_speed_range: tuple[float, float] = (2.0, 4.0)
    img_hw: int = 64
    view_x: tuple[float, float] = (-52.0, 52.0)
    view_y: tuple[float, float] = (-6.0, 10.0)
    antenna_q: int = 4
    codebook_size: int = 16
    p0: float = 12.0
    eta: float = 2.0
    xi_std: float = 1.5
    s_th: float = -47.0

    def __post_init__(self):
        if self.num_vehicles < 1:
            raise ValueError("scenario needs at least one vehicle")
        if self.tau < 1 or self.dt <= 0:
            raise ValueError("window length must be >= 1 and frame period positive")
        if self.frames < self.tau + 1:
            raise ValueError(f"{self.frames} frames cannot fit a {self.tau}-frame window "
                             "plus its label")

    def antenna(self) -> AntennaConfig:
        return AntennaConfig(self.antenna_q)

    def channel(self, power_sum: bool = False) -> ChannelParams:
        return ChannelParams(p0=self.p0, eta=self.eta, xi_std=self.xi_std,
                             s_th=self.s_th, power_sum=power_sum)


@dataclass
class Box:
    """Axis-aligned footprint with a height; position is the footprint center."""
    x: float
    y: float
    length: float
    width: float
    height: float
    vx: float = 0.0

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.x - self.length / 2, self.x + self.length / 2,
                self.y - self.width / 2, self.y + self.width / 2)


@dataclass
class FrameState:
    index: int
    vehicles: list[Box]
    blockers: list[Box]
    blocked: list[bool]                       # per vehicle
    paths: list[list[PropagationPath]]        # per vehicle
    xi: list[list[float]]                     # per vehicle, aligned with paths
    beam_label: int                           # argmax of summed dB-form RSS
    s_opt: float                              # target-vehicle RSS, power sum, best beam
    link: int                                 # link_status(s_opt)


@dataclass
class ScenarioTrace:
    config: ScenarioConfig
    seed: int
    frames: list[FrameState]
    rssi_meas: np.ndarray  # (frames,) previous-frame RSS echo with sensor noise


def _wrap(x: float, half: float) -> float:
    span = 2.0 * half
    return (x + half) % span - half


def _segment_in_box(p0: tuple[float, float], p1: tuple[float, float],
                    bounds: tuple[float, float, float, float]) -> tuple[float, float] | None:
    """Liang-Barsky clip of segment p0->p1 against an axis-aligned rectangle.

    Returns the (s_enter, s_exit) parameter interval or None when the segment
    misses the rectangle.
    """
    x0, y0 = p0
    dx, dy = p1[0] - x0, p1[1] - y0
    lo, hi = 0.0, 1.0
    for delta, start, bmin, bmax in ((dx, x0, bounds[0], bounds[1]),
                                     (dy, y0, bounds[2], bounds[3])):
        if delta == 0.0:
            if start < bmin or start > bmax:
                return None
            continue
        t0, t1 = (bmin - start) / delta, (bmax - start) / delta
        if t0 > t1:
            t0, t1 = t1, t0
        lo, hi = max(lo, t0), min(hi, t1)
        if lo > hi:
            return None
    return lo, hi


def sight_blocked(rsu_xy: tuple[float, float], rsu_z: float, veh: Box, antenna_z: float,
                  blockers: list[Box]) -> bool:
    """True when any blocker intersects the RSU-to-vehicle sight line below
    its own height. The sight line descends from the mast, so the exit point
    of each crossing is its lowest and decides the test."""
    for blocker in blockers:
        hit = _segment_in_box(rsu_xy, (veh.x, veh.y), blocker.bounds)
        if hit is None:
            continue
        height_at_exit = rsu_z + (antenna_z - rsu_z) * hit[1]
        if height_at_exit < blocker.height:
            return True
    return False


def vehicle_paths(config: ScenarioConfig, veh: Box,
                  blocked: bool) -> list[PropagationPath]:
    """Direct ray (when not occluded) plus the ground bounce via the image
    method; the bounce survives occlusion, keeping the vehicle reachable."""
    rx, ry = config.rsu_xy
    dx, dy = veh.x - rx, veh.y - ry
    ground = math.hypot(dx, dy)
    az = math.atan2(dx, dy)
    paths = []
    if not blocked:
        drop = config.rsu_z - config.antenna_z
        length = max(1.0, math.hypot(ground, drop))
        paths.append(PropagationPath(az, math.acos(min(1.0, drop / length)), length, True))
    lift = config.rsu_z + config.antenna_z
    length_r = max(1.0, math.hypot(ground, lift))
    paths.append(PropagationPath(az, math.acos(min(1.0, lift / length_r)), length_r, False))
    return paths


def simulate_scenario(config: ScenarioConfig, seed: int) -> ScenarioTrace:
    """Roll the scenario forward ``config.frames`` steps, deterministically in
    ``seed``, labelling every frame."""
    rng = np.random.default_rng(seed)
    vl, vw, vh = VEHICLE_BOX

    lanes = [config.lane_ys[i % len(config.lane_ys)] for i in range(config.num_vehicles)]
    direction = [1.0 if i % 2 == 0 else -1.0 for i in range(config.num_vehicles)]
    x0 = rng.uniform(-config.road_half, config.road_half, size=config.num_vehicles)
    speed = rng.uniform(*config.speed_range, size=config.num_vehicles)
    jitter = np.zeros(config.num_vehicles)

    blockers0 = []
    if rng.random() < config.blocker_prob:
        bl, bw, bh = config.blocker_size
        for _ in range(1 + int(rng.random() < 0.4)):
            bx = rng.uniform(-config.road_half, config.road_half)
            bv = rng.uniform(*config.blocker_speed_range) * (1.0 if rng.random() < 0.5
                                                             else -1.0)
            blockers0.append(Box(bx, config.blocker_lane_y, bl, bw, bh, vx=bv))

    codebook = build_codebook(config.antenna(), config.codebook_size)
    antenna = config.antenna()
    db_params = config.channel(power_sum=False)
    pw_params = config.channel(power_sum=True)

    frames: list[FrameState] = []
    s_opt_series = np.zeros(config.frames)
    for t in range(config.frames):
        jitter = np.clip(0.9 * jitter + rng.normal(0.0, 0.05, size=config.num_vehicles),
                         -0.3, 0.3)
        vehicles = []
        for i in range(config.num_vehicles):
            x = _wrap(x0[i] + direction[i] * speed[i] * t * config.dt, config.road_half)
            vehicles.append(Box(x, lanes[i] + jitter[i], vl, vw, vh,
                                vx=direction[i] * speed[i]))
        blockers = [Box(_wrap(b.x + b.vx * t * config.dt, config.road_half), b.y,
                        b.length, b.width, b.height, vx=b.vx) for b in blockers0]

        blocked, paths, xi = [], [], []
        for veh in vehicles:
            occ = sight_blocked(config.rsu_xy, config.rsu_z, veh, config.antenna_z,
                                blockers)
            p = vehicle_paths(config, veh, occ)
            draws = [rng.normal(0.0, config.xi_std)
                     + (0.0 if path.is_los else REFLECTION_LOSS_DB) for path in p]
            blocked.append(occ)
            paths.append(p)
            xi.append(draws)

        beam_label = optimal_beam(paths, codebook, antenna, db_params, xi)
        best_pw = optimal_beam(paths[:1], codebook, antenna, pw_params, xi[:1])
        s_opt = rss(paths[0], codebook[best_pw], antenna, pw_params, xi[0])
        s_opt_series[t] = s_opt
        frames.append(FrameState(t, vehicles, blockers, blocked, paths, xi,
                                 beam_label, s_opt, link_status(s_opt, config.s_th)))

    echo = np.concatenate([[s_opt_series[0]], s_opt_series[:-1]])
    rssi_meas = echo + rng.normal(0.0, RSSI_NOISE_DB, size=config.frames)
    return ScenarioTrace(config, seed, frames, rssi_meas)


# ---------------------------------------------------------------------------
# sensor renderings


def _pixel_centers(hw: int, rng_x: tuple[float, float], rng_y: tuple[float, float]):
    xs = rng_x[0] + (np.arange(hw) + 0.5) * (rng_x[1] - rng_x[0]) / hw
    ys = rng_y[0] + (np.arange(hw) + 0.5) * (rng_y[1] - rng_y[0]) / hw
    return xs, ys


def render_image(state: FrameState, config: ScenarioConfig) -> np.ndarray:
    """Top-down grayscale raster: a pixel is lit when its center falls inside
    an object footprint (vehicles 1.0, blockers 0.6)."""
    hw = config.img_hw
    xs, ys = _pixel_centers(hw, config.view_x, config.view_y)
    img = np.zeros((hw, hw))
    for value, boxes in ((0.6, state.blockers), (1.0, state.vehicles)):
        for box in boxes:
            x0, x1, y0, y1 = box.bounds
            mask = ((ys[:, None] >= y0) & (ys[:, None] <= y1)
                    & (xs[None, :] >= x0) & (xs[None, :] <= x1))
            img[mask] = np.maximum(img[mask], value)
    return img


def _outline_points(box: Box, count: int, rng: np.random.Generator) -> np.ndarray:
    """Points on the footprint perimeter with uniform height up the side."""
    perim = 2.0 * (box.length + box.width)
    s = rng.uniform(0.0, perim, size=count)
    x0, x1, y0, y1 = box.bounds
    pts = np.empty((count, 4))
    for i, si in enumerate(s):
        if si < box.length:
            pts[i, :2] = (x0 + si, y0)
        elif si < box.length + box.width:
            pts[i, :2] = (x1, y0 + (si - box.length))
        elif si < 2 * box.length + box.width:
            pts[i, :2] = (x1 - (si - box.length - box.width), y1)
        else:
            pts[i, :2] = (x0, y1 - (si - 2 * box.length - box.width))
    pts[:, 2] = rng.uniform(0.0, box.height, size=count)
    pts[:, 3] = 1.0
    return pts


def render_pointcloud(state: FrameState, config: ScenarioConfig,
                      rng: np.random.Generator) -> np.ndarray:
    clouds = [_outline_points(b, 40, rng) for b in state.vehicles]
    clouds += [_outline_points(b, 60, rng) for b in state.blockers]
    return np.concatenate(clouds) if clouds else np.zeros((0, 4))


def render_radar(state: FrameState, config: ScenarioConfig) -> np.ndarray:
    """One row [radial velocity, azimuth, altitude, return] per object; the
    return strength falls off with the square of ground distance."""
    rx, ry = config.rsu_xy
    rows = []
    for box in state.vehicles + state.blockers:
        dx, dy = box.x - rx, box.y - ry
        dist = math.hypot(dx, dy)
        radial = box.vx * dx / dist if dist > 0 else 0.0
        rows.append((radial, math.atan2(dx, dy), box.height / 2.0, 100.0 / dist ** 2))
    return np.array(rows) if rows else np.zeros((0, 4))


def render_gps(state: FrameState, config: ScenarioConfig) -> np.ndarray:
    """Target vehicle position scaled to the viewing window, roughly [-1, 1]."""
    target = state.vehicles[0]
    x0, x1 = config.view_x
    y0, y1 = config.view_y
    return np.array([(2.0 * target.x - x0 - x1) / (x1 - x0),
                     (2.0 * target.y - y0 - y1) / (y1 - y0)])


def render_frame(state: FrameState, trace: ScenarioTrace,
                 rng: np.random.Generator) -> dict[str, np.ndarray]:
    """All five modality payloads for one frame. The RSSI echo is part of the
    trace (it needs the previous frame), not recomputed here."""
    config = trace.config
    return {
        "image": render_image(state, config),
        "pointcloud": render_pointcloud(state, config, rng),
        "radar": render_radar(state, config),
        "gps": render_gps(state, config),
        "rssi": np.array([trace.rssi_meas[state.index]]),
    }


def frame_label(state: FrameState, config: ScenarioConfig) -> int:
    return state.beam_label if config.task == "beam" else state.link


def scenario_config_dict(config: ScenarioConfig) -> dict:
    return asdict(config)
