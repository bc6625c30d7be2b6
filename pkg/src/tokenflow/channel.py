"""Closed-form mmWave vehicle-to-infrastructure channel.

Planar-array steering vectors, beam gains, log-distance path loss, received
signal strength, a grid beam codebook, and the two label rules (best beam,
link status). Everything is plain NumPy; nothing here participates in
autodiff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AntennaConfig:
    """Square planar array with q elements per axis (q**2 total).

    ``include_pi`` selects the half-wavelength phase constant pi; switching it
    off reproduces the unit-constant variant of the steering phase.
    """
    q: int
    include_pi: bool = True

    def __post_init__(self):
        if self.q < 1:
            raise ValueError(f"antenna needs q >= 1, got {self.q}")


@dataclass(frozen=True)
class PropagationPath:
    """One ray: azimuth/elevation at the array, length in meters, LoS flag."""
    azimuth: float
    elevation: float
    length: float
    is_los: bool = True


@dataclass(frozen=True)
class ChannelParams:
    """Propagation constants.

    p0: reference loss in dB at 1 m. eta: path-loss exponent. xi_std:
    shadowing standard deviation in dB (samples are drawn by the caller).
    s_th: link-status threshold in dBm. gain_floor: clamp for the log of a
    vanishing beam gain. power_sum: sum per-path contributions as linear
    power instead of adding dB terms.
    """
    p0: float = 61.34
    eta: float = 2.0
    xi_std: float = 0.0
    s_th: float = -47.0
    gain_floor: float = -200.0
    power_sum: bool = False

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"path-loss exponent must be positive, got {self.eta}")
        if self.gain_floor > -100.0:
            raise ValueError(f"gain floor must be <= -100 dB, got {self.gain_floor}")


def array_response(theta: float, phi: float, antenna: AntennaConfig) -> np.ndarray:
    """Unit-norm steering vector a = a_x kron a_y for a q-by-q planar array."""
    if not (math.isfinite(theta) and math.isfinite(phi)):
        raise ValueError("array_response: angles must be finite")
    c = math.pi if antenna.include_pi else 1.0
    n = np.arange(antenna.q)
    ax = np.exp(1j * c * n * math.sin(theta) * math.cos(phi)) / math.sqrt(antenna.q)
    ay = np.exp(1j * c * n * math.sin(theta) * math.sin(phi)) / math.sqrt(antenna.q)
    return np.kron(ax, ay)


def beam_gain_db(f: np.ndarray, theta: float, phi: float, antenna: AntennaConfig,
                 gain_floor: float = -200.0) -> float:
    """10 log10 |<f, a(theta, phi)>|, clamped at ``gain_floor`` dB."""
    a = array_response(theta, phi, antenna)
    if f.shape != a.shape:
        raise ValueError(f"beam_gain_db: beam length {f.shape} does not match array {a.shape}")
    mag = abs(np.dot(f, a))
    return 10.0 * math.log10(max(mag, 10.0 ** (gain_floor / 10.0)))


def path_loss_db(path: PropagationPath, params: ChannelParams, xi_sample: float = 0.0) -> float:
    """p0 + 10 eta log10(length) + xi, valid from the 1 m reference distance."""
    if path.length < 1.0:
        raise ValueError(f"path_loss_db: length {path.length} is below the 1 m reference")
    return params.p0 + 10.0 * params.eta * math.log10(path.length) + xi_sample


def rss(paths: list[PropagationPath], f: np.ndarray, antenna: AntennaConfig,
        params: ChannelParams, xi_samples: list[float] | None = None) -> float:
    """Received signal strength of one vehicle under beam ``f`` in dBm.

    Default mode adds per-path (gain - loss) terms directly in dB;
    ``params.power_sum`` instead accumulates linear power and converts once.
    """
    if not paths:
        raise ValueError("rss: vehicle has no propagation paths")
    if xi_samples is None:
        xi_samples = [0.0] * len(paths)
    if len(xi_samples) != len(paths):
        raise ValueError(f"rss: {len(xi_samples)} xi samples for {len(paths)} paths")
    terms = [beam_gain_db(f, p.azimuth, p.elevation, antenna, params.gain_floor)
             - path_loss_db(p, params, xi) for p, xi in zip(paths, xi_samples)]
    if params.power_sum:
        return 10.0 * math.log10(math.fsum(10.0 ** (t / 10.0) for t in terms))
    return math.fsum(terms)


def build_codebook(antenna: AntennaConfig, size: int,
                   theta_range: tuple[float, float] = (0.2, 1.35),
                   phi_range: tuple[float, float] = (-1.2, 1.2)) -> np.ndarray:
    """Conjugate-steering codebook of unit-norm beams, shape (size, q**2).

    A perfect-square ``size`` becomes a row-major (theta, phi) grid; any other
    size pairs uniformly spaced theta and phi sweeps.
    """
    if size < 1:
        raise ValueError(f"build_codebook: size must be >= 1, got {size}")
    m = math.isqrt(size)
    if m * m == size:
        thetas = np.linspace(theta_range[0], theta_range[1], m) if m > 1 else [
            0.5 * (theta_range[0] + theta_range[1])]
        phis = np.linspace(phi_range[0], phi_range[1], m) if m > 1 else [
            0.5 * (phi_range[0] + phi_range[1])]
        pairs = [(t, p) for t in thetas for p in phis]
    else:
        thetas = np.linspace(theta_range[0], theta_range[1], size)
        phis = np.linspace(phi_range[0], phi_range[1], size)
        pairs = list(zip(thetas, phis))
    return np.array([np.conj(array_response(t, p, antenna)) for t, p in pairs])


def optimal_beam(vehicle_paths: list[list[PropagationPath]], codebook: np.ndarray,
                 antenna: AntennaConfig, params: ChannelParams,
                 xi_per_vehicle: list[list[float]] | None = None) -> int:
    """Exhaustive argmax over the codebook of summed per-vehicle RSS.

    Ties resolve to the lower beam index.
    """
    if not vehicle_paths or not any(vehicle_paths):
        raise ValueError("optimal_beam: need at least one vehicle with paths")
    if xi_per_vehicle is None:
        xi_per_vehicle = [None] * len(vehicle_paths)
    totals = np.array([
        math.fsum(rss(paths, f, antenna, params, xi)
                  for paths, xi in zip(vehicle_paths, xi_per_vehicle))
        for f in codebook])
    return int(np.argmax(totals))


def link_status(s: float, s_th: float) -> int:
    """1 when the link survives (strictly above threshold), else 0."""
    if not math.isfinite(s):
        raise ValueError("link_status: RSS must be finite")
    return 1 if s > s_th else 0
