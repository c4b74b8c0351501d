"""Scalar phase-matching relations for X-ray down-conversion off a detuned Bragg reflection.

All functions accept scalars or numpy arrays and are pure.  Angles are radians
internally; degrees appear only on :class:`ExperimentGeometry` fields.

Symbols used below:

* ``b``     -- energy fraction of one photon, ``E / E_pump``
* ``alpha`` -- emission angle measured from the diffracted pump direction
* ``K``     -- ``2 * dtheta * sin(2 theta)``, the squared degenerate emission angle
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, DomainError

B_WINDOW = (0.05, 0.95)

EXACT = "exact"
APPROXIMATE = "approximate"


@dataclass(frozen=True)
class ExperimentGeometry:
    """Source and detector geometry.  Defaults are the CHX reference setup."""

    pump_energy: float = 15.0  # keV
    bragg_angle: float = 11.576  # deg
    detuning_nominal: float = 0.021  # deg
    detuning_sigma: float = 0.0014  # deg
    crystal_to_detector: float = 683.0  # mm
    ring_center: tuple[float, float] = (260.0, 256.0)  # logical (col, row)
    beamstop_center: tuple[float, float] | None = None  # mm, None -> ring center
    beamstop_radius: float = 2.0  # mm

    def __post_init__(self):
        if not self.pump_energy > 0:
            raise ConfigError("pump_energy must be positive")
        if not self.crystal_to_detector > 0:
            raise ConfigError("crystal_to_detector must be positive")
        if not 0 < self.bragg_angle < 90:
            raise ConfigError("bragg_angle must lie in (0, 90) degrees")
        if not self.detuning_nominal > 0:
            raise ConfigError("detuning_nominal must be positive")
        if not self.detuning_sigma >= 0:
            raise ConfigError("detuning_sigma must be non-negative")
        if self.beamstop_radius < 0:
            raise ConfigError("beamstop_radius must be non-negative")
        c = self.phase_constant
        if not 0 < c < 1:
            raise ConfigError(f"phase-matching constant c={c} outside (0, 1)")

    @property
    def theta(self) -> float:
        return float(np.radians(self.bragg_angle))

    @property
    def detuning(self) -> float:
        return float(np.radians(self.detuning_nominal))

    @property
    def sigma(self) -> float:
        return float(np.radians(self.detuning_sigma))

    @property
    def phase_constant(self) -> float:
        """c = 1 - dtheta * sin(2 theta)."""
        return 1.0 - self.detuning * np.sin(2 * self.theta)

    @property
    def K(self) -> float:
        return 2.0 * self.detuning * np.sin(2 * self.theta)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["ring_center"] = list(self.ring_center)
        if self.beamstop_center is not None:
            d["beamstop_center"] = list(self.beamstop_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentGeometry":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown geometry keys: {sorted(unknown)}")
        if "ring_center" in d:
            d["ring_center"] = tuple(float(v) for v in d["ring_center"])
        if d.get("beamstop_center") is not None:
            d["beamstop_center"] = tuple(float(v) for v in d["beamstop_center"])
        return cls(**d)


@dataclass(frozen=True)
class KinematicPoint:
    b: float
    alpha: float
    r: float
    energy: float


def _check_window(b, window):
    b = np.asarray(b, dtype=float)
    lo, hi = window
    if np.any(~((b >= lo) & (b <= hi))):
        raise DomainError(f"energy fraction outside validity window [{lo}, {hi}]")
    return b


def emission_angle_rad(b, bragg_rad, detuning_rad, mode=EXACT, window=B_WINDOW):
    """Emission angle for energy fraction ``b`` with explicit angles in radians.

    ``detuning_rad`` may be an array broadcasting against ``b`` (per-pair detuning).
    """
    b = _check_window(b, window)
    s2 = np.sin(2.0 * np.asarray(bragg_rad, dtype=float))
    dth = np.asarray(detuning_rad, dtype=float)
    if mode == APPROXIMATE:
        return np.sqrt(2.0 * dth * s2 * (1.0 - b) / b)
    if mode != EXACT:
        raise ValueError(f"unknown mode {mode!r}")
    c = 1.0 - dth * s2
    arg = (c * c + 2.0 * b - 1.0) / (2.0 * c * b)
    if np.any(np.abs(arg) > 1.0):
        raise DomainError("arccos argument outside [-1, 1]; b too close to 0 or 1")
    return np.arccos(arg)


def emission_angle(b, geom: ExperimentGeometry, mode=EXACT, window=B_WINDOW):
    return emission_angle_rad(b, geom.theta, geom.detuning, mode, window)


def radius_from_b(b, geom: ExperimentGeometry, mode=EXACT, window=B_WINDOW):
    """Radial distance (mm) of a photon of fraction ``b`` from the diffracted pump spot."""
    return geom.crystal_to_detector * np.tan(emission_angle(b, geom, mode, window))


def energy_from_radius(r, geom: ExperimentGeometry):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("radius must be non-negative")
    a = np.arctan(r / geom.crystal_to_detector)
    return geom.pump_energy / (a * a / geom.K + 1.0)


def conjugate_radius(r, geom: ExperimentGeometry):
    """Radius at which the partner of a photon detected at ``r`` lands."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise DomainError("conjugate radius undefined at r <= 0")
    L = geom.crystal_to_detector
    return L * np.tan(geom.K / np.arctan(r / L))


def detuning_from_angles(alpha_s, alpha_i, bragg_angle):
    """Detuning (rad) implied by a pair's emission angles; ``bragg_angle`` in degrees."""
    alpha_s = np.asarray(alpha_s, dtype=float)
    alpha_i = np.asarray(alpha_i, dtype=float)
    if np.any(alpha_s <= 0) or np.any(alpha_i <= 0):
        raise DomainError("emission angles must be positive")
    return alpha_s * alpha_i / (2.0 * np.sin(2.0 * np.radians(bragg_angle)))


def pair_probability(b):
    """Unnormalized down-conversion probability b (1 - b)."""
    b = np.asarray(b, dtype=float)
    if np.any((b < 0) | (b > 1)):
        raise DomainError("b must lie in [0, 1]")
    return b * (1.0 - b)


def kinematic_point(b: float, geom: ExperimentGeometry, mode=EXACT) -> KinematicPoint:
    alpha = float(emission_angle(b, geom, mode))
    return KinematicPoint(
        b=float(b),
        alpha=alpha,
        r=geom.crystal_to_detector * np.tan(alpha),
        energy=float(b) * geom.pump_energy,
    )


RING_PROFILE_HEADER = ("b", "energy_keV", "alpha_rad", "r_mm", "weight")


def ring_profile(geom: ExperimentGeometry, b_grid: Iterable[float], mode=EXACT) -> np.ndarray:
    """Rows of (b, energy, alpha, r, weight) for plotting the radial ring profile."""
    b = np.atleast_1d(np.asarray(list(b_grid), dtype=float))
    alpha = emission_angle(b, geom, mode)
    table = np.empty((b.size, 5))
    table[:, 0] = b
    table[:, 1] = b * geom.pump_energy
    table[:, 2] = alpha
    table[:, 3] = geom.crystal_to_detector * np.tan(alpha)
    table[:, 4] = pair_probability(b)
    return table


def write_ring_profile(path, table: np.ndarray, header_comment: str | None = None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(RING_PROFILE_HEADER)
        for row in table:
            w.writerow([repr(float(v)) for v in row])
