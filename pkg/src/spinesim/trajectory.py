"""Reference state trajectory: a constant-radius bending sweep.

Each moving body j starts at height z_j(0) on the +Z axis and sweeps
counterclockwise in the X-Z plane at constant radius r_j = z_j(0):

    x_j(t) = r_j sin(beta_j(t)),  z_j(t) = r_j cos(beta_j(t)),
    gamma_j(t) = beta_j(t),       beta_j(t) = beta_max_j * profile(t / T).

All other pose coordinates and every velocity entry are zero; the
trajectory prescribes kinematic states only and is not required to be
dynamically feasible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .spine import SpineModel

DEFAULT_MAX_ANGLES = (np.pi / 16, np.pi / 12, np.pi / 8)
PROFILES = ("linear_ramp", "smoothstep")


@dataclass
class SweepSpec:
    """Bending-sweep parameters for every moving body.

    Heights double as sweep radii.  ``duration`` is the time to reach the
    maximum sweep angles; ``dt`` the sample period of the built reference.
    """

    heights: np.ndarray
    max_angles: np.ndarray
    duration: float = 3.0
    dt: float = 1e-3
    profile: str = "linear_ramp"
    d: int = 2

    def __post_init__(self):
        self.heights = np.atleast_1d(np.asarray(self.heights, dtype=float))
        self.max_angles = np.atleast_1d(np.asarray(self.max_angles, dtype=float))
        if self.heights.size != self.max_angles.size:
            raise ValueError("one max angle per moving body required")
        if np.any(self.heights <= 0):
            raise ValueError("sweep heights must be positive")
        if np.any(self.max_angles <= 0) or np.any(self.max_angles >= np.pi / 2):
            raise ValueError("max sweep angles must lie in (0, pi/2)")
        if self.duration <= 0 or self.dt <= 0:
            raise ValueError("duration and dt must be positive")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")
        if self.d not in (2, 3):
            raise ValueError("d must be 2 or 3")

    @property
    def radii(self) -> np.ndarray:
        return self.heights

    @property
    def n_bodies(self) -> int:
        return self.heights.size


def default_sweep(model: SpineModel, duration: float = 3.0, dt: float = 1e-3,
                  profile: str = "linear_ramp") -> SweepSpec:
    """Standard sweep for a model: 0.1*j m starting heights (0.3 m for the
    large planar spine) and per-body max angles (pi/16, pi/12, pi/8)."""
    nm = model.n_moving
    if nm > len(DEFAULT_MAX_ANGLES):
        raise ValueError("no default sweep beyond three moving bodies")
    if model.name == "2d-large":
        heights = [0.3]
    else:
        heights = [0.1 * (j + 1) for j in range(nm)]
    return SweepSpec(heights, DEFAULT_MAX_ANGLES[:nm], duration, dt, profile, model.d)


def ramp_fraction(spec: SweepSpec, t: float) -> float:
    tau = t / spec.duration
    if spec.profile == "linear_ramp":
        return tau
    return tau * tau * (3.0 - 2.0 * tau)


def reference_state(spec: SweepSpec, j: int, t: float) -> np.ndarray:
    """Pose coordinates of moving body j at time t: (x, z, gamma) in 2D,
    (x, y, z, theta, gamma, psi) in 3D with the unswept entries zero."""
    if not 0.0 <= t <= spec.duration * (1 + 1e-12):
        raise ValueError(f"t={t} outside [0, {spec.duration}]")
    beta = spec.max_angles[j] * ramp_fraction(spec, min(t, spec.duration))
    r = spec.radii[j]
    x, z = r * np.sin(beta), r * np.cos(beta)
    if spec.d == 2:
        return np.array([x, z, beta])
    return np.array([x, 0.0, z, 0.0, beta, 0.0])


def state_at(spec: SweepSpec, model: SpineModel, t: float) -> np.ndarray:
    """Full reference state vector at time t (velocity entries zero)."""
    xi = np.zeros(model.state_size)
    for j in range(model.n_moving):
        xi[model.pose_slice(j)] = reference_state(spec, j, t)
    return xi


def build_trajectory(spec: SweepSpec, model: SpineModel) -> tuple[np.ndarray, np.ndarray]:
    """Dense reference samples over [0, duration], endpoints inclusive.

    Returns (times, states) with states of shape (len(times), state_size).
    """
    if spec.n_bodies != model.n_moving:
        raise ValueError(f"sweep covers {spec.n_bodies} bodies, model has {model.n_moving}")
    if spec.d != model.d:
        raise ValueError("sweep dimension does not match model")
    n = int(round(spec.duration / spec.dt))
    if abs(n * spec.dt - spec.duration) > 1e-9 * max(1.0, spec.duration):
        raise ValueError("dt must divide the sweep duration")
    times = np.arange(n + 1) * spec.dt
    states = np.array([state_at(spec, model, min(t, spec.duration)) for t in times])
    return times, states


def trajectory_to_csv(path, times: np.ndarray, states: np.ndarray,
                      header_lines: list[str] | None = None) -> None:
    dim = states.shape[1]
    with open(path, "w", newline="") as fh:
        for line in header_lines or []:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"xi_ref_{i + 1}" for i in range(dim)])
        for t, row in zip(times, states):
            writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])
