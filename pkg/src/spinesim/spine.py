"""Spine geometry: vertebra shapes, cable network connectivity, kinematics.

A spine is a chain of b rigid vertebrae, each modeled as eta point masses
joined by massless rigid bars.  Body 1 is anchored; bodies 2..b move.
Cables connect adjacent bodies and are the only actuated members.

Conventions (right-handed throughout):
  * 2D poses are (x, z, gamma) with gamma a rotation about the +Y axis, so
    R(gamma) maps local (0, 1) to (sin gamma, cos gamma).
  * 3D poses are (x, y, z, theta, gamma, psi) with a 3-2-1 Euler
    composition R = Rz(psi) Ry(gamma) Rx(theta).
  * Local node frames are shifted so the mass-weighted centroid sits at
    the origin; the translational part of a pose is then literally the
    body's center of mass.

Connectivity is a signed incidence matrix C of shape (s + r) x n with
cable rows first: row i has +1 at one endpoint node and -1 at the other.
Columns are block-ordered by body, eta columns per body, fixed body first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import yaml


class ModelFormatError(ValueError):
    """Model definition violates a structural invariant."""


class DegenerateCableError(ValueError):
    """A cable's endpoints coincide; its direction is undefined."""


def rotation_2d(gamma: float) -> np.ndarray:
    """Rotation of the (x, z) plane about +Y; local +Z maps to (sin g, cos g)."""
    c, s = math.cos(gamma), math.sin(gamma)
    return np.array([[c, s], [-s, c]])


def rotation_321(theta: float, gamma: float, psi: float) -> np.ndarray:
    """3-2-1 Euler composition Rz(psi) @ Ry(gamma) @ Rx(theta)."""
    ct, st = math.cos(theta), math.sin(theta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    cp, sp = math.cos(psi), math.sin(psi)
    return np.array([
        [cp * cg, cp * sg * st - sp * ct, cp * sg * ct + sp * st],
        [sp * cg, sp * sg * st + cp * ct, sp * sg * ct - cp * st],
        [-sg, cg * st, cg * ct],
    ])


@dataclass
class Pose:
    """Rigid-body pose: center-of-mass position plus orientation angles.

    ``orientation`` is a single angle gamma in 2D and (theta, gamma, psi)
    in 3D.  Angles are not wrapped; trajectories here stay well inside
    +-pi/2.
    """

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).ravel()
        self.orientation = np.atleast_1d(np.asarray(self.orientation, dtype=float))
        d = self.position.size
        expected = 1 if d == 2 else 3
        if d not in (2, 3) or self.orientation.size != expected:
            raise ModelFormatError(f"pose with position dim {d} needs {expected} angle(s)")
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.orientation))):
            raise ModelFormatError("pose contains non-finite values")

    @property
    def d(self) -> int:
        return self.position.size

    def rotation(self) -> np.ndarray:
        if self.d == 2:
            return rotation_2d(self.orientation[0])
        return rotation_321(*self.orientation)

    @classmethod
    def identity(cls, d: int) -> "Pose":
        return cls(np.zeros(d), np.zeros(1 if d == 2 else 3))


@dataclass
class VertebraGeometry:
    """Point-mass layout of one vertebra.

    ``raw_nodes`` are the as-specified local coordinates (meters);
    ``nodes`` are the same points shifted so the mass-weighted centroid is
    the origin.
    """

    raw_nodes: np.ndarray
    node_masses: np.ndarray

    def __post_init__(self):
        self.raw_nodes = np.atleast_2d(np.asarray(self.raw_nodes, dtype=float))
        self.node_masses = np.asarray(self.node_masses, dtype=float).ravel()
        if self.raw_nodes.shape[0] < 3:
            raise ModelFormatError("a vertebra needs at least 3 point masses")
        if self.raw_nodes.shape[0] != self.node_masses.size:
            raise ModelFormatError("node/mass count mismatch")
        if np.any(self.node_masses <= 0):
            raise ModelFormatError("node masses must be positive")
        if self.raw_nodes.shape[1] not in (2, 3):
            raise ModelFormatError("nodes must be 2- or 3-dimensional")

    @property
    def d(self) -> int:
        return self.raw_nodes.shape[1]

    @property
    def eta(self) -> int:
        return self.raw_nodes.shape[0]

    @cached_property
    def mass(self) -> float:
        return float(np.sum(self.node_masses))

    @cached_property
    def centroid_offset(self) -> np.ndarray:
        """Mass-weighted centroid of the raw nodes."""
        return self.node_masses @ self.raw_nodes / self.mass

    @cached_property
    def nodes(self) -> np.ndarray:
        """COM-centered local nodes (mass-weighted centroid at the origin)."""
        return self.raw_nodes - self.centroid_offset

    @cached_property
    def inertia(self) -> np.ndarray:
        """Point-mass inertia about the COM: scalar I_yy in 2D, 3x3 in 3D."""
        a = self.nodes
        m = self.node_masses
        if self.d == 2:
            return np.array(np.sum(m * np.sum(a * a, axis=1)))
        eye = np.eye(3)
        return sum(mk * (np.dot(ak, ak) * eye - np.outer(ak, ak)) for mk, ak in zip(m, a))


@dataclass
class SpineModel:
    """Full spine definition: geometry, masses, cables, connectivity."""

    d: int
    b: int
    geometry: list[VertebraGeometry]
    connectivity: np.ndarray
    s: int
    r: int
    cable_stiffness: np.ndarray
    cable_damping: np.ndarray
    gravity: float = 9.81
    name: str = "custom"

    def __post_init__(self):
        self.connectivity = np.asarray(self.connectivity, dtype=float)
        self.cable_stiffness = np.broadcast_to(
            np.asarray(self.cable_stiffness, dtype=float), (self.s,)).copy()
        self.cable_damping = np.broadcast_to(
            np.asarray(self.cable_damping, dtype=float), (self.s,)).copy()
        self._validate()

    def _validate(self):
        if len(self.geometry) != self.b:
            raise ModelFormatError("need one geometry per body")
        etas = {g.eta for g in self.geometry}
        if len(etas) != 1:
            raise ModelFormatError("all bodies must share the same node count")
        if any(g.d != self.d for g in self.geometry):
            raise ModelFormatError("geometry dimension mismatch")
        C = self.connectivity
        if C.shape != (self.s + self.r, self.n):
            raise ModelFormatError(
                f"connectivity shape {C.shape} != ({self.s + self.r}, {self.n})")
        for i, row in enumerate(C):
            plus = np.flatnonzero(row == 1.0)
            minus = np.flatnonzero(row == -1.0)
            if plus.size != 1 or minus.size != 1 or np.count_nonzero(row) != 2:
                raise ModelFormatError(f"connectivity row {i} must have one +1 and one -1")
        eta = self.eta
        for i in range(self.s):
            k, j = self.member_endpoints(i)
            if k // eta == j // eta:
                raise ModelFormatError(f"cable row {i} connects two nodes of the same body")

    @property
    def eta(self) -> int:
        return self.geometry[0].eta

    @property
    def n(self) -> int:
        return self.b * self.eta

    @property
    def n_moving(self) -> int:
        return self.b - 1

    @property
    def dof(self) -> int:
        """Pose coordinates per body: 3 in 2D (x, z, gamma), 6 in 3D."""
        return 3 if self.d == 2 else 6

    @property
    def state_size(self) -> int:
        return 2 * self.dof * self.n_moving

    def member_endpoints(self, row: int) -> tuple[int, int]:
        """(plus node, minus node) of connectivity row ``row``."""
        c = self.connectivity[row]
        return int(np.flatnonzero(c == 1.0)[0]), int(np.flatnonzero(c == -1.0)[0])

    @cached_property
    def cable_plus(self) -> np.ndarray:
        return np.array([self.member_endpoints(i)[0] for i in range(self.s)])

    @cached_property
    def cable_minus(self) -> np.ndarray:
        return np.array([self.member_endpoints(i)[1] for i in range(self.s)])

    @cached_property
    def node_masses_flat(self) -> np.ndarray:
        return np.concatenate([g.node_masses for g in self.geometry])

    @cached_property
    def cables_matrix(self) -> np.ndarray:
        """Cable rows of the connectivity matrix, shape (s, n)."""
        return self.connectivity[:self.s].copy()

    @cached_property
    def tables(self) -> SimpleNamespace:
        """Precomputed constants for the dynamics hot path."""
        return SimpleNamespace(
            d=self.d, n=self.n, eta=self.eta, dof=self.dof,
            n_moving=self.n_moving, s=self.s,
            body_slices=[self.body_slice(b) for b in range(self.b)],
            nodes=[g.nodes for g in self.geometry],
            masses=[g.mass for g in self.geometry],
            inertias=[g.inertia for g in self.geometry],
            cables=self.cables_matrix,
            stiffness=self.cable_stiffness,
            damping=self.cable_damping,
            gravity=self.gravity,
        )

    def body_slice(self, body: int) -> slice:
        return slice(body * self.eta, (body + 1) * self.eta)

    # -- state layout -------------------------------------------------

    def pose_slice(self, moving_index: int) -> slice:
        """Slice of the pose coordinates of moving body ``moving_index`` (0-based)."""
        base = 2 * self.dof * moving_index
        return slice(base, base + self.dof)

    def velocity_slice(self, moving_index: int) -> slice:
        base = 2 * self.dof * moving_index
        return slice(base + self.dof, base + 2 * self.dof)

    def z_index(self, moving_index: int) -> int:
        """State index of the z-position of moving body ``moving_index``."""
        return 2 * self.dof * moving_index + (1 if self.d == 2 else 2)

    def poses_from_state(self, xi: np.ndarray) -> list[Pose]:
        xi = np.asarray(xi, dtype=float).ravel()
        if xi.size != self.state_size:
            raise ModelFormatError(f"state size {xi.size} != {self.state_size}")
        poses = []
        for j in range(self.n_moving):
            q = xi[self.pose_slice(j)]
            poses.append(Pose(q[:self.d], q[self.d:]))
        return poses

    def state_from_poses(self, poses, velocities=None) -> np.ndarray:
        xi = np.zeros(self.state_size)
        for j, pose in enumerate(poses):
            xi[self.pose_slice(j)] = np.concatenate([pose.position, pose.orientation])
            if velocities is not None:
                xi[self.velocity_slice(j)] = velocities[j]
        return xi


def node_positions(model: SpineModel, poses, fixed_pose: Pose | None = None) -> np.ndarray:
    """Global node coordinates, shape (n, d), column-ordered as connectivity.

    Each node maps as R(orientation) @ local + position, fixed body first.
    """
    if fixed_pose is None:
        fixed_pose = Pose.identity(model.d)
    poses = list(poses)
    if len(poses) != model.n_moving:
        raise ModelFormatError(f"need {model.n_moving} moving poses, got {len(poses)}")
    out = np.empty((model.n, model.d))
    for body, pose in enumerate([fixed_pose] + poses):
        g = model.geometry[body]
        out[model.body_slice(body)] = g.nodes @ pose.rotation().T + pose.position
    return out


def cable_vectors(model: SpineModel, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cable vector (plus end minus minus end) and scalar length.

    Raises DegenerateCableError when any length falls below 1e-9 m.
    """
    vecs = positions[model.cable_plus] - positions[model.cable_minus]
    lengths = np.linalg.norm(vecs, axis=1)
    if np.any(lengths < 1e-9):
        bad = int(np.argmin(lengths))
        raise DegenerateCableError(f"cable {bad} has length {lengths[bad]:.3e} m")
    return vecs, lengths


# -- built-in models ---------------------------------------------------

_CM = 0.01


def _chain_connectivity_2d() -> np.ndarray:
    """Two-body planar network: 4 cables then 6 bars (3 per body)."""
    C = np.zeros((10, 8))
    cables = [(1, 5), (2, 6), (3, 5), (3, 6)]
    bars = [(0, 1), (0, 2), (0, 3), (4, 5), (4, 6), (4, 7)]
    for i, (k, j) in enumerate(cables + bars):
        C[i, k] = 1.0
        C[i, j] = -1.0
    return C


def default_spine_2d() -> SpineModel:
    """Two-body planar spine: one fixed and one moving 4-node vertebra."""
    raw = np.array([[0.0, 0.0], [13.0, -7.5], [-13.0, -7.5], [0.0, 7.5]]) * _CM
    geom = VertebraGeometry(raw, np.full(4, 0.13 / 4))
    return SpineModel(
        d=2, b=2, geometry=[geom, geom], connectivity=_chain_connectivity_2d(),
        s=4, r=6, cable_stiffness=2000.0, cable_damping=100.0, name="2d-default")


def larger_spine_2d() -> SpineModel:
    """Same topology as the default planar spine, bigger and heavier vertebra."""
    raw = np.array([[0.0, 0.0], [20.0, -20.0], [-20.0, -20.0], [0.0, 20.0]]) * _CM
    geom = VertebraGeometry(raw, np.full(4, 0.2 / 4))
    return SpineModel(
        d=2, b=2, geometry=[geom, geom], connectivity=_chain_connectivity_2d(),
        s=4, r=6, cable_stiffness=2000.0, cable_damping=100.0, name="2d-large")


def default_spine_3d() -> SpineModel:
    """Four-body spatial spine: one fixed and three moving 5-node vertebrae.

    Each adjacent body pair is joined by 4 vertical cables (node k of the
    lower body to node k of the upper, k in {2..5}) and 4 saddle cables
    (top nodes {4, 5} of the lower body to bottom nodes {2, 3} of the
    upper).  Bars form a star from each body's center node.
    """
    raw = np.array([
        [0.0, 0.0, 0.0],
        [13.0, 0.0, -7.5],
        [-13.0, 0.0, -7.5],
        [0.0, 13.0, 7.5],
        [0.0, -13.0, 7.5],
    ]) * _CM
    geom = VertebraGeometry(raw, np.full(5, 0.13 / 5))
    b, eta = 4, 5
    cables = []
    for lower in range(b - 1):
        lo, up = lower * eta, (lower + 1) * eta
        cables += [(lo + k, up + k) for k in (1, 2, 3, 4)]
        cables += [(lo + 3, up + 1), (lo + 3, up + 2), (lo + 4, up + 1), (lo + 4, up + 2)]
    bars = [(body * eta, body * eta + k) for body in range(b) for k in (1, 2, 3, 4)]
    C = np.zeros((len(cables) + len(bars), b * eta))
    for i, (k, j) in enumerate(cables + bars):
        C[i, k] = 1.0
        C[i, j] = -1.0
    return SpineModel(
        d=3, b=b, geometry=[geom] * b, connectivity=C,
        s=len(cables), r=len(bars), cable_stiffness=2000.0, cable_damping=100.0,
        name="3d-default")


BUILTIN_MODELS = {
    "2d-default": default_spine_2d,
    "2d-large": larger_spine_2d,
    "3d-default": default_spine_3d,
}


# -- model file round trip ---------------------------------------------

def model_to_dict(model: SpineModel) -> dict:
    """Nested key-value form of a model whose bodies share one geometry."""
    g = model.geometry[0]
    pairs = [list(model.member_endpoints(i)) for i in range(model.s + model.r)]
    return {
        "spine": {
            "name": model.name,
            "dimension": model.d,
            "bodies": model.b,
            "nodes_cm": (g.raw_nodes / _CM).tolist(),
            "node_masses_kg": g.node_masses.tolist(),
            "cable_stiffness": model.cable_stiffness.tolist(),
            "cable_damping": model.cable_damping.tolist(),
            "gravity": model.gravity,
            "connectivity": {
                "cables": pairs[:model.s],
                "bars": pairs[model.s:],
            },
        }
    }


def model_from_dict(data: dict) -> SpineModel:
    if not isinstance(data, dict) or set(data) != {"spine"}:
        raise ModelFormatError("model file must contain a single 'spine' section")
    spec = dict(data["spine"])
    known = {"name", "dimension", "bodies", "nodes_cm", "node_masses_kg",
             "total_mass_kg", "cable_stiffness", "cable_damping", "gravity",
             "connectivity"}
    unknown = set(spec) - known
    if unknown:
        raise ModelFormatError(f"unknown model keys: {sorted(unknown)}")
    try:
        d = int(spec["dimension"])
        b = int(spec["bodies"])
        raw = np.asarray(spec["nodes_cm"], dtype=float) * _CM
        conn = spec["connectivity"]
        cable_pairs = [tuple(p) for p in conn["cables"]]
        bar_pairs = [tuple(p) for p in conn["bars"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from exc
    if "node_masses_kg" in spec:
        masses = np.asarray(spec["node_masses_kg"], dtype=float)
    elif "total_mass_kg" in spec:
        masses = np.full(raw.shape[0], float(spec["total_mass_kg"]) / raw.shape[0])
    else:
        raise ModelFormatError("model needs node_masses_kg or total_mass_kg")
    geom = VertebraGeometry(raw, masses)
    s, r = len(cable_pairs), len(bar_pairs)
    C = np.zeros((s + r, b * geom.eta))
    for i, (k, j) in enumerate(cable_pairs + bar_pairs):
        C[i, int(k)] = 1.0
        C[i, int(j)] = -1.0
    return SpineModel(
        d=d, b=b, geometry=[geom] * b, connectivity=C, s=s, r=r,
        cable_stiffness=spec.get("cable_stiffness", 2000.0),
        cable_damping=spec.get("cable_damping", 100.0),
        gravity=float(spec.get("gravity", 9.81)),
        name=str(spec.get("name", "custom")))


def save_model(model: SpineModel, path) -> None:
    Path(path).write_text(yaml.safe_dump(model_to_dict(model), sort_keys=False))


def load_model(path) -> SpineModel:
    text = Path(path).read_text()
    return model_from_dict(yaml.safe_load(text))


def resolve_model(selector: str) -> SpineModel:
    """Builtin name (2d-default, 2d-large, 3d-default) or a model file path."""
    if selector in BUILTIN_MODELS:
        return BUILTIN_MODELS[selector]()
    path = Path(selector)
    if not path.is_file():
        raise ModelFormatError(f"unknown model '{selector}' (not builtin, not a file)")
    return load_model(path)
