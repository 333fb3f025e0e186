"""Ground-truth nonlinear dynamics of the spine.

Bodies have no kinematic coupling, so the equations of motion reduce to an
independent Newton-Euler balance per moving vertebra:

  * translational:  m_j * a_j = sum of cable forces at the body's nodes
                    plus total gravity,
  * rotational 2D:  I_yy * dd(gamma) = torque about the COM,
  * rotational 3D:  Euler's equations in the body frame with the
    point-mass inertia tensor, mapped to 3-2-1 Euler-angle accelerations.

Cable tension is a rectified spring-damper:  F = max(0, k (l - u) + c dl),
so cables never push, and the damper opposes stretch-rate (tension rises
while a taut cable lengthens), which makes the cable dissipative:  the
power it injects into the bodies is  -k (l - u) dl - c dl^2.  Cable length
rates are exact, computed from the rigid-body velocity field at the
attachment nodes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .spine import DegenerateCableError, SpineModel, rotation_2d, rotation_321

_J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])  # d/dgamma of rotation_2d, times R^T


class AngleSingularityError(ValueError):
    """3-2-1 Euler kinematics degenerate (|gamma| at pi/2)."""


class DivergenceError(RuntimeError):
    """Simulation produced a non-finite state."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass
class CableForce:
    """Resolved force of one cable: nonnegative tension along a unit vector
    pointing from the minus anchor toward the plus anchor."""

    scalar_tension: float
    direction: np.ndarray
    anchors: tuple[int, int]

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=float)
        if self.scalar_tension < 0:
            raise ValueError("cable tension must be nonnegative")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-12:
            raise ValueError("cable direction must be a unit vector")


@dataclass
class NoiseModel:
    """Additive per-step Gaussian state noise xi += scale * eps, eps ~ N(0, I).

    ``scale`` holds the diagonal of the weighting matrix.
    """

    scale: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=float).ravel()
        if np.any(self.scale < 0):
            raise ValueError("noise scales must be nonnegative")

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.scale)

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def default_noise(model: SpineModel, seed: int = 0,
                  pose_scale: float = 1e-5, velocity_scale: float = 1e-4) -> NoiseModel:
    """Per-step noise: 1e-5 on pose entries, 1e-4 on velocity entries.

    Sized to perturb visibly at millisecond steps without drowning the
    sub-millimeter tracking accuracy of the closed loop (the spine's slow
    ~20 1/s rigid-body modes integrate per-step noise into a wander an
    order of magnitude above the per-step scale).
    """
    scale = np.zeros(model.state_size)
    for j in range(model.n_moving):
        scale[model.pose_slice(j)] = pose_scale
        scale[model.velocity_slice(j)] = velocity_scale
    return NoiseModel(scale, seed)


def cable_tension(k: float, c: float, length: float, length_rate: float, u: float):
    """Rectified spring-damper tension max(0, k*(l - u) + c*dl).

    ``length_rate`` is d(length)/dt; the damper term carries the sign that
    dissipates energy (see module docstring).
    """
    return np.maximum(0.0, k * (length - u) + c * length_rate)


def _euler_rate_matrix(theta: float, gamma: float) -> np.ndarray:
    """T with omega_body = T @ (dtheta, dgamma, dpsi) for 3-2-1 angles."""
    ct, st = math.cos(theta), math.sin(theta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    return np.array([
        [1.0, 0.0, -sg],
        [0.0, ct, st * cg],
        [0.0, -st, ct * cg],
    ])


def _euler_rate_matrix_dot(theta, gamma, dtheta, dgamma) -> np.ndarray:
    ct, st = math.cos(theta), math.sin(theta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    return np.array([
        [0.0, 0.0, -cg * dgamma],
        [0.0, -st * dtheta, -sg * st * dgamma + cg * ct * dtheta],
        [0.0, -ct * dtheta, -sg * ct * dgamma - cg * st * dtheta],
    ])


def _kinematics(model: SpineModel, xi: np.ndarray):
    """Node positions and velocities plus per-body rotation/offset data.

    Returns (X, V, bodies) where bodies[j] = (R, offsets, omega_body or
    dgamma) for moving body j, and X, V are (n, d) global arrays.
    """
    tb = model.tables
    d = tb.d
    X = np.empty((tb.n, d))
    V = np.zeros((tb.n, d))
    X[tb.body_slices[0]] = tb.nodes[0]  # fixed body at the identity pose
    bodies = []
    for j in range(tb.n_moving):
        base = 2 * tb.dof * j
        sl = tb.body_slices[j + 1]
        nodes = tb.nodes[j + 1]
        if d == 2:
            R = rotation_2d(xi[base + 2])
            w = nodes @ R.T
            X[sl] = w + xi[base:base + 2]
            dgamma = xi[base + 5]
            # Rigid velocity field: v = dr + dgamma * J w, J = [[0,1],[-1,0]].
            V[sl, 0] = xi[base + 3] + dgamma * w[:, 1]
            V[sl, 1] = xi[base + 4] - dgamma * w[:, 0]
            bodies.append((R, w, dgamma))
        else:
            theta, gamma, psi = xi[base + 3], xi[base + 4], xi[base + 5]
            if abs(np.cos(gamma)) < 1e-8:
                raise AngleSingularityError(
                    f"moving body {j}: gamma={gamma:.6f} at the 3-2-1 singularity")
            R = rotation_321(theta, gamma, psi)
            w = nodes @ R.T
            X[sl] = w + xi[base:base + 3]
            omega_b = _euler_rate_matrix(theta, gamma) @ xi[base + 9:base + 12]
            omega_w = R @ omega_b
            V[sl] = xi[base + 6:base + 9] + np.cross(omega_w[None, :], w)
            bodies.append((R, w, omega_b))
    return X, V, bodies


def cable_state(model: SpineModel, xi: np.ndarray, u: np.ndarray):
    """Per-cable (vectors, lengths, length rates, tensions) at a state."""
    u = np.asarray(u, dtype=float).ravel()
    if u.size != model.s:
        raise ValueError(f"input size {u.size} != cable count {model.s}")
    X, V, _ = _kinematics(model, np.asarray(xi, dtype=float).ravel())
    vecs = X[model.cable_plus] - X[model.cable_minus]
    lengths = np.linalg.norm(vecs, axis=1)
    if np.any(lengths < 1e-9):
        bad = int(np.argmin(lengths))
        raise DegenerateCableError(f"cable {bad} has length {lengths[bad]:.3e} m")
    dvel = V[model.cable_plus] - V[model.cable_minus]
    rates = np.einsum("ij,ij->i", vecs, dvel) / lengths
    tensions = cable_tension(model.cable_stiffness, model.cable_damping,
                             lengths, rates, u)
    return vecs, lengths, rates, tensions


def cable_forces(model: SpineModel, xi: np.ndarray, u: np.ndarray) -> list[CableForce]:
    vecs, lengths, _, tensions = cable_state(model, xi, u)
    return [
        CableForce(float(tensions[i]), vecs[i] / lengths[i],
                   (int(model.cable_plus[i]), int(model.cable_minus[i])))
        for i in range(model.s)
    ]


def state_derivative(model: SpineModel, xi: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Time derivative of the state under input u (see module docstring)."""
    xi = np.asarray(xi, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if xi.size != model.state_size:
        raise ValueError(f"state size {xi.size} != {model.state_size}")
    if u.size != model.s:
        raise ValueError(f"input size {u.size} != cable count {model.s}")

    tb = model.tables
    d = tb.d
    X, V, bodies = _kinematics(model, xi)
    C_s = tb.cables
    vecs = C_s @ X
    lengths = np.sqrt(np.einsum("ij,ij->i", vecs, vecs))
    if np.any(lengths < 1e-9):
        bad = int(np.argmin(lengths))
        raise DegenerateCableError(f"cable {bad} has length {lengths[bad]:.3e} m")
    rates = np.einsum("ij,ij->i", vecs, C_s @ V) / lengths
    tensions = cable_tension(tb.stiffness, tb.damping, lengths, rates, u)

    # Nodal cable forces in force-density form: -C_s' diag(F/l) C_s X; the
    # plus node of each cable is pulled toward its minus node.
    F_nodes = -C_s.T @ ((tensions / lengths)[:, None] * vecs)

    dxi = np.empty_like(xi)
    dof = tb.dof
    for j in range(tb.n_moving):
        base = 2 * dof * j
        mass = tb.masses[j + 1]
        R, offsets, omega = bodies[j]
        Fb = F_nodes[tb.body_slices[j + 1]]
        total = Fb.sum(axis=0)
        total[-1] -= mass * tb.gravity  # gravity acts on the z axis
        dxi[base:base + dof] = xi[base + dof:base + 2 * dof]
        dxi[base + dof:base + dof + d] = total / mass
        if d == 2:
            # Torque about the COM; gravity cancels exactly by COM centering.
            tau = float(np.sum(offsets[:, 1] * Fb[:, 0] - offsets[:, 0] * Fb[:, 1]))
            dxi[base + 5] = tau / float(tb.inertias[j + 1])
        else:
            tau_w = np.sum(np.cross(offsets, Fb), axis=0)
            tau_b = R.T @ tau_w
            I = tb.inertias[j + 1]
            omega_dot = np.linalg.solve(I, tau_b - np.cross(omega, I @ omega))
            theta, gamma = xi[base + 3], xi[base + 4]
            rates_ang = xi[base + 9:base + 12]
            T = _euler_rate_matrix(theta, gamma)
            Tdot = _euler_rate_matrix_dot(theta, gamma, rates_ang[0], rates_ang[1])
            dxi[base + 9:base + 12] = np.linalg.solve(T, omega_dot - Tdot @ rates_ang)
    return dxi


def accelerations(model: SpineModel, xi: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Acceleration entries of the state derivative (equilibrium audits)."""
    dxi = state_derivative(model, xi, u)
    return np.concatenate([dxi[model.velocity_slice(j)] for j in range(model.n_moving)])


def _rotation_321_batch(theta, gamma, psi) -> np.ndarray:
    ct, st = np.cos(theta), np.sin(theta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    cp, sp = np.cos(psi), np.sin(psi)
    R = np.empty((theta.size, 3, 3))
    R[:, 0, 0] = cp * cg
    R[:, 0, 1] = cp * sg * st - sp * ct
    R[:, 0, 2] = cp * sg * ct + sp * st
    R[:, 1, 0] = sp * cg
    R[:, 1, 1] = sp * sg * st + cp * ct
    R[:, 1, 2] = sp * sg * ct - cp * st
    R[:, 2, 0] = -sg
    R[:, 2, 1] = cg * st
    R[:, 2, 2] = cg * ct
    return R


def _euler_rate_matrices_batch(theta, gamma, dtheta, dgamma):
    """Batched T and dT/dt for the 3-2-1 rate map."""
    ct, st = np.cos(theta), np.sin(theta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    B = theta.size
    T = np.zeros((B, 3, 3))
    T[:, 0, 0] = 1.0
    T[:, 0, 2] = -sg
    T[:, 1, 1] = ct
    T[:, 1, 2] = st * cg
    T[:, 2, 1] = -st
    T[:, 2, 2] = ct * cg
    Td = np.zeros((B, 3, 3))
    Td[:, 0, 2] = -cg * dgamma
    Td[:, 1, 1] = -st * dtheta
    Td[:, 1, 2] = -sg * st * dgamma + cg * ct * dtheta
    Td[:, 2, 1] = -ct * dtheta
    Td[:, 2, 2] = -sg * ct * dgamma - cg * st * dtheta
    return T, Td


def state_derivative_batch(model: SpineModel, Xi: np.ndarray, U: np.ndarray) -> np.ndarray:
    """state_derivative vectorized over a leading batch axis.

    Used by the finite-difference linearizer, where one call evaluates all
    perturbed points at once.  Agrees with the scalar path to rounding.
    """
    tb = model.tables
    Xi = np.atleast_2d(np.asarray(Xi, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    B, d = Xi.shape[0], tb.d
    X = np.empty((B, tb.n, d))
    V = np.zeros((B, tb.n, d))
    X[:, tb.body_slices[0]] = tb.nodes[0]
    bodies = []
    for j in range(tb.n_moving):
        base = 2 * tb.dof * j
        sl = tb.body_slices[j + 1]
        nodes = tb.nodes[j + 1]
        if d == 2:
            g = Xi[:, base + 2]
            c, s = np.cos(g), np.sin(g)
            wx = nodes[:, 0] * c[:, None] + nodes[:, 1] * s[:, None]
            wz = -nodes[:, 0] * s[:, None] + nodes[:, 1] * c[:, None]
            X[:, sl, 0] = wx + Xi[:, base, None]
            X[:, sl, 1] = wz + Xi[:, base + 1, None]
            dg = Xi[:, base + 5, None]
            V[:, sl, 0] = Xi[:, base + 3, None] + dg * wz
            V[:, sl, 1] = Xi[:, base + 4, None] - dg * wx
            bodies.append((wx, wz))
        else:
            th, ga, ps = Xi[:, base + 3], Xi[:, base + 4], Xi[:, base + 5]
            if np.any(np.abs(np.cos(ga)) < 1e-8):
                raise AngleSingularityError(
                    f"moving body {j}: gamma at the 3-2-1 singularity")
            R = _rotation_321_batch(th, ga, ps)
            w = np.einsum("bij,kj->bki", R, nodes)
            X[:, sl] = w + Xi[:, base:base + 3][:, None, :]
            T, Td = _euler_rate_matrices_batch(th, ga,
                                               Xi[:, base + 9], Xi[:, base + 10])
            omega_b = np.einsum("bij,bj->bi", T, Xi[:, base + 9:base + 12])
            omega_w = np.einsum("bij,bj->bi", R, omega_b)
            V[:, sl] = Xi[:, base + 6:base + 9][:, None, :] \
                + np.cross(omega_w[:, None, :], w)
            bodies.append((R, w, omega_b, T, Td))

    C_s = tb.cables
    vecs = np.einsum("sn,bnd->bsd", C_s, X)
    lengths = np.sqrt(np.einsum("bsd,bsd->bs", vecs, vecs))
    if np.any(lengths < 1e-9):
        raise DegenerateCableError("degenerate cable in batched evaluation")
    rates = np.einsum("bsd,bsd->bs", vecs,
                      np.einsum("sn,bnd->bsd", C_s, V)) / lengths
    tensions = np.maximum(0.0, tb.stiffness * (lengths - U) + tb.damping * rates)
    F = -np.einsum("ns,bsd->bnd", C_s.T, (tensions / lengths)[:, :, None] * vecs)

    dXi = np.empty_like(Xi)
    dof = tb.dof
    for j in range(tb.n_moving):
        base = 2 * dof * j
        sl = tb.body_slices[j + 1]
        mass = tb.masses[j + 1]
        Fb = F[:, sl]
        total = Fb.sum(axis=1)
        total[:, -1] -= mass * tb.gravity
        dXi[:, base:base + dof] = Xi[:, base + dof:base + 2 * dof]
        dXi[:, base + dof:base + dof + d] = total / mass
        if d == 2:
            wx, wz = bodies[j]
            tau = np.sum(wz * Fb[:, :, 0] - wx * Fb[:, :, 1], axis=1)
            dXi[:, base + 5] = tau / float(tb.inertias[j + 1])
        else:
            R, w, omega_b, T, Td = bodies[j]
            tau_w = np.cross(w, Fb).sum(axis=1)
            tau_b = np.einsum("bji,bj->bi", R, tau_w)
            I = tb.inertias[j + 1]
            Iw = omega_b @ I.T
            omega_dot = np.linalg.solve(I, (tau_b - np.cross(omega_b, Iw)).T).T
            rhs = omega_dot - np.einsum("bij,bj->bi", Td, Xi[:, base + 9:base + 12])
            dXi[:, base + 9:base + 12] = np.linalg.solve(T, rhs[:, :, None])[:, :, 0]
    return dXi


def step(model: SpineModel, xi: np.ndarray, u: np.ndarray, dt: float,
         integrator: str = "euler", noise: NoiseModel | None = None,
         rng: np.random.Generator | None = None) -> np.ndarray:
    """One integration step; process noise (if any) is added after the step.

    Multi-step callers must pass a persistent ``rng`` so the noise stream
    advances; otherwise a fresh generator is seeded from the noise model.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if integrator == "euler":
        nxt = xi + dt * state_derivative(model, xi, u)
    elif integrator == "rk4":
        k1 = state_derivative(model, xi, u)
        k2 = state_derivative(model, xi + 0.5 * dt * k1, u)
        k3 = state_derivative(model, xi + 0.5 * dt * k2, u)
        k4 = state_derivative(model, xi + dt * k3, u)
        nxt = xi + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    else:
        raise ValueError(f"unknown integrator '{integrator}'")
    if noise is not None:
        if rng is None:
            rng = noise.make_rng()
        nxt = nxt + noise.scale * rng.standard_normal(nxt.size)
    return nxt


@dataclass
class SimulationRecord:
    """Sampled trajectory: times, states, applied inputs, cable tensions."""

    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    tensions: np.ndarray

    def __len__(self):
        return self.t.size

    def to_csv(self, path, header_lines: list[str] | None = None) -> None:
        dim = self.states.shape[1]
        s = self.inputs.shape[1]
        with open(path, "w", newline="") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(
                ["t"] + [f"xi_{i + 1}" for i in range(dim)]
                + [f"u_{i + 1}" for i in range(s)] + [f"F_{i + 1}" for i in range(s)])
            for i in range(self.t.size):
                row = ([f"{self.t[i]:.17g}"]
                       + [f"{v:.17g}" for v in self.states[i]]
                       + [f"{v:.17g}" for v in self.inputs[i]]
                       + [f"{v:.17g}" for v in self.tensions[i]])
                writer.writerow(row)


def simulate(model: SpineModel, xi0: np.ndarray, input_schedule, dt: float, T: float,
             integrator: str = "euler", noise: NoiseModel | None = None,
             record_every: int = 1) -> SimulationRecord:
    """Iterate ``step`` over [0, T], recording every ``record_every``-th sample.

    ``input_schedule`` is either a constant input vector or a callable
    t -> u.  Decimation affects the record only, never the dynamics.
    Raises DivergenceError (with the offending step) on non-finite states.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    n_steps = int(round(T / dt)) if T > 0 else 0
    if T > 0 and abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("dt must divide T within rounding")
    schedule = input_schedule if callable(input_schedule) else (lambda _t: input_schedule)
    rng = noise.make_rng() if noise is not None else None

    xi = np.asarray(xi0, dtype=float).copy()
    ts, states, inputs, tensions = [], [], [], []

    def record(i, t, xi, u):
        if i % record_every == 0 or i == n_steps:
            ts.append(t)
            states.append(xi.copy())
            inputs.append(np.asarray(u, dtype=float).copy())
            tensions.append(cable_state(model, xi, u)[3])

    u = np.asarray(schedule(0.0), dtype=float)
    record(0, 0.0, xi, u)
    for i in range(n_steps):
        t = i * dt
        u = np.asarray(schedule(t), dtype=float)
        xi = step(model, xi, u, dt, integrator, noise, rng)
        if not np.all(np.isfinite(xi)):
            raise DivergenceError(f"non-finite state at step {i + 1}", i + 1)
        record(i + 1, (i + 1) * dt, xi, u)
    return SimulationRecord(np.array(ts), np.array(states),
                            np.array(inputs), np.array(tensions))


def total_energy(model: SpineModel, xi: np.ndarray, u: np.ndarray) -> float:
    """Kinetic plus gravitational plus elastic energy.

    Elastic energy counts 0.5 k (l - u)^2 for taut cables and zero for
    slack ones; with zero damping this is conserved between rectification
    events.
    """
    xi = np.asarray(xi, dtype=float).ravel()
    _, lengths, _, _ = cable_state(model, xi, u)
    stretch = np.maximum(lengths - np.asarray(u, dtype=float), 0.0)
    e_spring = float(0.5 * model.cable_stiffness @ stretch**2)
    e_kin = 0.0
    e_grav = 0.0
    for j in range(model.n_moving):
        geo = model.geometry[j + 1]
        q = xi[model.pose_slice(j)]
        dq = xi[model.velocity_slice(j)]
        e_kin += 0.5 * geo.mass * float(dq[:model.d] @ dq[:model.d])
        if model.d == 2:
            e_kin += 0.5 * float(geo.inertia) * dq[2] ** 2
            e_grav += geo.mass * model.gravity * q[1]
        else:
            omega_b = _euler_rate_matrix(q[3], q[4]) @ dq[3:]
            e_kin += 0.5 * float(omega_b @ geo.inertia @ omega_b)
            e_grav += geo.mass * model.gravity * q[2]
    return e_kin + e_grav + e_spring
