"""Inverse statics: cable tensions that hold a given pose in equilibrium.

The classical force-density route writes a per-node force balance

    A q = p,   A = [C' diag(C x); C' diag(C z)],   q_i = F_i / l_i,

which has no solution for these spines: the vertebrae need internal
bending moments (a center node carries gravity but no cable), and A is
taller than it is wide.  The rigid-body reformulation replaces the
per-node balance with, for each moving vertebra, a total force balance
plus a total moment balance about the global origin, with the fixed body's
rows removed (its ground reactions absorb any force) and the bar columns
dropped (bars are internal to rigid bodies).  The result stays linear in
the cable force densities q_s:

    A_b q_s = p_b.

Row stackings for the planar two-body spine:
  * ``collapsed``: 3 x 4, rows [Fx, Fz, M] with M = -z Fx + x Fz summed
    over the moving body's nodes.
  * ``planar6``: 6 x 4, the same balance embedded in three dimensions,
    rows [Fx, Fy, Fz, Mx, My, Mz].  The out-of-plane rows are identically
    zero, so the matrix has at most rank 3 with an explicit fourth
    singular value; this reproduces the published 6 x 4 shape.
Both stackings describe the same constraint set.

Minimum-norm tensions solve  min q_s' q_s  s.t.  A_b q_s = p_b,
-q_s <= -c  where c bounds the force density from below, and rest lengths
follow from the cable model as  u_i = l_i - l_i q_i / k_i.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import numopt
from .spine import Pose, SpineModel, cable_vectors, node_positions

STACKINGS = ("collapsed", "planar6")
DEFAULT_MIN_DENSITY = 0.5  # N/m


class InfeasiblePoseError(RuntimeError):
    """No admissible tensions hold this pose; carries the timestep index."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class NegativeRestLengthError(ValueError):
    """Demanded tension exceeds k*l, which would need a negative rest length."""


@dataclass
class NodalEquilibrium:
    """Per-node force balance A q = p over all members (cables and bars)."""

    A: np.ndarray
    p: np.ndarray


@dataclass
class ReductionMatrices:
    """Operators of the two-body reduction: row selection W (moving body),
    its per-axis block form W_f, per-body collapse K, bar elimination H."""

    W: np.ndarray
    W_f: np.ndarray
    K: np.ndarray
    H: np.ndarray


@dataclass
class RigidBodyEquilibrium:
    """Stacked per-body force and moment balance A_b q_s = p_b."""

    A_b: np.ndarray
    p_b: np.ndarray
    stacking: str


@dataclass
class ForceDensities:
    q_s: np.ndarray
    c_min: np.ndarray

    def __post_init__(self):
        self.q_s = np.asarray(self.q_s, dtype=float).ravel()
        self.c_min = np.asarray(self.c_min, dtype=float).ravel()


def assemble_nodal(model: SpineModel, positions: np.ndarray) -> NodalEquilibrium:
    """Classical force-density assembly at given node positions.

    A stacks one block C' diag(C coords_axis) per axis; p carries gravity
    -m_k g on each node's vertical (last-axis) component.
    """
    C = model.connectivity
    blocks = [C.T @ np.diag(C @ positions[:, axis]) for axis in range(model.d)]
    A = np.vstack(blocks)
    p = np.zeros(model.n * model.d)
    p[(model.d - 1) * model.n:] = -model.node_masses_flat * model.gravity
    return NodalEquilibrium(A, p)


def reduction_matrices(model: SpineModel) -> ReductionMatrices:
    """Reduction operators for the two-body chain (one fixed, one moving)."""
    if model.b != 2:
        raise ValueError("reduction matrices are defined for the two-body chain")
    eta, d, s, r = model.eta, model.d, model.s, model.r
    W = np.hstack([np.zeros((eta, eta)), np.eye(eta)])
    W_f = np.kron(np.eye(d), W)
    K = np.kron(np.eye(d), np.ones((1, eta)))
    H = np.vstack([np.eye(s), np.zeros((r, s))])
    return ReductionMatrices(W, W_f, K, H)


def _per_axis_cable_blocks(model: SpineModel, nodal: NodalEquilibrium):
    """A and p restricted to cable columns, split per axis: lists of
    (n x s) matrices and (n,) vectors in axis order."""
    n, s = model.n, model.s
    A_cables = nodal.A[:, :s]
    blocks = [A_cables[axis * n:(axis + 1) * n] for axis in range(model.d)]
    p_axis = [nodal.p[axis * n:(axis + 1) * n] for axis in range(model.d)]
    return blocks, p_axis


def assemble_rigid_body(model: SpineModel, positions: np.ndarray,
                        stacking: str = "planar6") -> RigidBodyEquilibrium:
    """Per-moving-body force and moment balance (see module docstring).

    Rows are grouped force-first, then moments, per the reduction order;
    bodies stack in chain order within each group.
    """
    if stacking not in STACKINGS:
        raise ValueError(f"stacking must be one of {STACKINGS}")
    nodal = assemble_nodal(model, positions)
    blocks, p_axis = _per_axis_cable_blocks(model, nodal)
    x = positions[:, 0]
    z = positions[:, -1]
    y = positions[:, 1] if model.d == 3 else None

    force_rows, force_rhs = [], []
    moment_rows, moment_rhs = [], []
    for body in range(1, model.b):
        sel = model.body_slice(body)
        ones = np.ones(model.eta)
        f_rows = [ones @ blocks[axis][sel] for axis in range(model.d)]
        f_rhs = [float(ones @ p_axis[axis][sel]) for axis in range(model.d)]
        if model.d == 2:
            # Planar moment about the origin, -z Fx + x Fz per node.
            m_rows = [-z[sel] @ blocks[0][sel] + x[sel] @ blocks[1][sel]]
            m_rhs = [float(-z[sel] @ p_axis[0][sel] + x[sel] @ p_axis[1][sel])]
            if stacking == "planar6":
                zero = np.zeros(model.s)
                f_rows = [f_rows[0], zero, f_rows[1]]        # Fx, Fy = 0, Fz
                f_rhs = [f_rhs[0], 0.0, f_rhs[1]]
                m_rows = [zero, m_rows[0], zero]             # Mx = 0, My, Mz = 0
                m_rhs = [0.0, m_rhs[0], 0.0]
        else:
            ax, ay, az = blocks
            px, py, pz = p_axis
            m_rows = [
                y[sel] @ az[sel] - z[sel] @ ay[sel],
                z[sel] @ ax[sel] - x[sel] @ az[sel],
                x[sel] @ ay[sel] - y[sel] @ ax[sel],
            ]
            m_rhs = [
                float(y[sel] @ pz[sel] - z[sel] @ py[sel]),
                float(z[sel] @ px[sel] - x[sel] @ pz[sel]),
                float(x[sel] @ py[sel] - y[sel] @ px[sel]),
            ]
        force_rows += f_rows
        force_rhs += f_rhs
        moment_rows += m_rows
        moment_rhs += m_rhs
    A_b = np.vstack([np.array(force_rows), np.array(moment_rows)])
    p_b = np.concatenate([np.array(force_rhs), np.array(moment_rhs)])
    return RigidBodyEquilibrium(A_b, p_b, stacking)


def solve_min_norm_tensions(eq: RigidBodyEquilibrium,
                            c_min=DEFAULT_MIN_DENSITY) -> ForceDensities:
    """Minimum-norm force densities:  min q'q  s.t.  A_b q = p_b, q >= c_min."""
    s = eq.A_b.shape[1]
    c = np.broadcast_to(np.asarray(c_min, dtype=float), (s,)).astype(float)
    if np.any(c < 0):
        raise ValueError("minimum force densities must be nonnegative")
    prob = numopt.QpProblem(2.0 * np.eye(s), np.zeros(s),
                            Aeq=eq.A_b, beq=eq.p_b, Ain=-np.eye(s), bin=-c)
    sol = numopt.solve_qp(prob)
    if sol.status != numopt.OPTIMAL:
        raise InfeasiblePoseError(f"tension solve returned status '{sol.status}'")
    return ForceDensities(sol.z, c)


def rest_lengths_from_densities(model: SpineModel, positions: np.ndarray,
                                q_s: np.ndarray) -> np.ndarray:
    """Back-calculate rest lengths u_i = l_i - l_i q_i / k_i (zero velocity)."""
    q_s = np.asarray(q_s, dtype=float).ravel()
    if np.any(q_s < 0):
        raise ValueError("force densities must be nonnegative")
    _, lengths = cable_vectors(model, positions)
    u = lengths * (1.0 - q_s / model.cable_stiffness)
    if np.any(u < 0):
        bad = int(np.argmin(u))
        raise NegativeRestLengthError(
            f"cable {bad} demands tension beyond k*l (u = {u[bad]:.4e} m)")
    return u


@dataclass
class InputTrajectory:
    """Reference inputs from the per-pose tension solves."""

    t: np.ndarray
    u: np.ndarray
    q: np.ndarray
    residuals: np.ndarray

    def __len__(self):
        return self.t.size

    def interpolator(self):
        """Zero-order-hold lookup t -> u over the trajectory samples."""
        def lookup(t: float) -> np.ndarray:
            i = int(np.clip(np.searchsorted(self.t, t, side="right") - 1,
                            0, self.t.size - 1))
            return self.u[i]
        return lookup

    def to_csv(self, path, header_lines: list[str] | None = None) -> None:
        s = self.u.shape[1]
        with open(path, "w", newline="") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"u_{i + 1}" for i in range(s)]
                            + [f"q_{i + 1}" for i in range(s)] + ["eq_residual"])
            for i in range(self.t.size):
                writer.writerow([f"{self.t[i]:.17g}"]
                                + [f"{v:.17g}" for v in self.u[i]]
                                + [f"{v:.17g}" for v in self.q[i]]
                                + [f"{self.residuals[i]:.17g}"])


def generate_input_trajectory(model: SpineModel, times: np.ndarray,
                              states: np.ndarray, c_min=DEFAULT_MIN_DENSITY,
                              stacking: str = "planar6") -> InputTrajectory:
    """Solve the tension problem at every reference pose and back-calculate
    the rest-length input for each; aborts at the first infeasible pose."""
    out_u = np.empty((len(times), model.s))
    out_q = np.empty((len(times), model.s))
    resid = np.empty(len(times))
    for i, xi in enumerate(states):
        poses = model.poses_from_state(xi)
        positions = node_positions(model, poses)
        eq = assemble_rigid_body(model, positions, stacking)
        try:
            dens = solve_min_norm_tensions(eq, c_min)
        except InfeasiblePoseError as exc:
            raise InfeasiblePoseError(
                f"pose {i} (t={times[i]:.6g}) is statics-infeasible", i) from exc
        out_q[i] = dens.q_s
        out_u[i] = rest_lengths_from_densities(model, positions, dens.q_s)
        resid[i] = np.max(np.abs(eq.A_b @ dens.q_s - eq.p_b))
    return InputTrajectory(np.asarray(times, dtype=float).copy(), out_u, out_q, resid)


def nodal_least_squares_residual(model: SpineModel, positions: np.ndarray) -> float:
    """Best-case residual of the classical per-node balance A q = p.

    A strictly positive value certifies that no force densities (of any
    sign) satisfy the nodal equilibrium at this pose.
    """
    nodal = assemble_nodal(model, positions)
    q, *_ = np.linalg.lstsq(nodal.A, nodal.p, rcond=None)
    return float(np.max(np.abs(nodal.A @ q - nodal.p)))
