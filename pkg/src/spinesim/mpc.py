"""Receding-horizon control: linearization, CFTOC compilation, closed loop.

Both controllers relinearize the nonlinear dynamics at every control
instant (finite differences about the current state and the previously
applied input), compile a finite-horizon QP, apply the first optimal
input, and hold it until the next instant.

The two flavors differ in the compiled problem:

  * smoothing: tracks pose references under hard infinity-norm limits on
    input and state increments, box input bounds, inter-body collision
    margins, and horizon-exponentiated diagonal weights; one epigraph
    scalar per stage turns the infinity-norm input-increment cost into
    linear rows.
  * tracking: plain quadratic tracking of a state reference plus a
    precomputed equilibrium input reference, with an input lower bound
    and a floor on the first moving body's height.

Compilation condenses the predicted states (x_k is affine in the stacked
inputs), so the QP decision vector holds inputs (and epigraph scalars)
only; an index map and the affine reconstruction matrices keep every
formulation quantity recoverable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import numopt
from .dynamics import (AngleSingularityError, DivergenceError, NoiseModel,
                       cable_state, state_derivative_batch, step)
from .spine import DegenerateCableError
from .invstat import InputTrajectory, generate_input_trajectory
from .spine import SpineModel
from .trajectory import SweepSpec, state_at


class LinearizationError(RuntimeError):
    """Finite-difference evaluation failed at or near the expansion point."""


@dataclass
class LinearizedDynamics:
    """Affine model  xi+ = A xi + B u + c  (discrete) or
    d(xi)/dt = A xi + B u + c  (continuous, discretization == 'none')."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    discretization: str = "none"
    dt: float = 0.0


def linearize(model: SpineModel, xi_ref: np.ndarray, u_ref: np.ndarray,
              h: float = 1e-6) -> LinearizedDynamics:
    """Central-difference Jacobians of the continuous dynamics.

    Per-coordinate step h * max(1, |value|); the affine offset makes the
    expansion exact at the reference point.  All 2(nx + nu) + 1 evaluation
    points go through one batched dynamics call.
    """
    xi_ref = np.asarray(xi_ref, dtype=float).ravel()
    u_ref = np.asarray(u_ref, dtype=float).ravel()
    nx, nu = xi_ref.size, u_ref.size
    hx = h * np.maximum(1.0, np.abs(xi_ref))
    hu = h * np.maximum(1.0, np.abs(u_ref))
    Xi = np.tile(xi_ref, (1 + 2 * nx + 2 * nu, 1))
    U = np.tile(u_ref, (1 + 2 * nx + 2 * nu, 1))
    idx = np.arange(nx)
    Xi[1 + 2 * idx, idx] += hx
    Xi[2 + 2 * idx, idx] -= hx
    idu = np.arange(nu)
    U[1 + 2 * nx + 2 * idu, idu] += hu
    U[2 + 2 * nx + 2 * idu, idu] -= hu
    try:
        derivs = state_derivative_batch(model, Xi, U)
    except Exception as exc:
        raise LinearizationError(f"dynamics evaluation failed: {exc}") from exc
    g0 = derivs[0]
    plus = derivs[1:1 + 2 * nx:2]
    minus = derivs[2:2 + 2 * nx:2]
    A = ((plus - minus) / (2.0 * hx[:, None])).T
    plus_u = derivs[1 + 2 * nx::2]
    minus_u = derivs[2 + 2 * nx::2]
    B = ((plus_u - minus_u) / (2.0 * hu[:, None])).T
    c = g0 - A @ xi_ref - B @ u_ref
    return LinearizedDynamics(A, B, c, "none", 0.0)


def linearize_function(fun, x0: np.ndarray, u0: np.ndarray,
                       h: float = 1e-6) -> LinearizedDynamics:
    """Central-difference linearization of an arbitrary dx = fun(x, u).

    Same stencil and step rule as ``linearize`` without the batched
    dynamics fast path; serves as its independent oracle and covers
    synthetic plants.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    u0 = np.asarray(u0, dtype=float).ravel()
    g0 = np.asarray(fun(x0, u0), dtype=float)
    nx, nu = x0.size, u0.size
    A = np.empty((nx, nx))
    for i in range(nx):
        hi = h * max(1.0, abs(x0[i]))
        xp, xm = x0.copy(), x0.copy()
        xp[i] += hi
        xm[i] -= hi
        A[:, i] = (np.asarray(fun(xp, u0)) - np.asarray(fun(xm, u0))) / (2 * hi)
    B = np.empty((nx, nu))
    for i in range(nu):
        hi = h * max(1.0, abs(u0[i]))
        up, um = u0.copy(), u0.copy()
        up[i] += hi
        um[i] -= hi
        B[:, i] = (np.asarray(fun(x0, up)) - np.asarray(fun(x0, um))) / (2 * hi)
    c = g0 - A @ x0 - B @ u0
    return LinearizedDynamics(A, B, c, "none", 0.0)


def discretize(lin: LinearizedDynamics, dt: float, method: str) -> LinearizedDynamics:
    """Forward-Euler or exact zero-order-hold discretization."""
    if lin.discretization != "none":
        raise ValueError("dynamics already discretized")
    nx = lin.A.shape[0]
    nu = lin.B.shape[1]
    if method == "euler":
        return LinearizedDynamics(np.eye(nx) + dt * lin.A, dt * lin.B,
                                  dt * lin.c, "euler", dt)
    if method == "zoh":
        # Augment [A B c; 0 0 0]; the exponential's top rows give Ad, Bd, cd.
        aug = np.zeros((nx + nu + 1, nx + nu + 1))
        aug[:nx, :nx] = lin.A
        aug[:nx, nx:nx + nu] = lin.B
        aug[:nx, -1] = lin.c
        E = scipy.linalg.expm(aug * dt)
        return LinearizedDynamics(E[:nx, :nx], E[:nx, nx:nx + nu],
                                  E[:nx, -1], "zoh", dt)
    raise ValueError(f"unknown discretization '{method}'")


@dataclass
class SmoothingConfig:
    """Constants of the smoothing controller (meters, radians, unitless)."""

    N: int = 10
    u_min: float = 0.0
    u_max: float = 0.20
    w1: float = 0.01    # input increment, horizon start (vs last applied)
    w2: float = 0.01    # input increment, mid-horizon (vs first planned)
    w3: float = 0.10    # input increment, horizon end (vs first planned)
    w4: float = 0.02    # pose increment bound, first moving body
    w5: float = 0.03    # pose increment bound, second moving body
    w6: float = 0.04    # pose increment bound, third moving body
    w7: float = 0.02    # inter-body collision margin on z
    w8: float = 1.0     # input-increment cost weight
    w9: float = 25.0    # position tracking weight base
    w10: float = 30.0   # angle tracking weight base
    w11: float = 3.0    # state-increment cost weight base
    # Prediction-model discretization.  Exact hold ("zoh") keeps the
    # prediction matrix stable at the 1e-3 s control period; "euler" is
    # available but its transition matrix is unstable for the spatial
    # spine (spectral radius ~10), which renders the increment rows
    # infeasible over the horizon.
    discretization: str = "zoh"

    def pose_increment_bounds(self, n_moving: int) -> list[float]:
        bounds = [self.w4, self.w5, self.w6]
        if n_moving > len(bounds):
            raise ValueError("smoothing bounds defined for up to three moving bodies")
        return bounds[:n_moving]


@dataclass
class TrackingConfig:
    """Constants of the input-tracking controller."""

    N: int = 4
    u_min: float = 0.0
    w1: float = 0.075   # floor on the moving body's z position
    w2: float = 1.0     # pose tracking weight
    w3: float = 10.0    # input tracking weight
    discretization: str = "zoh"


@dataclass
class CftocProblem:
    """Compiled finite-horizon QP plus the maps back to formulation terms.

    The formulation has states x_0..x_N, inputs u_0..u_N (smoothing) or
    u_0..u_{N-1} (tracking) and one epigraph scalar per stage for the
    smoothing flavor; compilation eliminates the states by substitution,
    so the decision vector z stacks inputs then epigraph scalars.  States
    are recovered as  x_k = state_offsets[k] + state_maps[k] @ z_inputs.
    """

    qp: numopt.QpProblem
    horizon: int
    nx: int
    nu: int
    n_epigraph: int
    state_offsets: np.ndarray      # (N+1, nx)
    state_maps: np.ndarray         # (N+1, nx, n_dyn_inputs)
    n_decision_inputs: int         # input blocks kept as decision variables
    formulation_variable_count: int

    def input_slice(self, k: int) -> slice:
        if not 0 <= k < self.n_decision_inputs:
            raise IndexError(f"input block {k} out of range")
        return slice(k * self.nu, (k + 1) * self.nu)

    def epigraph_index(self, k: int) -> int:
        if not 0 <= k < self.n_epigraph:
            raise IndexError(f"epigraph scalar {k} out of range")
        return self.n_decision_inputs * self.nu + k

    def first_input(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z)[self.input_slice(0)]

    def inputs(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z)[:self.n_decision_inputs * self.nu].reshape(
            self.n_decision_inputs, self.nu)

    def states(self, z: np.ndarray) -> np.ndarray:
        u_dyn = np.asarray(z)[:self.state_maps.shape[2]]
        return self.state_offsets + self.state_maps @ u_dyn


def _condense(lin: LinearizedDynamics, xi_now: np.ndarray, N: int):
    """Affine state predictions x_k = offsets[k] + maps[k] @ [u_0;..;u_{N-1}]."""
    if lin.discretization == "none":
        raise ValueError("CFTOC compilation needs discretized dynamics")
    nx, nu = lin.B.shape
    offsets = np.empty((N + 1, nx))
    maps = np.zeros((N + 1, nx, N * nu))
    offsets[0] = xi_now
    for k in range(N):
        offsets[k + 1] = lin.A @ offsets[k] + lin.c
        maps[k + 1] = lin.A @ maps[k]
        maps[k + 1][:, k * nu:(k + 1) * nu] = lin.B
    return offsets, maps


def _pose_weight_diagonal(model: SpineModel, position_w: float, angle_w: float) -> np.ndarray:
    """Per-state diagonal: position_w on translations, angle_w on rotation
    angles, zero on every velocity entry."""
    diag = np.zeros(model.state_size)
    for j in range(model.n_moving):
        sl = model.pose_slice(j)
        diag[sl.start:sl.start + model.d] = position_w
        diag[sl.start + model.d:sl.stop] = angle_w
    return diag


def _add_quadratic(P, f, rows_map, rows_offset, weights, target):
    """Accumulate  || map z + offset - target ||^2_diag(weights)  into P, f.

    Only nonzero-weight rows participate.  P gets 2 W, matching the
    1/2 z'Pz + f'z convention.
    """
    nz = np.flatnonzero(weights)
    if nz.size == 0:
        return
    Gw = rows_map[nz]
    w = weights[nz]
    b = rows_offset[nz] - target[nz]
    ncols = Gw.shape[1]
    P[:ncols, :ncols] += 2.0 * (Gw.T * w) @ Gw
    f[:ncols] += 2.0 * (Gw.T @ (w * b))


def build_cftoc_smoothing(model: SpineModel, config: SmoothingConfig,
                          lin: LinearizedDynamics, xi_now: np.ndarray,
                          u_prev: np.ndarray, xi_ref_window: np.ndarray) -> CftocProblem:
    """Compile the smoothing-constrained CFTOC (see module docstring).

    ``xi_ref_window`` must supply N + 1 reference states.  Increment
    constraints and costs on states apply from stage 1 on (the stage-0
    state is pinned by the initial condition, so its increment is not a
    decision quantity).
    """
    N, nu, nx = config.N, model.s, model.state_size
    xi_ref_window = np.atleast_2d(np.asarray(xi_ref_window, dtype=float))
    if xi_ref_window.shape != (N + 1, nx):
        raise ValueError(f"reference window must be ({N + 1}, {nx}), "
                         f"got {xi_ref_window.shape}")
    u_prev = np.asarray(u_prev, dtype=float).ravel()
    offsets, maps = _condense(lin, np.asarray(xi_now, dtype=float).ravel(), N)

    n_dyn = N * nu
    nz = (N + 1) * nu + N  # inputs u_0..u_N plus one epigraph scalar per stage
    P = np.zeros((nz, nz))
    f = np.zeros(nz)

    q_diag = _pose_weight_diagonal(model, config.w9, config.w10)
    s_diag = _pose_weight_diagonal(model, config.w11, config.w11)
    for k in range(1, N + 1):
        _add_quadratic(P, f, maps[k], offsets[k], q_diag ** k, xi_ref_window[k])
        _add_quadratic(P, f, maps[k] - maps[k - 1], offsets[k] - offsets[k - 1],
                       s_diag ** k, np.zeros(nx))
    f[(N + 1) * nu:] = config.w8  # epigraph scalars carry the increment cost

    bounds = config.pose_increment_bounds(model.n_moving)
    pose_dim = model.dof * model.n_moving
    n_collide = model.n_moving - 1
    m_total = (2 * (N + 1) * nu      # input box
               + 2 * nu              # first-input increment vs applied
               + 2 * N * nu          # later inputs vs first
               + 2 * N * pose_dim    # pose increment bounds
               + N * n_collide       # collision margins
               + 2 * N * nu)         # epigraph rows
    Ain = np.zeros((m_total, nz))
    bin_ = np.empty(m_total)
    r = 0

    # Input box bounds on every input block, u_0..u_N.
    for k in range(N + 1):
        cols = np.arange(k * nu, (k + 1) * nu)
        Ain[r + np.arange(nu), cols] = 1.0
        bin_[r:r + nu] = config.u_max
        r += nu
        Ain[r + np.arange(nu), cols] = -1.0
        bin_[r:r + nu] = -config.u_min
        r += nu

    # Increment limits: first input vs last applied, later inputs vs first.
    cols0 = np.arange(nu)
    Ain[r + np.arange(nu), cols0] = 1.0
    bin_[r:r + nu] = config.w1 + u_prev
    r += nu
    Ain[r + np.arange(nu), cols0] = -1.0
    bin_[r:r + nu] = config.w1 - u_prev
    r += nu
    for k in range(1, N + 1):
        w = config.w3 if k == N else config.w2
        cols = np.arange(k * nu, (k + 1) * nu)
        for sign in (1.0, -1.0):
            Ain[r + np.arange(nu), cols] = sign
            Ain[r + np.arange(nu), cols0] = -sign
            bin_[r:r + nu] = w
            r += nu

    # Pose increment bounds per moving body, stages 1..N.
    for k in range(1, N + 1):
        dmap = maps[k] - maps[k - 1]
        doff = offsets[k] - offsets[k - 1]
        for j, bound in enumerate(bounds):
            sl = model.pose_slice(j)
            nrows = sl.stop - sl.start
            Ain[r:r + nrows, :n_dyn] = dmap[sl]
            bin_[r:r + nrows] = bound - doff[sl]
            r += nrows
            Ain[r:r + nrows, :n_dyn] = -dmap[sl]
            bin_[r:r + nrows] = bound + doff[sl]
            r += nrows

    # Collision margins between consecutive moving bodies' z positions.
    for k in range(1, N + 1):
        for j in range(n_collide):
            lo, hi = model.z_index(j), model.z_index(j + 1)
            Ain[r, :n_dyn] = maps[k][lo] - maps[k][hi]
            bin_[r] = offsets[k][hi] - offsets[k][lo] - config.w7
            r += 1

    # Epigraph rows: |u_k - u_{k-1}|_inf <= e_k (u_{-1} is the applied input).
    for k in range(N):
        e_col = (N + 1) * nu + k
        cols = np.arange(k * nu, (k + 1) * nu)
        for sign in (1.0, -1.0):
            Ain[r + np.arange(nu), cols] = sign
            if k > 0:
                Ain[r + np.arange(nu), cols - nu] = -sign
            Ain[r:r + nu, e_col] = -1.0
            bin_[r:r + nu] = sign * u_prev if k == 0 else 0.0
            r += nu

    assert r == m_total
    qp = numopt.QpProblem(P, f, Ain=Ain, bin=bin_)
    return CftocProblem(
        qp=qp, horizon=N, nx=nx, nu=nu, n_epigraph=N,
        state_offsets=offsets, state_maps=maps,
        n_decision_inputs=N + 1,
        formulation_variable_count=(N + 1) * nx + (N + 1) * nu + N)


def build_cftoc_tracking(model: SpineModel, config: TrackingConfig,
                         lin: LinearizedDynamics, xi_now: np.ndarray,
                         xi_ref_window: np.ndarray,
                         u_ref_window: np.ndarray) -> CftocProblem:
    """Compile the input-tracking CFTOC: quadratic pose/input tracking,
    input lower bound, and a z floor on the first moving body (stages
    1..N)."""
    N, nu, nx = config.N, model.s, model.state_size
    xi_ref_window = np.atleast_2d(np.asarray(xi_ref_window, dtype=float))
    u_ref_window = np.atleast_2d(np.asarray(u_ref_window, dtype=float))
    if xi_ref_window.shape != (N + 1, nx):
        raise ValueError(f"state reference window must be ({N + 1}, {nx})")
    if u_ref_window.shape != (N, nu):
        raise ValueError(f"input reference window must be ({N}, {nu})")
    offsets, maps = _condense(lin, np.asarray(xi_now, dtype=float).ravel(), N)

    nz = N * nu
    P = np.zeros((nz, nz))
    f = np.zeros(nz)
    q_diag = _pose_weight_diagonal(model, config.w2, config.w2)
    for k in range(1, N + 1):
        _add_quadratic(P, f, maps[k], offsets[k], q_diag, xi_ref_window[k])
    for k in range(N):
        sl = slice(k * nu, (k + 1) * nu)
        P[sl, sl] += 2.0 * config.w3 * np.eye(nu)
        f[sl] += -2.0 * config.w3 * u_ref_window[k]

    rows, rhs = [], []
    for col in range(nz):
        row = np.zeros(nz)
        row[col] = -1.0
        rows.append(row)
        rhs.append(-config.u_min)
    z_idx = model.z_index(0)
    for k in range(1, N + 1):
        rows.append(-maps[k][z_idx])
        rhs.append(offsets[k][z_idx] - config.w1)

    qp = numopt.QpProblem(P, f, Ain=np.array(rows), bin=np.array(rhs))
    return CftocProblem(
        qp=qp, horizon=N, nx=nx, nu=nu, n_epigraph=0,
        state_offsets=offsets, state_maps=maps,
        n_decision_inputs=N,
        formulation_variable_count=(N + 1) * nx + N * nu)


@dataclass
class RunSettings:
    """Closed-loop run parameters; dt_control must be a multiple of dt_sim."""

    duration: float
    dt_sim: float
    dt_control: float
    integrator: str = "euler"
    noise: NoiseModel | None = None
    xi0: np.ndarray | None = None
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.duration <= 0 or self.dt_sim <= 0 or self.dt_control <= 0:
            raise ValueError("duration and timesteps must be positive")
        ratio = self.dt_control / self.dt_sim
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt_control must be an integer multiple of dt_sim")
        n_ctrl = self.duration / self.dt_control
        if abs(n_ctrl - round(n_ctrl)) > 1e-9:
            raise ValueError("dt_control must divide the duration")

    @property
    def steps_per_control(self) -> int:
        return int(round(self.dt_control / self.dt_sim))

    @property
    def n_control(self) -> int:
        return int(round(self.duration / self.dt_control))


@dataclass
class ControllerTrace:
    """Per-control-instant record of a closed-loop run.

    The last row is the terminal state after the final hold; its status is
    'terminal' and it repeats the last applied input.  Wall-clock solve
    times live only here (never in CSV output, which must be reproducible).
    """

    t: np.ndarray
    states: np.ndarray
    reference: np.ndarray
    inputs: np.ndarray
    statuses: list[str]
    solve_ms: np.ndarray
    costs: np.ndarray
    ref_inputs: np.ndarray | None = None
    flagged: bool = False
    controller: str = "none"
    model_name: str = ""

    def __len__(self):
        return self.t.size

    def to_csv(self, path, header_lines: list[str] | None = None) -> None:
        nx = self.states.shape[1]
        nu = self.inputs.shape[1]
        with open(path, "w", newline="") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            cols = (["t"] + [f"xi_{i + 1}" for i in range(nx)]
                    + [f"xi_ref_{i + 1}" for i in range(nx)]
                    + [f"u_{i + 1}" for i in range(nu)])
            if self.ref_inputs is not None:
                cols += [f"u_ref_{i + 1}" for i in range(nu)]
            cols += ["status"]
            fh.write(",".join(cols) + "\n")
            for i in range(self.t.size):
                parts = ([f"{self.t[i]:.17g}"]
                         + [f"{v:.17g}" for v in self.states[i]]
                         + [f"{v:.17g}" for v in self.reference[i]]
                         + [f"{v:.17g}" for v in self.inputs[i]])
                if self.ref_inputs is not None:
                    parts += [f"{v:.17g}" for v in self.ref_inputs[i]]
                parts.append(self.statuses[i])
                fh.write(",".join(parts) + "\n")


def reference_inputs_for(model: SpineModel, spec: SweepSpec, dt: float,
                         horizon: int, cover: float | None = None,
                         c_min=None, stacking: str = "planar6") -> InputTrajectory:
    """Equilibrium input reference on the control grid, extended past the
    covered end by ``horizon`` samples (the pose clamps at the sweep end,
    so trailing solves repeat).  ``cover`` sets the grid extent; default is
    the sweep duration."""
    n = int(round((spec.duration if cover is None else cover) / dt))
    times = np.arange(n + 1 + horizon) * dt
    states = np.array([state_at(spec, model, min(t, spec.duration)) for t in times])
    kwargs = {} if c_min is None else {"c_min": c_min}
    return generate_input_trajectory(model, times, states, stacking=stacking, **kwargs)


def run_closed_loop(model: SpineModel, controller: str, spec: SweepSpec,
                    config, settings: RunSettings,
                    input_reference: InputTrajectory | None = None) -> ControllerTrace:
    """Simulate the receding-horizon loop against the nonlinear dynamics.

    ``controller`` is one of 'smoothing', 'tracking', 'open-loop-is', or
    'none' (hold rest lengths equal to the initial cable lengths).  On a
    failed solve the previous input is held and the run is flagged.
    """
    if controller not in ("smoothing", "tracking", "open-loop-is", "none"):
        raise ValueError(f"unknown controller '{controller}'")
    n_ctrl = settings.n_control
    hold = settings.steps_per_control
    dtc = settings.dt_control

    if controller in ("tracking", "open-loop-is") and input_reference is None:
        input_reference = reference_inputs_for(model, spec, dtc,
                                               getattr(config, "N", 0) + 1,
                                               cover=settings.duration)
    xi = (np.asarray(settings.xi0, dtype=float).copy()
          if settings.xi0 is not None else state_at(spec, model, 0.0))
    rng = settings.noise.make_rng() if settings.noise is not None else None

    u_prev = np.zeros(model.s)
    u_hold = None  # fallback input when a solve fails
    ts, states, refs, inputs, statuses, solve_ms, costs, ref_inputs = \
        [], [], [], [], [], [], [], []
    flagged = False

    def ref_state(t: float) -> np.ndarray:
        return state_at(spec, model, min(t, spec.duration))

    for i in range(n_ctrl):
        t = i * dtc
        xi_ref_now = ref_state(t)
        u_ref_now = input_reference.u[min(i, len(input_reference) - 1)] \
            if input_reference is not None else np.zeros(model.s)

        status = "held"
        cost = np.nan
        ms = 0.0
        if controller == "none":
            if u_hold is None:
                u_hold = cable_state(model, xi, np.zeros(model.s))[1]
            u_apply = u_hold
            status = "constant"
        elif controller == "open-loop-is":
            u_apply = u_ref_now
            status = "open-loop"
        else:
            try:
                t0 = time.perf_counter()
                lin = linearize(model, xi, u_prev, settings.fd_step)
                window = np.array([ref_state(t + k * dtc)
                                   for k in range(config.N + 1)])
                disc = discretize(lin, dtc, config.discretization)
                if controller == "smoothing":
                    prob = build_cftoc_smoothing(model, config, disc, xi,
                                                 u_prev, window)
                else:
                    idx = np.minimum(np.arange(i, i + config.N),
                                     len(input_reference) - 1)
                    prob = build_cftoc_tracking(model, config, disc, xi,
                                                window, input_reference.u[idx])
                sol = numopt.solve_qp(prob.qp)
                ms = (time.perf_counter() - t0) * 1e3
                if sol.status == numopt.OPTIMAL:
                    u_apply = prob.first_input(sol.z)
                    u_apply = np.maximum(u_apply, getattr(config, "u_min", 0.0))
                    u_max = getattr(config, "u_max", None)
                    if u_max is not None:
                        u_apply = np.minimum(u_apply, u_max)
                    status = "optimal"
                    cost = sol.objective
                    u_hold = u_apply
                else:
                    status = sol.status
                    flagged = True
                    u_apply = u_hold if u_hold is not None else u_prev
            except LinearizationError:
                status = "linearization_failed"
                flagged = True
                u_apply = u_hold if u_hold is not None else u_prev

        ts.append(t)
        states.append(xi.copy())
        refs.append(xi_ref_now)
        inputs.append(np.asarray(u_apply, dtype=float).copy())
        statuses.append(status)
        solve_ms.append(ms)
        costs.append(cost)
        ref_inputs.append(u_ref_now.copy())

        try:
            for _ in range(hold):
                xi = step(model, xi, u_apply, settings.dt_sim,
                          settings.integrator, settings.noise, rng)
            diverged = not np.all(np.isfinite(xi))
            cause = None
        except (DegenerateCableError, AngleSingularityError) as bad_state:
            diverged = True
            cause = bad_state
        if diverged:
            exc = DivergenceError(
                f"state diverged during control interval {i}"
                + (f": {cause}" if cause else ""), i)
            exc.partial_trace = _make_trace(
                ts, states, refs, inputs, statuses, solve_ms, costs,
                ref_inputs if input_reference is not None else None,
                True, controller, model.name)
            raise exc from cause
        u_prev = np.asarray(u_apply, dtype=float)

    # Terminal sample after the final hold.
    tT = n_ctrl * dtc
    ts.append(tT)
    states.append(xi.copy())
    refs.append(ref_state(tT))
    inputs.append(u_prev.copy())
    statuses.append("terminal")
    solve_ms.append(0.0)
    costs.append(np.nan)
    ref_inputs.append(input_reference.u[min(n_ctrl, len(input_reference) - 1)].copy()
                      if input_reference is not None else np.zeros(model.s))

    return _make_trace(ts, states, refs, inputs, statuses, solve_ms, costs,
                       ref_inputs if input_reference is not None else None,
                       flagged, controller, model.name)


def _make_trace(ts, states, refs, inputs, statuses, solve_ms, costs,
                ref_inputs, flagged, controller, model_name) -> ControllerTrace:
    return ControllerTrace(
        t=np.array(ts), states=np.array(states), reference=np.array(refs),
        inputs=np.array(inputs), statuses=list(statuses),
        solve_ms=np.array(solve_ms), costs=np.array(costs),
        ref_inputs=np.array(ref_inputs) if ref_inputs is not None else None,
        flagged=flagged, controller=controller, model_name=model_name)


def error_metrics(trace: ControllerTrace, model: SpineModel,
                  discard_fraction: float = 0.0) -> dict:
    """Tracking-error summary: per pose coordinate max/mean/final (cm for
    translations, degrees for angles) and per-body COM path error (cm).

    ``discard_fraction`` drops that share of leading samples before the
    max/mean aggregation (initial-transient exclusion); final values always
    come from the last sample.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    err = trace.states - trace.reference
    start = int(np.floor(discard_fraction * len(trace)))
    start = min(start, len(trace) - 1)
    metrics: dict = {"per_state": {}, "com_path_cm": {}, "t_start": float(trace.t[start])}
    coord_names_2d = ("x", "z", "gamma")
    coord_names_3d = ("x", "y", "z", "theta", "gamma", "psi")
    names = coord_names_2d if model.d == 2 else coord_names_3d
    for j in range(model.n_moving):
        sl = model.pose_slice(j)
        body = {}
        for local, name in enumerate(names):
            series = err[:, sl.start + local]
            unit = 100.0 if local < model.d else 180.0 / np.pi
            body[name] = {
                "unit": "cm" if local < model.d else "deg",
                "max": float(np.max(np.abs(series[start:])) * unit),
                "mean": float(np.mean(np.abs(series[start:])) * unit),
                "final": float(abs(series[-1]) * unit),
            }
        metrics["per_state"][f"body_{j + 1}"] = body
        pos_err = err[:, sl.start:sl.start + model.d]
        dist = np.linalg.norm(pos_err, axis=1) * 100.0
        metrics["com_path_cm"][f"body_{j + 1}"] = {
            "max": float(np.max(dist[start:])),
            "mean": float(np.mean(dist[start:])),
            "final": float(dist[-1]),
        }
    return metrics


def format_metrics(metrics: dict) -> str:
    lines = [f"transient discarded before t = {metrics['t_start']:.6g} s"]
    for body, coords in metrics["per_state"].items():
        for name, vals in coords.items():
            lines.append(
                f"{body} {name:>6}: max {vals['max']:.6g} {vals['unit']}, "
                f"mean {vals['mean']:.6g} {vals['unit']}, "
                f"final {vals['final']:.6g} {vals['unit']}")
    for body, vals in metrics["com_path_cm"].items():
        lines.append(
            f"{body} COM path: max {vals['max']:.6g} cm, "
            f"mean {vals['mean']:.6g} cm, final {vals['final']:.6g} cm")
    return "\n".join(lines) + "\n"
