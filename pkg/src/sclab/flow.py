"""Coupled metric/potential flow and its pointwise identities.

The system evolves the metric by -2 Ric and the potential by the heat
equation.  Along it the stabilized scalar satisfies
(d/dt - Lap) S = 2 |Ric - D^2 phi|^2, which is what the residual and
monotonicity checks below verify; the forcing is a squared norm, so
inf S cannot decrease under the explicit schemes within their CFL
bound.

Explicit Euler and midpoint steppers only: identity checks want plain
state sequences that can be differenced in time, and desk-scale runs
do not need implicit solvers.
"""

import os
from dataclasses import dataclass

import numpy as np

from .charts import ScalarField, TensorField, diff_array, write_snapshot
from .curvature import (
    CurvatureBundle,
    check_positive_definite,
    curvature_bundle,
    f_functional,
    potential_derivatives,
    stabilized_scalar,
)

CFL_FACTOR = 0.2


@dataclass(frozen=True)
class FlowState:
    """One instant of the coupled flow with its derived quantities.

    The bundle and stabilized scalar are recomputed from (metric, phi)
    whenever a state is built; nothing is ever patched in place.
    """

    t: float
    metric: TensorField
    phi: ScalarField
    bundle: CurvatureBundle
    stabilized: ScalarField


def make_flow_state(t: float, metric: TensorField,
                    phi: ScalarField) -> FlowState:
    if phi.grid != metric.grid:
        raise ValueError("potential and metric live on different grids")
    try:
        check_positive_definite(metric)
    except ValueError as exc:
        raise RuntimeError(
            f"flow state at t = {t:.6g} is not a metric: {exc}") from exc
    bundle = curvature_bundle(metric)
    s = stabilized_scalar(metric, phi, bundle=bundle)
    return FlowState(float(t), metric, phi, bundle, s)


def cfl_bound(state: FlowState) -> float:
    """Largest admissible explicit step for the current metric."""
    h_min = min(state.metric.grid.spacing)
    return CFL_FACTOR * h_min * h_min / np.abs(state.bundle.inverse).max()


def _slopes(state: FlowState):
    ric_rate = -2.0 * state.bundle.ricci.values
    pot = potential_derivatives(state.bundle, state.phi)
    return ric_rate, pot.laplacian.values


def step_coupled_flow(state: FlowState, dt: float,
                      scheme: str = "euler") -> FlowState:
    bound = cfl_bound(state)
    if dt > bound:
        raise ValueError(f"dt = {dt:.3e} violates the CFL bound "
                         f"{bound:.3e} at t = {state.t:.6g}")
    g_rate, phi_rate = _slopes(state)
    if scheme == "euler":
        pass
    elif scheme == "midpoint":
        half = make_flow_state(
            state.t + 0.5 * dt,
            TensorField(state.metric.grid, 2,
                        state.metric.values + 0.5 * dt * g_rate),
            ScalarField(state.phi.grid,
                        state.phi.values + 0.5 * dt * phi_rate))
        g_rate, phi_rate = _slopes(half)
    else:
        raise ValueError(f"unknown scheme {scheme!r}; "
                         "use 'euler' or 'midpoint'")
    metric = TensorField(state.metric.grid, 2,
                         state.metric.values + dt * g_rate)
    phi = ScalarField(state.phi.grid, state.phi.values + dt * phi_rate)
    return make_flow_state(state.t + dt, metric, phi)


@dataclass(frozen=True)
class FlowTrajectory:
    states: tuple
    dt: float
    scheme_order: int


def run_flow(initial: FlowState, dt: float, steps: int,
             scheme: str = "euler", snapshot_every: int = 0,
             snapshot_dir=None) -> FlowTrajectory:
    """Advance the coupled system, optionally checkpointing states."""
    if steps < 1:
        raise ValueError("need at least one step")
    states = [initial]
    for k in range(steps):
        states.append(step_coupled_flow(states[-1], dt, scheme))
        if snapshot_every and (k + 1) % snapshot_every == 0:
            state = states[-1]
            write_snapshot(
                os.path.join(snapshot_dir, f"state_{k + 1:06d}.snap"),
                state.metric.grid,
                {"metric": state.metric, "phi": state.phi})
    order = 1 if scheme == "euler" else 2
    return FlowTrajectory(tuple(states), float(dt), order)


def _tensor_norm_sq(inverse: np.ndarray, tensor: np.ndarray) -> np.ndarray:
    """|T|^2 = g^{ia} g^{jb} T_ij T_ab for a symmetric 2-tensor."""
    return np.einsum("...ia,...jb,...ij,...ab->...", inverse, inverse,
                     tensor, tensor, optimize=False)


def ricci_hessian_gap(state: FlowState) -> np.ndarray:
    """Pointwise components of Ric - D^2 phi, the rigidity defect."""
    pot = potential_derivatives(state.bundle, state.phi)
    return state.bundle.ricci.values - pot.hessian.values


def evolution_identity_residual(traj: FlowTrajectory,
                                index: int) -> ScalarField:
    """dS/dt - Lap S - 2|Ric - D^2 phi|^2 at one interior state.

    The time slope is a centered difference of the cached stabilized
    scalars of the neighboring states; all spatial terms come from the
    indexed state alone.
    """
    if not 1 <= index <= len(traj.states) - 2:
        raise ValueError(f"index {index} needs both neighbors; trajectory "
                         f"has {len(traj.states)} states")
    prev_s = traj.states[index - 1].stabilized.values
    next_s = traj.states[index + 1].stabilized.values
    rate = (next_s - prev_s) / (2.0 * traj.dt)

    state = traj.states[index]
    lap_s = potential_derivatives(state.bundle,
                                  state.stabilized).laplacian.values
    gap = ricci_hessian_gap(state)
    forcing = 2.0 * _tensor_norm_sq(state.bundle.inverse, gap)
    return ScalarField(state.metric.grid, rate - lap_s - forcing)


@dataclass(frozen=True)
class MonotonicityReport:
    """Per-state series for the maximum-principle and rigidity checks.

    violations lists indices k where inf S dropped by more than 1e-8
    from state k to k+1; rigidity marks states whose Ric - D^2 phi gap
    is below the given tolerance (the equality mechanism).
    """

    times: np.ndarray
    inf_s: np.ndarray
    f_values: np.ndarray
    gap_norms: np.ndarray
    violations: tuple
    rigidity: np.ndarray

    @property
    def monotone(self) -> bool:
        return not self.violations


def monotonicity_report(traj: FlowTrajectory,
                        rigidity_tol: float = 1e-8) -> MonotonicityReport:
    if len(traj.states) < 2:
        raise ValueError("need at least two states")
    times = np.array([s.t for s in traj.states])
    inf_s = np.array([s.stabilized.values.min() for s in traj.states])
    f_vals = np.array([f_functional(s.metric, s.phi, bundle=s.bundle)
                       for s in traj.states])
    gaps = np.array([np.abs(ricci_hessian_gap(s)).max()
                     for s in traj.states])
    violations = tuple(int(k) for k in range(len(traj.states) - 1)
                       if inf_s[k + 1] < inf_s[k] - 1e-8)
    return MonotonicityReport(times, inf_s, f_vals, gaps, violations,
                              gaps <= rigidity_tol)


def adjoint_supersolution_residual(state: FlowState) -> ScalarField:
    """Pointwise check of the backward-density identity at one state.

    With P = S e^{phi} and the backward slope
    phi_dot = -Lap phi - |grad phi|^2 + R, the claim is
    (d/dt + Lap - R) P = 2 e^{phi} |Ric - D^2 phi|^2.
    Every time derivative is expanded by the chain rule through the
    prescribed metric motion -2 Ric: the scalar curvature moves by
    Lap R + 2|Ric|^2, the Laplacian of a fixed function picks up
    2 <Ric, D^2 .>, and |grad phi|^2 picks up 2 Ric(grad, grad); no
    backward equation is integrated.  The sign pattern is pinned by the
    conformal-torus refinement check: flipping the weight or the slope
    leaves an O(1) floor there while flat and round data still pass.
    """
    grid = state.metric.grid
    bundle = state.bundle
    inv = bundle.inverse
    ric = bundle.ricci.values
    r = bundle.scalar.values
    pot = potential_derivatives(bundle, state.phi)

    def grad(values):
        return np.stack([diff_array(values, grid, a, 1)
                         for a in range(grid.dim)], axis=-1)

    def pair(da, db):
        return np.einsum("...ij,...i,...j->...", inv, da, db,
                         optimize=False)

    phi_dot = -pot.laplacian.values - pot.gradient_sq.values + r
    phi_dot_pot = potential_derivatives(
        bundle, ScalarField(grid, phi_dot))

    ric_up_grad = np.einsum("...ia,...jb,...ij->...ab", inv, inv, ric,
                            optimize=False)
    ric_hess = np.einsum("...ab,...ab->...", ric_up_grad,
                         pot.hessian.values, optimize=False)
    ric_grad_grad = np.einsum("...ab,...a,...b->...", ric_up_grad,
                              pot.gradient, pot.gradient, optimize=False)
    ric_norm_sq = np.einsum("...ab,...ab->...", ric_up_grad, ric,
                            optimize=False)

    lap_r = potential_derivatives(bundle, bundle.scalar).laplacian.values

    # dS/dt for S = -2 Lap phi - |grad phi|^2 + R under the coupled
    # motion, with the backward slope substituted for phi_dot
    s_dot = (-2.0 * (phi_dot_pot.laplacian.values + 2.0 * ric_hess)
             - (2.0 * ric_grad_grad
                + 2.0 * pair(grad(phi_dot), pot.gradient))
             + lap_r + 2.0 * ric_norm_sq)

    s = state.stabilized.values
    s_pot = potential_derivatives(bundle, state.stabilized)
    lap_p_over_weight = (s_pot.laplacian.values
                         + 2.0 * pair(s_pot.gradient, pot.gradient)
                         + s * (pot.gradient_sq.values
                                + pot.laplacian.values))

    forcing = 2.0 * _tensor_norm_sq(inv, ric - pot.hessian.values)

    weight = np.exp(state.phi.values)
    residual = weight * (s_dot + s * phi_dot + lap_p_over_weight - r * s
                         - forcing)
    return ScalarField(grid, residual)


@dataclass(frozen=True)
class SphereProfile:
    """Rotationally symmetric metric a dtheta^2 + b dphi^2 on staggered
    latitude nodes (k + 1/2) pi / n.

    Chart flows on latitude bands are not explicitly stable at the
    one-sided boundary rows, so sphere flows run on this closed profile
    instead; the two-node-per-pole staggering never evaluates at the
    poles themselves.
    """

    t: float
    theta: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @property
    def spacing(self) -> float:
        return float(self.theta[1] - self.theta[0])


def round_profile(lat_res: int, radius: float = 1.0) -> SphereProfile:
    h = np.pi / lat_res
    theta = (np.arange(lat_res) + 0.5) * h
    a = np.full(lat_res, radius * radius)
    return SphereProfile(0.0, theta, a, radius * radius * np.sin(theta) ** 2)


def _pole_ghost(values: np.ndarray, odd: bool) -> np.ndarray:
    """Extend by one node past each pole using parity.

    For a smooth rotationally symmetric metric the circumference radius
    v = sqrt(b) is an odd function of the latitude distance to either
    pole and a is even; reflecting with the matching sign keeps the
    centered stencils second order in the pole cells, where one-sided
    rows or naive flux pinning degrade to O(1).
    """
    sign = -1.0 if odd else 1.0
    return np.concatenate(([sign * values[0]], values, [sign * values[-1]]))


def profile_scalar_curvature(p: SphereProfile) -> np.ndarray:
    """R = 2K with K = -(v''/a - v'a'/(2a^2))/v, v = sqrt(b)."""
    h = p.spacing
    v = _pole_ghost(np.sqrt(p.b), odd=True)
    a = _pole_ghost(p.a, odd=False)
    v1 = (v[2:] - v[:-2]) / (2.0 * h)
    v2 = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
    a1 = (a[2:] - a[:-2]) / (2.0 * h)
    k = -(v2 / p.a - v1 * a1 / (2.0 * p.a ** 2)) / np.sqrt(p.b)
    return 2.0 * k


def profile_laplacian(p: SphereProfile, values: np.ndarray) -> np.ndarray:
    """Laplace-Beltrami of an even rotationally symmetric function.

    The pole fluxes vanish because sqrt(ab) does; evenness of the data
    is what makes that exact rather than one-sided.
    """
    h = p.spacing
    root = np.sqrt(p.a * p.b)
    mid_root = 0.5 * (root[1:] + root[:-1])
    mid_a = 0.5 * (p.a[1:] + p.a[:-1])
    flux = np.zeros(values.size + 1)
    flux[1:-1] = mid_root * (values[1:] - values[:-1]) / (h * mid_a)
    return (flux[1:] - flux[:-1]) / (h * root)


def profile_cfl_bound(p: SphereProfile) -> float:
    return CFL_FACTOR * p.spacing ** 2 * p.a.min()


def step_profile_flow(p: SphereProfile, dt: float) -> SphereProfile:
    bound = profile_cfl_bound(p)
    if dt > bound:
        raise ValueError(f"dt = {dt:.3e} violates the profile CFL bound "
                         f"{bound:.3e} at t = {p.t:.6g}")
    k = 0.5 * profile_scalar_curvature(p)
    a = p.a * (1.0 - 2.0 * dt * k)
    b = p.b * (1.0 - 2.0 * dt * k)
    if a.min() <= 0.0 or b.min() <= 0.0:
        node = int(np.argmin(np.minimum(a, b)))
        raise RuntimeError(f"profile flow lost positivity at node {node} "
                           f"(theta = {p.theta[node]:.6g}) at "
                           f"t = {p.t + dt:.6g}")
    return SphereProfile(p.t + dt, p.theta, a, b)


def run_profile_flow(p: SphereProfile, dt: float,
                     steps: int) -> tuple:
    out = [p]
    for _ in range(steps):
        out.append(step_profile_flow(out[-1], dt))
    return tuple(out)


def profile_state(p: SphereProfile, lon_res: int = 8) -> FlowState:
    """Lift a profile to a 2-D staggered chart for static checks only."""
    from .charts import make_chart

    n = p.theta.size
    grid = make_chart(2, (n, lon_res),
                      (np.pi * (n - 1) / n, 2.0 * np.pi),
                      ("boundary", "periodic"),
                      origin=(p.theta[0], 0.0))
    vals = np.zeros(grid.shape + (2, 2))
    vals[..., 0, 0] = p.a[:, None]
    vals[..., 1, 1] = p.b[:, None]
    metric = TensorField(grid, 2, vals)
    phi = ScalarField(grid, np.zeros(grid.shape))
    return make_flow_state(p.t, metric, phi)


def write_trajectory_series(traj: FlowTrajectory, path) -> None:
    """Per-state series; identity residual is blank at the endpoints."""
    report = monotonicity_report(traj)
    rows = ["t,inf_S,F,max_ricci_hessian_gap,identity_residual_maxnorm"]
    for k in range(len(traj.states)):
        if 1 <= k <= len(traj.states) - 2:
            res = np.abs(evolution_identity_residual(traj, k).values).max()
            tail = f"{res:.17g}"
        else:
            tail = "nan"
        rows.append(",".join([f"{report.times[k]:.17g}",
                              f"{report.inf_s[k]:.17g}",
                              f"{report.f_values[k]:.17g}",
                              f"{report.gap_norms[k]:.17g}", tail]))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")
