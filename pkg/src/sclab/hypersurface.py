"""Graph hypersurfaces inside a chart: extrinsic geometry and identities.

A hypersurface is the graph of a height field over the chart obtained by
deleting one ambient axis.  Ambient quantities are carried to the graph
by linear interpolation along that single axis (the slice coordinates
stay on-node), then differentiated on the slice grid, so every term in
an identity shares the same second-order accuracy budget.

Sign conventions: h(X, Y) = g(grad_X nu, Y), so the round sphere with
outward normal has H = +2/r, and a convex boundary circle of radius r
has curvature +1/r.
"""

from dataclasses import dataclass

import numpy as np

from .charts import (
    BOUNDARY,
    ChartGrid,
    ScalarField,
    TensorField,
    diff_array,
    integrate,
    sample_field,
)
from .curvature import (
    CurvatureBundle,
    check_positive_definite,
    curvature_bundle,
    potential_derivatives,
)


@dataclass(frozen=True)
class GraphSampler:
    """Linear interpolation of ambient node data along one axis.

    For boundary axes the height must stay inside the node range; for
    periodic axes it wraps.  Index arrays live on the slice grid.
    """

    ambient: ChartGrid
    axis: int
    index_low: np.ndarray
    index_high: np.ndarray
    weight_high: np.ndarray

    def take(self, values: np.ndarray) -> np.ndarray:
        """Sample an ambient nodal array at the graph points.

        Trailing component axes ride along untouched.
        """
        base = np.indices(self.index_low.shape)
        rows = list(base)
        rows.insert(self.axis, self.index_low)
        low = values[tuple(rows)]
        rows[self.axis] = self.index_high
        high = values[tuple(rows)]
        w = self.weight_high.reshape(
            self.weight_high.shape + (1,) * (values.ndim - self.ambient.dim))
        return (1.0 - w) * low + w * high


def _make_sampler(ambient: ChartGrid, axis: int,
                  heights: np.ndarray) -> GraphSampler:
    h = ambient.spacing[axis]
    n = ambient.resolution[axis]
    t = (heights - ambient.origin[axis]) / h
    if ambient.topology[axis] == BOUNDARY:
        slack = 1e-9
        if np.any(t < -slack) or np.any(t > n - 1 + slack):
            raise ValueError(
                f"graph leaves the ambient chart along axis {axis}: "
                f"height range [{heights.min():.6g}, {heights.max():.6g}] "
                f"vs node range [{ambient.origin[axis]:.6g}, "
                f"{ambient.origin[axis] + ambient.extent[axis]:.6g}]")
        t = np.clip(t, 0.0, float(n - 1))
        low = np.minimum(np.floor(t).astype(int), n - 2)
        high = low + 1
    else:
        cell = np.floor(t).astype(int)
        low = cell % n
        high = (cell + 1) % n
        t = t - np.floor(t) + low  # weight below is t - low
    return GraphSampler(ambient, axis, low, high, t - low)


@dataclass(frozen=True)
class HypersurfaceEmbedding:
    """Graph of a height field, with its first and second fundamental data.

    normal / normal_covector are the g-unit normal in ambient components
    (contravariant / covariant).  tangent_frame holds the pushforward
    E^i_a of the slice coordinate vectors.  boundary_normal maps a
    boundary slice axis and side (0 low, 1 high) to the outward unit
    conormal of that face inside the hypersurface, in slice components.
    """

    ambient_grid: ChartGrid
    ambient_metric: TensorField
    ambient_bundle: CurvatureBundle
    graph_axis: int
    orientation: int
    slice_grid: ChartGrid
    graph_height: ScalarField
    sampler: GraphSampler
    tangent_frame: np.ndarray
    normal: np.ndarray
    normal_covector: np.ndarray
    induced_metric: TensorField
    induced_inverse: np.ndarray
    second_fundamental: TensorField
    mean_curvature: ScalarField
    boundary_normal: dict

    def sample(self, values) -> np.ndarray:
        """Ambient nodal array (or field) sampled at the graph points."""
        if isinstance(values, (ScalarField, TensorField)):
            values = values.values
        return self.sampler.take(values)


def embed_graph(metric: TensorField, height, graph_axis: int | None = None,
                orientation: int = 1,
                bundle: CurvatureBundle | None = None) -> HypersurfaceEmbedding:
    """Build the graph hypersurface x_axis = height(slice coordinates).

    orientation +1 points the unit normal toward increasing graph
    coordinate, -1 toward decreasing.
    """
    grid = metric.grid
    d = grid.dim
    if graph_axis is None:
        graph_axis = d - 1
    if not 0 <= graph_axis < d:
        raise ValueError(f"graph axis {graph_axis} out of range for dim {d}")
    if orientation not in (1, -1):
        raise ValueError(f"orientation must be +1 or -1, got {orientation}")
    if bundle is None:
        bundle = curvature_bundle(metric)

    slice_grid = grid.drop_axis(graph_axis)
    if callable(height):
        height = sample_field(slice_grid, height)
    if height.grid != slice_grid:
        raise ValueError("height field does not live on the slice grid "
                         "of the chosen graph axis")
    kept = [a for a in range(d) if a != graph_axis]
    ds = d - 1

    w = height.values
    sampler = _make_sampler(grid, graph_axis, w)

    dw = np.stack([diff_array(w, slice_grid, a, 1) for a in range(ds)],
                  axis=-1)
    d2w = np.zeros(slice_grid.shape + (ds, ds))
    for a in range(ds):
        for b in range(a, ds):
            if a == b:
                d2w[..., a, a] = diff_array(w, slice_grid, a, 2)
            else:
                mixed = diff_array(dw[..., a], slice_grid, b, 1)
                d2w[..., a, b] = mixed
                d2w[..., b, a] = mixed

    frame = np.zeros(slice_grid.shape + (d, ds))
    for a, amb in enumerate(kept):
        frame[..., amb, a] = 1.0
        frame[..., graph_axis, a] = dw[..., a]

    # invert the interpolated metric rather than interpolating the
    # inverse: the two differ at off-node points, and the unit-normal
    # normalization must be consistent with g_at to machine precision
    g_at = sampler.take(metric.values)
    inv_at = np.linalg.inv(g_at)
    induced = np.einsum("...ij,...ia,...jb->...ab", g_at, frame, frame,
                        optimize=False)
    induced = TensorField(slice_grid, 2, 0.5 * (induced + np.swapaxes(induced, -1, -2)))
    check_positive_definite(induced)
    induced_inv = np.linalg.inv(induced.values)

    co = np.zeros(slice_grid.shape + (d,))
    co[..., graph_axis] = 1.0
    for a, amb in enumerate(kept):
        co[..., amb] = -dw[..., a]
    co *= float(orientation)
    norm = np.sqrt(np.einsum("...ij,...i,...j->...", inv_at, co, co,
                             optimize=False))
    co = co / norm[..., None]
    nu = np.einsum("...ij,...j->...i", inv_at, co, optimize=False)

    unit_gap = np.abs(np.einsum("...ij,...i,...j->...", g_at, nu, nu,
                                optimize=False) - 1.0)
    tangency = np.abs(np.einsum("...i,...ia->...a", co, frame,
                                optimize=False))
    if unit_gap.max() > 1e-10 or tangency.max() > 1e-10:
        raise ValueError("unit-normal construction lost orthonormality; "
                         f"unit gap {unit_gap.max():.3e}, "
                         f"tangency {tangency.max():.3e}")

    gamma_at = sampler.take(bundle.christoffel)
    second = -(co[..., graph_axis][..., None, None] * d2w
               + np.einsum("...k,...kij,...ia,...jb->...ab", co, gamma_at,
                           frame, frame, optimize=False))
    second = TensorField(slice_grid, 2,
                         0.5 * (second + np.swapaxes(second, -1, -2)))

    mean = np.einsum("...ab,...ab->...", induced_inv, second.values,
                     optimize=False)
    solve_trace = np.trace(np.linalg.solve(induced.values, second.values),
                           axis1=-2, axis2=-1)
    if np.max(np.abs(mean - solve_trace)) > 1e-10:
        raise ValueError("mean-curvature trace disagrees between the "
                         "inverse and solve routes")

    boundary_normal = {}
    for a in range(ds):
        if slice_grid.topology[a] != BOUNDARY:
            continue
        for side, row, sign in ((0, 0, -1.0), (1, -1, 1.0)):
            face = [slice(None)] * ds
            face[a] = row
            inv_face = induced_inv[tuple(face)]
            eta = sign * inv_face[..., :, a] / np.sqrt(inv_face[..., a, a])[..., None]
            boundary_normal[(a, side)] = eta

    return HypersurfaceEmbedding(
        grid, metric, bundle, graph_axis, orientation, slice_grid, height,
        sampler, frame, nu, co, induced, induced_inv, second,
        ScalarField(slice_grid, mean), boundary_normal)


def weighted_mean_curvature(emb: HypersurfaceEmbedding,
                            phi: ScalarField) -> ScalarField:
    """H + <grad phi, nu> at each graph node."""
    if phi.grid != emb.ambient_grid:
        raise ValueError("log-density lives on a different ambient grid")
    dphi = np.stack([diff_array(phi.values, emb.ambient_grid, i, 1)
                     for i in range(emb.ambient_grid.dim)], axis=-1)
    normal_part = np.einsum("...i,...i->...", emb.sample(dphi), emb.normal,
                            optimize=False)
    return ScalarField(emb.slice_grid,
                       emb.mean_curvature.values + normal_part)


def second_fundamental_norm_sq(emb: HypersurfaceEmbedding) -> np.ndarray:
    h = emb.second_fundamental.values
    gi = emb.induced_inverse
    return np.einsum("...ac,...bd,...ab,...cd->...", gi, gi, h, h,
                     optimize=False)


def gauss_identity_sides(emb: HypersurfaceEmbedding, rho: ScalarField,
                         u: ScalarField) -> tuple[ScalarField, ScalarField]:
    """Both sides of the weighted Gauss identity, evaluated separately.

    The two sides share no finite-difference work: the left side runs
    through ambient and intrinsic curvature pipelines, the right side
    through the stability-operator terms, so their agreement is a real
    cross-check rather than an algebraic tautology.
    """
    if rho.grid != emb.ambient_grid:
        raise ValueError("density lives on a different ambient grid")
    if u.grid != emb.slice_grid:
        raise ValueError("surface weight lives on a different slice grid")
    if np.any(rho.values <= 0.0):
        raise ValueError("density must be positive on the ambient chart")
    if np.any(u.values <= 0.0):
        raise ValueError("surface weight must be positive")

    amb = emb.ambient_bundle
    log_rho = ScalarField(emb.ambient_grid, np.log(rho.values))
    amb_pot = potential_derivatives(amb, log_rho)

    rho_s = emb.sample(rho)
    log_rho_s = np.log(rho_s)
    log_u = np.log(u.values)
    log_v = log_rho_s + log_u

    sb = curvature_bundle(emb.induced_metric)
    p_v = potential_derivatives(sb, ScalarField(emb.slice_grid, log_v))
    p_u = potential_derivatives(sb, u)
    p_logu = potential_derivatives(sb, ScalarField(emb.slice_grid, log_u))
    p_logrho = potential_derivatives(sb, ScalarField(emb.slice_grid, log_rho_s))

    weighted_h = emb.mean_curvature.values + np.einsum(
        "...i,...i->...", emb.sample(amb_pot.gradient), emb.normal,
        optimize=False)
    h_sq = second_fundamental_norm_sq(emb)

    lhs = (-2.0 * p_v.laplacian.values
           - p_v.gradient_sq.values
           + sb.scalar.values
           - weighted_h ** 2
           + 2.0 * emb.sample(amb_pot.laplacian)
           + emb.sample(amb_pot.gradient_sq)
           - emb.sample(amb.scalar)
           - p_logu.gradient_sq.values
           - h_sq)

    ric_nn = np.einsum("...ij,...i,...j->...", emb.sample(amb.ricci),
                       emb.normal, emb.normal, optimize=False)
    hess_nn = np.einsum("...ij,...i,...j->...", emb.sample(amb_pot.hessian),
                        emb.normal, emb.normal, optimize=False)
    cross = np.einsum("...ab,...a,...b->...", sb.inverse,
                      p_logrho.gradient, p_logu.gradient, optimize=False)

    rhs = (-2.0 * p_u.laplacian.values / u.values
           - 2.0 * ric_nn * u.values
           - 2.0 * h_sq
           + hess_nn
           - cross)
    return (ScalarField(emb.slice_grid, lhs),
            ScalarField(emb.slice_grid, rhs))


def gauss_identity_residual(emb: HypersurfaceEmbedding, rho: ScalarField,
                            u: ScalarField) -> ScalarField:
    """Left minus right side of the weighted Gauss identity per node."""
    lhs, rhs = gauss_identity_sides(emb, rho, u)
    return ScalarField(emb.slice_grid, lhs.values - rhs.values)


def weighted_area(emb: HypersurfaceEmbedding,
                  phi: ScalarField | None = None) -> float:
    """Integral of e^phi over the hypersurface in its induced metric."""
    if phi is None:
        density = np.ones(emb.slice_grid.shape)
    else:
        if phi.grid != emb.ambient_grid:
            raise ValueError("log-density lives on a different ambient grid")
        density = np.exp(emb.sample(phi))
    return integrate(ScalarField(emb.slice_grid, density),
                     emb.induced_metric)


@dataclass(frozen=True)
class GraphFoliation:
    """Family of graph hypersurfaces over a shared slice grid.

    lapse is the normal speed <nu, d/dt graph>, required positive.
    weighted_H is H + <grad phi, nu> per slice, for the log-density the
    foliation was built with (None means phi = 0).
    """

    times: tuple
    slices: tuple
    lapse: tuple
    weighted_H: tuple
    log_density: ScalarField | None


def make_graph_foliation(metric: TensorField, times, heights,
                         graph_axis: int | None = None, orientation: int = 1,
                         phi: ScalarField | None = None) -> GraphFoliation:
    times = [float(t) for t in times]
    if len(times) != len(heights):
        raise ValueError(f"{len(times)} times against {len(heights)} heights")
    if len(times) < 3:
        raise ValueError("a foliation needs at least 3 slices")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("slice parameters must be strictly increasing")

    bundle = curvature_bundle(metric)
    slices = [embed_graph(metric, h, graph_axis, orientation, bundle=bundle)
              for h in heights]

    stack = np.stack([s.graph_height.values for s in slices])
    speed = np.gradient(stack, np.asarray(times), axis=0, edge_order=2)

    lapse = []
    weighted = []
    for k, emb in enumerate(slices):
        f = speed[k] * emb.normal_covector[..., emb.graph_axis]
        if np.any(f <= 0.0):
            raise ValueError(f"lapse is not positive on slice {k} "
                             f"(t = {times[k]:.6g}); flip the orientation "
                             "or reorder the slices")
        lapse.append(ScalarField(emb.slice_grid, f))
        if phi is None:
            weighted.append(emb.mean_curvature)
        else:
            weighted.append(weighted_mean_curvature(emb, phi))
    return GraphFoliation(tuple(times), tuple(slices), tuple(lapse),
                          tuple(weighted), phi)


@dataclass(frozen=True)
class AreaVariation:
    """First-variation ledger for a foliation, one entry per slice."""

    times: np.ndarray
    area: np.ndarray
    area_rate: np.ndarray       # d(weighted area)/dt by finite differences
    variation: np.ndarray       # integral of (H + <grad phi, nu>) e^phi f
    gap: np.ndarray             # area_rate - variation


def weighted_area_variation(fol: GraphFoliation,
                            phi: ScalarField | None = None) -> AreaVariation:
    """Compare the finite-difference area rate with the variation integral.

    phi defaults to the foliation's own log-density; passing a different
    one recomputes the weighted mean curvature instead of reusing the
    stored fields, so both sides always refer to the same weight.
    """
    if phi is None:
        phi = fol.log_density
        weighted_h = [f.values for f in fol.weighted_H]
    else:
        weighted_h = [weighted_mean_curvature(emb, phi).values
                      for emb in fol.slices]

    areas = np.array([weighted_area(s, phi) for s in fol.slices])
    rate = np.gradient(areas, np.asarray(fol.times), edge_order=2)

    variation = np.empty(len(fol.slices))
    for k, emb in enumerate(fol.slices):
        density = (np.ones(emb.slice_grid.shape) if phi is None
                   else np.exp(emb.sample(phi)))
        values = weighted_h[k] * density * fol.lapse[k].values
        variation[k] = integrate(ScalarField(emb.slice_grid, values),
                                 emb.induced_metric)
    return AreaVariation(np.asarray(fol.times), areas, rate, variation,
                         rate - variation)


def write_variation_table(var: AreaVariation, path) -> None:
    rows = ["t,weighted_area,dA_dt_centered,first_variation_integral,difference"]
    for k in range(len(var.times)):
        rows.append(",".join(
            f"{x:.17g}" for x in (var.times[k], var.area[k],
                                  var.area_rate[k], var.variation[k],
                                  var.gap[k])))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")


@dataclass(frozen=True)
class FaceTrace:
    """Boundary identity sides on one face of the slice grid."""

    axis: int
    side: int
    lhs: np.ndarray   # <grad_Sigma log rho, eta> + H of the face in Sigma
    rhs: np.ndarray   # <grad phi, eta> + H of the ambient wall
    residual: np.ndarray


def boundary_trace_identity(emb: HypersurfaceEmbedding, rho: ScalarField,
                            phi: ScalarField) -> dict:
    """Residual of the boundary trace relation on every boundary face.

    Face curvatures come from recursive constant-graph embeddings: the
    face inside the hypersurface, and the matching chart wall inside the
    ambient manifold, both with outward normals.
    """
    if not emb.boundary_normal:
        raise ValueError("hypersurface has no boundary faces")
    if emb.slice_grid.dim < 2:
        raise ValueError("boundary faces of a 1-d slice are points; "
                         "no face curvature is defined")
    if rho.grid != emb.ambient_grid or phi.grid != emb.ambient_grid:
        raise ValueError("density and log-density must live on the "
                         "ambient grid")
    if np.any(rho.values <= 0.0):
        raise ValueError("density must be positive")

    ds = emb.slice_grid.dim
    kept = [a for a in range(emb.ambient_grid.dim) if a != emb.graph_axis]
    rho_s = np.log(emb.sample(rho))
    grad_rho_s = np.stack([diff_array(rho_s, emb.slice_grid, b, 1)
                           for b in range(ds)], axis=-1)
    dphi = np.stack([diff_array(phi.values, emb.ambient_grid, i, 1)
                     for i in range(emb.ambient_grid.dim)], axis=-1)
    dphi_s = emb.sample(dphi)

    out = {}
    for (a, side), eta in emb.boundary_normal.items():
        row = -1 if side else 0
        face = [slice(None)] * ds
        face[a] = row
        face = tuple(face)
        coord = emb.slice_grid.axis_coords(a)[row]
        sign = 1 if side else -1

        sub = embed_graph(emb.induced_metric,
                          lambda *ys: np.full(ys[0].shape, coord),
                          graph_axis=a, orientation=sign)
        h_face = sub.mean_curvature.values

        amb_axis = kept[a]
        wall_grid = emb.ambient_grid.drop_axis(amb_axis)
        wall_coord = emb.ambient_grid.axis_coords(amb_axis)[row]
        wall = embed_graph(emb.ambient_metric,
                           lambda *ys: np.full(ys[0].shape, wall_coord),
                           graph_axis=amb_axis, orientation=sign)
        axis_in_wall = emb.graph_axis - (1 if amb_axis < emb.graph_axis else 0)
        w_face = emb.graph_height.values[face]
        wall_sampler = _make_sampler(wall_grid, axis_in_wall, w_face)
        h_wall = wall_sampler.take(wall.mean_curvature.values)

        lhs = np.einsum("...b,...b->...", grad_rho_s[face], eta,
                        optimize=False) + h_face
        eta_amb = np.einsum("...ib,...b->...i", emb.tangent_frame[face], eta,
                            optimize=False)
        rhs = np.einsum("...i,...i->...", dphi_s[face], eta_amb,
                        optimize=False) + h_wall
        out[(a, side)] = FaceTrace(a, side, lhs, rhs, lhs - rhs)
    return out
