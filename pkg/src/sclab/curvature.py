"""Curvature assembly and stabilized scalar curvature.

The bundle path is the standard coordinate one: metric derivatives give
Christoffel symbols, their derivatives give the Ricci tensor, and the
trace gives scalar curvature, all with the chart stencils.  On top of
that sit the potential operators for a weight exponent phi and the
stabilized scalar curvature

    S = -2 lap(phi) - |grad(phi)|^2 + R,

which is the scalar curvature the warped product over phi sees in the
fiber-count limit.  `warped_residual` checks the finite-fiber statement
directly by assembling the product metric on an extended chart and
comparing its scalar curvature with the dimensional-reduction formula.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .charts import (PERIODIC, ChartGrid, ScalarField, TensorField,
                     diff_array, integrate, make_chart, node_tuple)


@dataclass(frozen=True)
class CurvatureBundle:
    """Christoffel symbols, Ricci tensor and scalar curvature of a metric."""

    grid: ChartGrid
    metric: TensorField
    inverse: np.ndarray       # g^{ij} per node
    christoffel: np.ndarray   # Gamma^k_{ij} per node, symmetric in (i, j)
    ricci: TensorField
    scalar: ScalarField


def check_positive_definite(metric: TensorField) -> None:
    """Leading-principal-minor test at every node; abort on failure."""
    d = metric.grid.dim
    g = metric.values
    for k in range(1, d + 1):
        minors = np.linalg.det(g[..., :k, :k]) if k > 1 else g[..., 0, 0]
        bad = minors <= 0.0
        if bad.any():
            node = node_tuple(np.argmax(bad), metric.grid.shape)
            raise ValueError(f"metric is not positive definite at node "
                             f"{node} (order-{k} leading minor "
                             f"{minors[node]:.3e})")


def curvature_bundle(metric: TensorField) -> CurvatureBundle:
    """Assemble Christoffels, Ricci and R from metric stencil derivatives.

    Ricci is contracted from the fully lowered Riemann tensor (second
    metric derivatives plus lowered Christoffel products) rather than
    from derivatives of the Christoffel field: near chart degeneracies
    such as lat-long polar collars the Christoffels blow up while the
    lowered products stay tame, and this form keeps the error bounded
    there instead of amplifying it by inverse metric factors.
    """
    grid = metric.grid
    d = grid.dim
    g = metric.values
    sym_gap = np.max(np.abs(g - np.swapaxes(g, -1, -2)))
    if sym_gap > 1e-12:
        raise ValueError(f"metric is not symmetric (gap {sym_gap:.3e})")
    check_positive_definite(metric)
    inv = np.linalg.inv(g)

    # dg[..., i, j, a] = d_a g_{ij}
    dg = np.stack([diff_array(g, grid, a, 1) for a in range(d)], axis=-1)
    # d2g[..., i, j, k, l] = d_k d_l g_{ij}
    d2g = np.zeros(grid.shape + (d, d, d, d))
    for k in range(d):
        for l in range(k, d):
            if k == l:
                v = diff_array(g, grid, k, 2)
            else:
                v = diff_array(diff_array(g, grid, k, 1), grid, l, 1)
            d2g[..., k, l] = v
            if l > k:
                d2g[..., l, k] = v

    gamma = np.zeros(grid.shape + (d, d, d))
    for k in range(d):
        for i in range(d):
            for j in range(i, d):
                acc = np.zeros(grid.shape)
                for l in range(d):
                    acc += inv[..., k, l] * (dg[..., l, j, i]
                                             + dg[..., i, l, j]
                                             - dg[..., i, j, l])
                gamma[..., k, i, j] = 0.5 * acc
                if j > i:
                    gamma[..., k, j, i] = gamma[..., k, i, j]

    # R_{iklm}, antisymmetric in (i, k) and in (l, m); only the i < k,
    # l < m blocks are assembled and the rest is filled in by sign.
    riemann = np.zeros(grid.shape + (d, d, d, d))
    for i in range(d):
        for k in range(i + 1, d):
            for l in range(d):
                for m in range(l + 1, d):
                    comp = 0.5 * (d2g[..., i, m, k, l] + d2g[..., k, l, i, m]
                                  - d2g[..., i, l, k, m]
                                  - d2g[..., k, m, i, l])
                    for n in range(d):
                        for p in range(d):
                            comp += g[..., n, p] * (
                                gamma[..., n, k, l] * gamma[..., p, i, m]
                                - gamma[..., n, k, m] * gamma[..., p, i, l])
                    riemann[..., i, k, l, m] = comp
                    riemann[..., k, i, l, m] = -comp
                    riemann[..., i, k, m, l] = -comp
                    riemann[..., k, i, m, l] = comp

    ric = np.einsum("...il,...iklm->...km", inv, riemann, optimize=False)
    ric = 0.5 * (ric + np.swapaxes(ric, -1, -2))

    scal = np.einsum("...ij,...ij->...", inv, ric, optimize=False)
    return CurvatureBundle(grid, metric, inv, gamma,
                           TensorField(grid, 2, ric),
                           ScalarField(grid, scal))


@dataclass(frozen=True)
class PotentialDerivatives:
    """First and second covariant derivatives of a scalar potential."""

    grid: ChartGrid
    gradient: np.ndarray      # covariant components d_a phi
    gradient_sq: ScalarField  # |grad phi|^2 = g^{ab} d_a phi d_b phi
    hessian: TensorField      # D^2 phi, the ambient covariant Hessian
    laplacian: ScalarField    # trace of the Hessian against g^{ab}


def potential_derivatives(bundle: CurvatureBundle,
                          phi: ScalarField) -> PotentialDerivatives:
    grid = bundle.grid
    d = grid.dim
    if phi.grid != grid:
        raise ValueError("potential lives on a different grid")
    p = phi.values
    dphi = np.stack([diff_array(p, grid, a, 1) for a in range(d)], axis=-1)

    hess = np.zeros(grid.shape + (d, d))
    for i in range(d):
        for j in range(i, d):
            if i == j:
                second = diff_array(p, grid, i, 2)
            else:
                second = diff_array(diff_array(p, grid, i, 1), grid, j, 1)
            corr = np.zeros(grid.shape)
            for k in range(d):
                corr += bundle.christoffel[..., k, i, j] * dphi[..., k]
            hess[..., i, j] = second - corr
            if j > i:
                hess[..., j, i] = hess[..., i, j]

    inv = bundle.inverse
    grad_sq = np.einsum("...ab,...a,...b->...", inv, dphi, dphi,
                        optimize=False)
    lap = np.einsum("...ab,...ab->...", inv, hess, optimize=False)
    return PotentialDerivatives(grid, dphi,
                                ScalarField(grid, grad_sq),
                                TensorField(grid, 2, hess),
                                ScalarField(grid, lap))


def stabilized_scalar(metric: TensorField, phi: ScalarField,
                      bundle: CurvatureBundle | None = None,
                      potential: PotentialDerivatives | None = None
                      ) -> ScalarField:
    """S = -2 lap(phi) - |grad phi|^2 + R on the metric's grid."""
    if bundle is None:
        bundle = curvature_bundle(metric)
    if potential is None:
        potential = potential_derivatives(bundle, phi)
    s = (-2.0 * potential.laplacian.values
         - potential.gradient_sq.values
         + bundle.scalar.values)
    return ScalarField(metric.grid, s)


def f_functional(metric: TensorField, phi: ScalarField,
                 bundle: CurvatureBundle | None = None) -> float:
    """Weighted total stabilized curvature: integral of S e^phi dvol."""
    s = stabilized_scalar(metric, phi, bundle=bundle)
    weighted = ScalarField(metric.grid, s.values * np.exp(phi.values))
    return integrate(weighted, metric)


@dataclass(frozen=True)
class WarpedResidual:
    residual: ScalarField   # product scalar curvature minus reduction formula
    fiber_spread: float     # max over base nodes of fiber-direction spread


FIBER_SPREAD_TOL = 1e-10


def warped_residual(metric: TensorField, phi: ScalarField, fiber_count: int,
                    fiber_res: int = 8) -> WarpedResidual:
    """Scalar-curvature defect of the torus-fiber warped product.

    Builds g + e^{2 phi / N} (flat N-torus) on a product chart, takes its
    scalar curvature with the same stencils, and subtracts

        R - 2 lap(phi) - (N + 1)/N |grad phi|^2

    pulled up from the base.  The product fields are constant along the
    fibers, so any fiber-direction spread beyond rounding means the
    product assembly is broken and the run aborts.
    """
    base = metric.grid
    if fiber_count not in (1, 2):
        raise ValueError("fiber_count must be 1 or 2")
    if base.dim + fiber_count > 3:
        raise ValueError("base dim + fiber count exceeds the chart cap of 3")

    prod = make_chart(
        base.dim + fiber_count,
        base.resolution + (fiber_res,) * fiber_count,
        base.extent + (2.0 * np.pi,) * fiber_count,
        base.topology + (PERIODIC,) * fiber_count,
        origin=base.origin + (0.0,) * fiber_count)

    d = base.dim
    dp = prod.dim
    fiber_shape = (fiber_res,) * fiber_count
    warp = np.exp(2.0 * phi.values / fiber_count)
    vals = np.zeros(prod.shape + (dp, dp))
    for i in range(d):
        for j in range(d):
            vals[..., i, j] = _lift(metric.values[..., i, j], fiber_shape)
    for a in range(d, dp):
        vals[..., a, a] = _lift(warp, fiber_shape)
    prod_scal = curvature_bundle(TensorField(prod, 2, vals)).scalar.values

    spread = float(np.max(prod_scal.reshape(base.shape + (-1,)).max(axis=-1)
                          - prod_scal.reshape(base.shape + (-1,)).min(axis=-1)))
    if spread > FIBER_SPREAD_TOL:
        raise ValueError(f"fiber-direction spread {spread:.3e} exceeds "
                         f"{FIBER_SPREAD_TOL:.1e}; product assembly is "
                         f"inconsistent")

    bundle = curvature_bundle(metric)
    pot = potential_derivatives(bundle, phi)
    ratio = (fiber_count + 1.0) / fiber_count
    formula = (bundle.scalar.values - 2.0 * pot.laplacian.values
               - ratio * pot.gradient_sq.values)
    base_scal = prod_scal[(...,) + (0,) * fiber_count]
    return WarpedResidual(ScalarField(base, base_scal - formula), spread)


def _lift(values: np.ndarray, fiber_shape: tuple[int, ...]) -> np.ndarray:
    """Extend a base-grid array constantly along trailing fiber axes."""
    expanded = values.reshape(values.shape + (1,) * len(fiber_shape))
    return np.broadcast_to(expanded, values.shape + fiber_shape)
