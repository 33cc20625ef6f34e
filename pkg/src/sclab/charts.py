"""Structured chart grids and the field calculus everything else builds on.

A chart is a tensor-product grid on a box, with each axis either periodic
(wraps around, spacing = extent / resolution) or boundary (endpoints are
honest grid nodes, spacing = extent / (resolution - 1)).  Scalar and tensor
fields store one value (or one d x ... x d component block) per node, in
row-major node order.  Derivatives are second-order central differences,
falling back to second-order one-sided stencils at boundary-axis edges.

Integration weights nodes by sqrt(det g) times the cell volume (trapezoid
half-cells at boundary-axis edges) and accumulates with a fixed pairwise
tree so the sum is reproducible bit for bit regardless of how the node
loop is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PERIODIC = "periodic"
BOUNDARY = "boundary"

MIN_RESOLUTION = 8


@dataclass(frozen=True)
class ChartGrid:
    """Immutable description of a structured grid on a coordinate box."""

    resolution: tuple[int, ...]
    extent: tuple[float, ...]
    topology: tuple[str, ...]
    origin: tuple[float, ...]
    spacing: tuple[float, ...]

    def __post_init__(self):
        dim = len(self.resolution)
        if not 1 <= dim <= 3:
            raise ValueError(f"chart dimension must be 1, 2 or 3, got {dim}")
        for t in (self.extent, self.topology, self.origin, self.spacing):
            if len(t) != dim:
                raise ValueError("resolution/extent/topology/origin/spacing "
                                 "must all have one entry per axis")
        for a in range(dim):
            if self.resolution[a] < MIN_RESOLUTION:
                raise ValueError(
                    f"axis {a}: resolution {self.resolution[a]} is below the "
                    f"minimum of {MIN_RESOLUTION}")
            if not self.extent[a] > 0.0:
                raise ValueError(f"axis {a}: extent must be positive")
            if self.topology[a] not in (PERIODIC, BOUNDARY):
                raise ValueError(f"axis {a}: unknown topology "
                                 f"{self.topology[a]!r}")
            n = self.resolution[a] if self.topology[a] == PERIODIC \
                else self.resolution[a] - 1
            expected = self.extent[a] / n
            if self.spacing[a] != expected:
                raise ValueError(f"axis {a}: spacing {self.spacing[a]} "
                                 f"inconsistent with extent/topology")

    @property
    def dim(self) -> int:
        return len(self.resolution)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.resolution

    @property
    def node_count(self) -> int:
        return int(np.prod(self.resolution))

    def axis_coords(self, axis: int) -> np.ndarray:
        """Node coordinates along one axis: origin + index * spacing."""
        return self.origin[axis] + self.spacing[axis] * np.arange(
            self.resolution[axis], dtype=float)

    def coords(self) -> list[np.ndarray]:
        """Broadcast node coordinates, one full-shape array per axis."""
        axes = [self.axis_coords(a) for a in range(self.dim)]
        return list(np.meshgrid(*axes, indexing="ij"))

    def interior_mask(self) -> np.ndarray:
        """True away from boundary-axis edge rows (all True on tori)."""
        mask = np.ones(self.shape, dtype=bool)
        for a in range(self.dim):
            if self.topology[a] == BOUNDARY:
                mask[_axis_slice(self.dim, a, 0)] = False
                mask[_axis_slice(self.dim, a, -1)] = False
        return mask

    def cell_weights(self) -> np.ndarray:
        """Per-node coordinate cell volume; edge nodes carry half cells."""
        w = np.ones(self.shape)
        for a in range(self.dim):
            wa = np.full(self.resolution[a], self.spacing[a])
            if self.topology[a] == BOUNDARY:
                wa[0] *= 0.5
                wa[-1] *= 0.5
            shape = [1] * self.dim
            shape[a] = self.resolution[a]
            w = w * wa.reshape(shape)
        return w

    def drop_axis(self, axis: int) -> "ChartGrid":
        """The codimension-one grid obtained by deleting one axis."""
        if self.dim < 2:
            raise ValueError("cannot drop an axis of a 1-d chart")
        keep = [a for a in range(self.dim) if a != axis]
        return make_chart(
            self.dim - 1,
            tuple(self.resolution[a] for a in keep),
            tuple(self.extent[a] for a in keep),
            tuple(self.topology[a] for a in keep),
            origin=tuple(self.origin[a] for a in keep),
        )


@dataclass(frozen=True)
class ScalarField:
    grid: ChartGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if v.shape != self.grid.shape:
            raise ValueError(f"scalar field shape {v.shape} does not match "
                             f"grid shape {self.grid.shape}")
        _check_finite(v, self.grid)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def replace_values(self, values) -> "ScalarField":
        return ScalarField(self.grid, values)


@dataclass(frozen=True)
class TensorField:
    grid: ChartGrid
    rank: int
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        want = self.grid.shape + (self.grid.dim,) * self.rank
        if self.rank < 1 or v.shape != want:
            raise ValueError(f"rank-{self.rank} field shape {v.shape} does "
                             f"not match expected {want}")
        _check_finite(v, self.grid)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def replace_values(self, values) -> "TensorField":
        return TensorField(self.grid, self.rank, values)


MetricField = TensorField  # rank-2, symmetric, positive definite per node


def make_chart(dim, resolution, extent, topology, origin=None) -> ChartGrid:
    """Build a validated grid; spacing follows from extent and topology."""
    resolution = _as_tuple(resolution, dim, int)
    extent = _as_tuple(extent, dim, float)
    if isinstance(topology, str):
        topology = (topology,) * dim
    topology = tuple(topology)
    if origin is None:
        origin = (0.0,) * dim
    origin = _as_tuple(origin, dim, float)
    if len(resolution) != dim:
        raise ValueError(f"expected {dim} resolutions, got {len(resolution)}")
    spacing = []
    for a in range(dim):
        if topology[a] not in (PERIODIC, BOUNDARY):
            raise ValueError(f"axis {a}: unknown topology {topology[a]!r}")
        n = resolution[a] if topology[a] == PERIODIC else resolution[a] - 1
        if n <= 0:
            raise ValueError(f"axis {a}: resolution too small")
        spacing.append(extent[a] / n)
    return ChartGrid(resolution, extent, topology, origin, tuple(spacing))


def sample_field(grid: ChartGrid, fn, rank: int = 0):
    """Evaluate fn on the node coordinates; non-finite samples abort.

    fn receives one broadcast coordinate array per axis and returns either
    a full-shape scalar array (rank 0) or an array with `rank` trailing
    component axes of length grid.dim.
    """
    out = np.asarray(fn(*grid.coords()), dtype=float)
    if rank == 0:
        out = np.broadcast_to(out, grid.shape).copy()
        return ScalarField(grid, out)
    want = grid.shape + (grid.dim,) * rank
    if out.shape != want:
        raise ValueError(f"sampler returned shape {out.shape}, "
                         f"expected {want}")
    return TensorField(grid, rank, out)


def constant_metric(grid: ChartGrid, matrix) -> TensorField:
    """Metric with the same coefficient matrix at every node."""
    m = np.asarray(matrix, dtype=float)
    if m.shape != (grid.dim, grid.dim):
        raise ValueError(f"expected a {grid.dim}x{grid.dim} matrix")
    vals = np.broadcast_to(m, grid.shape + m.shape).copy()
    return TensorField(grid, 2, vals)


def diff_array(values: np.ndarray, grid: ChartGrid, axis: int,
               order: int) -> np.ndarray:
    """Second-order stencil derivative along one grid axis.

    Component axes (anything beyond grid.dim) ride along untouched.
    Periodic axes wrap; boundary axes close with one-sided second-order
    stencils, so differentiating any constant field returns exact zeros.
    """
    if not 0 <= axis < grid.dim:
        raise ValueError(f"axis {axis} out of range for dim {grid.dim}")
    if order not in (1, 2):
        raise ValueError(f"derivative order must be 1 or 2, got {order}")
    h = grid.spacing[axis]
    v = np.asarray(values, dtype=float)
    if grid.topology[axis] == PERIODIC:
        up = np.roll(v, -1, axis=axis)
        dn = np.roll(v, 1, axis=axis)
        if order == 1:
            return (up - dn) / (2.0 * h)
        return (up - 2.0 * v + dn) / (h * h)

    out = np.empty_like(v)
    n = grid.resolution[axis]

    def row(i):
        return _axis_slice(v.ndim, axis, i)

    # one-sided closures are written as combinations of neighbor
    # differences so constant fields cancel exactly, not just to roundoff
    if order == 1:
        out[row(slice(1, n - 1))] = (
            v[row(slice(2, n))] - v[row(slice(0, n - 2))]) / (2.0 * h)
        out[row(0)] = (3.0 * (v[row(1)] - v[row(0)])
                       + (v[row(1)] - v[row(2)])) / (2.0 * h)
        out[row(n - 1)] = (3.0 * (v[row(n - 1)] - v[row(n - 2)])
                           + (v[row(n - 3)] - v[row(n - 2)])) / (2.0 * h)
    else:
        out[row(slice(1, n - 1))] = (
            v[row(slice(2, n))] - 2.0 * v[row(slice(1, n - 1))]
            + v[row(slice(0, n - 2))]) / (h * h)
        out[row(0)] = (2.0 * (v[row(0)] - v[row(1)])
                       - 3.0 * (v[row(1)] - v[row(2)])
                       + (v[row(2)] - v[row(3)])) / (h * h)
        out[row(n - 1)] = (2.0 * (v[row(n - 1)] - v[row(n - 2)])
                           - 3.0 * (v[row(n - 2)] - v[row(n - 3)])
                           + (v[row(n - 3)] - v[row(n - 4)])) / (h * h)
    return out


def differentiate(field, axis: int, order: int):
    """Field-level wrapper around diff_array preserving the field type."""
    out = diff_array(field.values, field.grid, axis, order)
    if isinstance(field, ScalarField):
        return ScalarField(field.grid, out)
    return TensorField(field.grid, field.rank, out)


def tree_sum(values: np.ndarray) -> float:
    """Pairwise reduction in fixed node order; bit-reproducible."""
    flat = np.ascontiguousarray(values, dtype=float).reshape(-1)
    n = flat.size
    if n == 0:
        return 0.0
    size = 1
    while size < n:
        size *= 2
    buf = np.zeros(size)
    buf[:n] = flat
    while buf.size > 1:
        buf = buf[0::2] + buf[1::2]
    return float(buf[0])


def metric_determinant(metric: TensorField) -> np.ndarray:
    d = metric.grid.dim
    g = metric.values.reshape(-1, d, d)
    return np.linalg.det(g).reshape(metric.grid.shape)


def integrate(field: ScalarField, metric: TensorField) -> float:
    """Riemannian integral: tree-summed values * sqrt(det g) * cell volume."""
    grid = field.grid
    if metric.grid is not grid and metric.grid != grid:
        raise ValueError("field and metric live on different grids")
    det = metric_determinant(metric)
    if np.any(det <= 0.0):
        node = node_tuple(np.argmax(det <= 0.0), grid.shape)
        raise ValueError(f"non-positive metric determinant at node {node}")
    return tree_sum(field.values * np.sqrt(det) * grid.cell_weights())


def reduce_min(field: ScalarField) -> tuple[float, tuple[int, ...]]:
    """Minimum value and the first attaining node in row-major order."""
    flat = field.values.reshape(-1)
    idx = int(np.argmin(flat))
    return float(flat[idx]), node_tuple(idx, field.grid.shape)


_SNAP_MAGIC = "chartsnap 1"


def write_snapshot(path, grid: ChartGrid, fields: dict) -> None:
    """Self-describing text snapshot; floats carry 17 significant digits."""
    lines = [_SNAP_MAGIC,
             f"dim {grid.dim}",
             "resolution " + " ".join(str(r) for r in grid.resolution),
             "extent " + " ".join(_fmt(e) for e in grid.extent),
             "topology " + " ".join(grid.topology),
             "origin " + " ".join(_fmt(o) for o in grid.origin),
             f"fields {len(fields)}"]
    for name, field in fields.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"field name {name!r} contains whitespace")
        rank = 0 if isinstance(field, ScalarField) else field.rank
        lines.append(f"field {name} {rank}")
        flat = field.values.reshape(-1)
        for start in range(0, flat.size, 8):
            lines.append(" ".join(_fmt(x) for x in flat[start:start + 8]))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_snapshot(path) -> tuple[ChartGrid, dict]:
    with open(path) as fh:
        tokens = fh.read().split("\n")
    it = iter(tokens)
    if next(it) != _SNAP_MAGIC:
        raise ValueError(f"{path}: not a chart snapshot")
    dim = int(_expect(next(it), "dim"))
    resolution = tuple(int(x) for x in _expect(next(it), "resolution").split())
    extent = tuple(float(x) for x in _expect(next(it), "extent").split())
    topology = tuple(_expect(next(it), "topology").split())
    origin = tuple(float(x) for x in _expect(next(it), "origin").split())
    grid = make_chart(dim, resolution, extent, topology, origin=origin)
    nfields = int(_expect(next(it), "fields"))
    fields = {}
    for _ in range(nfields):
        head = _expect(next(it), "field").split()
        name, rank = head[0], int(head[1])
        count = grid.node_count * grid.dim ** rank
        vals = []
        while len(vals) < count:
            vals.extend(float(x) for x in next(it).split())
        if len(vals) != count:
            raise ValueError(f"{path}: field {name}: value count mismatch")
        arr = np.array(vals).reshape(grid.shape + (grid.dim,) * rank)
        fields[name] = (ScalarField(grid, arr) if rank == 0
                        else TensorField(grid, rank, arr))
    return grid, fields


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _expect(line: str, key: str) -> str:
    if not line.startswith(key + " "):
        raise ValueError(f"snapshot: expected {key!r} record, got {line!r}")
    return line[len(key) + 1:]


def _as_tuple(value, dim, cast):
    if np.isscalar(value):
        return (cast(value),) * dim
    return tuple(cast(v) for v in value)


def _axis_slice(ndim, axis, index):
    sl = [slice(None)] * ndim
    sl[axis] = index
    return tuple(sl)


def node_tuple(flat_index: int, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Row-major flat index as a plain-int node tuple (for messages)."""
    return tuple(int(i) for i in np.unravel_index(int(flat_index), shape))


def _check_finite(values: np.ndarray, grid: ChartGrid) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        per_node = bad.reshape(grid.node_count, -1).any(axis=1)
        node = node_tuple(np.argmax(per_node), grid.shape)
        raise ValueError(f"non-finite field value at node {node}")
