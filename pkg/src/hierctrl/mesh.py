"""Rectangular space-time grids, subdomain masks, and discrete quadrature.

Nodes include the boundary; unknowns live on interior nodes (clamped
boundary values are identically zero).  Fields carry one value per
(spatial node, time level k = 0..nt).  All containers are immutable value
data after construction; operations are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMask, InvalidGrid, ShapeMismatch

MIN_NODES_PER_AXIS = 6  # 13-point biharmonic stencil with ghost handling
MIN_TIME_STEPS = 4


def _as_tuple(value, dim, name):
    if np.isscalar(value):
        return (value,) * dim
    out = tuple(value)
    if len(out) != dim:
        raise InvalidGrid(f"{name} must have {dim} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on a rectangle with uniform time levels."""

    dim: int
    lengths: tuple
    nx: tuple
    T: float
    nt: int
    h: tuple = field(init=False)
    dt: float = field(init=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise InvalidGrid(f"dim must be 1 or 2, got {self.dim}")
        if any(n < MIN_NODES_PER_AXIS for n in self.nx):
            raise InvalidGrid(f"need nx >= {MIN_NODES_PER_AXIS} per axis, got {self.nx}")
        if self.nt < MIN_TIME_STEPS:
            raise InvalidGrid(f"need nt >= {MIN_TIME_STEPS}, got {self.nt}")
        if any(L <= 0 for L in self.lengths) or self.T <= 0:
            raise InvalidGrid("lengths and T must be positive")
        object.__setattr__(self, "h", tuple(L / (n - 1) for L, n in zip(self.lengths, self.nx)))
        object.__setattr__(self, "dt", self.T / self.nt)

    @property
    def space_shape(self):
        return self.nx

    @property
    def n_space(self):
        return int(np.prod(self.nx))

    @property
    def interior_shape(self):
        return tuple(n - 2 for n in self.nx)

    @property
    def n_interior(self):
        return int(np.prod(self.interior_shape))

    @property
    def hd(self):
        """Spatial cell volume h^d."""
        return float(np.prod(self.h))

    def coords(self, axis):
        return np.linspace(0.0, self.lengths[axis], self.nx[axis])

    def times(self):
        return np.linspace(0.0, self.T, self.nt + 1)

    def meshes(self):
        """Coordinate arrays broadcast to the full spatial shape."""
        axes = [self.coords(a) for a in range(self.dim)]
        return np.meshgrid(*axes, indexing="ij")

    def interior_slices(self):
        return tuple(slice(1, -1) for _ in range(self.dim))

    def interior_bool(self):
        keep = np.zeros(self.nx, dtype=bool)
        keep[self.interior_slices()] = True
        return keep

    def node_weights(self):
        """Per-node quadrature weights for spatial integrals.

        Interior nodes own rectangle cells of width h; the cells next to a
        wall absorb the boundary strip (width 3h/2), so integrating a
        constant over the full interior mask recovers the exact domain
        measure.  Boundary nodes carry weight zero.
        """
        w = np.ones(self.nx)
        for axis in range(self.dim):
            fac = np.ones(self.nx[axis])
            fac[0] = fac[-1] = 0.0
            fac[1] = fac[-2] = 1.5
            shape = [1] * self.dim
            shape[axis] = self.nx[axis]
            w = w * fac.reshape(shape)
        return w * self.hd

    def to_interior(self, full):
        """Flatten the interior values of a spatial array (row-major)."""
        full = np.asarray(full)
        if full.shape != self.nx:
            raise ShapeMismatch(f"expected spatial shape {self.nx}, got {full.shape}")
        return full[self.interior_slices()].reshape(-1).copy()

    def from_interior(self, vec):
        """Embed an interior vector into a full spatial array (boundary zero)."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_interior,):
            raise ShapeMismatch(f"expected {self.n_interior} interior values, got {vec.shape}")
        full = np.zeros(self.nx)
        full[self.interior_slices()] = vec.reshape(self.interior_shape)
        return full


def build_grid(dim, lengths, nx, T, nt) -> Grid:
    dim = int(dim)
    if dim not in (1, 2):
        raise InvalidGrid(f"dim must be 1 or 2, got {dim}")
    lengths = tuple(float(L) for L in _as_tuple(lengths, dim, "lengths"))
    nx = tuple(int(n) for n in _as_tuple(nx, dim, "nx"))
    return Grid(dim=dim, lengths=lengths, nx=nx, T=float(T), nt=int(nt))


@dataclass(frozen=True)
class SubdomainMask:
    """0/1 indicator on strictly interior spatial nodes."""

    grid: Grid
    indicator: np.ndarray

    def __post_init__(self):
        ind = np.asarray(self.indicator, dtype=bool)
        if ind.shape != self.grid.nx:
            raise ShapeMismatch(f"mask shape {ind.shape} != grid shape {self.grid.nx}")
        if np.any(ind & ~self.grid.interior_bool()):
            raise EmptyMask("mask nodes must be strictly interior")
        object.__setattr__(self, "indicator", ind)

    @property
    def node_count(self):
        return int(self.indicator.sum())

    def interior_vector(self):
        """Indicator restricted to interior nodes, flattened, as floats."""
        return self.indicator[self.grid.interior_slices()].reshape(-1).astype(float)

    def union(self, other):
        return SubdomainMask(self.grid, self.indicator | other.indicator)

    def intersects(self, other):
        return bool(np.any(self.indicator & other.indicator))


def build_mask(grid, box) -> SubdomainMask:
    """Indicator of interior nodes falling inside a per-axis closed box."""
    if grid.dim == 1 and np.isscalar(box[0]):
        box = (box,)
    if len(box) != grid.dim:
        raise ShapeMismatch(f"box needs {grid.dim} intervals, got {len(box)}")
    ind = grid.interior_bool()
    for axis, (lo, hi) in enumerate(box):
        x = grid.coords(axis)
        # tolerate roundoff at box edges so nodes on the edge are included
        tol = 1e-12 * max(1.0, abs(hi), abs(lo))
        inside = (x >= lo - tol) & (x <= hi + tol)
        shape = [1] * grid.dim
        shape[axis] = grid.nx[axis]
        ind = ind & inside.reshape(shape)
    if not ind.any():
        raise EmptyMask(f"no interior node falls in box {box}")
    return SubdomainMask(grid, ind)


def full_mask(grid) -> SubdomainMask:
    return SubdomainMask(grid, grid.interior_bool())


@dataclass(frozen=True)
class SpaceTimeField:
    """Scalar field sampled at every node and time level k = 0..nt."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        expected = (self.grid.nt + 1,) + self.grid.nx
        if vals.shape != expected:
            raise ShapeMismatch(f"field shape {vals.shape} != {expected}")
        if not np.all(np.isfinite(vals)):
            raise ShapeMismatch("field contains non-finite entries")
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros((grid.nt + 1,) + grid.nx))

    @classmethod
    def from_interior(cls, grid, interior):
        """Build from an array of interior values, one row per time level."""
        interior = np.asarray(interior, dtype=float)
        if interior.shape != (grid.nt + 1, grid.n_interior):
            raise ShapeMismatch(
                f"expected interior array {(grid.nt + 1, grid.n_interior)}, got {interior.shape}"
            )
        vals = np.zeros((grid.nt + 1,) + grid.nx)
        vals[(slice(None),) + grid.interior_slices()] = interior.reshape(
            (grid.nt + 1,) + grid.interior_shape
        )
        return cls(grid, vals)

    @classmethod
    def from_spatial(cls, grid, spatial):
        """Repeat one spatial array over all time levels."""
        spatial = np.asarray(spatial, dtype=float)
        if spatial.shape != grid.nx:
            raise ShapeMismatch(f"spatial shape {spatial.shape} != {grid.nx}")
        return cls(grid, np.broadcast_to(spatial, (grid.nt + 1,) + grid.nx).copy())

    def interior(self):
        """Interior values as an array of shape (nt+1, n_interior)."""
        sl = (slice(None),) + self.grid.interior_slices()
        return self.values[sl].reshape(self.grid.nt + 1, -1).copy()

    def level(self, k):
        return self.values[k]

    def is_constant(self):
        return bool(np.all(self.values == self.values.flat[0]))

    def __add__(self, other):
        return SpaceTimeField(self.grid, self.values + other.values)

    def __sub__(self, other):
        return SpaceTimeField(self.grid, self.values - other.values)

    def __mul__(self, scalar):
        return SpaceTimeField(self.grid, self.values * float(scalar))

    __rmul__ = __mul__


def time_weights(grid):
    """Trapezoidal weights over time levels (half weights at k=0, nt)."""
    w = np.full(grid.nt + 1, grid.dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def integrate(field, mask, weight=None):
    """Space-time integral of field*weight over the masked region.

    Trapezoidal rule in time; in space each masked node contributes its
    node weight (see Grid.node_weights).  Exact for constants on the full
    interior mask.
    """
    grid = field.grid
    if mask.grid is not grid and mask.grid != grid:
        raise ShapeMismatch("mask and field live on different grids")
    vals = field.values
    if weight is not None:
        if weight.grid != grid:
            raise ShapeMismatch("weight and field live on different grids")
        vals = vals * weight.values
    nw = grid.node_weights() * mask.indicator
    per_level = np.tensordot(vals, nw, axes=(tuple(range(1, vals.ndim)), tuple(range(nw.ndim))))
    return float(np.dot(time_weights(grid), per_level))


def inner_h(grid, u, v):
    """Discrete spatial inner product h^d * sum over interior nodes."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape == grid.nx:
        u = grid.to_interior(u)
    if v.shape == grid.nx:
        v = grid.to_interior(v)
    if u.shape != v.shape:
        raise ShapeMismatch(f"shape mismatch {u.shape} vs {v.shape}")
    return grid.hd * float(np.dot(u, v))


def norm_h(grid, u):
    return math.sqrt(max(inner_h(grid, u, u), 0.0))
