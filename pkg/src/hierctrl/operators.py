"""Discrete fourth-order parabolic operators with clamped boundary conditions.

The biharmonic operator is assembled as A~' D A~ where A~ evaluates the
5-point Laplacian at every node (mirror ghosts u_{-1} = u_1 encode the
zero normal derivative, boundary values are zero) and D carries half
weights at boundary nodes.  This reproduces the classical clamped stencil
(diagonal 7 next to a wall in 1D) and is symmetric by construction.

Time stepping is backward Euler.  Adjoint marches use the exact transposes
of the forward step matrices, so every discrete duality identity holds to
solver precision (discretize-then-optimize).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .errors import ShapeMismatch
from .linalg import Factorization, factorize
from .mesh import Grid, SpaceTimeField, SubdomainMask


def _axis_laplacian_rows(n, h):
    """All-node second difference along one axis from interior values.

    Shape (n, n-2).  Boundary rows carry the single mirrored arm
    2*u_first_interior / h^2; boundary values themselves are zero.
    """
    inv_h2 = 1.0 / (h * h)
    rows, cols, vals = [], [], []
    for j in range(1, n - 1):
        rows.append(j)
        cols.append(j - 1)
        vals.append(-2.0 * inv_h2)
        if j - 2 >= 0:
            rows.append(j)
            cols.append(j - 2)
            vals.append(inv_h2)
        if j <= n - 3:
            rows.append(j)
            cols.append(j)
            vals.append(inv_h2)
    rows += [0, n - 1]
    cols += [0, n - 3]
    vals += [2.0 * inv_h2, 2.0 * inv_h2]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n - 2))


def _axis_embedding(n):
    """Interior-to-all-nodes embedding along one axis (zero boundary)."""
    rows = list(range(1, n - 1))
    cols = list(range(n - 2))
    vals = [1.0] * (n - 2)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n - 2))


def extended_laplacian(grid: Grid):
    """Discrete Laplacian at every node given interior values."""
    if grid.dim == 1:
        return _axis_laplacian_rows(grid.nx[0], grid.h[0])
    Lx = _axis_laplacian_rows(grid.nx[0], grid.h[0])
    Ly = _axis_laplacian_rows(grid.nx[1], grid.h[1])
    Sx = _axis_embedding(grid.nx[0])
    Sy = _axis_embedding(grid.nx[1])
    return (sp.kron(Lx, Sy) + sp.kron(Sx, Ly)).tocsr()


def _boundary_halving(grid: Grid):
    """Per-node factor: 1/2 for each axis on whose wall the node sits."""
    tau = np.ones(grid.nx)
    for axis in range(grid.dim):
        fac = np.ones(grid.nx[axis])
        fac[0] = fac[-1] = 0.5
        shape = [1] * grid.dim
        shape[axis] = grid.nx[axis]
        tau = tau * fac.reshape(shape)
    return tau.reshape(-1)


def assemble_biharmonic(grid: Grid):
    """Symmetric clamped discrete biharmonic on interior nodes."""
    A = extended_laplacian(grid)
    tau = _boundary_halving(grid)
    M = (A.T @ sp.diags(tau) @ A).tocsr()
    M.sum_duplicates()
    return M


def _axis_gradient(n, h):
    """Centered first derivative on interior nodes (boundary values zero)."""
    inv_2h = 0.5 / h
    rows, cols, vals = [], [], []
    for j in range(1, n - 1):
        if j - 2 >= 0:
            rows.append(j - 1)
            cols.append(j - 2)
            vals.append(-inv_2h)
        if j <= n - 3:
            rows.append(j - 1)
            cols.append(j)
            vals.append(inv_2h)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n - 2, n - 2))


def gradient_matrices(grid: Grid):
    """Centered gradient per axis, interior nodes to interior nodes."""
    if grid.dim == 1:
        return (_axis_gradient(grid.nx[0], grid.h[0]),)
    Gx = _axis_gradient(grid.nx[0], grid.h[0])
    Gy = _axis_gradient(grid.nx[1], grid.h[1])
    Ix = sp.identity(grid.nx[0] - 2, format="csr")
    Iy = sp.identity(grid.nx[1] - 2, format="csr")
    return (sp.kron(Gx, Iy).tocsr(), sp.kron(Ix, Gy).tocsr())


@dataclass
class ProblemSpec:
    """Coefficients, control geometry, weights, targets and initial data.

    a_adj / b_adj, when set, are the coefficients of the backward (adjoint)
    equations; they default to a / b, which makes the adjoint step matrices
    exact transposes of the forward ones.  The semilinear solvers use the
    override to realize frozen-coefficient systems whose state and adjoint
    linearizations differ.
    """

    grid: Grid
    a: SpaceTimeField
    b: tuple
    leader_mask: SubdomainMask
    follower_masks: tuple
    target_masks: tuple
    alpha: tuple
    mu: tuple
    targets: tuple
    w0: np.ndarray
    ubar0: np.ndarray = None
    a_adj: SpaceTimeField = None
    b_adj: tuple = None

    def __post_init__(self):
        if len(self.b) != self.grid.dim:
            raise ShapeMismatch(f"need {self.grid.dim} velocity components, got {len(self.b)}")
        # mu_i = 0 is rejected outright; alpha_i = 0 is tolerated as the
        # decoupled diagnostic limit even though the model assumes it positive
        if any(al < 0 for al in self.alpha) or any(m <= 0 for m in self.mu):
            raise ValueError("need alpha_i >= 0 and mu_i > 0")
        self.w0 = np.asarray(self.w0, dtype=float)
        if self.w0.shape != self.grid.nx:
            raise ShapeMismatch(f"w0 shape {self.w0.shape} != {self.grid.nx}")
        if self.ubar0 is not None:
            self.ubar0 = np.asarray(self.ubar0, dtype=float)
            if self.ubar0.shape != self.grid.nx:
                raise ShapeMismatch(f"ubar0 shape {self.ubar0.shape} != {self.grid.nx}")

    def with_(self, **kw):
        return replace(self, **kw)

    def with_zero_data(self):
        """Same operators and geometry, zero initial data and targets."""
        z = SpaceTimeField.zeros(self.grid)
        return self.with_(w0=np.zeros(self.grid.nx), targets=(z, z))

    def has_controllability_geometry(self):
        return all(m.intersects(self.leader_mask) for m in self.target_masks)

    def require_controllability_geometry(self):
        if not self.has_controllability_geometry():
            raise ValueError("each target region must intersect the leader region")


@dataclass
class DiscreteOperator:
    """Spatial operators at one time level; adjoint = transpose contract."""

    level: int
    forward: sp.csr_matrix
    adjoint: sp.csr_matrix


def _spatial_operator(grid, biharm, grads, a_field, b_fields, level):
    a_int = grid.to_interior(a_field.level(level))
    L = biharm + sp.diags(a_int)
    for axis, bf in enumerate(b_fields):
        b_int = grid.to_interior(bf.level(level))
        if np.any(b_int):
            L = L + sp.diags(b_int) @ grads[axis]
    return L.tocsr()


def assemble_operators(spec: ProblemSpec, time_level: int) -> DiscreteOperator:
    grid = spec.grid
    biharm = assemble_biharmonic(grid)
    grads = gradient_matrices(grid)
    fwd = _spatial_operator(grid, biharm, grads, spec.a, spec.b, time_level)
    a_adj = spec.a_adj if spec.a_adj is not None else spec.a
    b_adj = spec.b_adj if spec.b_adj is not None else spec.b
    adj = _spatial_operator(grid, biharm, grads, a_adj, b_adj, time_level).T.tocsr()
    return DiscreteOperator(time_level, fwd, adj)


def _fields_time_constant(a_field, b_fields):
    def const(f):
        return bool(np.all(f.values == f.values[0]))

    return const(a_field) and all(const(bf) for bf in b_fields)


class TimeStepper:
    """Per-level backward-Euler step matrices and their factorizations.

    One factorization serves a step matrix and its transpose, so forward
    and adjoint marches share the work.  The matrices are cached once per
    spec; when the coefficients are time-independent a single factorization
    is reused for every level.
    """

    def __init__(self, spec: ProblemSpec):
        self.spec = spec
        grid = spec.grid
        self.grid = grid
        self.biharm = assemble_biharmonic(grid)
        self.grads = gradient_matrices(grid)
        eye = sp.identity(grid.n_interior, format="csr")
        dt = grid.dt

        def build(a_field, b_fields):
            if _fields_time_constant(a_field, b_fields):
                L = _spatial_operator(grid, self.biharm, self.grads, a_field, b_fields, 1)
                M = (eye + dt * L).tocsr()
                f = factorize(M)
                return [M] * grid.nt, [f] * grid.nt
            mats, facts = [], []
            for j in range(1, grid.nt + 1):
                L = _spatial_operator(grid, self.biharm, self.grads, a_field, b_fields, j)
                M = (eye + dt * L).tocsr()
                mats.append(M)
                facts.append(factorize(M))
            return mats, facts

        self._fwd_mats, self._fwd = build(spec.a, spec.b)
        if spec.a_adj is None and spec.b_adj is None:
            self._adj_mats, self._adj = self._fwd_mats, self._fwd
        else:
            a_adj = spec.a_adj if spec.a_adj is not None else spec.a
            b_adj = spec.b_adj if spec.b_adj is not None else spec.b
            self._adj_mats, self._adj = build(a_adj, b_adj)

    def _family(self, family):
        if family == "forward":
            return self._fwd
        if family == "adjoint":
            return self._adj
        raise ValueError(f"unknown matrix family {family!r}")

    def step(self, j, family="forward") -> Factorization:
        """Factorization of the step matrix used by forward step j (1..nt)."""
        return self._family(family)[j - 1]

    def step_matrix(self, j, family="forward"):
        """The step matrix I + dt L_j itself (1..nt)."""
        mats = self._fwd_mats if family == "forward" else self._adj_mats
        return mats[j - 1]

    def march_forward(self, w0_int, sources=None, family="forward"):
        """March (I + dt L_j) w^j = w^{j-1} + dt s^j for j = 1..nt.

        sources is an (nt+1, n_interior) array; level j feeds step j
        (level 0 is never used).  Returns all levels, shape (nt+1, n).
        """
        grid = self.grid
        n = grid.n_interior
        out = np.zeros((grid.nt + 1, n))
        out[0] = np.asarray(w0_int, dtype=float)
        facts = self._family(family)
        for j in range(1, grid.nt + 1):
            rhs = out[j - 1]
            if sources is not None:
                rhs = rhs + grid.dt * sources[j]
            out[j] = facts[j - 1].solve(rhs)
        return out

    def march_backward(self, terminal_int, sources=None, family="forward"):
        """Exact transpose march: (I + dt L_j)' p^{j-1} = p^j + dt s^j.

        Runs j = nt..1; the stored level nt is the terminal datum and the
        multiplier of step j lands at level j-1.  Source level j pairs with
        state level j in the duality identity.
        """
        grid = self.grid
        n = grid.n_interior
        out = np.zeros((grid.nt + 1, n))
        out[grid.nt] = np.asarray(terminal_int, dtype=float)
        facts = self._family(family)
        for j in range(grid.nt, 0, -1):
            rhs = out[j]
            if sources is not None:
                rhs = rhs + grid.dt * sources[j]
            out[j - 1] = facts[j - 1].solve(rhs, transpose=True)
        return out


def control_sources(spec: ProblemSpec, f=None, v1=None, v2=None):
    """Interior source array for f*chi_O + v1*chi_O1 + v2*chi_O2."""
    grid = spec.grid
    src = np.zeros((grid.nt + 1, grid.n_interior))
    pairs = [
        (f, spec.leader_mask),
        (v1, spec.follower_masks[0]),
        (v2, spec.follower_masks[1]),
    ]
    for fld, mask in pairs:
        if fld is not None:
            src += fld.interior() * mask.interior_vector()
    return src


def solve_forward(spec: ProblemSpec, f=None, v1=None, v2=None, w0=None, stepper=None) -> SpaceTimeField:
    """State solve under leader f and followers v1, v2 (backward Euler)."""
    stepper = stepper or TimeStepper(spec)
    grid = spec.grid
    w0_full = spec.w0 if w0 is None else np.asarray(w0, dtype=float)
    w0_int = grid.to_interior(w0_full)
    src = control_sources(spec, f, v1, v2)
    W = stepper.march_forward(w0_int, src)
    return SpaceTimeField.from_interior(grid, W)


def solve_adjoint(spec: ProblemSpec, sources: SpaceTimeField, terminal, stepper=None) -> SpaceTimeField:
    """Backward solve with the transposed step matrices.

    Realizes the continuous adjoint equation (divergence-form transport
    term) as the exact transpose of the forward scheme.
    """
    stepper = stepper or TimeStepper(spec)
    grid = spec.grid
    term_int = grid.to_interior(np.asarray(terminal, dtype=float))
    src = sources.interior() if sources is not None else None
    P = stepper.march_backward(term_int, src, family="adjoint")
    return SpaceTimeField.from_interior(grid, P)


def state_pairing(grid: Grid, u_int, v_int):
    """dt * h^d * sum over levels 1..nt of the interior dot product."""
    return grid.dt * grid.hd * float(np.sum(u_int[1:] * v_int[1:]))


def duality_gap(spec: ProblemSpec, w0, fwd_sources, terminal, adj_sources, stepper=None):
    """Residual of the exact discrete duality identity (should be ~0).

    <psiT, w^nt>_h + dt sum_j <s^j, w^j>_h
      = <psi^0, w^0>_h + dt sum_j <psi^{j-1}, g^j>_h
    """
    stepper = stepper or TimeStepper(spec)
    grid = spec.grid
    W = stepper.march_forward(grid.to_interior(w0), fwd_sources)
    P = stepper.march_backward(grid.to_interior(terminal), adj_sources)
    hd = grid.hd
    lhs = hd * float(np.dot(P[-1], W[-1]))
    if adj_sources is not None:
        lhs += grid.dt * hd * float(np.sum(adj_sources[1:] * W[1:]))
    rhs = hd * float(np.dot(P[0], W[0]))
    if fwd_sources is not None:
        rhs += grid.dt * hd * float(np.sum(P[:-1] * fwd_sources[1:]))
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return abs(lhs - rhs) / scale
