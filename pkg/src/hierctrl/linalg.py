"""Minimal sparse linear algebra behind the time steppers and HUM solver.

Direct factorizations are delegated to SuperLU (scipy.sparse.linalg.splu);
conjugate gradient and power iteration are written against operator
callbacks so the HUM operator, which involves nested PDE solves, plugs in
without ever being materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import MaxIterations, NonFiniteBreakdown, SingularMatrix

PIVOT_RTOL = 1e-14


def sparse_from_triples(n, rows, cols, values):
    """Assemble an n x n CSR matrix from (row, col, value) triples.

    Rejects out-of-range indices, duplicate (row, col) pairs, and
    non-finite values.
    """
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    values = np.asarray(values, dtype=float)
    if rows.min(initial=0) < 0 or cols.min(initial=0) < 0:
        raise ValueError("negative index in triples")
    if rows.max(initial=-1) >= n or cols.max(initial=-1) >= n:
        raise ValueError("index out of range in triples")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite value in triples")
    keys = rows.astype(np.int64) * n + cols
    if len(np.unique(keys)) != len(keys):
        raise ValueError("duplicate (row, col) in triples")
    return sp.csr_matrix((values, (rows, cols)), shape=(n, n))


@dataclass
class Factorization:
    """Immutable LU factorization; shareable across threads."""

    n: int
    _lu: object

    def solve(self, rhs, transpose=False):
        rhs = np.asarray(rhs, dtype=float)
        return self._lu.solve(rhs, trans="T" if transpose else "N")


def factorize(matrix) -> Factorization:
    matrix = sp.csc_matrix(matrix)
    if matrix.shape[0] != matrix.shape[1]:
        raise SingularMatrix("matrix must be square")
    scale = float(abs(matrix).max()) if matrix.nnz else 0.0
    if scale == 0.0:
        raise SingularMatrix("zero matrix")
    try:
        lu = spla.splu(matrix)
    except RuntimeError as exc:  # SuperLU signals exact singularity this way
        raise SingularMatrix(str(exc)) from exc
    pivots = np.abs(lu.U.diagonal())
    if pivots.min() < PIVOT_RTOL * scale:
        raise SingularMatrix(f"pivot {pivots.min():.3e} below {PIVOT_RTOL:.0e}*scale")
    return Factorization(matrix.shape[0], lu)


def solve(fact, rhs):
    return fact.solve(rhs)


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residuals: list


def conjugate_gradient(apply, b, tol_rel=1e-10, max_iter=500) -> CGResult:
    """CG against an SPD operator callback.

    Stops when the relative euclidean residual drops below tol_rel.
    Raises MaxIterations carrying the best iterate, NonFiniteBreakdown on
    any non-finite scalar.
    """
    b = np.asarray(b, dtype=float)
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return CGResult(np.zeros_like(b), 0, [0.0])
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(np.dot(r, r))
    history = [np.sqrt(rs) / norm_b]
    best_x, best_res = x.copy(), history[0]
    for it in range(1, max_iter + 1):
        Ap = np.asarray(apply(p), dtype=float)
        denom = float(np.dot(p, Ap))
        if not np.isfinite(denom) or denom <= 0.0:
            if denom <= 0.0 and np.isfinite(denom):
                raise NonFiniteBreakdown(f"operator not positive definite: <p,Ap> = {denom:.3e}")
            raise NonFiniteBreakdown("non-finite curvature in CG")
        alpha = rs / denom
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = float(np.dot(r, r))
        if not np.isfinite(rs_new):
            raise NonFiniteBreakdown("non-finite residual in CG")
        rel = np.sqrt(rs_new) / norm_b
        history.append(rel)
        if rel < best_res:
            best_res, best_x = rel, x.copy()
        if rel <= tol_rel:
            return CGResult(x, it, history)
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise MaxIterations(
        f"CG did not reach tol {tol_rel:.1e} in {max_iter} iterations (best {best_res:.3e})",
        best=best_x,
        iterations=max_iter,
        history=history,
    )


@dataclass
class OperatorNormEstimate:
    value: float
    last_increment: float
    history: list


def operator_norm(apply, apply_adjoint, n, iters=50, seed=0) -> OperatorNormEstimate:
    """Largest singular value via power iteration on A*A.

    Rayleigh estimates are monotone nondecreasing; returns the final
    estimate together with the last relative increment.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return OperatorNormEstimate(0.0, 0.0, [])
    v /= nv
    history = []
    last_inc = 0.0
    for _ in range(iters):
        w = np.asarray(apply(v), dtype=float)
        sigma = float(np.linalg.norm(w))
        if sigma == 0.0:
            return OperatorNormEstimate(0.0, 0.0, history)
        if history:
            last_inc = (sigma - history[-1]) / max(sigma, 1e-300)
        history.append(sigma)
        z = np.asarray(apply_adjoint(w), dtype=float)
        nz = float(np.linalg.norm(z))
        if nz == 0.0:
            return OperatorNormEstimate(sigma, last_inc, history)
        v = z / nz
    return OperatorNormEstimate(history[-1], last_inc, history)
