"""Follower Nash equilibrium for a given leader control.

Response operators, the variational equilibrium equation, the contraction
fixed point over the coupled optimality system, a dense space-time oracle,
and first-order / coercivity diagnostics.

Discrete conventions.  Control fields carry their degrees of freedom at
levels 1..nt (level 0 is identically zero); the control value at level j
drives forward step j.  Adjoint fields store the multiplier of step j at
level j-1, so the stationarity relation reads v_i^j = -phi_i^{j-1}/mu_i
on the follower region: the exact discrete transcription of v = -phi/mu
forced by transposing the backward-Euler scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractionFailure, MaxIterations, TooLarge
from .linalg import factorize, operator_norm
from .mesh import SpaceTimeField
from .operators import ProblemSpec, TimeStepper, control_sources

import scipy.sparse as sp

DIVERGENCE_PATIENCE = 10  # consecutive growing sweeps before giving up
TINY = 1e-300


def q_norm(grid, arr):
    """Discrete L2(Q) norm over levels 1..nt of an interior array."""
    return math.sqrt(grid.dt * grid.hd * float(np.sum(arr[1:] * arr[1:])))


@dataclass
class NashSolution:
    w: SpaceTimeField
    phi1: SpaceTimeField
    phi2: SpaceTimeField
    v1: SpaceTimeField
    v2: SpaceTimeField
    iterations: int
    history: list
    residuals: tuple = None
    converged: bool = True

    @property
    def phis(self):
        return (self.phi1, self.phi2)

    @property
    def controls(self):
        return (self.v1, self.v2)


@dataclass
class NashDiagnostics:
    m0_estimate: float
    coercivity_margin: float
    contraction_factor: float


def _controls_from_adjoints(spec, phi_arrays):
    """v_i^j = -chi_i * phi_i^{j-1} / mu_i, bitwise, level 0 zero."""
    grid = spec.grid
    out = []
    for i, phi in enumerate(phi_arrays):
        chi = spec.follower_masks[i].interior_vector()
        v = np.zeros_like(phi)
        v[1:] = -(phi[:-1] * chi) / spec.mu[i]
        out.append(v)
    return out


def apply_response(spec: ProblemSpec, i, v: SpaceTimeField, stepper=None) -> SpaceTimeField:
    """Response operator A_i: state driven by v on follower region i, zero IC."""
    stepper = stepper or TimeStepper(spec)
    grid = spec.grid
    src = v.interior() * spec.follower_masks[i].interior_vector()
    W = stepper.march_forward(np.zeros(grid.n_interior), src)
    return SpaceTimeField.from_interior(grid, W)


def _response_adjoint(spec, i, g_state, stepper):
    """A_i^*: state-side array (levels 1..nt) to control-side array on O_i."""
    grid = spec.grid
    P = stepper.march_backward(np.zeros(grid.n_interior), g_state, family="adjoint")
    chi = spec.follower_masks[i].interior_vector()
    out = np.zeros_like(P)
    out[1:] = P[:-1] * chi
    return out


def apply_response_adjoint(spec: ProblemSpec, i, g: SpaceTimeField, stepper=None) -> SpaceTimeField:
    stepper = stepper or TimeStepper(spec)
    return SpaceTimeField.from_interior(spec.grid, _response_adjoint(spec, i, g.interior(), stepper))


def apply_A(spec: ProblemSpec, v1: SpaceTimeField, v2: SpaceTimeField, stepper=None):
    """Equilibrium operator: A(v1,v2)_i = alpha_i A_i*((A1v1+A2v2) chi_di) + mu_i v_i."""
    stepper = stepper or TimeStepper(spec)
    grid = spec.grid
    src = control_sources(spec, v1=v1, v2=v2)
    W = stepper.march_forward(np.zeros(grid.n_interior), src)
    out = []
    for i in range(2):
        chid = spec.target_masks[i].interior_vector()
        chi = spec.follower_masks[i].interior_vector()
        adj = _response_adjoint(spec, i, W * chid, stepper)
        vi = (v1, v2)[i].interior() * chi
        out.append(SpaceTimeField.from_interior(grid, spec.alpha[i] * adj + spec.mu[i] * vi))
    return tuple(out)


def compute_rhs(spec: ProblemSpec, f=None, stepper=None):
    """Right side of the equilibrium equation built from the free state."""
    stepper = stepper or TimeStepper(spec)
    grid = spec.grid
    src = control_sources(spec, f=f)
    Z = stepper.march_forward(grid.to_interior(spec.w0), src)
    out = []
    for i in range(2):
        chid = spec.target_masks[i].interior_vector()
        wd = spec.targets[i].interior()
        adj = _response_adjoint(spec, i, (wd - Z) * chid, stepper)
        out.append(SpaceTimeField.from_interior(grid, spec.alpha[i] * adj))
    return tuple(out)


def _sweep(spec, stepper, z, f_src, w0_int):
    """One fixed-point sweep: adjoints from frozen z, controls, state."""
    grid = spec.grid
    phis = []
    for i in range(2):
        chid = spec.target_masks[i].interior_vector()
        wd = spec.targets[i].interior()
        src = spec.alpha[i] * chid * (z - wd)
        phis.append(stepper.march_backward(np.zeros(grid.n_interior), src, family="adjoint"))
    vs = _controls_from_adjoints(spec, phis)
    src = f_src.copy()
    for i, v in enumerate(vs):
        src += v * spec.follower_masks[i].interior_vector()
    W = stepper.march_forward(w0_int, src)
    return W, phis, vs


def solve_nash_fixed_point(
    spec: ProblemSpec,
    f=None,
    tol_rel=1e-12,
    max_iter=200,
    damping=1.0,
    stepper=None,
    extra_source=None,
    on_sweep=None,
) -> NashSolution:
    """Contraction fixed point z -> w^z over the coupled optimality system.

    Convergence is measured in the discrete L2(Q) norm of the state-iterate
    change.  Raises ContractionFailure when the change norm grows for
    DIVERGENCE_PATIENCE consecutive sweeps, MaxIterations otherwise.
    extra_source, when given, is an unmasked interior source added to the
    state equation (the frozen constant term of semilinear sweeps);
    on_sweep(it, W, vs, change) is called after every sweep.
    """
    stepper = stepper or TimeStepper(spec)
    grid = spec.grid
    w0_int = grid.to_interior(spec.w0)
    f_src = control_sources(spec, f=f)
    if extra_source is not None:
        f_src = f_src + extra_source
    z = np.zeros((grid.nt + 1, grid.n_interior))
    history = []
    grow_streak = 0
    last = None
    for it in range(1, max_iter + 1):
        W, phis, vs = _sweep(spec, stepper, z, f_src, w0_int)
        change = q_norm(grid, W - z)
        history.append(change)
        if on_sweep is not None:
            on_sweep(it, W, vs, change)
        if not np.isfinite(change):
            raise ContractionFailure(
                f"iterate diverged to non-finite values at sweep {it}",
                ratio=math.inf,
                iterations=it,
            )
        if last is not None and change > last:
            grow_streak += 1
            if grow_streak >= DIVERGENCE_PATIENCE:
                ratio = change / max(last, TINY)
                raise ContractionFailure(
                    f"change norm grew {grow_streak} consecutive sweeps "
                    f"(last ratio {ratio:.3g})",
                    ratio=ratio,
                    iterations=it,
                )
        else:
            grow_streak = 0
        last = change
        scale = max(q_norm(grid, z), q_norm(grid, W), TINY)
        if change <= tol_rel * scale or change == 0.0:
            sol = _package_solution(spec, W, phis, vs, it, history)
            sol.residuals = verify_first_order(spec, f, sol, stepper=stepper)
            return sol
        z = z + damping * (W - z)
    raise MaxIterations(
        f"Nash fixed point did not converge in {max_iter} sweeps",
        best=None,
        iterations=max_iter,
        history=history,
    )


def _package_solution(spec, W, phis, vs, iterations, history):
    grid = spec.grid
    return NashSolution(
        w=SpaceTimeField.from_interior(grid, W),
        phi1=SpaceTimeField.from_interior(grid, phis[0]),
        phi2=SpaceTimeField.from_interior(grid, phis[1]),
        v1=SpaceTimeField.from_interior(grid, vs[0]),
        v2=SpaceTimeField.from_interior(grid, vs[1]),
        iterations=iterations,
        history=list(history),
    )


def solve_nash_richardson(spec: ProblemSpec, f=None, step=None, tol_rel=1e-10, max_iter=2000, stepper=None):
    """Richardson iteration on the equilibrium equation A(v) = B.

    Cross-check path; A is coercive but not symmetric, so CG does not
    apply.  Returns (v1, v2) SpaceTimeFields.
    """
    stepper = stepper or TimeStepper(spec)
    grid = spec.grid
    if step is None:
        step = 0.9 / max(spec.mu)
    b1, b2 = compute_rhs(spec, f=f, stepper=stepper)
    v1 = SpaceTimeField.zeros(grid)
    v2 = SpaceTimeField.zeros(grid)
    bnorm = max(q_norm(grid, b1.interior()), q_norm(grid, b2.interior()), TINY)
    for _ in range(max_iter):
        r1, r2 = apply_A(spec, v1, v2, stepper=stepper)
        g1 = r1.interior() - b1.interior()
        g2 = r2.interior() - b2.interior()
        res = max(q_norm(grid, g1), q_norm(grid, g2))
        if res <= tol_rel * bnorm:
            return v1, v2
        v1 = SpaceTimeField.from_interior(grid, v1.interior() - step * g1)
        v2 = SpaceTimeField.from_interior(grid, v2.interior() - step * g2)
    raise MaxIterations(f"Richardson did not reach tol {tol_rel:.1e}", iterations=max_iter)


def dense_oracle_nash(spec: ProblemSpec, f=None, max_unknowns=20000) -> NashSolution:
    """Direct solve of the full space-time optimality system.

    Stacks all levels of (w, phi_1, phi_2) into one sparse linear system
    and factorizes it; the reference the fixed point is tested against.
    """
    stepper = TimeStepper(spec)
    grid = spec.grid
    n = grid.n_interior
    nt = grid.nt
    total = 3 * nt * n
    if total > max_unknowns:
        raise TooLarge(f"{total} stacked unknowns exceed the {max_unknowns} oracle cap")
    dt = grid.dt
    chi = [m.interior_vector() for m in spec.follower_masks]
    chid = [m.interior_vector() for m in spec.target_masks]
    wd = [t.interior() for t in spec.targets]
    w0_int = grid.to_interior(spec.w0)
    f_src = control_sources(spec, f=f)

    def w_idx(j):  # w^j, j = 1..nt
        return (j - 1) * n

    def p_idx(i, k):  # phi_i^k, k = 0..nt-1
        return nt * n + i * nt * n + k * n

    rows = []
    cols = []
    vals = []
    rhs = np.zeros(total)
    eyes = sp.identity(n, format="coo")

    def put(block, r0, c0, scale=1.0):
        blk = block.tocoo()
        rows.extend(blk.row + r0)
        cols.extend(blk.col + c0)
        vals.extend(blk.data * scale)

    for j in range(1, nt + 1):
        r0 = w_idx(j)
        put(stepper.step_matrix(j, "forward"), r0, w_idx(j))
        if j >= 2:
            put(eyes, r0, w_idx(j - 1), -1.0)
        for i in range(2):
            put(sp.diags(chi[i] * (dt / spec.mu[i])).tocoo(), r0, p_idx(i, j - 1))
        rhs[r0 : r0 + n] += dt * f_src[j]
        if j == 1:
            rhs[r0 : r0 + n] += w0_int
    for i in range(2):
        for j in range(1, nt + 1):
            r0 = p_idx(i, j - 1)
            put(stepper.step_matrix(j, "adjoint").T.tocoo(), r0, p_idx(i, j - 1))
            if j <= nt - 1:
                put(eyes, r0, p_idx(i, j), -1.0)
            put(sp.diags(chid[i] * (dt * spec.alpha[i])).tocoo(), r0, w_idx(j), -1.0)
            rhs[r0 : r0 + n] += -dt * spec.alpha[i] * chid[i] * wd[i][j]

    A = sp.csr_matrix((vals, (rows, cols)), shape=(total, total))
    x = factorize(A).solve(rhs)

    W = np.zeros((nt + 1, n))
    W[0] = w0_int
    for j in range(1, nt + 1):
        W[j] = x[w_idx(j) : w_idx(j) + n]
    phis = []
    for i in range(2):
        P = np.zeros((nt + 1, n))
        for k in range(nt):
            P[k] = x[p_idx(i, k) : p_idx(i, k) + n]
        phis.append(P)
    vs = _controls_from_adjoints(spec, phis)
    sol = _package_solution(spec, W, phis, vs, 1, [0.0])
    sol.residuals = verify_first_order(spec, f, sol)
    return sol


def _raw_residuals(spec, W, v_arrays, stepper):
    grid = spec.grid
    out = []
    for i in range(2):
        chid = spec.target_masks[i].interior_vector()
        wd = spec.targets[i].interior()
        adj = _response_adjoint(spec, i, (W - wd) * chid, stepper)
        vi = v_arrays[i]
        r = spec.alpha[i] * adj + spec.mu[i] * vi
        scale = max(q_norm(grid, spec.mu[i] * vi), TINY)
        out.append(q_norm(grid, r) / scale)
    return tuple(out)


def verify_first_order(spec: ProblemSpec, f, solution: NashSolution, stepper=None):
    """Relative stationarity residual of each follower's cost.

    r_i = alpha_i A_i*((w - w_id) chi_di) + mu_i v_i, reported relative to
    max(||mu_i v_i||, tiny).
    """
    stepper = stepper or TimeStepper(spec)
    return _raw_residuals(spec, solution.w.interior(),
                          [v.interior() for v in solution.controls], stepper)


def cost_followers(spec: ProblemSpec, f, v1, v2, w=None, stepper=None):
    """Discrete follower costs, in the same quadrature the optimality
    system is derived from (right-endpoint rule in time)."""
    stepper = stepper or TimeStepper(spec)
    grid = spec.grid
    if w is None:
        from .operators import solve_forward

        w = solve_forward(spec, f=f, v1=v1, v2=v2, stepper=stepper)
    W = w.interior()
    out = []
    for i in range(2):
        chid = spec.target_masks[i].interior_vector()
        dev = (W - spec.targets[i].interior()) * np.sqrt(chid)
        vi = (v1, v2)[i].interior() * np.sqrt(spec.follower_masks[i].interior_vector())
        ji = 0.5 * spec.alpha[i] * q_norm(grid, dev) ** 2 + 0.5 * spec.mu[i] * q_norm(grid, vi) ** 2
        out.append(ji)
    return tuple(out)


def cost_leader(spec: ProblemSpec, f):
    grid = spec.grid
    chi = np.sqrt(spec.leader_mask.interior_vector())
    return 0.5 * q_norm(grid, f.interior() * chi) ** 2


def _response_norm(spec, i, target, stepper, iters, seed):
    """Operator norm of v -> chi_{target,d} A_i v via power iteration."""
    grid = spec.grid
    n = grid.n_interior
    nt = grid.nt
    chi = spec.follower_masks[i].interior_vector()
    chid = spec.target_masks[target].interior_vector()

    def as_levels(vec):
        arr = np.zeros((nt + 1, n))
        arr[1:] = vec.reshape(nt, n)
        return arr

    def apply(vec):
        src = as_levels(vec) * chi
        W = stepper.march_forward(np.zeros(n), src)
        return (W[1:] * chid).reshape(-1)

    def apply_adjoint(vec):
        out = _response_adjoint(spec, i, as_levels(vec) * chid, stepper)
        return out[1:].reshape(-1)

    est = operator_norm(apply, apply_adjoint, nt * n, iters=iters, seed=seed)
    return est.value


def diagnostics(spec: ProblemSpec, norm_iters=60, probe=True, probe_tol=1e-10, seed=0) -> NashDiagnostics:
    """Contraction diagnostics: response-norm bound M0, coercivity margin,
    and a measured per-sweep contraction factor from a probe run."""
    stepper = TimeStepper(spec)
    m0 = 0.0
    for i in range(2):
        for target in range(2):
            m0 = max(m0, _response_norm(spec, i, target, stepper, norm_iters, seed))
    amax = max(spec.alpha)
    if amax == 0.0:
        margin = math.inf
    else:
        margin = 4.0 * min(spec.mu) / amax - m0 * m0 - 4.0
    factor = 0.0
    if probe:
        probe_spec = spec
        if not np.any(spec.w0) and all(not np.any(t.values) for t in spec.targets):
            rng = np.random.default_rng(seed)
            probe_spec = spec.with_(w0=spec.grid.from_interior(rng.standard_normal(spec.grid.n_interior)))
        try:
            sol = solve_nash_fixed_point(probe_spec, tol_rel=probe_tol, max_iter=200, stepper=None)
            h = sol.history
            ratios = [h[k + 1] / h[k] for k in range(len(h) - 1) if h[k] > 0]
            factor = float(np.median(ratios)) if ratios else 0.0
        except ContractionFailure as exc:
            factor = float(exc.ratio)
    return NashDiagnostics(m0_estimate=m0, coercivity_margin=margin, contraction_factor=factor)
