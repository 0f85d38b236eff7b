"""Benchmark problems and high-accuracy reference-data generation.

Four stiff systems with known polynomial right-hand sides:

  linear1d     y' = -10000 y,                 y(0) = 1000,      t in [0, 0.01]
  linear10d    tridiagonal 10-D linear decay, y_i(0) = 20,      t in [0, 0.4]
  nonlinear3d  3-D quadratic system,          y(0) = (15,7,10), t in [0, 5]
  vanderpol    x' = y, y' = mu(1-x^2)y - x,   (1, 0), mu=1000,  t in [0, 1300]

Reference trajectories for the linear problems are the exact matrix-exponential
solution evaluated at the grid points. Nonlinear problems are integrated one
output interval at a time with fixed-step Radau5 sub-stepping, doubling the
number of sub-steps until two successive refinement levels agree componentwise
to REF_RTOL; the finer level is emitted, so acceptance is a directly testable
self-convergence statement rather than trust in an error estimator.
"""

from dataclasses import dataclass

import numpy as np

from . import matexp, odeint
from .pinet import RecoveredModel
from .train import TrajectoryDataset

REF_RTOL = 1e-10          # per-component agreement between refinement levels
MAX_REFINEMENT = 24       # levels of sub-step doubling before giving up
VDP_PERIOD = 1613.7       # leading-order relaxation period (3 - 2 ln 2) * mu


class RefinementFailed(Exception):
    """Successive Radau5 refinements never agreed within the allowed depth."""


# ---------------------------------------------------------------------------
# problem definitions


@dataclass(frozen=True)
class BenchmarkProblem:
    name: str
    dim: int
    field: odeint.VectorField
    truth: RecoveredModel
    y0: np.ndarray
    t_span: tuple
    degree: int               # polynomial degree sufficient to represent the field
    linear: np.ndarray = None  # coefficient matrix when the field is linear
    n_values: tuple = ()       # grid sizes used in the reported sweeps


def make_decay(lam=1.0):
    """The scalar test equation y' = -lam y (non-stiff control problem)."""
    lam = float(lam)
    return odeint.VectorField(
        f=lambda y: -lam * y,
        jac=lambda y: np.array([[-lam]]),
        dim=1,
        name=f"decay{lam:g}",
        f_many=lambda y: -lam * y,
        jac_many=lambda y: np.broadcast_to(np.array([[-lam]]), (y.shape[0], 1, 1)),
    )


def make_vanderpol(mu):
    """Van der Pol oscillator x' = y, y' = mu (1 - x^2) y - x."""
    mu = float(mu)

    def f(s):
        x, y = s
        return np.array([y, mu * (1.0 - x * x) * y - x])

    def jac(s):
        x, y = s
        return np.array([[0.0, 1.0], [-2.0 * mu * x * y - 1.0, mu * (1.0 - x * x)]])

    def f_many(s):
        x, y = s[:, 0], s[:, 1]
        return np.stack([y, mu * (1.0 - x * x) * y - x], axis=1)

    def jac_many(s):
        x, y = s[:, 0], s[:, 1]
        out = np.empty((s.shape[0], 2, 2))
        out[:, 0, 0] = 0.0
        out[:, 0, 1] = 1.0
        out[:, 1, 0] = -2.0 * mu * x * y - 1.0
        out[:, 1, 1] = mu * (1.0 - x * x)
        return out

    return odeint.VectorField(f=f, jac=jac, dim=2, name=f"vanderpol{mu:g}",
                              f_many=f_many, jac_many=jac_many)


def _linear_field(a, name):
    a = np.asarray(a, dtype=float)
    return odeint.VectorField(
        f=lambda y: a @ y,
        jac=lambda y: a,
        dim=a.shape[0],
        name=name,
        f_many=lambda y: y @ a.T,
        jac_many=lambda y: np.broadcast_to(a, (y.shape[0],) + a.shape),
    )


def _linear_truth(a):
    a = np.asarray(a, dtype=float)
    d = a.shape[0]
    coeffs = []
    for o in range(d):
        cmap = {}
        for j in range(d):
            if a[o, j] != 0.0:
                e = [0] * d
                e[j] = 1
                cmap[tuple(e)] = float(a[o, j])
        coeffs.append(cmap)
    return RecoveredModel(m=d, degree=1, coeffs=tuple(coeffs))


def _build_linear1d():
    a = np.array([[-10000.0]])
    return BenchmarkProblem(
        name="linear1d", dim=1, field=_linear_field(a, "linear1d"),
        truth=_linear_truth(a), y0=np.array([1000.0]), t_span=(0.0, 0.01),
        degree=1, linear=a, n_values=(5, 10, 25, 50, 100, 200, 1000, 10000))


def _build_linear10d():
    diag = np.array([-10.0, -20.0, -50.0, -100.0, -500.0,
                     -1000.0, -5000.0, -10000.0, -20000.0, -50000.0])
    a = np.diag(diag)
    for i in range(9):
        a[i, i + 1] = 5.0
        a[i + 1, i] = 5.0
    return BenchmarkProblem(
        name="linear10d", dim=10, field=_linear_field(a, "linear10d"),
        truth=_linear_truth(a), y0=np.full(10, 20.0), t_span=(0.0, 0.4),
        degree=1, linear=a, n_values=(10, 17, 25, 50, 100, 250, 1000))


def _build_nonlinear3d():
    def f(y):
        y1, y2, y3 = y
        return np.array([
            -500.0 * y1 + 3.8 * y2 * y2 + 1.35 * y3,
            0.82 * y1 - 24.0 * y2 + 7.5 * y3 * y3,
            -0.5 * y1 * y1 + 1.85 * y2 - 6.5 * y3 * y3,
        ])

    def jac(y):
        y1, y2, y3 = y
        return np.array([
            [-500.0, 7.6 * y2, 1.35],
            [0.82, -24.0, 15.0 * y3],
            [-1.0 * y1, 1.85, -13.0 * y3],
        ])

    def f_many(y):
        y1, y2, y3 = y[:, 0], y[:, 1], y[:, 2]
        return np.stack([
            -500.0 * y1 + 3.8 * y2 * y2 + 1.35 * y3,
            0.82 * y1 - 24.0 * y2 + 7.5 * y3 * y3,
            -0.5 * y1 * y1 + 1.85 * y2 - 6.5 * y3 * y3,
        ], axis=1)

    def jac_many(y):
        y1, y2, y3 = y[:, 0], y[:, 1], y[:, 2]
        out = np.zeros((y.shape[0], 3, 3))
        out[:, 0, 0] = -500.0
        out[:, 0, 1] = 7.6 * y2
        out[:, 0, 2] = 1.35
        out[:, 1, 0] = 0.82
        out[:, 1, 1] = -24.0
        out[:, 1, 2] = 15.0 * y3
        out[:, 2, 0] = -1.0 * y1
        out[:, 2, 1] = 1.85
        out[:, 2, 2] = -13.0 * y3
        return out

    truth = RecoveredModel(m=3, degree=2, coeffs=(
        {(1, 0, 0): -500.0, (0, 2, 0): 3.8, (0, 0, 1): 1.35},
        {(1, 0, 0): 0.82, (0, 1, 0): -24.0, (0, 0, 2): 7.5},
        {(2, 0, 0): -0.5, (0, 1, 0): 1.85, (0, 0, 2): -6.5},
    ))
    field = odeint.VectorField(f=f, jac=jac, dim=3, name="nonlinear3d",
                               f_many=f_many, jac_many=jac_many)
    return BenchmarkProblem(
        name="nonlinear3d", dim=3, field=field, truth=truth,
        y0=np.array([15.0, 7.0, 10.0]), t_span=(0.0, 5.0),
        degree=2, n_values=(48, 94, 369, 1467))


def _build_vanderpol():
    mu = 1000.0
    truth = RecoveredModel(m=2, degree=3, coeffs=(
        {(0, 1): 1.0},
        {(0, 1): mu, (2, 1): -mu, (1, 0): -1.0},
    ))
    return BenchmarkProblem(
        name="vanderpol", dim=2, field=make_vanderpol(mu), truth=truth,
        y0=np.array([1.0, 0.0]), t_span=(0.0, 1300.0),
        degree=3, n_values=(100, 391, 1555, 6213, 24849))


PROBLEMS = {
    p.name: p for p in (
        _build_linear1d(), _build_linear10d(), _build_nonlinear3d(), _build_vanderpol())
}


def get_problem(name):
    try:
        return PROBLEMS[name]
    except KeyError:
        raise ValueError(
            f"unknown problem {name!r}; choose from {', '.join(sorted(PROBLEMS))}") from None


def truth_mismatch(problem, n=100, seed=0):
    """Max |field(y) - truth(y)| / (1 + |field(y)|) over random states.

    Scale-aware agreement witness between the closed-form field and its stored
    coefficient map (entries reach 5e4, so raw differences sit at the float
    resolution of the values themselves).
    """
    rng = np.random.default_rng(seed)
    states = rng.uniform(-2.0, 2.0, size=(n, problem.dim))
    worst = 0.0
    for s in states:
        fv = np.asarray(problem.field.f(s), dtype=float)
        worst = max(worst, float(np.max(np.abs(fv - problem.truth.evaluate(s))
                                        / (1.0 + np.abs(fv)))))
    return worst


# ---------------------------------------------------------------------------
# reference generation


def _radau5_substeps(field, y0, h_total, k, counters):
    """k equal Radau5 steps across one interval; undamped stacked Newton.

    Coarse levels are allowed to fail (NewtonDiverged); the refinement loop
    simply moves to the next depth.
    """
    a = odeint.RADAU5.a
    s, d = 3, y0.shape[0]
    eye = np.eye(s * d)
    h = h_total / k
    y = y0
    for _ in range(k):
        z = np.tile(y, s).reshape(s, d)
        for _it in range(odeint.NEWTON_MAX_ITER):
            fvals = field.eval_many(z)
            counters["f"] += s
            resid = z - y[None, :] - h * (a @ fvals)
            if np.max(np.abs(resid)) <= odeint.NEWTON_TOL:
                break
            jacs = field.jac_eval_many(z)
            counters["jac"] += s
            blocks = -h * a[:, :, None, None] * jacs[None, :, :, :]
            mat = eye + blocks.transpose(0, 2, 1, 3).reshape(s * d, s * d)
            dz = np.linalg.solve(mat, -resid.reshape(s * d))
            z = z + dz.reshape(s, d)
            if not np.all(np.isfinite(z)):
                raise odeint.NewtonDiverged("non-finite stage values")
        else:
            raise odeint.NewtonDiverged(
                f"no stage convergence in {odeint.NEWTON_MAX_ITER} iterations")
        y = z[-1]
    return y


def _refine_interval(field, y0, h_total, start_depth, counters, agree_rtol):
    """Double sub-steps until two successive levels agree to agree_rtol."""
    prev = None
    for depth in range(start_depth, MAX_REFINEMENT + 1):
        try:
            cur = _radau5_substeps(field, y0, h_total, 2 ** depth, counters)
        except odeint.NewtonDiverged:
            prev = None
            continue
        if prev is not None:
            tol = agree_rtol * (1.0 + np.maximum(np.abs(cur), np.abs(prev)))
            if np.all(np.abs(cur - prev) <= tol):
                return cur, depth
        prev = cur
    raise RefinementFailed(
        f"no agreement to {agree_rtol:g} within {MAX_REFINEMENT} refinement levels")


def reference_states(field, y0, t_grid, linear=None, agree_rtol=REF_RTOL):
    """Reference trajectory at the grid points; returns (states, stats).

    Linear fields get the exact expm solution; anything else is integrated by
    self-convergent Radau5 sub-stepping, one output interval at a time.
    agree_rtol is the per-component agreement threshold between successive
    refinement levels; dataset generation uses the tight REF_RTOL default,
    while the stiffness demonstration dials it to the explicit solver's
    tolerance so both sides chase the same accuracy.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    if linear is not None:
        # advance with the per-interval propagator expm(A*h) so the sampled
        # states are bit-consistent with the one-step flow map on this grid;
        # evaluating expm(A*t_k) from scratch at every grid point instead
        # leaves O(eps) path differences that dominate the smallest slaved
        # components of stiff systems
        a = np.asarray(linear, dtype=float)
        hs = np.diff(t_grid)
        props = {h: matexp.expm(a * h).value for h in np.unique(hs)}
        states = np.empty((len(t_grid), y0.shape[0]))
        states[0] = y0
        for i, h in enumerate(hs):
            states[i + 1] = props[h] @ states[i]
        return states, {"generator": "expm-exact", "max_refinement_depth": 0,
                        "field_evals": 0, "jacobian_evals": 0}
    counters = {"f": 0, "jac": 0}
    states = np.empty((len(t_grid), y0.shape[0]))
    states[0] = y0
    depth = 0
    max_depth = 0
    for i in range(len(t_grid) - 1):
        h = float(t_grid[i + 1] - t_grid[i])
        yi, depth = _refine_interval(field, states[i], h, max(depth - 2, 0),
                                     counters, agree_rtol)
        states[i + 1] = yi
        max_depth = max(max_depth, depth)
    return states, {"generator": "radau5-selfconverged", "tolerance": agree_rtol,
                    "max_refinement_depth": max_depth,
                    "field_evals": counters["f"], "jacobian_evals": counters["jac"]}


def generate_reference(problem, n, t_span=None):
    """Uniform n-point reference dataset for a registered benchmark problem."""
    if isinstance(problem, str):
        problem = get_problem(problem)
    if n < 2:
        raise ValueError("need n >= 2 grid points")
    t0, t1 = t_span if t_span is not None else problem.t_span
    t_grid = np.linspace(float(t0), float(t1), int(n))
    states, stats = reference_states(problem.field, problem.y0, t_grid,
                                     linear=problem.linear)
    provenance = {"problem": problem.name, "span": [float(t0), float(t1)], **stats}
    return TrajectoryDataset(times=t_grid, states=states, name=problem.name,
                             provenance=provenance)


# ---------------------------------------------------------------------------
# stiffness demonstration


@dataclass
class StiffnessRecord:
    problem: str
    t_span: tuple
    rtol: float
    atol: float
    n_points: int
    rkf45_evals: int
    rkf45_accepted: int
    rkf45_rejected: int
    radau_evals: int
    radau_jacobian_evals: int
    radau_max_depth: int

    @property
    def ratio(self):
        return self.rkf45_evals / max(self.radau_evals, 1)

    def to_json_dict(self):
        return {
            "problem": self.problem,
            "t_span": list(self.t_span),
            "rtol": self.rtol,
            "atol": self.atol,
            "n_points": self.n_points,
            "rkf45": {"function_evals": self.rkf45_evals,
                      "accepted_steps": self.rkf45_accepted,
                      "rejected_steps": self.rkf45_rejected},
            "radau5_reference": {"function_evals": self.radau_evals,
                                 "jacobian_evals": self.radau_jacobian_evals,
                                 "max_refinement_depth": self.radau_max_depth},
            "eval_ratio": self.ratio,
        }


def stiffness_demo(field=None, y0=None, t_span=None, n_points=2500,
                   rtol=1e-3, atol=1e-6):
    """Explicit-vs-implicit cost comparison on one oscillation of a stiff system.

    Defaults to Van der Pol with mu=1000 over one relaxation period: the
    adaptive explicit RKF45 pair must crawl at its stability limit, while the
    Radau5-based reference generator covers the same span in a fixed number of
    output intervals. Both sides run at the same accuracy target: rtol is used
    as the RKF45 relative tolerance and as the refinement agreement threshold,
    so the evaluation-count ratio compares solvers, not tolerance settings.
    Returns both evaluation counts and their ratio.
    """
    if field is None:
        field = make_vanderpol(1000.0)
        y0 = np.array([1.0, 0.0]) if y0 is None else y0
        t_span = (0.0, VDP_PERIOD) if t_span is None else t_span
    if y0 is None or t_span is None:
        raise ValueError("custom fields need explicit y0 and t_span")
    y0 = np.asarray(y0, dtype=float)
    adaptive = odeint.integrate_rkf45_adaptive(field, y0, t_span, rtol=rtol, atol=atol)
    t_grid = np.linspace(float(t_span[0]), float(t_span[1]), int(n_points))
    _states, stats = reference_states(field, y0, t_grid, agree_rtol=rtol)
    return StiffnessRecord(
        problem=field.name,
        t_span=(float(t_span[0]), float(t_span[1])),
        rtol=rtol, atol=atol, n_points=int(n_points),
        rkf45_evals=adaptive.nfev,
        rkf45_accepted=adaptive.naccept,
        rkf45_rejected=adaptive.nreject,
        radau_evals=stats["field_evals"],
        radau_jacobian_evals=stats["jacobian_evals"],
        radau_max_depth=stats["max_refinement_depth"],
    )
