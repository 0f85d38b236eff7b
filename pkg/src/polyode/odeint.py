"""Single-step integrators for autonomous ODE systems y' = f(y).

Explicit methods (Euler, RK4, adaptive RKF45), fully implicit stiff methods
(backward Euler, trapezoid, Radau IIA of orders 3 and 5) solved by a damped
Newton iteration, and the integrating-factor Euler method

    L = df/dy(y_n),  N = f(y_n) - L y_n,
    y_{n+1} = e^{L h} (y_n + h N)

which freezes the Jacobian at the start of each step, integrates the linear
part exactly via the matrix exponential, and treats the remainder with one
Euler term. It is explicit (no nonlinear solve), first order on nonlinear
problems, and exact on linear constant-coefficient systems.

Gradients of implicit steps never unroll Newton: a converged step is a root of
its residual g, and reverse-mode cotangents are pulled back through the root
with the implicit function theorem (solve with the transposed residual
Jacobian, then one reverse sweep through g's definition).
"""

import inspect
from dataclasses import dataclass

import numpy as np

from . import densela, matexp
from .autodiff import Tape, Tensor, constant, custom, expm_t, leaf, stop_gradient


class NewtonDiverged(Exception):
    """Newton failed: max iterations, repeated residual growth, or non-finite iterates."""

    def __init__(self, message, iters=None, residual_norm=None, segment=None, interval=None):
        super().__init__(message)
        self.iters = iters
        self.residual_norm = residual_norm
        self.segment = segment
        self.interval = interval


class SingularJacobian(Exception):
    """The Newton (or IFT) linear system is numerically singular."""


class MinStepReached(Exception):
    """Adaptive step control pushed h below the representable floor."""


NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
NEWTON_MAX_RESIDUAL_GROWTH = 5  # consecutive line-searched increases before giving up

# Running totals of per-state field/Jacobian evaluations in the batched
# training paths (each batch row counts once). Snapshot-and-subtract to meter
# a training run; single-step drivers report their own counts instead.
EVAL_COUNTS = {"f": 0, "jac": 0}


def reset_eval_counts():
    EVAL_COUNTS["f"] = 0
    EVAL_COUNTS["jac"] = 0


# ---------------------------------------------------------------------------
# vector fields


@dataclass(frozen=True)
class VectorField:
    """Autonomous vector field with an analytic Jacobian.

    `f` maps (d,) -> (d,); `jac` maps (d,) -> (d, d). Optional batched variants
    (`f_many`, `jac_many` over (B, d)) let network-backed fields avoid Python
    loops in the hot paths.
    """

    f: object
    jac: object
    dim: int
    name: str = ""
    f_many: object = None
    jac_many: object = None

    def __post_init__(self):
        params = [p for p in inspect.signature(self.f).parameters.values()
                  if p.default is inspect.Parameter.empty
                  and p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
        if len(params) != 1:
            raise ValueError("fields are autonomous: f must take exactly one argument y")

    def eval_many(self, y):
        if self.f_many is not None:
            return np.asarray(self.f_many(y), dtype=float)
        return np.stack([np.asarray(self.f(row), dtype=float) for row in y])

    def jac_eval_many(self, y):
        if self.jac_many is not None:
            return np.asarray(self.jac_many(y), dtype=float)
        return np.stack([np.asarray(self.jac(row), dtype=float) for row in y])


def field_from_pinet(net, params):
    """Adapt a polynomial network (plus optional known term) to a VectorField."""
    if net.m_out != net.m:
        raise ValueError("a vector field needs m_out == m")
    params = np.asarray(params, dtype=float)
    return VectorField(
        f=lambda y: net.forward(params, y),
        jac=lambda y: net.state_jacobian(params, y),
        dim=net.m,
        name="pinet",
        f_many=lambda y: net.forward(params, y),
        jac_many=lambda y: net.state_jacobian(params, y),
    )


# ---------------------------------------------------------------------------
# tableaus


@dataclass(frozen=True)
class ButcherTableau:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int
    name: str

    def validate(self):
        a, b, c = self.a, self.b, self.c
        s = len(b)
        if a.shape != (s, s) or c.shape != (s,):
            raise ValueError(f"{self.name}: inconsistent tableau shapes")
        if abs(float(b.sum()) - 1.0) > 1e-14:
            raise ValueError(f"{self.name}: weights must sum to 1")
        if np.max(np.abs(a.sum(axis=1) - c)) > 1e-14:
            raise ValueError(f"{self.name}: row sums must equal the nodes c")
        return self

    @property
    def stiffly_accurate(self):
        return abs(float(self.c[-1]) - 1.0) < 1e-14 and np.max(np.abs(self.a[-1] - self.b)) < 1e-14


def _radau3():
    a = np.array([[5.0 / 12.0, -1.0 / 12.0],
                  [3.0 / 4.0, 1.0 / 4.0]])
    b = np.array([3.0 / 4.0, 1.0 / 4.0])
    c = np.array([1.0 / 3.0, 1.0])
    return ButcherTableau(a=a, b=b, c=c, order=3, name="radau3").validate()


def _radau5():
    r = np.sqrt(6.0)
    a = np.array([
        [(88.0 - 7.0 * r) / 360.0, (296.0 - 169.0 * r) / 1800.0, (-2.0 + 3.0 * r) / 225.0],
        [(296.0 + 169.0 * r) / 1800.0, (88.0 + 7.0 * r) / 360.0, (-2.0 - 3.0 * r) / 225.0],
        [(16.0 - r) / 36.0, (16.0 + r) / 36.0, 1.0 / 9.0],
    ])
    b = np.array([(16.0 - r) / 36.0, (16.0 + r) / 36.0, 1.0 / 9.0])
    c = np.array([(4.0 - r) / 10.0, (4.0 + r) / 10.0, 1.0])
    return ButcherTableau(a=a, b=b, c=c, order=5, name="radau5").validate()


def _backward_euler_tableau():
    return ButcherTableau(a=np.array([[1.0]]), b=np.array([1.0]), c=np.array([1.0]),
                          order=1, name="backward-euler").validate()


RADAU3 = _radau3()
RADAU5 = _radau5()
BACKWARD_EULER = _backward_euler_tableau()

for _tab in (RADAU3, RADAU5, BACKWARD_EULER):
    assert _tab.stiffly_accurate, _tab.name


# ---------------------------------------------------------------------------
# step results


@dataclass
class StepDiagnostics:
    nfev: int = 0
    njev: int = 0
    newton_iters: int = 0
    residual_norm: float = 0.0
    converged: bool = True


@dataclass
class StepResult:
    y: np.ndarray
    diagnostics: StepDiagnostics


# ---------------------------------------------------------------------------
# Newton cores

def _newton_single(residual, jacobian, z0, tol, max_iter):
    """Damped Newton on one system, linear solves through densela.

    Returns (z, iters, residual_norm, n_residual_evals, n_jac_evals).
    """
    z = np.array(z0, dtype=float)
    r = residual(z)
    nres, njac = 1, 0
    rnorm = densela.norm_inf(r)
    growth = 0
    for it in range(1, max_iter + 1):
        if rnorm <= tol:
            return z, it - 1, rnorm, nres, njac
        if not np.isfinite(rnorm):
            raise NewtonDiverged("non-finite residual", iters=it - 1, residual_norm=rnorm)
        jac = jacobian(z)
        njac += 1
        try:
            dz = densela.solve(jac, -r)
        except densela.SingularMatrix as exc:
            raise SingularJacobian(str(exc)) from exc
        scale = 1.0
        for attempt in range(5):  # full step plus up to 4 halvings
            z_try = z + scale * dz
            r_try = residual(z_try)
            nres += 1
            rn_try = densela.norm_inf(r_try)
            if np.isfinite(rn_try) and (rn_try <= rnorm or attempt == 4):
                break
            scale *= 0.5
        growth = growth + 1 if rn_try >= rnorm else 0
        z, r, rnorm = z_try, r_try, rn_try
        if not np.isfinite(rnorm):
            raise NewtonDiverged("non-finite residual", iters=it, residual_norm=rnorm)
        if growth >= NEWTON_MAX_RESIDUAL_GROWTH:
            raise NewtonDiverged(
                f"residual grew {growth} consecutive iterations",
                iters=it, residual_norm=rnorm)
    if rnorm <= tol:
        return z, max_iter, rnorm, nres, njac
    raise NewtonDiverged(f"no convergence in {max_iter} iterations",
                         iters=max_iter, residual_norm=rnorm)


def _newton_batch(residual, jacobian, z0, tol, max_iter):
    """Damped Newton on a batch of independent systems ((B, n) unknowns).

    Linear solves use LAPACK via numpy for the batched (B, n, n) systems.
    Raises NewtonDiverged with the first offending segment index.
    """
    z = np.array(z0, dtype=float)
    r = residual(z)
    nres, njac = 1, 0
    rnorm = np.max(np.abs(r), axis=1)
    growth = np.zeros(z.shape[0], dtype=int)
    iters = np.zeros(z.shape[0], dtype=int)
    for _it in range(1, max_iter + 1):
        active = rnorm > tol
        if not bool(active.any()):
            return z, iters, rnorm, nres, njac
        if not np.all(np.isfinite(rnorm)):
            seg = int(np.argmax(~np.isfinite(rnorm)))
            raise NewtonDiverged("non-finite residual", segment=seg,
                                 residual_norm=float(rnorm[seg]), iters=int(iters[seg]))
        jac = jacobian(z)
        njac += 1
        try:
            dz = np.linalg.solve(jac, -r[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian("singular Newton matrix in batched solve") from exc
        scale = np.ones(z.shape[0])
        for attempt in range(5):
            z_try = np.where(active[:, None], z + scale[:, None] * dz, z)
            r_try = residual(z_try)
            nres += 1
            rn_try = np.max(np.abs(r_try), axis=1)
            with np.errstate(invalid="ignore"):
                bad = active & ~(rn_try <= rnorm)
            if attempt == 4 or not bool(bad.any()):
                break
            scale = np.where(bad, scale * 0.5, scale)
        grew = active & (rn_try >= rnorm)
        growth = np.where(grew, growth + 1, 0)
        iters = iters + active.astype(int)
        z, r, rnorm = z_try, r_try, rn_try
        if not np.all(np.isfinite(rnorm)):
            seg = int(np.argmax(~np.isfinite(rnorm)))
            raise NewtonDiverged("non-finite residual", segment=seg,
                                 residual_norm=float(np.nan_to_num(rnorm[seg], nan=np.inf)),
                                 iters=int(iters[seg]))
        if bool((growth >= NEWTON_MAX_RESIDUAL_GROWTH).any()):
            seg = int(np.argmax(growth >= NEWTON_MAX_RESIDUAL_GROWTH))
            raise NewtonDiverged("residual grew over consecutive iterations",
                                 segment=seg, residual_norm=float(rnorm[seg]),
                                 iters=int(iters[seg]))
    still = rnorm > tol
    if bool(still.any()):
        seg = int(np.argmax(still))
        raise NewtonDiverged(f"no convergence in {max_iter} iterations",
                             segment=seg, residual_norm=float(rnorm[seg]), iters=max_iter)
    return z, iters, rnorm, nres, njac


# ---------------------------------------------------------------------------
# explicit steps


def step_explicit_euler(field, y, h):
    y = np.asarray(y, dtype=float)
    y1 = y + h * np.asarray(field.f(y), dtype=float)
    return StepResult(y=y1, diagnostics=StepDiagnostics(nfev=1))


def step_rk4(field, y, h):
    y = np.asarray(y, dtype=float)
    k1 = np.asarray(field.f(y), dtype=float)
    k2 = np.asarray(field.f(y + 0.5 * h * k1), dtype=float)
    k3 = np.asarray(field.f(y + 0.5 * h * k2), dtype=float)
    k4 = np.asarray(field.f(y + h * k3), dtype=float)
    y1 = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return StepResult(y=y1, diagnostics=StepDiagnostics(nfev=4))


def step_if_euler(field, y, h):
    """Integrating-factor Euler: exactly one matrix exponential per step."""
    y = np.asarray(y, dtype=float)
    lin = np.asarray(field.jac(y), dtype=float)
    fy = np.asarray(field.f(y), dtype=float)
    nonlin = fy - lin @ y
    propagator = matexp.expm(lin * h).value
    y1 = propagator @ (y + h * nonlin)
    return StepResult(y=y1, diagnostics=StepDiagnostics(nfev=1, njev=1))


# ---------------------------------------------------------------------------
# implicit steps


def _step_tableau(field, y, h, tableau, newton_tol, max_iter):
    """One stiffly accurate implicit RK step; the last stage is y_{n+1}."""
    y = np.asarray(y, dtype=float)
    d = y.shape[0]
    s = len(tableau.b)
    a = tableau.a
    counters = {"nfev": 0, "njev": 0}

    def residual(zflat):
        stages = zflat.reshape(s, d)
        fvals = field.eval_many(stages)
        counters["nfev"] += s
        out = stages - y[None, :] - h * (a @ fvals)
        return out.reshape(s * d)

    def jacobian(zflat):
        stages = zflat.reshape(s, d)
        jacs = field.jac_eval_many(stages)
        counters["njev"] += s
        blocks = -h * a[:, :, None, None] * jacs[None, :, :, :]
        mat = blocks.transpose(0, 2, 1, 3).reshape(s * d, s * d)
        mat[np.arange(s * d), np.arange(s * d)] += 1.0
        return mat

    z0 = np.tile(y, s)
    z, iters, rnorm, _nres, _njac = _newton_single(residual, jacobian, z0, newton_tol, max_iter)
    y1 = z.reshape(s, d)[-1]
    return StepResult(y=y1, diagnostics=StepDiagnostics(
        nfev=counters["nfev"], njev=counters["njev"],
        newton_iters=int(iters), residual_norm=float(rnorm)))


def step_backward_euler(field, y, h, newton_tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Solve g(z) = z - y - h f(z) = 0; first order, L-stable."""
    return _step_tableau(field, y, h, BACKWARD_EULER, newton_tol, max_iter)


def step_trapezoid(field, y, h, newton_tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Solve g(z) = z - y - h/2 (f(y) + f(z)) = 0; second order, A-stable."""
    y = np.asarray(y, dtype=float)
    fy = np.asarray(field.f(y), dtype=float)
    counters = {"nfev": 1, "njev": 0}

    def residual(z):
        counters["nfev"] += 1
        return z - y - 0.5 * h * (fy + np.asarray(field.f(z), dtype=float))

    def jacobian(z):
        counters["njev"] += 1
        return np.eye(y.shape[0]) - 0.5 * h * np.asarray(field.jac(z), dtype=float)

    z, iters, rnorm, _nres, _njac = _newton_single(residual, jacobian, y.copy(), newton_tol, max_iter)
    return StepResult(y=z, diagnostics=StepDiagnostics(
        nfev=counters["nfev"], njev=counters["njev"],
        newton_iters=int(iters), residual_norm=float(rnorm)))


def step_radau3(field, y, h, newton_tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    return _step_tableau(field, y, h, RADAU3, newton_tol, max_iter)


def step_radau5(field, y, h, newton_tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    return _step_tableau(field, y, h, RADAU5, newton_tol, max_iter)


METHODS = {
    "explicit-euler": step_explicit_euler,
    "rk4": step_rk4,
    "if-euler": step_if_euler,
    "backward-euler": step_backward_euler,
    "trapezoid": step_trapezoid,
    "radau3": step_radau3,
    "radau5": step_radau5,
}

IMPLICIT_METHODS = ("backward-euler", "trapezoid", "radau3", "radau5")


# ---------------------------------------------------------------------------
# fixed-grid and adaptive drivers


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    method: str
    nfev: int = 0
    njev: int = 0
    newton_iters: int = 0


def integrate_fixed(method, field, y0, t_grid, newton_tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """March a single-step method across an increasing time grid."""
    step = METHODS[method] if isinstance(method, str) else method
    name = method if isinstance(method, str) else getattr(method, "__name__", "custom")
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or len(t_grid) < 2 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be a strictly increasing 1-d grid")
    y = np.asarray(y0, dtype=float)
    states = np.empty((len(t_grid), y.shape[0]))
    states[0] = y
    nfev = njev = niter = 0
    kwargs = {"newton_tol": newton_tol, "max_iter": max_iter} if name in IMPLICIT_METHODS else {}
    for i in range(len(t_grid) - 1):
        h = float(t_grid[i + 1] - t_grid[i])
        try:
            res = step(field, y, h, **kwargs)
        except NewtonDiverged as exc:
            exc.interval = i
            raise
        y = res.y
        states[i + 1] = y
        nfev += res.diagnostics.nfev
        njev += res.diagnostics.njev
        niter += res.diagnostics.newton_iters
    return Trajectory(times=t_grid.copy(), states=states, method=name,
                      nfev=nfev, njev=njev, newton_iters=niter)


# Fehlberg 4(5) coefficients.
_FEHLBERG_C = np.array([0.0, 0.25, 0.375, 12.0 / 13.0, 1.0, 0.5])
_FEHLBERG_A = [
    np.array([]),
    np.array([0.25]),
    np.array([3.0 / 32.0, 9.0 / 32.0]),
    np.array([1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0]),
    np.array([439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0]),
    np.array([-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0]),
]
_FEHLBERG_B4 = np.array([25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -0.2, 0.0])
_FEHLBERG_B5 = np.array([16.0 / 135.0, 0.0, 6656.0 / 12825.0, 28561.0 / 56430.0, -0.18, 2.0 / 55.0])

MIN_STEP_FRACTION = 1e-14


@dataclass
class AdaptiveResult:
    times: np.ndarray
    states: np.ndarray
    nfev: int
    naccept: int
    nreject: int


def integrate_rkf45_adaptive(field, y0, t_span, rtol=1e-3, atol=1e-6, max_steps=20_000_000):
    """Embedded Fehlberg 4(5) pair with a standard proportional controller.

    Advances the fifth-order solution; the fourth-order one supplies the error
    estimate. Every attempted step costs six evaluations, rejected or not.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    span = t1 - t0
    if span <= 0:
        raise ValueError("t_span must be increasing")
    y = np.asarray(y0, dtype=float)
    d = y.shape[0]
    f0 = np.asarray(field.f(y), dtype=float)
    nfev = 1
    # Conservative first step from the norm ratio; the controller adapts fast,
    # so this only needs the right order of magnitude (and must sit above the
    # death-spiral floor, which is reserved for genuine controller collapse).
    d0 = densela.norm_2(y)
    d1 = densela.norm_2(f0)
    h = 0.01 * (d0 + atol) / d1 if d1 > 0 else span
    h = min(span, max(h, 4.0 * MIN_STEP_FRACTION * span))
    times = [t0]
    states = [y.copy()]
    t = t0
    naccept = nreject = 0
    k = np.empty((6, d))
    while t < t1:
        remaining = t1 - t
        if remaining <= MIN_STEP_FRACTION * span:
            break  # endpoint reached to rounding
        h = min(h, remaining)
        if h < MIN_STEP_FRACTION * span:
            raise MinStepReached(f"step {h:.3e} below floor at t={t:.6g}")
        k[0] = field.f(y)
        for i in range(1, 6):
            yi = y + h * (_FEHLBERG_A[i] @ k[:i])
            k[i] = field.f(yi)
        nfev += 6
        y5 = y + h * (_FEHLBERG_B5 @ k)
        err = h * ((_FEHLBERG_B5 - _FEHLBERG_B4) @ k)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        enorm = densela.norm_2(err / scale) / np.sqrt(d)
        if enorm <= 1.0:
            t += h
            y = y5
            times.append(t)
            states.append(y.copy())
            naccept += 1
        else:
            nreject += 1
        factor = 5.0 if enorm == 0.0 else min(5.0, max(0.2, 0.9 * enorm ** -0.2))
        h *= factor
        if naccept + nreject >= max_steps:
            raise MinStepReached("step budget exhausted")
    return AdaptiveResult(times=np.asarray(times), states=np.asarray(states),
                          nfev=nfev, naccept=naccept, nreject=nreject)


# ---------------------------------------------------------------------------
# taped steps over a batch of segments (the training path)


def step_batch_t(method, net, theta, y0, h, newton_tol=NEWTON_TOL,
                 max_iter=NEWTON_MAX_ITER, freeze_linearization=False):
    """One integration step applied to a batch of segment starts, on the tape.

    theta is a flat parameter Tensor; y0 is a (B, d) array (data) or Tensor.
    Explicit methods are recorded operation by operation; implicit methods are
    solved by Newton off-tape and recorded as one node whose backward applies
    the implicit function theorem at the converged root.
    """
    if method in ("explicit-euler", "rk4", "if-euler"):
        return _explicit_batch_t(method, net, theta, y0, h, freeze_linearization)
    if method in IMPLICIT_METHODS:
        return _implicit_batch_t(method, net, theta, y0, h, newton_tol, max_iter)
    raise ValueError(f"unknown method {method!r}")


def _explicit_batch_t(method, net, theta, y0, h, freeze_linearization):
    is_t = isinstance(y0, Tensor)
    y0v = y0.value if is_t else np.asarray(y0, dtype=float)
    yt = y0 if is_t else constant(theta.tape, y0v)
    x0 = y0 if is_t else y0v  # data stays data so hybrid known terms see arrays
    bsz = y0v.shape[0]
    if method == "explicit-euler":
        EVAL_COUNTS["f"] += bsz
        return yt + h * net.forward_t(theta, x0)
    if method == "rk4":
        EVAL_COUNTS["f"] += 4 * bsz
        k1 = net.forward_t(theta, x0)
        k2 = net.forward_t(theta, yt + (0.5 * h) * k1)
        k3 = net.forward_t(theta, yt + (0.5 * h) * k2)
        k4 = net.forward_t(theta, yt + h * k3)
        return yt + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    # integrating-factor Euler
    EVAL_COUNTS["f"] += bsz
    EVAL_COUNTS["jac"] += bsz
    lin = net.state_jacobian_t(theta, x0)
    if freeze_linearization:
        lin = stop_gradient(lin)
    fy = net.forward_t(theta, x0)
    b, d = y0v.shape
    ycol = yt.reshape(b, d, 1)
    nonlin = fy - (lin @ ycol).reshape(b, d)
    prop = expm_t(lin * h)
    out = prop @ (ycol + h * nonlin.reshape(b, d, 1))
    return out.reshape(b, d)


def _implicit_batch_t(method, net, theta, y0, h, newton_tol, max_iter):
    tape = theta.tape
    theta_v = theta.value
    y0_t = y0 if isinstance(y0, Tensor) else None
    y0_v = np.asarray(y0.value if y0_t is not None else y0, dtype=float)
    bsz, d = y0_v.shape

    if method == "trapezoid":
        EVAL_COUNTS["f"] += bsz
        f_at_y0 = net.forward(theta_v, y0_v)

        def residual(z):
            EVAL_COUNTS["f"] += bsz
            return z - y0_v - 0.5 * h * (f_at_y0 + net.forward(theta_v, z))

        def jacobian(z):
            EVAL_COUNTS["jac"] += bsz
            jac = -0.5 * h * net.state_jacobian(theta_v, z)
            jac[:, np.arange(d), np.arange(d)] += 1.0
            return jac

        z, _iters, _rn, _nr, _nj = _newton_batch(residual, jacobian, y0_v.copy(),
                                                 newton_tol, max_iter)
        y1 = z

        def vjp(w):
            jac = np.eye(d)[None] - 0.5 * h * net.state_jacobian(theta_v, z)
            lam = np.linalg.solve(jac.transpose(0, 2, 1), w[..., None])[..., 0]
            inner = Tape()
            th2 = leaf(inner, theta_v)
            y0_leaf = leaf(inner, y0_v)
            r = (constant(inner, z) - y0_leaf
                 - (0.5 * h) * (net.forward_t(th2, y0_leaf) + net.forward_t(th2, constant(inner, z))))
            cot = inner.backward(r.id, seed=-lam)
            gth = cot[th2.id]
            gy = cot[y0_leaf.id]
            gth = np.zeros_like(theta_v) if gth is None else gth
            gy = np.zeros_like(y0_v) if gy is None else gy
            return (gth, gy) if y0_t is not None else (gth,)

        parents = (theta, y0_t) if y0_t is not None else (theta,)
        return custom(tape, y1, parents, vjp)

    tableau = {"backward-euler": BACKWARD_EULER, "radau3": RADAU3, "radau5": RADAU5}[method]
    a = tableau.a
    s = len(tableau.b)

    def residual(zflat):
        EVAL_COUNTS["f"] += bsz * s
        stages = zflat.reshape(bsz, s, d)
        fvals = net.forward(theta_v, stages.reshape(bsz * s, d)).reshape(bsz, s, d)
        out = stages - y0_v[:, None, :] - h * np.matmul(a, fvals)
        return out.reshape(bsz, s * d)

    def jacobian(zflat):
        EVAL_COUNTS["jac"] += bsz * s
        stages = zflat.reshape(bsz * s, d)
        jacs = net.state_jacobian(theta_v, stages).reshape(bsz, s, d, d)
        blocks = -h * a[None, :, :, None, None] * jacs[:, None, :, :, :]
        mat = blocks.transpose(0, 1, 3, 2, 4).reshape(bsz, s * d, s * d)
        mat[:, np.arange(s * d), np.arange(s * d)] += 1.0
        return mat

    z0 = np.repeat(y0_v[:, None, :], s, axis=1).reshape(bsz, s * d)
    z, _iters, _rn, _nr, _nj = _newton_batch(residual, jacobian, z0, newton_tol, max_iter)
    stages = z.reshape(bsz, s, d)
    y1 = stages[:, -1, :].copy()

    def vjp(w):
        mat = jacobian(z.reshape(bsz, s * d))
        w_ext = np.zeros((bsz, s * d))
        w_ext[:, (s - 1) * d:] = w
        lam = np.linalg.solve(mat.transpose(0, 2, 1), w_ext[..., None])[..., 0]
        lam = lam.reshape(bsz, s, d)
        inner = Tape()
        th2 = leaf(inner, theta_v)
        y0_leaf = leaf(inner, y0_v)
        fvals = net.forward_t(th2, stages.reshape(bsz * s, d))
        r = (constant(inner, stages) - y0_leaf.reshape(bsz, 1, d)
             - h * (constant(inner, a).reshape(1, s, s) @ fvals.reshape(bsz, s, d)))
        cot = inner.backward(r.id, seed=-lam)
        gth = cot[th2.id]
        gy = cot[y0_leaf.id]
        gth = np.zeros_like(theta_v) if gth is None else gth
        gy = np.zeros_like(y0_v) if gy is None else gy
        return (gth, gy) if y0_t is not None else (gth,)

    parents = (theta, y0_t) if y0_t is not None else (theta,)
    return custom(tape, y1, parents, vjp)


@dataclass
class StepGradient:
    y_next: np.ndarray
    grad_params: np.ndarray
    grad_state: np.ndarray


def ift_step_gradient(method, net, params, y_n, h, cotangent,
                      newton_tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER,
                      freeze_linearization=False):
    """Pull a cotangent on y_{n+1} back to (theta, y_n) through one step.

    For implicit methods this is the implicit-function-theorem gradient at the
    converged root (a transposed linear solve plus one reverse sweep through
    the residual); Newton itself is never differentiated. A zero cotangent
    yields exactly zero gradients.
    """
    params = np.asarray(params, dtype=float)
    y_n = np.asarray(y_n, dtype=float)
    cotangent = np.asarray(cotangent, dtype=float)
    tape = Tape()
    theta = leaf(tape, params)
    yt = leaf(tape, y_n.reshape(1, -1))
    y1 = step_batch_t(method, net, theta, yt, h, newton_tol=newton_tol,
                      max_iter=max_iter, freeze_linearization=freeze_linearization)
    cot = tape.backward(y1.id, seed=cotangent.reshape(1, -1))
    gth = cot[theta.id]
    gy = cot[yt.id]
    return StepGradient(
        y_next=y1.value[0].copy(),
        grad_params=np.zeros_like(params) if gth is None else gth,
        grad_state=np.zeros(y_n.shape) if gy is None else gy[0],
    )
