"""Independent oracle implementations used by the test suite.

Everything here is written against textbook formulas, on purpose without
importing the package internals it is used to check: eigendecomposition by
Jacobi rotations, Runge-Kutta stability functions from tableau algebra,
closed-form one-step fit coefficients for the linear decay problem, finite
differences, and log-log slope fits.
"""

import numpy as np


def jacobi_eigh(a, sweeps=60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with A = V @ diag(w) @ V.T.
    O(d^3) per sweep with full-matrix rotations -- fine for d <= 16 test use.
    """
    a = np.array(a, dtype=float)
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-8 * (1.0 + np.abs(a).max())):
        raise ValueError("jacobi_eigh needs a symmetric matrix")
    a = 0.5 * (a + a.T)
    d = a.shape[0]
    v = np.eye(d)
    scale = max(1.0, np.abs(np.diag(a)).max())
    for _ in range(sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= 1e-15 * scale:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= 1e-18 * scale:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.hypot(1.0, theta))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                rot = np.eye(d)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    return np.diag(a).copy(), v


def expm_symmetric(a):
    """e^A for symmetric A via the Jacobi eigendecomposition above."""
    w, v = jacobi_eigh(a)
    return (v * np.exp(w)[None, :]) @ v.T


def random_symmetric(rng, d, spectrum):
    """Symmetric matrix with eigenvalues drawn uniformly from `spectrum`.

    Built as V diag(w) V^T with a Haar-ish orthogonal V from QR; the returned
    matrix is exactly symmetric.
    """
    lo, hi = spectrum
    w = rng.uniform(lo, hi, size=d)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))[None, :]
    m = (q * w[None, :]) @ q.T
    return 0.5 * (m + m.T)


def stability_function(a, b, z):
    """R(z) = 1 + z b^T (I - zA)^{-1} 1 for a Runge-Kutta tableau (A, b)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    s = b.shape[0]
    k = np.linalg.solve(np.eye(s) - z * a, np.ones(s))
    return 1.0 + z * float(b @ k)


def bisect(fun, lo, hi, tol=1e-14, max_iter=200):
    """Plain bisection; requires a sign change on [lo, hi]."""
    flo, fhi = fun(lo), fun(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise ValueError("no sign change on bracket")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fmid = fun(mid)
        if fmid == 0.0 or (hi - lo) <= tol * max(1.0, abs(mid)):
            return mid
        if np.sign(fmid) == np.sign(flo):
            lo, flo = mid, fmid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def backward_euler_coefficient(lam, h):
    """The a that makes one backward Euler step fit exact decay e^{lam h}."""
    return (1.0 - np.exp(-lam * h)) / h


def trapezoid_coefficient(lam, h):
    """The a with (1 + ah/2)/(1 - ah/2) = e^{lam h}."""
    r = np.exp(lam * h)
    return (2.0 / h) * (r - 1.0) / (r + 1.0)


def radau_coefficient(a, b, lam, h):
    """The a_hat with R(a_hat h) = e^{lam h} for the given tableau, lam < 0."""
    target = np.exp(lam * h)
    fun = lambda c: stability_function(a, b, c * h) - target
    return bisect(fun, 2.0 * lam, 0.5 * lam)


def central_diff_grad(fun, x, eps=1e-6):
    """Componentwise central finite differences with per-component scaled step."""
    x = np.asarray(x, dtype=float)
    g = np.empty(x.size)
    for i in range(x.size):
        step = eps * max(1.0, abs(x.flat[i]))
        xp = x.copy().ravel()
        xm = x.copy().ravel()
        xp[i] += step
        xm[i] -= step
        g[i] = (fun(xp.reshape(x.shape)) - fun(xm.reshape(x.shape))) / (2.0 * step)
    return g.reshape(x.shape)


def loglog_slope(h_values, errors):
    """Least-squares slope of log(error) against log(h)."""
    h_values = np.asarray(h_values, dtype=float)
    errors = np.asarray(errors, dtype=float)
    mask = errors > 0
    return float(np.polyfit(np.log(h_values[mask]), np.log(errors[mask]), 1)[0])


def eval_monomials(coeffs, x):
    """Evaluate a {exponent tuple: coefficient} polynomial at a point."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for exps, c in coeffs.items():
        total += c * float(np.prod(x ** np.asarray(exps, dtype=float)))
    return total


def fixed_point_backward_euler(f, y_n, h, tol=1e-13, max_iter=10000):
    """Solve y = y_n + h f(y) by plain fixed-point iteration (small h only)."""
    y = np.asarray(y_n, dtype=float).copy()
    for _ in range(max_iter):
        y_new = y_n + h * np.asarray(f(y), dtype=float)
        if np.max(np.abs(y_new - y)) <= tol * (1.0 + np.max(np.abs(y_new))):
            return y_new
        y = y_new
    raise RuntimeError("fixed-point iteration did not converge")


def relative_gap(got, want):
    """max |got - want| / max(1, |want|), elementwise guard for tiny targets."""
    got = np.asarray(got, dtype=float)
    want = np.asarray(want, dtype=float)
    return float(np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want))))
