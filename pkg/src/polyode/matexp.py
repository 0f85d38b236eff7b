"""Matrix exponential by scaling and squaring with a degree-13 Pade approximant.

The exponential is the propagator at the heart of the integrating-factor Euler
step, so it is implemented here directly rather than pulled from a library:
the solver and its gradients both route through these few functions.

Batched variants operate on arrays of shape (..., d, d); the scaling power is
chosen per matrix and squarings are applied group-wise so matrices with small
norms are not over-squared.
"""

from dataclasses import dataclass

import numpy as np

# Degree-13 Pade numerator coefficients and the classical acceptance threshold
# for the scaled infinity norm.
PADE13_B = (
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0, 670442572800.0,
    33522128640.0, 1323241920.0, 40840800.0, 960960.0, 16380.0, 182.0, 1.0,
)
THETA13 = 5.371920351148152

# Intermediates beyond this magnitude are reported instead of silently
# propagating inf through the squaring chain.
OVERFLOW_LIMIT = 1e300


class Overflow(Exception):
    """e^A is not representable in double precision (or an intermediate blew up)."""


@dataclass(frozen=True)
class ExpmResult:
    value: np.ndarray
    scaling: int          # number of squarings applied
    pade_order: int = 13


def _check_square(a):
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected (..., d, d) square matrices, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    return a


def _pade13_uv(a):
    """U, V with r13(a) = (V + U) / (V - U), batched over leading axes."""
    b = PADE13_B
    d = a.shape[-1]
    eye = np.broadcast_to(np.eye(d), a.shape)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a2 @ a4
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
             + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * eye)
    v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
         + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * eye)
    return u, v


def expm_many(a):
    """exp(a) for a batch of square matrices; returns (values, scalings)."""
    a = _check_square(a)
    single = a.ndim == 2
    if single:
        a = a[None]
    norms = np.abs(a).sum(axis=-1).max(axis=-1)  # infinity norm per matrix
    with np.errstate(divide="ignore"):
        s = np.ceil(np.log2(norms / THETA13))
    s = np.where(norms > THETA13, s, 0.0).astype(int)
    scaled = a / (2.0 ** s)[..., None, None]
    u, v = _pade13_uv(scaled)
    x = np.linalg.solve(v - u, v + u)
    # overflow inside the squaring is detected and raised as a typed error, so
    # the transient numpy warning carries no information
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, int(s.max()) + 1 if s.size else 1):
            mask = s >= k
            if not mask.any():
                break
            x[mask] = x[mask] @ x[mask]
            if np.max(np.abs(x[mask])) > OVERFLOW_LIMIT or not np.all(np.isfinite(x[mask])):
                raise Overflow("matrix exponential exceeded representable range during squaring")
    if not np.all(np.isfinite(x)):
        raise Overflow("matrix exponential produced non-finite entries")
    if single:
        return x[0], s[0]
    return x, s


def expm(a):
    """Matrix exponential of a single (d, d) matrix."""
    a = _check_square(a)
    if a.ndim != 2:
        raise ValueError("expm takes a single matrix; use expm_many for batches")
    value, s = expm_many(a[None])
    return ExpmResult(value=value[0], scaling=int(s[0]))


def expm_frechet(a, e):
    """Frechet derivative L(a)[e]: the directional derivative of expm at a along e.

    Uses the block identity expm([[a, e], [0, a]]) whose upper-right block is L(a)[e].
    """
    a = _check_square(a)
    e = np.asarray(e, dtype=float)
    if e.shape != a.shape:
        raise ValueError(f"direction shape {e.shape} does not match matrix shape {a.shape}")
    d = a.shape[-1]
    block = _block_upper(a, e)
    full, _ = expm_many(block)
    return full[..., :d, d:]


def expm_vjp(a, w):
    """Reverse-mode cotangent: <w, L(a)[e]> = <expm_vjp(a, w), e> for all e.

    Equal to the Frechet derivative evaluated at the transpose, computed from the
    upper-right block of expm([[a^T, w], [0, a^T]]).
    """
    a = _check_square(a)
    w = np.asarray(w, dtype=float)
    if w.shape != a.shape:
        raise ValueError(f"cotangent shape {w.shape} does not match matrix shape {a.shape}")
    at = np.swapaxes(a, -1, -2)
    d = a.shape[-1]
    block = _block_upper(at, w)
    full, _ = expm_many(block)
    return full[..., :d, d:]


def _block_upper(a, e):
    """[[a, e], [0, a]] batched."""
    d = a.shape[-1]
    shape = a.shape[:-2] + (2 * d, 2 * d)
    block = np.zeros(shape, dtype=float)
    block[..., :d, :d] = a
    block[..., :d, d:] = e
    block[..., d:, d:] = a
    return block
