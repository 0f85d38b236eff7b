"""Polynomial networks built from affine layers combined by Hadamard products.

The network computes, for an input x in R^m,

    p_1 = A_1 x + b_1
    p_k = (A_k x + b_k) o p_{k-1} + p_{k-1}      (o = elementwise product)
    out = C p_D + c

so every output coordinate is a polynomial of total degree at most D in the
inputs, with no activation functions anywhere. Because the computation is
polynomial composition, the represented polynomial can be read out exactly as
a map from exponent tuples to coefficients (`extract_polynomial`) -- recovery
of a symbolic model from trained weights is an exact algebraic operation here,
not a fit, and no coefficient thresholding is ever applied.
"""

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamLayout, constant, custom


def monomial_count(m, degree):
    """Number of monomials of total degree <= degree in m variables."""
    return math.comb(m + degree, degree)


def monomials(m, degree):
    """All exponent tuples of length m with total degree <= degree, sorted."""
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(m), total):
            e = [0] * m
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    return sorted(set(out))


@dataclass(frozen=True)
class RecoveredModel:
    """Exact polynomial read-out of a network: one exponent->coefficient map per output."""

    m: int
    degree: int
    coeffs: tuple  # tuple of dicts {exponent tuple: float}

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = x.reshape(1, -1) if single else x
        out = np.zeros((xb.shape[0], len(self.coeffs)))
        for o, cmap in enumerate(self.coeffs):
            for exps, coef in cmap.items():
                if coef == 0.0:
                    out[:, o] += 0.0
                    continue
                term = np.full(xb.shape[0], coef)
                for i, e in enumerate(exps):
                    if e:
                        term = term * xb[:, i] ** e
                out[:, o] += term
        return out[0] if single else out

    def to_json_dict(self):
        return {
            str(o): {",".join(str(e) for e in exps): coef for exps, coef in sorted(cmap.items())}
            for o, cmap in enumerate(self.coeffs)
        }

    @staticmethod
    def from_json_dict(data):
        n_out = len(data)
        coeffs = []
        m = None
        degree = 0
        for o in range(n_out):
            cmap = {}
            for key, coef in data[str(o)].items():
                exps = tuple(int(t) for t in key.split(","))
                m = len(exps) if m is None else m
                if len(exps) != m:
                    raise ValueError("inconsistent exponent tuple lengths")
                degree = max(degree, sum(exps))
                cmap[exps] = float(coef)
            coeffs.append(cmap)
        if m is None:
            raise ValueError("empty model")
        return RecoveredModel(m=m, degree=degree, coeffs=tuple(coeffs))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)

    @staticmethod
    def load(path):
        with open(path) as fh:
            return RecoveredModel.from_json_dict(json.load(fh))


def _poly_mul(p, q):
    out = {}
    for ea, ca in p.items():
        if ca == 0.0:
            continue
        for eb, cb in q.items():
            if cb == 0.0:
                continue
            key = tuple(a + b for a, b in zip(ea, eb))
            out[key] = out.get(key, 0.0) + ca * cb
    return out


def _poly_add(p, q, scale=1.0):
    out = dict(p)
    for e, c in q.items():
        out[e] = out.get(e, 0.0) + scale * c
    return out


class PiNet:
    """Product-layer polynomial network.

    Parameters
    ----------
    m : input dimension
    degree : number of product stages D (= maximum total degree)
    width : hidden width; defaults to the number of monomials of degree <= D
    m_out : output dimension (defaults to m, the vector-field case)
    known, known_jac : optional closed-form term f_known(y) and its Jacobian,
        added to the network output (hybrid mode; the polynomial read-out
        covers the learned part only). Off by default.
    """

    def __init__(self, m, degree, width=None, m_out=None, known=None, known_jac=None):
        if m < 1 or degree < 1:
            raise ValueError("need m >= 1 and degree >= 1")
        self.m = int(m)
        self.degree = int(degree)
        self.width = int(width) if width is not None else monomial_count(m, degree)
        self.m_out = int(m_out) if m_out is not None else int(m)
        if self.width < 1:
            raise ValueError("width must be positive")
        if (known is None) != (known_jac is None):
            raise ValueError("hybrid mode needs both known and known_jac")
        self.known = known
        self.known_jac = known_jac
        shapes = []
        for k in range(1, self.degree + 1):
            shapes.append((f"A{k}", (self.width, self.m)))
            shapes.append((f"b{k}", (self.width,)))
        shapes.append(("C", (self.m_out, self.width)))
        shapes.append(("c", (self.m_out,)))
        self.layout = ParamLayout.build(shapes)

    @property
    def param_count(self):
        n = self.degree * (self.width * self.m + self.width) + self.m_out * self.width + self.m_out
        assert n == self.layout.size
        return n

    def init_params(self, seed, scale=1e-3):
        """Uniform(-scale, scale) weights, zero biases; deterministic in seed."""
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, _off, shape in self.layout.entries:
            if name.startswith("b") or name == "c":
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.uniform(-scale, scale, size=shape)
        return self.layout.flatten(arrays)

    # ---------------- plain numpy paths ----------------

    def forward(self, params, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = x.reshape(1, -1) if single else x
        if xb.shape[1] != self.m:
            raise ValueError(f"input has {xb.shape[1]} features, network expects {self.m}")
        p = self.layout.unflatten(params)
        h = xb @ p["A1"].T + p["b1"]
        for k in range(2, self.degree + 1):
            q = xb @ p[f"A{k}"].T + p[f"b{k}"]
            h = q * h + h
        out = h @ p["C"].T + p["c"]
        if self.known is not None:
            out = out + self.known(xb)
        return out[0] if single else out

    def state_jacobian(self, params, x):
        """d out / d x, exact via forward sensitivity of the product recurrence.

        Returns (m_out, m) for a single state or (B, m_out, m) for a batch.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = x.reshape(1, -1) if single else x
        p = self.layout.unflatten(params)
        h = xb @ p["A1"].T + p["b1"]                       # (B, w)
        jac = np.broadcast_to(p["A1"], (xb.shape[0], self.width, self.m)).copy()
        for k in range(2, self.degree + 1):
            ak = p[f"A{k}"]
            q = xb @ ak.T + p[f"b{k}"]
            jac = ak[None] * h[:, :, None] + (q + 1.0)[:, :, None] * jac
            h = q * h + h
        out = np.matmul(p["C"], jac)                       # (B, m_out, m)
        if self.known is not None:
            out = out + self.known_jac(xb)
        return out[0] if single else out

    # ---------------- taped paths ----------------

    def forward_t(self, theta, x):
        """Taped forward; x is a (B, m) array or Tensor, theta a flat Tensor."""
        p = self.layout.slices_t(theta)
        xt = x if hasattr(x, "tape") else None
        xb = x.value if xt is not None else np.asarray(x, dtype=float)
        if xb.ndim != 2 or xb.shape[1] != self.m:
            raise ValueError("forward_t expects a (B, m) input")
        h = _affine_t(p, 1, xt, xb)
        for k in range(2, self.degree + 1):
            q = _affine_t(p, k, xt, xb)
            h = q * h + h
        out = h @ p["C"].transpose_last() + p["c"]
        if self.known is not None:
            out = out + (_known_term_t(self, xt, xb) if xt is not None else self.known(xb))
        return out

    def state_jacobian_t(self, theta, x):
        """Taped d out / d x for a (B, m) batch of states -> (B, m_out, m).

        Differentiable in theta (the integrating-factor linearization depends
        on the parameters) and, when x is itself a Tensor, in x as well. For an
        affine network the Jacobian is state independent and comes back as a
        plain (m_out, m) that broadcasts over the batch.
        """
        xt = x if hasattr(x, "tape") else None
        xb = np.asarray(x.value if xt is not None else x, dtype=float)
        if xb.ndim != 2:
            raise ValueError("state_jacobian_t expects a (B, m) batch")
        if xt is not None and self.known is not None:
            raise ValueError("state derivatives of the linearization are not "
                             "supported in hybrid mode; pass the states as data")
        p = self.layout.slices_t(theta)
        h = _affine_t(p, 1, xt, xb)                         # (B, w)
        jac = p["A1"]                                       # (w, m), broadcasts in
        for k in range(2, self.degree + 1):
            q = _affine_t(p, k, xt, xb)
            jac = p[f"A{k}"] * h.reshape(*h.value.shape, 1) + (q + 1.0).reshape(*q.value.shape, 1) * jac
            h = q * h + h
        out = p["C"] @ jac           # (m_out, m) or (m_out, w) @ (B, w, m) -> (B, m_out, m)
        if self.known is not None:
            out = out + self.known_jac(xb)
        return out

    # ---------------- symbolic read-out ----------------

    def extract_polynomial(self, params):
        """Exact exponent->coefficient maps for every output, densified over the
        full simplex of monomials of degree <= D. No thresholding."""
        p = self.layout.unflatten(params)
        zero = tuple([0] * self.m)
        units = []
        for j in range(self.width):
            poly = {zero: float(p["b1"][j])}
            for i in range(self.m):
                e = [0] * self.m
                e[i] = 1
                poly[tuple(e)] = float(p["A1"][j, i])
            units.append(poly)
        for k in range(2, self.degree + 1):
            new_units = []
            for j in range(self.width):
                aff = {zero: float(p[f"b{k}"][j])}
                for i in range(self.m):
                    e = [0] * self.m
                    e[i] = 1
                    aff[tuple(e)] = float(p[f"A{k}"][j, i])
                new_units.append(_poly_add(_poly_mul(aff, units[j]), units[j]))
            units = new_units
        simplex = monomials(self.m, self.degree)
        coeffs = []
        for o in range(self.m_out):
            total = {e: 0.0 for e in simplex}
            total[zero] += float(p["c"][o])
            for j in range(self.width):
                cj = float(p["C"][o, j])
                for e, coef in units[j].items():
                    total[e] += cj * coef
            for e in total:
                if sum(e) > self.degree:
                    raise AssertionError("extraction produced a monomial above the degree bound")
            coeffs.append(total)
        return RecoveredModel(m=self.m, degree=self.degree, coeffs=tuple(coeffs))

    # ---------------- helpers ----------------

    def embed_linear(self, lin, bias=None):
        """Parameters that make the network compute exactly lin @ x + bias.

        Works for any degree (later stages are zeroed and pass through); needs
        width >= m.
        """
        lin = np.asarray(lin, dtype=float)
        if lin.shape != (self.m_out, self.m):
            raise ValueError(f"expected ({self.m_out}, {self.m}) matrix, got {lin.shape}")
        if self.width < self.m:
            raise ValueError("embedding a linear map needs width >= m")
        arrays = {name: np.zeros(shape) for name, _o, shape in self.layout.entries}
        arrays["A1"][:self.m, :] = np.eye(self.m)
        arrays["C"][:, :self.m] = lin
        if bias is not None:
            arrays["c"][:] = np.asarray(bias, dtype=float)
        return self.layout.flatten(arrays)


def _affine_t(p, k, xt, xb):
    """A_k x + b_k on the tape; x taped (xt) or constant (xb)."""
    a, b = p[f"A{k}"], p[f"b{k}"]
    if xt is not None:
        return xt @ a.transpose_last() + b
    xc = constant(a.tape, xb)
    return xc @ a.transpose_last() + b


def _known_term_t(net, xt, xb):
    """Known-dynamics term as a tape node: constant in theta, Jacobian in x."""
    value = net.known(xb)

    def vjp(g):
        jac = net.known_jac(xb)  # (B, m_out, m) or (m_out, m)
        if jac.ndim == 2:
            return (g @ jac,)
        return ((g[:, None, :] @ jac)[:, 0, :],)

    return custom(xt.tape, value, (xt,), vjp)


# checkpoint I/O -------------------------------------------------------------

def save_checkpoint(path, net, params, seed):
    """JSON checkpoint: network shape, seed, flat parameters (exact round-trip)."""
    params = np.asarray(params, dtype=float)
    if params.shape != (net.layout.size,):
        raise ValueError("parameter vector does not match the network layout")
    payload = {
        "shape": {"m": net.m, "degree": net.degree, "width": net.width, "m_out": net.m_out},
        "seed": int(seed),
        "params": [float(v) for v in params],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    shape = payload["shape"]
    net = PiNet(m=shape["m"], degree=shape["degree"], width=shape["width"], m_out=shape["m_out"])
    params = np.asarray(payload["params"], dtype=float)
    if params.shape != (net.layout.size,):
        raise ValueError("checkpoint parameter count does not match its declared shape")
    return net, params, int(payload["seed"])
