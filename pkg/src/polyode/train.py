"""Discretize-then-optimize training of polynomial-network vector fields.

A trajectory of n points becomes n-1 independent one-step initial value
problems: from each data state y_i, one step of the chosen integrator over
h_i = t_{i+1} - t_i produces a prediction, and the loss is the mean weighted
squared prediction error

    loss = (1/(n-1)) sum_i ||step(y_i, h_i) - y_{i+1}||^2 / w_i,
    w_i = 1 + ||y_{i+1}||^2   (weighting optional),

so huge-magnitude transients do not drown the small-scale dynamics. All
segments are evaluated in one batched pass per epoch, and gradients come from
the reverse-mode tape (implicit steps via the implicit function theorem, never
by unrolling Newton). The optimizer is full-batch Adam with a cosine-decayed
learning rate; the best-loss parameters (not the last ones) are returned.
"""

import json
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import matexp, odeint
from .autodiff import NonFiniteGradient, Tape, leaf
from .pinet import PiNet


class NonFiniteLoss(Exception):
    """The training loss evaluated to NaN or Inf."""


# ---------------------------------------------------------------------------
# datasets


@dataclass
class TrajectoryDataset:
    """Sampled trajectory: strictly increasing times and one state per time."""

    times: np.ndarray
    states: np.ndarray
    name: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if self.times.ndim != 1 or len(self.times) < 2:
            raise ValueError("need at least two time points")
        if self.states.shape[0] != len(self.times):
            raise ValueError("times and states disagree on the number of points")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def n(self):
        return len(self.times)

    @property
    def dim(self):
        return self.states.shape[1]

    @property
    def is_uniform(self):
        hs = np.diff(self.times)
        mean = hs.mean()
        return bool(np.max(np.abs(hs - mean)) < 1e-12 * abs(mean))

    def save(self, path):
        """CSV with 17-significant-digit floats plus a JSON provenance sidecar."""
        path = str(path)
        header = "t," + ",".join(f"y{i}" for i in range(self.dim))
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for t, row in zip(self.times, self.states):
                fh.write(",".join(f"{v:.17g}" for v in (t, *row)) + "\n")
        sidecar = {"name": self.name, "n": self.n, "dim": self.dim, **self.provenance}
        with open(path + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=1, sort_keys=True)

    @staticmethod
    def load(path):
        path = str(path)
        with warnings.catch_warnings():
            # empty files are reported as a ValueError below, not a warning
            warnings.simplefilter("ignore", UserWarning)
            raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if raw.size == 0 or raw.shape[1] < 2:
            raise ValueError(f"{path}: expected columns t,y0,... with at least two rows")
        name = ""
        provenance = {}
        try:
            with open(path + ".json") as fh:
                sidecar = json.load(fh)
            name = sidecar.pop("name", "")
            sidecar.pop("n", None)
            sidecar.pop("dim", None)
            provenance = sidecar
        except FileNotFoundError:
            pass
        return TrajectoryDataset(times=raw[:, 0], states=raw[:, 1:],
                                 name=name, provenance=provenance)


# ---------------------------------------------------------------------------
# configuration and reports


@dataclass
class TrainConfig:
    method: str = "if-euler"
    degree: int = 1
    width: int = None
    epochs: int = 20000
    lr: float = 1e-2
    lr_floor: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    init_scale: float = 1e-3
    weighted: bool = True
    freeze_linearization: bool = False
    newton_tol: float = odeint.NEWTON_TOL
    newton_max_iter: int = odeint.NEWTON_MAX_ITER
    retries: int = 0       # divergence backoff: restore best, halve lr, try again
    loss_floor: float = None  # optional early stop once the best loss reaches this

    def validate(self):
        if self.method not in odeint.METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if min(self.lr, self.lr_floor, self.newton_tol, self.adam_eps) <= 0:
            raise ValueError("rates and tolerances must be positive")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if not 0 <= self.retries <= 5:
            raise ValueError("retries must lie in 0..5")
        return self

    def to_json_dict(self):
        return {
            "method": self.method, "degree": self.degree, "width": self.width,
            "epochs": self.epochs, "lr": self.lr, "lr_floor": self.lr_floor,
            "beta1": self.beta1, "beta2": self.beta2, "adam_eps": self.adam_eps,
            "seed": self.seed, "init_scale": self.init_scale,
            "weighted": self.weighted,
            "freeze_linearization": self.freeze_linearization,
            "newton_tol": self.newton_tol, "newton_max_iter": self.newton_max_iter,
            "retries": self.retries, "loss_floor": self.loss_floor,
        }


@dataclass
class TrainReport:
    method: str
    params: np.ndarray
    recovered: object            # pinet.RecoveredModel
    best_loss: float
    best_epoch: int
    final_loss: float
    epochs_run: int
    loss_history: np.ndarray
    config: dict
    diverged: dict = None        # {"epoch", "reason", "segment"} when training failed
    error_table: object = None   # ErrorTable when ground truth was supplied
    wall_time_s: float = 0.0
    field_evals: int = 0
    jacobian_evals: int = 0

    @property
    def converged(self):
        return self.diverged is None

    def to_json_dict(self):
        """Serializable summary. Timing is reported separately (stdout), not
        serialized, so identical runs produce byte-identical files."""
        out = {
            "method": self.method,
            "best_loss": self.best_loss,
            "best_epoch": self.best_epoch,
            "final_loss": self.final_loss,
            "epochs_run": self.epochs_run,
            "converged": self.converged,
            "diverged": self.diverged,
            "config": self.config,
            "field_evals": self.field_evals,
            "jacobian_evals": self.jacobian_evals,
            "recovered": self.recovered.to_json_dict() if self.recovered is not None else None,
        }
        if self.error_table is not None:
            out["max_relative_error"] = self.error_table.max_relative_error
            out["max_spurious"] = self.error_table.max_spurious
        return out

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)

    def save_loss_history(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,loss\n")
            for i, v in enumerate(self.loss_history):
                fh.write(f"{i},{v:.17g}\n")


# ---------------------------------------------------------------------------
# loss


def _segment_groups(times):
    """Indices of segments grouped by (numerically) equal step size."""
    hs = np.diff(times)
    if np.max(np.abs(hs - hs.mean())) < 1e-12 * abs(hs.mean()):
        return [(float(hs.mean()), np.arange(len(hs)))]
    groups = []
    order = np.argsort(hs, kind="stable")
    start = 0
    sorted_h = hs[order]
    for i in range(1, len(hs) + 1):
        if i == len(hs) or sorted_h[i] - sorted_h[start] > 1e-12 * sorted_h[start]:
            groups.append((float(sorted_h[start:i].mean()), np.sort(order[start:i])))
            start = i
    return groups


def segment_loss_t(net, theta, dataset, method, newton_tol=odeint.NEWTON_TOL,
                   newton_max_iter=odeint.NEWTON_MAX_ITER, weighted=True,
                   freeze_linearization=False):
    """Mean weighted squared one-step prediction error, as a taped scalar."""
    y_in = dataset.states[:-1]
    y_out = dataset.states[1:]
    nseg = y_in.shape[0]
    if weighted:
        w = 1.0 + np.sum(y_out * y_out, axis=1)
    else:
        w = np.ones(nseg)
    total = None
    for h, idx in _segment_groups(dataset.times):
        try:
            pred = odeint.step_batch_t(method, net, theta, y_in[idx], h,
                                       newton_tol=newton_tol, max_iter=newton_max_iter,
                                       freeze_linearization=freeze_linearization)
        except odeint.NewtonDiverged as exc:
            if exc.segment is not None:
                exc.segment = int(idx[exc.segment])
            raise
        diff = pred - y_out[idx]
        part = ((diff * diff).sum(axis=1) / w[idx]).sum()
        total = part if total is None else total + part
    loss = total * (1.0 / nseg)
    if not np.isfinite(loss.value):
        raise NonFiniteLoss(f"loss evaluated to {float(loss.value.reshape(())):g}")
    return loss


def segment_loss(net, params, dataset, method, **kwargs):
    """Loss and its parameter gradient at a parameter vector (fresh tape)."""
    tape = Tape()
    theta = leaf(tape, np.asarray(params, dtype=float))
    loss = segment_loss_t(net, theta, dataset, method, **kwargs)
    cot = tape.backward(loss.id)
    g = cot[theta.id]
    if g is None:
        g = np.zeros_like(np.asarray(params, dtype=float))
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("loss gradient contains NaN or Inf")
    return float(loss.value.reshape(())), g


# ---------------------------------------------------------------------------
# optimizer


def _cosine_lr(config, epoch):
    span = max(config.epochs - 1, 1)
    frac = min(epoch, span) / span
    return config.lr_floor + 0.5 * (config.lr - config.lr_floor) * (1.0 + math.cos(math.pi * frac))


def fit(dataset, config, net=None, truth=None):
    """Train a polynomial network on a trajectory; returns a TrainReport.

    Deterministic given the seed. Solver divergence (Newton failure, non-finite
    loss, propagator overflow) is a first-class outcome recorded in the report
    rather than an exception; config.retries > 0 enables a backoff policy that
    restores the best parameters, halves the learning rate, and continues.
    """
    config.validate()
    if net is None:
        net = PiNet(m=dataset.dim, degree=config.degree, width=config.width)
    if net.m != dataset.dim or net.m_out != dataset.dim:
        raise ValueError("network shape does not match the dataset dimension")
    params = net.init_params(config.seed, config.init_scale)
    m1 = np.zeros_like(params)
    m2 = np.zeros_like(params)
    adam_t = 0
    best_loss = np.inf
    best_params = params.copy()
    best_epoch = -1
    history = []
    diverged = None
    retries_left = config.retries
    lr_scale = 1.0
    evals0 = dict(odeint.EVAL_COUNTS)
    t_start = time.perf_counter()

    epoch = 0
    while epoch < config.epochs:
        try:
            loss, g = segment_loss(
                net, params, dataset, config.method,
                newton_tol=config.newton_tol, newton_max_iter=config.newton_max_iter,
                weighted=config.weighted, freeze_linearization=config.freeze_linearization)
        except (odeint.NewtonDiverged, NonFiniteLoss, NonFiniteGradient, matexp.Overflow) as exc:
            if retries_left > 0 and best_epoch >= 0:
                retries_left -= 1
                lr_scale *= 0.5
                params = best_params.copy()
                m1[:] = 0.0
                m2[:] = 0.0
                adam_t = 0
                epoch += 1
                continue
            diverged = {
                "epoch": epoch,
                "reason": f"{type(exc).__name__}: {exc}",
                "segment": getattr(exc, "segment", None),
            }
            break
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_params = params.copy()
            best_epoch = epoch
        if config.loss_floor is not None and best_loss <= config.loss_floor:
            epoch += 1
            break
        lr = lr_scale * _cosine_lr(config, epoch)
        adam_t += 1
        # a transient huge gradient must not overflow g*g to inf, which would
        # freeze that coordinate's second moment at inf for the rest of the run
        g = np.clip(g, -1e100, 1e100)
        m1 = config.beta1 * m1 + (1.0 - config.beta1) * g
        m2 = config.beta2 * m2 + (1.0 - config.beta2) * g * g
        mhat = m1 / (1.0 - config.beta1 ** adam_t)
        vhat = m2 / (1.0 - config.beta2 ** adam_t)
        params = params - lr * mhat / (np.sqrt(vhat) + config.adam_eps)
        epoch += 1

    wall = time.perf_counter() - t_start
    if best_epoch < 0:
        best_params = params.copy()
        best_loss = float("nan")
    recovered = net.extract_polynomial(best_params)
    report = TrainReport(
        method=config.method,
        params=best_params,
        recovered=recovered,
        best_loss=float(best_loss),
        best_epoch=best_epoch,
        final_loss=float(history[-1]) if history else float("nan"),
        epochs_run=epoch,
        loss_history=np.asarray(history),
        config=config.to_json_dict(),
        diverged=diverged,
        wall_time_s=wall,
        field_evals=odeint.EVAL_COUNTS["f"] - evals0["f"],
        jacobian_evals=odeint.EVAL_COUNTS["jac"] - evals0["jac"],
    )
    if truth is not None:
        report.error_table = fractional_relative_error(recovered, truth)
    return report


# ---------------------------------------------------------------------------
# error tables


@dataclass(frozen=True)
class ErrorEntry:
    output: int
    exponents: tuple
    truth: float
    estimate: float
    relative_error: float = None   # set when truth != 0
    spurious: float = None         # |estimate| when truth == 0


@dataclass(frozen=True)
class ErrorTable:
    entries: tuple

    @property
    def max_relative_error(self):
        vals = [e.relative_error for e in self.entries if e.relative_error is not None]
        return max(vals) if vals else 0.0

    @property
    def max_spurious(self):
        vals = [e.spurious for e in self.entries if e.spurious is not None]
        return max(vals) if vals else 0.0

    def relative_errors(self):
        """{(output, exponents): relative error} over nonzero-truth coefficients."""
        return {(e.output, e.exponents): e.relative_error
                for e in self.entries if e.relative_error is not None}

    def save_csv(self, path):
        with open(path, "w") as fh:
            fh.write("output,monomial,truth,estimate,relative_error,spurious_abs\n")
            for e in self.entries:
                mono = ";".join(str(x) for x in e.exponents)
                rel = "" if e.relative_error is None else f"{e.relative_error:.17g}"
                spu = "" if e.spurious is None else f"{e.spurious:.17g}"
                fh.write(f"{e.output},{mono},{e.truth:.17g},{e.estimate:.17g},{rel},{spu}\n")


def fractional_relative_error(recovered, truth):
    """Per-coefficient comparison of two polynomial models.

    Nonzero-truth coefficients get |est - true| / |true|; zero-truth ones are
    reported as absolute spurious magnitudes instead (kept out of relative
    plots by convention).
    """
    if recovered.m != truth.m:
        raise ValueError("models have different input dimensions")
    if len(recovered.coeffs) != len(truth.coeffs):
        raise ValueError("models have different output counts")
    entries = []
    for o in range(len(truth.coeffs)):
        keys = sorted(set(truth.coeffs[o]) | set(recovered.coeffs[o]))
        for exps in keys:
            c_true = float(truth.coeffs[o].get(exps, 0.0))
            c_est = float(recovered.coeffs[o].get(exps, 0.0))
            if c_true != 0.0:
                entries.append(ErrorEntry(o, exps, c_true, c_est,
                                          relative_error=abs(c_est - c_true) / abs(c_true)))
            else:
                entries.append(ErrorEntry(o, exps, c_true, c_est, spurious=abs(c_est)))
    return ErrorTable(entries=tuple(entries))
