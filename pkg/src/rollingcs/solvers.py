"""
Reconstruction solvers.

All three solvers minimise ``sum_t 0.5 * ||A(t) x(t) - y(t)||^2 + penalty``
with the accelerated proximal gradient method (FISTA):

* :func:`fista_d` / :func:`blocked_fista_d` -- l1 penalty on frame-to-frame
  differences, solved in the difference variables ``d``.
* :func:`l1_solver` -- l1 penalty on every frame.
* :func:`tv_solver` -- anisotropic 3-D total variation, with separate
  weights for the time and space gradients.

Momentum follows the usual ``t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2``
sequence.  When an extrapolated step would increase the objective it is
discarded and the momentum is reset, so with a stepsize no larger than the
inverse Lipschitz constant the objective trace never goes up.
"""

from __future__ import annotations

import functools
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

from .model import (CIRCULAR, DiffMovie, Movie, StackSensing, apply_shutter, convolve,
                    convolve_adjoint)

CONSERVATIVE = "conservative"
EMPIRICAL = "empirical"

#: Time/space weights applied to lambda by the TV solver.
DEFAULT_LAMBDA_SPLIT = (2.0, 0.9)


class DivergenceError(FloatingPointError):
    """Raised when an iterate stops being finite (usually: stepsize too large)."""

    def __init__(self, iteration, step):
        self.iteration = iteration
        self.step = step
        super().__init__(
            f"non-finite iterate at iteration {iteration} (step={step:.3g}); "
            "the stepsize is probably too large"
        )


@dataclass
class SolverConfig:
    """Hyperparameters shared by the solvers.

    ``step=None`` means the stepsize is calibrated from the PSF (and, for
    the difference solvers, from the sequence length) using ``step_mode``.
    """

    lam: float = 0.1
    step: Optional[float] = None
    max_iters: int = 10000
    conv_tol: float = 1e-6
    block_len: Optional[int] = None
    step_mode: str = CONSERVATIVE
    lambda_split: Optional[Tuple[float, float]] = None
    tv_inner_iters: int = 20

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.conv_tol < 0:
            raise ValueError("conv_tol must be >= 0")
        if self.block_len is not None and self.block_len < 1:
            raise ValueError("block_len must be >= 1")
        if self.step_mode not in (CONSERVATIVE, EMPIRICAL):
            raise ValueError(f"unknown step_mode {self.step_mode!r}")
        if self.lambda_split is not None:
            self.lambda_split = tuple(float(v) for v in self.lambda_split)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        if d["lambda_split"] is not None:
            d["lambda_split"] = list(d["lambda_split"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class SolveReport:
    iterations: int = 0
    final_objective: float = float("nan")
    objective_trace: list = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = False

    def to_dict(self):
        return asdict(self)

    @classmethod
    def merge(cls, reports):
        """Combine per-block reports into one (objectives of blocks add up)."""
        out = cls(converged=True)
        for r in reports:
            out.iterations += r.iterations
            out.objective_trace.extend(r.objective_trace)
            out.wall_time += r.wall_time
            out.converged = out.converged and r.converged
        out.final_objective = float(sum(r.final_objective for r in reports))
        return out


# ---------------------------------------------------------------------------
# Elementary pieces
# ---------------------------------------------------------------------------


def soft_threshold(v, lam):
    """Elementwise ``sign(v) * max(|v| - lam, 0)``."""
    if lam < 0:
        raise ValueError("threshold must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    # v - clip(v) is exactly zero inside the band and v -/+ lam outside it
    return v - np.clip(v, -lam, lam)


def diffs_to_movie(d, dt=None):
    """Prefix-sum differences back into frames."""
    return Movie(np.cumsum(d.data, axis=2), d.dt if dt is None else dt)


def movie_to_diffs(x):
    return DiffMovie(np.diff(x.data, axis=2, prepend=0.0), x.dt)


def _suffix_sum(a):
    return np.cumsum(a[:, :, ::-1], axis=2)[:, :, ::-1]


# The solvers iterate on frames-first (T, N, N) copies of the data so that
# each frame is contiguous; results are moved back to (N, N, T).


def _frames_first(a):
    return np.ascontiguousarray(np.moveaxis(a, 2, 0))


def _frames_last(a):
    return np.ascontiguousarray(np.moveaxis(a, 0, 2))


def _prefix_sum0(a):
    # same sums, in the same order, as np.cumsum(a, axis=0); the frame loop
    # is several times faster than cumsum over a leading axis
    out = a.copy()
    for t in range(1, out.shape[0]):
        out[t] += out[t - 1]
    return out


def _suffix_sum0(a):
    out = a.copy()
    for t in range(out.shape[0] - 2, -1, -1):
        out[t] += out[t + 1]
    return out


def _stack_problem(y, psf, mode):
    """Sensing operator and ``(T, k, N)`` samples for a frames-first solve."""
    rows = np.array([y.rows(t) for t in range(y.t_len)], dtype=np.intp)
    return StackSensing(psf, rows, mode), _frames_first(y.data)


def _check_measurements(y, psf, schedule):
    if schedule is not None and schedule != y.schedule:
        raise ValueError("schedule does not match the one that produced the measurements")
    if psf.n != y.n:
        raise ValueError(f"PSF size {psf.n} does not match measurement size {y.n}")


def grad_l2_diffs(d, y, psf, schedule=None, mode=CIRCULAR):
    """Gradient of ``sum_t 0.5 ||A(t) sum_{s<=t} d(s) - y(t)||^2`` w.r.t. ``d``.

    ``g(i) = H^T sum_{t>=i} P(t)^T eta(t)`` with the residual
    ``eta(t) = A(t) x(t) - y(t)``; the suffix sum is a single reversed cumsum.
    """
    _check_measurements(y, psf, schedule)
    if d.data.shape != (y.n, y.n, y.t_len):
        raise ValueError(f"differences {d.data.shape} do not match measurements")
    mask = y.row_mask()[:, None, :]
    resid = mask * convolve(np.cumsum(d.data, axis=2), psf, mode) - y.embed()
    return DiffMovie(convolve_adjoint(_suffix_sum(resid), psf, mode), d.dt)


def diffs_objective(d, y, psf, lam, mode=CIRCULAR):
    """Objective in difference variables: data misfit of ``S d`` plus ``lam ||d||_1``."""
    mask = y.row_mask()[:, None, :]
    resid = mask * convolve(np.cumsum(d.data, axis=2), psf, mode) - y.embed()
    return 0.5 * float(np.sum(resid ** 2)) + lam * float(np.sum(np.abs(d.data)))


def frames_objective(x, y, psf, lam, mode=CIRCULAR):
    """Objective in frame variables: data misfit plus ``lam sum_t ||x(t) - x(t-1)||_1``."""
    total = 0.0
    prev = np.zeros((x.n, x.n))
    for t in range(x.t_len):
        frame = x.data[:, :, t]
        pred = apply_shutter(convolve(frame, psf, mode), y.schedule, y.t0 + t)
        total += 0.5 * float(np.sum((pred - y.data[:, :, t]) ** 2))
        total += lam * float(np.sum(np.abs(frame - prev)))
        prev = frame
    return total


@functools.lru_cache(maxsize=None)
def summation_norm(t_len):
    """Largest singular value of the ``t_len x t_len`` lower-triangular ones matrix."""
    return float(np.linalg.norm(np.tril(np.ones((t_len, t_len))), 2))


def calibrate_stepsize(psf, t_len, r=1, step_mode=CONSERVATIVE, mode=CIRCULAR):
    """Stepsize for the difference solvers.

    conservative: ``(||F zeta||_inf * sigma_1(S) * r) ** -2``
    empirical:    ``||F zeta||_inf ** -2 * (sigma_1(S) * r) ** -1``
    """
    if t_len < 1 or r < 1:
        raise ValueError("t_len and r must be >= 1")
    h = psf.op_norm(mode)
    s = summation_norm(int(t_len))
    if step_mode == CONSERVATIVE:
        return 1.0 / (h * s * r) ** 2
    if step_mode == EMPIRICAL:
        return 1.0 / (h ** 2 * s * r)
    raise ValueError(f"unknown step_mode {step_mode!r}")


def frame_stepsize(psf, mode=CIRCULAR):
    """Stepsize ``||F zeta||_inf ** -2`` used by the per-frame l1 and TV solvers."""
    return 1.0 / psf.op_norm(mode) ** 2


# ---------------------------------------------------------------------------
# Accelerated proximal gradient engine
# ---------------------------------------------------------------------------


def _fista(x0, forward, adjoint, target, prox, penalty, step, max_iters, tol):
    """Minimise ``0.5 ||forward(x) - target||^2 + penalty(x)``.

    ``forward`` must be linear, so the residual at the extrapolated point
    is the same combination of the last two residuals and each iteration
    costs one forward and one adjoint transform.
    """
    t_start = time.perf_counter()

    def residual(x):
        r = forward(x)
        r -= target
        return r

    def objective(r, x):
        return 0.5 * float(np.vdot(r, r)) + penalty(x)

    x = np.array(x0, dtype=np.float64)
    r = residual(x)
    F = objective(r, x)
    w, rw = x, r
    theta = 1.0
    trace = []
    converged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, max_iters + 1):
            z = prox(w - step * adjoint(rw), step)
            if not np.all(np.isfinite(z)):
                raise DivergenceError(it, step)
            rz = residual(z)
            Fz = objective(rz, z)
            if not math.isfinite(Fz):
                raise DivergenceError(it, step)
            if Fz > F and theta > 1.0:
                # momentum overshoot: drop the step and restart from x
                theta = 1.0
                w, rw = x, r
                trace.append(F)
                continue
            change = float(np.linalg.norm(z - x)) / max(float(np.linalg.norm(x)), 1e-12)
            x_prev, r_prev = x, r
            x, r, F = z, rz, Fz
            trace.append(F)
            if change <= tol:
                converged = True
                break
            theta_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
            beta = (theta - 1.0) / theta_next
            theta = theta_next
            w = x + beta * (x - x_prev)
            rw = r + beta * (r - r_prev)
    report = SolveReport(
        iterations=len(trace),
        final_objective=F,
        objective_trace=trace,
        wall_time=time.perf_counter() - t_start,
        converged=converged,
    )
    return x, report


# ---------------------------------------------------------------------------
# FISTA with differences
# ---------------------------------------------------------------------------


def _diff_step(cfg, psf, y, mode):
    if cfg.step is not None:
        return cfg.step
    r = y.schedule.passes(y.t_len)
    return calibrate_stepsize(psf, y.t_len, r, cfg.step_mode, mode)


def fista_d(y, init_d, cfg, psf, schedule=None, mode=CIRCULAR):
    """Recover frame differences from rolling-shutter measurements.

    Returns the estimated :class:`DiffMovie` and a :class:`SolveReport`.
    Raises :class:`DivergenceError` if the iterates blow up.
    """
    _check_measurements(y, psf, schedule)
    if init_d is None:
        init_d = np.zeros((y.n, y.n, y.t_len))
    d0 = init_d.data if isinstance(init_d, DiffMovie) else np.asarray(init_d, dtype=np.float64)
    if d0.shape != (y.n, y.n, y.t_len):
        raise ValueError(f"initial differences {d0.shape} do not match measurements")
    step = _diff_step(cfg, psf, y, mode)
    lam = cfg.lam
    dt = 1.0 / y.schedule.rate_hz
    op, target = _stack_problem(y, psf, mode)

    def forward(d):
        return op.forward(_prefix_sum0(d))

    def adjoint(r):
        return _suffix_sum0(op.adjoint(r))

    d, report = _fista(
        _frames_first(d0),
        forward,
        adjoint,
        target,
        prox=lambda v, s: soft_threshold(v, s * lam),
        penalty=lambda d: lam * float(np.sum(np.abs(d))),
        step=step,
        max_iters=cfg.max_iters,
        tol=cfg.conv_tol,
    )
    return DiffMovie(_frames_last(d), dt), report


def blocked_fista_d(y, cfg, psf, schedule=None, mode=CIRCULAR):
    """FISTA-D over consecutive blocks of ``cfg.block_len`` samples.

    Each block starts from zero differences except its first entry, which
    holds the previous block's last reconstructed frame.  A trailing block
    shorter than ``block_len`` is solved at its natural length.

    The returned differences are global: ``diffs_to_movie`` of the result is
    the reconstruction.  Per-block reports are merged into one.
    """
    _check_measurements(y, psf, schedule)
    B = cfg.block_len or y.t_len
    n, T = y.n, y.t_len
    prev_frame = np.zeros((n, n))
    pieces, reports = [], []
    for start in range(0, T, B):
        yb = y.slice(start, min(start + B, T))
        init = np.zeros((n, n, yb.t_len))
        init[:, :, 0] = prev_frame
        db, rep = fista_d(yb, init, cfg, psf, mode=mode)
        # the block's first entry is an absolute frame; store it as a
        # difference so the concatenation prefix-sums to the reconstruction
        piece = db.data.copy()
        piece[:, :, 0] -= prev_frame
        pieces.append(piece)
        reports.append(rep)
        prev_frame = db.data.sum(axis=2)
    d = DiffMovie(np.concatenate(pieces, axis=2), 1.0 / y.schedule.rate_hz)
    return d, SolveReport.merge(reports)


# ---------------------------------------------------------------------------
# Comparison solvers
# ---------------------------------------------------------------------------


def l1_solver(y, cfg, psf, schedule=None, mode=CIRCULAR):
    """Frame-wise lasso ``sum_t 0.5 ||A(t) x(t) - y(t)||^2 + lam ||x(t)||_1``.

    The frames do not interact, so each frame is its own FISTA problem with
    its own iteration budget and stopping test (as each block is in
    :func:`blocked_fista_d`).  Per-frame reports are merged into one.
    """
    _check_measurements(y, psf, schedule)
    lam = cfg.lam
    step = cfg.step if cfg.step is not None else frame_stepsize(psf, mode)
    x = np.zeros((y.t_len, y.n, y.n))
    reports = []
    for t in range(y.t_len):
        op, target = _stack_problem(y.slice(t, t + 1), psf, mode)
        x[t:t + 1], rep = _fista(
            np.zeros((1, y.n, y.n)),
            op.forward,
            op.adjoint,
            target,
            prox=lambda v, s: soft_threshold(v, s * lam),
            penalty=lambda x: lam * float(np.sum(np.abs(x))),
            step=step,
            max_iters=cfg.max_iters,
            tol=cfg.conv_tol,
        )
        reports.append(rep)
    return Movie(_frames_last(x), 1.0 / y.schedule.rate_hz), SolveReport.merge(reports)


def _grad(x, axis):
    return np.diff(x, axis=axis)


def _grad_adjoint(p, axis):
    pad = [(0, 0)] * p.ndim
    pad[axis] = (1, 1)
    return -np.diff(np.pad(p, pad), axis=axis)


def tv_weights(lam, lambda_split=None):
    """Per-axis TV weights ``(row, col, time)`` from lambda and its split."""
    lt, lxy = lambda_split or DEFAULT_LAMBDA_SPLIT
    return (lxy * lam, lxy * lam, lt * lam)


def tv_norm(x, weights):
    return float(sum(w * np.sum(np.abs(_grad(x, a))) for a, w in enumerate(weights)))


class TVProx:
    """Approximate prox of the weighted anisotropic TV norm.

    Solves ``argmin_x 0.5 ||x - v||^2 + s * sum_a w_a ||D_a x||_1`` by a
    fixed number of accelerated projected-gradient steps on the dual.  The
    dual variables persist between calls (warm start).
    """

    def __init__(self, weights, n_iter=20):
        self.weights = tuple(float(w) for w in weights)
        self.n_iter = int(n_iter)
        self._dual = None

    def __call__(self, v, s):
        ndim = v.ndim
        axes = [a for a in range(ndim) if v.shape[a] > 1 and self.weights[a] > 0]
        if not axes:
            return v.copy()
        bounds = [s * self.weights[a] for a in axes]
        if self._dual is None or any(p.shape != _grad(v, a).shape for p, a in zip(self._dual, axes)):
            self._dual = [np.zeros(_grad(v, a).shape) for a in axes]
        lip = 4.0 * len(axes)
        p = self._dual
        q = [pi.copy() for pi in p]
        theta = 1.0
        for _ in range(self.n_iter):
            x = v - sum(_grad_adjoint(qi, a) for qi, a in zip(q, axes))
            p_new = [np.clip(qi + _grad(x, a) / lip, -b, b) for qi, a, b in zip(q, axes, bounds)]
            theta_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
            beta = (theta - 1.0) / theta_next
            q = [pn + beta * (pn - po) for pn, po in zip(p_new, p)]
            p, theta = p_new, theta_next
        self._dual = p
        return v - sum(_grad_adjoint(pi, a) for pi, a in zip(p, axes))


def tv_solver(y, cfg, psf, schedule=None, mode=CIRCULAR):
    """Anisotropic TV reconstruction of the whole movie at once."""
    _check_measurements(y, psf, schedule)
    w_row, w_col, w_time = tv_weights(cfg.lam, cfg.lambda_split)
    weights = (w_time, w_row, w_col)  # frames-first axis order
    step = cfg.step if cfg.step is not None else frame_stepsize(psf, mode)
    prox = TVProx(weights, cfg.tv_inner_iters)
    op, target = _stack_problem(y, psf, mode)
    x, report = _fista(
        np.zeros((y.t_len, y.n, y.n)),
        op.forward,
        op.adjoint,
        target,
        prox=prox,
        penalty=lambda x: tv_norm(x, weights),
        step=step,
        max_iters=cfg.max_iters,
        tol=cfg.conv_tol,
    )
    return Movie(_frames_last(x), 1.0 / y.schedule.rate_hz), report
