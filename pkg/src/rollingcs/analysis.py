"""
Error metrics, restricted-isometry probing and the reconstruction error bound.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .model import CIRCULAR, convolve, convolve_adjoint, materialize_sensing_matrix, rows_at

#: Refuse exhaustive RIP enumeration beyond this many supports.
MAX_EXHAUSTIVE_SUPPORTS = 2_000_000


@dataclass
class ErrorReport:
    avg_framewise_l2: float
    per_frame_l2: List[float]
    per_pulse_normalized: Optional[List[Tuple[float, float]]] = None

    def to_dict(self):
        d = asdict(self)
        if self.per_pulse_normalized is not None:
            d["per_pulse_normalized"] = [list(p) for p in self.per_pulse_normalized]
        return d


@dataclass
class RipEstimate:
    """Empirical lower bound on the restricted isometry constant ``delta_k``.

    ``normalization`` is the factor ``c`` applied to the operator so that the
    expected ratio ``||c A x||^2 / ||x||^2`` over random k-sparse ``x`` is 1.
    ``degenerate`` flags an operator that sees no energy at all.
    """

    k: int
    trials: int
    delta_lower: float
    normalization: float
    exhaustive: bool = False
    degenerate: bool = False
    ratios: List[float] = field(default_factory=list, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("ratios")
        return d


def _as_array(x):
    return getattr(x, "data", x)


def avg_framewise_error(x_star, x_hat):
    """Per-frame l2 errors and their mean, ``(1/T) sum_t ||x*(t) - x^(t)||_2``."""
    a, b = np.asarray(_as_array(x_star)), np.asarray(_as_array(x_hat))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    per_frame = np.sqrt(np.sum((a - b) ** 2, axis=(0, 1)))
    return ErrorReport(float(np.mean(per_frame)), [float(v) for v in per_frame])


def pulse_normalized_errors(x_star, x_hat, supports):
    """Per-pulse error relative to the pulse's size.

    For each pulse: mean per-frame l2 error over its frames divided by the
    mean per-frame l2 norm of the true signal over the same frames.  A zero
    reconstruction scores exactly 1.
    """
    a, b = np.asarray(_as_array(x_star)), np.asarray(_as_array(x_hat))
    err = np.sqrt(np.sum((a - b) ** 2, axis=(0, 1)))
    mag = np.sqrt(np.sum(a ** 2, axis=(0, 1)))
    out = []
    for s in supports:
        power = float(np.mean(mag[s.frames]))
        if power == 0.0:
            raise ValueError(f"pulse at {s.freq_hz} Hz has no energy")
        out.append((float(s.freq_hz), float(np.mean(err[s.frames])) / power))
    return out


def snr_db(signal, noise):
    """``10 log10(mean signal power / mean noise power)``."""
    ps = float(np.mean(np.square(signal)))
    pn = float(np.mean(np.square(noise)))
    return 10.0 * math.log10(ps / pn)


# ---------------------------------------------------------------------------
# Restricted isometry
# ---------------------------------------------------------------------------


def _frobenius_sq(psf, schedule, t, mode):
    """``||P(t) H||_F^2`` via the adjoint images of the sampled pixels."""
    n = psf.n
    rows = rows_at(schedule, t)
    probes = np.zeros((n, n, len(rows) * n))
    k = 0
    for r in rows:
        for c in range(n):
            probes[r, c, k] = 1.0
            k += 1
    return float(np.sum(convolve_adjoint(probes, psf, mode) ** 2))


def _sparse_trials(n, k, trials, rng_seed):
    seeds = np.random.SeedSequence(rng_seed).spawn(trials)
    x = np.zeros((n * n, trials))
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        support = rng.choice(n * n, size=k, replace=False)
        x[support, i] = rng.standard_normal(k)
    return x.reshape(n, n, trials)


def estimate_rip(psf, schedule, t, k, trials=200, rng_seed=0, mode=CIRCULAR, exhaustive=False):
    """Probe ``delta_k`` of ``A(t) = P(t) H``.

    Monte Carlo (default): draw ``trials`` k-sparse vectors with uniform
    support and standard normal values; report the largest
    ``|c^2 ||A x||^2 / ||x||^2 - 1|``.  This only lower-bounds ``delta_k``.

    Exhaustive: enumerate every support of size ``k`` and take the extreme
    eigenvalues of the normalised Gram submatrix, which gives ``delta_k``
    exactly for the normalised operator.  Needs a small N.

    Trial ``i`` uses the i-th child of ``SeedSequence(rng_seed)``, so a run
    with more trials extends, never reshuffles, a run with fewer.
    """
    n = psf.n
    if not 1 <= k <= n * n:
        raise ValueError(f"k must be in [1, {n * n}]")
    fro = _frobenius_sq(psf, schedule, t, mode)
    if fro == 0.0:
        return RipEstimate(k, trials, 1.0, 0.0, exhaustive, degenerate=True)
    c2 = n * n / fro

    if exhaustive:
        A = materialize_sensing_matrix(psf, schedule, t, mode)
        G = c2 * (A.T @ A)
        count = math.comb(n * n, k)
        if count > MAX_EXHAUSTIVE_SUPPORTS:
            raise ValueError(f"{count} supports is too many to enumerate")
        delta = 0.0
        for support in itertools.combinations(range(n * n), k):
            idx = np.array(support)
            ev = np.linalg.eigvalsh(G[np.ix_(idx, idx)])
            delta = max(delta, ev[-1] - 1.0, 1.0 - ev[0])
        return RipEstimate(k, count, float(delta), math.sqrt(c2), exhaustive=True)

    x = _sparse_trials(n, k, trials, rng_seed)
    rows = rows_at(schedule, t)
    # one trial at a time: batched FFTs round differently with the batch size,
    # which would break the prefix property in the last ulp
    ratios = np.empty(trials)
    for i in range(trials):
        xi = x[:, :, i]
        ratios[i] = c2 * np.sum(convolve(xi, psf, mode)[rows] ** 2) / np.sum(xi ** 2)
    delta = float(np.max(np.abs(ratios - 1.0)))
    return RipEstimate(k, trials, delta, math.sqrt(c2), ratios=[float(r) for r in ratios])


# ---------------------------------------------------------------------------
# Error bound for the difference-regularised reconstruction
# ---------------------------------------------------------------------------


def lemma1_check(x):
    """Check ``||x||_1 <= n (|x(0)| + ||forward diff of x||_1)``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty vector")
    lhs = float(np.sum(np.abs(x)))
    rhs = float(x.size * (abs(x[0]) + np.sum(np.abs(np.diff(x)))))
    return lhs, rhs, lhs <= rhs + 1e-12


@dataclass
class BoundTerms:
    """Right-hand side of the average frame-wise error bound, piece by piece."""

    value: float
    sparsity_term: float
    noise_term: float
    tail_l1: float
    C: float
    C_prime: float
    C_dd: float


def bound_constants(delta_2k, t_len):
    """Constants ``(C'', C, C')`` of the bound.

    C'' = 1 / (1 - 4 T delta_2k) comes from absorbing the
    ``4 T delta_2k sum_t ||h_{I u J(t)}||`` term back into the left side.
    The last step bounds (2T + 1) / T by 3, giving C = 3 C'' + 2 for the
    sparsity term and C' = 6 C'' for the noise term ``C' T eps``.
    """
    C_dd = 1.0 / (1.0 - 4.0 * t_len * delta_2k)
    return C_dd, 3.0 * C_dd + 2.0, 6.0 * C_dd


def _pixel_index(index_set, n):
    out = set()
    for i in index_set:
        if isinstance(i, (tuple, list)):
            out.add(int(i[0]) * n + int(i[1]))
        else:
            out.add(int(i))
    return sorted(out)


def theorem2_bound(x_star, k, delta_2k, eps, index_set):
    """Bound on ``(1/T) sum_t ||x*(t) - x^(t)||_2``.

    ``C (||x*(0) off I||_1 + ||time gradient of x* off I||_1) / sqrt(k) + C' T eps``

    ``index_set`` holds at most ``k`` pixels, as flat indices or
    ``(row, col)`` pairs; it is repeated in every frame.  Requires
    ``delta_2k < 1 / (4 T)``.
    """
    data = np.asarray(_as_array(x_star), dtype=np.float64)
    n, t_len = data.shape[0], data.shape[2]
    if not 0 <= delta_2k < 1.0 / (4.0 * t_len):
        raise ValueError(
            f"delta_2k={delta_2k:.4g} violates delta_2k < 1/(4T) = {1.0 / (4.0 * t_len):.4g}"
        )
    if eps < 0:
        raise ValueError("eps must be >= 0")
    idx = _pixel_index(index_set, n)
    if len(idx) > k:
        raise ValueError(f"index set has {len(idx)} > k = {k} pixels")
    flat = data.reshape(n * n, t_len)
    off = np.ones(n * n, dtype=bool)
    off[idx] = False
    tail = float(np.sum(np.abs(flat[off, 0])) + np.sum(np.abs(np.diff(flat[off], axis=1))))
    C_dd, C, C_prime = bound_constants(delta_2k, t_len)
    sparsity = C * tail / math.sqrt(k)
    noise = C_prime * t_len * eps
    return BoundTerms(sparsity + noise, sparsity, noise, tail, C, C_prime, C_dd)
