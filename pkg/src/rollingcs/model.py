"""
Forward model of a diffuser + rolling-shutter camera.

A frame ``x`` (N x N) is blurred by the diffuser PSF, ``H x``, and the
rolling shutter keeps only a few rows of the blurred image at every sample
time, ``y(t) = P(t) H x(t) + z(t)``.

Two convolution geometries are supported:

``"circular"``
    Cyclic 2-D convolution (H is circulant, diagonalised by the DFT).
``"physical"``
    Zero-pad, linear convolution, crop back to the FPA.  Light spread past
    the array edges is lost, as on a real sensor.

In both modes the PSF's center pixel is ``(N // 2, N // 2)``, so a delta
kernel at the center is the identity.

Movies are stored as ``(N, N, T)`` arrays; every operator here accepts
either a single frame or a stack of frames along the last axis.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft as sfft

CIRCULAR = "circular"
PHYSICAL = "physical"
MODES = (CIRCULAR, PHYSICAL)

#: Largest N for which dense sensing matrices may be built.
MAX_DENSE_N = 32


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"unknown convolution mode {mode!r}; expected one of {MODES}")


def _readonly(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Psf:
    """Point spread function of the diffuser.

    Parameters
    ----------
    kernel : (N, N) array
        Real intensity kernel.  Its center pixel is ``(N // 2, N // 2)``.
    """

    kernel: np.ndarray
    freq: np.ndarray = field(init=False, repr=False)
    norm_inf_freq: float = field(init=False)

    def __post_init__(self):
        k = _readonly(self.kernel)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] < 1:
            raise ValueError(f"PSF kernel must be square 2-D, got shape {k.shape}")
        if not np.all(np.isfinite(k)):
            raise ValueError("PSF kernel contains non-finite values")
        freq = np.fft.fft2(k)
        freq.setflags(write=False)
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "freq", freq)
        object.__setattr__(self, "norm_inf_freq", float(np.max(np.abs(freq))))

    @property
    def n(self):
        return self.kernel.shape[0]

    @property
    def center(self):
        return self.n // 2

    @functools.cached_property
    def _circ_tf(self):
        # kernel rolled so its center pixel sits at the origin
        c = self.center
        return sfft.rfft2(np.roll(self.kernel, (-c, -c), axis=(0, 1)))

    @functools.cached_property
    def pad_len(self):
        return sfft.next_fast_len(2 * self.n - 1, real=True)

    @functools.cached_property
    def _phys_tf(self):
        q = self.pad_len
        return sfft.rfft2(self.kernel, s=(q, q))

    @functools.cached_property
    def crop_len(self):
        """Shortest fast FFT length that gives the cropped linear convolution exactly.

        The full linear convolution has indices ``0 .. 2N-2``; with period
        ``q`` index ``i >= q`` wraps to ``i - q``, which misses the kept
        window ``c .. c+N-1`` as long as ``q >= N + c``.
        """
        return sfft.next_fast_len(self.n + self.center, real=True)

    @functools.cached_property
    def _crop_tf(self):
        q = self.crop_len
        return sfft.rfft2(self.kernel, s=(q, q))

    def op_norm(self, mode=CIRCULAR):
        """Upper bound on the spectral norm of ``H`` in the given mode.

        For circular mode this is exactly ``max |F zeta|``.  The physical
        operator is a compression of a circular convolution on the padded
        grid, so its norm is bounded by the padded transform's maximum.
        """
        _check_mode(mode)
        if mode == CIRCULAR:
            return self.norm_inf_freq
        return float(np.max(np.abs(self._phys_tf)))


@dataclass(frozen=True, eq=False)
class Movie:
    """A real movie of ``T`` square frames, stored as an ``(N, N, T)`` array."""

    data: np.ndarray
    dt: float = 1e-3

    def __post_init__(self):
        d = _readonly(self.data)
        if d.ndim == 2:
            d = _readonly(d[:, :, None])
        if d.ndim != 3 or d.shape[0] != d.shape[1] or d.shape[0] < 1 or d.shape[2] < 1:
            raise ValueError(f"movie data must have shape (N, N, T), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("movie contains non-finite values")
        if not self.dt > 0:
            raise ValueError(f"frame period must be positive, got {self.dt}")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def t_len(self):
        return self.data.shape[2]

    @property
    def rate_hz(self):
        return 1.0 / self.dt

    def frame(self, t):
        return self.data[:, :, t]


@dataclass(frozen=True, eq=False)
class DiffMovie:
    """Frame-to-frame differences ``d(t) = x(t) - x(t-1)`` with ``x(-1) = 0``."""

    data: np.ndarray
    dt: float = 1e-3

    def __post_init__(self):
        d = _readonly(self.data)
        if d.ndim != 3 or d.shape[0] != d.shape[1]:
            raise ValueError(f"difference data must have shape (N, N, T), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("differences contain non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def t_len(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class ShutterSchedule:
    """Which FPA rows are read out at each sample index.

    Each shutter reads a contiguous block of ``lines_per_sample`` rows that
    advances by ``lines_per_sample`` rows per sample and wraps at row ``n``.
    A double shutter adds a second block ``shutter_gap`` rows below the
    first, moving in lockstep.
    """

    n: int
    lines_per_sample: int
    num_shutters: int = 1
    shutter_gap: Optional[int] = None
    phase_offset: int = 0
    rate_hz: float = 1000.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.lines_per_sample < 1:
            raise ValueError("lines_per_sample must be >= 1")
        if self.num_shutters not in (1, 2):
            raise ValueError("num_shutters must be 1 or 2")
        if self.shutter_gap is None:
            object.__setattr__(self, "shutter_gap", self.n // 2 if self.num_shutters == 2 else 0)
        if not self.rate_hz > 0:
            raise ValueError("rate_hz must be positive")
        L, n = self.lines_per_sample, self.n
        if L * self.num_shutters > n:
            raise ValueError(f"{self.num_shutters} x {L} lines do not fit in {n} rows")
        if self.num_shutters == 2:
            gap = self.shutter_gap % n
            if gap < L or n - gap < L:
                raise ValueError("double-shutter blocks overlap; increase shutter_gap")

    @property
    def rows_per_sample(self):
        return self.lines_per_sample * self.num_shutters

    @property
    def period(self):
        """Smallest p > 0 with ``rows_at(t + p) == rows_at(t)`` for all t."""
        # rows_at(t + p) is rows_at(t) shifted by p * L, so checking t = 0 suffices
        base = rows_at(self, 0)
        full = self.n // math.gcd(self.n, self.lines_per_sample)
        for p in range(1, full):
            if np.array_equal(rows_at(self, p), base):
                return p
        return full

    def passes(self, t_len):
        """Number of (possibly partial) sweeps over the FPA in ``t_len`` samples."""
        return max(1, math.ceil(t_len * self.rows_per_sample / self.n))

    def rows_at(self, t):
        return rows_at(self, t)

    def row_mask(self, t_len, t0=0):
        """Boolean ``(n, t_len)`` array, True where row r is read at sample t0 + t."""
        mask = np.zeros((self.n, t_len), dtype=bool)
        for t in range(t_len):
            mask[rows_at(self, t0 + t), t] = True
        return mask

    def to_dict(self):
        return {
            "n": self.n,
            "lines_per_sample": self.lines_per_sample,
            "num_shutters": self.num_shutters,
            "shutter_gap": self.shutter_gap,
            "phase_offset": self.phase_offset,
            "rate_hz": self.rate_hz,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("n", "lines_per_sample", "num_shutters",
                                         "shutter_gap", "phase_offset", "rate_hz") if k in d})


@dataclass(frozen=True)
class NoiseSpec:
    """i.i.d. Gaussian measurement noise at a target SNR (dB, measurement domain)."""

    snr_db: float


@dataclass(frozen=True, eq=False)
class MeasurementSeq:
    """Rolling-shutter readout.

    ``data[:, :, t]`` holds the rows ``schedule.rows_at(t0 + t)`` in
    ascending order.  ``t0`` is the global sample index of the first entry,
    nonzero only for slices of a longer sequence.
    """

    data: np.ndarray
    schedule: ShutterSchedule
    t0: int = 0

    def __post_init__(self):
        d = _readonly(self.data)
        s = self.schedule
        if d.ndim != 3 or d.shape[:2] != (s.rows_per_sample, s.n):
            raise ValueError(
                f"measurement shape {d.shape} inconsistent with schedule "
                f"({s.rows_per_sample}, {s.n}, T)"
            )
        if not np.all(np.isfinite(d)):
            raise ValueError("measurements contain non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def t_len(self):
        return self.data.shape[2]

    @property
    def n(self):
        return self.schedule.n

    def rows(self, t):
        return rows_at(self.schedule, self.t0 + t)

    def row_mask(self):
        return self.schedule.row_mask(self.t_len, self.t0)

    def embed(self):
        """Zero-filled ``(N, N, T)`` stack with each sample written to its rows."""
        out = np.zeros((self.n, self.n, self.t_len))
        for t in range(self.t_len):
            out[self.rows(t), :, t] = self.data[:, :, t]
        return out

    def slice(self, start, stop):
        return MeasurementSeq(self.data[:, :, start:stop], self.schedule, self.t0 + start)


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


def rows_at(schedule, t):
    """Sorted array of the FPA rows read at sample index ``t``."""
    if t < 0:
        raise ValueError("sample index must be >= 0")
    s = schedule
    L, n = s.lines_per_sample, s.n
    rows = set()
    for k in range(s.num_shutters):
        start = s.phase_offset + k * s.shutter_gap + t * L
        rows.update((start + i) % n for i in range(L))
    return np.array(sorted(rows), dtype=np.intp)


def _check_frames(frames, psf):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim not in (2, 3) or frames.shape[:2] != psf.kernel.shape:
        raise ValueError(
            f"frame shape {frames.shape[:2]} does not match PSF shape {psf.kernel.shape}"
        )
    return frames


def convolve(frame, psf, mode=CIRCULAR):
    """Apply ``H``: blur a frame (or an ``(N, N, T)`` stack) with the PSF."""
    _check_mode(mode)
    f = _check_frames(frame, psf)
    n = psf.n
    if mode == CIRCULAR:
        F = sfft.rfft2(f, axes=(0, 1))
        tf = psf._circ_tf if f.ndim == 2 else psf._circ_tf[:, :, None]
        return sfft.irfft2(F * tf, s=(n, n), axes=(0, 1))
    q, c = psf.crop_len, psf.center
    F = sfft.rfft2(f, s=(q, q), axes=(0, 1))
    tf = psf._crop_tf if f.ndim == 2 else psf._crop_tf[:, :, None]
    full = sfft.irfft2(F * tf, s=(q, q), axes=(0, 1))
    return np.ascontiguousarray(full[c:c + n, c:c + n])


def convolve_adjoint(frame, psf, mode=CIRCULAR):
    """Apply ``H^T`` (correlation with the PSF, cropped/padded as in ``convolve``)."""
    _check_mode(mode)
    v = _check_frames(frame, psf)
    n = psf.n
    if mode == CIRCULAR:
        V = sfft.rfft2(v, axes=(0, 1))
        tf = psf._circ_tf if v.ndim == 2 else psf._circ_tf[:, :, None]
        return sfft.irfft2(V * np.conj(tf), s=(n, n), axes=(0, 1))
    q, c = psf.crop_len, psf.center
    u = np.zeros((q, q) + v.shape[2:])
    u[c:c + n, c:c + n] = v
    tf = psf._crop_tf if v.ndim == 2 else psf._crop_tf[:, :, None]
    full = sfft.irfft2(sfft.rfft2(u, axes=(0, 1)) * np.conj(tf), s=(q, q), axes=(0, 1))
    return np.ascontiguousarray(full[:n, :n])


class StackSensing:
    """``A(t) = P(t) H`` on a frames-first ``(T, N, N)`` stack.

    ``forward`` returns only the rows read at each sample, as a ``(T, k, N)``
    array (``k`` rows per sample, ascending); ``adjoint`` maps such an array
    back to ``(T, N, N)``.  The row-direction DFT is evaluated only at the
    ``k`` sampled rows, as a small matrix product, so each application costs
    one full 2-D FFT instead of two.

    Parameters
    ----------
    psf : Psf
    rows : (T, k) int array
        Rows read at each sample.
    mode : {"circular", "physical"}
    """

    def __init__(self, psf, rows, mode=CIRCULAR):
        _check_mode(mode)
        rows = np.asarray(rows, dtype=np.intp)
        n = psf.n
        if mode == CIRCULAR:
            q, c, tf = n, 0, psf._circ_tf
        else:
            # sample row i sits at row c + i of the padded grid
            q, c, tf = psf.crop_len, psf.center, psf._crop_tf
        self.n, self.q, self.c = n, q, c
        self.shape = (rows.shape[0], rows.shape[1], n)
        self._tf = tf
        self._ctf = np.conj(tf)
        wave = np.exp(2j * np.pi * np.outer(rows.ravel() + c, np.arange(q)) / q)
        wave = wave.reshape(rows.shape + (q,))
        self._rows_inv = wave / q  # inverse DFT along rows, at the sampled rows only
        self._rows_fwd = np.conj(wave).transpose(0, 2, 1).copy()  # DFT of a row-sparse frame

    def forward(self, x):
        n, q, c = self.n, self.q, self.c
        F = sfft.rfft2(x, s=(q, q))
        F *= self._tf
        z = sfft.irfft(np.matmul(self._rows_inv, F), n=q, axis=-1, overwrite_x=True)
        return np.ascontiguousarray(z[:, :, c:c + n]) if q != n else z

    def adjoint(self, r):
        n, q, c = self.n, self.q, self.c
        if q != n:
            u = np.zeros(r.shape[:2] + (q,))
            u[:, :, c:c + n] = r
            r = u
        V = np.matmul(self._rows_fwd, sfft.rfft(r, axis=-1))
        V *= self._ctf
        full = sfft.irfft2(V, s=(q, q), overwrite_x=True)
        return np.ascontiguousarray(full[:, :n, :n]) if q != n else full


def apply_shutter(frame, schedule, t):
    """Apply ``P(t)``: keep the rows read at sample ``t``, ascending."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (schedule.n, schedule.n):
        raise ValueError(f"frame must be {schedule.n}x{schedule.n}, got {frame.shape}")
    return frame[rows_at(schedule, t)]


def shutter_adjoint(sample, schedule, t):
    """Apply ``P(t)^T``: write sampled rows back into a zero frame."""
    sample = np.asarray(sample, dtype=np.float64)
    rows = rows_at(schedule, t)
    if sample.shape != (len(rows), schedule.n):
        raise ValueError(f"sample must have shape {(len(rows), schedule.n)}, got {sample.shape}")
    out = np.zeros((schedule.n, schedule.n))
    out[rows] = sample
    return out


def measure(movie, psf, schedule, mode=CIRCULAR, noise=None, rng_seed=0):
    """Simulate the rolling-shutter readout of ``movie``.

    Noise, when requested, is i.i.d. Gaussian with its variance set from the
    realized noiseless measurement power so that the sequence SNR equals
    ``noise.snr_db``.
    """
    if not (movie.n == psf.n == schedule.n):
        raise ValueError(
            f"size mismatch: movie N={movie.n}, psf N={psf.n}, schedule N={schedule.n}"
        )
    blurred = convolve(movie.data, psf, mode)
    y = np.empty((schedule.rows_per_sample, schedule.n, movie.t_len))
    for t in range(movie.t_len):
        y[:, :, t] = blurred[rows_at(schedule, t), :, t]
    if noise is not None:
        power = float(np.mean(y ** 2))
        if power == 0.0:
            raise ValueError("cannot calibrate SNR on an all-zero signal")
        sigma = math.sqrt(power / 10.0 ** (noise.snr_db / 10.0))
        rng = np.random.default_rng(rng_seed)
        y = y + sigma * rng.standard_normal(y.shape)
    return MeasurementSeq(y, schedule)


def _dense_convolution(psf, mode):
    """Dense ``H`` built entry by entry from the index formula (no FFTs)."""
    n, c = psf.n, psf.center
    k = psf.kernel
    i, j, p, q = np.meshgrid(*(np.arange(n),) * 4, indexing="ij")
    a = i + c - p
    b = j + c - q
    if mode == CIRCULAR:
        H = k[a % n, b % n]
    else:
        inside = (a >= 0) & (a < n) & (b >= 0) & (b < n)
        H = np.where(inside, k[np.clip(a, 0, n - 1), np.clip(b, 0, n - 1)], 0.0)
    return H.reshape(n * n, n * n)


def materialize_sensing_matrix(psf, schedule, t, mode=CIRCULAR):
    """Dense ``A(t) = P(t) H`` acting on row-major vectorised frames.

    Only for small test problems (N <= 32).
    """
    _check_mode(mode)
    n = psf.n
    if n > MAX_DENSE_N:
        raise ValueError(f"refusing to materialize a dense operator for N={n} > {MAX_DENSE_N}")
    if schedule.n != n:
        raise ValueError("schedule and PSF sizes differ")
    H = _dense_convolution(psf, mode).reshape(n, n, n * n)
    return H[rows_at(schedule, t)].reshape(-1, n * n)
