"""
Synthetic test signals and PSFs.

A point-source transient (PSTE) is a fixed spatial Gaussian blob whose
brightness follows a 1-D waveform made of short oscillatory pulses.  Each
pulse lasts ``cycles`` periods of its frequency and is shaped as

    amplitude * w(s) * (1 - cos(2 pi f s)) / 2,   0 <= s <= cycles / f

where ``w`` is a raised-cosine (Hann) window over the pulse.  The ``1 -
cos`` pedestal keeps the waveform nonnegative.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from .model import Movie, Psf

#: sigma of a Gaussian whose full width at half maximum is one pixel
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

#: Gaussian width giving a blob about 3 pixels across (FWHM = 3 px).
DEFAULT_SIGMA_PX = 3.0 * FWHM_TO_SIGMA

DEFAULT_FREQS_HZ = (15.0, 50.0, 100.0, 400.0)


@dataclass(frozen=True)
class PulseSpec:
    freq_hz: float
    start_s: float
    cycles: int = 2
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.freq_hz > 0:
            raise ValueError("pulse frequency must be positive")
        if self.amplitude < 0:
            raise ValueError("pulse amplitude must be >= 0")
        if self.cycles < 1:
            raise ValueError("a pulse needs at least one cycle")

    @property
    def duration_s(self):
        return self.cycles / self.freq_hz

    @property
    def stop_s(self):
        return self.start_s + self.duration_s


@dataclass(frozen=True)
class PsteSpec:
    pulses: Tuple[PulseSpec, ...]
    n: int = 128
    sigma_px: float = DEFAULT_SIGMA_PX
    center: Optional[Tuple[float, float]] = None
    rate_hz: float = 1000.0
    duration_s: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "pulses", tuple(
            p if isinstance(p, PulseSpec) else PulseSpec(**p) for p in self.pulses))
        if self.center is None:
            object.__setattr__(self, "center", (self.n // 2, self.n // 2))
        else:
            object.__setattr__(self, "center", tuple(self.center))
        if not self.sigma_px > 0:
            raise ValueError("sigma_px must be positive")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.duration_s * self.rate_hz < 1:
            raise ValueError("signal must span at least one frame")

    @property
    def t_len(self):
        return int(round(self.duration_s * self.rate_hz))

    def to_dict(self):
        d = asdict(self)
        d["center"] = list(self.center)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["pulses"] = tuple(PulseSpec(**p) for p in d["pulses"])
        return cls(**d)


@dataclass(frozen=True)
class PulseSupport:
    """Where a pulse lives in frame indices, for per-pulse scoring."""

    freq_hz: float
    first: int
    stop: int

    @property
    def frames(self):
        return slice(self.first, self.stop)


def layout_pulses(freqs_hz, duration_s, cycles=2, amplitude=1.0):
    """Place pulses back to back with equal gaps filling ``duration_s``."""
    durs = [cycles / f for f in freqs_hz]
    gap = (duration_s - sum(durs)) / (len(durs) + 1)
    if gap < 0:
        raise ValueError(f"pulses of total length {sum(durs):.4g}s do not fit in {duration_s}s")
    pulses, t = [], gap
    for f, dur in zip(freqs_hz, durs):
        pulses.append(PulseSpec(float(f), t, cycles, amplitude))
        t += dur + gap
    return tuple(pulses)


def default_pste_spec(n=128, rate_hz=1000.0, duration_s=0.3, freqs_hz=DEFAULT_FREQS_HZ,
                      cycles=2, sigma_px=DEFAULT_SIGMA_PX):
    """Four-pulse transient (15/50/100/400 Hz over 300 ms by default)."""
    return PsteSpec(layout_pulses(freqs_hz, duration_s, cycles), n=n, sigma_px=sigma_px,
                    rate_hz=rate_hz, duration_s=duration_s)


def pulse_waveform(pulse, times):
    """Samples of one pulse at ``times`` (seconds); zero outside the pulse."""
    s = np.asarray(times, dtype=np.float64) - pulse.start_s
    inside = (s >= 0) & (s <= pulse.duration_s)
    window = 0.5 * (1.0 - np.cos(2.0 * np.pi * s / pulse.duration_s))
    carrier = 0.5 * (1.0 - np.cos(2.0 * np.pi * pulse.freq_hz * s))
    return np.where(inside, pulse.amplitude * window * carrier, 0.0)


def _check_disjoint(pulses):
    ordered = sorted(pulses, key=lambda p: p.start_s)
    for a, b in zip(ordered, ordered[1:]):
        if a.stop_s > b.start_s:
            raise ValueError(f"pulses at {a.freq_hz} Hz and {b.freq_hz} Hz overlap")


def temporal_waveform(pulses, rate_hz, t_len):
    _check_disjoint(pulses)
    times = np.arange(t_len) / rate_hz
    wave = np.zeros(t_len)
    for p in pulses:
        wave += pulse_waveform(p, times)
    return np.clip(wave, 0.0, None)


def gaussian_blob(n, sigma_px, center):
    """Unit-peak 2-D Gaussian on an ``n x n`` grid."""
    r = np.arange(n)[:, None] - center[0]
    c = np.arange(n)[None, :] - center[1]
    return np.exp(-(r ** 2 + c ** 2) / (2.0 * sigma_px ** 2))


def pulse_supports(pulses, rate_hz, t_len):
    """Frame ranges covered by each pulse (in the order given)."""
    out = []
    for p in pulses:
        first = max(0, math.ceil(p.start_s * rate_hz - 1e-9))
        stop = min(t_len, math.floor(p.stop_s * rate_hz + 1e-9) + 1)
        out.append(PulseSupport(p.freq_hz, first, stop))
    return out


def gen_pste(spec):
    """Movie of a static Gaussian blob modulated by the pulse train."""
    wave = temporal_waveform(spec.pulses, spec.rate_hz, spec.t_len)
    blob = gaussian_blob(spec.n, spec.sigma_px, spec.center)
    return Movie(blob[:, :, None] * wave[None, None, :], 1.0 / spec.rate_hz)


def pulse_sweep_spec(f_start, f_end, n_pulses, spacing_s, n=128, sigma_px=DEFAULT_SIGMA_PX,
                     center=None, rate_hz=1000.0, cycles=2, amplitude=1.0, lead_s=None):
    """Spec for pulses at regular intervals with linearly increasing frequency."""
    if f_start > f_end:
        raise ValueError("f_start must not exceed f_end")
    if f_end > rate_hz / 2:
        raise ValueError(f"f_end={f_end} Hz is above the Nyquist limit {rate_hz / 2} Hz")
    if n_pulses < 1:
        raise ValueError("need at least one pulse")
    freqs = np.linspace(f_start, f_end, n_pulses) if n_pulses > 1 else np.array([f_start])
    lead = spacing_s / 2 if lead_s is None else lead_s
    pulses = tuple(PulseSpec(float(f), lead + i * spacing_s, cycles, amplitude)
                   for i, f in enumerate(freqs))
    duration = lead + (n_pulses - 1) * spacing_s + pulses[-1].duration_s + lead
    return PsteSpec(pulses, n=n, sigma_px=sigma_px, center=center, rate_hz=rate_hz,
                    duration_s=duration)


def gen_pulse_sweep(f_start, f_end, n_pulses, spacing_s, **spatial):
    """Pulse train sweeping ``f_start -> f_end``; returns the movie and pulse supports."""
    spec = pulse_sweep_spec(f_start, f_end, n_pulses, spacing_s, **spatial)
    movie = gen_pste(spec)
    return movie, pulse_supports(spec.pulses, spec.rate_hz, spec.t_len)


# ---------------------------------------------------------------------------
# PSFs
# ---------------------------------------------------------------------------


def _speckle(n, rng, radius=0.35, grain=2.0):
    # pupil-filtered complex noise gives speckle grains about `grain` px wide
    noise = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.fftfreq(n)[None, :]
    pupil = np.hypot(fy, fx) <= 1.0 / (2.0 * grain)
    field = np.fft.ifft2(np.fft.fft2(noise) * pupil)
    c = n // 2
    rr = np.hypot(np.arange(n)[:, None] - c, np.arange(n)[None, :] - c)
    envelope = rr <= radius * n
    return np.abs(field * envelope) ** 2


def gen_psf(kind, n, rng_seed=0, **params):
    """Synthetic PSF.

    kind : {"subgaussian", "speckle", "delta"}
        ``subgaussian`` -- i.i.d. standard normal entries.
        ``speckle`` -- nonnegative speckle limited to a disk of
        ``radius * n`` pixels around the center (``grain`` sets the speckle
        size), scaled to ``||zeta||_2 = n``.
        ``delta`` -- unit impulse at the center pixel.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    if kind == "delta":
        k = np.zeros((n, n))
        k[n // 2, n // 2] = 1.0
    elif kind == "subgaussian":
        k = rng.standard_normal((n, n))
    elif kind == "speckle":
        k = _speckle(n, rng, **params)
        k *= n / np.linalg.norm(k)
    else:
        raise ValueError(f"unknown PSF kind {kind!r}")
    return Psf(k)
