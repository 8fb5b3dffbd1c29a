import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rollingcs.model import CIRCULAR, Movie, convolve
from rollingcs.signals import (
    DEFAULT_SIGMA_PX,
    PulseSpec,
    PsteSpec,
    default_pste_spec,
    gaussian_blob,
    gen_pste,
    gen_psf,
    gen_pulse_sweep,
    layout_pulses,
    pulse_supports,
    pulse_sweep_spec,
    temporal_waveform,
)


def test_default_pste_matches_published_setup():
    spec = default_pste_spec()
    assert [p.freq_hz for p in spec.pulses] == [15.0, 50.0, 100.0, 400.0]
    assert spec.duration_s == 0.3 and spec.n == 128 and spec.rate_hz == 1000.0
    x = gen_pste(spec)
    assert x.data.shape == (128, 128, 300)
    assert x.dt == pytest.approx(1e-3)


def test_default_blob_is_three_pixels_across():
    assert DEFAULT_SIGMA_PX == pytest.approx(3 / (2 * math.sqrt(2 * math.log(2))), rel=1e-12)
    assert DEFAULT_SIGMA_PX == pytest.approx(1.27, abs=0.005)
    blob = gaussian_blob(9, DEFAULT_SIGMA_PX, (4, 4))
    # half maximum at 1.5 px from the center
    assert math.exp(-1.5 ** 2 / (2 * DEFAULT_SIGMA_PX ** 2)) == pytest.approx(0.5, rel=1e-12)
    assert blob[4, 4] == 1.0


def test_zero_amplitude_gives_zero_movie():
    spec = PsteSpec(layout_pulses((20.0, 60.0), 0.2, amplitude=0.0), n=8, duration_s=0.2)
    assert not np.any(gen_pste(spec).data)


def test_overlapping_pulses_rejected():
    spec = PsteSpec((PulseSpec(10.0, 0.0), PulseSpec(50.0, 0.1)), n=4, duration_s=0.3)
    with pytest.raises(ValueError, match="overlap"):
        gen_pste(spec)


@pytest.mark.parametrize("kw", [dict(freq_hz=0, start_s=0), dict(freq_hz=10, start_s=0, amplitude=-1),
                                dict(freq_hz=10, start_s=0, cycles=0)])
def test_pulse_spec_invariants(kw):
    with pytest.raises(ValueError):
        PulseSpec(**kw)


def test_pste_spec_invariants():
    with pytest.raises(ValueError):
        PsteSpec((), n=4, sigma_px=0.0)
    with pytest.raises(ValueError):
        PsteSpec((), n=4, duration_s=1e-4)
    with pytest.raises(ValueError):
        layout_pulses((1.0,), 0.5)  # a 2 s pulse cannot fit


def test_spec_roundtrip():
    spec = default_pste_spec(n=16, duration_s=0.1, freqs_hz=(50.0, 200.0))
    assert PsteSpec.from_dict(spec.to_dict()) == spec


@settings(max_examples=30, deadline=None)
@given(sigma=st.floats(0.3, 4.0), f=st.floats(20.0, 400.0), row=st.integers(4, 11), col=st.integers(4, 11))
def test_pste_nonnegative_and_gaussian_marginal(sigma, f, row, col):
    spec = PsteSpec(layout_pulses((f,), 0.1), n=16, sigma_px=sigma, center=(row, col), duration_s=0.1)
    x = gen_pste(spec).data
    assert x.min() >= 0
    ref = gaussian_blob(16, sigma, (row, col)).ravel()
    for t in np.flatnonzero(x.max(axis=(0, 1)) > 0):
        frame = x[:, :, t].ravel()
        assert np.corrcoef(frame, ref)[0, 1] >= 0.999


def test_pulse_energy_decreases_with_frequency():
    freqs = (15.0, 50.0, 100.0, 400.0)
    energies = []
    for f in freqs:
        w = temporal_waveform((PulseSpec(f, 0.001),), 100_000.0, 20_000)
        energies.append(np.sum(w ** 2))
    assert all(a > b for a, b in zip(energies, energies[1:]))


def test_pulse_supports_cover_the_pulse():
    spec = default_pste_spec(n=8)
    x = gen_pste(spec).data[4, 4]
    sup = pulse_supports(spec.pulses, spec.rate_hz, spec.t_len)
    inside = np.zeros(spec.t_len, bool)
    for s in sup:
        inside[s.frames] = True
    assert not np.any(x[~inside])


def test_pulse_sweep_endpoints_and_disjoint_supports():
    spec = pulse_sweep_spec(40.0, 480.0, 2, 0.05, n=8)
    assert [p.freq_hz for p in spec.pulses] == [40.0, 480.0]
    movie, sup = gen_pulse_sweep(40.0, 480.0, 6, 0.055, n=8)
    assert isinstance(movie, Movie)
    assert [s.freq_hz for s in sup] == pytest.approx(np.linspace(40, 480, 6))
    for a, b in zip(sup, sup[1:]):
        assert a.stop <= b.first


def test_full_scale_sweep_to_nyquist():
    spec = pulse_sweep_spec(40.0, 500.0, 24, 0.06, n=4)
    assert spec.pulses[-1].freq_hz == 500.0


def test_pulse_sweep_errors():
    with pytest.raises(ValueError, match="Nyquist"):
        pulse_sweep_spec(40.0, 600.0, 4, 0.05)
    with pytest.raises(ValueError):
        pulse_sweep_spec(100.0, 50.0, 4, 0.05)


# ---------------------------------------------------------------------------
# PSFs
# ---------------------------------------------------------------------------


def test_delta_psf_is_identity():
    psf = gen_psf("delta", 8)
    x = np.random.default_rng(0).standard_normal((8, 8))
    np.testing.assert_allclose(convolve(x, psf, CIRCULAR), x, atol=1e-12)


def test_subgaussian_statistics():
    k = gen_psf("subgaussian", 128, 3).kernel
    assert abs(k.mean()) <= 3 / 128
    assert k.var() == pytest.approx(1.0, rel=0.05)


@pytest.mark.parametrize("radius", [0.2, 0.35, 0.5])
def test_speckle_nonnegative_and_limited(radius):
    n = 32
    k = gen_psf("speckle", n, 5, radius=radius).kernel
    assert k.min() >= 0
    support = np.count_nonzero(k) / k.size
    rr = np.hypot(*np.meshgrid(np.arange(n) - n // 2, np.arange(n) - n // 2, indexing="ij"))
    assert support <= np.mean(rr <= radius * n)
    assert np.linalg.norm(k) == pytest.approx(n)


@pytest.mark.parametrize("kind", ["subgaussian", "speckle", "delta"])
def test_psf_deterministic(kind):
    np.testing.assert_array_equal(gen_psf(kind, 16, 7).kernel, gen_psf(kind, 16, 7).kernel)


def test_psf_errors():
    with pytest.raises(ValueError):
        gen_psf("speckle", 0)
    with pytest.raises(ValueError):
        gen_psf("gaussian", 8)

