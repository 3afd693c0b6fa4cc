import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdorx.core import (
    BLOCKS_PER_BUFFER, BUFFER_LEN, FFT_LEN, HOP, BlockSpectrum, PrbsState, RrcSpec, SampleBuffer,
    centred_taps, centred_transfer, exact_phase, exact_phasor, fft_forward, fft_inverse, filter_stream,
    overlap_save_frame, prbs_bits, prbs_period, rrc_filter_taps, rrc_gain, sequence_gaps,
)
from sdorx.errors import ConfigError, NyquistError, SignalSizeError


def direct_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x / np.sqrt(n)


def test_fft_forward_zero_and_impulse():
    assert np.all(fft_forward(np.zeros(FFT_LEN)).bins == 0)
    d = np.zeros(FFT_LEN)
    d[0] = 1
    np.testing.assert_allclose(fft_forward(d).bins, np.full(FFT_LEN, 1 / 32))


def test_fft_forward_matches_direct_dft_and_is_hermitian(rng):
    x = rng.standard_normal(FFT_LEN)
    X = fft_forward(x).bins
    np.testing.assert_allclose(X, direct_dft(x), atol=1e-9)
    k = np.arange(1, FFT_LEN)
    np.testing.assert_allclose(X[k], np.conj(X[FFT_LEN - k]), atol=1e-6)


def test_fft_wrong_length():
    with pytest.raises(SignalSizeError):
        fft_forward(np.zeros(1000))
    with pytest.raises(SignalSizeError):
        fft_inverse(np.zeros(FFT_LEN), 256)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_fft_round_trip(seed):
    x = np.random.default_rng(seed).standard_normal(FFT_LEN) + 1j * np.random.default_rng(seed + 1).standard_normal(FFT_LEN)
    y = fft_inverse(fft_forward(x), FFT_LEN)
    assert np.linalg.norm(y - x) <= 1e-6 * np.linalg.norm(x)


def test_decimating_inverse_dc_and_tone():
    y = fft_inverse(fft_forward(np.full(FFT_LEN, 0.7)), 512)
    np.testing.assert_allclose(y, np.full(512, 0.7), atol=1e-12)
    n = np.arange(FFT_LEN)
    tone = np.exp(2j * np.pi * 10 * n / FFT_LEN)
    y = fft_inverse(fft_forward(tone), 512)
    # bin 10 of 1024 at rate fs is bin 10 of 512 at rate fs/2: same samples, every other one
    np.testing.assert_allclose(y, tone[::2], atol=1e-12)


def test_block_spectrum_shape():
    s = BlockSpectrum(np.zeros((3, FFT_LEN)))
    assert s.n_blocks == 3 and s.valid_range[1] - s.valid_range[0] == 512


def test_overlap_save_frame_ramp_and_continuity():
    ramp = np.arange(BUFFER_LEN, dtype=np.float32)
    blocks, tail = overlap_save_frame(np.zeros(HOP, np.float32), ramp)
    assert blocks.shape == (BLOCKS_PER_BUFFER, FFT_LEN)
    np.testing.assert_array_equal(blocks[0], np.concatenate([np.zeros(512), np.arange(512)]))
    np.testing.assert_array_equal(tail, ramp[-HOP:])
    second = ramp + BUFFER_LEN
    blocks2, _ = overlap_save_frame(tail, second)
    valid = np.concatenate([blocks[:, 256:768].reshape(-1), blocks2[:, 256:768].reshape(-1)])
    expected = np.arange(-256, 2 * BUFFER_LEN - 256).clip(0, None)
    np.testing.assert_array_equal(valid, expected)
    with pytest.raises(SignalSizeError):
        overlap_save_frame(np.zeros(HOP), np.zeros(100))


def test_identity_fir_through_overlap_save(rng):
    x = rng.standard_normal(8 * HOP)
    y = filter_stream(x, centred_transfer(np.ones(1)))
    np.testing.assert_allclose(y.real[256:], x[:-256], atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(0, 256))
@settings(max_examples=20, deadline=None)
def test_overlap_save_equals_direct_convolution(seed, half):
    r = np.random.default_rng(seed)
    taps = r.standard_normal(2 * half + 1)
    x = r.standard_normal(6 * HOP)
    y = filter_stream(x, centred_transfer(taps))[256:]
    ref = np.convolve(x, taps)[half : half + len(x)][: len(y)]
    assert np.linalg.norm(y - ref) <= 1e-5 * np.linalg.norm(ref)


def test_centred_taps_inverts_transfer(rng):
    taps = rng.standard_normal(203)
    np.testing.assert_allclose(centred_taps(centred_transfer(taps), 203).real, taps, atol=1e-12)


def test_rrc_taps_unit_energy_symmetric_and_band_edge():
    spec = RrcSpec(0.5, 2e9, 64)
    taps = rrc_filter_taps(spec, 12e9)
    assert len(taps) % 2 == 1
    np.testing.assert_allclose(np.sum(taps**2), 1.0)
    np.testing.assert_allclose(taps, taps[::-1])
    assert abs(rrc_gain(taps, [0.0], 6)[0] - 1) < 1e-3


def test_rrc_band_edge_vanishes_for_long_span():
    # truncation leaves an edge residue that shrinks like 1/span
    residues = [abs(rrc_gain(rrc_filter_taps(RrcSpec(0.5, 2e9, span), 12e9), [0.75], 6)[0]) for span in (64, 512)]
    assert residues[1] < 1e-3 < residues[0]
    assert residues[0] / residues[1] == pytest.approx(8, rel=0.05)


def test_rrc_cascade_is_isi_free():
    sps = 4
    taps = rrc_filter_taps(RrcSpec(0.5, 1.0, 64), sps)
    rc = np.convolve(taps, taps)
    c = len(rc) // 2
    off = rc[c % sps :: sps]
    peak = rc[c]
    others = np.delete(off, c // sps)
    assert np.max(np.abs(others)) < 1e-3 * peak


def test_rrc_nyquist_violation():
    with pytest.raises(NyquistError):
        rrc_filter_taps(RrcSpec(0.5, 2e9), 2.5e9)
    with pytest.raises(ConfigError):
        RrcSpec(1.5, 1e9)


def test_prbs7_period_and_balance():
    state = PrbsState.of_order(7, 1)
    bits, _ = prbs_bits(state, 127 * 3)
    np.testing.assert_array_equal(bits[:127], bits[127:254])
    for p in range(1, 127):
        assert not np.array_equal(bits[:127], np.roll(bits[:127], p))
    assert prbs_period(state).sum() == 64


def test_prbs_determinism_and_state_advance():
    a, s1 = prbs_bits(PrbsState.of_order(15, 5), 1000)
    b, _ = prbs_bits(PrbsState.of_order(15, 5), 1000)
    np.testing.assert_array_equal(a, b)
    c, _ = prbs_bits(s1, 500)
    d, _ = prbs_bits(PrbsState.of_order(15, 5), 1500)
    np.testing.assert_array_equal(c, d[1000:])
    with pytest.raises(ConfigError):
        PrbsState.of_order(15, 0)


def test_exact_phase_is_chunk_independent():
    whole = exact_phase(0, 10000, 0.547e9, 4e9)
    parts = np.concatenate([exact_phase(0, 3333, 0.547e9, 4e9), exact_phase(3333, 6667, 0.547e9, 4e9)])
    np.testing.assert_array_equal(whole, parts)
    k = np.arange(10000)
    np.testing.assert_allclose(np.exp(1j * whole), np.exp(2j * np.pi * 0.547e9 / 4e9 * k), atol=1e-9)
    np.testing.assert_allclose(exact_phasor(123, 500, 0.547e9, 4e9), np.exp(1j * whole[123:623]), atol=1e-6)


def test_sample_buffer_checks():
    with pytest.raises(ConfigError):
        SampleBuffer(np.zeros(4), 0.0)
    b = SampleBuffer(np.zeros(4, complex), 1.0)
    assert b.domain.value == "complex-field"
    with pytest.raises(SignalSizeError):
        b.require_pipeline_length()
    assert sequence_gaps([0, 1, 3, 6]) == [2, 4, 5]
