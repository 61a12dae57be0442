import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegflow.bandfilter import Band, bandpass, rhythm_stack, settling_length, standard_bands
from eegflow.errors import ValidationError
from helpers import dft_amplitude

RATE = 256.0


def sine(freq, n=512, rate=RATE, amp=1.0, phase=0.0):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / rate + phase)


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def band(name):
    return {b.name: b for b in standard_bands()}[name]


def test_standard_bands():
    bands = standard_bands()
    assert len(bands) == 5
    assert [b.name for b in bands] == ["alpha", "beta", "gamma", "delta", "theta"]
    assert (band("alpha").lo, band("alpha").hi) == (8, 13)
    assert (band("delta").lo, band("delta").hi) == (0.5, 3)
    assert (band("beta").lo, band("beta").hi) == (14, 30)
    assert (band("gamma").lo, band("gamma").hi) == (31, 51)
    assert (band("theta").lo, band("theta").hi) == (4, 7)


def test_passband_10hz():
    x = sine(10)
    y = bandpass(x[None], band("alpha"), RATE)[0]
    assert rms(y) >= 0.9 * rms(x)
    # Fourier oracle: the 10 Hz amplitude survives
    assert dft_amplitude(y[64:-64], 10, RATE) == pytest.approx(dft_amplitude(x[64:-64], 10, RATE), rel=0.1)


def test_stopband_40hz():
    x = sine(40)
    y = bandpass(x[None], band("alpha"), RATE)[0]
    assert rms(y) <= 0.05 * rms(x)
    assert dft_amplitude(y, 40, RATE) <= 0.05


def test_zero_in_zero_out():
    assert np.all(bandpass(np.zeros((3, 64)), band("beta"), RATE) == 0)
    assert np.all(rhythm_stack(np.zeros((3, 64)), RATE) == 0)


def test_edge_above_nyquist():
    with pytest.raises(ValidationError, match="Nyquist"):
        bandpass(np.zeros((2, 50)), band("gamma"), 100.0)
    with pytest.raises(ValidationError):
        Band("bad", 5.0, 4.0).check(RATE)


def test_rhythm_stack_shapes_and_order():
    x = np.random.default_rng(0).standard_normal((4, 128))
    out = rhythm_stack(x, RATE)
    assert out.shape == (5, 4, 128)
    for i, b in enumerate(standard_bands()):
        np.testing.assert_array_equal(out[i], bandpass(x, b, RATE))
    stack = rhythm_stack(np.stack([x, 2 * x]), RATE)
    assert stack.shape == (2, 5, 4, 128)
    np.testing.assert_allclose(stack[1], 2 * out, rtol=1e-12, atol=1e-12)


def test_mixture_separates():
    x = sine(10) + sine(40, phase=0.3)
    out = rhythm_stack(x[None], RATE)
    names = [b.name for b in standard_bands()]
    alpha, gamma = out[names.index("alpha"), 0], out[names.index("gamma"), 0]
    inner = slice(64, -64)
    assert rms(alpha[inner] - sine(10)[inner]) <= 0.1 * rms(sine(10))
    assert rms(gamma[inner] - sine(40, phase=0.3)[inner]) <= 0.1 * rms(sine(40))
    assert dft_amplitude(alpha, 10, RATE) == pytest.approx(1.0, rel=0.1)
    assert dft_amplitude(gamma, 40, RATE) == pytest.approx(1.0, rel=0.1)


@pytest.mark.parametrize("name,freq", [("alpha", 10.0), ("beta", 20.0), ("theta", 5.5), ("delta", 1.5)])
def test_zero_phase(name, freq):
    x = sine(freq, n=1024)
    y = bandpass(x[None], band(name), RATE)[0]
    inner = slice(256, -256)
    lags = np.arange(-20, 21)
    xc = [np.dot(np.roll(y, k)[inner], x[inner]) for k in lags]
    assert lags[int(np.argmax(xc))] == 0


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31))
def test_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 3, 100))
    lhs = bandpass(a * x + b * y, band("theta"), RATE)
    rhs = a * bandpass(x, band("theta"), RATE) + b * bandpass(y, band("theta"), RATE)
    scale = max(np.abs(rhs).max(), 1e-12)
    assert np.abs(lhs - rhs).max() <= 1e-9 * scale


@pytest.mark.parametrize("name", ["alpha", "beta", "gamma", "theta", "delta"])
def test_concatenated_interior(name):
    b = band(name)
    settle = settling_length(b, RATE)
    n = 4 * settle + 64
    x = np.random.default_rng(1).standard_normal(n)
    # filtering is stationary: away from both ends, filtering [x, x] and x agree on x's interior
    both = bandpass(np.concatenate([x, x])[None], b, RATE)[0]
    single = bandpass(x[None], b, RATE)[0]
    second = both[n:]
    inner = slice(2 * settle, n - 2 * settle)
    assert np.abs(second[inner] - single[inner]).max() <= 1e-6 * max(1.0, np.abs(single).max())


def test_epoch_object_accepted():
    from eegflow.ingest import Epoch
    e = Epoch(np.random.default_rng(2).standard_normal((2, 64)), 0, 0)
    np.testing.assert_array_equal(bandpass(e, band("beta"), RATE), bandpass(e.data, band("beta"), RATE))
