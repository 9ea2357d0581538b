import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from mbdiff.audio import (AliasingError, AudioSignal, RngStream, SynthSpec, WavEncodingError, WavHeaderError,
                          WavMissingError, concat, load_wav, save_wav, synthesize)


def sine(freq=440.0, dur=1.0, sr=8000, amp=0.5):
    return synthesize(SynthSpec("sine-mixture", {"frequencies": [freq], "amplitudes": [amp]}), dur, sr)


class TestAudioSignal:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            AudioSignal(np.array([0.0, np.nan]), 8000)

    def test_rejects_bad_rate_and_shape(self):
        with pytest.raises(ValueError):
            AudioSignal(np.zeros(3), 0)
        with pytest.raises(ValueError):
            AudioSignal(np.zeros((2, 3)), 8000)

    def test_samples_are_read_only_copies(self):
        src = np.zeros(4)
        x = AudioSignal(src, 8000)
        src[0] = 1.0
        assert x.samples[0] == 0.0
        with pytest.raises(ValueError):
            x.samples[0] = 2.0

    def test_empty_signal_allowed(self):
        x = AudioSignal(np.zeros(0), 8000)
        assert len(x) == 0 and x.duration == 0.0

    def test_concat(self):
        a, b = AudioSignal([1.0, 2.0], 8000), AudioSignal([3.0], 8000)
        assert_array_equal(concat([a, b]).samples, [1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            concat([a, AudioSignal([1.0], 16000)])


class TestRngStream:
    def test_same_seed_same_draws(self):
        assert_array_equal(RngStream(5).normal(100), RngStream(5).normal(100))

    def test_gaussian_moments(self):
        x = RngStream(0).normal(10**6)
        assert abs(x.mean()) < 0.01
        assert abs(x.var() - 1.0) < 0.01

    def test_children_are_independent_of_sibling_count(self):
        a = RngStream(3).child(2).normal(10)
        parent = RngStream(3)
        parent.child(0)
        parent.child(1)
        assert_array_equal(parent.child(2).normal(10), a)
        assert not np.array_equal(RngStream(3).child(1).normal(10), a)

    def test_state_round_trip(self):
        r = RngStream(9)
        r.normal(7)
        state = r.get_state()
        expected = r.normal(5)
        r2 = RngStream(0)
        r2.set_state(state)
        assert_array_equal(r2.normal(5), expected)

    def test_algorithm_is_recorded(self):
        assert "PCG64" in RngStream.algorithm


class TestSynthesize:
    def test_sine_definition(self):
        x = synthesize(SynthSpec("sine-mixture", {"frequencies": [1000.0], "amplitudes": [0.5]}), 0.01, 8000)
        k = np.arange(80)
        assert_allclose(x.samples, 0.5 * np.sin(2 * np.pi * 1000 * k / 8000), atol=1e-15)

    def test_mixture_is_sum_of_parts(self):
        parts = [sine(300.0, 0.1, amp=0.2), sine(1700.0, 0.1, amp=0.3)]
        mix = synthesize(SynthSpec("sine-mixture", {"frequencies": [300.0, 1700.0], "amplitudes": [0.2, 0.3]}), 0.1, 8000)
        assert_allclose(mix.samples, parts[0].samples + parts[1].samples, atol=1e-14)

    def test_white_noise_variance(self):
        x = synthesize(SynthSpec("white-noise", {"amplitude": 1.0}), 125.0, 8000, RngStream(11))
        assert len(x) == 10**6
        assert abs(x.samples.var() - 1.0) < 0.01

    def test_white_noise_needs_rng(self):
        with pytest.raises(ValueError):
            synthesize(SynthSpec("white-noise"), 0.1, 8000)

    def test_chirp_zero_crossing_rate_increases(self):
        x = synthesize(SynthSpec("chirp", {"f_start": 100.0, "f_end": 3000.0}), 1.0, 8000).samples
        crossings = np.flatnonzero(np.signbit(x[:-1]) != np.signbit(x[1:]))
        # instantaneous frequency from crossing density in 8 windows
        counts = np.histogram(crossings, bins=8, range=(0, len(x)))[0]
        assert np.all(np.diff(counts) > 0)

    def test_pulse_train(self):
        x = synthesize(SynthSpec("pulse-train", {"frequency": 100.0, "amplitude": 1.0}), 0.1, 8000).samples
        assert_array_equal(np.flatnonzero(x), np.arange(0, 800, 80))

    @pytest.mark.parametrize("spec", [
        SynthSpec("sine-mixture", {"frequencies": [4000.0]}),
        SynthSpec("chirp", {"f_start": 100.0, "f_end": 5000.0}),
        SynthSpec("pulse-train", {"frequency": 4100.0}),
    ])
    def test_aliasing_rejected(self, spec):
        with pytest.raises(AliasingError):
            synthesize(spec, 0.1, 8000)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            SynthSpec("square")

    def test_spec_dict_round_trip(self):
        spec = SynthSpec("sine-mixture", {"frequencies": np.array([100.0, 200.0]), "amplitudes": [0.1, 0.2]})
        again = SynthSpec.from_dict(spec.to_dict())
        assert again.frequencies() == [100.0, 200.0]

    @given(st.integers(0, 2**32 - 1))
    def test_pure_function_of_seed(self, seed):
        spec = SynthSpec("white-noise", {"amplitude": 0.3})
        a = synthesize(spec, 0.01, 8000, RngStream(seed))
        b = synthesize(spec, 0.01, 8000, RngStream(seed))
        assert_array_equal(a.samples, b.samples)


class TestWav:
    def test_pcm16_round_trip_within_one_lsb(self, tmp_path):
        x = sine(440.0, 1.0)
        assert save_wav(x, tmp_path / "a.wav", "pcm16") == 0
        y = load_wav(tmp_path / "a.wav")
        assert y.sample_rate == 8000
        assert np.max(np.abs(y.samples - x.samples)) <= 2.0**-15

    def test_float32_round_trip_exact(self, tmp_path):
        x = sine(440.0, 0.5).samples.astype(np.float32).astype(np.float64)
        save_wav(AudioSignal(x, 8000), tmp_path / "f.wav", "float32")
        assert_array_equal(load_wav(tmp_path / "f.wav").samples, x)

    def test_pcm16_clipping(self, tmp_path):
        x = AudioSignal([0.0, 1.5, -0.25], 8000)
        assert save_wav(x, tmp_path / "c.wav", "pcm16") == 1
        y = load_wav(tmp_path / "c.wav").samples
        assert y[1] == pytest.approx(32767 / 32768)
        assert y[2] == -0.25

    def test_empty_round_trip(self, tmp_path):
        save_wav(AudioSignal(np.zeros(0), 8000), tmp_path / "e.wav")
        y = load_wav(tmp_path / "e.wav")
        assert len(y) == 0 and y.sample_rate == 8000

    def test_stereo_downmix(self, tmp_path):
        from scipy.io import wavfile

        data = np.array([[0.5, -0.5], [0.25, 0.75]], dtype=np.float32)
        wavfile.write(tmp_path / "s.wav", 8000, data)
        assert_allclose(load_wav(tmp_path / "s.wav").samples, [0.0, 0.5])

    def test_missing_file(self, tmp_path):
        with pytest.raises(WavMissingError):
            load_wav(tmp_path / "nope.wav")

    def test_truncated_header(self, tmp_path):
        save_wav(sine(), tmp_path / "t.wav", "pcm16")
        raw = (tmp_path / "t.wav").read_bytes()
        (tmp_path / "t.wav").write_bytes(raw[:20])
        with pytest.raises(WavHeaderError):
            load_wav(tmp_path / "t.wav")

    def test_not_riff(self, tmp_path):
        (tmp_path / "j.wav").write_bytes(b"hello world, not audio")
        with pytest.raises(WavHeaderError):
            load_wav(tmp_path / "j.wav")

    def test_unsupported_encoding(self, tmp_path):
        from scipy.io import wavfile

        wavfile.write(tmp_path / "u.wav", 8000, np.zeros(10, dtype=np.int32))
        with pytest.raises(WavEncodingError):
            load_wav(tmp_path / "u.wav")

    def test_extensible_header(self, tmp_path):
        payload = np.array([1000, -2000], dtype="<i2").tobytes()
        fmt = struct.pack("<HHIIHH", 0xFFFE, 1, 8000, 16000, 2, 16) + struct.pack("<HHI", 22, 16, 4) + \
            struct.pack("<H", 1) + b"\x00" * 14
        body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", 4) + payload
        (tmp_path / "x.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        assert_allclose(load_wav(tmp_path / "x.wav").samples, [1000 / 32768, -2000 / 32768])

    def test_unknown_save_encoding(self, tmp_path):
        with pytest.raises(WavEncodingError):
            save_wav(sine(), tmp_path / "z.wav", "mp3")

    @given(st.lists(st.floats(-1.0, 1.0, allow_nan=False, width=32), min_size=1, max_size=64))
    def test_float32_round_trip_property(self, tmp_path_factory, values):
        path = tmp_path_factory.mktemp("wav") / "p.wav"
        x = AudioSignal(np.array(values, dtype=np.float64), 16000)
        save_wav(x, path, "float32")
        assert_array_equal(load_wav(path).samples, x.samples)
