import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thubert import audio
from thubert.audio import FeatureMatrix, FrontendConfig, Waveform
from thubert.encoder import ConvEncoderConfig, output_length

SR = 16000


def tone(freq, seconds, amp=0.5):
    t = np.arange(int(seconds * SR)) / SR
    return amp * np.sin(2 * np.pi * freq * t)


# ------------------------------------------------------------------------ wav


def test_load_wav_length(tmp_path):
    audio.write_wav(tmp_path / "a.wav", Waveform(tone(300, 1.0)))
    assert len(audio.load_wav(tmp_path / "a.wav")) == 16000


def test_load_wav_zero(tmp_path):
    audio.write_wav(tmp_path / "z.wav", Waveform(np.zeros(500)))
    w = audio.load_wav(tmp_path / "z.wav")
    assert w.sample_rate == SR and not w.samples.any()


@pytest.mark.parametrize("seed", range(5))
def test_wav_round_trip_quantization_bound(tmp_path, seed):
    x = np.random.default_rng(seed).uniform(-1.0, 1.0 - 1 / 32768, 4000)
    audio.write_wav(tmp_path / "r.wav", Waveform(x))
    assert np.abs(audio.load_wav(tmp_path / "r.wav").samples - x).max() <= 1 / 32768


def test_load_wav_rejects_stereo_and_names_field(tmp_path):
    import wave

    with wave.open(str(tmp_path / "s.wav"), "wb") as wf:
        wf.setnchannels(2)
        wf.setsampwidth(2)
        wf.setframerate(SR)
        wf.writeframes(b"\x00" * 400)
    with pytest.raises(audio.AudioFormatError, match="nchannels"):
        audio.load_wav(tmp_path / "s.wav")


def test_load_wav_rejects_8bit(tmp_path):
    import wave

    with wave.open(str(tmp_path / "b.wav"), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(1)
        wf.setframerate(SR)
        wf.writeframes(b"\x80" * 400)
    with pytest.raises(audio.AudioFormatError, match="sampwidth"):
        audio.load_wav(tmp_path / "b.wav")


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        Waveform(np.zeros(3), sample_rate=0)


# ------------------------------------------------------------------------ VAD


def test_vad_silence():
    assert audio.energy_vad(Waveform(np.zeros(8000))) == []


def test_vad_empty():
    assert audio.energy_vad(Waveform(np.zeros(0))) == []


def test_vad_bad_frame():
    with pytest.raises(ValueError):
        audio.energy_vad(Waveform(np.ones(100)), frame_ms=0)


def test_vad_constant_tone_single_segment():
    x = tone(500, 0.8, amp=1.0)
    assert audio.energy_vad(Waveform(x)) == [(0, len(x))]


def test_vad_tone_silence_tone_brackets_tones():
    # tones over [0, 4800) and [9600, 14400) samples
    x = np.concatenate([tone(500, 0.3), np.zeros(4800), tone(700, 0.3)])
    segs = audio.energy_vad(Waveform(x))
    assert len(segs) == 2
    frame = 400
    (a0, a1), (b0, b1) = segs
    assert abs(a0 - 0) <= frame and abs(a1 - 4800) <= frame
    assert abs(b0 - 9600) <= frame and abs(b1 - 14400) <= frame


@given(st.integers(0, 2**32 - 1), st.integers(1, 6000))
@settings(max_examples=40, deadline=None)
def test_vad_segments_disjoint_sorted_in_bounds(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n) * rng.uniform(0, 1, n) ** 4
    segs = audio.energy_vad(Waveform(np.clip(x, -1, 1)))
    for a, b in segs:
        assert 0 <= a < b <= n
    for (_, e), (s, _) in zip(segs[:-1], segs[1:]):
        assert e < s


# ----------------------------------------------------------------------- MFCC


def test_mfcc_shape_and_frame_count():
    for n in (400, 401, 559, 560, 16000):
        f = audio.mfcc(Waveform(np.random.default_rng(n).uniform(-0.5, 0.5, n)))
        assert f.D == 39 and f.T == (n - 400) // 160 + 1


def test_mfcc_short_utterance_is_empty():
    f = audio.mfcc(Waveform(np.zeros(399)))
    assert f.frames.shape == (0, 39)


def test_mfcc_zero_signal_floor():
    f = audio.mfcc(Waveform(np.zeros(4000))).frames
    assert np.all(np.isfinite(f))
    np.testing.assert_array_equal(f, np.broadcast_to(f[0], f.shape))
    # orthonormal DCT of a constant log-floor vector over 26 filters
    assert f[0, 0] == pytest.approx(np.sqrt(26) * np.log(1e-10), rel=1e-12)
    np.testing.assert_allclose(f[0, 1:], 0, atol=1e-9)


def test_deltas_of_constant_track_are_zero():
    feat = np.tile(np.arange(5.0), (12, 1))
    np.testing.assert_array_equal(audio.deltas(feat), 0)


def test_deltas_of_linear_ramp_equal_slope():
    feat = (0.5 * np.arange(20.0))[:, None]
    np.testing.assert_allclose(audio.deltas(feat)[2:-2], 0.5)


def dft_power(frames, n_fft):
    k = np.arange(n_fft // 2 + 1)
    n = np.arange(frames.shape[1])
    basis = np.exp(-2j * np.pi * np.outer(n, k) / n_fft)
    return np.abs(frames @ basis) ** 2 / n_fft


def test_power_spectrum_matches_direct_dft():
    cfg = FrontendConfig(preemphasis=0.0)
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 2000)
    frames = audio.frame_signal(x, 400, 160) * np.hamming(400)
    np.testing.assert_allclose(audio.power_spectrum(Waveform(x), cfg), dft_power(frames, 512), atol=1e-9)


def test_sine_peaks_in_its_mel_filter():
    cfg = FrontendConfig()
    spec = audio.log_mel_spectrum(Waveform(tone(440, 0.5)), cfg)
    _, edges = audio.mel_filterbank(cfg.n_mels, cfg.n_fft, SR)
    owners = {m for m in range(cfg.n_mels) if edges[m] < 440 < edges[m + 2]}
    assert set(np.argmax(spec, axis=1)) <= owners


def test_mfcc_identical_windows_identical_rows():
    period = np.random.default_rng(1).uniform(-0.5, 0.5, 160)
    f = audio.mfcc(Waveform(np.tile(period, 40)), FrontendConfig(deltas=False)).frames
    np.testing.assert_allclose(f[1:], np.broadcast_to(f[1], f[1:].shape), atol=1e-9)


# -------------------------------------------------------------- 20 ms frames


@pytest.mark.parametrize("t,expect", [(10, 5), (0, 0), (7, 4), (1, 1)])
def test_frame_align_counts(t, expect):
    f = FeatureMatrix(np.arange(t * 2.0).reshape(t, 2))
    out = audio.frame_align_20ms(f)
    assert out.T == expect and out.hop_ms == 20
    np.testing.assert_array_equal(out.frames, f.frames[::2])


def test_frame_align_rows_for_seven():
    f = FeatureMatrix(np.arange(7.0)[:, None])
    np.testing.assert_array_equal(audio.frame_align_20ms(f).frames[:, 0], [0, 2, 4, 6])


def test_frame_align_wrong_hop():
    with pytest.raises(ValueError):
        audio.frame_align_20ms(FeatureMatrix(np.zeros((4, 2)), hop_ms=20))


def test_feature_rate_matches_conv_encoder():
    f = audio.features_20ms(Waveform(tone(300, 1.0)))
    assert abs(f.T - output_length(ConvEncoderConfig(), 16000)) <= 2


def test_speech_mask_follows_vad():
    x = np.concatenate([np.zeros(3200), tone(500, 0.4), np.zeros(3200)])
    w = Waveform(x)
    f = audio.features_20ms(w)
    mask = audio.speech_frame_mask(w, f.T)
    # tone spans 20 ms frames 10..29 of 39
    assert f.T == 39
    assert not mask[:9].any() and mask[11:29].all() and not mask[31:].any()


def test_strip_silence_keeps_only_speech():
    x = np.concatenate([np.zeros(4000), tone(500, 0.5), np.zeros(4000)])
    out = audio.strip_silence(Waveform(x))
    assert 8000 <= len(out) <= 8000 + 2 * 400


def test_cmvn_normalizes():
    mats = [np.random.default_rng(i).normal(3.0, 2.0, (50, 4)) for i in range(3)]
    cmvn = audio.CMVN.fit(mats)
    allf = np.concatenate([cmvn(m) for m in mats])
    np.testing.assert_allclose(allf.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(allf.std(0), 1, atol=1e-6)


def test_feature_dump_round_trip(tmp_path):
    f = FeatureMatrix(np.random.default_rng(0).standard_normal((7, 39)), 20.0)
    audio.save_features(tmp_path / "f.fmat", f)
    np.testing.assert_array_equal(audio.load_features(tmp_path / "f.fmat").frames, f.frames)
