import numpy as np
import pytest

from thubert import audio, synth
from thubert.encoder import ConvEncoderConfig, output_length
from thubert.synth import SynthSpec


def labelled_frames(spec, seed, n):
    xs, ys = [], []
    for i in range(n):
        u = synth.gen_utterance(spec, np.random.default_rng([seed, i]))
        f = audio.features_20ms(u.waveform).frames
        m = min(len(f), len(u.labels))
        xs.append(f[:m])
        ys.append(u.labels[:m])
    return np.concatenate(xs), np.concatenate(ys)


@pytest.fixture(scope="module")
def template_centroids():
    spec = SynthSpec()
    x, y = labelled_frames(spec, 100, 60)
    mu, sd = x.mean(0), x.std(0)
    cent = np.stack([((x[y == k] - mu) / sd).mean(0) for k in range(len(spec.vocab))])
    return mu, sd, cent


def test_noise_free_single_phone_frames_identical_template():
    spec = SynthSpec(noise_level=0.0, band_amp=0.0, min_dur=5, max_dur=5)
    u = synth.gen_utterance(spec, np.random.default_rng(0), phones=[3])
    assert u.labels.tolist() == [0] * 5 + [3] * 5 + [0] * 5
    seg = u.waveform.samples[5 * 320 : 10 * 320].reshape(5, 320)
    spectra = np.abs(np.fft.rfft(seg, axis=1))
    peaks = {tuple(sorted(np.argsort(s)[-3:] * 50)) for s in spectra}
    assert peaks == {tuple(sorted(synth.TEMPLATES[2][0]))}


def test_fixed_seed_bit_identical():
    a = synth.gen_utterance(SynthSpec(), np.random.default_rng(5))
    b = synth.gen_utterance(SynthSpec(), np.random.default_rng(5))
    assert a.waveform.samples.tobytes() == b.waveform.samples.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)


def test_labels_consistent_with_transcript():
    for i in range(10):
        u = synth.gen_utterance(SynthSpec(), np.random.default_rng(i))
        np.testing.assert_array_equal(synth.collapse(u.labels), u.transcript)
        assert len(u.waveform) == 320 * len(u.labels)
        assert u.transcript[0] == 0 and u.transcript[-1] == 0


def test_alignment_matches_conv_frame_count():
    for i in range(10):
        u = synth.gen_utterance(SynthSpec(), np.random.default_rng(i))
        assert abs(len(u.labels) - output_length(ConvEncoderConfig(), len(u.waveform))) <= 1


def test_nearest_template_separability(template_centroids):
    mu, sd, cent = template_centroids
    x, y = labelled_frames(SynthSpec(), 200, 60)
    pred = ((((x - mu) / sd)[:, None] - cent[None]) ** 2).sum(-1).argmin(1)
    assert (pred == y).mean() >= 0.95


def test_templates_pairwise_distinct(template_centroids):
    _, _, cent = template_centroids
    d = np.sqrt(((cent[:, None] - cent[None]) ** 2).sum(-1))
    assert d[~np.eye(len(cent), dtype=bool)].min() > 1.0


def test_corpus_two_utterances():
    c = synth.gen_corpus(SynthSpec(), 2, seed=0)
    assert len(c.speech) == 1 and len(c.text) == 1


def test_corpus_halves_disjoint():
    c = synth.gen_corpus(SynthSpec(), 40, seed=3)
    speech_ids = {u.utt_id for u in c.speech}
    assert len(c.speech) == len(c.text) == 20
    assert not speech_ids & set(c.text_ids)
    assert set(c.alignments) == speech_ids


def test_corpus_deterministic():
    a = synth.gen_corpus(SynthSpec(), 10, seed=1)
    b = synth.gen_corpus(SynthSpec(), 10, seed=1)
    assert all(x.waveform.samples.tobytes() == y.waveform.samples.tobytes() for x, y in zip(a.speech, b.speech))
    assert all(np.array_equal(x, y) for x, y in zip(a.text, b.text))


def test_text_ratio_sizes():
    c = synth.gen_corpus(SynthSpec(), 20, seed=0, text_ratio=2.5)
    assert len(c.speech) == 10 and len(c.text) == 25
    assert len(synth.gen_corpus(SynthSpec(), 20, seed=0, text_ratio=0).text) == 0


def test_text_histogram_matches_stationary_law():
    spec = SynthSpec()
    _, pi = synth.bigram_matrix(spec)
    c = synth.gen_corpus(spec, 1000, seed=7)
    phones = np.concatenate([t[1:-1] for t in c.text]) - 1
    h = np.bincount(phones, minlength=spec.n_phones) / len(phones)
    assert np.all(np.abs(h - pi) <= 3 * np.sqrt(pi * (1 - pi) / len(phones)))


def test_bigram_rows_stochastic_without_self_loops():
    m, pi = synth.bigram_matrix(SynthSpec())
    np.testing.assert_allclose(m.sum(1), 1)
    assert np.all(np.diag(m) == 0)
    np.testing.assert_allclose(pi @ m, pi, atol=1e-12)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(n_phones=0)
    with pytest.raises(ValueError):
        SynthSpec(min_dur=5, max_dur=3)
    with pytest.raises(ValueError):
        synth.gen_corpus(SynthSpec(), 1)


def test_mapping_accuracy():
    gold = [np.array([1, 1, 2, 2, 3])]
    assert synth.mapping_accuracy([np.array([5, 5, 0, 0, 0])], gold) == pytest.approx(4 / 5)
    assert synth.mapping_accuracy([np.array([0, 0, 1, 1, 2])], gold) == 1.0
