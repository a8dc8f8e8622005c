"""Toy speech with exact frame alignments.

Each phoneme owns a fixed spectral template: three tones plus a band of
filtered noise.  Utterances are phoneme strings drawn from a bigram model,
rendered segment by segment at 20 ms per label frame, with white noise on
top.  Silence is low-level noise only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import Waveform
from .text import PhonemeVocab

FRAME_SAMPLES = 320  # 20 ms at 16 kHz

# (tone frequencies in Hz, noise band in Hz); row i is phoneme P{i+1}
TEMPLATES = (
    ((300, 1100, 2500), (3500, 4500)),
    ((500, 1500, 3200), (5000, 6000)),
    ((700, 1000, 2200), (1500, 2000)),
    ((400, 2000, 2800), (6000, 7000)),
    ((900, 1400, 3600), (2500, 3000)),
    ((250, 1700, 4200), (800, 1200)),
    ((600, 2400, 3000), (4500, 5500)),
    ((800, 1200, 5000), (2000, 2600)),
    ((350, 1900, 3800), (6500, 7500)),
    ((650, 2900, 4600), (1200, 1600)),
    ((450, 1300, 3400), (5500, 6500)),
    ((1000, 2100, 5400), (3000, 3800)),
)


@dataclass
class SynthSpec:
    n_phones: int = 8
    sample_rate: int = 16000
    min_dur: int = 3
    max_dur: int = 10
    min_phones: int = 5
    max_phones: int = 12
    noise_level: float = 0.1
    tone_amp: float = 0.15
    band_amp: float = 0.08
    sil_level: float = 0.002
    lm_seed: int = 1234
    lm_concentration: float = 0.7  # Dirichlet parameter of bigram rows; lower is more predictable
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_phones <= len(TEMPLATES):
            raise ValueError(f"n_phones must be in 1..{len(TEMPLATES)}")
        if not 1 <= self.min_dur <= self.max_dur:
            raise ValueError("need 1 <= min_dur <= max_dur")
        if not 1 <= self.min_phones <= self.max_phones:
            raise ValueError("need 1 <= min_phones <= max_phones")

    @property
    def vocab(self):
        return PhonemeVocab.synthetic(self.n_phones)


@dataclass
class AlignedUtterance:
    utt_id: str
    waveform: Waveform
    labels: np.ndarray  # phoneme index per 20 ms frame
    transcript: np.ndarray  # collapsed label sequence

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.transcript = np.asarray(self.transcript, dtype=np.int64)


@dataclass
class SynthCorpus:
    speech: list
    text: list  # phoneme index sequences (collapsed, silence at both ends)
    text_ids: list = field(default_factory=list)

    @property
    def alignments(self):
        return {u.utt_id: u.labels for u in self.speech}


def bigram_matrix(spec: SynthSpec):
    """Row-stochastic transitions over phonemes 1..P (no self loops), and its stationary law."""
    p = spec.n_phones
    rng = np.random.default_rng(spec.lm_seed)
    m = rng.dirichlet(np.full(p, spec.lm_concentration), size=p) if p > 1 else np.ones((1, 1))
    if p > 1:
        np.fill_diagonal(m, 0.0)
        m /= m.sum(axis=1, keepdims=True)
    evals, evecs = np.linalg.eig(m.T)
    pi = np.real(evecs[:, np.argmin(np.abs(evals - 1.0))])
    pi = pi / pi.sum()
    return m, pi


def sample_phones(spec: SynthSpec, rng, n=None):
    """Phoneme string (indices 1..P, SIL excluded) from the bigram chain."""
    trans, pi = bigram_matrix(spec)
    n = int(rng.integers(spec.min_phones, spec.max_phones + 1)) if n is None else n
    seq = [int(rng.choice(spec.n_phones, p=pi))]
    for _ in range(n - 1):
        seq.append(int(rng.choice(spec.n_phones, p=trans[seq[-1]])))
    return [s + 1 for s in seq]


def text_sequence(spec: SynthSpec, rng):
    return np.array([0] + sample_phones(spec, rng) + [0], dtype=np.int64)


def render_segment(phone, n_frames, spec: SynthSpec, rng):
    n = n_frames * FRAME_SAMPLES
    t = np.arange(n) / spec.sample_rate
    if phone == 0:
        return spec.sil_level * rng.standard_normal(n)
    tones, (lo, hi) = TEMPLATES[phone - 1]
    x = np.zeros(n)
    for f in tones:
        x += spec.tone_amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    if spec.band_amp:
        spec_ = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / spec.sample_rate)
        spec_[(freqs < lo) | (freqs > hi)] = 0.0
        band = np.fft.irfft(spec_, n)
        band /= band.std() + 1e-12
        x += spec.band_amp * band
    return x + spec.noise_level * rng.standard_normal(n)


def gen_utterance(spec: SynthSpec, rng, utt_id="utt", phones=None) -> AlignedUtterance:
    """Render silence + phoneme string + silence; labels are exact per 20 ms frame."""
    phones = sample_phones(spec, rng) if phones is None else list(phones)
    seq = [0] + phones + [0]
    labels, pieces = [], []
    for ph in seq:
        d = int(rng.integers(spec.min_dur, spec.max_dur + 1))
        labels.extend([ph] * d)
        pieces.append(render_segment(ph, d, spec, rng))
    samples = np.clip(np.concatenate(pieces), -1.0, 1.0)
    return AlignedUtterance(utt_id, Waveform(samples, spec.sample_rate), np.array(labels),
                            np.array(seq))


def gen_corpus(spec: SynthSpec, n_utts, seed=None, text_ratio=None) -> SynthCorpus:
    """Disjoint speech and text halves.

    The first ``n_utts // 2`` draws become speech, the rest text only.  With
    ``text_ratio`` the text side instead gets ``round(n_speech * text_ratio)``
    draws.  Utterance ``i`` uses its own generator seeded with ``[seed, i]``.
    """
    if n_utts < 2:
        raise ValueError("gen_corpus needs n_utts >= 2")
    seed = spec.seed if seed is None else seed
    n_speech = n_utts // 2
    n_text = n_utts - n_speech if text_ratio is None else int(round(n_speech * text_ratio))
    speech = [gen_utterance(spec, np.random.default_rng([seed, i]), f"s{seed}_{i:05d}")
              for i in range(n_speech)]
    text, ids = [], []
    for j in range(n_text):
        i = n_speech + j
        text.append(text_sequence(spec, np.random.default_rng([seed, i])))
        ids.append(f"t{seed}_{i:05d}")
    return SynthCorpus(speech, text, ids)


def collapse(labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        return labels
    keep = np.ones(len(labels), dtype=bool)
    keep[1:] = labels[1:] != labels[:-1]
    return labels[keep]


def mapping_accuracy(pred, gold, n_units=None, n_phones=None):
    """Frame accuracy after mapping each unit to its most co-occurring phoneme.

    ``pred`` and ``gold`` are lists of per-utterance integer arrays; pairs are
    truncated to the shorter length.
    """
    p_all, g_all = [], []
    for p, g in zip(pred, gold):
        n = min(len(p), len(g))
        p_all.append(np.asarray(p[:n]))
        g_all.append(np.asarray(g[:n]))
    p_all = np.concatenate(p_all).astype(np.int64)
    g_all = np.concatenate(g_all).astype(np.int64)
    if len(p_all) == 0:
        raise ValueError("mapping_accuracy: no frames")
    nu = int(p_all.max()) + 1 if n_units is None else n_units
    ng = int(g_all.max()) + 1 if n_phones is None else n_phones
    co = np.zeros((nu, ng))
    np.add.at(co, (p_all, g_all), 1)
    return float(co.max(axis=1).sum() / len(p_all))
