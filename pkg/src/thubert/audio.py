"""Waveform I/O, energy VAD and MFCC features."""
from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct, rfft

from . import io as fio


class AudioFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 1 or not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be a finite 1-D array")

    def __len__(self):
        return len(self.samples)


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    hop_ms: float = 10.0
    meta: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be T x D, got shape {self.frames.shape}")

    @property
    def T(self):
        return self.frames.shape[0]

    @property
    def D(self):
        return self.frames.shape[1]


@dataclass
class FrontendConfig:
    sample_rate: int = 16000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 26
    n_ceps: int = 13
    deltas: bool = True
    delta_window: int = 2
    preemphasis: float = 0.97
    log_floor: float = 1e-10
    vad_frame_ms: float = 25.0
    vad_threshold_db: float = 40.0
    vad_max_gap: int = 3


def load_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise AudioFormatError(f"{path}: nchannels={wf.getnchannels()}, expected 1 (mono)")
        if wf.getsampwidth() != 2:
            raise AudioFormatError(f"{path}: sampwidth={wf.getsampwidth()}, expected 2 (16-bit PCM)")
        if wf.getcomptype() != "NONE":
            raise AudioFormatError(f"{path}: comptype={wf.getcomptype()}, expected NONE")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, rate)


def write_wav(path, w: Waveform):
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    path = str(path)
    with wave.open(path, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


def frame_signal(x, win, hop):
    """Complete windows of ``win`` samples every ``hop`` samples, shape (T, win)."""
    if len(x) < win:
        return np.zeros((0, win))
    n = (len(x) - win) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n].copy()


def energy_vad(w: Waveform, frame_ms=25.0, threshold_db=40.0, hop_ms=10.0, max_gap=3):
    """Speech segments as sorted, disjoint ``(start, end)`` sample ranges.

    A frame is speech when its log energy is within ``threshold_db`` of the
    loudest frame; gaps of at most ``max_gap`` frames between speech frames
    are closed.  Zero-energy frames are never speech.
    """
    if frame_ms <= 0:
        raise ValueError("frame_ms must be positive")
    x = w.samples
    n = len(x)
    if n == 0:
        return []
    win = max(1, int(round(frame_ms * w.sample_rate / 1000)))
    hop = max(1, int(round(hop_ms * w.sample_rate / 1000)))
    frames = frame_signal(x, win, hop) if n >= win else x[None, :]
    energy = (frames * frames).mean(axis=1)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(energy)
    if not np.isfinite(db).any():
        return []
    speech = np.isfinite(db) & (db >= db.max() - threshold_db)
    idx = np.flatnonzero(speech)
    for a, b in zip(idx[:-1], idx[1:]):
        if 1 < b - a <= max_gap + 1:
            speech[a:b] = True
    segments = []
    nf = len(speech)
    i = 0
    while i < nf:
        if not speech[i]:
            i += 1
            continue
        j = i
        while j + 1 < nf and speech[j + 1]:
            j += 1
        start = i * hop
        end = n if j == nf - 1 else min(n, j * hop + win)
        if segments and start <= segments[-1][1]:
            segments[-1] = (segments[-1][0], end)
        else:
            segments.append((start, end))
        i = j + 1
    return segments


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate, fmin=0.0, fmax=None):
    """Triangular filters on the rfft bin grid, shape ``(n_mels, n_fft//2 + 1)``.

    Also returns the ``n_mels + 2`` edge frequencies in Hz (filter ``m`` spans
    ``edges[m]..edges[m+2]`` and peaks at ``edges[m+1]``).
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb, edges


def power_spectrum(w: Waveform, cfg: FrontendConfig):
    x = w.samples
    if cfg.preemphasis:
        x = np.append(x[:1], x[1:] - cfg.preemphasis * x[:-1])
    win = int(round(cfg.win_ms * w.sample_rate / 1000))
    hop = int(round(cfg.hop_ms * w.sample_rate / 1000))
    frames = frame_signal(x, win, hop) * np.hamming(win)
    spec = np.abs(rfft(frames, n=cfg.n_fft, axis=1)) ** 2 / cfg.n_fft
    return spec


def log_mel_spectrum(w: Waveform, cfg: FrontendConfig):
    fb, _ = mel_filterbank(cfg.n_mels, cfg.n_fft, w.sample_rate)
    return np.log(np.maximum(power_spectrum(w, cfg) @ fb.T, cfg.log_floor))


def deltas(feat, n=2):
    """Regression deltas over +-n frames with edge replication."""
    if len(feat) == 0:
        return feat.copy()
    padded = np.pad(feat, ((n, n), (0, 0)), mode="edge")
    denom = 2 * sum(i * i for i in range(1, n + 1))
    t = len(feat)
    out = np.zeros_like(feat)
    for i in range(1, n + 1):
        out += i * (padded[n + i : n + i + t] - padded[n - i : n - i + t])
    return out / denom


def mfcc(w: Waveform, cfg: FrontendConfig | None = None, meta="") -> FeatureMatrix:
    """13 cepstra (+ deltas and delta-deltas) per 25 ms window at a 10 ms hop."""
    cfg = cfg or FrontendConfig()
    logmel = log_mel_spectrum(w, cfg)
    d = cfg.n_ceps * (3 if cfg.deltas else 1)
    if len(logmel) == 0:
        return FeatureMatrix(np.zeros((0, d)), cfg.hop_ms, meta)
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, : cfg.n_ceps]
    if cfg.deltas:
        d1 = deltas(ceps, cfg.delta_window)
        d2 = deltas(d1, cfg.delta_window)
        ceps = np.concatenate([ceps, d1, d2], axis=1)
    return FeatureMatrix(ceps, cfg.hop_ms, meta)


def frame_align_20ms(f: FeatureMatrix) -> FeatureMatrix:
    """Keep even-indexed 10 ms frames, halving the frame rate."""
    if f.hop_ms != 10:
        raise ValueError(f"frame_align_20ms needs hop_ms == 10, got {f.hop_ms}")
    return FeatureMatrix(f.frames[::2].copy(), 20.0, f.meta)


def strip_silence(w: Waveform, cfg: FrontendConfig | None = None) -> Waveform:
    """Concatenate the VAD speech segments."""
    cfg = cfg or FrontendConfig()
    segs = energy_vad(w, cfg.vad_frame_ms, cfg.vad_threshold_db, cfg.hop_ms, cfg.vad_max_gap)
    if not segs:
        return Waveform(np.zeros(0), w.sample_rate)
    return Waveform(np.concatenate([w.samples[a:b] for a, b in segs]), w.sample_rate)


def speech_frame_mask(w: Waveform, n_frames, cfg: FrontendConfig | None = None, hop_samples=320):
    """Boolean mask over 20 ms feature frames: True where the frame start lies in a VAD segment."""
    cfg = cfg or FrontendConfig()
    segs = energy_vad(w, cfg.vad_frame_ms, cfg.vad_threshold_db, cfg.hop_ms, cfg.vad_max_gap)
    starts = np.arange(n_frames) * hop_samples
    mask = np.zeros(n_frames, dtype=bool)
    for a, b in segs:
        mask |= (starts >= a) & (starts < b)
    return mask


def features_20ms(w: Waveform, cfg: FrontendConfig | None = None, meta="") -> FeatureMatrix:
    return frame_align_20ms(mfcc(w, cfg, meta))


def save_features(path, f: FeatureMatrix):
    fio.save_fmat(path, f.frames)


def load_features(path, hop_ms=20.0) -> FeatureMatrix:
    return FeatureMatrix(fio.load_fmat(path), hop_ms, str(path))


@dataclass
class CMVN:
    """Per-dimension mean/variance normalisation fitted on a corpus."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    std: np.ndarray = field(default_factory=lambda: np.ones(0))

    @classmethod
    def fit(cls, mats):
        allf = np.concatenate([m for m in mats if len(m)], axis=0)
        return cls(allf.mean(axis=0), allf.std(axis=0) + 1e-8)

    def __call__(self, frames):
        return (frames - self.mean) / self.std
