"""Adversarial phoneme tokenizer.

A one-layer conv generator maps speech frames to phoneme distributions; a
three-layer conv discriminator scores phoneme sequences.  Real sequences
are one-hot phonemised text; fake ones are generator outputs with runs of
identical argmax merged by mean pooling, so both sides are sequences of
phoneme tokens rather than frames.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class GanConfig:
    lambda_gp: float = 1.5
    gamma_sp: float = 0.5
    eta_pd: float = 3.0
    delta_ss: float = 0.5
    vocab: int = 9
    aux_codes: int = 16
    gen_kernel: int = 4
    disc_channels: int = 96
    disc_kernel: int = 6
    lr_g: float = 5e-4
    lr_d: float = 3e-4
    betas: tuple = (0.5, 0.98)
    weight_decay_d: float = 1e-4
    steps: int = 2000
    batch_size: int = 16
    max_frames: int = 0  # 0: no cropping
    lr_schedule: str = "constant"  # or "linear": both learning rates decay linearly to 0
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_gp", "gamma_sp", "eta_pd", "delta_ss"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        self.betas = tuple(self.betas)


class Generator(nn.Module):
    """Batch norm over input features, then one same-padded conv to phoneme logits."""

    def __init__(self, in_dim, vocab, rng, kernel=4, aux_codes=0):
        self.in_dim = in_dim
        self.vocab = vocab
        self.bn = nn.BatchNorm(in_dim)
        self.conv = nn.Conv1d(in_dim, vocab, kernel, rng, padding="same")
        self.aux = nn.Linear(vocab, aux_codes, rng) if aux_codes else None

    def forward(self, batch):
        """``batch``: list of ``(T_i, D)`` arrays.  Returns packed ``(sum T_i, V)`` logits."""
        lens = [len(f) for f in batch]
        for f in batch:
            if np.ndim(f) != 2 or np.shape(f)[1] != self.in_dim:
                raise T.ShapeError("generator", np.shape(f), (None, self.in_dim))
        n = sum(lens)
        if n == 0:
            return Tensor(np.zeros((0, self.vocab)))
        packed = Tensor(np.concatenate([np.asarray(f, dtype=np.float64) for f in batch if len(f)]))
        h = self.bn(packed)
        rows, cols = _pack_index(lens)
        padded = T.scatter_add(h, (rows, cols), (len(batch), max(lens), self.in_dim))
        logits = self.conv(padded)
        return T.getitem(logits, (rows, cols))

    def aux_logits(self, logits):
        return self.aux(logits)


def _pack_index(lens):
    rows = np.concatenate([np.full(n, i) for i, n in enumerate(lens)]).astype(np.int64)
    cols = np.concatenate([np.arange(n) for n in lens]).astype(np.int64)
    return rows, cols


class Discriminator(nn.Module):
    """Three convs (V -> c -> c -> 1) with tanh between, mean-pooled over valid steps."""

    def __init__(self, vocab, rng, channels=96, kernel=6):
        self.vocab = vocab
        self.layers = [
            nn.Conv1d(vocab, channels, kernel, rng, padding="same"),
            nn.Conv1d(channels, channels, kernel, rng, padding="same"),
            nn.Conv1d(channels, 1, kernel, rng, padding="same"),
        ]

    def forward(self, x, mask=None):
        """``x``: ``(B, L, V)``; ``mask``: ``(B, L)`` valid steps.  Returns ``(B,)`` scores."""
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[2] != self.vocab:
            raise T.ShapeError("discriminator", x.shape, (None, None, self.vocab))
        b, length, _ = x.shape
        mask = np.ones((b, length), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        m = mask[:, :, None].astype(np.float64)
        h = x * np.broadcast_to(m, x.shape).copy()
        for i, conv in enumerate(self.layers):
            h = conv(h)
            if i < len(self.layers) - 1:
                h = T.tanh(h)
            h = h * np.broadcast_to(m, h.shape).copy()
        n = np.maximum(mask.sum(axis=1), 1).astype(np.float64)
        return T.tsum(h, (1, 2)) * (1.0 / n)


# ----------------------------------------------------------------- batching


def pad_sequences(seqs, vocab=None):
    """List of ``(L_i, V)`` arrays (or index sequences with ``vocab``) -> padded ``(B, L, V)``, mask."""
    if vocab is not None:
        seqs = [np.eye(vocab)[np.asarray(s, dtype=np.int64)] for s in seqs]
    lens = [len(s) for s in seqs]
    v = seqs[0].shape[1]
    out = np.zeros((len(seqs), max(max(lens), 1), v))
    mask = np.zeros(out.shape[:2], dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def segment_pool(probs, lens):
    """Merge runs of identical argmax by averaging.

    ``probs``: packed ``(N, V)`` tensor; returns padded ``(B, S, V)`` and mask.
    The pooling weights are constants, so gradients reach every frame.
    """
    data = probs.data
    b = len(lens)
    t_max = max(max(lens), 1)
    segs = []
    start = 0
    for n in lens:
        am = data[start : start + n].argmax(axis=1)
        bounds = np.flatnonzero(np.diff(am)) + 1 if n else np.zeros(0, dtype=np.int64)
        edges = np.concatenate([[0], bounds, [n]]) if n else np.zeros(1, dtype=np.int64)
        segs.append(edges)
        start += n
    s_max = max(max(len(e) - 1 for e in segs), 1)
    pool = np.zeros((b, s_max, t_max))
    mask = np.zeros((b, s_max), dtype=bool)
    for i, e in enumerate(segs):
        for j in range(len(e) - 1):
            pool[i, j, e[j] : e[j + 1]] = 1.0 / (e[j + 1] - e[j])
            mask[i, j] = True
    rows, cols = _pack_index(lens)
    padded = T.scatter_add(probs, (rows, cols), (b, t_max, probs.shape[1]))
    return T.matmul(Tensor(pool), padded), mask


# ------------------------------------------------------------------- losses


def _as_batch(x, mask):
    x = T.as_tensor(x)
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
        mask = None if mask is None else np.asarray(mask)[None]
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    return x, np.asarray(mask, dtype=bool)


def loss_gan(d, fake, real, role="discriminator", fake_mask=None, real_mask=None):
    """Non-saturating GAN loss, averaged over the batch.

    discriminator: ``-[log s(C(real)) + log(1 - s(C(fake)))]``;
    generator: ``-log s(C(fake))``.
    """
    fake, fake_mask = _as_batch(fake, fake_mask)
    s_fake = d(fake, fake_mask)
    if role == "generator":
        return T.mean(T.neg(T.log_sigmoid(s_fake)))
    if role != "discriminator":
        raise ValueError(f"unknown role {role!r}")
    real, real_mask = _as_batch(real, real_mask)
    s_real = d(real, real_mask)
    return T.add(T.mean(T.neg(T.log_sigmoid(s_real))), T.mean(T.neg(T.log_sigmoid(T.neg(s_fake)))))


def crop_pair(real, fake, rng):
    """Random-crop the longer of two ``(L, V)`` arrays to the shorter's length."""
    n = min(len(real), len(fake))
    if len(real) > n:
        s = int(rng.integers(len(real) - n + 1))
        real = real[s : s + n]
    if len(fake) > n:
        s = int(rng.integers(len(fake) - n + 1))
        fake = fake[s : s + n]
    return real, fake


def interpolate(real, fake, rng, real_mask=None, fake_mask=None):
    """Per-pair interpolates ``alpha * real + (1 - alpha) * fake`` with alpha ~ U(0, 1)."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.ndim == 2:
        real, fake = real[None], fake[None]
        real_mask = None if real_mask is None else np.asarray(real_mask)[None]
        fake_mask = None if fake_mask is None else np.asarray(fake_mask)[None]
    mixed = []
    for i in range(len(real)):
        r = real[i] if real_mask is None else real[i][real_mask[i]]
        f = fake[i] if fake_mask is None else fake[i][fake_mask[i]]
        r, f = crop_pair(r, f, rng)
        a = rng.uniform()
        mixed.append(a * r + (1.0 - a) * f)
    return pad_sequences(mixed)


def loss_gp(d, real, fake, rng, real_mask=None, fake_mask=None):
    """Mean over pairs of ``(||grad_x C(x)||_2 - 1)^2`` at random interpolates."""
    x_mix, mask = interpolate(real, T.as_tensor(fake).data, rng, real_mask, fake_mask)
    x = Tensor(x_mix, requires_grad=True)
    scores = d(x, mask)
    if scores.requires_grad:
        (g,) = T.grad(T.tsum(scores), [x], create_graph=True)
    else:
        g = Tensor(np.zeros_like(x_mix))
    norms = T.l2_norm(g, axis=(1, 2))
    dev = norms - 1.0
    return T.mean(dev * dev)


def loss_sp(probs, lens=None):
    """Mean squared distance between consecutive frame distributions (0 for T=1)."""
    probs = T.as_tensor(probs)
    lens = [probs.shape[0]] if lens is None else list(lens)
    cur, nxt = [], []
    start = 0
    for n in lens:
        idx = np.arange(start, start + n - 1)
        cur.append(idx)
        nxt.append(idx + 1)
        start += n
    cur = np.concatenate(cur).astype(np.int64)
    if len(cur) == 0:
        return T.mul(T.tsum(probs), 0.0)
    nxt = np.concatenate(nxt).astype(np.int64)
    diff = T.getitem(probs, nxt) - T.getitem(probs, cur)
    return T.tsum(diff * diff) * (1.0 / len(cur))


def loss_pd(probs):
    """Negative entropy of the average frame distribution; -ln V at uniform usage."""
    pbar = T.mean(T.as_tensor(probs), axis=0)
    return T.tsum(pbar * T.log(pbar + 1e-30))


def loss_ss(aux_logits, codes):
    """Mean frame cross-entropy of the auxiliary head against k-means codes."""
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    if T.as_tensor(aux_logits).shape[0] != len(codes):
        raise ValueError(f"loss_ss: {T.as_tensor(aux_logits).shape[0]} frames vs {len(codes)} codes")
    return T.cross_entropy(aux_logits, codes, reduction="mean")


# name -> callable, so alternative formulations can be registered
LOSSES = {"gan": loss_gan, "gp": loss_gp, "sp": loss_sp, "pd": loss_pd, "ss": loss_ss}


# ----------------------------------------------------------------- training


def generator_forward(g: Generator, frames):
    """Single utterance: ``(T, V)`` logits and row-softmax probabilities."""
    logits = g([np.asarray(frames, dtype=np.float64)])
    return logits, T.softmax(logits)


def build(cfg: GanConfig, in_dim):
    rng = np.random.default_rng([cfg.seed, 17])
    g = Generator(in_dim, cfg.vocab, rng, kernel=cfg.gen_kernel, aux_codes=cfg.aux_codes if cfg.delta_ss else 0)
    d = Discriminator(cfg.vocab, rng, channels=cfg.disc_channels, kernel=cfg.disc_kernel)
    return g, d


def _crop(frames, codes, max_frames, rng):
    if not max_frames or len(frames) <= max_frames:
        return frames, codes
    s = int(rng.integers(len(frames) - max_frames + 1))
    return frames[s : s + max_frames], None if codes is None else codes[s : s + max_frames]


def train_gan(cfg: GanConfig, speech, text, codes=None, log_path=None, callback=None):
    """Alternate one discriminator and one generator update per step.

    ``speech``: list of ``(T_i, D)`` silence-stripped features; ``text``: list
    of phoneme index sequences; ``codes``: k-means codes per speech frame
    (required when ``delta_ss > 0``).  Returns ``(generator, discriminator, log)``.
    """
    if not speech:
        raise ValueError("train_gan: empty speech corpus")
    if not text:
        raise ValueError("train_gan: no unpaired text; adversarial training is undefined without it")
    if cfg.delta_ss and codes is None:
        raise ValueError("train_gan: delta_ss > 0 needs k-means codes")
    g, d = build(cfg, speech[0].shape[1])
    rng = np.random.default_rng([cfg.seed, 29])
    opt_g = nn.Adam(g.parameters(), lr=cfg.lr_g, betas=cfg.betas)
    opt_d = nn.Adam(d.parameters(), lr=cfg.lr_d, betas=cfg.betas, weight_decay=cfg.weight_decay_d)
    history = []
    sink = open(log_path, "w") if log_path else None
    eye = np.eye(cfg.vocab)
    try:
        for step in range(1, cfg.steps + 1):
            scale = 1.0 if cfg.lr_schedule == "constant" else 1.0 - (step - 1) / cfg.steps
            si = rng.integers(len(speech), size=cfg.batch_size)
            ti = rng.integers(len(text), size=cfg.batch_size)
            batch, batch_codes = [], []
            for i in si:
                f, c = _crop(speech[i], None if codes is None else codes[i], cfg.max_frames, rng)
                batch.append(f)
                batch_codes.append(c)
            lens = [len(f) for f in batch]
            real, real_mask = pad_sequences([eye[np.asarray(text[i], dtype=np.int64)] for i in ti])

            g.train()
            logits = g(batch)
            probs = T.softmax(logits)
            fake, fake_mask = segment_pool(probs, lens)
            entry = {"step": step}

            # discriminator update
            fake_const = Tensor(fake.data)
            d_loss = loss_gan(d, fake_const, real, "discriminator", fake_mask, real_mask)
            entry["d_gan"] = d_loss.item()
            if cfg.lambda_gp:
                gp = loss_gp(d, real, fake_const, rng, real_mask, fake_mask)
                entry["gp"] = gp.item()
                d_loss = d_loss + gp * cfg.lambda_gp
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step(cfg.lr_d * scale)

            # generator update against the refreshed discriminator
            g_loss = loss_gan(d, fake, None, "generator", fake_mask)
            entry["g_gan"] = g_loss.item()
            if cfg.gamma_sp:
                sp = loss_sp(probs, lens)
                entry["sp"] = sp.item()
                g_loss = g_loss + sp * cfg.gamma_sp
            if cfg.eta_pd:
                pd = loss_pd(probs)
                entry["pd"] = pd.item()
                g_loss = g_loss + pd * cfg.eta_pd
            if cfg.delta_ss:
                ss = loss_ss(g.aux_logits(logits), np.concatenate(batch_codes))
                entry["ss"] = ss.item()
                g_loss = g_loss + ss * cfg.delta_ss
            bad = [k for k, v in entry.items() if k != "step" and not math.isfinite(v)]
            if bad:
                raise FloatingPointError(f"train_gan diverged at step {step}: non-finite {bad}")
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step(cfg.lr_g * scale)
            d.zero_grad()

            history.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
            if callback:
                callback(step, g, d, entry)
    finally:
        if sink:
            sink.close()
    g.eval()
    return g, d, history


def extract_pseudo_labels(g: Generator, corpus):
    """Per-frame argmax of the generator (eval mode) for each utterance."""
    g.eval()
    out = []
    with T.no_grad():
        for frames in corpus:
            frames = np.asarray(frames, dtype=np.float64)
            if len(frames) == 0:
                out.append(np.zeros(0, dtype=np.int64))
                continue
            logits = g([frames])
            out.append(np.argmax(logits.data, axis=1).astype(np.int64))
    return out


def config_dict(cfg: GanConfig):
    return asdict(cfg)
