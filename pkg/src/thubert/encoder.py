"""Conv feature encoder, span masking and a transformer with bucketed relative position bias."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


@dataclass
class ConvEncoderConfig:
    channels: int = 512
    strides: tuple = (5, 2, 2, 2, 2, 2, 2)
    kernels: tuple = (10, 3, 3, 3, 3, 2, 2)

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.kernels = tuple(int(k) for k in self.kernels)
        if len(self.strides) != len(self.kernels):
            raise ValueError("strides and kernels must have equal length")

    @property
    def receptive_field(self):
        r = 1
        for k, s in zip(reversed(self.kernels), reversed(self.strides)):
            r = (r - 1) * s + k
        return r


@dataclass
class TransformerConfig:
    layers: int = 6
    dim: int = 192
    ffn: int = 768
    heads: int = 4
    buckets: int = 32
    max_distance: int = 128
    dropout: float = 0.1
    input_dim: int = 39
    frontend: str = "mfcc"  # "mfcc": projected features, "conv": raw waveform

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.frontend not in ("mfcc", "conv"):
            raise ValueError(f"unknown frontend {self.frontend!r}")

    @classmethod
    def base(cls, **kw):
        return cls(layers=12, dim=768, ffn=3072, heads=12, **kw)

    @classmethod
    def ablation(cls, **kw):
        return cls(layers=12, dim=384, ffn=1536, heads=6, **kw)


@dataclass
class MaskSpec:
    p: float = 0.08
    span: int = 10

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("mask probability must lie in [0, 1]")
        if self.span < 1:
            raise ValueError("mask span must be >= 1")


def output_length(cfg: ConvEncoderConfig, n_samples):
    """Frames after the conv stack: ``floor((T - k) / s) + 1`` per block."""
    t = int(n_samples)
    if t < cfg.receptive_field:
        raise ValueError(f"{n_samples} samples is shorter than the receptive field ({cfg.receptive_field})")
    for k, s in zip(cfg.kernels, cfg.strides):
        t = (t - k) // s + 1
    return t


class ConvFeatureEncoder(nn.Module):
    """Blocks of conv1d -> layer norm over channels -> GELU."""

    def __init__(self, cfg: ConvEncoderConfig, rng):
        self.cfg = cfg
        self.convs = []
        self.norms = []
        c_in = 1
        for k, s in zip(cfg.kernels, cfg.strides):
            self.convs.append(nn.Conv1d(c_in, cfg.channels, k, rng, stride=s))
            self.norms.append(nn.LayerNorm(cfg.channels))
            c_in = cfg.channels

    def forward(self, wav):
        """``wav``: ``(B, N)`` samples -> ``(B, output_length(N), channels)``."""
        wav = T.as_tensor(wav)
        output_length(self.cfg, wav.shape[1])
        h = T.reshape(wav, wav.shape + (1,))
        for conv, norm in zip(self.convs, self.norms):
            h = T.gelu(norm(conv(h)))
        return h


def compute_mask(shape, spec: MaskSpec, rng):
    """Boolean ``(B, T)`` mask: each step starts a span with prob ``p``."""
    b, t = shape
    starts = rng.random((b, t)) < spec.p
    mask = np.zeros((b, t), dtype=bool)
    for i, j in zip(*np.nonzero(starts)):
        mask[i, j : j + spec.span] = True
    return mask


def apply_time_mask(features, spec: MaskSpec, rng, mask_emb):
    """Replace masked frames by ``mask_emb``; returns ``(masked, mask)``."""
    features = T.as_tensor(features)
    mask = compute_mask(features.shape[:2], spec, rng)
    if not mask.any():
        return features, mask
    return T.mask_replace(features, mask, mask_emb), mask


def relpos_bucket(relative_position, num_buckets=32, max_distance=128):
    """T5 bidirectional bucketing of ``key - query`` offsets.

    Half the buckets per sign; offsets below ``num_buckets / 4`` get their own
    bucket, larger ones share log-spaced buckets up to ``max_distance``.
    """
    if num_buckets % 2:
        raise ValueError("num_buckets must be even")
    rel = np.asarray(relative_position, dtype=np.int64)
    half = num_buckets // 2
    out = np.where(rel > 0, half, 0)
    n = np.abs(rel)
    max_exact = half // 2
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(n, 1) / max_exact) / math.log(max_distance / max_exact) * (half - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, half - 1)
    out = out + np.where(n < max_exact, n, large)
    return out if out.ndim else int(out)


class SelfAttention(nn.Module):
    def __init__(self, dim, heads, rng):
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, rng)
        self.out = nn.Linear(dim, dim, rng)

    def forward(self, x, bias, drop):
        b, t, d = x.shape
        h = self.heads
        dh = d // h
        qkv = T.transpose(T.reshape(self.qkv(x), (b, t, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        if bias is not None:
            scores = scores + bias
        attn = drop(T.softmax(scores))
        ctx = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        return self.out(T.reshape(ctx, (b, t, d)))


class Block(nn.Module):
    """Pre-norm residual block: attention then feed-forward."""

    def __init__(self, cfg: TransformerConfig, rng):
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.attn = SelfAttention(cfg.dim, cfg.heads, rng)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.fc1 = nn.Linear(cfg.dim, cfg.ffn, rng)
        self.fc2 = nn.Linear(cfg.ffn, cfg.dim, rng)

    def forward(self, x, bias, drop):
        x = x + drop(self.attn(self.norm1(x), bias, drop))
        return x + drop(self.fc2(drop(T.gelu(self.fc1(self.norm2(x))))))


class Encoder(nn.Module):
    """Front end + masking + transformer; ``forward`` returns every layer's output."""

    def __init__(self, cfg: TransformerConfig, seed=0, conv_cfg: ConvEncoderConfig | None = None):
        rng = np.random.default_rng([seed, 101])
        self.cfg = cfg
        self.conv_cfg = conv_cfg
        if cfg.frontend == "conv":
            self.conv_cfg = conv_cfg or ConvEncoderConfig()
            self.conv = ConvFeatureEncoder(self.conv_cfg, rng)
            feat_dim = self.conv_cfg.channels
        else:
            feat_dim = cfg.input_dim
        self.feat_norm = nn.LayerNorm(feat_dim)
        self.proj = nn.Linear(feat_dim, cfg.dim, rng)
        self.mask_emb = nn.Parameter(rng.uniform(0.0, 1.0, cfg.dim))
        self.rel_bias = nn.Parameter(rng.normal(0.0, 0.02, (cfg.buckets, cfg.heads)))
        self.blocks = [Block(cfg, rng) for _ in range(cfg.layers)]
        self.dropout = nn.DropoutStream(seed)

    def frontend(self, x):
        x = T.as_tensor(x)
        if self.cfg.frontend == "conv":
            x = self.conv(x)
        elif x.ndim != 3 or x.shape[2] != self.cfg.input_dim:
            raise T.ShapeError("encoder", x.shape, (None, None, self.cfg.input_dim))
        return self.proj(self.feat_norm(x))

    def position_bias(self, t):
        pos = np.arange(t)
        buckets = relpos_bucket(pos[None, :] - pos[:, None], self.cfg.buckets, self.cfg.max_distance)
        return T.transpose(T.embedding(self.rel_bias, buckets), (2, 0, 1))

    def _drop(self, x):
        if not self.training or self.cfg.dropout == 0.0:
            return x
        return T.dropout(x, self.cfg.dropout, self.dropout.next_rng(), training=True)

    def forward(self, x, mask=None, use_bias=True):
        """Hidden states ``[h0, h1, ..., hL]``; ``h0`` is the (masked) projected input.

        ``mask``: optional ``(B, T)`` boolean array of frames to replace by the
        learned mask embedding.
        """
        h = self.frontend(x)
        if mask is not None and np.any(mask):
            h = T.mask_replace(h, mask, self.mask_emb)
        h = self._drop(h)
        bias = self.position_bias(h.shape[1]) if use_bias else None
        states = [h]
        for block in self.blocks:
            h = block(h, bias, self._drop)
            states.append(h)
        return states

    def hidden_states(self, frames):
        """Eval-mode, unmasked per-layer activations for one utterance as numpy arrays."""
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                states = self.forward(np.asarray(frames, dtype=np.float64)[None])
        finally:
            self.train(was)
        return [s.data[0] for s in states]
