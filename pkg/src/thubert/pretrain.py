"""Multi-layer masked prediction over two target streams.

Layer ``k`` predicts adversarial pseudo-phonemes, the top layer predicts
k-means codes.  Each supervised layer has a head that projects hidden states
and scores them against learned code embeddings by cosine similarity over a
temperature; only masked frames contribute to the loss.
"""
from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import io as fio
from . import nn
from . import tensor as T
from .encoder import Encoder, MaskSpec, TransformerConfig, compute_mask

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, last_checkpoint):
        self.step = step
        self.last_checkpoint = last_checkpoint
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")


@dataclass
class PretrainConfig:
    layer_k: int = 4  # GAN-target layer; 0 disables that stream
    layer_top: int = 0  # 0 means the top layer
    vocab_k: int = 9
    vocab_top: int = 16
    weight_k: float = 1.0
    weight_top: float = 1.0
    embed_dim: int = 256
    tau: float = 0.1
    mask: MaskSpec = field(default_factory=MaskSpec)
    peak_lr: float = 5e-4
    warmup_frac: float = 0.08
    betas: tuple = (0.9, 0.98)
    weight_decay: float = 0.01
    clip_norm: float = 0.0
    steps: int = 1000
    batch_size: int = 8
    crop_frames: int = 100
    save_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def resolved_top(self, n_layers):
        return self.layer_top or n_layers

    def validate(self, n_layers):
        top = self.resolved_top(n_layers)
        if not 1 <= top <= n_layers:
            raise ValueError(f"top layer {top} outside 1..{n_layers}")
        if self.layer_k and not 1 <= self.layer_k < top:
            raise ValueError(f"need 1 <= k < L, got k={self.layer_k}, L={top}")


class PredictionHead(nn.Module):
    def __init__(self, dim, embed_dim, n_codes, rng, tau=0.1):
        self.tau = tau
        self.n_codes = n_codes
        self.proj = nn.Linear(dim, embed_dim, rng, bias=False)
        self.codes = nn.Parameter(rng.normal(0.0, 1.0, (n_codes, embed_dim)))


def code_logits(head: PredictionHead, o):
    """``sim(W o_t, e_c) / tau`` for every frame and code (cosine similarity)."""
    o = T.as_tensor(o)
    if o.shape[-1] != head.proj.weight.shape[0]:
        raise T.ShapeError("code_logits", o.shape, head.proj.weight.shape)
    p = T.l2_normalize(head.proj(o))
    e = T.l2_normalize(head.codes)
    return T.matmul(p, T.transpose(e, (1, 0))) * (1.0 / head.tau)


def masked_prediction_loss(heads, hidden, targets, mask, weights=None):
    """Summed ``-log p(c_t | o_t)`` over masked frames of each supervised layer.

    heads/targets/weights: dicts keyed by layer index; targets are ``(B, T)``
    int arrays; ``mask`` is ``(B, T)`` boolean.  Returns ``(total, {layer: value})``.
    """
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    total = None
    parts = {}
    for layer, head in heads.items():
        h = hidden[layer]
        tgt = np.asarray(targets[layer])
        if tgt.shape != tuple(h.shape[:2]) or mask.shape != tgt.shape:
            raise ValueError(f"layer {layer}: targets {tgt.shape} vs hidden {h.shape[:2]} vs mask {mask.shape}")
        if len(rows) == 0:
            parts[layer] = 0.0
            continue
        logits = code_logits(head, T.getitem(h, (rows, cols)))
        term = T.cross_entropy(logits, tgt[rows, cols], reduction="sum")
        parts[layer] = term.item()
        w = 1.0 if weights is None else weights.get(layer, 1.0)
        term = term * w if w != 1.0 else term
        total = term if total is None else total + term
    if total is None:
        total = T.Tensor(0.0)
    return total, parts


def align_targets(codes, t_enc, tolerance=3, utt_id=""):
    """Truncate ``codes`` to ``t_enc`` frames if within ``tolerance`` frames."""
    codes = np.asarray(codes)
    if abs(len(codes) - t_enc) > tolerance:
        raise ValueError(f"{utt_id or 'utterance'}: {len(codes)} target frames vs {t_enc} encoder frames "
                         f"(tolerance {tolerance})")
    return codes[:t_enc]


class PretrainModel(nn.Module):
    def __init__(self, enc_cfg: TransformerConfig, cfg: PretrainConfig, conv_cfg=None):
        cfg.validate(enc_cfg.layers)
        self.cfg = cfg
        self.encoder = Encoder(enc_cfg, seed=cfg.seed, conv_cfg=conv_cfg)
        rng = np.random.default_rng([cfg.seed, 202])
        self.top = cfg.resolved_top(enc_cfg.layers)
        self.head_top = PredictionHead(enc_cfg.dim, cfg.embed_dim, cfg.vocab_top, rng, cfg.tau)
        self.head_k = (PredictionHead(enc_cfg.dim, cfg.embed_dim, cfg.vocab_k, rng, cfg.tau)
                       if cfg.layer_k else None)

    def heads(self):
        out = OrderedDict()
        if self.head_k is not None:
            out[self.cfg.layer_k] = self.head_k
        out[self.top] = self.head_top
        return out

    def weights(self):
        return {self.cfg.layer_k: self.cfg.weight_k, self.top: self.cfg.weight_top}

    def loss(self, x, targets_k, targets_top, mask):
        hidden = self.encoder(x, mask)
        targets = {self.top: targets_top}
        if self.head_k is not None:
            targets[self.cfg.layer_k] = targets_k
        return masked_prediction_loss(self.heads(), hidden, targets, mask, self.weights())


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: OrderedDict
    config: dict
    step: int = 0

    def save(self, path):
        path = Path(path)
        fio.save_params(path, self.params)
        meta = dict(self.config)
        meta["step"] = str(self.step)
        fio.atomic_write_text(config_path(path), cfgmod.dump_text(meta))

    @classmethod
    def load(cls, path):
        path = Path(path)
        params = fio.load_params(path)
        meta = cfgmod.parse_text(config_path(path).read_text(), str(config_path(path)))
        step = int(meta.pop("step", 0))
        return cls(params, meta, step)

    def encoder_config(self):
        enc = cfgmod.apply_flat(TransformerConfig(), _section(self.config, "encoder."), "", strict=False)
        return enc

    def section(self, prefix):
        return _section(self.config, prefix)


def _section(flat, prefix):
    return {k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}


def config_path(path):
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def model_config(enc_cfg, cfg, conv_cfg=None):
    flat = {f"encoder.{k}": v for k, v in cfgmod.flatten(enc_cfg).items()}
    flat.update({f"pretrain.{k}": v for k, v in cfgmod.flatten(cfg).items()})
    if conv_cfg is not None:
        flat.update({f"conv.{k}": v for k, v in cfgmod.flatten(conv_cfg).items()})
    return flat


def snapshot(model: PretrainModel, enc_cfg, cfg, step, conv_cfg=None):
    return Checkpoint(model.state_dict(), model_config(enc_cfg, cfg, conv_cfg), step)


def load_model(ckpt: Checkpoint):
    enc_cfg = ckpt.encoder_config()
    cfg = cfgmod.apply_flat(PretrainConfig(), ckpt.section("pretrain."), strict=False)
    conv = ckpt.section("conv.")
    conv_cfg = None
    if conv:
        from .encoder import ConvEncoderConfig
        conv_cfg = cfgmod.apply_flat(ConvEncoderConfig(), conv, strict=False)
    model = PretrainModel(enc_cfg, cfg, conv_cfg)
    model.load_state_dict(ckpt.params)
    return model


def load_encoder(ckpt: Checkpoint):
    """Encoder weights from a pretraining (or fine-tuning) checkpoint."""
    enc_cfg = ckpt.encoder_config()
    enc = Encoder(enc_cfg)
    sub = OrderedDict((k[len("encoder."):], v) for k, v in ckpt.params.items() if k.startswith("encoder."))
    enc.load_state_dict(sub)
    return enc


# ------------------------------------------------------------------ training


def _batch(corpus, targets_k, targets_top, idx, crop, rng):
    length = min(crop, min(len(corpus[i]) for i in idx)) if crop else min(len(corpus[i]) for i in idx)
    xs, tk, tt = [], [], []
    for i in idx:
        s = int(rng.integers(len(corpus[i]) - length + 1))
        xs.append(corpus[i][s : s + length])
        tt.append(targets_top[i][s : s + length])
        tk.append(targets_k[i][s : s + length] if targets_k is not None else np.zeros(length, dtype=np.int64))
    return np.stack(xs), np.stack(tk), np.stack(tt)


def pretrain(cfg: PretrainConfig, enc_cfg: TransformerConfig, corpus, targets_top, targets_k=None,
             out_path=None, log_path=None, conv_cfg=None):
    """Train the encoder on masked prediction.

    ``corpus``: list of ``(T_i, D)`` feature arrays; ``targets_*``: per-utterance
    code arrays already aligned to ``T_i``.  Returns ``(Checkpoint, log)``.
    """
    if cfg.layer_k and targets_k is None:
        raise ValueError("layer_k is set but no layer-k targets were given")
    for i, x in enumerate(corpus):
        if len(targets_top[i]) != len(x) or (targets_k is not None and len(targets_k[i]) != len(x)):
            raise ValueError(f"utterance {i}: targets not aligned to {len(x)} frames")
    model = PretrainModel(enc_cfg, cfg, conv_cfg)
    model.train()
    opt = nn.Adam(model.parameters(), lr=cfg.peak_lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 7])
    history = []
    last_good = None
    if out_path is not None and cfg.save_every:
        snapshot(model, enc_cfg, cfg, 0, conv_cfg).save(out_path)
        last_good = str(out_path)
    sink = open(log_path, "w") if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            idx = rng.integers(len(corpus), size=cfg.batch_size)
            x, tk, tt = _batch(corpus, targets_k, targets_top, idx, cfg.crop_frames, rng)
            mask = compute_mask(tt.shape, cfg.mask, rng)
            loss, parts = model.loss(x, tk, tt, mask)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, last_good)
            lr = nn.warmup_linear_lr(step - 1, cfg.steps, cfg.peak_lr, cfg.warmup_frac)
            opt.zero_grad()
            if loss.requires_grad:
                loss.backward()
                if cfg.clip_norm:
                    nn.clip_grad_norm(opt.params, cfg.clip_norm)
                opt.step(lr)
            entry = {
                "step": step,
                "lr": lr,
                "loss_total": value,
                "loss_layer_k": parts.get(cfg.layer_k, 0.0) if cfg.layer_k else 0.0,
                "loss_layer_L": parts[model.top],
                "mask_fraction": float(mask.mean()),
            }
            history.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
            if out_path is not None and cfg.save_every and step % cfg.save_every == 0:
                snapshot(model, enc_cfg, cfg, step, conv_cfg).save(out_path)
                last_good = str(out_path)
    finally:
        if sink:
            sink.close()
    ckpt = snapshot(model, enc_cfg, cfg, cfg.steps, conv_cfg)
    if out_path is not None:
        ckpt.save(out_path)
    return ckpt, history
