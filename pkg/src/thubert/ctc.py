"""CTC loss, greedy and prefix-beam decoding, error rates and fine-tuning."""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from . import nn
from . import tensor as T
from .encoder import Encoder, MaskSpec, compute_mask
from .tensor import Tensor

NEG_INF = -np.inf
BLANK = "<blank>"
_ESCAPES = {" ": "<space>"}
_UNESCAPES = {v: k for k, v in _ESCAPES.items()}


class CtcVocab:
    """Output symbols with the blank reserved at index 0."""

    def __init__(self, symbols, joiner=""):
        symbols = list(symbols)
        if not symbols or symbols[0] != BLANK:
            raise ValueError("blank must be the first symbol")
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        self.symbols = symbols
        self.joiner = joiner
        self.index = {s: i for i, s in enumerate(symbols)}

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, CtcVocab) and self.symbols == other.symbols and self.joiner == other.joiner

    @classmethod
    def chars(cls):
        return cls([BLANK] + [chr(c) for c in range(ord("a"), ord("z") + 1)] + [" ", "'"], joiner="")

    @classmethod
    def phonemes(cls, phone_vocab):
        """Phoneme vocab with its silence symbol (index 0) replaced by the blank."""
        return cls([BLANK] + list(phone_vocab.symbols[1:]), joiner=" ")

    def encode(self, text):
        tokens = list(text) if self.joiner == "" else text.split()
        try:
            return [self.index[t] for t in tokens]
        except KeyError as err:
            raise ValueError(f"symbol {err.args[0]!r} not in vocabulary") from None

    def decode(self, ids):
        return self.joiner.join(self.symbols[i] for i in ids)

    def to_flat(self):
        syms = " ".join(_ESCAPES.get(s, s) for s in self.symbols)
        return {"vocab.symbols": syms, "vocab.joiner": "space" if self.joiner == " " else "none"}

    @classmethod
    def from_flat(cls, flat):
        symbols = [_UNESCAPES.get(s, s) for s in flat["vocab.symbols"].split(" ")]
        return cls(symbols, joiner=" " if flat.get("vocab.joiner") == "space" else "")


# ---------------------------------------------------------------------- loss


def _extended(target, blank=0):
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_frames(target):
    """Shortest input that can emit ``target``: one frame per label plus one per repeat."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _alpha_beta(lp, ext, blank):
    t_len, s_len = lp.shape[0], len(ext)
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    em = lp[:, ext]
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = em[0, 0]
    if s_len > 1:
        alpha[0, 1] = em[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + em[t]
    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = em[-1, -1]
    if s_len > 1:
        beta[-1, -2] = em[-1, -2]
    nskip = np.zeros(s_len, dtype=bool)
    nskip[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(nskip[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + em[t]
    return alpha, beta


class CtcLoss(T._OnceDiff):
    """``-log P(target | log_probs)`` by the forward algorithm in log space."""

    def forward(self, lp):
        if lp.ndim != 2:
            raise T.ShapeError("ctc_loss", lp.shape)
        tgt = self.target
        if len(tgt) and (tgt.min() < 0 or tgt.max() >= lp.shape[1] or np.any(tgt == self.blank)):
            raise ValueError("ctc_loss: target contains blank or out-of-range index")
        need = min_frames(tgt)
        if lp.shape[0] < max(need, 1):
            raise ValueError(f"ctc_loss: {lp.shape[0]} frames cannot emit a target needing {need}")
        self.ext = _extended(tgt, self.blank)
        self.alpha, self.beta = _alpha_beta(lp, self.ext, self.blank)
        ends = self.alpha[-1, -2:] if len(self.ext) > 1 else self.alpha[-1, -1:]
        self.logp = np.logaddexp.reduce(ends)
        self.lp = lp
        return np.array(-self.logp)

    def backward(self, g):
        # occupancy of each extended state at each frame, then summed per symbol
        log_occ = self.alpha + self.beta - self.lp[:, self.ext] - self.logp
        occ = np.exp(log_occ)
        grad_ = np.zeros_like(self.lp)
        np.add.at(grad_.T, self.ext, occ.T)
        return (Tensor(-grad_ * g.data),)


def ctc_loss(log_probs, target, blank=0):
    return CtcLoss.apply(log_probs, target=np.asarray(target, dtype=np.int64).reshape(-1), blank=blank)


# ------------------------------------------------------------------ decoding


def collapse(ids, blank=0):
    out = []
    prev = None
    for i in ids:
        i = int(i)
        if i != prev and i != blank:
            out.append(i)
        prev = i
    return out


def ctc_greedy_decode(log_probs, blank=0):
    """Frame argmax, merge repeats, drop blanks; returns label indices."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs)
    return collapse(lp.argmax(axis=1), blank)


def sequence_log_prob(log_probs, target, blank=0):
    """``log P(target | log_probs)``; ``-inf`` when the input is too short."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs)
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if lp.shape[0] < max(min_frames(target), 1):
        return NEG_INF
    ext = _extended(target, blank)
    alpha, _ = _alpha_beta(lp, ext, blank)
    return float(np.logaddexp.reduce(alpha[-1, -2:] if len(ext) > 1 else alpha[-1, -1:]))


def _prefix_search(lp, beam_width, blank):
    beams = {(): (0.0, NEG_INF)}  # prefix -> (log p ending in blank, log p ending in label)
    for t in range(lp.shape[0]):
        row = lp[t]
        nxt = {}

        def push(prefix, pb, pnb):
            ob, onb = nxt.get(prefix, (NEG_INF, NEG_INF))
            nxt[prefix] = (np.logaddexp(ob, pb), np.logaddexp(onb, pnb))

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            push(prefix, total + row[blank], NEG_INF)
            last = prefix[-1] if prefix else None
            for c in range(lp.shape[1]):
                if c == blank:
                    continue
                if c == last:
                    push(prefix, NEG_INF, pnb + row[c])
                    if pb > NEG_INF:
                        push(prefix + (c,), NEG_INF, pb + row[c])
                else:
                    push(prefix + (c,), NEG_INF, total + row[c])
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = dict(ranked[:beam_width])
    return list(beams)


def ctc_beam_decode(log_probs, beam_width, blank=0):
    """Prefix beam search without a language model.

    Equivalent prefixes are merged during the search and survivors are
    rescored exactly.  Pruned search is not monotone in the width, so the
    result is the best over every width up to ``beam_width``; widening the
    beam therefore never lowers the returned ``(labels, log_score)``.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs)
    # a beam wide enough to hold every prefix is unpruned and already exact
    t, v = lp.shape
    n_prefixes, total = 1, 1
    for _ in range(t):
        n_prefixes *= v - 1
        total += n_prefixes
        if total > beam_width:
            break
    widths = [beam_width] if total <= beam_width else range(1, beam_width + 1)
    seen = {}
    for width in widths:
        for p in _prefix_search(lp, width, blank):
            if p not in seen:
                seen[p] = sequence_log_prob(lp, p, blank)
    score, best = min(((s, p) for p, s in seen.items()), key=lambda sp: (-sp[0], sp[1]))
    return list(best), float(score)


# ------------------------------------------------------------------- metrics


def edit_distance(hyp, ref):
    hyp, ref = list(hyp), list(ref)
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def tokenize(text, level):
    if not isinstance(text, str):
        return list(text)
    if level == "word":
        return text.split()
    if level == "char":
        return list(text)
    raise ValueError(f"unknown tokenization level {level!r}")


def error_rate(hyp, ref, level="word"):
    """Levenshtein distance over ``|ref|``; strings are split at ``level`` (word or char)."""
    h, r = tokenize(hyp, level), tokenize(ref, level)
    if not r:
        raise ValueError("error_rate: empty reference")
    return edit_distance(h, r) / len(r)


def corpus_error_rate(hyps, refs, level="word"):
    """Total edits over total reference length."""
    edits = total = 0
    for h, r in zip(hyps, refs, strict=True):
        h, r = tokenize(h, level), tokenize(r, level)
        edits += edit_distance(h, r)
        total += len(r)
    if total == 0:
        raise ValueError("corpus_error_rate: empty references")
    return edits / total


# --------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneConfig:
    steps: int = 500
    batch_size: int = 4
    peak_lr: float = 5e-4
    warmup_frac: float = 0.1
    hold_frac: float = 0.4
    betas: tuple = (0.9, 0.98)
    weight_decay: float = 0.0
    freeze_frontend: bool = True
    freeze_encoder_frac: float = 0.0  # leading fraction of steps that train only the output head
    head_lr_scale: float = 1.0  # output head learning rate relative to the encoder's
    mask_p: float = 0.0  # time masking of encoder inputs during training
    mask_span: int = 10
    clip_norm: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0.0 <= self.freeze_encoder_frac <= 1.0:
            raise ValueError("freeze_encoder_frac must lie in [0, 1]")
        MaskSpec(self.mask_p, self.mask_span)

    @property
    def mask(self):
        return MaskSpec(self.mask_p, self.mask_span)


class CtcModel(nn.Module):
    """Encoder plus a normalized linear projection of the top layer to CTC symbols."""

    def __init__(self, encoder: Encoder, n_symbols, seed=0):
        rng = np.random.default_rng([seed, 303])
        self.encoder = encoder
        self.head_norm = nn.LayerNorm(encoder.cfg.dim)
        self.head = nn.Linear(encoder.cfg.dim, n_symbols, rng)

    def forward(self, frames, mask=None, frozen_encoder=False):
        """Single utterance ``(T, D)`` -> ``(T, V)`` log-probabilities."""
        x = np.asarray(frames, dtype=np.float64)[None]
        if frozen_encoder:
            with T.no_grad():
                top = Tensor(self.encoder(x, mask)[-1].data)
        else:
            top = self.encoder(x, mask)[-1]
        logits = self.head(self.head_norm(top))
        return T.log_softmax(T.reshape(logits, logits.shape[1:]))

    def frontend_parameters(self):
        enc = self.encoder
        mods = [enc.feat_norm, enc.proj] + ([enc.conv] if hasattr(enc, "conv") else [])
        return {id(p) for m in mods for p in m.parameters()}

    def log_probs(self, frames):
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                return self.forward(frames).data
        finally:
            self.train(was)


def finetune(encoder: Encoder, labeled, vocab: CtcVocab, cfg: FinetuneConfig, log_path=None, callback=None):
    """CTC training on ``labeled``: list of ``(frames, target_indices)``.

    Returns ``(CtcModel, log)``.
    """
    for i, (frames, tgt) in enumerate(labeled):
        tgt = np.asarray(tgt)
        if len(tgt) == 0:
            raise ValueError(f"labeled utterance {i}: empty transcript")
        if tgt.min() < 1 or tgt.max() >= len(vocab):
            raise ValueError(f"labeled utterance {i}: target outside vocabulary of {len(vocab)} symbols")
    model = CtcModel(encoder, len(vocab), cfg.seed)
    frozen = model.frontend_parameters() if cfg.freeze_frontend else set()
    params = [p for p in model.parameters() if id(p) not in frozen]
    head_ids = {id(p) for p in model.head_norm.parameters() + model.head.parameters()}
    opt_head = nn.Adam([p for p in params if id(p) in head_ids], lr=cfg.peak_lr, betas=cfg.betas,
                       weight_decay=cfg.weight_decay)
    opt_enc = nn.Adam([p for p in params if id(p) not in head_ids], lr=cfg.peak_lr, betas=cfg.betas,
                      weight_decay=cfg.weight_decay)
    head_only_steps = int(round(cfg.freeze_encoder_frac * cfg.steps))
    rng = np.random.default_rng([cfg.seed, 31])
    mask_rng = np.random.default_rng([cfg.seed, 37])
    history = []
    sink = open(log_path, "w") if log_path else None
    model.train()
    try:
        for step in range(1, cfg.steps + 1):
            idx = rng.choice(len(labeled), size=min(cfg.batch_size, len(labeled)), replace=False)
            head_only = step <= head_only_steps
            loss = None
            for i in idx:
                frames, tgt = labeled[i]
                mask = compute_mask((1, len(frames)), cfg.mask, mask_rng) if cfg.mask_p > 0 else None
                term = ctc_loss(model(frames, mask, frozen_encoder=head_only), tgt)
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / len(idx))
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"finetune diverged at step {step}")
            lr = nn.tri_stage_lr(step, cfg.steps, cfg.peak_lr, cfg.warmup_frac, cfg.hold_frac)
            model.zero_grad()
            loss.backward()
            if cfg.clip_norm:
                nn.clip_grad_norm(params, cfg.clip_norm)
            opt_head.step(lr * cfg.head_lr_scale)
            if not head_only:
                opt_enc.step(lr)
            entry = {"step": step, "lr": lr, "loss": value}
            history.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
            if callback:
                callback(step, model, entry)
    finally:
        if sink:
            sink.close()
    model.eval()
    return model, history


def decode(model: CtcModel, corpus, beam_width=1):
    out = []
    for frames in corpus:
        lp = model.log_probs(frames)
        out.append(ctc_greedy_decode(lp) if beam_width == 1 else ctc_beam_decode(lp, beam_width)[0])
    return out


def finetune_config_flat(cfg: FinetuneConfig):
    return {f"finetune.{k}": v for k, v in cfgmod.flatten(cfg).items()}


def model_state(model: CtcModel):
    return OrderedDict(model.state_dict())
