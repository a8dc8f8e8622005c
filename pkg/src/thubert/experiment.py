"""Synthetic end-to-end harness: tokenizers, pre-training, low-resource fine-tuning.

Everything runs on a generated corpus whose frame labels are known, so the
adversarial tokenizer can be scored directly and pre-training variants can
be compared by phoneme error rate after CTC fine-tuning.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import audio, ctc, gan, kmeans, synth
from .encoder import Encoder, MaskSpec, TransformerConfig
from .pretrain import PretrainConfig, load_encoder, pretrain

log = logging.getLogger(__name__)

CONDITIONS = ("gan+kmeans", "kmeans", "random")


def _toy_encoder():
    return TransformerConfig(layers=6, dim=64, ffn=128, heads=4, dropout=0.1, input_dim=39)


def _toy_pretrain():
    return PretrainConfig(layer_k=4, vocab_k=9, vocab_top=16, embed_dim=32, mask=MaskSpec(),
                          peak_lr=2e-3, steps=600, batch_size=8, crop_frames=64)


def _toy_gan():
    # weaker diversity pressure and decaying learning rates keep the 2000-step run from
    # collapsing once the critic starts winning
    return gan.GanConfig(eta_pd=0.5, lr_schedule="linear")


def _toy_finetune():
    return ctc.FinetuneConfig(steps=300, batch_size=4, peak_lr=2e-3)


@dataclass
class RunConfig:
    """Every tunable of the pipeline; serialised as flat dotted ``key=value`` lines."""

    seed: int = 0
    n_utts: int = 400  # split into disjoint speech and text halves
    n_labeled: int = 6
    n_test: int = 60
    kmeans_k: int = 16
    kmeans_iters: int = 100
    kmeans_n_init: int = 1
    gan_dims: int = 13  # leading cepstra fed to the generator
    gan_text_edge_sil: bool = False  # keep boundary silence in GAN text; the speech side has it stripped
    frontend: audio.FrontendConfig = field(default_factory=audio.FrontendConfig)
    synth: synth.SynthSpec = field(default_factory=synth.SynthSpec)
    gan: gan.GanConfig = field(default_factory=_toy_gan)
    encoder: TransformerConfig = field(default_factory=_toy_encoder)
    pretrain: PretrainConfig = field(default_factory=_toy_pretrain)
    finetune: ctc.FinetuneConfig = field(default_factory=_toy_finetune)


@dataclass
class Prepared:
    """Features and references for one seed."""

    seed: int
    feats: list  # full-utterance CMVN features, speech half
    speech_masks: list  # VAD speech frames per utterance
    gold: list  # frame labels aligned to feats
    text: list
    labeled: list  # (features, CTC targets)
    test: list
    kmeans_codes: list
    codebook: kmeans.Codebook
    cmvn: audio.CMVN


def _features(utts, frontend=None):
    return [audio.features_20ms(u.waveform, frontend).frames for u in utts]


def ctc_targets(transcript):
    """Synthetic transcripts share indices with the phoneme CTC vocab once silence is dropped."""
    return [int(p) for p in transcript if p != 0]


def prepare(cfg: RunConfig, seed, text_ratio=None) -> Prepared:
    spec = replace(cfg.synth, seed=seed)
    corpus = synth.gen_corpus(spec, cfg.n_utts, seed=seed, text_ratio=text_ratio)
    raw = _features(corpus.speech, cfg.frontend)
    cmvn = audio.CMVN.fit(raw)
    feats = [cmvn(f) for f in raw]
    masks = [audio.speech_frame_mask(u.waveform, len(f), cfg.frontend) for u, f in zip(corpus.speech, feats)]
    gold = [u.labels[: len(f)] for u, f in zip(corpus.speech, feats)]
    codebook = kmeans.fit_kmeans(np.concatenate(feats), cfg.kmeans_k, max_iters=cfg.kmeans_iters, seed=seed,
                                 n_init=cfg.kmeans_n_init)
    codes = [kmeans.assign(codebook, f).codes for f in feats]
    labeled = [(f, ctc_targets(u.transcript)) for f, u in zip(feats[: cfg.n_labeled], corpus.speech)]
    test_utts = [synth.gen_utterance(spec, np.random.default_rng([seed, 1_000_003, i]), f"x{seed}_{i:05d}")
                 for i in range(cfg.n_test)]
    test = [(cmvn(f), ctc_targets(u.transcript)) for f, u in zip(_features(test_utts, cfg.frontend), test_utts)]
    return Prepared(seed, feats, masks, gold, corpus.text, labeled, test, codes, codebook, cmvn)


def speech_accuracy(pred, gold):
    """Unit-to-phoneme mapping accuracy over frames whose true label is not silence."""
    p_out, g_out = [], []
    for p, g in zip(pred, gold):
        n = min(len(p), len(g))
        keep = np.asarray(g[:n]) != 0
        p_out.append(np.asarray(p[:n])[keep])
        g_out.append(np.asarray(g[:n])[keep])
    return synth.mapping_accuracy(p_out, g_out)


def strip_edge_silence(seq, sil=0):
    """Drop leading and trailing silence tokens, mirroring VAD trimming of the audio."""
    seq = np.asarray(seq)
    keep = np.flatnonzero(seq != sil)
    return seq[keep[0] : keep[-1] + 1] if len(keep) else seq[:0]


@dataclass
class GanResult:
    labels: list  # pseudo-phoneme per frame, full utterances
    accuracy: float
    history: list


def run_gan(cfg: RunConfig, data: Prepared, gan_cfg=None, callback=None) -> GanResult:
    gcfg = replace(gan_cfg or cfg.gan, seed=data.seed)
    d = cfg.gan_dims
    stripped = [f[m, :d] for f, m in zip(data.feats, data.speech_masks)]
    aux = None
    if gcfg.delta_ss:
        cb = kmeans.fit_kmeans(np.concatenate(stripped), gcfg.aux_codes, seed=data.seed)
        aux = [kmeans.assign(cb, f).codes for f in stripped]
    text = data.text
    if not cfg.gan_text_edge_sil:
        text = [t for t in map(strip_edge_silence, text) if len(t)]
    g, _, hist = gan.train_gan(gcfg, stripped, text, aux, callback=callback)
    labels = gan.extract_pseudo_labels(g, [f[:, :d] for f in data.feats])
    return GanResult(labels, speech_accuracy(labels, data.gold), hist)


def run_condition(cfg: RunConfig, data: Prepared, condition, gan_labels=None, layer_k=None):
    """Pre-train (unless ``random``), fine-tune on the labeled set and return test PER."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; choose from {CONDITIONS}")
    enc_cfg = cfg.encoder
    if condition == "random":
        encoder = Encoder(enc_cfg, seed=data.seed)
    else:
        pcfg = replace(cfg.pretrain, seed=data.seed, vocab_top=cfg.kmeans_k)
        targets_k = None
        if condition == "gan+kmeans":
            if gan_labels is None:
                raise ValueError("gan+kmeans needs GAN pseudo labels")
            pcfg = replace(pcfg, layer_k=layer_k or pcfg.layer_k, vocab_k=cfg.gan.vocab)
            targets_k = gan_labels
        else:
            pcfg = replace(pcfg, layer_k=0)
        ckpt, _ = pretrain(pcfg, enc_cfg, data.feats, data.kmeans_codes, targets_k)
        encoder = load_encoder(ckpt)
    vocab = ctc.CtcVocab.phonemes(cfg.synth.vocab)
    model, _ = ctc.finetune(encoder, data.labeled, vocab, replace(cfg.finetune, seed=data.seed))
    hyps = ctc.decode(model, [f for f, _ in data.test])
    return ctc.corpus_error_rate(hyps, [t for _, t in data.test])


def end_to_end(cfg: RunConfig, seed, gan_result: GanResult | None = None, data=None):
    """PER for every condition on one seed, plus the tokenizer's accuracy."""
    t0 = time.time()
    data = data or prepare(cfg, seed)
    gan_result = gan_result or run_gan(cfg, data)
    out = {"seed": seed, "gan_accuracy": gan_result.accuracy}
    for cond in CONDITIONS:
        out[cond] = run_condition(cfg, data, cond, gan_result.labels)
        log.info("seed %d %s PER %.4f", seed, cond, out[cond])
    out["seconds"] = time.time() - t0
    return out


def ablate_layer_k(cfg: RunConfig, ks, seed=0):
    """Rows ``(k, PER)`` sweeping the layer that predicts GAN labels."""
    for k in ks:
        if not 1 <= k < cfg.encoder.layers:
            raise ValueError(f"layer k={k} must satisfy 1 <= k < {cfg.encoder.layers}")
    data = prepare(cfg, seed)
    labels = run_gan(cfg, data).labels
    return [(k, run_condition(cfg, data, "gan+kmeans", labels, layer_k=k)) for k in ks]


def parse_ratio(text):
    """``"1:50"`` -> 50.0 text utterances per speech utterance."""
    try:
        a, b = text.split(":")
        a, b = float(a), float(b)
    except ValueError:
        raise ValueError(f"bad ratio {text!r}; expected speech:text such as 1:1") from None
    if a <= 0 or b < 0:
        raise ValueError(f"bad ratio {text!r}")
    return b / a


def check_ratios(cfg: RunConfig, ratios):
    parsed = [(r, parse_ratio(r)) for r in ratios]
    empty = [r for r, v in parsed if round(cfg.n_utts // 2 * v) == 0]
    if empty:
        raise ValueError(f"text ratio {', '.join(empty)} leaves no unpaired text; GAN training is undefined "
                         "without text (the speech-only baseline is the k-means-only condition)")
    return parsed


def ablate_text_ratio(cfg: RunConfig, ratios, seed=0):
    """Rows ``(ratio, gan_accuracy, PER)`` sweeping the amount of unpaired text.

    A ratio with no text is rejected before any work starts: adversarial
    training has nothing to compare against, and the speech-only baseline is
    the ``kmeans`` condition, not a GAN configuration.
    """
    parsed = check_ratios(cfg, ratios)
    rows = []
    for r, v in parsed:
        data = prepare(cfg, seed, text_ratio=v)
        res = run_gan(cfg, data)
        rows.append((r, res.accuracy, run_condition(cfg, data, "gan+kmeans", res.labels)))
    return rows
