"""``thubert`` command line: one subcommand per pipeline stage plus ablation sweeps.

File conventions
  speech manifest   utt_id<TAB>wav_path<TAB>transcript (space-separated phoneme symbols)
  text corpus       utt_id<TAB>phoneme symbols
  features index    utt_id<TAB>feature_path<TAB>vad bits (one 0/1 per frame)
  codes / labels    utt_id<TAB>space-separated ints
  hypotheses        utt_id<TAB>hypothesis

Every command writes ``<out>.manifest.tsv`` listing produced files and their
SHA-256.  ``THBT_THREADS`` caps BLAS threads (default 1).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import audio, config, ctc, experiment, gan, kmeans, synth
from . import io as fio
from .encoder import Encoder
from .pretrain import Checkpoint, load_encoder, pretrain

log = logging.getLogger("thubert")


class CliError(Exception):
    def __init__(self, kind, message):
        self.kind = kind
        super().__init__(message)


# ------------------------------------------------------------------ helpers


def _need(path, what):
    p = Path(path)
    if not p.exists():
        raise CliError("missing-input", f"{what} not found: {p}")
    return p


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out, produced):
    out = Path(out)
    target = out / "manifest.tsv" if out.is_dir() else out.with_name(out.name + ".manifest.tsv")
    rows = [(str(p), Path(p).stat().st_size, _sha256(p)) for p in produced]
    fio.write_tsv(target, rows)
    return target


def load_run_config(args):
    cfg = experiment.RunConfig()
    flat = {}
    if args.config:
        flat = config.parse_text(_need(args.config, "config file").read_text(), args.config)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError("config", f"--set expects key=value, got {item!r}")
        flat[key.strip()] = value.strip()
    try:
        cfg = config.apply_flat(cfg, flat)
    except config.ConfigError as err:
        raise CliError("config", str(err)) from None
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def phone_vocab(cfg):
    return cfg.synth.vocab


def read_features(index_path):
    rows = fio.read_tsv(_need(index_path, "features index"), 3)
    base = Path(index_path).parent
    ids, feats, vads = [], [], []
    for uid, path, bits in rows:
        f = fio.load_fmat(base / path)
        vad = np.array([c == "1" for c in bits], dtype=bool) if bits else np.zeros(0, dtype=bool)
        if len(vad) != len(f):
            raise CliError("format", f"{uid}: {len(vad)} VAD bits for {len(f)} frames")
        ids.append(uid)
        feats.append(f)
        vads.append(vad)
    return ids, feats, vads


def read_symbol_corpus(path, vocab):
    out = []
    for uid, syms in fio.read_tsv(_need(path, "text corpus"), 2):
        try:
            out.append((uid, np.array([vocab.index(s) for s in syms.split()], dtype=np.int64)))
        except KeyError as err:
            raise CliError("vocab", f"{uid}: unknown phoneme {err.args[0]!r}") from None
    return out


def _codes_for(ids, path, lengths, what):
    table = fio.read_codes(_need(path, what))
    out = []
    for uid, n in zip(ids, lengths):
        if uid not in table:
            raise CliError("missing-input", f"{what}: no entry for {uid}")
        c = table[uid]
        if len(c) != n:
            raise CliError("format", f"{what}: {uid} has {len(c)} codes for {n} frames")
        out.append(c)
    return out


# ------------------------------------------------------------- subcommands


def cmd_synth_data(args, cfg):
    out = Path(args.out)
    spec = replace(cfg.synth, seed=cfg.seed)
    n = args.n_utts or cfg.n_utts
    if args.dry_run:
        return plan(f"generate {n} utterances ({n // 2} speech, {n - n // 2} text) into {out}")
    corpus = synth.gen_corpus(spec, n, seed=cfg.seed)
    vocab = spec.vocab
    (out / "wav").mkdir(parents=True, exist_ok=True)
    produced, manifest, aligns = [], [], []
    for u in corpus.speech:
        wav = out / "wav" / f"{u.utt_id}.wav"
        audio.write_wav(wav, u.waveform)
        produced.append(wav)
        manifest.append((u.utt_id, f"wav/{u.utt_id}.wav", " ".join(vocab.symbols[i] for i in u.transcript)))
        aligns.append((u.utt_id, " ".join(str(int(x)) for x in u.labels)))
    text_rows = [(uid, " ".join(vocab.symbols[i] for i in seq)) for uid, seq in zip(corpus.text_ids, corpus.text)]
    for name, rows in (("speech.tsv", manifest), ("text.tsv", text_rows), ("alignments.tsv", aligns)):
        fio.write_tsv(out / name, rows)
        produced.append(out / name)
    return produced


def cmd_features(args, cfg):
    rows = fio.read_tsv(_need(args.manifest, "speech manifest"), 3)
    out = Path(args.out)
    if args.dry_run:
        return plan(f"MFCC + VAD for {len(rows)} utterances into {out}")
    base = Path(args.manifest).parent
    raw, vads = [], []
    for uid, wav_path, _ in rows:
        w = audio.load_wav(_need(base / wav_path, "waveform"))
        f = audio.features_20ms(w, cfg.frontend, uid).frames
        raw.append(f)
        vads.append(audio.speech_frame_mask(w, len(f), cfg.frontend))
    if args.cmvn:
        stats = fio.load_fmat(_need(args.cmvn, "CMVN statistics"))
        cmvn = audio.CMVN(stats[0], stats[1])
    else:
        cmvn = audio.CMVN.fit(raw)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    produced, index = [], []
    for (uid, _, _), f, vad in zip(rows, raw, vads):
        path = out / "feats" / f"{uid}.fmat"
        fio.save_fmat(path, cmvn(f))
        produced.append(path)
        index.append((uid, f"feats/{uid}.fmat", "".join("1" if v else "0" for v in vad)))
    fio.save_fmat(out / "cmvn.fmat", np.stack([cmvn.mean, cmvn.std]))
    fio.write_tsv(out / "features.tsv", index)
    return produced + [out / "cmvn.fmat", out / "features.tsv"]


def _select(feats, vads, dims, speech_only):
    out = []
    for f, v in zip(feats, vads):
        f = f[v] if speech_only else f
        out.append(f[:, :dims] if dims else f)
    return out


def cmd_kmeans(args, cfg):
    if args.action == "fit":
        ids, feats, vads = read_features(args.features)
        k = args.k or cfg.kmeans_k
        if args.dry_run:
            return plan(f"k-means K={k} over {len(ids)} utterances -> {args.out}")
        data = np.concatenate(_select(feats, vads, args.dims, args.speech_only))
        cb = kmeans.fit_kmeans(data, k, max_iters=cfg.kmeans_iters, seed=cfg.seed, n_init=cfg.kmeans_n_init)
        cb.save(args.out)
        return [Path(args.out)]
    if args.action == "assign":
        ids, feats, vads = read_features(args.features)
        cb = kmeans.Codebook.load(_need(args.codebook, "codebook"))
        if args.dry_run:
            return plan(f"assign {len(ids)} utterances to K={cb.K} codes -> {args.out}")
        sel = _select(feats, vads, cb.feature_dim if args.dims else 0, args.speech_only)
        codes = {}
        for uid, f in zip(ids, sel):
            if f.shape[1] != cb.feature_dim:
                f = f[:, : cb.feature_dim] if f.shape[1] > cb.feature_dim else f
            codes[uid] = kmeans.assign(cb, f, uid).codes
        fio.write_codes(args.out, codes)
        return [Path(args.out)]
    # recluster
    ckpt = Checkpoint.load(_need(args.checkpoint, "checkpoint"))
    ids, feats, _ = read_features(args.features)
    k = args.k or cfg.kmeans_k
    if args.dry_run:
        return plan(f"re-cluster layer {args.layer} of {args.checkpoint} with K={k} -> {args.out}")
    enc = load_encoder(ckpt)
    cb = kmeans.recluster_from_layer(enc, args.layer, feats, k, seed=cfg.seed, max_iters=cfg.kmeans_iters)
    cb.save(args.out)
    return [Path(args.out)]


def cmd_gan(args, cfg):
    vocab = phone_vocab(cfg)
    gcfg = replace(cfg.gan, seed=cfg.seed, vocab=len(vocab))
    dims = cfg.gan_dims
    if args.action == "train":
        ids, feats, vads = read_features(args.features)
        text = read_symbol_corpus(args.text, vocab)
        if args.dry_run:
            return plan(f"GAN {gcfg.steps} steps on {len(ids)} utterances and {len(text)} sentences -> {args.out}")
        speech = _select(feats, vads, dims, speech_only=True)
        codes = None
        if gcfg.delta_ss:
            if args.codes:
                codes = _codes_for(ids, args.codes, [len(s) for s in speech], "auxiliary codes")
            else:
                cb = kmeans.fit_kmeans(np.concatenate(speech), gcfg.aux_codes, seed=cfg.seed)
                codes = [kmeans.assign(cb, s).codes for s in speech]
        g, _, _ = gan.train_gan(gcfg, speech, [t for _, t in text], codes, log_path=args.log)
        meta = {f"gan.{k}": v for k, v in config.flatten(gcfg).items()}
        meta["gan.in_dim"] = str(speech[0].shape[1])
        Checkpoint(g.state_dict(), meta, gcfg.steps).save(args.out)
        out = [Path(args.out), Path(str(args.out) + ".cfg")]
        return out + ([Path(args.log)] if args.log else [])
    # extract
    ckpt = Checkpoint.load(_need(args.generator, "generator checkpoint"))
    ids, feats, _ = read_features(args.features)
    if args.dry_run:
        return plan(f"extract pseudo labels for {len(ids)} utterances -> {args.out}")
    saved = config.apply_flat(gan.GanConfig(), {k[4:]: v for k, v in ckpt.config.items()
                                                if k.startswith("gan.") and k != "gan.in_dim"})
    in_dim = int(ckpt.config["gan.in_dim"])
    g, _ = gan.build(saved, in_dim)
    g.load_state_dict(ckpt.params)
    labels = gan.extract_pseudo_labels(g, [f[:, :in_dim] for f in feats])
    fio.write_codes(args.out, dict(zip(ids, labels)))
    return [Path(args.out)]


def cmd_pretrain(args, cfg):
    ids, feats, _ = read_features(args.features)
    pcfg = replace(cfg.pretrain, seed=cfg.seed, vocab_top=cfg.kmeans_k, vocab_k=cfg.gan.vocab)
    if not args.gan_codes:
        pcfg = replace(pcfg, layer_k=0)
    enc_cfg = replace(cfg.encoder, input_dim=feats[0].shape[1])
    if args.dry_run:
        streams = "k-means at top" + (f" + GAN labels at layer {pcfg.layer_k}" if pcfg.layer_k else "")
        return plan(f"pretrain {pcfg.steps} steps ({streams}) on {len(ids)} utterances -> {args.out}")
    lengths = [len(f) for f in feats]
    top = _codes_for(ids, args.kmeans_codes, lengths, "k-means codes")
    gk = _codes_for(ids, args.gan_codes, lengths, "GAN labels") if args.gan_codes else None
    pretrain(pcfg, enc_cfg, feats, top, gk, out_path=args.out, log_path=args.log)
    return [Path(args.out), Path(str(args.out) + ".cfg")] + ([Path(args.log)] if args.log else [])


def _labeled(args, cfg, vocab):
    ids, feats, _ = read_features(args.features)
    rows = fio.read_tsv(_need(args.manifest, "labeled manifest"), 3)
    phones = phone_vocab(cfg)
    by_id = dict(zip(ids, feats))
    out = []
    for uid, _, transcript in rows:
        if uid not in by_id:
            raise CliError("missing-input", f"no features for labeled utterance {uid}")
        if vocab.joiner == " ":
            tgt = [i for i in (phones.index(s) for s in transcript.split()) if i != 0]
        else:
            tgt = vocab.encode(transcript)
        out.append((uid, by_id[uid], tgt))
    return out


def cmd_finetune(args, cfg):
    vocab = ctc.CtcVocab.phonemes(phone_vocab(cfg)) if args.vocab == "phonemes" else ctc.CtcVocab.chars()
    data = _labeled(args, cfg, vocab)
    fcfg = replace(cfg.finetune, seed=cfg.seed)
    if args.dry_run:
        return plan(f"fine-tune {fcfg.steps} steps on {len(data)} labeled utterances -> {args.out}")
    if args.checkpoint:
        encoder = load_encoder(Checkpoint.load(_need(args.checkpoint, "checkpoint")))
        enc_flat = Checkpoint.load(args.checkpoint).section("encoder.")
    else:
        enc_cfg = replace(cfg.encoder, input_dim=data[0][1].shape[1])
        encoder = Encoder(enc_cfg, seed=cfg.seed)
        enc_flat = config.flatten(enc_cfg)
    try:
        model, _ = ctc.finetune(encoder, [(f, t) for _, f, t in data], vocab, fcfg, log_path=args.log)
    except ValueError as err:
        raise CliError("vocab", str(err)) from None
    meta = {f"encoder.{k}": v for k, v in enc_flat.items()}
    meta.update(vocab.to_flat())
    meta.update(ctc.finetune_config_flat(fcfg))
    Checkpoint(model.state_dict(), meta, fcfg.steps).save(args.out)
    return [Path(args.out), Path(str(args.out) + ".cfg")] + ([Path(args.log)] if args.log else [])


def load_ctc_model(path):
    ckpt = Checkpoint.load(_need(path, "fine-tuned checkpoint"))
    if "vocab.symbols" not in ckpt.config:
        raise CliError("vocab", f"{path} has no output vocabulary; is it a fine-tuned checkpoint?")
    vocab = ctc.CtcVocab.from_flat(ckpt.config)
    enc = Encoder(ckpt.encoder_config())
    model = ctc.CtcModel(enc, len(vocab))
    try:
        model.load_state_dict(ckpt.params)
    except (KeyError, ValueError) as err:
        raise CliError("vocab", f"{path}: {err}") from None
    return model, vocab


def cmd_decode(args, cfg):
    model, vocab = load_ctc_model(args.checkpoint)
    ids, feats, _ = read_features(args.features)
    if args.dry_run:
        return plan(f"decode {len(ids)} utterances (beam {args.beam}) -> {args.out}")
    hyps = ctc.decode(model, feats, beam_width=args.beam)
    fio.write_tsv(args.out, [(uid, vocab.decode(h)) for uid, h in zip(ids, hyps)])
    return [Path(args.out)]


def _read_hyps(path):
    out = {}
    for line in _need(path, "transcript file").read_text().splitlines():
        if line.strip():
            uid, _, text = line.partition("\t")
            out[uid] = text
    return out


def cmd_score(args, cfg):
    hyp, ref = _read_hyps(args.hyp), _read_hyps(args.ref)
    missing = [u for u in ref if u not in hyp]
    if missing:
        raise CliError("missing-input", f"no hypothesis for {len(missing)} utterance(s), e.g. {missing[0]}")
    if args.dry_run:
        return plan(f"score {len(ref)} utterances at {args.level} level")
    rate = ctc.corpus_error_rate([hyp[u] for u in ref], [ref[u] for u in ref], args.level)
    if args.tsv:
        print("utt_id\terror_rate")
        for u in ref:
            print(f"{u}\t{ctc.error_rate(hyp[u], ref[u], args.level):.4f}")
        print(f"TOTAL\t{rate:.4f}")
    else:
        print(f"{rate:.4f}")
    return []


def cmd_ablate(args, cfg):
    out = Path(args.out)
    if args.axis == "layer-k":
        ks = [int(k) for k in args.values.split(",")] if args.values else [2, 3, 4, 5]
        if args.dry_run:
            return plan(f"layer-k sweep over {ks} -> {out}")
        rows = experiment.ablate_layer_k(cfg, ks, seed=cfg.seed)
        fio.write_tsv(out, [("k", "per")] + [(k, f"{p:.4f}") for k, p in rows])
    else:
        ratios = args.values.split(",") if args.values else ["1:0.25", "1:0.5", "1:1"]
        try:
            for r in ratios:
                experiment.parse_ratio(r)
            if args.dry_run:
                experiment.check_ratios(cfg, ratios)
                return plan(f"text-ratio sweep over {ratios} -> {out}")
            rows = experiment.ablate_text_ratio(cfg, ratios, seed=cfg.seed)
        except ValueError as err:
            raise CliError("ablation", str(err)) from None
        fio.write_tsv(out, [("ratio", "gan_accuracy", "per")] + [(r, f"{a:.4f}", f"{p:.4f}") for r, a, p in rows])
    return [out]


def plan(text):
    print(f"plan: {text}")
    return None


# ------------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="thubert", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--dry-run", action="store_true", help="validate inputs and print the plan without writing")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate a synthetic speech/text corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-utts", type=int, help="total utterances (half speech, half text)")

    s = sub.add_parser("features", help="MFCC features at 20 ms with VAD bits")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cmvn", help="reuse normalisation statistics from a previous run")

    s = sub.add_parser("kmeans", help="k-means codebooks")
    s.add_argument("action", choices=["fit", "assign", "recluster"])
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--codebook")
    s.add_argument("--checkpoint")
    s.add_argument("--layer", type=int, default=6)
    s.add_argument("--dims", type=int, default=0, help="use only the leading DIMS feature columns")
    s.add_argument("--speech-only", action="store_true", help="drop frames outside VAD segments")

    s = sub.add_parser("gan", help="adversarial phoneme tokenizer")
    s.add_argument("action", choices=["train", "extract"])
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--text")
    s.add_argument("--codes", help="auxiliary k-means codes over VAD frames")
    s.add_argument("--generator")
    s.add_argument("--log")

    s = sub.add_parser("pretrain", help="masked prediction pre-training")
    s.add_argument("--features", required=True)
    s.add_argument("--kmeans-codes", required=True)
    s.add_argument("--gan-codes", help="omit to train on k-means codes only")
    s.add_argument("--out", required=True)
    s.add_argument("--log")

    s = sub.add_parser("finetune", help="CTC fine-tuning")
    s.add_argument("--features", required=True)
    s.add_argument("--manifest", required=True, help="labeled manifest: utt_id, wav_path, transcript")
    s.add_argument("--checkpoint", help="pre-trained checkpoint; random init when omitted")
    s.add_argument("--vocab", choices=["phonemes", "chars"], default="phonemes")
    s.add_argument("--out", required=True)
    s.add_argument("--log")

    s = sub.add_parser("decode", help="CTC decoding")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--beam", type=int, default=1)

    s = sub.add_parser("score", help="word/char error rate")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--level", choices=["word", "char"], default="word")
    s.add_argument("--tsv", action="store_true", help="per-utterance table for external plotting")

    s = sub.add_parser("ablate", help="ablation sweeps on synthetic data")
    s.add_argument("axis", choices=["layer-k", "text-ratio"])
    s.add_argument("--values", help="comma list: layers (e.g. 2,3,4,5) or speech:text ratios (e.g. 1:1,1:0.5)")
    s.add_argument("--out", required=True)
    return p


COMMANDS = {
    "synth-data": cmd_synth_data,
    "features": cmd_features,
    "kmeans": cmd_kmeans,
    "gan": cmd_gan,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "decode": cmd_decode,
    "score": cmd_score,
    "ablate": cmd_ablate,
}


def _thread_limit():
    raw = os.environ.get("THBT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError("config", f"THBT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError("config", "THBT_THREADS must be >= 1")
    return n


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        cfg = load_run_config(args)
        with threadpool_limits(limits=_thread_limit()):
            if args.dry_run:
                print("\n".join(f"{k}={v}" for k, v in config.flatten(cfg).items()))
            produced = COMMANDS[args.command](args, cfg)
        if produced:
            write_manifest(args.out, produced)
    except CliError as err:
        print(json.dumps({"error": err.kind, "command": args.command, "message": str(err)}), file=sys.stderr)
        return 2
    except (ValueError, OSError, fio.FormatError, audio.AudioFormatError) as err:
        print(json.dumps({"error": type(err).__name__, "command": args.command, "message": str(err)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
