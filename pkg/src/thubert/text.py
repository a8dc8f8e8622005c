"""Lexicon-based phonemisation of unpaired text."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

# 39 stress-free ARPAbet phones, plus silence and spoken-noise.
ARPABET = (
    "AA AE AH AO AW AY B CH D DH EH ER EY F G HH IH IY JH K L M N NG OW OY "
    "P R S SH T TH UH UW V W Y Z ZH"
).split()
SIL = "SIL"


class LexiconError(ValueError):
    pass


class OutOfLexicon(KeyError):
    pass


@dataclass
class PhonemeVocab:
    symbols: list
    sil_index: int = 0

    def __post_init__(self):
        self.symbols = list(self.symbols)
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("phoneme symbols must be unique")
        if not 0 <= self.sil_index < len(self.symbols):
            raise ValueError(f"sil_index {self.sil_index} out of range")
        self._index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def default(cls):
        return cls([SIL] + ARPABET + ["SPN"], sil_index=0)

    @classmethod
    def synthetic(cls, n_phones=8):
        return cls([SIL] + [f"P{i}" for i in range(1, n_phones + 1)], sil_index=0)

    def __len__(self):
        return len(self.symbols)

    def index(self, symbol):
        return self._index[symbol]

    def __contains__(self, symbol):
        return symbol in self._index


def load_lexicon(path, vocab: PhonemeVocab):
    """Parse ``word PH1 PH2 ...`` lines into ``{word: [indices]}``."""
    lex = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise LexiconError(f"{path}:{lineno}: expected a word followed by phonemes")
        word, phones = parts[0].lower(), parts[1:]
        bad = [p for p in phones if p not in vocab]
        if bad:
            raise LexiconError(f"{path}:{lineno}: unknown phoneme symbol {bad[0]!r}")
        if word in lex:
            log.warning("%s:%d: duplicate entry for %r ignored", path, lineno, word)
            continue
        lex[word] = [vocab.index(p) for p in phones]
    return lex


_PUNCT = re.compile(r"[^a-z' ]+")


def normalize_sentence(sentence):
    return " ".join(_PUNCT.sub(" ", sentence.lower()).split())


def phonemize(sentence, lex, vocab: PhonemeVocab, p_sil=0.25, rng=None):
    """Concatenate lexicon entries, silence at both ends and between words w.p. ``p_sil``.

    Raises :class:`OutOfLexicon` for unknown words.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    words = normalize_sentence(sentence).split()
    sil = vocab.sil_index
    out = [sil]
    for i, word in enumerate(words):
        if word not in lex:
            raise OutOfLexicon(word)
        if i > 0 and rng.random() < p_sil:
            out.append(sil)
        out.extend(lex[word])
    if words:
        out.append(sil)
    return out


def phonemize_corpus(sentences, lex, vocab, p_sil=0.25, seed=0):
    """Phonemise every sentence; returns ``(sequences, skipped_count)``."""
    rng = np.random.default_rng(seed)
    seqs, skipped = [], 0
    for s in sentences:
        try:
            seqs.append(phonemize(s, lex, vocab, p_sil, rng))
        except OutOfLexicon as err:
            log.debug("skipping utterance with OOV word %s", err)
            skipped += 1
    return seqs, skipped


def phoneme_histogram(corpus, vocab_size):
    counts = np.zeros(vocab_size)
    for seq in corpus:
        seq = np.asarray(seq, dtype=np.int64)
        if len(seq) and (seq.min() < 0 or seq.max() >= vocab_size):
            raise ValueError(f"phoneme index out of range for vocab_size {vocab_size}")
        counts += np.bincount(np.asarray(seq, dtype=np.int64), minlength=vocab_size)[:vocab_size]
    total = counts.sum()
    if total == 0:
        raise ValueError("phoneme_histogram: empty corpus")
    return counts / total
