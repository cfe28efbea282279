"""Corpus ingestion, vocabulary construction and batching.

Corpus files are UTF-8 text, one ``context<TAB>response`` pair per line,
with multi-turn context turns joined by the literal `` __sep__ ``. Tokens
come from lowercased whitespace splitting; pairs whose context or response
exceeds 100 tokens are dropped outright rather than truncated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<sep>")
SEP_SURFACE = "__sep__"
MAX_TOKENS = 100


@dataclass
class DialoguePair:
    context: list
    response: list


@dataclass
class Vocabulary:
    """Bidirectional token/id map with reserved ids 0..4 and corpus counts.

    ``freq`` records training-corpus counts for every token seen while
    building, including tokens that fell below the frequency or size cutoff
    (the metrics layer needs true counts, not just kept-token counts).
    """

    id_to_token: list
    token_to_id: dict
    freq: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.id_to_token)

    def encode_token(self, token):
        if token == SEP_SURFACE:
            return SEP
        return self.token_to_id.get(token, UNK)

    def encode(self, tokens):
        return [self.encode_token(t) for t in tokens]

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        """One non-reserved token per line; line number = id - reserved count."""
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token[len(RESERVED_TOKENS):]:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path):
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line:
                    tokens.append(line)
        return cls.from_tokens(tokens)

    @classmethod
    def from_tokens(cls, tokens, freq=None):
        id_to_token = list(RESERVED_TOKENS) + list(tokens)
        token_to_id = {t: i for i, t in enumerate(id_to_token)}
        if len(token_to_id) != len(id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        return cls(id_to_token=id_to_token, token_to_id=token_to_id, freq=dict(freq or {}))


def tokenize(text):
    return text.lower().split()


def load_corpus(path, max_tokens=MAX_TOKENS):
    """Parse a corpus file into DialoguePairs, dropping over-long pairs.

    Lines without exactly one TAB-separated context and response are
    rejected with a warning; drop counts are reported through the module
    logger. An empty result is an error.
    """
    pairs = []
    dropped_long = 0
    rejected = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                log.warning("%s:%d: rejected line without context<TAB>response", path, lineno)
                rejected += 1
                continue
            context = tokenize(parts[0])
            response = tokenize(parts[1])
            if len(context) > max_tokens or len(response) > max_tokens:
                dropped_long += 1
                continue
            pairs.append(DialoguePair(context=context, response=response))
    if dropped_long or rejected:
        log.info("%s: dropped %d over-%d-token pairs, rejected %d malformed lines",
                 path, dropped_long, max_tokens, rejected)
    if not pairs:
        raise ValueError(f"no usable pairs in {path}")
    return pairs


def build_vocab(pairs, min_freq=1, max_size=None):
    """Frequency-sorted vocabulary over context + response tokens.

    Tokens below ``min_freq`` or beyond ``max_size`` kept tokens map to UNK.
    Ties sort lexicographically so two builds of the same corpus agree.
    """
    if not pairs:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = {}
    for pair in pairs:
        for token in pair.context + pair.response:
            if token == SEP_SURFACE:
                continue
            counts[token] = counts.get(token, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, c in ranked if c >= min_freq]
    if max_size is not None:
        kept = kept[:max_size]
    return Vocabulary.from_tokens(kept, freq=counts)


@dataclass
class TokenBatch:
    """Padded id matrices: encoder inputs, BOS-shifted decoder inputs and
    EOS-terminated decoder outputs, with True-means-pad masks."""

    enc_in: np.ndarray
    enc_pad: np.ndarray
    dec_in: np.ndarray
    dec_out: np.ndarray
    dec_pad: np.ndarray

    @property
    def size(self):
        return self.enc_in.shape[0]

    @property
    def loss_mask(self):
        return (~self.dec_pad).astype(np.float32)

    @property
    def token_count(self):
        return int((~self.dec_pad).sum())


def encode_pair(pair, vocab):
    src = vocab.encode(pair.context)
    resp = vocab.encode(pair.response)
    return src, resp


def _pad_block(rows, pad_value=PAD):
    width = max(len(r) for r in rows)
    block = np.full((len(rows), width), pad_value, dtype=np.int64)
    mask = np.ones((len(rows), width), dtype=bool)
    for i, row in enumerate(rows):
        block[i, : len(row)] = row
        mask[i, : len(row)] = False
    return block, mask


def make_batches(pairs, vocab, batch_size, seed=0, shuffle=True):
    """Deterministically seeded batches; same seed, same order."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(len(pairs))
    if shuffle:
        entropy = list(seed) if isinstance(seed, (tuple, list)) else [seed]
        rng = np.random.default_rng(np.random.SeedSequence(entropy))
        order = rng.permutation(len(pairs))
    batches = []
    for start in range(0, len(pairs), batch_size):
        chunk = [pairs[i] for i in order[start : start + batch_size]]
        src_rows, dec_in_rows, dec_out_rows = [], [], []
        for pair in chunk:
            src, resp = encode_pair(pair, vocab)
            src_rows.append(src)
            dec_in_rows.append([BOS] + resp)
            dec_out_rows.append(resp + [EOS])
        enc_in, enc_pad = _pad_block(src_rows)
        dec_in, _ = _pad_block(dec_in_rows)
        dec_out, dec_pad = _pad_block(dec_out_rows)
        batches.append(TokenBatch(enc_in=enc_in, enc_pad=enc_pad,
                                  dec_in=dec_in, dec_out=dec_out, dec_pad=dec_pad))
    return batches
