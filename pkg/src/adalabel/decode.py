"""Response generation: greedy, length-normalized beam search, top-k sampling.

Decoders talk to a scorer object exposing ``start(context_ids)`` and
``step_logits(state, prefix_ids)``; the model-backed scorer masks reserved
ids (PAD/BOS/UNK/SEP) so only real words and EOS can ever be emitted. Ties
break toward the lowest token id everywhere, making every scheme
deterministic given its seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import BOS, EOS, PAD, SEP, UNK

SCHEMES = ("greedy", "beam", "topk")


@dataclass(frozen=True)
class DecodeConfig:
    scheme: str = "greedy"
    beam_width: int = 5
    topk: int = 10
    max_len: int = 100
    seed: int = 0
    length_normalize: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.beam_width < 1 or self.topk < 1 or self.max_len < 1:
            raise ValueError("beam_width, topk and max_len must be at least 1")


class ModelScorer:
    """Adapter running the dialogue decoder over a growing prefix."""

    def __init__(self, model, forbidden=(PAD, BOS, UNK, SEP)):
        self.model = model
        self.forbidden = tuple(forbidden)

    def start(self, context_ids):
        src = np.asarray([context_ids], dtype=np.int64)
        pad = np.zeros_like(src, dtype=bool)
        with ad.no_grad():
            return self.model.encode(src, pad)

    def step_logits(self, memory, prefix_ids):
        dec_in = np.asarray([[BOS] + list(prefix_ids)], dtype=np.int64)
        pad = np.zeros_like(dec_in, dtype=bool)
        with ad.no_grad():
            logits = self.model.dialogue_logits(dec_in, pad, memory).data[0, -1].copy()
        logits[list(self.forbidden)] = -np.inf
        return logits


def scorer_from_checkpoint(checkpoint):
    return ModelScorer(checkpoint.build_model())


def _log_probs(logits):
    m = logits.max()
    shifted = logits - m
    with np.errstate(divide="ignore"):
        return shifted - np.log(np.exp(shifted).sum())


def greedy_decode(scorer, context_ids, max_len=100):
    """Argmax decoding; stops at EOS or max_len, result has no BOS/EOS."""
    state = scorer.start(context_ids)
    out = []
    for _ in range(max_len):
        logits = scorer.step_logits(state, out)
        token = int(np.argmax(logits))
        if token == EOS:
            break
        out.append(token)
    return out


def beam_decode(scorer, context_ids, width, max_len=100, length_normalize=True):
    """Beam search; score = sum of log-probs, normalized by emitted length
    (EOS included) when ``length_normalize``. Width 1 matches greedy exactly."""
    state = scorer.start(context_ids)
    live = [((), 0.0)]
    done = []

    def final_score(tokens_with_eos_len, logp):
        if not length_normalize:
            return logp
        return logp / max(tokens_with_eos_len, 1)

    for _ in range(max_len):
        candidates = []
        for beam_idx, (tokens, logp) in enumerate(live):
            lp = _log_probs(scorer.step_logits(state, list(tokens)))
            order = np.argsort(-lp, kind="stable")[: width]
            for token in order:
                token = int(token)
                if not np.isfinite(lp[token]):
                    continue
                candidates.append((tokens, logp + float(lp[token]), token, beam_idx))
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[1], c[2], c[3]))
        next_live = []
        for tokens, score, token, _ in candidates[: width]:
            if token == EOS:
                done.append((tokens, score, len(tokens) + 1))
            else:
                next_live.append((tokens + (token,), score))
        live = next_live
        if not live or len(done) >= width:
            break
    for tokens, score in live:
        done.append((tokens, score, max(len(tokens), 1)))
    best = max(enumerate(done), key=lambda kv: (final_score(kv[1][2], kv[1][1]), -kv[0]))
    return list(best[1][0])


def topk_decode(scorer, context_ids, k, seed=0, max_len=100):
    """Sample each step from the renormalized k most probable tokens."""
    state = scorer.start(context_ids)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(np.random.SeedSequence([int(seed)]))
    out = []
    for _ in range(max_len):
        logits = scorer.step_logits(state, out)
        lp = _log_probs(logits)
        order = np.argsort(-lp, kind="stable")[:k]
        probs = np.exp(lp[order])
        probs = probs / probs.sum()
        token = int(order[rng.choice(len(order), p=probs)])
        if token == EOS:
            break
        out.append(token)
    return out


def decode_response(scorer, context_ids, cfg, rng=None):
    if cfg.scheme == "greedy":
        return greedy_decode(scorer, context_ids, cfg.max_len)
    if cfg.scheme == "beam":
        return beam_decode(scorer, context_ids, cfg.beam_width, cfg.max_len, cfg.length_normalize)
    if cfg.scheme == "topk":
        return topk_decode(scorer, context_ids, cfg.topk, rng if rng is not None else cfg.seed, cfg.max_len)
    raise ValueError(f"unknown scheme {cfg.scheme!r}")


def decode_corpus(model, vocab, pairs, cfg, threads=1):
    """Generate one hypothesis per pair; parallel contexts share the model."""
    scorer = ModelScorer(model)
    contexts = [vocab.encode(p.context) for p in pairs]

    def one(idx):
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), idx]))
        return decode_response(scorer, contexts[idx], cfg, rng=rng)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            hyp_ids = list(pool.map(one, range(len(pairs))))
    else:
        hyp_ids = [one(i) for i in range(len(pairs))]
    return [vocab.decode(ids) for ids in hyp_ids]


# ---------------------------------------------------------------------------
# generation files: context<TAB>reference<TAB>hypothesis, tokens space-joined
# ---------------------------------------------------------------------------


class MalformedGenerationError(ValueError):
    def __init__(self, path, lineno):
        super().__init__(f"{path}:{lineno}: expected context<TAB>reference<TAB>hypothesis")
        self.lineno = lineno


def write_generations(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for context, reference, hypothesis in rows:
            fh.write("\t".join(" ".join(t) for t in (context, reference, hypothesis)) + "\n")


def read_generations(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise MalformedGenerationError(path, lineno)
            rows.append(tuple(p.split() for p in parts))
    return rows
