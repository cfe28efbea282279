"""Baseline training targets and losses sharing the adaptive objective's
interface: plain cross entropy, label smoothing, focal loss, confidence
penalty.

Per-position reference forms work on plain probability vectors; the
``*_loss_sum`` functions are the traced batched counterparts used by the
training loop. PAD positions are excluded through the same 0/1 mask as the
adaptive objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .targets import masked_nll

FL_LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class BaselineConfig:
    ls_smoothing: float = 0.1
    fl_gamma: float = 2.0
    cp_weight: float = 0.05

    def __post_init__(self):
        if not (0.0 <= self.ls_smoothing < 1.0):
            raise ValueError("ls_smoothing must lie in [0, 1)")
        if self.fl_gamma < 0:
            raise ValueError("fl_gamma must be nonnegative")
        if self.cp_weight < 0:
            raise ValueError("cp_weight must be nonnegative")


def ls_target(target_idx, vocab_size, smoothing):
    """Label-smoothing target: uniform mass over the full vocabulary, the
    target also receiving the 1 - smoothing remainder."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be at least 2")
    if not (0.0 <= smoothing < 1.0):
        raise ValueError("smoothing must lie in [0, 1)")
    dist = np.full(vocab_size, smoothing / vocab_size)
    dist[target_idx] += 1.0 - smoothing
    return dist


def focal_loss(p, target_idx, gamma):
    """-(1 - p_t)^gamma * log(p_t); the log argument is floored at 1e-12."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    p_t = float(np.asarray(p)[target_idx])
    return -((1.0 - p_t) ** gamma) * np.log(max(p_t, FL_LOG_FLOOR))


def confidence_penalty_loss(p, target_idx, weight):
    """Cross entropy minus ``weight`` times the prediction entropy (nats)."""
    if weight < 0:
        raise ValueError("weight must be nonnegative")
    p = np.asarray(p, dtype=np.float64)
    ce = -np.log(max(float(p[target_idx]), FL_LOG_FLOOR))
    entropy = -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum()
    return ce - weight * entropy


# ---------------------------------------------------------------------------
# traced batched losses
# ---------------------------------------------------------------------------


def ce_loss_sum(logits, targets, mask):
    return masked_nll(logits, targets, mask)


def ls_loss_sum(logits, targets, mask, smoothing):
    # soft CE against the LS target folds to (1-s) * nll + (s/V) * sum(-log p)
    vocab = logits.shape[-1]
    log_p = ad.log_softmax(logits)
    nll = ad.mul_const(ad.gather_last(log_p, targets), -1.0)
    total = ad.mul_const(ad.tsum(log_p, axis=-1), -1.0)
    per_pos = ad.add(ad.mul_const(nll, 1.0 - smoothing), ad.mul_const(total, smoothing / vocab))
    return ad.tsum(ad.mul(per_pos, Tensor(np.asarray(mask, dtype=logits.dtype))))


def fl_loss_sum(logits, targets, mask, gamma):
    log_p = ad.log_softmax(logits)
    picked = ad.gather_last(log_p, targets)
    clamped = ad.maximum_const(picked, float(np.log(FL_LOG_FLOOR)))
    one_minus_pt = ad.add_const(ad.mul_const(ad.exp(picked), -1.0), 1.0)
    per_pos = ad.mul_const(ad.mul(ad.pow_const(one_minus_pt, gamma), clamped), -1.0)
    return ad.tsum(ad.mul(per_pos, Tensor(np.asarray(mask, dtype=logits.dtype))))


def cp_loss_sum(logits, targets, mask, weight):
    log_p = ad.log_softmax(logits)
    nll = ad.mul_const(ad.gather_last(log_p, targets), -1.0)
    entropy = ad.mul_const(ad.tsum(ad.mul(ad.exp(log_p), log_p), axis=-1), -1.0)
    per_pos = ad.add(nll, ad.mul_const(entropy, -weight))
    return ad.tsum(ad.mul(per_pos, Tensor(np.asarray(mask, dtype=logits.dtype))))


def baseline_loss_sum(objective, logits, targets, mask, cfg):
    """Dispatch to the named baseline; returns the summed traced loss."""
    if objective == "ce":
        return ce_loss_sum(logits, targets, mask)
    if objective == "ls":
        return ls_loss_sum(logits, targets, mask, cfg.ls_smoothing)
    if objective == "fl":
        return fl_loss_sum(logits, targets, mask, cfg.fl_gamma)
    if objective == "cp":
        return cp_loss_sum(logits, targets, mask, cfg.cp_weight)
    raise ValueError(f"unknown baseline objective {objective!r}")


def baseline_eps_equivalent(objective, vocab_size, cfg):
    """Probability the named objective's target assigns to the reference
    token, logged alongside the adaptive objective's mean epsilon."""
    if objective == "ls":
        return 1.0 - cfg.ls_smoothing + cfg.ls_smoothing / vocab_size
    return 1.0
