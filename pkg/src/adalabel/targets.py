"""Adaptive soft-target construction and the paired training losses.

At every position the hard one-hot target is replaced by a mixture
``eps * onehot(y) + (1 - eps) * v``:

* ``v`` comes from the auxiliary decoder's logits: the target logit is
  masked to -inf, the remaining logits are rank-truncated (only ranks
  trunc_low..trunc_high survive, descending), divided by a temperature and
  exp-normalized. The head truncation deliberately drops the strongest
  non-target candidates so probability mass lands on less obvious words.
* ``eps`` adapts to the model's own confidence: it is lower-bounded both by
  the running prediction maximum and by a margin floor derived from
  ``max(v)``, and an acceleration factor (squared ratio of target
  probability to the maximum) keeps under-trained target words supervised
  near full strength.

Everything here is computed on detached arrays: no gradient flows through
``eps``, ``v`` or the mixed target. The auxiliary decoder learns only from
its own hard-target loss.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS_MODES = ("adaptive", "fixed", "no_alpha")
V_MODES = ("aux", "uniform", "random", "orig")
ABLATION_MODES = ("fixed_epsilon", "no_alpha", "uniform_v", "random_v", "orig_v")


@dataclass(frozen=True)
class AdaLabelConfig:
    eta: float = 0.2
    trunc_low: int = 2
    trunc_high: int = 500
    temperature: float = 1.0
    eps_mode: str = "adaptive"
    eps_value: float | None = None
    v_mode: str = "aux"
    fixed_eps_candidates: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not (1 <= self.trunc_low <= self.trunc_high):
            raise ValueError("need 1 <= trunc_low <= trunc_high")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.eps_mode not in EPS_MODES:
            raise ValueError(f"eps_mode must be one of {EPS_MODES}")
        if self.v_mode not in V_MODES:
            raise ValueError(f"v_mode must be one of {V_MODES}")
        if self.eps_mode == "fixed":
            if self.eps_value is None or not (0.0 < self.eps_value <= 1.0):
                raise ValueError("fixed eps_mode needs eps_value in (0, 1]")


@dataclass(frozen=True)
class AdaptionFactors:
    """Per-position confidence record: prediction max, acceleration factor,
    margin floor and the resulting target probability."""

    p_max: float
    alpha: float
    lam: float
    epsilon: float


@dataclass(frozen=True)
class AdaptiveTarget:
    distribution: np.ndarray
    target_idx: int


@dataclass(frozen=True)
class AdaLabelStep:
    dialogue_loss: float
    aux_loss: float
    factors: AdaptionFactors
    q_prime: np.ndarray


# ---------------------------------------------------------------------------
# auxiliary distribution v
# ---------------------------------------------------------------------------


def batch_auxiliary_distribution(aux_logits, targets, cfg, head_rank=None):
    """Vectorized v over rows: (N, V) logits, (N,) target ids -> (N, V).

    ``head_rank`` overrides the low truncation rank (1 keeps the head, used
    by the tail-only ablation).
    """
    aux_logits = np.asarray(aux_logits, dtype=np.float64)
    targets = np.asarray(targets)
    n_rows, vocab = aux_logits.shape
    lo = cfg.trunc_low if head_rank is None else head_rank
    hi = min(cfg.trunc_high, vocab - 1)
    if lo > vocab - 1 or lo > hi:
        raise ValueError("empty support: truncation keeps no non-target logits")

    rows = np.arange(n_rows)
    masked = aux_logits.copy()
    masked[rows, targets] = -np.inf
    # stable sort on the negated values: descending by logit, ties by token id
    order = np.argsort(-masked, axis=-1, kind="stable")
    kept_cols = order[:, lo - 1 : hi]
    kept_vals = np.take_along_axis(masked, kept_cols, axis=-1) / cfg.temperature
    kept_vals -= kept_vals.max(axis=-1, keepdims=True)
    weights = np.exp(kept_vals)
    weights /= weights.sum(axis=-1, keepdims=True)
    v = np.zeros_like(aux_logits)
    np.put_along_axis(v, kept_cols, weights, axis=-1)
    return v


def build_auxiliary_distribution(aux_logits, target_idx, cfg):
    """Single-row v: mask the target, keep ranks trunc_low..trunc_high,
    temperature-scale and normalize."""
    aux_logits = np.asarray(aux_logits, dtype=np.float64)
    if aux_logits.ndim != 1:
        raise ValueError("expected a single logit row")
    if not np.isfinite(aux_logits).all():
        raise ValueError("auxiliary logits must be finite")
    return batch_auxiliary_distribution(aux_logits[None, :], np.array([target_idx]), cfg)[0]


# ---------------------------------------------------------------------------
# adaption factor eps
# ---------------------------------------------------------------------------


def batch_adaption_factors(p, targets, v, eta):
    """Vectorized confidence factors; returns (p_max, alpha, lam, epsilon)."""
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    targets = np.asarray(targets)
    rows = np.arange(p.shape[0])
    p_max = p.max(axis=-1)
    p_target = p[rows, targets]
    alpha = np.square(p_target / p_max)
    max_v = v.max(axis=-1)
    lam = max_v / (1.0 + max_v) + eta
    floor = np.maximum(p_max, lam)
    epsilon = 1.0 - alpha * (1.0 - floor)
    return p_max, alpha, lam, epsilon


def adaption_factor(p, target_idx, v, eta):
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v[target_idx] != 0.0:
        raise ValueError("v must assign zero probability to the target")
    p_max, alpha, lam, eps = batch_adaption_factors(p[None, :], np.array([target_idx]), v[None, :], eta)
    return AdaptionFactors(p_max=float(p_max[0]), alpha=float(alpha[0]),
                           lam=float(lam[0]), epsilon=float(eps[0]))


def mix_targets(target_idx, v, epsilon):
    """q' = epsilon * onehot(target) + (1 - epsilon) * v."""
    v = np.asarray(v, dtype=np.float64)
    if not (0.0 < epsilon <= 1.0):
        raise ValueError("epsilon must lie in (0, 1]")
    if v[target_idx] != 0.0:
        raise ValueError("v must assign zero probability to the target")
    dist = (1.0 - epsilon) * v
    dist[target_idx] = epsilon
    return AdaptiveTarget(distribution=dist, target_idx=int(target_idx))


def batch_mix(targets, v, epsilon):
    rows = np.arange(v.shape[0])
    dist = (1.0 - epsilon)[:, None] * v
    dist[rows, targets] = epsilon
    return dist


# ---------------------------------------------------------------------------
# full per-position step and ablations
# ---------------------------------------------------------------------------


def adalabel_step(model_logits, aux_logits, target_idx, cfg, pad_id=None):
    """Losses and target for one position; returns None for PAD targets.

    Reference (single-row, detached) form of what the batched training path
    computes: dialogue loss is soft cross entropy against q', auxiliary loss
    is plain NLL of the target under the auxiliary logits.
    """
    if pad_id is not None and target_idx == pad_id:
        return None
    model_logits = np.asarray(model_logits, dtype=np.float64)
    aux_logits = np.asarray(aux_logits, dtype=np.float64)
    if model_logits.shape != aux_logits.shape:
        raise ValueError("logit rows must cover the same vocabulary")
    v = build_auxiliary_distribution(aux_logits, target_idx, cfg)
    p = ad.softmax_np(model_logits)
    factors = adaption_factor(p, target_idx, v, cfg.eta)
    target = mix_targets(target_idx, v, factors.epsilon)
    log_p = model_logits - _log_sum_exp(model_logits)
    dialogue_loss = -np.where(target.distribution > 0, target.distribution * log_p, 0.0).sum()
    log_aux = aux_logits - _log_sum_exp(aux_logits)
    aux_loss = -log_aux[target_idx]
    return AdaLabelStep(dialogue_loss=float(dialogue_loss), aux_loss=float(aux_loss),
                        factors=factors, q_prime=target.distribution)


def _log_sum_exp(x):
    m = x.max()
    return m + np.log(np.exp(x - m).sum())


def ablation_targets(mode, model_logits, aux_logits, target_idx, cfg,
                     fixed_value=None, rng=None):
    """q' under one named ablation of the full method.

    fixed_epsilon(value): eps pinned, v still from the auxiliary logits.
    no_alpha: eps = max(p_max, lam) without the acceleration factor.
    uniform_v / random_v: v replaced, eps still adaptive.
    orig_v: head ranks kept, only the tail truncated.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    overrides = {}
    if mode == "fixed_epsilon":
        if fixed_value is None:
            raise ValueError("fixed_epsilon needs a value")
        overrides = dict(eps_mode="fixed", eps_value=float(fixed_value))
    elif mode == "no_alpha":
        overrides = dict(eps_mode="no_alpha")
    elif mode == "uniform_v":
        overrides = dict(v_mode="uniform")
    elif mode == "random_v":
        overrides = dict(v_mode="random")
    elif mode == "orig_v":
        overrides = dict(v_mode="orig")
    ablated = replace(cfg, **overrides)
    model_logits = np.asarray(model_logits, dtype=np.float64)
    aux_logits = np.asarray(aux_logits, dtype=np.float64)
    q, _, _ = build_training_targets(model_logits[None, :], aux_logits[None, :],
                                     np.array([target_idx]), ablated, rng=rng)
    return q[0]


def build_training_targets(model_logits, aux_logits, targets, cfg, rng=None):
    """Vectorized q' for (N, V) logit blocks; returns (q', epsilon, p_max).

    All inputs are plain arrays (already detached); the result is used as a
    constant in the dialogue loss.
    """
    model_logits = np.asarray(model_logits)
    aux_logits = np.asarray(aux_logits)
    targets = np.asarray(targets)
    n_rows, vocab = model_logits.shape

    if cfg.v_mode == "aux":
        v = batch_auxiliary_distribution(aux_logits, targets, cfg)
    elif cfg.v_mode == "orig":
        v = batch_auxiliary_distribution(aux_logits, targets, cfg, head_rank=1)
    elif cfg.v_mode == "uniform":
        v = np.full((n_rows, vocab), 1.0 / (vocab - 1))
        v[np.arange(n_rows), targets] = 0.0
    elif cfg.v_mode == "random":
        if rng is None:
            raise ValueError("random v needs an rng")
        v = rng.random((n_rows, vocab))
        v[np.arange(n_rows), targets] = 0.0
        v /= v.sum(axis=-1, keepdims=True)
    else:
        raise ValueError(f"unknown v_mode {cfg.v_mode!r}")

    p = ad.softmax_np(model_logits.astype(np.float64))
    p_max, alpha, lam, epsilon = batch_adaption_factors(p, targets, v, cfg.eta)
    if cfg.eps_mode == "fixed":
        epsilon = np.full(n_rows, float(cfg.eps_value))
    elif cfg.eps_mode == "no_alpha":
        epsilon = np.maximum(p_max, lam)
    q = batch_mix(targets, v, epsilon)
    return q, epsilon, p_max


# ---------------------------------------------------------------------------
# traced loss assembly
# ---------------------------------------------------------------------------


def masked_soft_ce(logits, q, mask):
    """Sum over unmasked positions of -sum(q * log softmax(logits))."""
    per_pos = ad.soft_cross_entropy(ad.log_softmax(logits), np.asarray(q, dtype=logits.dtype))
    return ad.tsum(ad.mul(per_pos, Tensor(mask.astype(logits.dtype))))


def masked_nll(logits, targets, mask):
    """Sum over unmasked positions of -log softmax(logits)[target]."""
    picked = ad.gather_last(ad.log_softmax(logits), targets)
    per_pos = ad.mul_const(picked, -1.0)
    return ad.tsum(ad.mul(per_pos, Tensor(mask.astype(logits.dtype))))


def adalabel_loss_sums(model_logits, aux_logits, dec_out, loss_mask, cfg, rng=None):
    """Batched training losses for the adaptive objective.

    ``model_logits`` / ``aux_logits`` are traced (B, L, V) tensors; targets
    are built on their detached data and treated as constants. Returns the
    two summed losses plus masked sums of epsilon and p_max for logging.
    """
    batch, length, vocab = model_logits.shape
    flat_targets = np.asarray(dec_out).reshape(-1)
    q, epsilon, p_max = build_training_targets(
        model_logits.data.reshape(-1, vocab), aux_logits.data.reshape(-1, vocab),
        flat_targets, cfg, rng=rng)
    q = q.reshape(batch, length, vocab)
    dial_sum = masked_soft_ce(model_logits, q, loss_mask)
    aux_sum = masked_nll(aux_logits, dec_out, loss_mask)
    flat_mask = loss_mask.reshape(-1)
    stats = {
        "eps_sum": float((epsilon * flat_mask).sum()),
        "pmax_sum": float((p_max * flat_mask).sum()),
    }
    return dial_sum, aux_sum, stats
