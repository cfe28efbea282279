"""Joint training of the dialogue model and the auxiliary decoder.

One optimizer step consumes ``grad_accum`` micro-batches: per-micro-batch
losses are summed over non-PAD tokens, gradients accumulate, and the sum is
divided by the group's total token count right before the Adam update, so an
accumulated step matches a single large mean-reduced batch.

The auxiliary decoder is trained under every objective (its hard-target loss
is always added with ``aux_weight``); only the adaptive objective also reads
its output when building targets. That keeps baseline and adaptive runs
architecturally identical, differing in the dialogue target alone.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import baselines as bl
from . import targets as tg
from .data import RESERVED_TOKENS, Vocabulary, make_batches
from .model import ModelConfig, TransformerModel

OBJECTIVES = ("ce", "ls", "fl", "cp", "adalabel", "ablation")

CHECKPOINT_MAGIC = b"ALCK"
CHECKPOINT_VERSION = 1
STEP_LOG_COLUMNS = ("step", "ppl", "acc", "aux_acc", "mean_eps", "mean_pmax")


class DivergenceError(RuntimeError):
    """Raised when a training loss goes non-finite; carries a diagnostic dump."""

    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "adalabel"
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-9
    batch_size: int = 64
    grad_accum: int = 2
    eval_every: int = 1000
    patience: int = 10
    max_steps: int = 10000
    seed: int = 0
    aux_weight: float = 1.0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        for name in ("lr", "adam_beta1", "adam_beta2", "adam_eps", "aux_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("batch_size", "grad_accum", "eval_every", "patience", "max_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-9):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, grad_scale=1.0):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad * grad_scale if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        return ({n: a.copy() for n, a in self.m.items()},
                {n: a.copy() for n, a in self.v.items()},
                self.t)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _log_softmax_np(logits):
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def evaluate_model(model, pairs, vocab, batch_size=64):
    """Teacher-forced perplexity and argmax accuracies on held-out pairs."""
    ce_sum = 0.0
    dial_hits = 0
    aux_hits = 0
    tokens = 0
    with ad.no_grad():
        for batch in make_batches(pairs, vocab, batch_size, shuffle=False):
            memory = model.encode(batch.enc_in, batch.enc_pad)
            dial = model.dialogue_logits(batch.dec_in, batch.dec_pad, memory).data
            aux = model.auxiliary_logits(batch.dec_in, batch.dec_pad, memory).data
            keep = ~batch.dec_pad
            log_p = _log_softmax_np(dial)
            picked = np.take_along_axis(log_p, batch.dec_out[..., None], axis=-1)[..., 0]
            ce_sum += float(-(picked * keep).sum())
            dial_hits += int(((dial.argmax(axis=-1) == batch.dec_out) & keep).sum())
            aux_hits += int(((aux.argmax(axis=-1) == batch.dec_out) & keep).sum())
            tokens += int(keep.sum())
    return {
        "perplexity": float(np.exp(ce_sum / tokens)),
        "token_accuracy": dial_hits / tokens,
        "aux_accuracy": aux_hits / tokens,
    }


def evaluate_held_out(checkpoint, pairs, batch_size=64):
    return evaluate_model(checkpoint.build_model(), pairs, checkpoint.vocab, batch_size)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    ada_cfg: tg.AdaLabelConfig
    baseline_cfg: bl.BaselineConfig
    vocab: Vocabulary
    params: dict
    opt_m: dict | None = None
    opt_v: dict | None = None
    adam_t: int = 0
    step: int = 0
    best: dict = field(default_factory=dict)

    def build_model(self):
        return TransformerModel.from_arrays(self.model_cfg, self.params)


def save_checkpoint(path, ck):
    names = sorted(ck.params)
    tensors = [(n, ck.params[n]) for n in names]
    if ck.opt_m is not None:
        tensors += [(f"opt.m.{n}", ck.opt_m[n]) for n in names]
        tensors += [(f"opt.v.{n}", ck.opt_v[n]) for n in names]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model": asdict(ck.model_cfg),
        "adalabel": asdict(ck.ada_cfg),
        "baseline": asdict(ck.baseline_cfg),
        "train_meta": {"step": ck.step, "adam_t": ck.adam_t, "best": ck.best},
        "vocab": {
            "tokens": ck.vocab.id_to_token[len(RESERVED_TOKENS):],
            "freq": ck.vocab.freq,
        },
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, header_len = struct.unpack("<IQ", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    model_cfg = ModelConfig(**header["model"])
    ada_raw = dict(header["adalabel"])
    ada_raw["fixed_eps_candidates"] = tuple(ada_raw.get("fixed_eps_candidates", ()))
    ada_cfg = tg.AdaLabelConfig(**ada_raw)
    baseline_cfg = bl.BaselineConfig(**header["baseline"])
    vocab = Vocabulary.from_tokens(header["vocab"]["tokens"],
                                   freq={k: int(v) for k, v in header["vocab"]["freq"].items()})
    params = {n: a for n, a in arrays.items() if not n.startswith("opt.")}
    opt_m = {n[len("opt.m."):]: a for n, a in arrays.items() if n.startswith("opt.m.")} or None
    opt_v = {n[len("opt.v."):]: a for n, a in arrays.items() if n.startswith("opt.v.")} or None
    meta = header["train_meta"]
    return Checkpoint(model_cfg=model_cfg, ada_cfg=ada_cfg, baseline_cfg=baseline_cfg,
                      vocab=vocab, params=params, opt_m=opt_m, opt_v=opt_v,
                      adam_t=meta["adam_t"], step=meta["step"], best=meta["best"])


def write_step_log(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(STEP_LOG_COLUMNS) + "\n")
        for row in rows:
            cells = [str(int(row["step"]))]
            cells += [f"{row[k]:.6f}" for k in STEP_LOG_COLUMNS[1:]]
            fh.write("\t".join(cells) + "\n")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_rows: list
    final_model: TransformerModel


def _micro_batch_losses(model, batch, train_cfg, ada_cfg, baseline_cfg, dropout_rng, vrand_rng):
    memory = model.encode(batch.enc_in, batch.enc_pad, train=True, rng=dropout_rng)
    dial_logits = model.dialogue_logits(batch.dec_in, batch.dec_pad, memory, train=True, rng=dropout_rng)
    aux_logits = model.auxiliary_logits(batch.dec_in, batch.dec_pad, memory, train=True, rng=dropout_rng)
    mask = batch.loss_mask
    if train_cfg.objective in ("adalabel", "ablation"):
        dial_sum, aux_sum, stats = tg.adalabel_loss_sums(
            dial_logits, aux_logits, batch.dec_out, mask, ada_cfg, rng=vrand_rng)
    else:
        dial_sum = bl.baseline_loss_sum(train_cfg.objective, dial_logits, batch.dec_out, mask, baseline_cfg)
        aux_sum = tg.masked_nll(aux_logits, batch.dec_out, mask)
        p_max = ad.softmax_np(dial_logits.data.astype(np.float64)).max(axis=-1)
        eps_eq = bl.baseline_eps_equivalent(train_cfg.objective, model.config.vocab_size, baseline_cfg)
        stats = {"eps_sum": eps_eq * batch.token_count,
                 "pmax_sum": float((p_max * mask).sum())}
    total = ad.add(dial_sum, ad.mul_const(aux_sum, train_cfg.aux_weight))
    return total, stats


def train(model_cfg, ada_cfg, train_cfg, train_pairs, valid_pairs, vocab,
          baseline_cfg=None, log_cb=None):
    """Run the full loop and return the best checkpoint plus the step log.

    Evaluates every ``eval_every`` optimizer steps; stops early when neither
    validation perplexity nor accuracy improves for ``patience`` consecutive
    evaluations, or at ``max_steps``. The retained checkpoint is the snapshot
    taken at the last improving evaluation.
    """
    if not train_pairs:
        raise ValueError("training corpus is empty")
    baseline_cfg = baseline_cfg or bl.BaselineConfig()
    model = TransformerModel(model_cfg, seed=train_cfg.seed)
    adam = Adam(model.params, lr=train_cfg.lr, beta1=train_cfg.adam_beta1,
                beta2=train_cfg.adam_beta2, eps=train_cfg.adam_eps)
    dropout_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 101]))
    vrand_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 202]))

    log_rows = []
    best_ppl = float("inf")
    best_acc = float("-inf")
    bad_evals = 0
    snapshot = None
    run_stats = {"eps_sum": 0.0, "pmax_sum": 0.0, "tokens": 0}

    def take_snapshot(step, scores):
        opt_m, opt_v, adam_t = adam.state_arrays()
        return Checkpoint(model_cfg=model_cfg, ada_cfg=ada_cfg, baseline_cfg=baseline_cfg,
                          vocab=vocab, params=model.state_arrays(), opt_m=opt_m, opt_v=opt_v,
                          adam_t=adam_t, step=step,
                          best={"ppl": scores["perplexity"], "acc": scores["token_accuracy"],
                                "aux_acc": scores["aux_accuracy"]})

    def run_eval(step):
        nonlocal best_ppl, best_acc, bad_evals, snapshot
        scores = evaluate_model(model, valid_pairs, vocab, train_cfg.batch_size)
        tokens = max(run_stats["tokens"], 1)
        row = {"step": step, "ppl": scores["perplexity"], "acc": scores["token_accuracy"],
               "aux_acc": scores["aux_accuracy"],
               "mean_eps": run_stats["eps_sum"] / tokens,
               "mean_pmax": run_stats["pmax_sum"] / tokens}
        log_rows.append(row)
        if log_cb:
            log_cb(row)
        run_stats.update(eps_sum=0.0, pmax_sum=0.0, tokens=0)
        improved = scores["perplexity"] < best_ppl or scores["token_accuracy"] > best_acc
        best_ppl = min(best_ppl, scores["perplexity"])
        best_acc = max(best_acc, scores["token_accuracy"])
        if improved:
            bad_evals = 0
            snapshot = take_snapshot(step, scores)
        else:
            bad_evals += 1
        return bad_evals >= train_cfg.patience

    step = 0
    epoch = 0
    stop = False
    pending = 0
    group_tokens = 0
    while not stop and step < train_cfg.max_steps:
        for batch in make_batches(train_pairs, vocab, train_cfg.batch_size,
                                  seed=(train_cfg.seed, epoch)):
            total, stats = _micro_batch_losses(model, batch, train_cfg, ada_cfg,
                                               baseline_cfg, dropout_rng, vrand_rng)
            loss_value = total.item()
            if not np.isfinite(loss_value):
                raise DivergenceError(
                    f"non-finite loss at step {step}",
                    dump={"step": step, "loss": loss_value,
                          "enc_in": batch.enc_in.tolist(), "dec_in": batch.dec_in.tolist(),
                          "dec_out": batch.dec_out.tolist()})
            ad.backward(total)
            run_stats["eps_sum"] += stats["eps_sum"]
            run_stats["pmax_sum"] += stats["pmax_sum"]
            run_stats["tokens"] += batch.token_count
            group_tokens += batch.token_count
            pending += 1
            if pending < train_cfg.grad_accum:
                continue
            adam.step(grad_scale=1.0 / group_tokens)
            model.zero_grad()
            pending = 0
            group_tokens = 0
            step += 1
            if step % train_cfg.eval_every == 0:
                stop = run_eval(step)
            if stop or step >= train_cfg.max_steps:
                break
        epoch += 1

    if not log_rows or log_rows[-1]["step"] != step:
        run_eval(step)
    if snapshot is None:
        scores = evaluate_model(model, valid_pairs, vocab, train_cfg.batch_size)
        snapshot = take_snapshot(step, scores)
    return TrainResult(checkpoint=snapshot, log_rows=log_rows, final_model=model)
