"""Training objectives and the two-stage recipe.

Heads are assigned leaping supervision: head i is trained to predict the
token ``offset(i) = k*(i-1)+1`` positions ahead, so a stride-2, 4-head model
learns offsets [1, 3, 5, 7]. Stride 1 recovers plain adjacent multi-token
prediction through the same code path, not a separate one.

Two stages:

* warm-up: backbone and base head frozen, heads 2..n trained on the summed
  cross-entropy at their offsets (no backbone gradients are even computed);
* full tuning: everything trains on ``CE_head1(offset 1) + beta * sum_i>=2
  CE_head_i(offset i)``. beta = 0 collapses to the plain next-token
  objective exactly.

Per-head losses are means over valid pairs (then summed across heads) so
beta stays comparable across sequence lengths. When batches come from packed
windows, pairs whose conditioning position or skipped-over span touches a
document separator are dropped; the pair may still *land* on the separator
so end-of-document stays learnable. Loss math runs in float64 regardless of
parameter dtype.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import SEP_ID, Corpus, pack_windows
from .decode import ar_decode
from .model import PredictionHead, TransformerLM, head_logits

__all__ = [
    "LeapSchedule",
    "TrainingConfig",
    "TrainingDiverged",
    "TrainStep",
    "align_leap_targets",
    "ntp_loss",
    "warmup_loss",
    "full_loss",
    "loss_and_grads",
    "AdamW",
    "cosine_lr",
    "train",
    "self_distill",
    "write_loss_history",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LeapSchedule:
    """Head-to-offset assignment: offset(i) = stride*(i-1) + 1."""

    n_heads: int
    stride: int

    def __post_init__(self):
        if self.n_heads < 1 or self.stride < 1:
            raise ValueError("n_heads and stride must be >= 1")

    @property
    def offsets(self) -> list[int]:
        return [self.stride * (i - 1) + 1 for i in range(1, self.n_heads + 1)]

    def offset(self, head_index: int) -> int:
        if not 1 <= head_index <= self.n_heads:
            raise ValueError(f"head index {head_index} outside 1..{self.n_heads}")
        return self.stride * (head_index - 1) + 1

    @classmethod
    def for_model(cls, model: TransformerLM) -> "LeapSchedule":
        return cls(model.config.n_pred_heads, model.config.leap_stride)


@dataclass(frozen=True)
class TrainingConfig:
    stage: str
    learning_rate: float
    epochs: int
    batch_size: int = 8
    beta: float = 0.2
    warmup_ratio: float = 0.1
    window_len: int = 256
    weight_decay: float = 0.01
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage not in ("warmup", "full"):
            raise ValueError(f"stage must be 'warmup' or 'full', got {self.stage!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must be in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs/batch_size")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# alignment and losses
# ---------------------------------------------------------------------------


def align_leap_targets(
    labels, head_index: int, schedule: LeapSchedule
) -> tuple[np.ndarray, np.ndarray]:
    """Pair positions with their leap targets for one head.

    Returns (logit positions, target positions): position t's logits from
    head ``head_index`` supervise the token at t + offset. A sequence too
    short for the offset yields zero pairs (skipped, logged).
    """
    labels = np.asarray(labels)
    t = labels.shape[-1]
    offset = schedule.offset(head_index)
    if t <= offset:
        logger.info(
            "head %d skipped: sequence of %d tokens too short for offset %d",
            head_index, t, offset,
        )
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    idx = np.arange(t - offset, dtype=np.int64)
    return idx, idx + offset


def _cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean negative log-softmax in float64. Returns (loss, dlogits)."""
    n = logits.shape[0]
    if n == 0:
        raise ValueError("cross entropy over an empty pair set")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), targets]))
    probs = np.exp(z - lse[:, None])
    probs[np.arange(n), targets] -= 1.0
    return loss, probs / n


def ntp_loss(logits: np.ndarray, targets) -> float:
    """Mean cross entropy over already-aligned (logit, target) pairs."""
    targets = np.asarray(targets, dtype=np.int64)
    loss, _ = _cross_entropy(np.asarray(logits), targets)
    return loss


def _valid_pairs(batch: np.ndarray, offset: int) -> np.ndarray:
    """(B, T-offset) mask: pair t -> t+offset survives unless a separator
    sits at the conditioning position or inside the skipped-over span."""
    b, t = batch.shape
    sep = (batch == SEP_ID).astype(np.int64)
    csum = np.concatenate([np.zeros((b, 1), dtype=np.int64), np.cumsum(sep, axis=1)], axis=1)
    starts = np.arange(t - offset)
    return (csum[:, starts + offset] - csum[:, starts]) == 0


def _head_ce_and_grads(hidden_pairs, targets, head: PredictionHead, want_grads: bool):
    """CE for one head over gathered pair rows; optionally also the gradients
    wrt the head parameters and the input rows."""
    z = hidden_pairs
    if head.w is None:
        logits = z @ head.w_out.T
        loss, dlogits = _cross_entropy(logits, targets)
        if not want_grads:
            return loss, None, None
        dlogits = dlogits.astype(z.dtype)
        dz = dlogits @ head.w_out
        grads = {"w_out": dlogits.T @ z}
        return loss, grads, dz
    u = z @ head.w.T + head.b
    sig = 1.0 / (1.0 + np.exp(-u))
    s = u * sig
    zp = z + s
    logits = zp @ head.w_out.T
    loss, dlogits = _cross_entropy(logits, targets)
    if not want_grads:
        return loss, None, None
    dlogits = dlogits.astype(z.dtype)
    dzp = dlogits @ head.w_out
    du = dzp * (sig * (1.0 + u * (1.0 - sig)))
    grads = {
        "w_out": dlogits.T @ zp,
        "w": du.T @ z,
        "b": du.sum(axis=0),
    }
    dz = dzp + du @ head.w
    return loss, grads, dz


def _batched(batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.int64)
    return batch[None, :] if batch.ndim == 1 else batch


def warmup_loss(hidden: np.ndarray, heads: list[PredictionHead], labels,
                schedule: LeapSchedule) -> float:
    """Stage-1 objective value: sum over heads 2..n of the mean cross
    entropy at each head's offset, on hidden states from a frozen backbone."""
    labels = _batched(labels)
    hidden = hidden[None, ...] if hidden.ndim == 2 else hidden
    total = 0.0
    contributed = 0
    for head in heads[1:]:
        offset = schedule.offset(head.head_index)
        if labels.shape[1] <= offset:
            logger.info("head %d skipped: sequence too short for offset %d",
                        head.head_index, offset)
            continue
        valid = _valid_pairs(labels, offset)
        if not valid.any():
            logger.info("head %d skipped: no valid pairs", head.head_index)
            continue
        rows = hidden[:, : labels.shape[1] - offset, :][valid]
        targets = labels[:, offset:][valid]
        loss, _, _ = _head_ce_and_grads(rows, targets, head, want_grads=False)
        total += loss
        contributed += 1
    if contributed == 0:
        raise ValueError("all heads skipped: no head had a valid pair")
    return total


def full_loss(model: TransformerLM, batch, beta: float,
              schedule: LeapSchedule | None = None) -> float:
    """Stage-2 objective value: CE_head1(offset 1) + beta * extra-head CEs."""
    loss, _, _ = _objective(model, _batched(batch), stage="full", beta=beta,
                            schedule=schedule, want_grads=False)
    return loss


def _objective(model, batch, stage, beta, schedule, want_grads):
    """Shared loss/grad engine for both stages.

    Returns (loss, grads dict or None, per-head loss dict). Warm-up never
    touches the backbone: no tape backward, gradients only for heads 2..n.
    """
    schedule = schedule or LeapSchedule.for_model(model)
    if schedule.n_heads != model.config.n_pred_heads or schedule.stride != model.config.leap_stride:
        raise ValueError("schedule does not match model config")
    hidden, tape = model.train_forward(batch)
    heads = model.heads
    t = batch.shape[1]

    grads: dict[str, np.ndarray] = {}
    dhidden = np.zeros_like(hidden) if want_grads else None
    head_losses: dict[int, float] = {}
    total = 0.0
    for head in heads:
        if stage == "warmup" and head.head_index == 1:
            continue
        offset = schedule.offset(head.head_index)
        if t <= offset:
            logger.info("head %d skipped: window too short for offset %d",
                        head.head_index, offset)
            continue
        valid = _valid_pairs(batch, offset)
        if not valid.any():
            logger.info("head %d skipped: no valid pairs", head.head_index)
            continue
        rows = hidden[:, : t - offset, :][valid]
        targets = batch[:, offset:][valid]
        want_head_grads = want_grads and (stage == "full" or head.head_index > 1)
        loss, hgrads, dz = _head_ce_and_grads(rows, targets, head, want_head_grads)
        weight = 1.0 if head.head_index == 1 else (beta if stage == "full" else 1.0)
        head_losses[head.head_index] = loss
        total += weight * loss
        if want_head_grads:
            if head.head_index == 1:
                grads["unembed"] = grads.get("unembed", 0) + weight * hgrads["w_out"]
            else:
                for pname, g in hgrads.items():
                    grads[f"heads.{head.head_index}.{pname}"] = weight * g
            if want_grads and stage == "full":
                scatter = np.zeros_like(dhidden[:, : t - offset, :])
                scatter[valid] = weight * dz
                dhidden[:, : t - offset, :] += scatter
    if not head_losses:
        raise ValueError("all heads skipped: no head had a valid pair")
    if want_grads and stage == "full":
        backbone = model.train_backward(tape, dhidden)
        backbone["unembed"] = backbone.get("unembed", 0) + grads.pop("unembed", 0)
        grads.update(backbone)
    return total, (grads if want_grads else None), head_losses


def loss_and_grads(model: TransformerLM, batch, stage: str, beta: float = 0.2,
                   schedule: LeapSchedule | None = None):
    """(loss, grads) for one batch under the given stage's objective."""
    loss, grads, _ = _objective(model, _batched(batch), stage, beta, schedule,
                                want_grads=True)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer, schedule, loop
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; decay skips 1-D tensors."""

    def __init__(self, params: dict[str, np.ndarray], trainable: list[str],
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.trainable = list(trainable)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(params[n]) for n in self.trainable}
        self.v = {n: np.zeros_like(params[n]) for n in self.trainable}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name in self.trainable:
            if name not in grads:
                continue
            g = grads[name].astype(self.params[name].dtype)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.params[name].ndim >= 2 and self.weight_decay:
                update = update + self.weight_decay * self.params[name]
            self.params[name] -= lr * update


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup over the first warmup_ratio of steps, cosine to zero after."""
    warmup = max(1, int(round(total_steps * warmup_ratio)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = (step - warmup) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class TrainStep:
    step: int
    stage: str
    lr: float
    loss: float


def trainable_names(model: TransformerLM, stage: str) -> list[str]:
    if stage == "warmup":
        return sorted(n for n in model.params if n.startswith("heads."))
    return sorted(model.params)


def train(model: TransformerLM, corpus: Corpus, config: TrainingConfig
          ) -> tuple[TransformerLM, list[TrainStep]]:
    """Run one stage over the corpus. Mutates ``model`` in place and returns
    it with the per-step loss history. Deterministic given the seed; aborts
    with the step index if the loss goes non-finite."""
    windows = pack_windows(corpus, config.window_len)
    rng = np.random.default_rng(config.seed)
    schedule = LeapSchedule.for_model(model)
    steps_per_epoch = math.ceil(len(windows) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    optimizer = AdamW(model.params, trainable_names(model, config.stage),
                      weight_decay=config.weight_decay)
    history: list[TrainStep] = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(windows))
        for lo in range(0, len(windows), config.batch_size):
            if step >= total_steps:
                return model, history
            batch = windows[order[lo : lo + config.batch_size]]
            lr = cosine_lr(step, total_steps, config.learning_rate, config.warmup_ratio)
            loss, grads = loss_and_grads(model, batch, config.stage, config.beta, schedule)
            if not math.isfinite(loss):
                raise TrainingDiverged(step, loss)
            optimizer.step(grads, lr)
            history.append(TrainStep(step, config.stage, lr, loss))
            step += 1
    return model, history


def write_loss_history(history: list[TrainStep], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "stage", "lr", "loss"])
        for row in history:
            writer.writerow([row.step, row.stage, f"{row.lr:.10g}", f"{row.loss:.10g}"])


# ---------------------------------------------------------------------------
# self-distillation
# ---------------------------------------------------------------------------


def self_distill(model: TransformerLM, prompts: Corpus, max_new: int,
                 seed: int = 0) -> Corpus:
    """Greedy base-head continuations: each prompt becomes prompt + what the
    untouched model would have said, which stage 1 then imitates."""
    from .corpus import BOS_ID

    out_docs = []
    for doc in prompts.documents:
        if max_new == 0:
            out_docs.append(doc.copy())
            continue
        full, _ = ar_decode(model, [BOS_ID] + doc.tolist(), max_new, eos_id=SEP_ID)
        continuation = [t for t in full[1 + len(doc):] if t != SEP_ID]
        out_docs.append(np.concatenate([doc, np.array(continuation, dtype=np.int32)]))
    return Corpus(documents=out_docs, tokenizer=prompts.tokenizer)
