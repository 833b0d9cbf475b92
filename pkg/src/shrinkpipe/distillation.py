"""MLM masking, distillation losses and the student/teacher training loops."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, seeded_rng
from .model import EncoderModel, INIT_STRATEGIES, encode, mlm_logits
from .tokenizer import CLS_ID, Corpus, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID, iter_rows

logger = logging.getLogger(__name__)

LOSS_KINDS = ("mse", "kl")
VALIDATION_MASK_SEED = 0x5EED


class NumericalError(RuntimeError):
    """Loss became NaN or infinite during training."""


@dataclass
class DistillPlan:
    loss_kind: str = "mse"
    alpha: float = 0.5
    temperature: float = 2.0
    epochs: int = 10
    learning_rate: float = 5e-4
    batch_size: int = 32
    init_strategy: str = "last-k"
    seed: int = 0
    distill_enabled: bool = True
    mask_rate: float = 0.15
    warmup_fraction: float = 0.05
    seq_len: int | None = None

    def __post_init__(self):
        self.loss_kind = self.loss_kind.lower()
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"unknown init strategy {self.init_strategy!r}")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillPlan":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown plan fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    original_ids: np.ndarray
    mask: np.ndarray

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())


@dataclass
class TrainingTrace:
    train_loss: list[float] = field(default_factory=list)
    val_masked_acc: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_masked_acc\n")
        for i, (loss, acc) in enumerate(zip(self.train_loss, self.val_masked_acc), 1):
            buf.write(f"{i},{loss:.6f},{acc:.6f}\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


# -------------------------------------------------------------------- masking

def apply_masking(ids: np.ndarray, rate: float, rng: np.random.Generator,
                  vocab_size: int) -> MaskedBatch | None:
    """BERT-style 80/10/10 masking; returns None when nothing is maskable."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"masking rate must be in (0, 1), got {rate}")
    ids = np.asarray(ids, dtype=np.int64)
    maskable = (ids != PAD_ID) & (ids != CLS_ID) & (ids != SEP_ID) & (ids != MASK_ID)
    if not maskable.any():
        logger.warning("skipping batch with no maskable tokens")
        return None
    selected = (rng.random(ids.shape) < rate) & maskable
    if not selected.any():
        flat = np.flatnonzero(maskable)
        selected.flat[flat[rng.integers(len(flat))]] = True
    action = rng.random(ids.shape)
    replacement = (rng.integers(NUM_SPECIALS, vocab_size, size=ids.shape)
                   if vocab_size > NUM_SPECIALS else ids)
    inputs = ids.copy()
    to_mask = selected & (action < 0.8)
    to_random = selected & (action >= 0.8) & (action < 0.9)
    inputs[to_mask] = MASK_ID
    inputs[to_random] = replacement[to_random]
    return MaskedBatch(inputs, ids, selected)


def masked_batches(rows: np.ndarray, batch_size: int, rate: float, rng: np.random.Generator,
                   vocab_size: int, shuffle: bool = True) -> Iterator[MaskedBatch]:
    for chunk in iter_rows(rows, batch_size, rng if shuffle else None):
        batch = apply_masking(chunk, rate, rng, vocab_size)
        if batch is not None:
            yield batch


# --------------------------------------------------------------------- losses

def _positions(logits: Tensor, batch: MaskedBatch):
    if logits.shape[:-1] == batch.mask.shape:
        return batch.original_ids, batch.mask
    if logits.data.ndim == 2 and logits.shape[0] == batch.num_masked:
        return batch.original_ids[batch.mask], None
    raise ad.ShapeError(f"logits {logits.shape} do not match batch {batch.mask.shape}")


def mlm_loss(logits: Tensor, batch: MaskedBatch) -> Tensor:
    """Mean cross-entropy over masked positions.

    ``logits`` is either batch x seq x V or already gathered at the masked
    positions (num_masked x V, row-major order).
    """
    if batch.num_masked == 0:
        raise ValueError("mlm_loss: batch has no masked positions")
    targets, mask = _positions(logits, batch)
    return ad.cross_entropy(logits, targets, mask)


def mse_distill_loss(student: Tensor, teacher, mask=None) -> Tensor:
    return ad.mse(student, teacher if isinstance(teacher, Tensor) else Tensor(teacher), mask)


def kl_distill_loss(student: Tensor, teacher, temperature: float, mask=None) -> Tensor:
    return ad.kl_div(student, teacher, temperature, mask)


def combined_loss(mlm, distill, alpha: float):
    """alpha * MLM + (1 - alpha) * distillation."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if isinstance(mlm, Tensor) or isinstance(distill, Tensor):
        return ad.add(ad.scale(ad._wrap(mlm), alpha), ad.scale(ad._wrap(distill), 1.0 - alpha))
    return alpha * mlm + (1.0 - alpha) * distill


def distill_loss(plan: DistillPlan, student: Tensor, teacher: np.ndarray) -> Tensor:
    if plan.loss_kind == "mse":
        return mse_distill_loss(student, teacher)
    return kl_distill_loss(student, teacher, plan.temperature)


# ------------------------------------------------------------------ optimizer

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, total_steps: int,
                 warmup_fraction: float = 0.05, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.warmup = max(1, int(round(warmup_fraction * total_steps)))
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def current_lr(self) -> float:
        return self.lr * min(1.0, (self.t + 1) / self.warmup)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        lr = self.current_lr()
        self.t += 1
        if lr == 0.0:
            return
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        step = np.float32(lr * math.sqrt(c2) / c1)
        eps = np.float32(self.eps * math.sqrt(c2))
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= np.float32(self.b1)
            m += np.float32(1 - self.b1) * p.grad
            v *= np.float32(self.b2)
            v += np.float32(1 - self.b2) * p.grad * p.grad
            p.data -= step * m / (np.sqrt(v) + eps)


# ------------------------------------------------------------------- training

def masked_positions_logits(model: EncoderModel, t: dict[str, Tensor], batch: MaskedBatch,
                            **kwargs) -> Tensor:
    """Vocabulary logits at the masked positions only (num_masked x V)."""
    hidden = encode(model.config, t, batch.input_ids, **kwargs)
    idx = np.nonzero(batch.mask)
    return mlm_logits(model.config, t, hidden[idx])


def teacher_logits(teacher: EncoderModel, batch: MaskedBatch) -> np.ndarray:
    return masked_positions_logits(teacher, teacher.tensors(), batch).data


def validation_batches(corpus: Corpus, seq_len: int, batch_size: int, rate: float,
                       vocab_size: int) -> list[MaskedBatch]:
    rng = seeded_rng(VALIDATION_MASK_SEED)
    rows = corpus.sequences(seq_len)
    return list(masked_batches(rows, batch_size, rate, rng, vocab_size, shuffle=False))


def masked_accuracy(model: EncoderModel, batches: list[MaskedBatch]) -> float:
    """Top-1 accuracy on masked positions."""
    t = model.tensors()
    correct = total = 0
    for b in batches:
        logits = masked_positions_logits(model, t, b).data
        correct += int((logits.argmax(-1) == b.original_ids[b.mask]).sum())
        total += b.num_masked
    if total == 0:
        raise ValueError("no masked positions to evaluate")
    return correct / total


def _split_validation(corpus: Corpus, seed: int) -> tuple[Corpus, Corpus]:
    n = len(corpus.documents)
    if n < 2:
        raise ValueError("corpus too small to hold out a validation split")
    n_val = max(1, int(round(0.05 * n)))
    order = seeded_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [d for i, d in enumerate(corpus.documents) if i not in val_idx]
    val = [d for i, d in enumerate(corpus.documents) if i in val_idx]
    return Corpus(train, "train"), Corpus(val, "validation")


def train_distill(student: EncoderModel, teacher: EncoderModel | None, corpus: Corpus,
                  plan: DistillPlan, validation: Corpus | None = None
                  ) -> tuple[EncoderModel, TrainingTrace]:
    """Train a copy of ``student``; the teacher is only read.

    With ``plan.distill_enabled`` false (or no teacher) the loss is plain MLM.
    """
    V = student.config.vocab_size
    use_teacher = plan.distill_enabled and teacher is not None
    if plan.distill_enabled and teacher is None:
        raise ValueError("distillation enabled but no teacher given")
    if use_teacher and teacher.config.vocab_size != V:
        raise ValueError(
            f"vocab mismatch: student {V} vs teacher {teacher.config.vocab_size}")
    if validation is None:
        corpus, validation = _split_validation(corpus, plan.seed)
    corpus.check_ids(V)
    validation.check_ids(V)
    seq_len = plan.seq_len or student.config.max_positions
    rows = corpus.sequences(seq_len)
    if len(rows) == 0:
        raise ValueError("training corpus is empty")
    val = validation_batches(validation, seq_len, plan.batch_size, plan.mask_rate, V)

    model = student.copy()
    params = model.tensors(requires_grad=True)
    steps_per_epoch = math.ceil(len(rows) / plan.batch_size)
    opt = Adam(params, plan.learning_rate, plan.epochs * steps_per_epoch, plan.warmup_fraction)
    rng = seeded_rng(plan.seed)
    trace = TrainingTrace()
    for epoch in range(plan.epochs):
        total, n = 0.0, 0
        for batch in masked_batches(rows, plan.batch_size, plan.mask_rate, rng, V):
            opt.zero_grad()
            logits = masked_positions_logits(model, params, batch)
            loss = mlm_loss(logits, batch)
            if use_teacher:
                kd = distill_loss(plan, logits, teacher_logits(teacher, batch))
                loss = combined_loss(loss, kd, plan.alpha)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch + 1}, step {n + 1}")
            loss.backward()
            opt.step()
            total += value
            n += 1
        trace.train_loss.append(total / max(n, 1))
        trace.val_masked_acc.append(masked_accuracy(model, val))
        logger.info("epoch %d loss %.4f val_acc %.4f", epoch + 1, trace.train_loss[-1],
                    trace.val_masked_acc[-1])
    return model, trace


def mlm_finetune_teacher(model: EncoderModel, corpus: Corpus, plan: DistillPlan,
                         validation: Corpus | None = None) -> tuple[EncoderModel, TrainingTrace]:
    """Adapt a model to the target corpus with the MLM objective alone."""
    plain = DistillPlan(**{**plan.to_dict(), "distill_enabled": False})
    return train_distill(model, None, corpus, plain, validation)
