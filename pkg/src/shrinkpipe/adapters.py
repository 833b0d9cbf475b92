"""Bottleneck task adapters on a frozen encoder, task heads, and F1 metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, seeded_rng
from .distillation import Adam
from .model import EncoderModel, INIT_STD, ModelConfig, encode
from .tokenizer import CLS_ID, PAD_ID, Tokenizer, UNK_ID

TASK_KINDS = ("classification", "tagging")


def bottleneck_size(hidden_size: int, r: int) -> int:
    if r < 1:
        raise ValueError("reduction factor must be >= 1")
    return max(1, hidden_size // r)


def adapter_param_count(config: ModelConfig, r: int) -> int:
    H = config.hidden_size
    b = bottleneck_size(H, r)
    return config.num_layers * (2 * H * b + b + H)


class BottleneckAdapter:
    """One down-GELU-up block per layer, added residually to the FFN output."""

    def __init__(self, config: ModelConfig, r: int, rng: np.random.Generator):
        H = config.hidden_size
        b = bottleneck_size(H, r)
        self.r = r
        self.params: dict[str, np.ndarray] = {}
        for i in range(config.num_layers):
            p = f"adapter.{i}."
            self.params[p + "down"] = (rng.standard_normal((H, b)) * INIT_STD).astype(np.float32)
            self.params[p + "down_bias"] = np.zeros(b, np.float32)
            self.params[p + "up"] = np.zeros((b, H), np.float32)
            self.params[p + "up_bias"] = np.zeros(H, np.float32)
        self.num_layers = config.num_layers

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def hooks(self, t: dict[str, Tensor]) -> dict:
        def make(i):
            p = f"adapter.{i}."

            def apply(x: Tensor) -> Tensor:
                h = ad.gelu(ad.add(ad.matmul(x, t[p + "down"]), t[p + "down_bias"]))
                return ad.add(x, ad.add(ad.matmul(h, t[p + "up"]), t[p + "up_bias"]))

            return apply

        return {i: make(i) for i in range(self.num_layers)}


class TaskHead:
    def __init__(self, kind: str, hidden_size: int, num_labels: int, rng: np.random.Generator):
        if kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {kind!r}")
        self.kind = kind
        self.num_labels = num_labels
        self.params = {
            "head.weight": (rng.standard_normal((hidden_size, num_labels)) * INIT_STD).astype(np.float32),
            "head.bias": np.zeros(num_labels, np.float32),
        }

    def logits(self, t: dict[str, Tensor], hidden: Tensor) -> Tensor:
        if self.kind == "classification":
            hidden = hidden[:, 0, :]
        return ad.add(ad.matmul(hidden, t["head.weight"]), t["head.bias"])


# ------------------------------------------------------------------- task data

@dataclass
class TaskData:
    kind: str
    labels: list[str]
    train: list
    dev: list
    test: list

    @property
    def num_labels(self) -> int:
        return len(self.labels)


def _encode_words(tokenizer: Tokenizer, words: Sequence[str]) -> list[int]:
    return [tokenizer.token_to_id.get(w, UNK_ID) for w in words]


def classification_task(tokenizer: Tokenizer, train, dev, test,
                        labels: Sequence[str] | None = None) -> TaskData:
    """Pairs of (text, label string) -> TaskData with integer labels."""
    labels = sorted({lab for _, lab in train}) if labels is None else list(labels)
    index = {lab: i for i, lab in enumerate(labels)}

    def conv(pairs):
        out = []
        for text, lab in pairs:
            if lab not in index:
                raise ValueError(f"label {lab!r} not in label set")
            out.append((tokenizer.encode(text), index[lab]))
        return out

    return TaskData("classification", labels, conv(train), conv(dev), conv(test))


def tagging_task(tokenizer: Tokenizer, train, dev, test,
                 labels: Sequence[str] | None = None) -> TaskData:
    """Sentences of (word, tag) -> TaskData with integer tag ids."""
    if labels is None:
        labels = sorted({tag for sent in train for _, tag in sent})
    index = {lab: i for i, lab in enumerate(labels)}

    def conv(sents):
        out = []
        for sent in sents:
            for _, tag in sent:
                if tag not in index:
                    raise ValueError(f"tag {tag!r} not in label set")
            out.append((_encode_words(tokenizer, [w for w, _ in sent]), [index[t] for _, t in sent]))
        return out

    return TaskData("tagging", list(labels), conv(train), conv(dev), conv(test))


def _batch(examples, kind: str, max_len: int):
    body = max_len - 1
    n = len(examples)
    longest = min(body, max(len(ids) for ids, _ in examples))
    ids = np.full((n, longest + 1), PAD_ID, dtype=np.int64)
    ids[:, 0] = CLS_ID
    if kind == "classification":
        labels = np.array([lab for _, lab in examples], dtype=np.int64)
        for r, (toks, _) in enumerate(examples):
            toks = toks[:body]
            ids[r, 1:1 + len(toks)] = toks
        return ids, labels, None
    labels = np.zeros_like(ids)
    mask = np.zeros(ids.shape, dtype=bool)
    for r, (toks, tags) in enumerate(examples):
        toks, tags = toks[:body], tags[:body]
        ids[r, 1:1 + len(toks)] = toks
        labels[r, 1:1 + len(tags)] = tags
        mask[r, 1:1 + len(tags)] = True
    return ids, labels, mask


# ------------------------------------------------------------------- training

@dataclass
class AdapterHyperparams:
    learning_rate: float
    batch_size: int
    epochs: int
    max_length: int
    seed: int = 0

    @classmethod
    def defaults(cls, kind: str, **overrides) -> "AdapterHyperparams":
        base = {"classification": dict(learning_rate=1e-4, batch_size=16, epochs=20, max_length=256),
                "tagging": dict(learning_rate=3e-4, batch_size=64, epochs=100, max_length=512)}[kind]
        base.update(overrides)
        return cls(**base)


@dataclass
class AdapterResult:
    adapter: BottleneckAdapter
    head: TaskHead
    metrics: dict = field(default_factory=dict)


def _predict(model, adapter, head, t, examples, kind, max_len, batch_size=64):
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        ids, _, mask = _batch(chunk, kind, max_len)
        hidden = encode(model.config, t, ids, adapters=adapter.hooks(t))
        logits = head.logits(t, hidden).data
        if kind == "classification":
            preds.extend(int(x) for x in logits.argmax(-1))
        else:
            arg = logits.argmax(-1)
            for r, (toks, _) in enumerate(chunk):
                preds.append([int(x) for x in arg[r, 1:1 + min(len(toks), max_len - 1)]])
    return preds


def evaluate_task(model, adapter, head, t, examples, task: TaskData, max_len: int) -> float:
    if not examples:
        return float("nan")
    preds = _predict(model, adapter, head, t, examples, task.kind, max_len)
    if task.kind == "classification":
        return macro_f1([lab for _, lab in examples], preds)
    gold = [[task.labels[x] for x in tags[:len(p)]] for (_, tags), p in zip(examples, preds)]
    pred = [[task.labels[x] for x in p] for p in preds]
    return span_f1(gold, pred)


def train_task_adapter(model: EncoderModel, task: TaskData, r: int,
                       hyper: AdapterHyperparams) -> AdapterResult:
    """Train adapter + head on a frozen backbone; keep the best-dev state."""
    for split in (task.train, task.dev, task.test):
        for _, lab in split:
            labs = [lab] if task.kind == "classification" else lab
            if any(not 0 <= x < task.num_labels for x in labs):
                raise ValueError(f"label out of range [0, {task.num_labels})")
    rng = seeded_rng(hyper.seed)
    adapter = BottleneckAdapter(model.config, r, rng)
    head = TaskHead(task.kind, model.config.hidden_size, task.num_labels, rng)
    backbone = model.tensors(requires_grad=False)
    trainable = {k: Tensor(v, requires_grad=True)
                 for k, v in {**adapter.params, **head.params}.items()}
    t = {**backbone, **trainable}

    def snapshot():
        return {k: v.data.copy() for k, v in trainable.items()}

    best_state = snapshot()
    best_dev = evaluate_task(model, adapter, head, t, task.dev, task, hyper.max_length)
    best_epoch = 0
    steps = hyper.epochs * math.ceil(len(task.train) / hyper.batch_size)
    opt = Adam(trainable, hyper.learning_rate, max(steps, 1), warmup_fraction=0.0)
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(task.train))
        for start in range(0, len(order), hyper.batch_size):
            chunk = [task.train[i] for i in order[start:start + hyper.batch_size]]
            ids, labels, mask = _batch(chunk, task.kind, hyper.max_length)
            opt.zero_grad()
            hidden = encode(model.config, t, ids, adapters=adapter.hooks(t))
            loss = ad.cross_entropy(head.logits(t, hidden), labels, mask)
            loss.backward()
            opt.step()
        dev = evaluate_task(model, adapter, head, t, task.dev, task, hyper.max_length)
        if dev > best_dev or math.isnan(best_dev):
            best_dev, best_epoch, best_state = dev, epoch, snapshot()
    # trainable tensors share storage with adapter.params / head.params
    for k, v in best_state.items():
        trainable[k].data[...] = v
    test = evaluate_task(model, adapter, head, t, task.test, task, hyper.max_length)
    return AdapterResult(adapter, head, {"dev": best_dev, "test": test, "best_epoch": best_epoch})


def majority_baseline(task: TaskData) -> float:
    """Macro-F1 of always predicting the most frequent training label."""
    if task.kind != "classification":
        raise ValueError("majority baseline is defined for classification tasks")
    counts = np.bincount([lab for _, lab in task.train], minlength=task.num_labels)
    major = int(counts.argmax())
    return macro_f1([lab for _, lab in task.test], [major] * len(task.test))


# -------------------------------------------------------------------- metrics

def macro_f1(gold: Sequence, pred: Sequence) -> float:
    """Unweighted mean of per-class F1 over classes seen in gold or pred."""
    if len(gold) != len(pred):
        raise ValueError(f"length mismatch: {len(gold)} gold vs {len(pred)} predicted")
    if not gold:
        raise ValueError("macro_f1 of empty input")
    scores = []
    for c in sorted(set(gold) | set(pred), key=str):
        tp = sum(1 for g, p in zip(gold, pred) if g == c and p == c)
        fp = sum(1 for g, p in zip(gold, pred) if g != c and p == c)
        fn = sum(1 for g, p in zip(gold, pred) if g == c and p != c)
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def _parse_tag(tag: str, position) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[0] in "BI" and tag[1] == "-":
        return tag[0], tag[2:]
    raise ValueError(f"malformed BIO tag {tag!r} at position {position}")


def extract_spans(tags: Sequence[str], seq_index: int | None = None) -> list[tuple[str, int, int]]:
    """(type, start, end) spans, end inclusive.

    An I- tag that follows O or a different type opens a new span.
    """
    spans = []
    start, typ = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        where = i if seq_index is None else (seq_index, i)
        prefix, t = _parse_tag(tag, where)
        if start is not None and (prefix in ("B", "O") or t != typ):
            spans.append((typ, start, i - 1))
            start = None
        if prefix == "B" or (prefix == "I" and start is None):
            start, typ = i, t
    return spans


def span_f1(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> float:
    """Micro F1 over exact (type, start, end) span matches."""
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sequences vs {len(pred)} predicted")
    gold_spans, pred_spans = set(), set()
    for n, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p):
            raise ValueError(f"sequence {n}: {len(g)} gold tags vs {len(p)} predicted")
        gold_spans.update((n, *s) for s in extract_spans(g, n))
        pred_spans.update((n, *s) for s in extract_spans(p, n))
    if not gold_spans and not pred_spans:
        return 1.0
    tp = len(gold_spans & pred_spans)
    if tp == 0:
        return 0.0
    precision = tp / len(pred_spans)
    recall = tp / len(gold_spans)
    return 2 * precision * recall / (precision + recall)


def bio_wrap(tags: Sequence[str]) -> list[str]:
    """Single-token tags (e.g. POS) as one-token BIO spans."""
    return ["B-" + t for t in tags]


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    if not rows:
        raise ValueError("no metric rows to write")
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
