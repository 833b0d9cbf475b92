"""Structured FFN pruning, hidden-size reduction, vocabulary trimming and stage reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import Tensor, seeded_rng
from .distillation import MaskedBatch, masked_batches, mlm_loss, masked_positions_logits
from .model import EncoderModel, ModelConfig, param_count
from .tokenizer import Corpus, NUM_SPECIALS, Tokenizer, UNK_ID

# per-layer accumulated |dL/da_j| for each FFN intermediate neuron
NeuronImportance = list


def _layer_suffix(name: str) -> str:
    return name.split(".", 2)[2] if name.startswith("layer.") else name


_HIDDEN_AXES = {
    "tok_emb": (1,), "pos_emb": (1,), "emb_norm.scale": (0,), "emb_norm.bias": (0,),
    "wq": (0, 1), "wk": (0, 1), "wv": (0, 1), "wo": (0, 1),
    "bq": (0,), "bk": (0,), "bv": (0,), "bo": (0,),
    "attn_norm.scale": (0,), "attn_norm.bias": (0,),
    "w1": (0,), "b1": (), "w2": (1,), "b2": (0,),
    "ffn_norm.scale": (0,), "ffn_norm.bias": (0,),
    "mlm.dense": (0, 1), "mlm.dense_bias": (0,), "mlm.norm.scale": (0,), "mlm.norm.bias": (0,),
    "mlm.out_bias": (), "mlm.decoder": (1,),
}


def hidden_axes(name: str) -> tuple[int, ...]:
    """Axes of tensor ``name`` that index the hidden dimension."""
    return _HIDDEN_AXES[_layer_suffix(name)]


# ----------------------------------------------------------------- importance

def importance_from_batches(model: EncoderModel, batches: Sequence[MaskedBatch]) -> NeuronImportance:
    if not batches:
        raise ValueError("importance needs at least one batch")
    L, F = model.config.num_layers, model.config.ffn_size
    scores = [np.zeros(F, dtype=np.float64) for _ in range(L)]
    for batch in batches:
        t = model.tensors()
        # only the embedding needs grad so activations are tracked; other weights skip it
        t["tok_emb"] = Tensor(model.params["tok_emb"], requires_grad=True)
        cache: dict = {}
        logits = masked_positions_logits(model, t, batch, cache=cache)
        mlm_loss(logits, batch).backward()
        for i in range(L):
            g = cache[("ffn_act", i)].grad
            if g is not None:
                scores[i] += np.abs(g.astype(np.float64)).reshape(-1, F).sum(axis=0)
    return scores


def accumulate_importance(model: EncoderModel, corpus: Corpus, batches: int, *,
                          batch_size: int = 32, seed: int = 0, mask_rate: float = 0.15,
                          seq_len: int | None = None) -> NeuronImportance:
    """Sum of |dL_MLM/da_j| over tokens of ``batches`` validation batches."""
    if batches < 1:
        raise ValueError("batches must be >= 1")
    if not corpus.documents:
        raise ValueError("validation corpus is empty")
    rows = corpus.sequences(seq_len or model.config.max_positions)
    rng = seeded_rng(seed)
    chosen = []
    for b in masked_batches(rows, batch_size, mask_rate, rng, model.config.vocab_size):
        chosen.append(b)
        if len(chosen) == batches:
            break
    return importance_from_batches(model, chosen)


def neuron_ranking(importance: np.ndarray) -> np.ndarray:
    """Indices by descending importance, ties toward the lower index."""
    imp = np.asarray(importance)
    return np.lexsort((np.arange(len(imp)), -imp))


# -------------------------------------------------------------------- pruning

def prune_ffn(model: EncoderModel, importance: NeuronImportance, target_ffn: int) -> EncoderModel:
    """Keep the ``target_ffn`` most important neurons per layer, most important first."""
    if target_ffn < 1:
        raise ValueError("target FFN size must be >= 1")
    F = model.config.ffn_size
    if target_ffn > F:
        raise ValueError(f"target FFN size {target_ffn} exceeds current {F}")
    if len(importance) != model.config.num_layers:
        raise ValueError("importance must have one vector per layer")
    params = {k: v.copy() for k, v in model.params.items()}
    for i, imp in enumerate(importance):
        if len(imp) != F:
            raise ValueError(f"layer {i}: importance length {len(imp)} != ffn_size {F}")
        keep = neuron_ranking(imp)[:target_ffn]
        p = f"layer.{i}."
        params[p + "w1"] = model.params[p + "w1"][:, keep].copy()
        params[p + "b1"] = model.params[p + "b1"][keep].copy()
        params[p + "w2"] = model.params[p + "w2"][keep, :].copy()
    return EncoderModel(replace(model.config, ffn_size=target_ffn), params)


def _check_hidden_target(config: ModelConfig, k: int) -> None:
    if k < 1 or k > config.hidden_size:
        raise ValueError(f"hidden size {k} must be in [1, {config.hidden_size}]")
    if k % config.num_heads:
        raise ValueError(f"hidden size {k} is not divisible by {config.num_heads} attention heads")


def truncate_hidden(model: EncoderModel, k: int) -> EncoderModel:
    """Keep the first ``k`` entries of every hidden-indexed axis."""
    _check_hidden_target(model.config, k)
    params = {}
    for name, arr in model.params.items():
        index = [slice(None)] * arr.ndim
        for axis in hidden_axes(name):
            index[axis] = slice(0, k)
        params[name] = arr[tuple(index)].copy()
    return EncoderModel(replace(model.config, hidden_size=k), params)


def svd_projection(model: EncoderModel, k: int) -> np.ndarray:
    """H x k matrix of the top-k right singular vectors of the token embeddings."""
    _check_hidden_target(model.config, k)
    emb = model.params["tok_emb"].astype(np.float64)
    try:
        _, _, vt = np.linalg.svd(emb, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"SVD did not converge: {exc}") from exc
    if vt.shape[0] < k:
        raise ValueError(f"embedding rank bound {vt.shape[0]} is below target {k}")
    return vt[:k].T


def svd_reduce(model: EncoderModel, k: int, q: np.ndarray | None = None) -> EncoderModel:
    """Project every hidden axis onto a k-dim subspace; norms restart at scale 1, bias 0."""
    if q is None:
        q = svd_projection(model, k)
    else:
        _check_hidden_target(model.config, k)
    if q.shape != (model.config.hidden_size, k):
        raise ValueError(f"projection must be {model.config.hidden_size} x {k}")
    params = {}
    for name, arr in model.params.items():
        if name.endswith("norm.scale"):
            params[name] = np.ones(k, np.float32)
            continue
        if name.endswith("norm.bias"):
            params[name] = np.zeros(k, np.float32)
            continue
        out = arr.astype(np.float64)
        for axis in hidden_axes(name):
            out = np.moveaxis(np.tensordot(out, q, axes=([axis], [0])), -1, axis)
        params[name] = out.astype(np.float32)
    return EncoderModel(replace(model.config, hidden_size=k), params)


def trim_vocab_model(model: EncoderModel, tokenizer: Tokenizer, kept_ids: Sequence[int]
                     ) -> tuple[EncoderModel, Tokenizer]:
    """Gather embedding rows and output biases for ``kept_ids``; new id = position."""
    kept = np.asarray(list(kept_ids), dtype=np.int64)
    V = model.config.vocab_size
    if tokenizer.vocab_size != V:
        raise ValueError(f"tokenizer size {tokenizer.vocab_size} != model vocab {V}")
    if len(kept) < NUM_SPECIALS or list(kept[:NUM_SPECIALS]) != list(range(NUM_SPECIALS)):
        raise ValueError("kept ids must start with the special ids 0-4")
    if len(np.unique(kept)) != len(kept) or kept.min() < 0 or kept.max() >= V:
        raise ValueError("kept ids must be unique and inside the current vocabulary")
    params = {k: v.copy() for k, v in model.params.items()}
    params["tok_emb"] = model.params["tok_emb"][kept].copy()
    params["mlm.out_bias"] = model.params["mlm.out_bias"][kept].copy()
    if "mlm.decoder" in params:
        params["mlm.decoder"] = model.params["mlm.decoder"][kept].copy()
    freqs = [tokenizer.frequencies[i] for i in kept]
    dropped = sum(tokenizer.frequencies) - sum(freqs)
    freqs[UNK_ID] += dropped
    new_tok = Tokenizer([tokenizer.tokens[i] for i in kept], freqs)
    return EncoderModel(replace(model.config, vocab_size=len(kept)), params), new_tok


def vocab_remap(kept_ids: Sequence[int]) -> dict[int, int]:
    return {int(old): new for new, old in enumerate(kept_ids)}


# -------------------------------------------------------------------- reports

@dataclass
class StageRecord:
    stage: str
    config: ModelConfig
    label: str = ""
    parent: str | None = None
    checkpoint: str = ""
    val_masked_acc: float | None = None
    metrics: dict = field(default_factory=dict)
    params: int = 0
    reduction_pct: float = 0.0

    def to_dict(self) -> dict:
        return {
            "stage": self.stage, "label": self.label, "parent": self.parent,
            "config": self.config.to_dict(), "checkpoint": self.checkpoint,
            "val_masked_acc": self.val_masked_acc, "metrics": self.metrics,
            "params": self.params, "reduction_pct": self.reduction_pct,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageRecord":
        d = dict(d)
        d["config"] = ModelConfig.from_dict(d["config"])
        return cls(**d)


@dataclass
class CompressionReport:
    stages: list[StageRecord]

    def to_csv(self) -> str:
        metric_names = sorted({m for s in self.stages for m in s.metrics})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "label", "parent", "num_layers", "hidden_size", "num_heads",
                    "ffn_size", "vocab_size", "params", "reduction_pct", "val_masked_acc",
                    *metric_names, "checkpoint"])
        for s in self.stages:
            c = s.config
            acc = "" if s.val_masked_acc is None else f"{s.val_masked_acc:.6f}"
            w.writerow([s.stage, s.label, s.parent or "", c.num_layers, c.hidden_size, c.num_heads,
                        c.ffn_size, c.vocab_size, s.params, f"{s.reduction_pct:.2f}", acc,
                        *[f"{s.metrics[m]:.6f}" if m in s.metrics else "" for m in metric_names],
                        s.checkpoint])
        return buf.getvalue()

    def to_table(self) -> str:
        metric_names = sorted({m for s in self.stages for m in s.metrics})
        header = ["Stage", "Params", "Reduction", "Val acc", *metric_names]
        rows = []
        for s in self.stages:
            acc = "-" if s.val_masked_acc is None else f"{100 * s.val_masked_acc:.1f}"
            rows.append([s.label or s.stage, format_params(s.params), f"{-s.reduction_pct:+.0f}%",
                         acc, *[f"{100 * s.metrics[m]:.1f}" if m in s.metrics else "-"
                                for m in metric_names]])
        widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
        lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)),
                 "  ".join("-" * w for w in widths)]
        lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps([s.to_dict() for s in self.stages], indent=2, sort_keys=True) + "\n"


def format_params(n: int) -> str:
    if n >= 1_000_000:
        return f"{n / 1e6:.0f}M"
    if n >= 1_000:
        return f"{n / 1e3:.1f}K"
    return str(n)


def build_report(stages: Sequence[StageRecord]) -> CompressionReport:
    """Fill in param counts and reductions against the first stage.

    Each stage must be strictly smaller than its parent (the previous stage
    unless ``parent`` names another one).
    """
    if not stages:
        raise ValueError("report needs at least one stage")
    out: list[StageRecord] = []
    by_name: dict[str, StageRecord] = {}
    base = param_count(stages[0].config)
    for i, s in enumerate(stages):
        rec = replace(s, params=param_count(s.config))
        rec.reduction_pct = 100.0 * (base - rec.params) / base
        if i > 0:
            parent = by_name.get(rec.parent) if rec.parent else out[-1]
            if parent is None:
                raise ValueError(f"stage {rec.stage!r}: unknown parent {rec.parent!r}")
            rec.parent = parent.stage
            if rec.params >= parent.params:
                raise ValueError(
                    f"stage {rec.stage!r} ({rec.params}) does not shrink parent "
                    f"{parent.stage!r} ({parent.params})")
        out.append(rec)
        by_name[rec.stage] = rec
    return CompressionReport(out)

