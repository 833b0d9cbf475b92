"""Post-LN transformer encoder with a tied MLM head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02
NORM_EPS = 1e-12
INIT_STRATEGIES = ("first-k", "last-k", "stride", "first+last", "random")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_size: int
    num_heads: int
    ffn_size: int
    vocab_size: int
    max_positions: int
    tie_output_projection: bool = True

    def __post_init__(self):
        for f in fields(self):
            if f.name == "tie_output_projection":
                continue
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{f.name} must be a positive integer, got {value!r}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_count(config: ModelConfig) -> int:
    """Exact number of scalars in a model of this shape (metadata only)."""
    H, F, V, P, L = (config.hidden_size, config.ffn_size, config.vocab_size,
                     config.max_positions, config.num_layers)
    embeddings = V * H + P * H + 2 * H
    per_layer = 4 * (H * H + H) + 2 * H + H * F + F + F * H + H + 2 * H
    head = H * H + H + 2 * H + V
    untied = 0 if config.tie_output_projection else V * H
    return embeddings + L * per_layer + head + untied


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor name -> shape, in canonical order."""
    H, F, V, P = config.hidden_size, config.ffn_size, config.vocab_size, config.max_positions
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (V, H),
        "pos_emb": (P, H),
        "emb_norm.scale": (H,),
        "emb_norm.bias": (H,),
    }
    for i in range(config.num_layers):
        p = f"layer.{i}."
        for w in ("q", "k", "v", "o"):
            shapes[p + f"w{w}"] = (H, H)
            shapes[p + f"b{w}"] = (H,)
        shapes[p + "attn_norm.scale"] = (H,)
        shapes[p + "attn_norm.bias"] = (H,)
        shapes[p + "w1"] = (H, F)
        shapes[p + "b1"] = (F,)
        shapes[p + "w2"] = (F, H)
        shapes[p + "b2"] = (H,)
        shapes[p + "ffn_norm.scale"] = (H,)
        shapes[p + "ffn_norm.bias"] = (H,)
    shapes["mlm.dense"] = (H, H)
    shapes["mlm.dense_bias"] = (H,)
    shapes["mlm.norm.scale"] = (H,)
    shapes["mlm.norm.bias"] = (H,)
    shapes["mlm.out_bias"] = (V,)
    if not config.tie_output_projection:
        shapes["mlm.decoder"] = (V, H)
    return shapes


def _is_norm_scale(name: str) -> bool:
    return name.endswith("norm.scale")


_MATRICES = {"tok_emb", "pos_emb", "wq", "wk", "wv", "wo", "w1", "w2", "dense", "decoder"}


def _is_matrix(name: str) -> bool:
    return name.split(".")[-1] in _MATRICES


class EncoderModel:
    """Named float32 tensors plus the config that shapes them."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter names do not match config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape} != expected {shape}")
        self.config = config
        self.params = {name: np.ascontiguousarray(params[name], dtype=np.float32) for name in expected}

    @classmethod
    def random(cls, config: ModelConfig, rng: np.random.Generator) -> "EncoderModel":
        params = {}
        for name, shape in param_shapes(config).items():
            if _is_norm_scale(name):
                params[name] = np.ones(shape, np.float32)
            elif _is_matrix(name):
                params[name] = (rng.standard_normal(shape) * INIT_STD).astype(np.float32)
            else:
                params[name] = np.zeros(shape, np.float32)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "EncoderModel":
        return cls(config, {n: np.zeros(s, np.float32) for n, s in param_shapes(config).items()})

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_allocated(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}


def _check_ids(config: ModelConfig, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"token ids must be batch x seq, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("token ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    if ids.shape[1] > config.max_positions:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_positions {config.max_positions}")
    return ids.astype(np.int64)


def _norm(x: Tensor, t: dict[str, Tensor], prefix: str, enabled: bool) -> Tensor:
    if not enabled:
        return x
    return ad.layer_norm(x, t[prefix + ".scale"], t[prefix + ".bias"], eps=NORM_EPS)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def encode(config: ModelConfig, t: dict[str, Tensor], ids: np.ndarray, *,
           adapters=None, layer_norm: bool = True, ffn_delta: dict | None = None,
           cache: dict | None = None, pad_id: int = 0) -> Tensor:
    """Final hidden states, batch x seq x H.

    ``adapters`` maps layer index -> callable(Tensor) -> Tensor applied to the
    FFN output before its residual add. ``ffn_delta`` adds constants to the
    post-GELU FFN activations (used by saliency checks). When ``cache`` is a
    dict, the post-GELU activation Tensor of each layer is stored under
    ``("ffn_act", i)``.
    """
    ids = _check_ids(config, ids)
    B, S = ids.shape
    H, nh = config.hidden_size, config.num_heads
    hd = H // nh
    x = ad.add(ad.embedding(t["tok_emb"], ids), t["pos_emb"][:S])
    x = _norm(x, t, "emb_norm", layer_norm)

    key_pad = (ids == pad_id)
    attn_bias = None
    if key_pad.any():
        bias = np.where(key_pad, np.float32(-1e9), np.float32(0))[:, None, None, :]
        attn_bias = Tensor(bias.astype(x.data.dtype))
    inv_scale = 1.0 / math.sqrt(hd)

    for i in range(config.num_layers):
        p = f"layer.{i}."

        def heads(z: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(z, (B, S, nh, hd)), (0, 2, 1, 3))

        q = heads(_linear(x, t[p + "wq"], t[p + "bq"]))
        k = heads(_linear(x, t[p + "wk"], t[p + "bk"]))
        v = heads(_linear(x, t[p + "wv"], t[p + "bv"]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_scale)
        if attn_bias is not None:
            scores = ad.add(scores, attn_bias)
        probs = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (B, S, H))
        attn_out = _linear(ctx, t[p + "wo"], t[p + "bo"])
        x = _norm(ad.add(x, attn_out), t, p + "attn_norm", layer_norm)

        act = ad.gelu(_linear(x, t[p + "w1"], t[p + "b1"]))
        if ffn_delta is not None and i in ffn_delta:
            act = ad.add(act, Tensor(np.asarray(ffn_delta[i], dtype=act.data.dtype)))
        if cache is not None:
            cache[("ffn_act", i)] = act
        ffn_out = _linear(act, t[p + "w2"], t[p + "b2"])
        if adapters is not None and i in adapters:
            ffn_out = adapters[i](ffn_out)
        x = _norm(ad.add(x, ffn_out), t, p + "ffn_norm", layer_norm)
    return x


def mlm_logits(config: ModelConfig, t: dict[str, Tensor], hidden: Tensor,
               layer_norm: bool = True) -> Tensor:
    h = ad.gelu(_linear(hidden, t["mlm.dense"], t["mlm.dense_bias"]))
    h = _norm(h, t, "mlm.norm", layer_norm)
    decoder = t["tok_emb"] if config.tie_output_projection else t["mlm.decoder"]
    return ad.add(ad.matmul(h, ad.transpose(decoder, (1, 0))), t["mlm.out_bias"])


def forward(model: EncoderModel, ids: np.ndarray, *, tensors: dict[str, Tensor] | None = None,
            **kwargs) -> Tensor:
    """Vocabulary logits, batch x seq x V."""
    t = tensors if tensors is not None else model.tensors()
    layer_norm = kwargs.get("layer_norm", True)
    hidden = encode(model.config, t, ids, **kwargs)
    return mlm_logits(model.config, t, hidden, layer_norm=layer_norm)


def select_teacher_layers(num_teacher: int, strategy: str, k: int) -> list[int]:
    if strategy not in INIT_STRATEGIES:
        raise ValueError(f"unknown init strategy {strategy!r}; expected one of {INIT_STRATEGIES}")
    if not 1 <= k <= num_teacher:
        raise ValueError(f"k={k} must be in [1, {num_teacher}]")
    if strategy == "first-k":
        return list(range(k))
    if strategy == "last-k":
        return list(range(num_teacher - k, num_teacher))
    if strategy == "stride":
        if num_teacher % k:
            raise ValueError(f"stride needs teacher layers ({num_teacher}) to be a multiple of k ({k})")
        step = num_teacher // k
        return list(range(0, num_teacher, step))
    if strategy == "first+last":
        head = (k + 1) // 2
        tail = k // 2
        return list(range(head)) + list(range(num_teacher - tail, num_teacher))
    return []


def init_student(teacher: EncoderModel, strategy: str, k: int,
                 rng: np.random.Generator | None = None) -> EncoderModel:
    """Build a k-layer student from ``teacher``."""
    chosen = select_teacher_layers(teacher.config.num_layers, strategy, k)
    config = replace(teacher.config, num_layers=k)
    if strategy == "random":
        if rng is None:
            raise ValueError("random initialization needs an rng")
        return EncoderModel.random(config, rng)
    params = {}
    for name, arr in teacher.params.items():
        if not name.startswith("layer."):
            params[name] = arr.copy()
    for new_idx, old_idx in enumerate(chosen):
        src = f"layer.{old_idx}."
        for name, arr in teacher.params.items():
            if name.startswith(src):
                params[f"layer.{new_idx}." + name[len(src):]] = arr.copy()
    return EncoderModel(config, params)
