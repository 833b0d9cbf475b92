"""Numpy toolkit for compressing transformer encoders: distillation, pruning, trimming, adapters."""
from .autodiff import Tensor, backward
from .model import ConfigError, EncoderModel, ModelConfig, param_count
from .tokenizer import Corpus, Tokenizer
from .distillation import DistillPlan, train_distill
from .compression import prune_ffn, svd_reduce, trim_vocab_model, truncate_hidden
from .adapters import adapter_param_count, macro_f1, span_f1
from .pipeline import PipelineConfig, run_ablation, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "ConfigError", "EncoderModel", "ModelConfig", "param_count", "Corpus",
    "Tokenizer", "DistillPlan", "train_distill", "prune_ffn", "svd_reduce", "trim_vocab_model",
    "truncate_hidden", "adapter_param_count", "macro_f1", "span_f1", "PipelineConfig",
    "run_ablation", "run_pipeline",
]
