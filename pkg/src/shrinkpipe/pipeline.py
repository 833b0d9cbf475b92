"""Pipeline configs, presets, staged execution with resume, and ablation runners."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .adapters import (AdapterHyperparams, TaskData, adapter_param_count, classification_task,
                       majority_baseline, tagging_task, train_task_adapter)
from .autodiff import seeded_rng
from .checkpoint import load_checkpoint, load_config, save_checkpoint
from .compression import (CompressionReport, StageRecord, accumulate_importance, build_report,
                          prune_ffn, svd_reduce, trim_vocab_model, truncate_hidden, vocab_remap)
from .distillation import (DistillPlan, TrainingTrace, masked_accuracy, mlm_finetune_teacher,
                           train_distill, validation_batches)
from .model import INIT_STRATEGIES, ConfigError, EncoderModel, ModelConfig, init_student
from .tokenizer import (NUM_SPECIALS, UNK_ID, Corpus, CorpusError, SyntheticSpec, Tokenizer,
                        build_tokenizer, encode_corpus, generate_synthetic_corpus,
                        read_classification_tsv, read_conll, read_text_documents,
                        select_top_tokens, train_validation_split)

logger = logging.getLogger(__name__)

STAGE_ORDER = ("teacher-finetune", "layer-KD", "ffn-prune", "hidden-reduce", "vocab-trim")
STAGE_LABELS = {
    "teacher-finetune": "Language-adapted",
    "layer-KD": "Layer reduction",
    "ffn-prune": "+ FFN pruning",
    "hidden-reduce": "+ Hidden {h}",
    "vocab-trim": "+ Vocabulary",
}
STAGE_SEED_STRIDE = 1000
DEFAULT_ARMS = {
    "init-strategies": list(INIT_STRATEGIES),
    "mse-vs-kl": ["mse", "kl"],
    "alpha-sweep": [0.2, 0.4, 0.5, 0.6, 0.8],
    "svd-vs-trunc": ["truncate", "svd"],
    "vocab-sweep": [10000, 20000, 30000, 40000, None],
    "adapter-r": [2, 16],
}
ABLATIONS = tuple(DEFAULT_ARMS)


@dataclass
class StageSpec:
    name: str
    options: dict = field(default_factory=dict)


@dataclass
class PipelineConfig:
    stages: list[StageSpec]
    model: dict = field(default_factory=dict)
    seed: int = 0
    corpus: dict = field(default_factory=dict)
    tasks: dict = field(default_factory=dict)
    ablations: dict = field(default_factory=dict)
    base_checkpoint: str | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        validate_stage_order([s.name for s in self.stages])

    @classmethod
    def from_dict(cls, raw: dict, base_dir=None) -> "PipelineConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw = copy.deepcopy(raw)
        known = {"stages", "model", "seed", "corpus", "tasks", "ablations", "base_checkpoint"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        stages = []
        for entry in raw.get("stages", []):
            if not isinstance(entry, dict) or "name" not in entry:
                raise ConfigError(f"stage entries need a 'name': {entry!r}")
            entry = dict(entry)
            stages.append(StageSpec(entry.pop("name"), entry))
        return cls(stages=stages, model=raw.get("model", {}), seed=int(raw.get("seed", 0)),
                   corpus=raw.get("corpus", {}), tasks=raw.get("tasks", {}),
                   ablations=raw.get("ablations", {}), base_checkpoint=raw.get("base_checkpoint"),
                   base_dir=Path(base_dir) if base_dir else Path.cwd())

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, p.parent)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "model": self.model,
               "stages": [{"name": s.name, **s.options} for s in self.stages]}
        for key in ("corpus", "tasks", "ablations"):
            if getattr(self, key):
                out[key] = getattr(self, key)
        if self.base_checkpoint:
            out["base_checkpoint"] = self.base_checkpoint
        return out

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def stage(self, name: str) -> StageSpec | None:
        return next((s for s in self.stages if s.name == name), None)


def validate_stage_order(names: list[str]) -> None:
    if not names:
        raise ConfigError("pipeline has no stages")
    for n in names:
        if n not in STAGE_ORDER:
            raise ConfigError(f"unknown stage {n!r}; valid stages: {', '.join(STAGE_ORDER)}")
    idx = [STAGE_ORDER.index(n) for n in names]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ConfigError(f"stage order {names} is not a subsequence of {list(STAGE_ORDER)}")


# -------------------------------------------------------------------- presets

def _full_size_preset(vocab: int, positions: int) -> dict:
    return {
        "model": {"num_layers": 12, "hidden_size": 768, "num_heads": 12, "ffn_size": 3072,
                  "vocab_size": vocab, "max_positions": positions},
        "stages": [
            {"name": "teacher-finetune"},
            {"name": "layer-KD", "num_layers": 6, "strategy": "last-k"},
            {"name": "ffn-prune", "ffn_size": 2048},
            {"name": "hidden-reduce", "hidden_sizes": [564, 456, 312]},
            {"name": "vocab-trim", "vocab_size": 40000},
        ],
    }


def toy_preset() -> dict:
    plan = {"epochs": 3, "learning_rate": 3e-3, "batch_size": 32}
    return {
        "seed": 7,
        "model": {"num_layers": 4, "hidden_size": 32, "num_heads": 4, "ffn_size": 64,
                  "vocab_size": 400, "max_positions": 33},
        "corpus": {"synthetic": {"num_topics": 4, "vocab_per_topic": 40, "doc_count": 1500,
                                 "doc_length": 32, "seed": 3},
                   "task_docs": [240, 80, 160]},
        "stages": [
            {"name": "teacher-finetune", "plan": plan},
            {"name": "layer-KD", "num_layers": 2, "strategy": "last-k", "plan": plan},
            {"name": "ffn-prune", "ffn_size": 48, "batches": 4},
            {"name": "hidden-reduce", "hidden_sizes": [24], "plan": plan},
            {"name": "vocab-trim", "vocab_size": 120},
        ],
        "tasks": {"classification": {"r": 2, "learning_rate": 3e-3, "epochs": 8, "batch_size": 16}},
        "ablations": {"vocab-sweep": {"arms": [40, 80, 120, None]}},
    }


PRESETS: dict[str, Callable[[], dict]] = {
    "xlmr-table1": lambda: _full_size_preset(250002, 514),
    "mbert-table11": lambda: _full_size_preset(119547, 512),
    "toy": toy_preset,
}


def load_preset(name: str) -> PipelineConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(sorted(PRESETS))}")
    return PipelineConfig.from_dict(PRESETS[name]())


# --------------------------------------------------------- metadata planning

def _require(opts: dict, key: str, stage: str):
    if key not in opts:
        raise ConfigError(f"stage {stage!r} needs option {key!r}")
    return opts[key]


def _hidden_sizes(opts: dict) -> list[int]:
    if "hidden_sizes" in opts:
        return [int(h) for h in opts["hidden_sizes"]]
    if "hidden_size" in opts:
        return [int(opts["hidden_size"])]
    raise ConfigError("stage 'hidden-reduce' needs hidden_size or hidden_sizes")


def model_config(cfg: PipelineConfig) -> ModelConfig:
    if cfg.base_checkpoint:
        return load_config(cfg.resolve(cfg.base_checkpoint))
    try:
        return ModelConfig.from_dict(cfg.model)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"model section incomplete: {exc}") from exc


def plan_stage_records(cfg: PipelineConfig, base: ModelConfig | None = None) -> list[StageRecord]:
    """Stage configs derived from metadata alone; no weights are touched.

    Hidden-reduce with several sizes branches the pipeline; each branch gets
    its own vocab-trim stage named after the hidden size.
    """
    base = model_config(cfg) if base is None else base
    records: list[StageRecord] = []
    heads: list[tuple[str | None, ModelConfig]] = [(None, base)]
    if cfg.stages[0].name != "teacher-finetune":
        records.append(StageRecord("base", base, label="Base model"))
        heads = [("base", base)]
    for spec in cfg.stages:
        o = spec.options
        new_heads = []
        for parent, c in heads:
            if spec.name == "teacher-finetune":
                outs = [(spec.name, c, STAGE_LABELS[spec.name])]
            elif spec.name == "layer-KD":
                k = int(_require(o, "num_layers", spec.name))
                outs = [(spec.name, replace(c, num_layers=k), STAGE_LABELS[spec.name])]
            elif spec.name == "ffn-prune":
                f = int(_require(o, "ffn_size", spec.name))
                outs = [(spec.name, replace(c, ffn_size=f), STAGE_LABELS[spec.name])]
            elif spec.name == "hidden-reduce":
                outs = []
                for h in _hidden_sizes(o):
                    if h < 1 or h % c.num_heads:
                        raise ConfigError(f"hidden size {h} not divisible by {c.num_heads} heads")
                    outs.append((f"hidden-reduce-{h}", replace(c, hidden_size=h),
                                 STAGE_LABELS[spec.name].format(h=h)))
            else:
                n = int(_require(o, "vocab_size", spec.name))
                if n < NUM_SPECIALS:
                    raise ConfigError(f"vocab_size must be at least {NUM_SPECIALS}")
                suffix = parent.rsplit("-", 1)[1] if parent and parent.startswith("hidden-reduce-") else ""
                name = f"vocab-trim-{suffix}" if suffix else "vocab-trim"
                outs = [(name, replace(c, vocab_size=min(n, c.vocab_size)), STAGE_LABELS[spec.name])]
            for name, new_c, label in outs:
                try:
                    new_c = ModelConfig.from_dict(new_c.to_dict())
                except ValueError as exc:
                    raise ConfigError(f"stage {name!r}: {exc}") from exc
                records.append(StageRecord(name, new_c, label=label, parent=parent))
                new_heads.append((name, new_c))
        heads = new_heads
    return depth_first(records)


def depth_first(records: list[StageRecord]) -> list[StageRecord]:
    """Order records so each branch is followed by its descendants."""
    children: dict[str | None, list[StageRecord]] = {}
    for r in records:
        children.setdefault(r.parent, []).append(r)
    out: list[StageRecord] = []
    stack = list(reversed(children.get(None, [])))
    while stack:
        r = stack.pop()
        out.append(r)
        stack.extend(reversed(children.get(r.stage, [])))
    return out


def count_params_report(cfg: PipelineConfig, base: ModelConfig | None = None) -> CompressionReport:
    try:
        return build_report(plan_stage_records(cfg, base))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


# ------------------------------------------------------------------ data prep

@dataclass
class PreparedData:
    tokenizer: Tokenizer
    train: Corpus
    validation: Corpus
    task_pairs: dict = field(default_factory=dict)


def prepare_data(cfg: PipelineConfig, tokenizer: Tokenizer | None = None) -> PreparedData:
    """Read or generate the corpus, split it, and build a tokenizer if none is given."""
    c = cfg.corpus
    task_pairs: dict = {}
    if "synthetic" in c:
        spec_d = dict(c["synthetic"])
        splits = [int(x) for x in c.get("task_docs", [0, 0, 0])]
        if len(splits) != 3:
            raise ConfigError("task_docs must list train/dev/test document counts")
        total = int(spec_d.get("doc_count", SyntheticSpec().doc_count))
        spec_d["doc_count"] = total + sum(splits)
        try:
            data = generate_synthetic_corpus(SyntheticSpec(**spec_d))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad synthetic corpus spec: {exc}") from exc
        texts = data.texts[:total]
        a, b = total + splits[0], total + splits[0] + splits[1]
        if sum(splits):
            task_pairs["classification"] = (data.classification[total:a], data.classification[a:b],
                                            data.classification[b:])
            task_pairs["tagging"] = (data.tagging[total:a], data.tagging[a:b], data.tagging[b:])
        train_texts, val_texts = train_validation_split(texts, 0.05, cfg.seed)
    elif "train" in c:
        train_texts = read_text_documents(cfg.resolve(c["train"]))
        if c.get("validation"):
            val_texts = read_text_documents(cfg.resolve(c["validation"]))
        else:
            train_texts, val_texts = train_validation_split(train_texts, 0.05, cfg.seed)
    else:
        raise ConfigError("corpus section needs 'synthetic' or 'train'")
    if not train_texts:
        raise CorpusError("training corpus is empty")
    if tokenizer is None:
        tokenizer = build_tokenizer(train_texts, int(cfg.model.get("vocab_size", 30000)))
    return PreparedData(tokenizer, encode_corpus(tokenizer, train_texts, "train"),
                        encode_corpus(tokenizer, val_texts, "validation"), task_pairs)


def load_task(cfg: PipelineConfig, kind: str, tokenizer: Tokenizer,
              data: PreparedData | None = None) -> TaskData | None:
    spec = cfg.tasks.get(kind)
    if spec is None:
        return None
    if "train" in spec:
        reader = read_classification_tsv if kind == "classification" else read_conll
        splits = [reader(cfg.resolve(spec[s])) for s in ("train", "dev", "test")]
    elif data is not None and kind in data.task_pairs:
        splits = data.task_pairs[kind]
    else:
        raise ConfigError(f"task {kind!r} has no data files and the corpus is not synthetic")
    build = classification_task if kind == "classification" else tagging_task
    return build(tokenizer, *splits)


def adapter_hyperparams(kind: str, spec: dict, seed: int) -> AdapterHyperparams:
    overrides = {k: spec[k] for k in ("learning_rate", "batch_size", "epochs", "max_length") if k in spec}
    return AdapterHyperparams.defaults(kind, seed=seed, **overrides)


def stage_plan(opts: dict, default_seed: int, **overrides) -> DistillPlan:
    d = {**opts.get("plan", {}), **overrides}
    d.setdefault("seed", default_seed)
    try:
        return DistillPlan.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad distillation plan: {exc}") from exc


def base_model(cfg: PipelineConfig, data: PreparedData | None = None) -> tuple[EncoderModel, Tokenizer | None]:
    """Checkpointed base model, or a seeded random one sized to the tokenizer."""
    if cfg.base_checkpoint:
        return load_checkpoint(cfg.resolve(cfg.base_checkpoint))
    mcfg = model_config(cfg)
    if data is not None:
        mcfg = replace(mcfg, vocab_size=data.tokenizer.vocab_size)
    return EncoderModel.random(mcfg, seeded_rng(cfg.seed)), None


# ------------------------------------------------------------------- pipeline

@dataclass
class _Head:
    name: str | None
    model: EncoderModel
    tokenizer: Tokenizer
    train: Corpus
    validation: Corpus


def stage_dir(out: Path, name: str) -> Path:
    return Path(out) / "checkpoints" / name


def _save_stage(out: Path, record: StageRecord, head: _Head, trace: TrainingTrace | None,
                kept: list[int] | None = None) -> None:
    d = stage_dir(out, record.stage)
    save_checkpoint(head.model, head.tokenizer, d)
    if kept is not None:
        (d / "kept_ids.json").write_text(json.dumps(kept) + "\n")
    (d / "stage.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    if trace is not None:
        (out / "traces").mkdir(parents=True, exist_ok=True)
        trace.write_csv(out / "traces" / f"{record.stage}.csv")


def _load_stage(out: Path, name: str, parent: _Head) -> tuple[StageRecord, _Head]:
    d = stage_dir(out, name)
    if not (d / "stage.json").exists():
        raise FileNotFoundError(f"cannot resume: no checkpoint for stage {name!r} under {out}")
    record = StageRecord.from_dict(json.loads((d / "stage.json").read_text()))
    model, tok = load_checkpoint(d)
    train, val = parent.train, parent.validation
    if (d / "kept_ids.json").exists():
        remap = vocab_remap(json.loads((d / "kept_ids.json").read_text()))
        train, val = train.remap(remap), val.remap(remap)
    return record, _Head(name, model, tok or parent.tokenizer, train, val)


def run_pipeline(cfg: PipelineConfig, out_dir, *, resume_from: str | None = None,
                 only: str | None = None) -> CompressionReport:
    """Run every stage in order and checkpoint each one under ``out_dir``.

    ``resume_from`` names a stage kind such as ``ffn-prune``; earlier stages
    are reloaded from their checkpoints instead of recomputed. ``only`` runs
    one stage kind on top of existing checkpoints and stops there.
    """
    out = Path(out_dir)
    names = [s.name for s in cfg.stages]
    start = only or resume_from
    if start is not None and start not in names:
        raise ConfigError(f"stage {start!r} is not part of this pipeline ({', '.join(names)})")
    first_live = names.index(start) if start else 0
    last_live = names.index(only) if only else len(names) - 1
    started = time.time()

    model, tok = base_model(cfg) if cfg.base_checkpoint else (None, None)
    data = prepare_data(cfg, tok)
    if model is None:
        model, _ = base_model(cfg, data)
    if model.config.vocab_size != data.tokenizer.vocab_size:
        raise ConfigError(f"base model vocab {model.config.vocab_size} does not match "
                          f"tokenizer size {data.tokenizer.vocab_size}")
    planned = plan_stage_records(cfg, model.config)
    try:
        build_report(planned)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    children: dict[str | None, list[str]] = {}
    for r in planned:
        children.setdefault(r.parent, []).append(r.stage)

    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    records: list[StageRecord] = []
    heads = [_Head(None, model, data.tokenizer, data.train, data.validation)]
    if planned[0].stage == "base":
        base_rec = replace(planned[0], checkpoint=str(Path("checkpoints") / "base"))
        heads = [_Head("base", model, data.tokenizer, data.train, data.validation)]
        if first_live == 0:
            _save_stage(out, base_rec, heads[0], None)
        records.append(base_rec)

    for idx, spec in enumerate(cfg.stages[: last_live + 1]):
        seed = cfg.seed + STAGE_SEED_STRIDE * (idx + 1)
        new_heads = []
        for head in heads:
            for stage_name in children.get(head.name, []):
                if idx < first_live:
                    rec, new_head = _load_stage(out, stage_name, head)
                else:
                    rec, new_head, trace, kept = _run_stage(spec, stage_name, head, seed)
                    if idx == len(names) - 1:
                        rec = replace(rec, metrics={**rec.metrics,
                                                    **task_metrics(cfg, new_head, data, seed)})
                    _save_stage(out, rec, new_head, trace, kept)
                records.append(rec)
                new_heads.append(new_head)
        heads = new_heads

    report = build_report(depth_first(records))
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "compression.csv").write_text(report.to_csv())
    (reports / "compression.txt").write_text(report.to_table())
    (reports / "compression.json").write_text(report.to_json())
    meta = {"started": started, "finished": time.time(), "seed": cfg.seed,
            "resume_from": resume_from, "only": only}
    (reports / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return report


def _run_stage(spec: StageSpec, stage_name: str, head: _Head, seed: int):
    o = spec.options
    trace = kept = None
    model, tok, train, val = head.model, head.tokenizer, head.train, head.validation
    label = STAGE_LABELS[spec.name]
    plan = stage_plan(o, seed)
    logger.info("running stage %s", stage_name)
    if spec.name == "teacher-finetune":
        model, trace = mlm_finetune_teacher(model, train, plan, val)
    elif spec.name == "layer-KD":
        strategy = o.get("strategy", plan.init_strategy)
        student = init_student(model, strategy, int(o["num_layers"]), seeded_rng(seed))
        model, trace = train_distill(student, model, train, plan, val)
    elif spec.name == "ffn-prune":
        imp = accumulate_importance(model, val, int(o.get("batches", 8)),
                                    batch_size=plan.batch_size, seed=seed, mask_rate=plan.mask_rate)
        model = prune_ffn(model, imp, int(o["ffn_size"]))
    elif spec.name == "hidden-reduce":
        h = int(stage_name.rsplit("-", 1)[1])
        label = label.format(h=h)
        method = o.get("method", "truncate")
        if method not in ("truncate", "svd"):
            raise ConfigError(f"unknown hidden-reduce method {method!r}; expected truncate or svd")
        reduced = truncate_hidden(model, h) if method == "truncate" else svd_reduce(model, h)
        if o.get("distill", True):
            model, trace = train_distill(reduced, model, train, plan, val)
        else:
            model = reduced
    else:
        kept = select_top_tokens(tok, train, min(int(o["vocab_size"]), model.config.vocab_size))
        model, tok = trim_vocab_model(model, tok, kept)
        remap = vocab_remap(kept)
        train, val = train.remap(remap), val.remap(remap)
    acc = stage_accuracy(model, val, plan)
    record = StageRecord(stage_name, model.config, label=label, parent=head.name,
                         checkpoint=str(Path("checkpoints") / stage_name), val_masked_acc=acc)
    return record, _Head(stage_name, model, tok, train, val), trace, kept


def stage_accuracy(model: EncoderModel, val: Corpus, plan: DistillPlan) -> float | None:
    seq_len = plan.seq_len or model.config.max_positions
    batches = validation_batches(val, seq_len, plan.batch_size, plan.mask_rate,
                                 model.config.vocab_size)
    return masked_accuracy(model, batches) if batches else None


def task_metrics(cfg: PipelineConfig, head: _Head, data: PreparedData, seed: int) -> dict:
    metrics: dict = {}
    for kind, key in (("classification", "tc"), ("tagging", "tag")):
        task = load_task(cfg, kind, head.tokenizer, data)
        if task is None:
            continue
        spec = cfg.tasks[kind]
        result = train_task_adapter(head.model, task, int(spec.get("r", 16)),
                                    adapter_hyperparams(kind, spec, seed))
        metrics[f"{key}_f1"] = result.metrics["test"]
        if kind == "classification":
            metrics["tc_majority_f1"] = majority_baseline(task)
    return metrics


# ------------------------------------------------------------------ ablations

@dataclass
class AblationResult:
    name: str
    arms: list
    traces: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    note: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.traces:
            w.writerow(["arm", "epoch", "train_loss", "val_masked_acc"])
            for arm in self.arms:
                tr = self.traces[_arm_key(arm)]
                for e, (loss, acc) in enumerate(zip(tr.train_loss, tr.val_masked_acc), 1):
                    w.writerow([_arm_key(arm), e, f"{loss:.6f}", f"{acc:.6f}"])
        else:
            cols = sorted({k for m in self.metrics.values() for k in m})
            w.writerow(["arm", *cols])
            for arm in self.arms:
                m = self.metrics[_arm_key(arm)]
                w.writerow([_arm_key(arm), *[_fmt(m.get(c)) for c in cols]])
        return buf.getvalue()


def _arm_key(arm) -> str:
    return "full" if arm is None else str(arm)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _ablation_teacher(cfg: PipelineConfig, data: PreparedData) -> EncoderModel:
    model, _ = base_model(cfg, data)
    spec = cfg.stage("teacher-finetune")
    if spec is not None:
        model, _ = mlm_finetune_teacher(model, data.train, stage_plan(spec.options, cfg.seed),
                                        data.validation)
    return model


def run_ablation(name: str, cfg: PipelineConfig, out_dir=None, arms: list | None = None,
                 teacher: EncoderModel | None = None, data: PreparedData | None = None
                 ) -> AblationResult:
    """Run every arm of one ablation under identical budgets; arm i uses seed base + i."""
    if name not in DEFAULT_ARMS:
        raise ConfigError(f"unknown ablation {name!r}; valid ablations: {', '.join(ABLATIONS)}")
    arms = list(arms if arms is not None else cfg.ablations.get(name, {}).get("arms", DEFAULT_ARMS[name]))
    if not arms:
        raise ConfigError(f"ablation {name!r} has no arms")
    data = data or prepare_data(cfg, load_checkpoint(cfg.resolve(cfg.base_checkpoint))[1]
                                if cfg.base_checkpoint else None)
    teacher = teacher or _ablation_teacher(cfg, data)
    kd = cfg.stage("layer-KD")
    kd_opts = kd.options if kd else {}
    k = int(kd_opts.get("num_layers", max(1, teacher.config.num_layers // 2)))
    V = teacher.config.vocab_size

    if name == "vocab-sweep":
        sizes = []
        for a in arms:
            n = V if a is None else min(int(a), V)
            key = None if n == V else n
            if key not in sizes:
                sizes.append(key)
        arms = sizes
    result = AblationResult(name, arms)

    for i, arm in enumerate(arms):
        seed = cfg.seed + i
        key = _arm_key(arm)
        if name in ("init-strategies", "mse-vs-kl", "alpha-sweep"):
            overrides = ({"loss_kind": arm} if name == "mse-vs-kl" else
                         {"alpha": float(arm)} if name == "alpha-sweep" else {})
            plan = stage_plan(kd_opts, seed, seed=seed, **overrides)
            strategy = arm if name == "init-strategies" else kd_opts.get("strategy", plan.init_strategy)
            student = init_student(teacher, strategy, k, seeded_rng(seed))
            _, result.traces[key] = train_distill(student, teacher, data.train, plan, data.validation)
        elif name == "svd-vs-trunc":
            hr = cfg.stage("hidden-reduce")
            hr_opts = hr.options if hr else {}
            h = (_hidden_sizes(hr_opts)[0] if hr else
                 teacher.config.hidden_size // 2 // teacher.config.num_heads * teacher.config.num_heads)
            if arm not in ("truncate", "svd"):
                raise ConfigError(f"svd-vs-trunc arms must be truncate or svd, got {arm!r}")
            reduced = truncate_hidden(teacher, h) if arm == "truncate" else svd_reduce(teacher, h)
            plan = stage_plan(hr_opts, seed, seed=seed)
            _, result.traces[key] = train_distill(reduced, teacher, data.train, plan, data.validation)
        elif name == "vocab-sweep":
            n = V if arm is None else arm
            kept = select_top_tokens(data.tokenizer, data.train, n)
            model, _ = trim_vocab_model(teacher, data.tokenizer, kept)
            remap = vocab_remap(kept)
            val = data.validation.remap(remap)
            total = sum(len(d) for d in val.documents)
            unk = sum(t == UNK_ID for d in val.documents for t in d)
            result.metrics[key] = {
                "vocab_size": n, "params": _params(model),
                "val_masked_acc": stage_accuracy(model, val, stage_plan({}, seed)),
                "unk_rate": unk / max(total, 1),
            }
        else:
            kind = "classification" if "classification" in cfg.tasks or not cfg.tasks else "tagging"
            spec = cfg.tasks.get(kind, {})
            task = load_task(replace(cfg, tasks={kind: spec}), kind, data.tokenizer, data)
            res = train_task_adapter(teacher, task, int(arm), adapter_hyperparams(kind, spec, seed))
            result.metrics[key] = {"adapter_params": adapter_param_count(teacher.config, int(arm)),
                                   "dev_f1": res.metrics["dev"], "test_f1": res.metrics["test"]}

    if name == "mse-vs-kl" and {"mse", "kl"} <= set(result.traces):
        result.note = convergence_note(result.traces["mse"], result.traces["kl"])
    if out_dir is not None:
        reports = Path(out_dir) / "reports"
        reports.mkdir(parents=True, exist_ok=True)
        (reports / f"ablation_{name}.csv").write_text(result.to_csv())
        if result.note:
            (reports / f"ablation_{name}.txt").write_text(result.note + "\n")
    return result


def _params(model: EncoderModel) -> int:
    return int(sum(v.size for v in model.params.values()))


def convergence_note(mse: TrainingTrace, kl: TrainingTrace) -> str:
    """Compare mean validation accuracy across epochs (area under the curve)."""
    a, b = float(np.mean(mse.val_masked_acc)), float(np.mean(kl.val_masked_acc))
    verdict = "yes" if a > b else "no"
    return (f"mse_converged_faster: {verdict} (mean val masked acc over epochs: "
            f"mse {a:.4f}, kl {b:.4f}; final: mse {mse.val_masked_acc[-1]:.4f}, "
            f"kl {kl.val_masked_acc[-1]:.4f})")
