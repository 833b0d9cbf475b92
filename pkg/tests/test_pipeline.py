import json
from pathlib import Path

import numpy as np
import pytest

from shrinkpipe.checkpoint import load_checkpoint, save_checkpoint
from shrinkpipe.cli import EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_NUMERIC, main
from shrinkpipe.model import ConfigError, EncoderModel, ModelConfig
from shrinkpipe.autodiff import seeded_rng
from shrinkpipe.pipeline import (ABLATIONS, PipelineConfig, count_params_report, load_preset,
                                 plan_stage_records, run_ablation, run_pipeline)

PLAN = {"epochs": 1, "learning_rate": 3e-3, "batch_size": 16}


def tiny_config(**overrides) -> dict:
    cfg = {
        "seed": 3,
        "model": {"num_layers": 2, "hidden_size": 16, "num_heads": 2, "ffn_size": 24,
                  "vocab_size": 200, "max_positions": 17},
        "corpus": {"synthetic": {"num_topics": 3, "vocab_per_topic": 20, "doc_count": 200,
                                 "doc_length": 16, "seed": 5},
                   "task_docs": [60, 30, 30]},
        "stages": [
            {"name": "teacher-finetune", "plan": PLAN},
            {"name": "layer-KD", "num_layers": 1, "plan": PLAN},
            {"name": "ffn-prune", "ffn_size": 16, "batches": 2},
            {"name": "hidden-reduce", "hidden_sizes": [8, 12], "plan": PLAN},
            {"name": "vocab-trim", "vocab_size": 40},
        ],
        "tasks": {"classification": {"r": 2, "learning_rate": 3e-3, "epochs": 2}},
    }
    cfg.update(overrides)
    return cfg


def write_config(tmp_path, raw) -> Path:
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


def tree(root: Path, skip=("run_meta.json",)) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    report = run_pipeline(PipelineConfig.from_dict(tiny_config()), out)
    return out, report


# ------------------------------------------------------------------- config

def test_empty_stage_list_is_config_error():
    with pytest.raises(ConfigError, match="no stages"):
        PipelineConfig.from_dict({"stages": []})


def test_stage_order_violation_is_config_error():
    with pytest.raises(ConfigError, match="subsequence"):
        PipelineConfig.from_dict({"stages": [{"name": "ffn-prune"}, {"name": "layer-KD"}]})
    with pytest.raises(ConfigError, match="unknown stage"):
        PipelineConfig.from_dict({"stages": [{"name": "quantize"}]})


def test_subsequence_allowed():
    cfg = PipelineConfig.from_dict({"stages": [{"name": "layer-KD", "num_layers": 1},
                                               {"name": "vocab-trim", "vocab_size": 10}]})
    assert [s.name for s in cfg.stages] == ["layer-KD", "vocab-trim"]


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"stages": [{"name": "layer-KD"}], "stagez": []})


def test_unknown_preset_lists_valid_names():
    with pytest.raises(ConfigError, match="mbert-table11, toy, xlmr-table1"):
        load_preset("bert-large")


def test_paths_resolve_relative_to_config(tmp_path):
    path = write_config(tmp_path, {"stages": [{"name": "layer-KD"}], "corpus": {"train": "c.txt"}})
    cfg = PipelineConfig.load(path)
    assert cfg.resolve("c.txt") == tmp_path / "c.txt"


def test_plan_branches_and_names():
    names = [(r.stage, r.parent) for r in plan_stage_records(PipelineConfig.from_dict(tiny_config()))]
    assert names == [
        ("teacher-finetune", None), ("layer-KD", "teacher-finetune"), ("ffn-prune", "layer-KD"),
        ("hidden-reduce-8", "ffn-prune"), ("vocab-trim-8", "hidden-reduce-8"),
        ("hidden-reduce-12", "ffn-prune"), ("vocab-trim-12", "hidden-reduce-12"),
    ]


def test_plan_rejects_bad_hidden():
    raw = tiny_config()
    raw["stages"][3]["hidden_sizes"] = [9]
    with pytest.raises(ConfigError, match="divisible"):
        plan_stage_records(PipelineConfig.from_dict(raw))


def test_non_shrinking_stage_is_config_error():
    raw = tiny_config()
    raw["stages"][2]["ffn_size"] = 24
    with pytest.raises(ConfigError, match="does not shrink"):
        count_params_report(PipelineConfig.from_dict(raw))


def test_presets_emit_nine_rows():
    for name in ("xlmr-table1", "mbert-table11"):
        report = count_params_report(load_preset(name))
        assert len(report.stages) == 9
        assert [s.label for s in report.stages][-2:] == ["+ Hidden 312", "+ Vocabulary"]


# ----------------------------------------------------------------- pipeline

def test_pipeline_outputs(finished):
    out, report = finished
    stages = [s.stage for s in report.stages]
    assert stages == ["teacher-finetune", "layer-KD", "ffn-prune", "hidden-reduce-8",
                      "vocab-trim-8", "hidden-reduce-12", "vocab-trim-12"]
    for s in report.stages:
        assert (out / s.checkpoint / "weights.bin").exists()
        assert not Path(s.checkpoint).is_absolute()
    for name in ("compression.csv", "compression.txt", "compression.json", "run_meta.json"):
        assert (out / "reports" / name).exists()
    assert (out / "traces" / "layer-KD.csv").read_text().startswith("epoch,train_loss,val_masked_acc")
    final = [s for s in report.stages if s.stage.startswith("vocab-trim")]
    assert all("tc_f1" in s.metrics and "tc_majority_f1" in s.metrics for s in final)


def test_pipeline_checkpoints_load(finished):
    out, report = finished
    model, tok = load_checkpoint(out / "checkpoints" / "vocab-trim-8")
    assert model.config.vocab_size == 40 == tok.vocab_size
    assert model.config.hidden_size == 8 and model.config.num_layers == 1


def test_pipeline_rerun_byte_identical(finished, tmp_path):
    out, _ = finished
    run_pipeline(PipelineConfig.from_dict(tiny_config()), tmp_path)
    assert tree(tmp_path) == tree(out)


def test_resume_matches_uninterrupted(finished, tmp_path):
    out, _ = finished
    import shutil
    shutil.copytree(out, tmp_path / "r")
    for d in ("hidden-reduce-8", "hidden-reduce-12", "vocab-trim-8", "vocab-trim-12"):
        shutil.rmtree(tmp_path / "r" / "checkpoints" / d)
    shutil.rmtree(tmp_path / "r" / "reports")
    run_pipeline(PipelineConfig.from_dict(tiny_config()), tmp_path / "r", resume_from="hidden-reduce")
    assert tree(tmp_path / "r") == tree(out)


def test_resume_without_checkpoints_fails(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_pipeline(PipelineConfig.from_dict(tiny_config()), tmp_path, resume_from="ffn-prune")


def test_pipeline_from_base_checkpoint(tmp_path):
    raw = tiny_config(stages=[{"name": "ffn-prune", "ffn_size": 8, "batches": 1}], tasks={})
    first = run_pipeline(PipelineConfig.from_dict(tiny_config(stages=raw["stages"], tasks={})),
                         tmp_path / "a")
    raw["base_checkpoint"] = str(tmp_path / "a" / "checkpoints" / "base")
    report = run_pipeline(PipelineConfig.from_dict(raw), tmp_path / "b")
    assert [s.stage for s in first.stages] == ["base", "ffn-prune"]
    assert report.stages[1].config.ffn_size == 8


# ---------------------------------------------------------------- ablations

def test_unknown_ablation_lists_names():
    with pytest.raises(ConfigError, match="init-strategies"):
        run_ablation("depth-sweep", PipelineConfig.from_dict(tiny_config()))
    assert len(ABLATIONS) == 6


def test_vocab_sweep_clips_arms(tmp_path):
    cfg = PipelineConfig.from_dict(tiny_config())
    result = run_ablation("vocab-sweep", cfg, tmp_path, arms=[20, 10_000, None])
    assert result.arms == [20, None]
    assert result.metrics["20"]["params"] < result.metrics["full"]["params"]
    assert (tmp_path / "reports" / "ablation_vocab-sweep.csv").read_text().startswith("arm,")


def test_trace_ablation_aligned_epochs(tmp_path):
    cfg = PipelineConfig.from_dict(tiny_config())
    result = run_ablation("mse-vs-kl", cfg, tmp_path)
    assert set(result.traces) == {"mse", "kl"}
    assert len(result.traces["mse"]) == len(result.traces["kl"]) == 1
    assert result.note.startswith("mse_converged_faster:")
    assert (tmp_path / "reports" / "ablation_mse-vs-kl.txt").exists()


# ---------------------------------------------------------------------- cli

def test_cli_count_params_presets(capsys):
    assert main(["count-params", "--preset", "xlmr-table1", "--csv"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert len(rows) == 10 and rows[1].startswith("teacher-finetune")


def test_cli_count_params_checkpoint(tmp_path, capsys):
    save_checkpoint(EncoderModel.random(ModelConfig(1, 8, 2, 8, 10, 4), seeded_rng(0)), None, tmp_path)
    assert main(["count-params", "--checkpoint", str(tmp_path), "--csv"]) == 0
    assert ",checkpoint," not in capsys.readouterr().out.splitlines()[0]


def test_cli_dry_run(capsys):
    assert main(["pipeline", "--preset", "mbert-table11", "--dry-run"]) == 0
    assert "+ Hidden 564" in capsys.readouterr().out


def test_cli_stage_order_error_does_no_work(tmp_path, capsys):
    raw = tiny_config()
    raw["stages"] = raw["stages"][::-1]
    out = tmp_path / "out"
    assert main(["pipeline", "--config", str(write_config(tmp_path, raw)), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


def test_cli_missing_corpus_is_data_error(tmp_path):
    raw = tiny_config(corpus={"train": "missing.txt"})
    assert main(["pipeline", "--config", str(write_config(tmp_path, raw)),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_cli_resume_without_checkpoint_is_io_error(tmp_path):
    path = write_config(tmp_path, tiny_config())
    assert main(["prune", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_cli_nan_is_numeric_error(tmp_path):
    model = EncoderModel.random(ModelConfig(1, 8, 2, 8, 30, 17), seeded_rng(0))
    model.params["layer.0.w1"][0, 0] = np.nan
    from shrinkpipe.tokenizer import build_tokenizer
    from shrinkpipe.tokenizer import generate_synthetic_corpus, SyntheticSpec
    texts = generate_synthetic_corpus(SyntheticSpec(num_topics=2, vocab_per_topic=10, doc_count=40,
                                                    doc_length=8, seed=1)).texts
    (tmp_path / "corpus.txt").write_text("\n".join(texts) + "\n")
    save_checkpoint(model, build_tokenizer(texts, 30), tmp_path / "base")
    raw = {"base_checkpoint": "base", "corpus": {"train": "corpus.txt"},
           "stages": [{"name": "teacher-finetune", "plan": PLAN}]}
    assert main(["pipeline", "--config", str(write_config(tmp_path, raw)),
                 "--out", str(tmp_path / "o")]) == EXIT_NUMERIC


def test_cli_thread_env_validated(monkeypatch):
    monkeypatch.setenv("SHRINKPIPE_THREADS", "many")
    assert main(["count-params", "--preset", "toy"]) == EXIT_CONFIG
    monkeypatch.setenv("SHRINKPIPE_THREADS", "1")
    assert main(["count-params", "--preset", "toy"]) == 0


def test_cli_seed_override_changes_output(tmp_path):
    path = write_config(tmp_path, tiny_config(stages=tiny_config()["stages"][:1], tasks={}))
    assert main(["teacher", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    assert main(["teacher", "--config", str(path), "--out", str(tmp_path / "b"), "--seed", "11"]) == 0
    a = (tmp_path / "a" / "checkpoints" / "teacher-finetune" / "weights.bin").read_bytes()
    b = (tmp_path / "b" / "checkpoints" / "teacher-finetune" / "weights.bin").read_bytes()
    assert a != b


def test_cli_report_eval_adapter(finished, tmp_path, capsys):
    out, _ = finished
    cfg_path = write_config(tmp_path, tiny_config())
    assert main(["report", "--out", str(out), "--csv"]) == 0
    assert "vocab-trim-12" in capsys.readouterr().out
    ck = str(out / "checkpoints" / "vocab-trim-12")
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", ck]) == 0
    assert 0 <= json.loads(capsys.readouterr().out)["val_masked_acc"] <= 1
    assert main(["adapter", "--config", str(cfg_path), "--checkpoint", ck, "--r", "4",
                 "--out", str(tmp_path / "ad")]) == 0
    row = json.loads(capsys.readouterr().out)
    assert row["r"] == 4 and (tmp_path / "ad" / "reports" / "adapter_classification_r4.csv").exists()


def test_cli_requires_config_or_preset(capsys):
    assert main(["pipeline"]) == EXIT_CONFIG


def test_cli_adapter_seed_list(finished, tmp_path, capsys):
    out, _ = finished
    ck = str(out / "checkpoints" / "vocab-trim-12")
    assert main(["adapter", "--config", str(write_config(tmp_path, tiny_config())), "--checkpoint", ck,
                 "--seeds", "0", "1", "--out", str(tmp_path / "ad")]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["seed"] for r in rows] == [0, 1, "mean"]
    assert rows[2]["test"] == pytest.approx((rows[0]["test"] + rows[1]["test"]) / 2)
    csv_text = (tmp_path / "ad" / "reports" / "adapter_classification_r2.csv").read_text()
    assert len(csv_text.strip().splitlines()) == 4
