import csv

import pytest
import torch

from sgn.checkpoint import load_checkpoint
from sgn.config import ExperimentConfig
from sgn.corpus import Vocabulary, by_partition
from sgn.errors import ComparabilityError, ConfigError, TrainingError
from sgn.metrics import EvalReport, compare_reports
from sgn.pipeline import (
    SgnSystem,
    evaluate_split,
    load_corpus,
    rebuild_system,
    run_pipeline,
)

TINY = dict(
    n_train=24, n_val=8, n_test=8,
    feature_width=32, rnn_hidden=32, gat_hidden=32, dec_ffn=64,
    embed_dim=32, word_hidden=32, sent_hidden=32,
)


def tiny_config(**overrides):
    values = dict(TINY)
    values.update(overrides)
    return ExperimentConfig(**values)


def read_curve(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_zero_training_smoke(tmp_path):
    config = tiny_config(parser_epochs=0, joint_epochs=0, seed=1)
    report, artifacts = run_pipeline(config, tmp_path, log=None)
    assert report.sample_count == 8
    assert report.split == "test"
    assert artifacts.report_path.exists()
    assert artifacts.annotated_corpus.exists()
    saved = EvalReport.from_json(artifacts.report_path.read_text())
    assert saved == report


def test_pipeline_deterministic(tmp_path):
    config = tiny_config(parser_epochs=1, joint_epochs=1, seed=3)
    report1, _ = run_pipeline(config, tmp_path / "a", log=None)
    report2, _ = run_pipeline(config, tmp_path / "b", log=None)
    assert report1 == report2


def test_resume_continues_loss_curve(tmp_path):
    config = tiny_config(parser_epochs=1, joint_epochs=4, seed=5)
    _, artifacts = run_pipeline(config, tmp_path / "full", log=None)
    full_curve = read_curve(artifacts.path("joint_curve.csv"))
    assert [row["epoch"] for row in full_curve] == ["0", "1", "2", "3"]

    resume_point = artifacts.epoch_checkpoint(1)
    _, resumed = run_pipeline(
        config, tmp_path / "resumed", resume_from=resume_point, log=None
    )
    resumed_curve = read_curve(resumed.path("joint_curve.csv"))
    assert [row["epoch"] for row in resumed_curve] == ["2", "3"]
    for row, full_row in zip(resumed_curve, full_curve[2:]):
        assert float(row["loss"]) == pytest.approx(float(full_row["loss"]), abs=1e-6)
        assert float(row["l_gen"]) == pytest.approx(float(full_row["l_gen"]), abs=1e-6)
        assert float(row["l_tree"]) == pytest.approx(float(full_row["l_tree"]), abs=1e-6)


def test_resume_rejects_other_config(tmp_path):
    config = tiny_config(parser_epochs=0, joint_epochs=1, seed=6)
    _, artifacts = run_pipeline(config, tmp_path / "a", log=None)
    other = tiny_config(parser_epochs=0, joint_epochs=2, seed=6)
    with pytest.raises(ConfigError):
        run_pipeline(other, tmp_path / "b",
                     resume_from=artifacts.epoch_checkpoint(0), log=None)


def test_checkpoint_reload_bit_identical(tmp_path):
    config = tiny_config(parser_epochs=0, joint_epochs=1, seed=7)
    _, artifacts = run_pipeline(config, tmp_path, log=None)
    system, loaded_config = rebuild_system(artifacts.final_checkpoint)
    assert loaded_config == config
    samples = load_corpus(config)
    report, _ = evaluate_split(system, samples, "test")
    saved = EvalReport.from_json(artifacts.report_path.read_text())
    assert report == saved  # bit-identical forward pass after reload


def test_baseline_variant_reduction(tmp_path):
    config = tiny_config(parser_epochs=1, joint_epochs=1, seed=8)
    baseline = config.baseline_variant()
    assert baseline.lambda2 == 0.0 and not baseline.use_tree
    report, artifacts = run_pipeline(baseline, tmp_path, log=None)
    # no stage-1 artifacts for the structure-unaware configuration
    assert not artifacts.annotated_corpus.exists()
    curve = read_curve(artifacts.path("joint_curve.csv"))
    assert all(float(row["l_tree"]) == 0.0 for row in curve)
    assert report.sample_count == 8


def test_divergence_writes_resumable_state(tmp_path):
    config = tiny_config(parser_epochs=0, joint_epochs=2, lr=1e8, seed=9)
    with pytest.raises(TrainingError):
        run_pipeline(config, tmp_path, log=None)
    resume = tmp_path / f"{config.fingerprint()}_resume_state.pt"
    assert resume.exists()
    payload = load_checkpoint(resume)
    assert payload["counters"]["stage"] == 2


def test_artifacts_carry_fingerprint(tmp_path):
    config = tiny_config(parser_epochs=0, joint_epochs=1, seed=10)
    _, artifacts = run_pipeline(config, tmp_path, log=None)
    fp = config.fingerprint()
    files = list(tmp_path.iterdir())
    assert files
    assert all(p.name.startswith(fp) for p in files)
    payload = load_checkpoint(artifacts.final_checkpoint)
    assert payload["fingerprint"] == fp


def test_config_roundtrip_and_fingerprint(tmp_path):
    config = tiny_config(seed=11)
    path = tmp_path / "config.kv"
    config.save(path)
    loaded = ExperimentConfig.load(path)
    assert loaded == config
    assert loaded.fingerprint() == config.fingerprint()
    other = tiny_config(seed=12)
    assert other.fingerprint() != config.fingerprint()


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(lambda1=-0.1)
    with pytest.raises(ConfigError):
        ExperimentConfig(batch_size=0)
    with pytest.raises(ConfigError):
        ExperimentConfig(feature_width=64, rnn_hidden=128)
    with pytest.raises(ConfigError):
        ExperimentConfig(tree_tokens="both")


def test_paper_preset_records_published_settings():
    paper = ExperimentConfig.paper()
    assert paper.dec_layers == 16
    assert paper.dec_heads == 8
    assert paper.feature_width == 512
    assert paper.embed_dim == 400
    assert paper.parser_lr == 1.0
    assert paper.parser_batch == 60
    assert paper.gat_heads == 6
    assert paper.max_gen_len == 150
    assert paper.lambda1 == 1.0 and paper.lambda2 == 0.5
    assert paper.lr == 1e-3 and paper.lr_decay == 0.99 and paper.batch_size == 16


def test_compare_reports_requires_same_split(tmp_path):
    config = tiny_config(parser_epochs=0, joint_epochs=0, seed=13)
    report, _ = run_pipeline(config, tmp_path, log=None)
    system, _ = rebuild_system(tmp_path / f"{config.fingerprint()}_final.pt")
    val_report, _ = evaluate_split(system, load_corpus(config), "val")
    with pytest.raises(ComparabilityError):
        compare_reports(report, val_report)
    delta = compare_reports(report, report)
    assert delta.bleu == 0.0


def test_pooled_tree_tokens_mode(tmp_path):
    config = tiny_config(parser_epochs=0, joint_epochs=1, seed=14,
                         tree_tokens="pooled")
    report, _ = run_pipeline(config, tmp_path, log=None)
    assert report.sample_count == 8


def test_system_bundle_shapes():
    config = tiny_config(seed=15)
    samples = load_corpus(config)
    vocab = Vocabulary.build(by_partition(samples)["train"], 1)
    system = SgnSystem(config, vocab)
    batch = samples[:3]
    trees = [s.planted_tree.canonical() for s in batch]
    bundle = system.bundles(batch, trees)
    assert bundle.memory.shape == (3, config.n_max + 2, 32)
    zero = system.bundles(batch, [None, None, None])
    assert zero.memory.shape == (3, 3, 32)
    assert torch.all(zero.memory[:, 0] == 0)
