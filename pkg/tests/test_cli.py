import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from patternforge import data, nn
from patternforge.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny generated dataset + trained checkpoints, shared by the tests."""
    root = tmp_path_factory.mktemp("cliws")
    runner = CliRunner()
    gen = runner.invoke(main, [
        "gen-data", "--out", str(root / "data"), "--classes", "3",
        "--length", "64", "--per-class-ideal", "12", "--per-class-imperfect",
        "6", "--seed", "0"])
    assert gen.exit_code == 0, gen.output
    cls = runner.invoke(main, [
        "train-classifier", "--data", str(root / "data" / "ideal.pfds"),
        "--out", str(root / "cls"), "--epochs", "8", "--nc", "4",
        "--seed", "0"])
    assert cls.exit_code == 0, cls.output
    ref = runner.invoke(main, [
        "train-refiner", "--data", str(root / "data" / "imperfect_train.pfds"),
        "--classifier", str(root / "cls" / "classifier.pfck"),
        "--out", str(root / "ref"), "--epochs", "3", "--nc", "6",
        "--seed", "0"])
    assert ref.exit_code == 0, ref.output
    return root


def test_gen_data_writes_three_datasets_and_manifest(workspace):
    names = sorted(os.listdir(workspace / "data"))
    assert names == ["ideal.pfds", "imperfect_test.pfds",
                     "imperfect_train.pfds", "manifest.json"]
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert manifest["classes"] == 3 and manifest["seed"] == 0


def test_gen_data_deterministic(tmp_path, workspace):
    runner = CliRunner()
    result = runner.invoke(main, [
        "gen-data", "--out", str(tmp_path / "again"), "--classes", "3",
        "--length", "64", "--per-class-ideal", "12", "--per-class-imperfect",
        "6", "--seed", "0"])
    assert result.exit_code == 0
    for name in ("ideal.pfds", "imperfect_train.pfds", "imperfect_test.pfds"):
        assert (tmp_path / "again" / name).read_bytes() == \
            (workspace / "data" / name).read_bytes()


def test_gen_data_rejects_single_class(tmp_path):
    result = CliRunner().invoke(main, [
        "gen-data", "--out", str(tmp_path / "x"), "--classes", "1"])
    assert result.exit_code == 2
    assert "2 classes" in result.output


def test_train_classifier_outputs(workspace):
    out = workspace / "cls"
    assert (out / "classifier.pfck").exists()
    assert (out / "stats.csv").exists()
    assert (out / "config.json").exists()
    assert (out / "training_curves.png").exists()
    model, extra = nn.load_checkpoint(out / "classifier.pfck")
    assert isinstance(model, nn.Classifier)
    assert extra["prototypes"].shape == (3, model.embed_dim)


def test_train_classifier_zero_epochs_equals_init(workspace, tmp_path):
    runner = CliRunner()
    result = runner.invoke(main, [
        "train-classifier", "--data", str(workspace / "data" / "ideal.pfds"),
        "--out", str(tmp_path / "cls0"), "--epochs", "0", "--seed", "3"])
    assert result.exit_code == 0, result.output
    model, _ = nn.load_checkpoint(tmp_path / "cls0" / "classifier.pfck")
    ds = data.load_dataset(workspace / "data" / "ideal.pfds")
    fresh = nn.build_classifier(ds.length, ds.classes)
    nn.init_parameters(fresh, seed=3)
    for name, p in fresh.params.items():
        np.testing.assert_array_equal(model.params[name].data, p.data)


def test_train_classifier_deterministic(workspace, tmp_path):
    runner = CliRunner()
    args = ["train-classifier", "--data",
            str(workspace / "data" / "ideal.pfds"), "--epochs", "2",
            "--nc", "4", "--seed", "7"]
    r1 = runner.invoke(main, args + ["--out", str(tmp_path / "a")])
    r2 = runner.invoke(main, args + ["--out", str(tmp_path / "b")])
    assert r1.exit_code == 0 and r2.exit_code == 0
    assert (tmp_path / "a" / "classifier.pfck").read_bytes() == \
        (tmp_path / "b" / "classifier.pfck").read_bytes()
    assert (tmp_path / "a" / "stats.csv").read_bytes() == \
        (tmp_path / "b" / "stats.csv").read_bytes()


def test_train_refiner_outputs_and_frozen_classifier(workspace):
    assert (workspace / "ref" / "refiner.pfck").exists()
    assert (workspace / "ref" / "stats.csv").exists()
    model, extra = nn.load_checkpoint(workspace / "ref" / "refiner.pfck")
    assert isinstance(model, nn.Refiner)


def test_train_refiner_does_not_touch_classifier_file(workspace, tmp_path):
    before = (workspace / "cls" / "classifier.pfck").read_bytes()
    result = CliRunner().invoke(main, [
        "train-refiner", "--data", str(workspace / "data" / "imperfect_train.pfds"),
        "--classifier", str(workspace / "cls" / "classifier.pfck"),
        "--out", str(tmp_path / "ref2"), "--epochs", "1", "--mode",
        "non-targeted", "--seed", "1"])
    assert result.exit_code == 0, result.output
    assert (workspace / "cls" / "classifier.pfck").read_bytes() == before


def test_evaluate_baseline_only(workspace, tmp_path):
    result = CliRunner().invoke(main, [
        "evaluate", "--data", str(workspace / "data" / "imperfect_test.pfds"),
        "--classifier", str(workspace / "cls" / "classifier.pfck"),
        "--out", str(tmp_path / "ev")])
    assert result.exit_code == 0, result.output
    report = (tmp_path / "ev" / "report.txt").read_text()
    assert "accuracy raw" in report
    assert (tmp_path / "ev" / "report.csv").exists()
    assert (tmp_path / "ev" / "config.json").exists()


def test_evaluate_full_report(workspace, tmp_path):
    result = CliRunner().invoke(main, [
        "evaluate", "--data", str(workspace / "data" / "imperfect_test.pfds"),
        "--classifier", str(workspace / "cls" / "classifier.pfck"),
        "--refiner", str(workspace / "ref" / "refiner.pfck"),
        "--out", str(tmp_path / "ev")])
    assert result.exit_code == 0, result.output
    csv_lines = (tmp_path / "ev" / "metrics.csv").read_text().strip().split("\n")
    header = csv_lines[0].split(",")
    assert header[0] == "sample"
    # aggregates recomputable from the per-sample rows
    col = header.index("raw_l1")
    values = [float(line.split(",")[col]) for line in csv_lines[1:]]
    report_text = (tmp_path / "ev" / "report.txt").read_text()
    mean_in_report = float(
        [line for line in report_text.split("\n") if line.startswith("l1")][0].split()[1])
    np.testing.assert_allclose(np.mean(values), mean_in_report, atol=5e-6)
    assert (tmp_path / "ev" / "metrics.png").exists()


def test_evaluate_unpaired_warns_but_reports_accuracy(workspace, tmp_path):
    # strip the pairing (and ground-truth rows) from the test dataset
    ds = data.load_dataset(workspace / "data" / "imperfect_test.pfds")
    stripped = data.PatternDataset(
        [p for p in ds.patterns if p.role == data.ROLE_IMPERFECT],
        ds.length, ds.classes)
    unpaired_path = tmp_path / "unpaired.pfds"
    data.save_dataset(unpaired_path, stripped)
    result = CliRunner().invoke(main, [
        "evaluate", "--data", str(unpaired_path),
        "--classifier", str(workspace / "cls" / "classifier.pfck"),
        "--refiner", str(workspace / "ref" / "refiner.pfck"),
        "--out", str(tmp_path / "ev")])
    assert result.exit_code == 0, result.output
    assert "skipping quality metrics" in result.output
    report = (tmp_path / "ev" / "report.txt").read_text()
    assert "accuracy raw" in report and "accuracy refined" in report


def test_evaluate_identity_refiner_stub(workspace, tmp_path):
    # a refiner checkpoint whose parameters were never trained, applied twice,
    # gives identical metrics across runs (pure function of inputs)
    args = ["evaluate", "--data", str(workspace / "data" / "imperfect_test.pfds"),
            "--classifier", str(workspace / "cls" / "classifier.pfck"),
            "--refiner", str(workspace / "ref" / "refiner.pfck")]
    r1 = CliRunner().invoke(main, args + ["--out", str(tmp_path / "e1")])
    r2 = CliRunner().invoke(main, args + ["--out", str(tmp_path / "e2")])
    assert r1.exit_code == 0 and r2.exit_code == 0
    assert (tmp_path / "e1" / "metrics.csv").read_bytes() == \
        (tmp_path / "e2" / "metrics.csv").read_bytes()


def test_refine_outputs(workspace, tmp_path):
    result = CliRunner().invoke(main, [
        "refine", "--data", str(workspace / "data" / "imperfect_test.pfds"),
        "--refiner", str(workspace / "ref" / "refiner.pfck"),
        "--out", str(tmp_path / "rf")])
    assert result.exit_code == 0, result.output
    refined = data.load_dataset(tmp_path / "rf" / "refined.pfds")
    vals = refined.values(data.ROLE_IMPERFECT)
    assert np.all(vals >= 0.0) and np.all(vals <= 1.0)
    assert refined.manifest["refined"] is True
    lines = (tmp_path / "rf" / "side_by_side.csv").read_text().strip().split("\n")
    n = vals.shape[0]
    assert len(lines) == 1 + n * 3 * refined.length  # header + 3 series per sample
    assert (tmp_path / "rf" / "refine_examples.png").exists()


def test_export_embeddings(workspace, tmp_path):
    result = CliRunner().invoke(main, [
        "export-embeddings", "--data", str(workspace / "data" / "ideal.pfds"),
        "--classifier", str(workspace / "cls" / "classifier.pfck"),
        "--out", str(tmp_path / "emb")])
    assert result.exit_code == 0, result.output
    lines = (tmp_path / "emb" / "embeddings.csv").read_text().strip().split("\n")
    assert lines[0] == "x,y,label"
    assert len(lines) == 36 + 1
    assert (tmp_path / "emb" / "embeddings.png").exists()


def test_ablate_report(workspace, tmp_path):
    result = CliRunner().invoke(main, [
        "ablate", "--data", str(workspace / "data" / "imperfect_train.pfds"),
        "--classifier", str(workspace / "cls" / "classifier.pfck"),
        "--out", str(tmp_path / "abl"), "--epochs", "1", "--nc", "4",
        "--seed", "0"])
    assert result.exit_code == 0, result.output
    lines = (tmp_path / "abl" / "ablation.csv").read_text().strip().split("\n")
    assert lines[0] == "loss_proto,loss_pred,loss_reg,accuracy"
    flags = [line.split(",")[:3] for line in lines[1:]]
    assert flags == [["Y", "N", "Y"], ["N", "Y", "Y"], ["Y", "Y", "Y"]]
    for line in lines[1:]:
        assert 0.0 <= float(line.split(",")[3]) <= 1.0


def test_missing_dataset_gives_exit_1(tmp_path):
    # corrupt dataset file: exists but unreadable as a dataset
    bad = tmp_path / "bad.pfds"
    bad.write_bytes(b"garbage")
    result = CliRunner().invoke(main, [
        "train-classifier", "--data", str(bad), "--out", str(tmp_path / "o")])
    assert result.exit_code == 1
    assert "cannot load dataset" in result.output


def test_unknown_flag_gives_exit_2(tmp_path):
    result = CliRunner().invoke(main, ["gen-data", "--nope", "x"])
    assert result.exit_code == 2


def test_config_file_defaults_and_flag_override(workspace, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 1\nseed = 9\nnc = 4\n")
    out = tmp_path / "cfg_run"
    result = CliRunner().invoke(main, [
        "--config", str(cfg), "train-classifier",
        "--data", str(workspace / "data" / "ideal.pfds"),
        "--out", str(out), "--seed", "2"])
    assert result.exit_code == 0, result.output
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["epochs"] == 1       # from the config file
    assert resolved["seed"] == 2         # flag wins over the file
    lines = (out / "stats.csv").read_text().strip().split("\n")
    assert len(lines) == 2
