import csv
import json

import pytest

from quasisynth.cli import EXIT_OK, EXIT_PATH, EXIT_USAGE, main
from quasisynth.quasi_robust import PerturbationBudget, build_classifier, save_classifier


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture")
    assert main(["make-fixture", "--out", str(out), "--size", "48"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def tiny_classifiers(tmp_path_factory):
    out = tmp_path_factory.mktemp("clf")
    paths = []
    for i, eps in enumerate((0.0, 0.05, 0.2)):
        f = build_classifier(widths=(4, 8, 8), seed=i)
        f.budget = PerturbationBudget(epsilon=eps)
        paths.append(str(save_classifier(f.freeze(), out / f"clf{i}.pt")))
    return paths


@pytest.fixture(scope="module")
def ed_checkpoint(fixture_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("ed")
    code = main(["train-ed", "--image", str(fixture_dir / "source.png"), "--mask", str(fixture_dir / "mask_src.png"),
                 "--iters", "5", "--out", str(out)])
    assert code == EXIT_OK
    return out / "ed.pt"


def test_make_fixture_outputs(fixture_dir):
    for name in ("source.png", "mask_src.png", "mask_dst.png", "run.json"):
        assert (fixture_dir / name).exists()


def test_train_ed_manifest(ed_checkpoint):
    run = json.loads((ed_checkpoint.parent / "run.json").read_text())
    assert run["command"] == "train-ed" and run["config"]["iters"] == 5
    assert set(run["inputs_sha256"]) == {"image", "mask"}
    assert (ed_checkpoint.parent / "ed.pt.json").exists()


def test_synthesize_without_ed_names_train_ed(fixture_dir, tiny_classifiers, tmp_path, capsys):
    args = ["synthesize", "--classifier", tiny_classifiers[0], "--image", str(fixture_dir / "source.png"),
            "--mask-src", str(fixture_dir / "mask_src.png"), "--mask-dst", str(fixture_dir / "mask_dst.png"),
            "--out", str(tmp_path)]
    code = main(args)
    assert code != 0 and "train-ed" in capsys.readouterr().err
    code = main(args + ["--ed", str(tmp_path / "missing.pt")])
    assert code == EXIT_PATH and "train-ed" in capsys.readouterr().err


def test_synthesize_runs_and_writes_manifest(fixture_dir, tiny_classifiers, ed_checkpoint, tmp_path):
    out = tmp_path / "syn"
    code = main(["synthesize", "--classifier", tiny_classifiers[1], "--ed", str(ed_checkpoint),
                 "--image", str(fixture_dir / "source.png"), "--mask-src", str(fixture_dir / "mask_src.png"),
                 "--mask-dst", str(fixture_dir / "mask_dst.png"), "--out", str(out), "--iters", "4",
                 "--activation", "2", "--snapshot-every", "2", "--eta", "0.1", "--lr", "0.01", "--seed", "4"])
    assert code == EXIT_OK
    for name in ("x_dst.png", "losses.csv", "manifest.json", "run.json", "loss_curves.png", "state.pt"):
        assert (out / name).exists()
    run = json.loads((out / "run.json").read_text())
    assert run["hyperparams"]["eta"] == 0.1 and run["hyperparams"]["total_iters"] == 4
    assert run["hyperparams"]["gamma"] == 30.0
    assert set(run["inputs_sha256"]) == {"image", "mask-src", "mask-dst", "classifier", "ed"}


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"arch": "desk", "colour": 3}))
    assert main(["report-params", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE
    assert "colour" in capsys.readouterr().err


def test_bad_config_values(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": "many"}))
    assert main(["train-classifier", "--config", str(cfg)]) == EXIT_USAGE
    cfg.write_text("{not json")
    assert main(["train-classifier", "--config", str(cfg)]) == EXIT_USAGE
    assert main(["train-classifier", "--config", str(tmp_path / "nope.json")]) == EXIT_PATH
    assert main(["train-classifier", "--norm", "l7", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["train-ed", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "--image" in capsys.readouterr().err


def test_flags_override_config(fixture_dir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"image": "elsewhere.png", "mask": str(fixture_dir / "mask_src.png"), "iters": 3}))
    out = tmp_path / "ed"
    assert main(["train-ed", "--config", str(cfg), "--image", str(fixture_dir / "source.png"), "--iters", "2",
                 "--out", str(out)]) == EXIT_OK
    run = json.loads((out / "run.json").read_text())
    assert run["config"]["iters"] == 2 and run["config"]["image"].endswith("source.png")


def test_missing_input_file_is_path_error(tmp_path):
    assert main(["train-ed", "--image", str(tmp_path / "a.png"), "--mask", str(tmp_path / "b.png"),
                 "--out", str(tmp_path)]) == EXIT_PATH


def test_report_params_full_scale(tmp_path, capsys):
    assert main(["report-params", "--out", str(tmp_path)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "26.253M" in text and "29" in text and "21x21" in text
    report = json.loads((tmp_path / "params.json").read_text())
    assert report["reference_total"] == 26_253_000
    assert report["components"]["classifier_resnet50"] == 25_557_032
    rows = list(csv.reader(open(tmp_path / "params.csv")))
    assert rows[0] == ["component", "parameters"] and rows[-1][0] == "reference_total"


def test_report_params_desk(tmp_path):
    assert main(["report-params", "--arch", "desk", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "params.json").read_text())
    assert set(report["components"]) == {"classifier_small_resnet", "patch_critic", "encoder_decoder"}


def test_grad_study_file_count(tiny_classifiers, tmp_path):
    out = tmp_path / "grad"
    code = main(["grad-study", "--classifiers", ",".join(tiny_classifiers), "--images", "4", "--n-train", "10",
                 "--out", str(out)])
    assert code == EXIT_OK
    pngs = sorted((out / "gradients").glob("grad_img*.png"))
    assert len(pngs) == 4 * 3
    rows = list(csv.DictReader(open(out / "alignment.csv")))
    assert [r["model"] for r in rows] == ["eps0", "eps0.05", "eps0.2"]
    assert (out / "gradients.png").exists() and (out / "alignment.png").exists()


def test_evaluate_writes_metric_table(fixture_dir, tiny_classifiers, tmp_path):
    src = str(fixture_dir / "source.png")
    out = tmp_path / "eval"
    code = main(["evaluate", "--classifier", tiny_classifiers[0], "--real", f"{src},{src}", "--fake", f"{src},{src}",
                 "--out", str(out)])
    assert code == EXIT_OK
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["metric"] for r in rows] == ["SIFID", "SIFID", "FID"]
    assert all(abs(float(r["value"])) < 1e-6 for r in rows)
    assert all(r["extractor"].startswith("SmallResNet:") for r in rows)


def test_evaluate_mismatched_lists(fixture_dir, tiny_classifiers, tmp_path):
    src = str(fixture_dir / "source.png")
    assert main(["evaluate", "--classifier", tiny_classifiers[0], "--real", src, "--fake", f"{src},{src}",
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == 0
    assert main(["synthesize", "--help"]) == 0
    assert "--mask-dst" in capsys.readouterr().out
    assert main(["no-such-command"]) == 2
