import csv
import logging

import numpy as np
import pytest

from dslstm import dataset_io
from dslstm.cli import COMMANDS, main
from dslstm.model import VARIANTS


@pytest.fixture(autouse=True)
def restore_logging():
    # main() reconfigures the root logger; undo it so other modules' caplog checks still see warnings
    root = logging.getLogger()
    level, handlers = root.level, root.handlers[:]
    yield
    root.setLevel(level)
    root.handlers[:] = handlers


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth → preprocess → train (base1, 2 folds, 2 epochs) on a tiny corpus."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "corpus"), "--per-class", "3", "--max-duration", "1.2", "--seed", "7"]) == 0
    assert main(["preprocess", "--manifest", str(root / "corpus" / "manifest.csv"), "--out", str(root / "f.dsl")]) == 0
    rc = main(["train", "--archive", str(root / "f.dsl"), "--variant", "base1", "--folds", "2", "--epochs", "2",
               "--hidden", "8", "--out", str(root / "run")])
    assert rc == 0
    return root


def test_synth_writes_balanced_manifest(pipeline):
    rows = list(csv.DictReader(open(pipeline / "corpus" / "manifest.csv")))
    assert len(rows) == 12
    assert {r["label"]: sum(x["label"] == r["label"] for x in rows) for r in rows} == dict.fromkeys(dataset_io.LABELS, 3)


def test_synth_rerun_identical(pipeline, tmp_path):
    main(["synth", "--out", str(tmp_path), "--per-class", "3", "--max-duration", "1.2", "--seed", "7"])
    for name in ("wav/happy_0000.wav", "wav/sad_0002.wav"):
        assert (tmp_path / name).read_bytes() == (pipeline / "corpus" / name).read_bytes()


def test_preprocess_prints_medians(pipeline, tmp_path, capsys):
    assert main(["preprocess", "--manifest", str(pipeline / "corpus" / "manifest.csv"), "--out", str(tmp_path / "g.dsl")]) == 0
    line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("median")][0]
    m1, m2 = (int(p.split("=")[1]) for p in line.split()[2:])
    assert abs(m1 - 2 * m2) <= 1
    assert (tmp_path / "g.dsl").read_bytes() == (pipeline / "f.dsl").read_bytes()
    assert len(dataset_io.read_features(tmp_path / "g.dsl")) == 12


def test_preprocess_reports_bad_utterance(tmp_path, capsys):
    main(["synth", "--out", str(tmp_path), "--per-class", "1", "--min-duration", "0.3", "--max-duration", "0.5"])
    (tmp_path / "wav" / "sad_0000.wav").write_bytes(b"not a wav")
    assert main(["preprocess", "--manifest", str(tmp_path / "manifest.csv"), "--out", str(tmp_path / "x.dsl")]) == 1
    assert "sad_0000" in capsys.readouterr().err


def test_evaluate_reproduces_fold_numbers(pipeline, capsys):
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(pipeline / "run" / "fold1.dslp"), "--archive", str(pipeline / "f.dsl")]) == 0
    out = capsys.readouterr().out
    metrics = dict(l.split("=") for l in (pipeline / "run" / "metrics.txt").read_text().split())
    assert f"WA {float(metrics['fold1.wa']):.6f}" in out
    assert f"UA {float(metrics['fold1.ua']):.6f}" in out
    assert out.count("recall") == 4
    rows = list(csv.reader(open(pipeline / "run" / "fold1_test_confusion.csv")))[1:]
    counts = np.array([[int(v) for v in r[1:]] for r in rows])
    meta, _ = dataset_io.read_checkpoint(pipeline / "run" / "fold1.dslp")
    label = {r.utterance_id: r.label for r in dataset_io.read_features(pipeline / "f.dsl")}
    per_class = np.bincount([label[i] for i in meta["test_ids"]], minlength=4)
    assert counts.sum(axis=1).tolist() == per_class.tolist()


def test_evaluate_missing_checkpoint(pipeline, capsys):
    assert main(["evaluate", "--checkpoint", str(pipeline / "nope.dslp"), "--archive", str(pipeline / "f.dsl")]) == 1
    assert "not found" in capsys.readouterr().err


def test_train_rerun_identical(pipeline, tmp_path):
    main(["train", "--archive", str(pipeline / "f.dsl"), "--variant", "base1", "--folds", "2", "--epochs", "2",
          "--hidden", "8", "--out", str(tmp_path)])
    for name in ("metrics.txt", "report.txt", "fold0.dslp", "fold1.dslp"):
        assert (tmp_path / name).read_bytes() == (pipeline / "run" / name).read_bytes()


def test_config_file_precedence(pipeline, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# training knobs\nepochs = 1\nhidden=8\nvariant=base2\n")
    rc = main(["train", "--config", str(cfg), "--variant", "base1", "--archive", str(pipeline / "f.dsl"),
               "--folds", "2", "--out", str(tmp_path / "o")])
    assert rc == 0
    resolved = (tmp_path / "o" / "config.txt").read_text()
    assert "epochs=1\n" in resolved and "variant=base1\n" in resolved and "lr=0.0001\n" in resolved
    assert "resolved config" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochz=3\n")
    assert main(["train", "--config", str(cfg), "--archive", "x"]) == 1
    assert "epochz" in capsys.readouterr().err


def test_bad_flag_value_is_validation_error():
    with pytest.raises(SystemExit) as e:
        main(["train", "--variant", "base9"])
    assert e.value.code == 1


def test_single_fold_rejected(pipeline):
    assert main(["train", "--archive", str(pipeline / "f.dsl"), "--folds", "1"]) == 1


def test_gradcheck_lstm_scope(capsys):
    assert main(["gradcheck", "--scope", "lstm", "--instances", "2"]) == 0
    assert "PASS  lstm_cell" in capsys.readouterr().out


def test_params_ratio_and_layer_count(capsys):
    assert main(["params", "--variant", "ds_only"]) == 0
    out = capsys.readouterr().out
    assert "dslstm/ds0" in out and "915,200" in out  # 913,200 weights + 2,000 norm params
    ratio = [l for l in out.splitlines() if "ratio" in l][0].split()[-1]
    assert len(ratio.split(".")[1]) == 3


def test_help_lists_defaults(capsys):
    for cmd, (_, opts) in COMMANDS.items():
        with pytest.raises(SystemExit):
            main([cmd, "--help"])
        text = " ".join(capsys.readouterr().out.split())
        for o in opts:
            assert "--" + o.name.replace("_", "-") in text
            assert f"(default: {o.default})" in text
    assert set(VARIANTS) <= set(COMMANDS["train"][1][2].choices)


def test_log_env_var(monkeypatch, capsys):
    monkeypatch.setenv("DSLSTM_LOG", "ERROR")
    main(["params", "--variant", "base1"])
    assert logging.getLogger().level == logging.ERROR
