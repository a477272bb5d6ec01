import json

import numpy as np
import pytest

from scriptbmi.cli import build_parser, main
from scriptbmi.dataset import load_manifest
from scriptbmi.exceptions import BMIMismatchWarning
from scriptbmi.harness import synth_sheet
from scriptbmi.imaging import save_image
from scriptbmi.tensor import RngStream

TINY = {"conv_kernels": [6], "conv_dropout_pct": [0], "hidden_units": [24], "hidden_dropout_pct": [0],
        "num_classes": 4, "input_shape": [3, 16, 16], "name": "tiny", "tag": ""}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """synth -> augment -> split on a 4-writer corpus at 16 px."""
    root = tmp_path_factory.mktemp("corpus")
    assert main(["-q", "synth", "--out", str(root / "crops"), "--writers", "4", "--chars", "6",
                 "--image-size", "24"]) == 0
    assert main(["-q", "augment", "--manifest", str(root / "crops" / "manifest.csv"),
                 "--out", str(root / "aug"), "--input-size", "16"]) == 0
    assert main(["-q", "split", "--manifest", str(root / "aug" / "manifest.csv")]) == 0
    (root / "tiny.json").write_text(json.dumps(TINY))
    return root


@pytest.fixture(scope="module")
def trained(corpus):
    out = corpus / "run"
    code = main(["-q", "train", "--manifest", str(corpus / "aug" / "manifest.csv"), "--config",
                 str(corpus / "tiny.json"), "--input-size", "16", "--lr", "0.003", "--batch", "8",
                 "--epochs", "25", "--patience", "25", "--out", str(out)])
    assert code == 0
    return out


def test_seed_defaults_to_42():
    args = build_parser().parse_args(["synth", "--out", "x"])
    assert args.seed == 42
    args = build_parser().parse_args(["train", "--manifest", "m.csv", "--out", "o"])
    assert (args.batch, args.lr, args.epochs, args.patience, args.input_size) == (32, 1e-4, 100, 10, (224, 224))


def test_named_input_size():
    args = build_parser().parse_args(["augment", "--manifest", "m", "--out", "o", "--input-size", "compact"])
    assert args.input_size == (144, 144)
    args = build_parser().parse_args(["augment", "--manifest", "m", "--out", "o", "--input-size", "32x48"])
    assert args.input_size == (32, 48)


def test_subcommand_required():
    with pytest.raises(SystemExit):
        main([])


def test_pipeline_counts(corpus):
    m = load_manifest(corpus / "aug" / "manifest.csv")
    assert len(m) == 4 * 6 * 7
    counts = m.counts()
    assert counts["unassigned"] == 0
    assert counts["train"] + counts["val"] + counts["test"] == 168


def test_split_before_augment_flag(corpus, tmp_path):
    out = tmp_path / "grouped.csv"
    assert main(["-q", "split", "--manifest", str(corpus / "aug" / "manifest.csv"), "--split-before-augment",
                 "--out", str(out)]) == 0
    m = load_manifest(out)
    groups = {}
    for r in m.rows:
        groups.setdefault(r.source_key, set()).add(r.split)
    assert all(len(s) == 1 for s in groups.values())


def test_train_outputs(trained, capsys):
    names = sorted(p.name for p in trained.iterdir())
    assert names == ["confusion.csv", "loss_curve.csv", "loss_curve.svg", "metrics.csv", "run.log", "weights.bin"]
    metrics = (trained / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "accuracy,precision,recall,f1"
    assert len(metrics[1].split(",")) == 4
    assert "lr=0.003" in (trained / "run.log").read_text()
    assert (trained / "weights.bin").read_bytes()[:8] == b"SBMIWTS\0"


def test_train_rerun_is_byte_identical(corpus, trained, tmp_path):
    out = tmp_path / "again"
    assert main(["-q", "train", "--manifest", str(corpus / "aug" / "manifest.csv"), "--config",
                 str(corpus / "tiny.json"), "--input-size", "16", "--lr", "0.003", "--batch", "8",
                 "--epochs", "25", "--patience", "25", "--out", str(out), "--no-svg"]) == 0
    for name in ("metrics.csv", "loss_curve.csv", "weights.bin", "confusion.csv"):
        assert (out / name).read_bytes() == (trained / name).read_bytes()
    assert not (out / "loss_curve.svg").exists()


def test_default_lr_logged(corpus, tmp_path):
    out = tmp_path / "default"
    assert main(["-q", "train", "--manifest", str(corpus / "aug" / "manifest.csv"), "--config",
                 str(corpus / "tiny.json"), "--input-size", "16", "--epochs", "1", "--out", str(out)]) == 0
    assert "lr=0.0001" in (out / "run.log").read_text()


def test_train_without_split_is_config_error(corpus, capsys):
    code = main(["-q", "train", "--manifest", str(corpus / "crops" / "manifest.csv"), "--out",
                 str(corpus / "nosplit")])
    assert code == 1
    assert "split" in capsys.readouterr().err


def test_evaluate(corpus, trained, tmp_path, capsys):
    out = tmp_path / "eval.csv"
    assert main(["-q", "evaluate", "--manifest", str(corpus / "aug" / "manifest.csv"), "--weights",
                 str(trained / "weights.bin"), "--split", "test", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert out.read_text() == printed
    assert out.read_text() == (trained / "metrics.csv").read_text()
    assert (tmp_path / "eval_confusion.csv").is_file()


def test_predict_recovers_training_writer(corpus, trained, capsys):
    m = load_manifest(corpus / "aug" / "manifest.csv")
    row = next(r for r in m.subset("train") if r.writer_id == 3 and not r.variant)
    assert main(["-q", "predict", "--manifest", str(corpus / "aug" / "manifest.csv"), "--weights",
                 str(trained / "weights.bin"), "--image", str(m.path_of(row))]) == 0
    cls, bmi, conf = capsys.readouterr().out.strip().split(",")
    assert int(cls) == 3
    assert float(bmi) == pytest.approx(m.writer_map()[3].bmi, abs=0.005)
    assert 0.0 <= float(conf) <= 1.0


def test_predict_bad_magic(corpus, tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage" * 10)
    code = main(["-q", "predict", "--manifest", str(corpus / "aug" / "manifest.csv"), "--weights", str(bad),
                 "--image", str(corpus / "crops" / "0" / "a_1.ppm")])
    assert code == 1
    assert "magic" in capsys.readouterr().err


def test_predict_class_count_mismatch(corpus, tmp_path, capsys):
    assert main(["-q", "synth", "--out", str(tmp_path / "c5"), "--writers", "5", "--chars", "1",
                 "--image-size", "16"]) == 0
    code = main(["-q", "predict", "--manifest", str(tmp_path / "c5" / "manifest.csv"), "--weights",
                 str(corpus / "run" / "weights.bin"), "--image", str(tmp_path / "c5" / "0" / "a_1.ppm")])
    assert code == 1
    assert "classes" in capsys.readouterr().err


def test_ablate_writes_reports(corpus, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["-q", "ablate", "--manifest", str(corpus / "aug" / "manifest.csv"), "--presets", "base,row7",
                 "--input-size", "16", "--epochs", "1", "--out", str(out), "--no-svg"]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "config,accuracy,precision,recall,f1"
    assert [line.split(",")[0] for line in lines[1:]] == ["row8", "row7"]
    assert capsys.readouterr().out == (out / "ablation.csv").read_text()


def test_segment_fixture_and_errors(tmp_path, capsys):
    sheets = tmp_path / "sheets"
    sheet = np.full((100, 120, 3), 255, dtype=np.uint8)
    sheet[60:75, 10:25] = 0
    sheet[10:22, 70:82] = 0
    sheet[12:24, 20:32] = 0
    save_image(sheets / "form1.ppm", sheet)
    assert main(["-q", "segment", "--sheets", str(sheets), "--out", str(tmp_path / "crops")]) == 0
    index = (tmp_path / "crops" / "crops.csv").read_text().splitlines()
    assert len(index) == 4 and index[1].startswith("form1,0,")
    assert len(list((tmp_path / "crops" / "form1").iterdir())) == 3

    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.warns(UserWarning, match="no sheets"):
        assert main(["-q", "segment", "--sheets", str(empty), "--out", str(tmp_path / "none")]) == 0
    assert (tmp_path / "none" / "crops.csv").read_text() == "sheet,seq,x,y,w,h\n"

    (sheets / "broken.ppm").write_bytes(b"P6\n10 10\n255\n\0\0")
    code = main(["-q", "segment", "--sheets", str(sheets), "--out", str(tmp_path / "c2")])
    assert code == 1
    assert "broken.ppm" in capsys.readouterr().err


def test_segment_full_form(tmp_path):
    save_image(tmp_path / "sheets" / "w1.ppm", synth_sheet(78, RngStream(5)))
    assert main(["-q", "segment", "--sheets", str(tmp_path / "sheets"), "--out", str(tmp_path / "out")]) == 0
    assert len((tmp_path / "out" / "crops.csv").read_text().splitlines()) == 79


def test_strict_flag_turns_bmi_warning_into_error(corpus, tmp_path, capsys):
    bad = tmp_path / "writers.csv"
    text = (corpus / "aug" / "writers.csv").read_text().splitlines()
    wid, h, w, _ = text[1].split(",")
    text[1] = ",".join([wid, h, w, "99.0"])
    bad.write_text("\n".join(text) + "\n")
    args = ["-q", "split", "--manifest", str(corpus / "aug" / "manifest.csv"), "--writers", str(bad),
            "--out", str(tmp_path / "m.csv")]
    with pytest.warns(BMIMismatchWarning):
        assert main(args) == 0
    assert main(args + ["--strict"]) == 1
    assert "BMI mismatch" in capsys.readouterr().err
