"""End-to-end runs of every subcommand on a tiny synthetic corpus."""

import json

import numpy as np
import pytest

from cxrnet.cli import InputError, load_config, main
from cxrnet.data import Motif, SynthSpec, synth_dataset, write_corpus

CONFIG = """\
# tiny desk run
seed = 0
data.csv = corpus/Data_Entry.csv
data.images = corpus/images
split.resamples = 2
split.tolerance = 0.1
model.depth = 38
model.width = 2
model.input_size = 32
train.batch_size = 8
train.max_epochs = 2
probe.max_epochs = 3
run.tag = tiny
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = SynthSpec(n_patients=20, image_size=40, motifs=(Motif(0, radius=6),), view_in_pixels=True,
                     background_rate=0.3)
    write_corpus(synth_dataset(spec, 0), root / "corpus")
    (root / "run.cfg").write_text(CONFIG)
    return root


def run(ws, *args):
    return main([args[0], "--config", str(ws / "run.cfg"), "--out", str(ws / "out"), *args[1:]])


@pytest.fixture(scope="module")
def trained(workspace):
    assert run(workspace, "split") == 0
    assert run(workspace, "train", "--resample", "0") == 0
    assert run(workspace, "train", "--resample", "1") == 0
    return workspace


def test_split_writes_a_plan(trained, capsys):
    plan = json.loads((trained / "out" / "splits.json").read_text())
    assert len(plan["assignments"]) == 2


def test_training_is_byte_identical_on_rerun(trained, tmp_path):
    first = (trained / "out" / "tiny" / "fold0" / "model.bin").read_bytes()
    assert main(["train", "--config", str(trained / "run.cfg"), "--out", str(tmp_path),
                 "--resample", "0"]) == 2  # no split plan in a fresh output directory
    (tmp_path / "splits.json").write_bytes((trained / "out" / "splits.json").read_bytes())
    assert main(["train", "--config", str(trained / "run.cfg"), "--out", str(tmp_path), "--resample", "0"]) == 0
    assert (tmp_path / "tiny" / "fold0" / "model.bin").read_bytes() == first
    hist = (trained / "out" / "tiny" / "fold0" / "history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_loss,lr" and len(hist) == 3


def test_eval_writes_fold_grid_and_scores(trained):
    assert run(trained, "eval") == 0
    ev = trained / "out" / "tiny" / "eval"
    assert {p.name for p in ev.iterdir()} >= {"auc.csv", "auc.txt", "scores.csv", "summary.json"}
    summary = json.loads((ev / "summary.json").read_text())
    assert summary["Average"]["folds"] == 2
    assert "Without/tiny" in (ev / "auc.txt").read_text()


def test_single_fold_eval_uses_plain_table(trained):
    assert run(trained, "eval", "--resample", "1") == 0
    text = (trained / "out" / "tiny" / "eval" / "auc.txt").read_text()
    assert "±" not in text and "Average" in text


def test_compare_two_score_files(trained):
    assert run(trained, "eval") == 0
    scores = trained / "out" / "tiny" / "eval" / "scores.csv"
    assert run(trained, "compare", str(scores), str(scores)) == 0
    lines = (trained / "out" / "compare.csv").read_text().splitlines()
    assert lines[1].split(",")[1:] == ["", "1.0"]


@pytest.mark.parametrize("target", ["view", "age"])
def test_probe(trained, target):
    assert run(trained, "probe", "--target", target) == 0
    metrics = json.loads((trained / "out" / "tiny" / "fold0" / f"probe_{target}_metrics.json").read_text())
    assert ("auc" in metrics) == (target == "view") and ("mae" in metrics) == (target == "age")


def test_gradcam_exports_heatmaps(trained, tmp_path):
    img = sorted((trained / "corpus" / "images").iterdir())[0]
    ckpt = trained / "out" / "tiny" / "fold0" / "model"
    assert main(["gradcam", str(ckpt), str(img), "--label", "0", "--out", str(tmp_path)]) == 0
    assert {p.name for p in tmp_path.iterdir()} == {f"{img.stem}_label0_{k}" for k in ("grid.csv", "cam.png",
                                                                                        "overlay.png")}
    assert main(["gradcam", str(ckpt), str(img), "--label", "15", "--out", str(tmp_path)]) == 2
    assert main(["gradcam", str(ckpt), str(tmp_path / "missing.png"), "--label", "0"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_with_numeric_code(trained, monkeypatch, capsys):
    monkeypatch.setenv("CXRNET_TRAIN_LR", "1e30")
    monkeypatch.setenv("CXRNET_RUN_TAG", "diverge")
    assert run(trained, "train") == 3
    assert "numeric failure" in capsys.readouterr().err


def test_bad_inputs_exit_with_input_code(workspace, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.colour = blue\n")
    assert main(["split", "--config", str(bad)]) == 2
    assert main(["split", "--config", str(tmp_path / "absent.cfg")]) == 2
    assert main(["split", "--out", str(tmp_path)]) == 2  # no data.csv


def test_environment_overrides_config(workspace):
    cfg = load_config(str(workspace / "run.cfg"), {"CXRNET_TRAIN_LR": "0.5", "CXRNET_MODEL_USE_META": "yes"})
    assert cfg.float("train.lr") == 0.5 and cfg.bool("model.use_meta")
    assert cfg.path_of("data.csv") == workspace / "corpus" / "Data_Entry.csv"
    with pytest.raises(InputError):
        load_config(str(workspace / "run.cfg"), {"CXRNET_TRAIN_LR": "fast"}).float("train.lr")
