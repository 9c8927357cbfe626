import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from vascreg import cli, pipeline
from vascreg.plotting import GT_COLOR, PRED_COLOR

MINI_TOML = """
seed = 3
[data]
n_cases = 4
n_test_cases = 1
frames_per_case = 8
[model]
width = 16
heads = 2
blocks = 1
ffn_hidden = 16
time_dim = 8
decoder_hidden = [32]
conv_channels = [4, 8]
T = 12
[train]
steps = 40
batch_size = 8
[eval]
n_samples = 4
svg_limit = 2
"""


def run(ws, *args, extra=()):
    argv = [args[0], "--config", str(ws / "mini.toml"), "--data", str(ws / "data"),
            "--out", str(ws / "out"), *args[1:]]
    for e in extra:
        argv += ["--set", e]
    return cli.main(argv)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "mini.toml").write_text(MINI_TOML)
    assert run(root, "gen-data") == 0
    assert run(root, "train") == 0
    return root


def test_gen_data_manifest_embeds_config(ws):
    m = json.loads((ws / "data" / "manifest.json").read_text())
    assert m["run_config"]["seed"] == 3 and m["build"]
    assert m["counts"]["multi_frame"] > 0
    assert m["counts"]["single_frame"] == 4 * m["counts"]["multi_frame"]


def test_gen_data_is_reproducible(ws, tmp_path):
    assert cli.main(["gen-data", "--config", str(ws / "mini.toml"), "--data", str(tmp_path)]) == 0
    a = json.loads((tmp_path / "manifest.json").read_text())
    b = json.loads((ws / "data" / "manifest.json").read_text())
    assert a["content_sha256"] == b["content_sha256"]


def test_train_writes_checkpoint_and_trace(ws):
    model, header = pipeline.load_model(ws / "out" / "model.ckpt")
    assert header["extra"]["run_config"]["train"]["steps"] == 40
    lines = (ws / "out" / "loss_trace.csv").read_text().splitlines()
    assert lines[0] == "# vascreg train" and lines[1].startswith("# build: ")
    assert lines[2].startswith("# config: {")
    assert lines[3] == "step,total,mse,curv,diff,grad_norm"
    assert len(lines) == 4 + 40


def test_eval_csv_has_both_methods_and_is_deterministic(ws):
    assert run(ws, "eval") == 0
    first = (ws / "out" / "eval.csv").read_text()
    assert run(ws, "eval") == 0
    assert (ws / "out" / "eval.csv").read_text() == first
    body = [l for l in first.splitlines() if not l.startswith("#")]
    methods = {l.split(",")[4] for l in body[1:] if not l.startswith(("summary", "reference"))}
    assert methods == {"rigid", "refined"}
    assert any(l.startswith("summary,rigid") for l in body)
    assert any(l.startswith("summary,refined") for l in body)


def test_register_outputs(ws):
    assert run(ws, "register") == 0
    reg = ws / "out" / "register"
    doc = json.loads((reg / "case_003.json").read_text())
    assert len(doc["frames"]) == 8 and doc["run_config"]["seed"] == 3
    svgs = sorted(reg.glob("*.svg"))
    assert len(svgs) == 2
    root = ET.fromstring(svgs[0].read_text())
    strokes = {l.get("stroke") for l in root.iter("{http://www.w3.org/2000/svg}polyline")}
    assert GT_COLOR in strokes and PRED_COLOR in strokes
    assert "config=" in svgs[0].read_text()
    assert "summary,refined" in (ws / "out" / "register.csv").read_text()


def test_uncertainty_outputs(ws):
    assert run(ws, "uncertainty") == 0
    csvs = list((ws / "out").glob("uncertainty_*.csv"))
    assert len(csvs) == 1
    rows = [l for l in csvs[0].read_text().splitlines() if not l.startswith("#")]
    assert rows[0] == "point,occluded,mean_x,mean_y,std" and len(rows) == 33


def test_temporal_ablation_is_recorded(ws, tmp_path):
    out = tmp_path / "single"
    argv = ["train", "--config", str(ws / "mini.toml"), "--data", str(ws / "data"), "--out",
            str(out), "--set", "ablation.temporal_modeling=false", "--set", "train.steps=3"]
    assert cli.main(argv) == 0
    model, header = pipeline.load_model(out / "model.ckpt")
    assert model.cfg.frames == 1
    assert header["extra"]["run_config"]["ablation"]["temporal_modeling"] is False
    assert '"temporal_modeling":false' in (out / "loss_trace.csv").read_text()
    # a multi-frame checkpoint cannot be evaluated as single-frame
    assert run(ws, "eval", extra=["ablation.temporal_modeling=false"]) == 2


def test_invalid_config_exits_2(ws):
    assert run(ws, "train", extra=["train.bogus=1"]) == 2
    assert run(ws, "train", extra=["model.width=15"]) == 2


def test_missing_checkpoint_exits_2(ws, tmp_path):
    assert cli.main(["eval", "--config", str(ws / "mini.toml"), "--data", str(ws / "data"),
                     "--out", str(tmp_path)]) == 2


def test_missing_dataset_exits_2(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nothing")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_exits_3_with_dump(ws, tmp_path):
    argv = ["train", "--config", str(ws / "mini.toml"), "--data", str(ws / "data"), "--out",
            str(tmp_path), "--set", "train.lr=1e300", "--set", "train.warmup=0",
            "--set", "train.grad_clip=0.0"]
    assert cli.main(argv) == 3
    dump = json.loads((tmp_path / "nonfinite_dump.json").read_text())
    assert dump["step"] is not None and dump["run_config"]["train"]["lr"] == 1e300


def test_zero_motion_refinement_matches_rigid(tmp_path):
    """Without deformation there is nothing to refine: refined tracks rigid."""
    (tmp_path / "m.toml").write_text(MINI_TOML + "\n")
    base = ["--config", str(tmp_path / "m.toml"), "--data", str(tmp_path / "d"), "--out",
            str(tmp_path / "o"), "--set", "data.magnitude=0.0", "--set", "train.steps=150"]
    assert cli.main(["gen-data", *base]) == 0
    assert cli.main(["train", *base]) == 0
    assert cli.main(["eval", *base]) == 0
    model, _ = pipeline.load_model(tmp_path / "o" / "model.ckpt")
    _, held = pipeline.load_split(tmp_path / "d")
    res = pipeline.evaluate(model, held)
    # compare in per-sample normalized units (detector mm divided by sample scale)
    diffs = [abs(r.refined.mse - r.rigid.mse) / s.scale ** 2 for r, s in zip(res, held)]
    assert np.mean(diffs) < 0.05
