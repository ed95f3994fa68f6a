import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import pytest

from eventdiff.ablation import read_table
from eventdiff.cli import main

TOY = """
[dataset]
out_dir = {data}
task = {task}
n_scenes = 2
resolution = 32, 32
duration = 0.375
size = 6, 10
upsample = 4
val_fraction = {val}

[model]
bins = {bins}
n_down = 2
base_channels = 4
event_channels = 2
codebook_size = 16

[schedule]
unet_channels = 8, 16
time_embed_dim = 8

[training]
batch_size = 2
stage1_steps = 2
stage2_steps = 2

[ablation]
step_counts = 1, 5, 10
timing_repeats = 1
"""


def write_config(tmp, task="interpolate"):
    path = tmp / f"{task}.cfg"
    path.write_text(TOY.format(data=tmp / f"data_{task}", task=task, val=0.25 if task == "interpolate" else 0,
                               bins=2 if task == "interpolate" else 3))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Toy dataset plus stage-1 and stage-2 checkpoints produced through the CLI."""
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    runs = tmp / "runs"
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "--stage", "1", "--config", str(cfg), "--run-dir", str(runs)]) == 0
    s1 = next(runs.glob("*/stage1.pt"))
    assert main(["train", "--stage", "2", "--config", str(cfg), "--run-dir", str(runs),
                 "--from-stage1", str(s1)]) == 0
    s2 = next(runs.glob("*/stage2_V5.pt"))
    return {"tmp": tmp, "cfg": cfg, "runs": runs, "s1": s1, "s2": s2, "data": tmp / "data_interpolate"}


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- gen-data ------------------------------------------------------------------

def test_gen_data_prints_manifest_and_count(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, out, _ = run(capsys, "gen-data", "--config", cfg, "--skips", 1)
    lines = out.splitlines()
    assert code == 0 and Path(lines[0]).is_file()
    n = len(Path(lines[0]).read_text().splitlines())
    assert lines[1] == f"{n} samples" and n == 4
    first = sha(lines[0])
    code, out2, _ = run(capsys, "gen-data", "--config", cfg, "--skips", 1, "--out", tmp_path / "again")
    assert sha(out2.splitlines()[0]) == first


def test_gen_data_rejects_bad_skips(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--config", write_config(tmp_path), "--skips", 0)
    assert code == 2 and "skips" in err


def test_bad_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nbase_channel = 3\n")
    code, _, err = run(capsys, "gen-data", "--config", bad)
    assert code == 2 and "unknown key" in err


# -- train ---------------------------------------------------------------------

def test_train_outputs(workspace, capsys):
    s1 = workspace["s1"]
    metrics = s1.parent / "stage1_metrics.jsonl"
    entries = [json.loads(x) for x in metrics.read_text().splitlines()]
    assert "final_val_psnr" in entries[-1]
    assert (s1.parent / "config.ini").is_file()
    code, out, _ = run(capsys, "train", "--stage", "1", "--config", workspace["cfg"], "--run-dir", workspace["runs"])
    assert code == 0 and "final loss" in out


def test_stage2_needs_stage1(workspace, capsys):
    code, _, err = run(capsys, "train", "--stage", "2", "--config", workspace["cfg"],
                       "--run-dir", workspace["runs"])
    assert code == 2 and "--from-stage1" in err
    code, _, err = run(capsys, "train", "--stage", "2", "--config", workspace["cfg"],
                       "--run-dir", workspace["runs"], "--from-stage1", workspace["tmp"] / "nope.pt")
    assert code == 2 and "not found" in err


def test_v2_route_is_logged(workspace, capsys, caplog):
    with caplog.at_level(logging.INFO, logger="eventdiff"):
        code, _, _ = run(capsys, "train", "--stage", "2", "--variant", "V2", "--steps", 1, "--config",
                         workspace["cfg"], "--run-dir", workspace["runs"], "--from-stage1", workspace["s1"])
    assert code == 0
    assert any("V2" in r.getMessage() and "per-step noise" in r.getMessage() for r in caplog.records)


# -- infer / eval --------------------------------------------------------------

def test_infer_interpolate(workspace, capsys):
    sample = sorted(workspace["data"].glob("*.npz"))[0]
    out = workspace["tmp"] / "pred"
    code, text, _ = run(capsys, "infer", "--ckpt", workspace["s2"], "--mode", "interpolate", "--sample", sample,
                        "--out", out, "--steps", 3)
    assert code == 0 and "PSNR" in text
    img = np.load(out.with_suffix(".npy"))
    assert img.shape == (1, 32, 32) and out.with_suffix(".png").is_file()
    assert json.loads(out.with_suffix(".json").read_text())["step_count"] == 3
    run(capsys, "infer", "--ckpt", workspace["s2"], "--mode", "interpolate", "--sample", sample,
        "--out", workspace["tmp"] / "pred2", "--steps", 3)
    assert np.array_equal(img, np.load(workspace["tmp"] / "pred2.npy"))


def test_infer_with_explicit_t(workspace, capsys):
    sample = sorted(workspace["data"].glob("*.npz"))[0]
    code, text, _ = run(capsys, "infer", "--ckpt", workspace["s2"], "--mode", "interpolate", "--sample", sample,
                        "--t", 0.25, "--out", workspace["tmp"] / "t25")
    assert code == 0 and "PSNR" not in text  # no ground truth at an arbitrary t


@pytest.mark.parametrize("t", ["0.0", "1", "-0.5"])
def test_infer_rejects_boundary_t(workspace, capsys, t):
    sample = sorted(workspace["data"].glob("*.npz"))[0]
    code, _, _ = run(capsys, "infer", "--ckpt", workspace["s2"], "--mode", "interpolate", "--sample", sample,
                     "--t", t)
    assert code == 2


def test_infer_mode_mismatch(workspace, capsys):
    sample = sorted(workspace["data"].glob("*.npz"))[0]
    code, _, err = run(capsys, "infer", "--ckpt", workspace["s2"], "--mode", "deblur", "--sample", sample)
    assert code == 2 and "interpolate" in err
    code, _, _ = run(capsys, "infer", "--ckpt", workspace["s1"], "--mode", "interpolate", "--sample", sample)
    assert code == 2


def test_eval(workspace, capsys):
    out = workspace["tmp"] / "eval.json"
    code, text, _ = run(capsys, "eval", "--ckpt", workspace["s2"], "--manifest", workspace["data"] / "manifest.txt",
                        "--out", out)
    rep = json.loads(out.read_text())
    assert code == 0 and "PSNR" in text and len(rep["psnr"]) == 2 and rep["step_count"] == 5


# -- ablate --------------------------------------------------------------------

def test_ablate_unknown_suite(workspace, capsys):
    code, _, err = run(capsys, "ablate", "--suite", "tables", "--config", workspace["cfg"])
    assert code == 2 and "scheme, fusion, embed_size, step_sweep" in err


def test_ablate_missing_prerequisite(workspace, capsys):
    code, _, err = run(capsys, "ablate", "--suite", "step_sweep", "--config", workspace["cfg"],
                       "--run-dir", workspace["runs"])
    assert code == 2 and "stage2_ckpt" in err


def test_ablate_step_sweep(workspace, capsys):
    code, _, _ = run(capsys, "ablate", "--suite", "step_sweep", "--config", workspace["cfg"],
                     "--run-dir", workspace["runs"], "--stage2-ckpt", workspace["s2"])
    assert code == 0
    rows = read_table(next(workspace["runs"].glob("*/step_sweep.tsv")))
    assert [r["variant"] for r in rows] == ["T=1", "T=5", "T=10"]
    assert [r["steps"] for r in rows] == [1, 5, 10]


def test_ablate_scheme_rows(workspace, capsys):
    code, _, _ = run(capsys, "ablate", "--suite", "scheme", "--config", workspace["cfg"],
                     "--run-dir", workspace["runs"], "--stage1-ckpt", workspace["s1"])
    assert code == 0
    rows = read_table(next(workspace["runs"].glob("*/scheme.tsv")))
    assert [r["variant"] for r in rows] == [f"V{i}" for i in range(7)]
    assert next(workspace["runs"].glob("*/scheme.png")).stat().st_size > 0


def test_ablate_fusion_rows(workspace, capsys):
    code, _, _ = run(capsys, "ablate", "--suite", "fusion", "--config", workspace["cfg"],
                     "--run-dir", workspace["runs"])
    assert code == 0
    rows = read_table(next(workspace["runs"].glob("*/fusion.tsv")))
    assert [r["variant"] for r in rows] == ["concat", "concat_L", "sca", "tca", "stca"]


def test_deblur_through_cli(tmp_path, capsys):
    cfg = write_config(tmp_path, "deblur")
    runs = tmp_path / "runs"
    assert run(capsys, "gen-data", "--config", cfg)[0] == 0
    assert run(capsys, "train", "--stage", "1", "--config", cfg, "--run-dir", runs)[0] == 0
    s1 = next(runs.glob("*/stage1.pt"))
    assert run(capsys, "train", "--stage", "2", "--config", cfg, "--run-dir", runs, "--from-stage1", s1)[0] == 0
    s2 = next(runs.glob("*/stage2_V5.pt"))
    sample = sorted((tmp_path / "data_deblur").glob("*.npz"))[0]
    code, text, _ = run(capsys, "infer", "--ckpt", s2, "--mode", "deblur", "--sample", sample,
                        "--out", tmp_path / "sharp")
    assert code == 0 and "PSNR" in text
    assert np.load(tmp_path / "sharp.npy").shape == (1, 32, 32)
    code, _, _ = run(capsys, "infer", "--ckpt", s2, "--mode", "interpolate", "--sample", sample)
    assert code == 2
