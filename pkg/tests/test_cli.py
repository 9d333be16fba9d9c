import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from casdm.cli import main
from conftest import TINY


def _tree_hash(root, skip=()):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = json.loads(json.dumps(TINY))
    cfg["data"] = {"num_train": 16, "num_test": 6}
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["dataset", "synth", "--config", str(root / "cfg.json"), "--seed", "7", "--out", str(root / "ds")]) == 0
    c = str(root / "cfg.json")
    assert main(["train", "casdm", "--config", c, "--data", str(root / "ds"), "--out", str(root / "casdm")]) == 0
    assert main(["train", "mapgen", "--config", c, "--data", str(root / "ds"), "--out", str(root / "mapgen")]) == 0
    return root


def test_synth_is_reproducible(work, tmp_path):
    assert main(["dataset", "synth", "--config", str(work / "cfg.json"), "--seed", "7", "--out", str(tmp_path)]) == 0
    assert _tree_hash(tmp_path) == _tree_hash(work / "ds")
    assert (tmp_path / "config.json").is_file()


def test_validate(work, tmp_path, capsys):
    assert main(["dataset", "validate", "--data", str(work / "ds")]) == 0
    assert "0 violation" in capsys.readouterr().out
    import shutil

    shutil.copytree(work / "ds", tmp_path / "ds")
    bad = tmp_path / "ds" / "test" / "maps" / "test_00002.png"
    rgb = np.asarray(Image.open(bad).convert("RGB")).copy()
    rgb[5, 5] = (9, 9, 9)
    Image.fromarray(rgb).save(bad)
    assert main(["dataset", "validate", "--data", str(tmp_path / "ds")]) == 2
    assert "test_00002.png" in capsys.readouterr().out


def test_usage_and_config_errors(work, tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["dataset", "synth"])
    assert info.value.code == 1
    (tmp_path / "bad.json").write_text(json.dumps({"training": {"stpes": 1}}))
    assert main(["dataset", "synth", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_train_outputs(work):
    names = {p.name for p in (work / "casdm").iterdir()}
    assert {"config.json", "train_log.jsonl", "last.pt"} <= names
    log = [json.loads(l) for l in (work / "mapgen" / "train_log.jsonl").read_text().splitlines()]
    assert "casp" not in log[0] and "mse" in log[0]


def test_generate_image_from_map(work, tmp_path):
    args = ["generate", "image-from-map", "--config", str(work / "cfg.json"), "--data", str(work / "ds" / "test"),
            "--checkpoint", str(work / "casdm" / "last.pt"), "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    stems = sorted(p.stem for p in (work / "ds" / "test" / "maps").glob("*.png"))
    assert sorted(p.stem for p in (tmp_path / "a" / "images").glob("*.png")) == stems
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")
    wrong = args[:-4] + ["--checkpoint", str(work / "mapgen" / "last.pt"), "--out", str(tmp_path / "c")]
    assert main(wrong) == 1


def test_generate_pairs_from_prompts(work, tmp_path):
    from casdm.mapgen import PromptEntry, PromptSpec, save_prompt_specs

    save_prompt_specs([PromptSpec((PromptEntry(0, "background"), PromptEntry(3, "blood", "one", "center")))], tmp_path / "p.jsonl")
    args = ["generate", "pair-from-prompts", "--config", str(work / "cfg.json"), "--data", str(tmp_path / "p.jsonl"),
            "--checkpoint", str(work / "casdm" / "last.pt"), "--checkpoint", str(work / "mapgen" / "last.pt"), "--count", "3"]
    assert main(args + ["--out", str(tmp_path / "g")]) == 0
    assert len(list((tmp_path / "g" / "maps").glob("*.png"))) == 3
    assert main(["dataset", "validate", "--data", str(tmp_path / "g")]) == 0


def test_eval_quality_self_comparison(work, tmp_path):
    out = tmp_path / "q"
    assert main(["eval", "quality", "--config", str(work / "cfg.json"), "--data", str(work / "ds"),
                 "--input", str(work / "ds" / "test"), "--out", str(out)]) == 0
    rep = json.loads((out / "quality.json").read_text())["reports"][0]
    assert rep["ffd"] <= 1e-4 and rep["mean_ms_ssim"] == pytest.approx(1.0, abs=1e-6) and rep["mean_psnr"] == 100.0
    assert main(["report", "render", "--data", str(out / "quality.json"), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "quality_table.md").read_bytes() == (out / "quality_table.md").read_bytes()


def test_eval_downstream_grid_and_rerender(work, tmp_path):
    out = tmp_path / "d"
    args = ["eval", "downstream", "--config", str(work / "cfg.json"), "--data", str(work / "ds"), "--count", "4",
            "--checkpoint", str(work / "casdm" / "last.pt"), "--checkpoint", str(work / "mapgen" / "last.pt"), "--out", str(out)]
    assert main(args) == 0
    md = (out / "comparison.md").read_text()
    assert len([l for l in md.splitlines() if "(mean)" in l]) == 4
    assert main(["report", "render", "--data", str(out / "comparison.json"), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "comparison.md").read_bytes() == (out / "comparison.md").read_bytes()
    no_mapgen = args[:8] + ["--checkpoint", str(work / "casdm" / "last.pt"), "--out", str(tmp_path / "d2")]
    assert main(no_mapgen) == 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "casdm", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "dataset" in res.stdout
