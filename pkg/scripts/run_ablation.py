"""Loss ablation: train SDM / +CAMSE / +CASP / CASDM generators and emit the quality grid.

Each arm is one config file in configs/ablation/, layered over an optional
base config. Everything goes through the ``casdm`` CLI, so the grid is
reproducible from the config files alone.

    python scripts/run_ablation.py --data runs/toy --out runs/ablation --steps 2000
"""

import argparse
import json
import sys
from pathlib import Path

from casdm.cli import main as cli
from casdm.config import load_config, merge_overrides

ROOT = Path(__file__).resolve().parents[1]
ARMS = [
    ("SDM", "sdm"),
    ("SDM + CAMSE", "sdm_camse"),
    ("SDM + CASP", "sdm_casp"),
    ("CASDM", "casdm"),
]


def layered_config(base: Path | None, arm: str, out: Path) -> Path:
    data = json.loads(base.read_text()) if base else {}
    data = merge_overrides(data, json.loads((ROOT / "configs" / "ablation" / f"{arm}.json").read_text()))
    load_config(overrides=data)  # fail fast on typos
    path = out / f"{arm}.json"
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def run(data: Path, out: Path, base: Path | None = None, steps: int | None = None, count: int | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    checkpoints = []
    for label, arm in ARMS:
        cfg = layered_config(base, arm, out)
        args = ["train", "casdm", "--config", str(cfg), "--data", str(data), "--out", str(out / arm)]
        if steps is not None:
            args += ["--steps", str(steps)]
        if cli(args) != 0:
            raise SystemExit(f"training {arm} failed")
        checkpoints += ["--checkpoint", str(out / arm / "last.pt"), "--label", label]
    args = ["eval", "quality", "--config", str(out / "casdm.json"), "--data", str(data), "--out", str(out / "quality")]
    if count is not None:
        args += ["--count", str(count)]
    if cli(args + checkpoints) != 0:
        raise SystemExit("quality evaluation failed")
    return out / "quality" / "quality_table.md"


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", type=Path, required=True, help="toy dataset root (casdm dataset synth)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, help="base config the ablation files are layered over")
    p.add_argument("--steps", type=int)
    p.add_argument("--count", type=int, help="number of test maps to score")
    a = p.parse_args()
    table = run(a.data, a.out, a.config, a.steps, a.count)
    sys.stdout.write(table.read_text())
