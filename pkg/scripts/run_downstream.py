"""Four-arm downstream comparison on the toy dataset.

Trains (or reuses) the CASDM and map generators, then runs
``casdm eval downstream`` over the configured segmenter seeds.

    python scripts/run_downstream.py --out runs/downstream
"""

import argparse
import sys
from pathlib import Path

from casdm.cli import main as cli


def run(out: Path, config: Path | None = None, seed: int = 0) -> Path:
    cfg = ["--config", str(config)] if config else []
    data = out / "data"
    if not (data / "palette.json").exists() and cli(["dataset", "synth", *cfg, "--seed", str(seed), "--out", str(data)]):
        raise SystemExit("dataset synthesis failed")
    for kind in ("casdm", "mapgen"):
        if not (out / kind / "last.pt").exists() and cli(["train", kind, *cfg, "--data", str(data), "--out", str(out / kind)]):
            raise SystemExit(f"training {kind} failed")
    args = ["eval", "downstream", *cfg, "--data", str(data), "--out", str(out / "comparison"), "--seed", str(seed),
            "--checkpoint", str(out / "casdm" / "last.pt"), "--checkpoint", str(out / "mapgen" / "last.pt")]
    if cli(args):
        raise SystemExit("downstream evaluation failed")
    return out / "comparison" / "comparison.md"


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    sys.stdout.write(run(a.out, a.config, a.seed).read_text())
