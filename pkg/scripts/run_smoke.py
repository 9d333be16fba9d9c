"""Toy end-to-end smoke run: train CASDM, sample held-out maps, check class colors.

    python scripts/run_smoke.py --out runs/smoke
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from casdm.config import load_config
from casdm.data import ToyConfig, load_dataset, synth_toy_dataset
from casdm.metrics import class_color_agreement
from casdm.training import moving_average, read_log, set_deterministic, synthesize_images, train_generator


def run(out: Path, config: Path | None = None, seed: int = 0, num_maps: int = 20) -> dict:
    cfg = load_config(config)
    toy = ToyConfig(num_train=cfg.data.num_train, num_test=cfg.data.num_test)
    if not (out / "data" / "palette.json").exists():
        synth_toy_dataset(toy, seed, out / "data")
    train = load_dataset(out / "data", "train", purpose="train").load_pairs()
    test = load_dataset(out / "data", "test").load_pairs().subset(range(num_maps))
    start = time.perf_counter()
    ckpt = train_generator("casdm", cfg, train, out / "casdm")
    minutes = (time.perf_counter() - start) / 60
    totals = [r["total"] for r in read_log(out / "casdm" / "train_log.jsonl")]
    ma = moving_average(totals, 100)
    images = synthesize_images(ckpt, test.labels, seed, 30)
    agreement, confusions = class_color_agreement(images, test.labels, [s.base_color for s in toy.class_specs])
    result = {
        "train_minutes": minutes,
        "loss_ma_first": float(ma[0]),
        "loss_ma_last": float(ma[-1]),
        "loss_ma_ratio": float(ma[-1] / ma[0]),
        "color_agreement": agreement,
        "confusions": {f"{a}->{b}": n for (a, b), n in sorted(confusions.items())},
        "sample_mse": float(np.mean((images.numpy() - test.images.numpy()) ** 2)),
    }
    (out / "smoke.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    set_deterministic()
    print(json.dumps(run(a.out, a.config, a.seed), indent=2))
