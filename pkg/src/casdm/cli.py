"""Command-line entry point: ``casdm <verb> <action> [flags]``.

Exit codes: 0 success, 1 usage/config, 2 validation, 3 runtime/training.
Set ``CASDM_DETERMINISTIC=1`` for single-threaded deterministic kernels.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from casdm.config import RunConfig, load_config
from casdm.data import (
    LabelMap,
    PairSet,
    ToyConfig,
    _read_rgb,
    load_dataset,
    load_map_dir,
    save_pairs,
    synth_toy_dataset,
    uint8_to_image,
    validate_dataset,
)
from casdm.downstream import STRATEGIES, ComparisonReport, Generators, build_arm, evaluate_arms
from casdm.errors import (
    ConfigError,
    FormatError,
    ParameterError,
    ProtocolError,
    StateError,
    TrainingError,
    ValidationError,
)
from casdm.mapgen import load_prompt_specs
from casdm.metrics import MetricsReport, RandomConvFeatures, quality_report, render_quality_table
from casdm.training import load_checkpoint, set_deterministic, synthesize_images, synthesize_maps, train_generator

log = logging.getLogger("casdm")

QUALITY_ASSUMPTION = (
    "Synthetic images are generated from the test-split maps and compared pair-wise with the "
    "real image of the same map (MS-SSIM, PSNR), averaged over the split; FFD compares the two sets."
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p, *flags):
    if "config" in flags:
        p.add_argument("--config", type=Path, help="JSON run configuration")
    if "seed" in flags:
        p.add_argument("--seed", type=int, help="overrides the configured seed")
    if "out" in flags:
        p.add_argument("--out", type=Path, required=True)
    if "data" in flags:
        p.add_argument("--data", type=Path, required=True)
    if "checkpoint" in flags:
        p.add_argument("--checkpoint", type=Path, action="append", default=[])
    if "steps" in flags:
        p.add_argument("--steps", type=int)
    if "count" in flags:
        p.add_argument("--count", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="casdm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    ds = verbs.add_parser("dataset").add_subparsers(dest="action", required=True, parser_class=_Parser)
    _common(ds.add_parser("synth", help="write the imbalanced toy dataset"), "config", "seed", "out")
    _common(ds.add_parser("validate", help="check a dataset directory"), "data")

    tr = verbs.add_parser("train").add_subparsers(dest="action", required=True, parser_class=_Parser)
    for kind in ("casdm", "mapgen"):
        p = tr.add_parser(kind)
        _common(p, "config", "seed", "out", "data", "checkpoint", "steps")

    gen = verbs.add_parser("generate").add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = gen.add_parser("image-from-map", help="one image per palette-colored map in --data")
    _common(p, "config", "seed", "out", "data", "checkpoint", "count")
    p = gen.add_parser("pair-from-prompts", help="map + image per prompt spec in --data (JSON Lines)")
    _common(p, "config", "seed", "out", "data", "checkpoint", "count")

    ev = verbs.add_parser("eval").add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = ev.add_parser("quality", help="FFD / MS-SSIM / PSNR of synthesized test images")
    _common(p, "config", "seed", "out", "data", "checkpoint", "count")
    p.add_argument("--input", type=Path, help="pre-generated images/ directory to score instead of sampling")
    p.add_argument("--label", action="append", default=[], help="row label per checkpoint")
    p = ev.add_parser("downstream", help="four-arm segmentation comparison")
    _common(p, "config", "seed", "out", "data", "checkpoint", "count")

    rp = verbs.add_parser("report").add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = rp.add_parser("render", help="re-render tables from stored records")
    _common(p, "out", "data")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.training.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.training.steps = args.steps
    return cfg


def _prepare_out(out: Path, cfg: RunConfig | None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        (out / "config.json").write_text(cfg.to_json())
    return out


def _checkpoints(args, *kinds):
    """Match ``--checkpoint`` files to the requested model kinds."""
    found = {}
    for path in args.checkpoint:
        ck = load_checkpoint(path)
        found.setdefault(ck.kind, ck)
    missing = [k for k in kinds if k not in found]
    if missing:
        raise ConfigError(f"{args.verb} {args.action} needs a {' and a '.join(missing)} checkpoint")
    return [found[k] for k in kinds]


def cmd_dataset(args) -> int:
    if args.action == "synth":
        cfg = _config(args)
        toy = ToyConfig(num_train=cfg.data.num_train, num_test=cfg.data.num_test, height=cfg.data.height, width=cfg.data.width)
        _prepare_out(args.out, cfg)
        synth_toy_dataset(toy, cfg.training.seed, args.out)
        print(f"wrote toy dataset to {args.out}")
        return 0
    problems = validate_dataset(args.data)
    for path, msg in problems:
        print(f"{path}: {msg}")
    print(f"{len(problems)} violation(s)")
    return 2 if problems else 0


def cmd_train(args) -> int:
    cfg = _config(args)
    pairs = load_dataset(args.data, "train", purpose="train").load_pairs()
    resume = args.checkpoint[0] if args.checkpoint else None
    _prepare_out(args.out, cfg)
    ck = train_generator(args.action, cfg, pairs, args.out, resume=resume)
    print(f"trained {args.action} to step {ck.step}; checkpoint {args.out / 'last.pt'}")
    return 0


def _seed(args, cfg):
    return args.seed if args.seed is not None else cfg.training.seed


def cmd_generate(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    if args.action == "image-from-map":
        (casdm,) = _checkpoints(args, "casdm")
        map_dir = args.data / "maps" if (args.data / "maps").is_dir() else args.data
        stems, labels = load_map_dir(map_dir, casdm.palette)
        if args.count is not None:
            stems, labels = stems[: args.count], labels[: args.count]
        images = synthesize_images(casdm, labels, seed, cfg.sampling.num_inference_steps)
        sources = ["synthetic_image"] * len(stems)
    else:
        casdm, mapgen = _checkpoints(args, "casdm", "mapgen")
        specs = load_prompt_specs(args.data)
        n = args.count or len(specs)
        specs = [specs[i % len(specs)] for i in range(n)]
        h, w = cfg.data.height, cfg.data.width
        labels = synthesize_maps(mapgen, specs, seed, h, w, cfg.sampling.num_inference_steps)
        images = synthesize_images(casdm, labels, seed + 1, cfg.sampling.num_inference_steps)
        stems = [f"pair_{i:05d}" for i in range(n)]
        sources = ["synthetic_pair"] * n
    _prepare_out(args.out, cfg)
    save_pairs(PairSet(images, labels, casdm.palette, sources, stems), args.out, None)
    print(f"wrote {len(stems)} pair(s) to {args.out}")
    return 0


def _eval_quality(args, cfg) -> int:
    test = load_dataset(args.data, "test").load_pairs()
    if args.count is not None:
        test = test.subset(range(min(args.count, len(test))))
    extractor = RandomConvFeatures(seed=cfg.eval.ffd_seed)
    reports = []
    if args.input is not None:
        img_dir = args.input / "images" if (args.input / "images").is_dir() else args.input
        imgs = []
        for stem in test.stems:
            path = img_dir / f"{stem}.png"
            if not path.is_file():
                raise ProtocolError(f"no synthetic image for test stem {stem!r} in {img_dir}")
            imgs.append(uint8_to_image(_read_rgb(path)))
        reports.append(quality_report(test.images, torch.from_numpy(np.stack(imgs)), args.input.name, extractor, cfg.eval.ms_ssim_scales))
    if not args.checkpoint and args.input is None:
        raise ConfigError("eval quality needs --checkpoint or --input")
    labels = args.label + [None] * len(args.checkpoint)
    for path, label in zip(args.checkpoint, labels):
        ck = load_checkpoint(path, expect_kind="casdm")
        synth = synthesize_images(ck, test.labels, _seed(args, cfg), cfg.sampling.num_inference_steps)
        reports.append(quality_report(test.images, synth, label or path.parent.name, extractor, cfg.eval.ms_ssim_scales))
    record = {"assumption": QUALITY_ASSUMPTION, "reports": [r.to_dict() for r in reports]}
    (args.out / "quality.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    (args.out / "quality_table.md").write_text(render_quality_markdown(record))
    print(render_quality_markdown(record), end="")
    return 0


def render_quality_markdown(record: dict) -> str:
    reports = [MetricsReport.from_dict(d) for d in record["reports"]]
    return f"<!-- {record['assumption']} -->\n" + render_quality_table(reports)


def _eval_downstream(args, cfg) -> int:
    base = load_dataset(args.data, "train", purpose="train").load_pairs()
    test = load_dataset(args.data, "test").load_pairs()
    found = {}
    for path in args.checkpoint:
        ck = load_checkpoint(path)
        found.setdefault(ck.kind, ck)
    for strategy, need in (("casdm_aug", "casdm"), ("casdm_plus_maps", "mapgen")):
        if need not in found:
            raise ProtocolError(f"arm {strategy!r} is missing its {need} checkpoint")
    gens = Generators(found["casdm"], found["mapgen"], cfg.sampling.num_inference_steps)
    seed = _seed(args, cfg)
    extra = args.count if args.count is not None else cfg.eval.extra_count
    arms = [build_arm(base, s, gens, cfg.eval.target_classes, extra, seed, cfg.eval.segmenter) for s in STRATEGIES]
    report = evaluate_arms(arms, test, cfg.eval.seeds, cfg.eval.target_classes)
    (args.out / "comparison.json").write_text(report.to_json())
    (args.out / "comparison.md").write_text(report.render())
    print(report.render(), end="")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    _prepare_out(args.out, cfg)
    return _eval_quality(args, cfg) if args.action == "quality" else _eval_downstream(args, cfg)


def cmd_report(args) -> int:
    """Re-render the markdown table next to stored JSON records."""
    src = args.data
    args.out.mkdir(parents=True, exist_ok=True)
    text = src.read_text()
    data = json.loads(text)
    if "reports" in data:
        (args.out / "quality_table.md").write_text(render_quality_markdown(data))
    elif "rows" in data:
        (args.out / "comparison.md").write_text(ComparisonReport.from_json(text).render())
    else:
        raise FormatError(f"{src} is neither a quality nor a comparison record")
    print(f"rendered {src} into {args.out}")
    return 0


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "generate": cmd_generate, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    set_deterministic()
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"error: training aborted at step {exc.step}: {exc}", file=sys.stderr)
        return 3
    except (ProtocolError, StateError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
