"""Image/label-map pairs, palettes, on-disk layout and the toy dataset generator.

On-disk layout::

    root/palette.json
    root/train/images/<stem>.png   root/train/maps/<stem>.png
    root/test/images/<stem>.png    root/test/maps/<stem>.png

Maps are RGB images whose every pixel is a palette color. Images are 8-bit
RGB on disk and ``[-1, 1]`` float in memory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from casdm.errors import FormatError, ParameterError, ProtocolError, ValidationError

SPLITS = ("train", "test")


@dataclass(frozen=True)
class PaletteEntry:
    name: str
    color: tuple[int, int, int]


@dataclass(frozen=True)
class Palette:
    entries: dict[int, PaletteEntry]

    def __post_init__(self):
        if not self.entries:
            raise ParameterError("palette is empty")
        if sorted(self.entries) != list(range(len(self.entries))):
            raise ParameterError("palette class ids must be contiguous from 0")
        colors = [e.color for e in self.entries.values()]
        if len(set(colors)) != len(colors):
            raise ParameterError("palette colors must be pairwise distinct")
        for e in self.entries.values():
            if len(e.color) != 3 or not all(0 <= v <= 255 for v in e.color):
                raise ParameterError(f"bad color {e.color} for {e.name!r}")

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [self.entries[i].name for i in range(self.num_classes)]

    @property
    def colors(self) -> np.ndarray:
        return np.array([self.entries[i].color for i in range(self.num_classes)], dtype=np.uint8)

    def to_json(self) -> str:
        rows = [
            {"class_id": i, "name": e.name, "r": e.color[0], "g": e.color[1], "b": e.color[2]}
            for i, e in sorted(self.entries.items())
        ]
        return json.dumps({"classes": rows}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Palette":
        try:
            rows = json.loads(text)["classes"]
            entries = {int(r["class_id"]): PaletteEntry(str(r["name"]), (int(r["r"]), int(r["g"]), int(r["b"]))) for r in rows}
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed palette: {exc}") from exc
        return cls(entries)

    @classmethod
    def load(cls, path) -> "Palette":
        path = Path(path)
        if not path.is_file():
            raise FormatError(f"missing palette file {path}")
        return cls.from_json(path.read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


@dataclass(eq=False)
class LabelMap:
    classes: np.ndarray
    palette: Palette

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.classes.ndim != 2:
            raise ParameterError(f"label map must be 2-D, got shape {self.classes.shape}")
        if self.classes.size and (self.classes.min() < 0 or self.classes.max() >= self.palette.num_classes):
            raise ParameterError("label map holds class ids missing from the palette")

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    def to_rgb(self) -> np.ndarray:
        return self.palette.colors[self.classes]

    @classmethod
    def from_rgb(cls, rgb: np.ndarray, palette: Palette) -> "LabelMap":
        """Exact color lookup; raises ``ValueError`` on off-palette pixels."""
        rgb = np.asarray(rgb, dtype=np.int64)
        packed = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
        cols = palette.colors.astype(np.int64)
        keys = (cols[:, 0] << 16) | (cols[:, 1] << 8) | cols[:, 2]
        order = np.argsort(keys)
        pos = np.searchsorted(keys[order], packed).clip(0, len(keys) - 1)
        hit = keys[order][pos] == packed
        if not hit.all():
            bad = sorted({tuple(int(v) for v in rgb[i, j]) for i, j in zip(*np.nonzero(~hit))})
            raise ValueError(f"{len(bad)} off-palette colors, e.g. {bad[:3]}")
        return cls(order[pos], palette)


@dataclass(eq=False)
class SamplePair:
    image: np.ndarray
    map: LabelMap
    source: str = "real"

    def __post_init__(self):
        if self.image.shape[1:] != self.map.shape:
            raise ParameterError(f"image {self.image.shape} and map {self.map.shape} differ in size")


@dataclass(eq=False)
class PairSet:
    """A batch of pairs held in memory, ready for training or evaluation."""

    images: torch.Tensor
    labels: torch.Tensor
    palette: Palette
    sources: list[str] = field(default_factory=list)
    stems: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = self.images.shape[0]
        if not self.sources:
            self.sources = ["real"] * n
        if not self.stems:
            self.stems = [f"{i:05d}" for i in range(n)]
        if self.labels.shape[0] != n or len(self.sources) != n or len(self.stems) != n:
            raise ParameterError("pair set fields disagree on length")

    def __len__(self) -> int:
        return self.images.shape[0]

    def pair(self, i: int) -> SamplePair:
        return SamplePair(self.images[i].numpy(), LabelMap(self.labels[i].numpy(), self.palette), self.sources[i])

    def subset(self, idx) -> "PairSet":
        idx = list(idx)
        return PairSet(
            self.images[idx], self.labels[idx], self.palette,
            [self.sources[i] for i in idx], [self.stems[i] for i in idx],
        )

    def concat(self, other: "PairSet") -> "PairSet":
        return PairSet(
            torch.cat([self.images, other.images]),
            torch.cat([self.labels, other.labels]),
            self.palette,
            self.sources + other.sources,
            self.stems + other.stems,
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.numpy().tobytes())
        h.update(self.labels.numpy().tobytes())
        return h.hexdigest()


def image_to_uint8(image) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def uint8_to_image(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _resize(rgb: np.ndarray, size: tuple[int, int], resample) -> np.ndarray:
    h, w = size
    return np.asarray(Image.fromarray(rgb).resize((w, h), resample=resample))


def _write_png(path: Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


@dataclass
class DatasetManifest:
    root: Path
    split: str
    palette: Palette
    records: list[tuple[Path, Path]]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def stems(self) -> list[str]:
        return [img.stem for img, _ in self.records]

    def load_pairs(self, size: tuple[int, int] | None = None) -> PairSet:
        """Decode every pair, optionally resized to ``size = (H, W)``.

        Images are resampled bilinearly; maps use nearest-neighbor so they
        keep exact palette colors.
        """
        images, labels = [], []
        for img_path, map_path in self.records:
            img, mp = _read_rgb(img_path), _read_rgb(map_path)
            if size is not None and img.shape[:2] != tuple(size):
                img = _resize(img, size, Image.BILINEAR)
                mp = _resize(mp, size, Image.NEAREST)
            images.append(uint8_to_image(img))
            labels.append(LabelMap.from_rgb(mp, self.palette).classes)
        if not images:
            raise FormatError(f"split {self.split!r} under {self.root} is empty")
        return PairSet(
            torch.from_numpy(np.stack(images)),
            torch.from_numpy(np.stack(labels)),
            self.palette,
            ["real"] * len(images),
            self.stems,
        )

    def split_hash(self) -> str:
        h = hashlib.sha256()
        for img, mp in self.records:
            h.update(img.read_bytes())
            h.update(mp.read_bytes())
        return h.hexdigest()


def validate_pair_dir(pair_dir, palette: Palette) -> tuple[list[tuple[Path, Path]], list[tuple[str, str]]]:
    """Check ``pair_dir/images`` against ``pair_dir/maps``; returns (valid records, problems)."""
    pair_dir = Path(pair_dir)
    img_dir, map_dir = pair_dir / "images", pair_dir / "maps"
    problems: list[tuple[str, str]] = []
    if not img_dir.is_dir() or not map_dir.is_dir():
        return [], [(str(pair_dir), "missing images/ or maps/ directory")]
    images = {p.stem: p for p in sorted(img_dir.glob("*.png"))}
    maps = {p.stem: p for p in sorted(map_dir.glob("*.png"))}
    for stem in sorted(set(images) ^ set(maps)):
        problems.append((str(images.get(stem) or maps.get(stem)), "no matching image/map partner"))
    records = []
    for stem in sorted(set(images) & set(maps)):
        try:
            img, mp = _read_rgb(images[stem]), _read_rgb(maps[stem])
        except OSError as exc:
            problems.append((str(images[stem]), f"unreadable: {exc}"))
            continue
        if img.shape != mp.shape:
            problems.append((str(maps[stem]), f"size {mp.shape[:2]} differs from image {img.shape[:2]}"))
            continue
        try:
            LabelMap.from_rgb(mp, palette)
        except ValueError as exc:
            problems.append((str(maps[stem]), str(exc)))
            continue
        records.append((images[stem], maps[stem]))
    return records, problems


def validate_dataset(root) -> list[tuple[str, str]]:
    """All problems found under ``root`` as ``(path, message)`` tuples.

    ``root`` is either a dataset with split directories or a single
    directory holding ``images/`` and ``maps/``.
    """
    root = Path(root)
    try:
        palette = Palette.load(root / "palette.json")
    except (FormatError, ParameterError) as exc:
        return [(str(root / "palette.json"), str(exc))]
    if (root / "maps").is_dir():
        return validate_pair_dir(root, palette)[1]
    problems = []
    seen: dict[bytes, str] = {}
    found = False
    for split in SPLITS:
        if not (root / split).exists():
            continue
        found = True
        records, probs = validate_pair_dir(root / split, palette)
        problems += probs
        for img, mp in records:
            key = hashlib.sha256(img.read_bytes() + mp.read_bytes()).digest()
            if key in seen and seen[key] != split:
                problems.append((str(img), f"pair also appears in split {seen[key]!r}"))
            seen.setdefault(key, split)
    if not found:
        problems.append((str(root), "no train/ or test/ split"))
    return problems


def load_dataset(root, split: str, purpose: str = "eval") -> DatasetManifest:
    """Validated manifest for one split.

    ``purpose="train"`` refuses anything but the train split, so no training
    path can read held-out data.
    """
    if split not in SPLITS:
        raise ParameterError(f"split must be one of {SPLITS}")
    if purpose == "train" and split != "train":
        raise ProtocolError(f"training code asked for the {split!r} split")
    root = Path(root)
    palette = Palette.load(root / "palette.json")
    records, problems = validate_pair_dir(root / split, palette)
    if problems:
        raise ValidationError(problems)
    return DatasetManifest(root, split, palette, records)


def save_pairs(pairs: PairSet, root, split: str | None) -> DatasetManifest:
    """Write pairs under ``root/<split>/`` (or straight under ``root`` when split is None)."""
    root = Path(root)
    base = root / split if split else root
    img_dir, map_dir = base / "images", base / "maps"
    img_dir.mkdir(parents=True, exist_ok=True)
    map_dir.mkdir(parents=True, exist_ok=True)
    pal_path = root / "palette.json"
    if not pal_path.exists():
        pairs.palette.save(pal_path)
    records = []
    for i, stem in enumerate(pairs.stems):
        ip, mp = img_dir / f"{stem}.png", map_dir / f"{stem}.png"
        _write_png(ip, image_to_uint8(pairs.images[i].numpy()))
        _write_png(mp, pairs.palette.colors[pairs.labels[i].numpy()])
        records.append((ip, mp))
    return DatasetManifest(root, split or "", pairs.palette, records)


def load_pair_dir(pair_dir, palette: Palette | None = None) -> PairSet:
    """Load an ``images/`` + ``maps/`` directory, raising on any problem."""
    pair_dir = Path(pair_dir)
    palette = palette or Palette.load(pair_dir / "palette.json")
    records, problems = validate_pair_dir(pair_dir, palette)
    if problems:
        raise ValidationError(problems)
    return DatasetManifest(pair_dir, "", palette, records).load_pairs()


def load_map_dir(map_dir, palette: Palette) -> tuple[list[str], torch.Tensor]:
    """Stems and ``(N, H, W)`` class grids for every PNG map in ``map_dir``."""
    paths = sorted(Path(map_dir).glob("*.png"))
    problems, grids = [], []
    for p in paths:
        try:
            grids.append(LabelMap.from_rgb(_read_rgb(p), palette).classes)
        except ValueError as exc:
            problems.append((str(p), str(exc)))
    if problems:
        raise ValidationError(problems)
    if not grids:
        raise FormatError(f"no PNG maps in {map_dir}")
    return [p.stem for p in paths], torch.from_numpy(np.stack(grids))


def onehot(label_map, num_classes: int) -> np.ndarray:
    grid = np.asarray(getattr(label_map, "classes", label_map), dtype=np.int64)
    if grid.size and (grid.min() < 0 or grid.max() >= num_classes):
        raise ParameterError(f"class id outside [0, {num_classes})")
    return (np.arange(num_classes)[:, None, None] == grid[None]).astype(np.float32)


# --- augmentation -----------------------------------------------------------

def draw_transform(rng: np.random.Generator) -> tuple[bool, bool, int]:
    """(hflip, vflip, quarter_turns); always consumes four draws."""
    u = rng.random(3)
    k = int(rng.integers(1, 4))
    return bool(u[0] < 0.5), bool(u[1] < 0.5), k if u[2] < 0.5 else 0


def apply_transform(arr, transform: tuple[bool, bool, int]):
    """Apply to the last two axes of a numpy array or torch tensor."""
    hflip, vflip, k = transform
    if isinstance(arr, torch.Tensor):
        if hflip:
            arr = torch.flip(arr, dims=(-1,))
        if vflip:
            arr = torch.flip(arr, dims=(-2,))
        return torch.rot90(arr, k, dims=(-2, -1)) if k else arr
    if hflip:
        arr = arr[..., ::-1]
    if vflip:
        arr = arr[..., ::-1, :]
    return np.ascontiguousarray(np.rot90(arr, k, axes=(-2, -1)) if k else arr)


def augment(pair: SamplePair, seed: int) -> SamplePair:
    tf = draw_transform(np.random.default_rng(seed))
    return SamplePair(
        apply_transform(pair.image, tf),
        LabelMap(apply_transform(pair.map.classes, tf), pair.map.palette),
        pair.source,
    )


def augment_batch(images: torch.Tensor, labels: torch.Tensor, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    rng = np.random.default_rng(seed)
    out_i, out_l = [], []
    for img, lab in zip(images, labels):
        tf = draw_transform(rng)
        out_i.append(apply_transform(img, tf))
        out_l.append(apply_transform(lab, tf))
    return torch.stack(out_i), torch.stack(out_l)


# --- toy dataset ------------------------------------------------------------

@dataclass
class ClassSpec:
    name: str
    occurrence: float
    frac_range: tuple[float, float]
    shape: str
    color: tuple[int, int, int]
    base_color: tuple[int, int, int]
    jitter: float = 8.0


def default_class_specs() -> list[ClassSpec]:
    return [
        ClassSpec("background", 1.0, (0.0, 1.0), "background-fill", (0, 0, 0), (30, 25, 25)),
        ClassSpec("liver", 0.85, (0.15, 0.35), "blob", (255, 0, 0), (150, 55, 50)),
        ClassSpec("fat", 0.6, (0.08, 0.20), "ribbon", (0, 255, 0), (215, 190, 120)),
        ClassSpec("blood", 0.08, (0.02, 0.06), "blob", (0, 0, 255), (100, 15, 25)),
        ClassSpec("cystic duct", 0.08, (0.02, 0.05), "ribbon", (255, 255, 0), (175, 175, 65)),
    ]


@dataclass
class ToyConfig:
    num_train: int = 500
    num_test: int = 100
    height: int = 32
    width: int = 32
    class_specs: list[ClassSpec] = field(default_factory=default_class_specs)
    texture_noise: float = 12.0
    shading: float = 0.05
    max_attempts: int = 100

    def palette(self) -> Palette:
        return Palette({i: PaletteEntry(s.name, tuple(s.color)) for i, s in enumerate(self.class_specs)})


def _check_feasible(cfg: ToyConfig) -> None:
    shapes = {"blob", "ribbon", "background-fill"}
    min_total = 0.0
    for s in cfg.class_specs:
        lo, hi = s.frac_range
        if not 0.0 <= s.occurrence <= 1.0:
            raise ParameterError(f"{s.name}: occurrence {s.occurrence} outside [0, 1]")
        if not 0.0 <= lo <= hi <= 1.0:
            raise ParameterError(f"{s.name}: infeasible pixel-fraction range {s.frac_range}")
        if s.shape not in shapes:
            raise ParameterError(f"{s.name}: unknown shape family {s.shape!r}")
        if s.shape != "background-fill":
            if hi * cfg.height * cfg.width < 1:
                raise ParameterError(f"{s.name}: range {s.frac_range} admits no pixel at {cfg.height}x{cfg.width}")
            min_total += lo
    if min_total > 1.0:
        raise ParameterError(f"minimum pixel fractions sum to {min_total:.3f} > 1")
    if cfg.class_specs[0].shape != "background-fill" or cfg.class_specs[0].occurrence != 1.0:
        raise ParameterError("class 0 must be an always-present background fill")


def _smooth_field(rng, h, w, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _region(rng, shape: str, h: int, w: int, count: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    noise = _smooth_field(rng, h, w, max(h, w) / 10)
    cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
    if shape == "blob":
        ry, rx = rng.uniform(0.6, 1.4, size=2)
        score = -np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) / max(h, w) + 0.05 * noise
    else:
        theta = rng.uniform(0, np.pi)
        u = np.array([np.cos(theta), np.sin(theta)])
        along = (yy - cy) * u[0] + (xx - cx) * u[1]
        across = -(yy - cy) * u[1] + (xx - cx) * u[0]
        amp, freq, phase = rng.uniform(0.5, 2.0), rng.uniform(0.1, 0.3), rng.uniform(0, 2 * np.pi)
        score = -np.abs(across - amp * np.sin(freq * along + phase)) / max(h, w) + 0.01 * noise
    flat = np.argsort(-score.ravel(), kind="stable")[:count]
    mask = np.zeros(h * w, dtype=bool)
    mask[flat] = True
    return mask.reshape(h, w)


def _toy_map(cfg: ToyConfig, rng) -> np.ndarray:
    h, w = cfg.height, cfg.width
    wanted = [c for c, s in enumerate(cfg.class_specs) if c > 0 and rng.random() < s.occurrence]
    for _ in range(cfg.max_attempts):
        grid = np.zeros((h, w), dtype=np.int64)
        for c in wanted:
            lo, hi = cfg.class_specs[c].frac_range
            count = int(np.clip(round(rng.uniform(lo, hi) * h * w), max(1, np.ceil(lo * h * w)), np.floor(hi * h * w)))
            grid[_region(rng, cfg.class_specs[c].shape, h, w, count)] = c
        counts = np.bincount(grid.ravel(), minlength=len(cfg.class_specs)) / (h * w)
        ok = all(
            cfg.class_specs[c].frac_range[0] - 1e-12 <= counts[c] <= cfg.class_specs[c].frac_range[1] + 1e-12
            and counts[c] > 0
            for c in wanted
        )
        lo0, hi0 = cfg.class_specs[0].frac_range
        if ok and counts[0] > 0 and lo0 - 1e-12 <= counts[0] <= hi0 + 1e-12:
            return grid
    raise ParameterError(f"could not satisfy pixel-fraction constraints in {cfg.max_attempts} attempts")


def render_toy_image(cfg: ToyConfig, grid: np.ndarray, rng) -> np.ndarray:
    """Tissue-colored image in [-1, 1] for a label grid."""
    h, w = grid.shape
    base = np.array([s.base_color for s in cfg.class_specs], dtype=np.float64)
    jit = np.array([s.jitter for s in cfg.class_specs], dtype=np.float64)[:, None]
    colors = base + jit * rng.standard_normal(base.shape)
    shade = 1.0 + cfg.shading * _smooth_field(rng, h, w, max(h, w) / 6)
    rgb = colors[grid] * shade[..., None] + cfg.texture_noise * rng.standard_normal((h, w, 3))
    rgb = np.clip(np.round(rgb), 0, 255)
    return (rgb.transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def generate_toy_pairs(cfg: ToyConfig, n: int, seed: int, prefix: str = "") -> PairSet:
    _check_feasible(cfg)
    rng = np.random.default_rng(seed)
    palette = cfg.palette()
    images, labels = [], []
    for _ in range(n):
        grid = _toy_map(cfg, rng)
        labels.append(grid)
        images.append(render_toy_image(cfg, grid, rng))
    return PairSet(
        torch.from_numpy(np.stack(images)),
        torch.from_numpy(np.stack(labels)),
        palette,
        ["real"] * n,
        [f"{prefix}{i:05d}" for i in range(n)],
    )


def synth_toy_dataset(cfg: ToyConfig, seed: int, root) -> dict[str, DatasetManifest]:
    """Write a toy dataset with train and test splits under ``root``."""
    _check_feasible(cfg)
    seeds = np.random.SeedSequence(seed).spawn(2)
    out = {}
    for split, n, ss in zip(SPLITS, (cfg.num_train, cfg.num_test), seeds):
        pairs = generate_toy_pairs(cfg, n, int(ss.generate_state(1)[0]), prefix=f"{split}_")
        out[split] = save_pairs(pairs, root, split)
    return out
