"""Text-prompted segmentation-map generation.

Each class is described by its own short prompt (name, optional quantity,
optional location), encoded independently by a frozen text encoder and
written into a fixed slot of a concatenated control vector. A diffusion
model generates an RGB map image under that control vector, and the result
is snapped to the nearest palette color.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from casdm.data import LabelMap, Palette
from casdm.diffusion import NoiseSchedule, fast_sample
from casdm.errors import FormatError, ParameterError, StateError

QUANTITY_WORDS = ("one", "two", "several")
LOCATION_WORDS = (
    ("top left", "top", "top right"),
    ("left", "center", "right"),
    ("bottom left", "bottom", "bottom right"),
)


@dataclass(frozen=True)
class PromptEntry:
    class_id: int
    class_name: str
    quantity: str | None = None
    location: str | None = None

    def text(self) -> str:
        parts = [self.class_name]
        if self.quantity:
            parts.append(self.quantity)
            if self.location:
                parts.append(self.location)
        elif self.location:
            parts.append(self.location)
        return ", ".join(parts)


@dataclass(frozen=True)
class PromptSpec:
    entries: tuple[PromptEntry, ...]

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.class_id))
        if not entries:
            raise ParameterError("a prompt spec needs at least one entry")
        ids = [e.class_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ParameterError(f"duplicate class ids in prompt spec: {ids}")
        object.__setattr__(self, "entries", entries)

    @property
    def class_ids(self) -> list[int]:
        return [e.class_id for e in self.entries]


def save_prompt_specs(specs: list[PromptSpec], path) -> None:
    """JSON Lines, one record per class entry, grouped by ``spec`` index."""
    lines = []
    for i, spec in enumerate(specs):
        for e in spec.entries:
            rec = {"spec": i, "class_id": e.class_id, "name": e.class_name, "quantity": e.quantity, "location": e.location}
            lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_prompt_specs(path) -> list[PromptSpec]:
    groups: dict[int, list[PromptEntry]] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            entry = PromptEntry(int(rec["class_id"]), str(rec["name"]), rec.get("quantity"), rec.get("location"))
            groups.setdefault(int(rec.get("spec", 0)), []).append(entry)
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{n}: bad prompt record ({exc})") from exc
    return [PromptSpec(tuple(groups[k])) for k in sorted(groups)]


class HashTextEncoder:
    """Deterministic bag-of-tokens embedder standing in for a frozen text model.

    Each lowercase alphanumeric token maps to a fixed pseudo-random vector
    seeded by a hash of the token; a text is the L2-normalized token mean.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    @staticmethod
    def tokens(text: str) -> list[str]:
        return re.findall(r"[a-z0-9]+", text.lower())

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}:{token}".encode(), digest_size=8).digest()
        return np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(self.dim)

    def __call__(self, text: str) -> np.ndarray:
        return _encode_cached(self, text)

    def __hash__(self):
        return hash((self.dim, self.seed))

    def __eq__(self, other):
        return isinstance(other, HashTextEncoder) and (self.dim, self.seed) == (other.dim, other.seed)


@lru_cache(maxsize=4096)
def _encode_cached(encoder: HashTextEncoder, text: str) -> np.ndarray:
    toks = encoder.tokens(text)
    if not toks:
        raise ParameterError(f"prompt {text!r} has no tokens")
    v = np.mean([encoder._token_vector(t) for t in toks], axis=0)
    v = v / np.linalg.norm(v)
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class TextEmbedding:
    data: np.ndarray
    per_class_dim: int

    @property
    def max_classes(self) -> int:
        return self.data.shape[0] // self.per_class_dim

    def slot(self, k: int) -> np.ndarray:
        d = self.per_class_dim
        return self.data[k * d:(k + 1) * d]


def encode_prompts(spec: PromptSpec, encoder, max_classes: int = 16) -> TextEmbedding:
    """Encode each entry separately and write it into its class slot.

    Absent classes keep the zero vector.
    """
    dim = encoder.dim
    out = np.zeros(max_classes * dim, dtype=np.float32)
    for e in spec.entries:
        if not 0 <= e.class_id < max_classes:
            raise ParameterError(f"class id {e.class_id} outside [0, {max_classes})")
        out[e.class_id * dim:(e.class_id + 1) * dim] = encoder(e.text())
    return TextEmbedding(out, dim)


def _quantity_word(mask: np.ndarray) -> str:
    _, n = ndimage.label(mask, structure=np.ones((3, 3)))
    return QUANTITY_WORDS[min(n, 3) - 1]


def _location_word(mask: np.ndarray) -> str:
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    row = min(int(ys.mean() * 3 / h), 2)
    col = min(int(xs.mean() * 3 / w), 2)
    return LOCATION_WORDS[row][col]


def derive_prompt(label_map, palette: Palette | None = None) -> PromptSpec:
    """Prompt describing a map: every present class with quantity and location."""
    grid = np.asarray(getattr(label_map, "classes", label_map))
    palette = palette or getattr(label_map, "palette", None)
    if palette is None:
        raise ParameterError("derive_prompt needs a palette for class names")
    entries = []
    for c in np.unique(grid):
        mask = grid == c
        entries.append(PromptEntry(int(c), palette.entries[int(c)].name, _quantity_word(mask), _location_word(mask)))
    return PromptSpec(tuple(entries))


def embed_batch(specs: list[PromptSpec], encoder, max_classes: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([encode_prompts(s, encoder, max_classes).data for s in specs]))


def generate_map(
    params,
    embedding,
    schedule: NoiseSchedule,
    num_inference_steps: int,
    seed: int,
    height: int = 32,
    width: int = 32,
    clip_x0: bool = True,
) -> torch.Tensor:
    """Continuous RGB map image(s) in [-1, 1], shape ``(B, 3, H, W)``."""
    if params is None:
        raise StateError("map generator has no trained parameters")
    if isinstance(embedding, TextEmbedding):
        cond = torch.from_numpy(np.asarray(embedding.data))[None]
    else:
        cond = torch.as_tensor(embedding)
        cond = cond[None] if cond.ndim == 1 else cond
    shape = (cond.shape[0], params.config.in_channels, height, width)
    was_training = params.training
    params.eval()
    try:
        raw = fast_sample(params, cond.float(), schedule, num_inference_steps, seed, shape, clip_x0=clip_x0)
    finally:
        params.train(was_training)
    return raw.clamp(-1.0, 1.0)


def nearest_palette_index(rgb: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """Index of the nearest color for each ``(..., 3)`` entry; ties go to the lowest index."""
    rgb = np.asarray(rgb, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    if colors.size == 0:
        raise ParameterError("palette is empty")
    d = ((rgb[..., None, :] - colors) ** 2).sum(-1)
    return np.argmin(d, axis=-1)


def quantize_to_palette(raw, palette: Palette):
    """Snap a ``(3, H, W)`` map image in [-1, 1] to palette classes.

    A ``(B, 3, H, W)`` input yields a list of label maps.
    """
    arr = np.asarray(raw.detach().cpu() if isinstance(raw, torch.Tensor) else raw, dtype=np.float64)
    if arr.ndim == 4:
        return [quantize_to_palette(a, palette) for a in arr]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ParameterError(f"expected a 3-channel map image, got shape {arr.shape}")
    rgb = (arr.transpose(1, 2, 0) + 1.0) * 127.5
    return LabelMap(nearest_palette_index(rgb, palette.colors), palette)


def map_to_image(label_grid, palette: Palette) -> torch.Tensor:
    """Render class ids as palette colors in [-1, 1]; accepts ``(H, W)`` or ``(B, H, W)``."""
    grid = torch.as_tensor(np.asarray(getattr(label_grid, "classes", label_grid))).long()
    colors = torch.from_numpy(palette.colors.astype(np.float32) / 127.5 - 1.0)
    img = colors[grid]
    return img.movedim(-1, -3).contiguous()
