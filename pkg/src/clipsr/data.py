"""Procedural caption/image scenes and the on-disk dataset layout.

Layout::

    <root>/manifest.json
    <root>/<split>/<id>.ppm
    <root>/<split>/<id>.txt      # caption, one line
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputError
from .imaging import ImageBuffer, read_image, resample_array, write_image
from .rng import make_rng

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
COLORS = tuple(PALETTE)
SHAPES = ("square", "circle", "triangle")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    background: str
    cx: float
    cy: float
    half: float

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.shape} on a {self.background} background"

    def bbox(self, size: int) -> tuple[int, int, int, int]:
        """Pixel bbox ``(top, left, bottom, right)`` with exclusive ends."""
        top = int(np.floor((self.cy - self.half) * size))
        left = int(np.floor((self.cx - self.half) * size))
        bottom = int(np.ceil((self.cy + self.half) * size))
        right = int(np.ceil((self.cx + self.half) * size))
        return max(top, 0), max(left, 0), min(bottom, size), min(right, size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["caption"] = self.caption
        return d


def sample_scene_spec(rng: np.random.Generator) -> SceneSpec:
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = COLORS[rng.integers(len(COLORS))]
    others = [c for c in COLORS if c != color]
    background = others[rng.integers(len(others))]
    half = float(rng.uniform(0.15, 0.35))
    margin = half + 0.02
    cx = float(rng.uniform(margin, 1 - margin))
    cy = float(rng.uniform(margin, 1 - margin))
    return SceneSpec(shape, color, background, round(cx, 6), round(cy, 6), round(half, 6))


def _inside(spec: SceneSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    dx, dy = x - spec.cx, y - spec.cy
    h = spec.half
    if spec.shape == "square":
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if spec.shape == "circle":
        return dx * dx + dy * dy <= h * h
    # apex at the top, base at the bottom of the bbox
    frac = (dy + h) / (2 * h)
    return (dy >= -h) & (dy <= h) & (np.abs(dx) <= frac * h)


def coverage(spec: SceneSpec, size: int, ss: int = SUPERSAMPLE) -> np.ndarray:
    """Fraction of each pixel covered by the object, by ``ss x ss`` supersampling."""
    offs = (np.arange(ss) + 0.5) / ss
    coords = (np.arange(size)[:, None] + offs[None, :]).reshape(-1) / size
    y, x = np.meshgrid(coords, coords, indexing="ij")
    inside = _inside(spec, x, y).astype(np.float64)
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def render_scene(spec: SceneSpec, size: int = 256) -> ImageBuffer:
    cov = coverage(spec, size)[..., None]
    fg = np.array(PALETTE[spec.color])
    bg = np.array(PALETTE[spec.background])
    return ImageBuffer(cov * fg + (1 - cov) * bg)


def object_mask(spec: SceneSpec, size: int) -> np.ndarray:
    return coverage(spec, size) >= 1.0


def gen_scene(rng: np.random.Generator, size: int = 256) -> tuple[ImageBuffer, SceneSpec]:
    spec = sample_scene_spec(rng)
    return render_scene(spec, size), spec


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return make_rng(seed, "scene", index)


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

def parse_splits(text: str) -> dict[str, float]:
    parts = [float(p) for p in text.replace(",", "/").split("/")]
    names = ("train", "val", "test")[: len(parts)]
    if not parts or len(parts) > 3 or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise ValueError(f"invalid split specification {text!r}")
    total = sum(parts)
    return {n: p / total for n, p in zip(names, parts)}


def split_counts(count: int, fractions: dict[str, float]) -> dict[str, int]:
    names = list(fractions)
    counts = {n: int(np.floor(count * fractions[n])) for n in names}
    counts[names[0]] += count - sum(counts.values())
    return counts


def generate_dataset(root, count: int, seed: int, splits: str = "80/10/10", hr_size: int = 64) -> dict:
    """Render ``count`` scenes under ``root`` and write the manifest."""
    if count <= 0:
        raise ValueError("count must be positive")
    counts = split_counts(count, parse_splits(splits))
    os.makedirs(root, exist_ok=True)
    entries = []
    index = 0
    for split, n in counts.items():
        os.makedirs(os.path.join(root, split), exist_ok=True)
        for _ in range(n):
            img, spec = gen_scene(scene_rng(seed, index), hr_size)
            ident = f"{index:06d}"
            rel_img = f"{split}/{ident}.ppm"
            rel_txt = f"{split}/{ident}.txt"
            write_image(os.path.join(root, rel_img), img)
            with open(os.path.join(root, rel_txt), "w", encoding="utf-8") as fh:
                fh.write(spec.caption + "\n")
            entries.append({
                "id": ident,
                "split": split,
                "image": rel_img,
                "caption_file": rel_txt,
                "scene": spec.to_dict(),
                "bbox": list(spec.bbox(hr_size)),
            })
            index += 1
    manifest = {"seed": seed, "count": count, "hr_size": hr_size, "splits": counts, "entries": entries}
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(root) -> dict:
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


@dataclass
class SplitData:
    """In-memory arrays for one split: HR and LR images as ``(N, 3, H, W)``."""

    hr: np.ndarray
    lr: np.ndarray
    captions: list[str]
    specs: list[SceneSpec]
    bboxes: list[tuple[int, int, int, int]]

    def __len__(self) -> int:
        return len(self.captions)


def spec_from_dict(d: dict) -> SceneSpec:
    return SceneSpec(d["shape"], d["color"], d["background"], d["cx"], d["cy"], d["half"])


def load_split(root, split: str, scale: int | None = None) -> SplitData:
    manifest = load_manifest(root)
    entries = [e for e in manifest["entries"] if e["split"] == split]
    if not entries:
        raise InputError(f"split {split!r} is empty in {root}")
    hr = np.stack([read_image(os.path.join(root, e["image"])).to_chw() for e in entries])
    captions = []
    for e in entries:
        with open(os.path.join(root, e["caption_file"]), encoding="utf-8") as fh:
            captions.append(fh.readline().strip())
    lr = degrade(hr, scale) if scale else hr
    return SplitData(hr, lr, captions, [spec_from_dict(e["scene"]) for e in entries],
                     [tuple(e["bbox"]) for e in entries])


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic downsampling by ``scale`` (the LR formation model)."""
    h, w = hr.shape[-2:]
    if h % scale or w % scale:
        raise ValueError(f"HR size {h}x{w} not divisible by scale {scale}")
    return resample_array(hr, h // scale, w // scale).astype(np.float32)


def in_memory_split(count: int, seed: int, hr_size: int, scale: int | None = None, offset: int = 0) -> SplitData:
    """Render scenes without touching disk (used by tests and pretraining probes).

    Images pass through 8-bit quantisation so they match what a round trip
    through the dataset files would give.
    """
    imgs, specs = [], []
    for i in range(offset, offset + count):
        img, spec = gen_scene(scene_rng(seed, i), hr_size)
        imgs.append(img.quantized().to_chw())
        specs.append(spec)
    hr = np.stack(imgs).astype(np.float32)
    lr = degrade(hr, scale) if scale else hr
    return SplitData(hr, lr, [s.caption for s in specs], specs, [s.bbox(hr_size) for s in specs])
