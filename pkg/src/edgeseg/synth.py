"""Procedural scene-text-like samples with exact masks, and the on-disk dataset layout.

Each sample is a textured background (colour gradient, sensor noise,
high-contrast distractor shapes) with "words": rows of glyphs built from bars,
diagonals and arcs. The text mask is exactly the set of pixels the glyph
rasterizer touched; the area mask is the union of its components' bounding boxes.

Dataset directory::

    images/NNNNNN.png   RGB image
    masks/NNNNNN.png    text mask (0 / 255)
    boxes/NNNNNN.png    box-level area mask (0 / 255)
    manifest.txt        "index seed glyph_count", one line per sample
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SynthConfig
from .decoder_loss import derive_box_mask
from .imaging import load_mask, load_png, save_mask, save_png

# Glyph templates in a unit box (x right, y down). ("seg", x0, y0, x1, y1) or
# ("arc", cx, cy, rx, ry, start_deg, end_deg).
GLYPHS = {
    "I": [("seg", 0.5, 0.0, 0.5, 1.0)],
    "L": [("seg", 0.1, 0.0, 0.1, 1.0), ("seg", 0.1, 1.0, 0.9, 1.0)],
    "T": [("seg", 0.0, 0.0, 1.0, 0.0), ("seg", 0.5, 0.0, 0.5, 1.0)],
    "H": [("seg", 0.1, 0.0, 0.1, 1.0), ("seg", 0.9, 0.0, 0.9, 1.0), ("seg", 0.1, 0.5, 0.9, 0.5)],
    "E": [("seg", 0.1, 0.0, 0.1, 1.0), ("seg", 0.1, 0.0, 0.9, 0.0), ("seg", 0.1, 0.5, 0.7, 0.5),
          ("seg", 0.1, 1.0, 0.9, 1.0)],
    "V": [("seg", 0.0, 0.0, 0.5, 1.0), ("seg", 0.5, 1.0, 1.0, 0.0)],
    "X": [("seg", 0.0, 0.0, 1.0, 1.0), ("seg", 1.0, 0.0, 0.0, 1.0)],
    "Z": [("seg", 0.0, 0.0, 1.0, 0.0), ("seg", 1.0, 0.0, 0.0, 1.0), ("seg", 0.0, 1.0, 1.0, 1.0)],
    "O": [("arc", 0.5, 0.5, 0.45, 0.5, 0.0, 360.0)],
    "C": [("arc", 0.55, 0.5, 0.45, 0.5, 50.0, 310.0)],
    "U": [("seg", 0.1, 0.0, 0.1, 0.6), ("seg", 0.9, 0.0, 0.9, 0.6), ("arc", 0.5, 0.6, 0.4, 0.4, 0.0, 180.0)],
    "N": [("seg", 0.1, 0.0, 0.1, 1.0), ("seg", 0.1, 0.0, 0.9, 1.0), ("seg", 0.9, 0.0, 0.9, 1.0)],
    "A": [("seg", 0.0, 1.0, 0.5, 0.0), ("seg", 0.5, 0.0, 1.0, 1.0), ("seg", 0.25, 0.55, 0.75, 0.55)],
    "P": [("seg", 0.1, 0.0, 0.1, 1.0), ("arc", 0.35, 0.27, 0.5, 0.27, -90.0, 90.0),
          ("seg", 0.1, 0.0, 0.35, 0.0), ("seg", 0.1, 0.54, 0.35, 0.54)],
}
GLYPH_NAMES = tuple(sorted(GLYPHS))


@dataclass(frozen=True)
class Stroke:
    """One rasterizable primitive in pixel coordinates (pixel centres at integers)."""

    kind: str                    # "seg" or "arc"
    params: tuple                # seg: x0, y0, x1, y1; arc: cx, cy, rx, ry, a0, a1 (degrees)
    width: float


@dataclass(frozen=True)
class Glyph:
    name: str
    color: tuple
    strokes: tuple


@dataclass
class MaskPair:
    text_mask: np.ndarray
    area_mask: np.ndarray

    def __post_init__(self):
        if self.text_mask.shape != self.area_mask.shape:
            raise ValueError("text and area masks differ in shape")
        if np.any(self.text_mask & ~self.area_mask):
            raise ValueError("text mask is not covered by the area mask")


@dataclass
class SynthSample:
    image: np.ndarray
    masks: MaskPair
    glyphs: list = field(default_factory=list)
    seed: int = 0
    index: int = 0


# -- rasterization ------------------------------------------------------------


def stroke_coverage(stroke: Stroke, h: int, w: int) -> np.ndarray:
    """Boolean mask of pixels whose centre lies within ``width / 2`` of the stroke."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    half = stroke.width / 2.0
    if stroke.kind == "seg":
        x0, y0, x1, y1 = stroke.params
        dx, dy = x1 - x0, y1 - y0
        length2 = dx * dx + dy * dy
        if length2 == 0:
            t = np.zeros_like(xs)
        else:
            t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / length2, 0.0, 1.0)
        px, py = x0 + t * dx - xs, y0 + t * dy - ys
        return px * px + py * py <= half * half
    if stroke.kind == "arc":
        cx, cy, rx, ry, a0, a1 = stroke.params
        ux, uy = (xs - cx) / rx, (ys - cy) / ry
        radial = np.sqrt(ux * ux + uy * uy)
        band = np.abs(radial - 1.0) * min(rx, ry) <= half
        ang = np.degrees(np.arctan2(-uy, ux)) % 360.0
        lo, hi = a0 % 360.0, a0 % 360.0 + (a1 - a0)
        if hi - lo >= 360.0:
            inside = np.ones_like(band)
        else:
            inside = ((ang >= lo) & (ang <= hi)) | ((ang + 360.0 >= lo) & (ang + 360.0 <= hi))
        return band & inside
    raise ValueError(f"unknown stroke kind {stroke.kind!r}")


def glyph_strokes(name: str, x: float, y: float, gw: float, gh: float, width: float) -> tuple:
    out = []
    for prim in GLYPHS[name]:
        if prim[0] == "seg":
            _, a, b, c, d = prim
            out.append(Stroke("seg", (x + a * gw, y + b * gh, x + c * gw, y + d * gh), width))
        else:
            _, cx, cy, rx, ry, a0, a1 = prim
            out.append(Stroke("arc", (x + cx * gw, y + cy * gh, max(rx * gw, 1.0), max(ry * gh, 1.0), a0, a1), width))
    return tuple(out)


# -- background ---------------------------------------------------------------


def _luma(color) -> float:
    r, g, b = color
    return 0.299 * r + 0.587 * g + 0.114 * b


def _background(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    s = cfg.size
    modes = set(cfg.background_modes)
    c0 = rng.uniform(0, 255, 3)
    if "gradient" in modes:
        c1 = np.clip(c0 + rng.uniform(-90, 90, 3), 0, 255)
        theta = rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:s, 0:s] / max(s - 1, 1)
        t = np.clip(0.5 + (xs - 0.5) * np.cos(theta) + (ys - 0.5) * np.sin(theta), 0, 1)
        img = c0[None, None] * (1 - t[..., None]) + c1[None, None] * t[..., None]
    else:
        img = np.broadcast_to(c0, (s, s, 3)).copy()
    if "shapes" in modes:
        lo, hi = cfg.distractor_shapes
        for _ in range(int(rng.integers(lo, hi + 1))):
            color = rng.uniform(0, 255, 3)
            kind = rng.integers(0, 3)
            ys, xs = np.mgrid[0:s, 0:s]
            if kind == 0:       # rectangle
                x0, y0 = rng.integers(-s // 4, s, 2)
                bw, bh = rng.integers(s // 8, s // 2, 2)
                sel = (xs >= x0) & (xs < x0 + bw) & (ys >= y0) & (ys < y0 + bh)
            elif kind == 1:     # disc
                cx, cy = rng.uniform(0, s, 2)
                r = rng.uniform(s / 12, s / 4)
                sel = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
            else:               # long thick line
                x0, y0, x1, y1 = rng.uniform(0, s, 4)
                sel = stroke_coverage(Stroke("seg", (x0, y0, x1, y1), float(rng.uniform(3, 8))), s, s)
            img[sel] = color
    return img


def _text_color(rng: np.random.Generator, region: np.ndarray, min_contrast: float) -> tuple:
    bg = _luma(region.reshape(-1, 3).mean(axis=0))
    for _ in range(32):
        c = tuple(int(v) for v in rng.integers(0, 256, 3))
        if abs(_luma(c) - bg) >= min_contrast:
            return c
    return (0, 0, 0) if bg > 127 else (255, 255, 255)


# -- sampling -----------------------------------------------------------------


def sample_glyphs(rng: np.random.Generator, cfg: SynthConfig, background: np.ndarray) -> list[Glyph]:
    s = cfg.size
    glyphs: list[Glyph] = []
    n_words = int(rng.integers(cfg.words[0], cfg.words[1] + 1))
    for _ in range(n_words):
        gh = float(rng.integers(cfg.char_height[0], cfg.char_height[1] + 1))
        gw = round(0.6 * gh)
        gap = max(2.0, round(0.2 * gh))
        n_chars = int(rng.integers(cfg.chars_per_word[0], cfg.chars_per_word[1] + 1))
        n_chars = max(0, min(n_chars, int((s - 4) // (gw + gap))))
        if n_chars == 0:
            continue
        word_w = n_chars * gw + (n_chars - 1) * gap
        x = float(rng.integers(2, max(3, int(s - 2 - word_w) + 1)))
        y = float(rng.integers(2, max(3, int(s - 2 - gh) + 1)))
        if rng.random() < cfg.thin_stroke_prob:
            width = float(rng.integers(1, 3))
        else:
            width = float(rng.integers(cfg.stroke_width[0], cfg.stroke_width[1] + 1))
        region = background[int(y):int(y + gh) + 1, int(x):int(x + word_w) + 1]
        color = _text_color(rng, region, cfg.min_contrast)
        for _ in range(n_chars):
            name = GLYPH_NAMES[int(rng.integers(len(GLYPH_NAMES)))]
            glyphs.append(Glyph(name, color, glyph_strokes(name, x, y, gw, gh, width)))
            x += gw + gap
    return glyphs


def render_sample(cfg: SynthConfig, index: int) -> SynthSample:
    """Deterministic sample ``index`` of the dataset defined by ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    s = cfg.size
    img = _background(rng, cfg)
    glyphs = sample_glyphs(rng, cfg, img)
    text = np.zeros((s, s), dtype=bool)
    for g in glyphs:
        cover = np.zeros((s, s), dtype=bool)
        for st in g.strokes:
            cover |= stroke_coverage(st, s, s)
        img[cover] = g.color
        text |= cover
    if "noise" in cfg.background_modes and cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    image = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    masks = MaskPair(text, derive_box_mask(text))
    return SynthSample(image, masks, glyphs, cfg.seed, index)


def synth_sample(cfg: SynthConfig, index: int) -> tuple[np.ndarray, MaskPair]:
    sample = render_sample(cfg, index)
    return sample.image, sample.masks


# -- dataset on disk ----------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray          # N x H x W x 3 uint8
    text_masks: np.ndarray      # N x H x W bool
    area_masks: np.ndarray      # N x H x W bool

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.text_masks[idx], self.area_masks[idx])


def generate(cfg: SynthConfig, count: int, start: int = 0) -> Dataset:
    samples = [render_sample(cfg, i) for i in range(start, start + count)]
    return Dataset(
        np.stack([s.image for s in samples]) if samples else np.zeros((0, cfg.size, cfg.size, 3), np.uint8),
        np.stack([s.masks.text_mask for s in samples]) if samples else np.zeros((0, cfg.size, cfg.size), bool),
        np.stack([s.masks.area_mask for s in samples]) if samples else np.zeros((0, cfg.size, cfg.size), bool),
    )


def write_dataset(cfg: SynthConfig, out_dir: str | os.PathLike, count: int, start: int = 0) -> Path:
    root = Path(out_dir)
    for sub in ("images", "masks", "boxes"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(start, start + count):
        sample = render_sample(cfg, i)
        name = f"{i:06d}.png"
        save_png(root / "images" / name, sample.image)
        save_mask(root / "masks" / name, sample.masks.text_mask)
        save_mask(root / "boxes" / name, sample.masks.area_mask)
        lines.append(f"{i} {cfg.seed} {len(sample.glyphs)}")
    (root / "manifest.txt").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return root


def read_manifest(root: str | os.PathLike) -> list[tuple[int, int, int]]:
    path = Path(root) / "manifest.txt"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IOError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    records = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise IOError(f"{path}:{n}: expected 'index seed glyph_count'")
        records.append(tuple(int(p) for p in parts))
    return records


def load_dataset(root: str | os.PathLike) -> Dataset:
    """Read a dataset directory. Box masks are re-derived if ``boxes/`` is absent."""
    root = Path(root)
    images, texts, areas = [], [], []
    for index, _, _ in read_manifest(root):
        name = f"{index:06d}.png"
        img = load_png(root / "images" / name)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        text = load_mask(root / "masks" / name)
        box_path = root / "boxes" / name
        area = load_mask(box_path) if box_path.exists() else derive_box_mask(text)
        images.append(img)
        texts.append(text)
        areas.append(area)
    if not images:
        raise IOError(f"{root}: dataset is empty")
    return Dataset(np.stack(images), np.stack(texts), np.stack(areas))
