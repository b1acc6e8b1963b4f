"""Glyph atlas and template-match word recognizer.

Classical recognition: render a reference mask per glyph once at load time,
segment a word crop at empty pixel columns, and score every glyph against
the atlas by Dice overlap on a fixed raster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw, ImageFont

GLYPHS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
GRID = 32
FONT_SIZE = 40


def default_font(size: int = FONT_SIZE):
    """Bundled vector font; bitmap fallback on Pillow without sized defaults."""
    try:
        return ImageFont.load_default(size=size)
    except TypeError:
        return ImageFont.load_default()


def tight_crop(mask: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0 or cols.size == 0:
        return np.zeros((0, 0), dtype=bool)
    return mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def to_grid(mask: np.ndarray, grid: int = GRID) -> np.ndarray:
    """Nearest-neighbour resample of a binary mask onto a grid x grid raster."""
    if mask.size == 0:
        return np.zeros((grid, grid), dtype=bool)
    img = Image.fromarray(mask.astype(np.uint8) * 255)
    return np.asarray(img.resize((grid, grid), Image.NEAREST)) > 127


def dice(a: np.ndarray, b: np.ndarray) -> float:
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 0.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def render_glyph(char: str, font) -> np.ndarray:
    """Tight-cropped binary ink mask of one glyph."""
    canvas = Image.new("L", (4 * FONT_SIZE, 4 * FONT_SIZE), 255)
    ImageDraw.Draw(canvas).text((8, 8), char, fill=0, font=font)
    return tight_crop(np.asarray(canvas) < 128)


def split_columns(mask: np.ndarray, min_width: int = 2) -> list[np.ndarray]:
    """Cut a word mask at empty columns; each ink run becomes one glyph."""
    ink = mask.any(axis=0)
    segments: list[np.ndarray] = []
    start: int | None = None
    for x, has_ink in enumerate(list(ink) + [False]):
        if has_ink and start is None:
            start = x
        elif not has_ink and start is not None:
            if x - start >= min_width:
                segments.append(mask[:, start:x])
            start = None
    return segments


@dataclass(frozen=True)
class Recognition:
    text: str
    confidence: float


class GlyphAtlas:
    """Reference masks for every glyph, rendered once; read-only afterwards."""

    tag = "tmatch"

    def __init__(self, font_size: int = FONT_SIZE):
        font = default_font(font_size)
        self._templates: list[tuple[str, np.ndarray]] = []
        for char in GLYPHS:
            mask = render_glyph(char, font)
            if mask.size:
                self._templates.append((char, to_grid(mask)))
        if not self._templates:
            raise RuntimeError("glyph atlas rendered no templates")

    def match_glyph(self, mask: np.ndarray) -> tuple[str, float]:
        gridded = to_grid(tight_crop(mask))
        best_char, best_score = self._templates[0][0], -1.0
        for char, template in self._templates:
            score = dice(gridded, template)
            if score > best_score:
                best_char, best_score = char, score
        return best_char, max(best_score, 0.0)

    def read_word(self, mask: np.ndarray) -> Recognition | None:
        segments = split_columns(mask)
        if not segments:
            return None
        chars, scores = [], []
        for segment in segments:
            char, score = self.match_glyph(segment)
            chars.append(char)
            scores.append(score)
        confidence = min(1.0, max(0.0, float(np.mean(scores))))
        return Recognition(text="".join(chars), confidence=confidence)
