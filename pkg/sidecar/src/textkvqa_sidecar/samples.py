"""Deterministic synthetic signboards for demos and end-to-end tests."""

from __future__ import annotations

import random
from dataclasses import dataclass

from PIL import Image, ImageDraw

from .atlas import FONT_SIZE, default_font

SIGN_WORDS = [
    "PIZZA",
    "BURGER",
    "COFFEE",
    "BOOKS",
    "HOTEL",
    "MARKET",
    "CINEMA",
    "PETROL",
    "BAKERY",
    "EXPRESS",
    "GARAGE",
    "FLOWERS",
    "DINER",
    "MUSIC",
]

# (background, ink) pairs with strong contrast so Otsu separates cleanly
PALETTE = [
    ((244, 240, 230), (40, 40, 48)),
    ((230, 240, 252), (20, 32, 72)),
    ((248, 236, 236), (84, 16, 16)),
    ((236, 248, 238), (12, 64, 28)),
    ((250, 248, 232), (72, 56, 8)),
]


def render_signboard(
    words: list[str],
    background: tuple[int, int, int],
    ink: tuple[int, int, int],
    *,
    size: tuple[int, int] = (560, 168),
    jitter: tuple[int, int] = (0, 0),
) -> Image.Image:
    """One framed sign with centered text, nudged by the given jitter."""
    image = Image.new("RGB", size, background)
    draw = ImageDraw.Draw(image)
    font = default_font(FONT_SIZE)
    text = " ".join(words)
    x0, y0, x1, y1 = draw.textbbox((0, 0), text, font=font)
    tx = (size[0] - (x1 - x0)) // 2 - x0 + jitter[0]
    ty = (size[1] - (y1 - y0)) // 2 - y0 + jitter[1]
    draw.text((tx, ty), text, fill=ink, font=font)
    draw.rectangle([4, 4, size[0] - 5, size[1] - 5], outline=ink, width=2)
    return image


@dataclass(frozen=True)
class SampleBoard:
    """A rendered sign together with the words painted on it."""

    name: str
    words: tuple[str, ...]
    image: Image.Image


def sample_signboards(n: int = 10, seed: int = 7) -> list[SampleBoard]:
    """n deterministic sign fixtures with known ground-truth words."""
    rng = random.Random(seed)
    boards: list[SampleBoard] = []
    for i in range(n):
        words = rng.sample(SIGN_WORDS, 1 + (i % 2))
        background, ink = PALETTE[i % len(PALETTE)]
        jitter = (rng.randint(-12, 12), rng.randint(-6, 6))
        image = render_signboard(words, background, ink, jitter=jitter)
        boards.append(SampleBoard(name=f"sign_{i:02d}", words=tuple(words), image=image))
    return boards
