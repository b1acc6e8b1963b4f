"""Registry of detector+recognizer backends.

Each backend pairs one word-box detector with the shared template-match
recognizer. load() renders the glyph atlas; after that a backend is
read-only and safe to share across request threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .atlas import GlyphAtlas
from .detect import Box, contour_char_boxes, group_words, ink_mask, mser_char_boxes, to_gray

DEFAULT_BACKEND = "otsu-contour"


@dataclass
class OcrBackend:
    name: str
    detector: Callable[[np.ndarray], list[Box]]
    recognizer_tag: str = "tmatch"
    atlas: GlyphAtlas | None = field(default=None, repr=False)

    @property
    def tag(self) -> str:
        return f"{self.name}+{self.recognizer_tag}"

    def load(self) -> None:
        if self.atlas is None:
            self.atlas = GlyphAtlas()

    def run(self, image: np.ndarray) -> list[dict]:
        """Tokens for one decoded image, in reading order.

        Token dicts use the wire schema {"text", "bbox", "conf"}; words the
        recognizer cannot read are dropped rather than emitted empty.
        """
        if self.atlas is None:
            raise RuntimeError(f"backend {self.name!r} used before load()")
        gray = to_gray(image)
        mask = ink_mask(gray)
        tokens: list[dict] = []
        for x1, y1, x2, y2 in group_words(self.detector(gray)):
            recognition = self.atlas.read_word(mask[y1:y2, x1:x2])
            if recognition is None or not recognition.text:
                continue
            tokens.append(
                {
                    "text": recognition.text,
                    "bbox": [float(x1), float(y1), float(x2), float(y2)],
                    "conf": round(recognition.confidence, 4),
                }
            )
        return tokens


def _contour_words(gray: np.ndarray) -> list[Box]:
    return contour_char_boxes(gray)


def _mser_words(gray: np.ndarray) -> list[Box]:
    return mser_char_boxes(gray)


def default_registry() -> dict[str, OcrBackend]:
    return {
        "otsu-contour": OcrBackend("otsu-contour", _contour_words),
        "mser": OcrBackend("mser", _mser_words),
    }
