"""Word-box detection on signboard images.

Two interchangeable detectors emit candidate character boxes: one from an
Otsu ink mask plus contours, one from MSER regions. A shared grouping step
clusters character boxes into line bands and merges neighbours into words.
"""

from __future__ import annotations

import cv2
import numpy as np

Box = tuple[int, int, int, int]

MIN_CHAR_AREA = 12
MAX_REL_WIDTH = 0.8
MAX_REL_HEIGHT = 0.9


def to_gray(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image
    return cv2.cvtColor(image, cv2.COLOR_BGR2GRAY)


def ink_mask(gray: np.ndarray) -> np.ndarray:
    """Binary ink mask via global Otsu; ink must be the minority class."""
    _, binary = cv2.threshold(gray, 0, 255, cv2.THRESH_BINARY | cv2.THRESH_OTSU)
    mask = binary == 0
    if mask.mean() > 0.5:
        mask = ~mask
    return mask


def _plausible(boxes: list[Box], shape: tuple[int, ...]) -> list[Box]:
    """Drop specks and frame-sized boxes that cannot be characters."""
    height, width = shape[:2]
    kept = []
    for x1, y1, x2, y2 in boxes:
        w, h = x2 - x1, y2 - y1
        if w * h < MIN_CHAR_AREA:
            continue
        if w > MAX_REL_WIDTH * width or h > MAX_REL_HEIGHT * height:
            continue
        kept.append((x1, y1, x2, y2))
    return kept


def dedupe_nested(boxes: list[Box], containment: float = 0.85) -> list[Box]:
    """Keep outermost boxes; a box mostly inside a kept one is dropped."""
    ordered = sorted(boxes, key=lambda b: ((b[2] - b[0]) * (b[3] - b[1])), reverse=True)
    kept: list[Box] = []
    for box in ordered:
        x1, y1, x2, y2 = box
        area = (x2 - x1) * (y2 - y1)
        inside = False
        for kx1, ky1, kx2, ky2 in kept:
            ix = max(0, min(x2, kx2) - max(x1, kx1))
            iy = max(0, min(y2, ky2) - max(y1, ky1))
            if area > 0 and ix * iy >= containment * area:
                inside = True
                break
        if not inside:
            kept.append(box)
    return kept


def contour_char_boxes(gray: np.ndarray) -> list[Box]:
    mask = ink_mask(gray).astype(np.uint8) * 255
    contours, _ = cv2.findContours(mask, cv2.RETR_LIST, cv2.CHAIN_APPROX_SIMPLE)
    boxes = []
    for contour in contours:
        x, y, w, h = cv2.boundingRect(contour)
        boxes.append((int(x), int(y), int(x + w), int(y + h)))
    return dedupe_nested(_plausible(boxes, gray.shape))


def mser_char_boxes(gray: np.ndarray) -> list[Box]:
    mser = cv2.MSER_create()
    # antialiased strokes grow fast across threshold steps; the default
    # stability cutoff (0.25) rejects them wholesale, and diversity pruning
    # then drops whole glyphs, so keep every nested variant and let
    # dedupe_nested pick the outermost box per glyph
    mser.setDelta(5)
    mser.setMaxVariation(2.0)
    mser.setMinDiversity(0.0)
    mser.setMinArea(15)
    _, bboxes = mser.detectRegions(gray)
    boxes = [(int(x), int(y), int(x + w), int(y + h)) for x, y, w, h in bboxes]
    return dedupe_nested(_plausible(boxes, gray.shape))


def group_words(boxes: list[Box]) -> list[Box]:
    """Merge character boxes into word boxes.

    Boxes share a line when their y-centers fall within 0.7x the median
    character height; within a line, a horizontal gap above 0.35x that
    height starts a new word. Output is sorted top-to-bottom, left-to-right.
    """
    if not boxes:
        return []
    heights = sorted(b[3] - b[1] for b in boxes)
    median_height = heights[len(heights) // 2]
    line_tol = max(3.0, 0.7 * median_height)
    gap_limit = max(3.0, 0.35 * median_height)

    lines: list[list[Box]] = []
    centers: list[float] = []
    for box in sorted(boxes, key=lambda b: ((b[1] + b[3]) / 2.0, b[0])):
        y_center = (box[1] + box[3]) / 2.0
        for i, center in enumerate(centers):
            if abs(y_center - center) <= line_tol:
                lines[i].append(box)
                n = len(lines[i])
                centers[i] = center + (y_center - center) / n
                break
        else:
            lines.append([box])
            centers.append(y_center)

    words: list[Box] = []
    for line in lines:
        line.sort(key=lambda b: b[0])
        current = list(line[0])
        for box in line[1:]:
            if box[0] - current[2] <= gap_limit:
                current[2] = max(current[2], box[2])
                current[1] = min(current[1], box[1])
                current[3] = max(current[3], box[3])
                current[0] = min(current[0], box[0])
            else:
                words.append(tuple(current))
                current = list(box)
        words.append(tuple(current))
    words.sort(key=lambda b: (b[1], b[0]))
    return words
