"""Image and caption augmentation used during feature extraction.

Image ops are restricted to lossless right-angle rotations and fractional
crops. Caption augmentation goes through a pluggable Paraphraser; the bundled
defaults are the identity and a deterministic synonym-table substitution, so
the pipeline stays hermetic without an external translation system.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError

RIGHT_ANGLES = (0, 90, 180, 270)


@dataclass(frozen=True)
class AugmentOp:
    """kind: "identity", "rotate" (params=angle) or "crop"
    (params=(x0f, y0f, x1f, y1f) fractions of width/height)."""

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind == "rotate":
            if len(self.params) != 1 or self.params[0] not in RIGHT_ANGLES:
                raise ValidationError(f"rotation angle must be one of {RIGHT_ANGLES}")
        elif self.kind == "crop":
            if len(self.params) != 4:
                raise ValidationError("crop needs fractions (x0, y0, x1, y1)")
            x0, y0, x1, y1 = self.params
            if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                raise ValidationError(f"crop fractions {self.params} do not bound a region")
        elif self.kind != "identity":
            raise ValidationError(f"unknown augment op {self.kind!r}")


def rotate_right_angle(image: np.ndarray, angle: int) -> np.ndarray:
    """Lossless counter-clockwise rotation by a multiple of 90 degrees."""
    if angle not in RIGHT_ANGLES:
        raise ValidationError(f"rotation angle must be one of {RIGHT_ANGLES}")
    return np.ascontiguousarray(np.rot90(image, k=angle // 90))


def crop_fractional(image: np.ndarray, fractions: tuple[float, float, float, float]) -> np.ndarray:
    x0f, y0f, x1f, y1f = fractions
    h, w = image.shape[:2]
    x0, x1 = int(round(x0f * w)), int(round(x1f * w))
    y0, y1 = int(round(y0f * h)), int(round(y1f * h))
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise ValidationError(f"crop {fractions} collapses to zero pixels on a {w}x{h} image")
    return np.ascontiguousarray(image[y0:y1, x0:x1])


def augment_image(subimage: np.ndarray, ops: Sequence[AugmentOp], seed: int = 0) -> list[np.ndarray]:
    """Apply each op to a copy of the input; one output per op.

    The seed parameter is accepted for interface stability; the bundled ops
    are fully deterministic and do not consume randomness.
    """
    arr = np.asarray(subimage)
    if arr.size == 0:
        raise ValidationError("empty sub-image")
    out = []
    for op in ops:
        if op.kind == "identity":
            out.append(arr.copy())
        elif op.kind == "rotate":
            out.append(rotate_right_angle(arr, int(op.params[0])))
        else:
            out.append(crop_fractional(arr, op.params))
    return out


class Paraphraser:
    """Named text -> text transform; output must be non-empty for non-empty input."""

    def __init__(self, name: str, fn: Callable[[str], str]):
        self.name = name
        self._fn = fn

    def __call__(self, text: str) -> str:
        return self._fn(text)


def identity_paraphraser() -> Paraphraser:
    return Paraphraser("identity", lambda text: text)


def load_synonym_table(path) -> dict[str, str]:
    """Two-column UTF-8 file: source<TAB>target, one pair per line."""
    table: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ValidationError(f"synonym table line {lineno}: expected source<TAB>target")
        table[parts[0]] = parts[1]
    return table


def synonym_paraphraser(table: dict[str, str]) -> Paraphraser:
    def substitute(text: str) -> str:
        return " ".join(table.get(word, word) for word in text.split())

    return Paraphraser("synonym-table", substitute)


def augment_text(caption: str, paraphraser: Paraphraser) -> str:
    if not caption:
        raise ValidationError("cannot paraphrase an empty caption")
    result = paraphraser(caption)
    if not result:
        raise ValidationError(f"paraphraser {paraphraser.name!r} returned empty text")
    return result
