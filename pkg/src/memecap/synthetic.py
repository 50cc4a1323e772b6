"""Procedural desk-scale corpus: noise-textured panels with exact separator
geometry and template captions with known token statistics.

Structure and sentiment are assigned in balanced blocks of eight (every
structure x sentiment cell once per block), the last full block forming the
test split, so a 32-record corpus lands at 16/16 single/multi and 8 per
sentiment deterministically.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

from .corpus import SENTIMENTS, MemeRecord, RoiBox, default_tokenizer, save_manifest
from .errors import ValidationError

PANEL = 60  # panel edge length in pixels
GUTTER = 5  # separator band thickness

SENTIMENT_MARKERS = {
    "self_praise": "winning",
    "praise_others": "legend",
    "self_mockery": "oops",
    "mock_others": "seriously",
}

FILLER_WORDS = (
    "when the wifi dies again and i just stare at my cold coffee cat keyboard "
    "monday meeting snack nap deadline printer error face mood"
).split()

# multi-image layouts cycle through vertical stacks and a 2x2 grid
_LAYOUTS = (("stack", 2), ("stack", 3), ("grid", 4))


def _layout_rois(kind: str, panels: int) -> tuple[int, int, list[RoiBox]]:
    if kind == "stack":
        width = PANEL
        height = panels * PANEL + (panels - 1) * GUTTER
        rois = [
            RoiBox(0, i * (PANEL + GUTTER), PANEL, i * (PANEL + GUTTER) + PANEL, index=i)
            for i in range(panels)
        ]
        return width, height, rois
    side = PANEL * 2 + GUTTER
    rois = []
    for r in range(2):
        for c in range(2):
            x0 = c * (PANEL + GUTTER)
            y0 = r * (PANEL + GUTTER)
            rois.append(RoiBox(x0, y0, x0 + PANEL, y0 + PANEL, index=len(rois)))
    return side, side, rois


def _draw(width: int, height: int, rois: list[RoiBox], rng: np.random.Generator) -> np.ndarray:
    """Panels carry a meme-specific base color plus texture noise, so patch
    features separate memes while every panel row/column stays well above the
    separator variance threshold."""
    img = np.full((height, width, 3), 255, dtype=np.uint8)
    for roi in rois:
        base = rng.integers(30, 226, size=3)
        noise = rng.integers(-28, 29, size=(roi.height, roi.width, 3))
        img[roi.y0 : roi.y1, roi.x0 : roi.x1] = np.clip(base[None, None, :] + noise, 0, 255)
    return img


def _caption(index: int, sentiment: str, rng: np.random.Generator) -> str:
    length = 5 + (index * 3) % 8  # token counts cycle over 5..12
    words = [SENTIMENT_MARKERS[sentiment]]
    while len(words) < length:
        words.append(FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))])
    return " ".join(words)


def generate_synthetic_corpus(
    out_dir,
    size: int = 32,
    seed: int = 7,
    text_meta: dict[str, str] | None = None,
) -> tuple[Path, list[MemeRecord]]:
    """Write images/ and manifest.jsonl under out_dir; returns (manifest path,
    records). Byte-identical output for identical (size, seed)."""
    if size < 2:
        raise ValidationError("corpus size must be at least 2")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    full_blocks = size // 8
    records: list[MemeRecord] = []
    for i in range(size):
        block = i // 8
        in_block = i % 8
        structure = "single" if in_block % 2 == 0 else "multi"
        sentiment = SENTIMENTS[in_block // 2]
        split = "test" if full_blocks > 1 and block == full_blocks - 1 and i < full_blocks * 8 else "train"

        if structure == "single":
            width, height, rois = PANEL, PANEL, [RoiBox(0, 0, PANEL, PANEL, index=0)]
        else:
            kind, panels = _LAYOUTS[(i // 2) % len(_LAYOUTS)]
            width, height, rois = _layout_rois(kind, panels)
        img = _draw(width, height, rois, rng)
        name = f"meme_{i:04d}.png"
        pnginfo = PngImagePlugin.PngInfo()
        for key, value in (text_meta or {}).items():
            pnginfo.add_text(key, value)
        Image.fromarray(img).save(image_dir / name, format="PNG", pnginfo=pnginfo)

        caption = _caption(i, sentiment, rng)
        records.append(
            MemeRecord(
                id=f"meme_{i:04d}",
                image_path=f"images/{name}",
                structure=structure,
                sentiment=sentiment,
                caption=caption,
                rois=rois,
                split=split,
                caption_tokens=default_tokenizer(caption),
            )
        )

    manifest = out_dir / "manifest.jsonl"
    save_manifest(records, manifest)
    return manifest, records
