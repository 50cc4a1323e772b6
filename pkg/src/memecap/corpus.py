"""Meme corpus handling: manifest I/O, validation, sub-image segmentation,
dataset statistics, and category-balanced downsampling.

The manifest is line-delimited JSON, one record per line, UTF-8, with fields
``id, image_path, structure, sentiment, caption, rois, split``. Image paths
are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .errors import SegmentationError, ValidationError
from .kernels import band_stds

STRUCTURES = ("single", "multi")
SENTIMENTS = ("self_praise", "praise_others", "self_mockery", "mock_others")
SPLITS = ("train", "test")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def default_tokenizer(text: str) -> list[str]:
    """Whitespace-plus-punctuation split; punctuation marks are tokens."""
    return _TOKEN_RE.findall(text)


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned sub-image box, origin top-left, half-open [x0,x1) x [y0,y1)."""

    x0: int
    y0: int
    x1: int
    y1: int
    index: int = 0

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValidationError(f"degenerate ROI {self.as_list()}")
        if self.x0 < 0 or self.y0 < 0:
            raise ValidationError(f"negative ROI corner {self.as_list()}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def overlaps(self, other: "RoiBox") -> bool:
        return not (
            self.x1 <= other.x0
            or other.x1 <= self.x0
            or self.y1 <= other.y0
            or other.y1 <= self.y0
        )

    def iou(self, other: "RoiBox") -> float:
        ix = max(0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union else 0.0


@dataclass
class MemeRecord:
    id: str
    image_path: str
    structure: str
    sentiment: str
    caption: str
    rois: list[RoiBox]
    split: str = "train"
    caption_tokens: list[str] = field(default_factory=list)

    def validate(self, image_size: tuple[int, int] | None = None) -> None:
        """Raise ValidationError if any record invariant is violated.

        image_size is (width, height); passing it enables the bounds check.
        """
        problems = []
        if self.structure not in STRUCTURES:
            problems.append(f"unknown structure {self.structure!r}")
        if self.sentiment not in SENTIMENTS:
            problems.append(f"unknown sentiment {self.sentiment!r}")
        if self.split not in SPLITS:
            problems.append(f"unknown split {self.split!r}")
        if len(self.caption_tokens) < 1:
            problems.append("caption has no tokens")
        if self.structure == "single" and len(self.rois) != 1:
            problems.append(f"single-structure record has {len(self.rois)} ROIs")
        if self.structure == "multi" and len(self.rois) < 2:
            problems.append(f"multi-structure record has {len(self.rois)} ROIs")
        if image_size is not None:
            w, h = image_size
            for roi in self.rois:
                if roi.x1 > w or roi.y1 > h:
                    problems.append(f"ROI {roi.as_list()} outside {w}x{h} image")
        for i, a in enumerate(self.rois):
            for b in self.rois[i + 1 :]:
                if a.overlaps(b):
                    problems.append(f"ROIs {a.as_list()} and {b.as_list()} overlap")
        if problems:
            raise ValidationError(f"record {self.id}: " + "; ".join(problems))

    def to_json(self) -> str:
        obj = {
            "id": self.id,
            "image_path": self.image_path,
            "structure": self.structure,
            "sentiment": self.sentiment,
            "caption": self.caption,
            "rois": [r.as_list() for r in self.rois],
            "split": self.split,
        }
        return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def record_from_json(line: str, tokenizer: Callable[[str], list[str]] = default_tokenizer) -> MemeRecord:
    obj = json.loads(line)
    rois = [RoiBox(*map(int, r), index=i) for i, r in enumerate(obj["rois"])]
    return MemeRecord(
        id=str(obj["id"]),
        image_path=obj["image_path"],
        structure=obj["structure"],
        sentiment=obj["sentiment"],
        caption=obj["caption"],
        rois=rois,
        split=obj.get("split", "train"),
        caption_tokens=tokenizer(obj["caption"]),
    )


def load_manifest(
    path,
    tokenizer: Callable[[str], list[str]] = default_tokenizer,
    check_images: bool = True,
) -> list[MemeRecord]:
    """Load and validate a manifest; record order matches file order.

    All per-record problems are collected and raised together so a bad batch
    surfaces every offending id at once.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest {path} does not exist")
    base = path.parent
    records: list[MemeRecord] = []
    problems: list[str] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = record_from_json(line, tokenizer)
        except (ValidationError, KeyError, ValueError, TypeError) as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        image_size = None
        if check_images:
            img_file = base / rec.image_path
            if not img_file.exists():
                problems.append(f"record {rec.id}: image file {rec.image_path} missing")
                continue
            with Image.open(img_file) as im:
                image_size = im.size
        try:
            rec.validate(image_size)
        except ValidationError as exc:
            problems.append(str(exc))
            continue
        records.append(rec)
    if problems:
        raise ValidationError("manifest errors: " + " | ".join(problems))
    return records


def save_manifest(records: Sequence[MemeRecord], path) -> None:
    """Write records one per line; load_manifest(save_manifest(x)) round-trips."""
    Path(path).write_text(
        "".join(rec.to_json() + "\n" for rec in records), encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentConfig:
    """A separator band is a run of rows/columns whose pixel std stays below
    std_frac * value_range for at least min_thickness consecutive lines."""

    std_frac: float = 0.02
    min_thickness: int = 3
    value_range: float = 255.0


def _to_plane(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    if arr.ndim != 2:
        raise ValidationError(f"expected 2-D or 3-D image, got shape {arr.shape}")
    return arr


def _band_runs(is_band: np.ndarray, min_thickness: int) -> list[tuple[int, int]]:
    """Maximal [start, stop) runs of True at least min_thickness long."""
    runs = []
    padded = np.concatenate(([False], is_band, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    for start, stop in zip(edges[::2], edges[1::2]):
        if stop - start >= min_thickness:
            runs.append((int(start), int(stop)))
    return runs


def _complement(runs: list[tuple[int, int]], extent: int) -> list[tuple[int, int]]:
    out = []
    cursor = 0
    for start, stop in runs:
        if start > cursor:
            out.append((cursor, start))
        cursor = stop
    if cursor < extent:
        out.append((cursor, extent))
    return out


def segment_subimages(
    image: np.ndarray,
    mode: str = "auto",
    manual_rois: Sequence[RoiBox] | None = None,
    config: SegmentConfig = SegmentConfig(),
) -> list[RoiBox]:
    """Detect panel ROIs by finding low-variance separator bands.

    Rows are scanned first; each resulting horizontal strip is then scanned for
    column bands, giving reading order top-to-bottom then left-to-right. An
    image with no qualifying separators yields a single full-frame ROI.
    """
    plane = _to_plane(image)
    h, w = plane.shape
    if h == 0 or w == 0:
        raise ValidationError("empty image")

    if mode == "manual":
        if manual_rois is None:
            raise ValidationError("manual mode requires manual_rois")
        for roi in manual_rois:
            if roi.x1 > w or roi.y1 > h:
                raise ValidationError(f"manual ROI {roi.as_list()} outside {w}x{h} image")
        for i, a in enumerate(manual_rois):
            for b in manual_rois[i + 1 :]:
                if a.overlaps(b):
                    raise ValidationError(f"manual ROIs {a.as_list()} and {b.as_list()} overlap")
        return list(manual_rois)
    if mode != "auto":
        raise ValidationError(f"unknown segmentation mode {mode!r}")

    threshold = config.std_frac * config.value_range
    row_bands = _band_runs(band_stds(plane, axis=0) < threshold, config.min_thickness)
    strips = _complement(row_bands, h)

    panels: list[RoiBox] = []
    for y0, y1 in strips:
        col_std = band_stds(plane[y0:y1], axis=1)
        col_bands = _band_runs(col_std < threshold, config.min_thickness)
        for x0, x1 in _complement(col_bands, w):
            if (x1 - x0) * (y1 - y0) <= 0:
                raise SegmentationError(f"zero-area panel at x=[{x0},{x1}) y=[{y0},{y1})")
            panels.append(RoiBox(x0, y0, x1, y1, index=len(panels)))

    if not panels:
        # Nothing but separator bands (for example a solid-color image):
        # treat as a separator-free single panel.
        return [RoiBox(0, 0, w, h, index=0)]
    return panels


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenStats:
    avg: float
    max: int
    min: int


@dataclass(frozen=True)
class CorpusStats:
    count_total: int
    fraction_single: float
    fraction_multi: float
    fraction_per_sentiment: dict[str, float]
    tokens: TokenStats
    tokens_per_sentiment: dict[str, TokenStats]

    def to_dict(self) -> dict:
        return {
            "count_total": self.count_total,
            "fraction_single": self.fraction_single,
            "fraction_multi": self.fraction_multi,
            "fraction_per_sentiment": dict(self.fraction_per_sentiment),
            "tokens": vars(self.tokens).copy(),
            "tokens_per_sentiment": {k: vars(v).copy() for k, v in self.tokens_per_sentiment.items()},
        }


def _token_stats(lengths: list[int]) -> TokenStats:
    return TokenStats(avg=float(np.mean(lengths)), max=int(max(lengths)), min=int(min(lengths)))


def compute_stats(records: Sequence[MemeRecord]) -> CorpusStats:
    if not records:
        raise ValidationError("cannot compute statistics of an empty corpus")
    n = len(records)
    single = sum(1 for r in records if r.structure == "single")
    lengths = [len(r.caption_tokens) for r in records]
    per_sent: dict[str, TokenStats] = {}
    frac_sent: dict[str, float] = {}
    for sent in SENTIMENTS:
        sub = [len(r.caption_tokens) for r in records if r.sentiment == sent]
        frac_sent[sent] = len(sub) / n
        if sub:
            per_sent[sent] = _token_stats(sub)
    return CorpusStats(
        count_total=n,
        fraction_single=single / n,
        fraction_multi=(n - single) / n,
        fraction_per_sentiment=frac_sent,
        tokens=_token_stats(lengths),
        tokens_per_sentiment=per_sent,
    )


# ---------------------------------------------------------------------------
# balanced downsampling
# ---------------------------------------------------------------------------


def _largest_remainder(total: int, fractions: dict[str, float]) -> dict[str, int]:
    exact = {k: total * f for k, f in fractions.items()}
    counts = {k: int(np.floor(v)) for k, v in exact.items()}
    leftover = total - sum(counts.values())
    order = sorted(fractions, key=lambda k: (-(exact[k] - counts[k]), k))
    for k in order[:leftover]:
        counts[k] += 1
    return counts


def _check_axis(name: str, fractions: dict[str, float], allowed: tuple[str, ...]) -> None:
    for cat in fractions:
        if cat not in allowed:
            raise ValidationError(f"unknown {name} category {cat!r}")
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ValidationError(f"{name} target fractions must sum to 1")


def balance_downsample(
    records: Sequence[MemeRecord],
    target_fractions: dict[str, dict[str, float]],
    seed: int = 0,
) -> list[MemeRecord]:
    """Deterministically subsample to hit per-axis target fractions.

    target_fractions may contain a "structure" axis, a "sentiment" axis, or
    both. Records are allocated hierarchically (structure first, sentiment
    within each structure cell) by largest-remainder apportionment; the
    output preserves the input's relative order and holds no duplicates.
    """
    structure_t = target_fractions.get("structure")
    sentiment_t = target_fractions.get("sentiment")
    if structure_t is None and sentiment_t is None:
        raise ValidationError("target_fractions must name at least one axis")
    if structure_t is not None:
        _check_axis("structure", structure_t, STRUCTURES)
    if sentiment_t is not None:
        _check_axis("sentiment", sentiment_t, SENTIMENTS)

    def stratum(rec: MemeRecord) -> tuple:
        return (
            rec.structure if structure_t is not None else "*",
            rec.sentiment if sentiment_t is not None else "*",
        )

    pools: dict[tuple, list[int]] = {}
    for i, rec in enumerate(records):
        pools.setdefault(stratum(rec), []).append(i)

    struct_cats = sorted(k for k, f in (structure_t or {"*": 1.0}).items() if f > 0)
    sent_cats = sorted(k for k, f in (sentiment_t or {"*": 1.0}).items() if f > 0)
    missing = [
        f"{s}/{e}"
        for s in struct_cats
        for e in sent_cats
        if not pools.get((s, e))
    ]
    if missing:
        raise ValidationError("no input records for requested categories: " + ", ".join(missing))

    def quotas_for(total: int) -> dict[tuple, int] | None:
        struct_counts = _largest_remainder(total, structure_t or {"*": 1.0})
        out: dict[tuple, int] = {}
        for s, s_count in struct_counts.items():
            for e, e_count in _largest_remainder(s_count, sentiment_t or {"*": 1.0}).items():
                if e_count > len(pools.get((s, e), [])):
                    return None
                out[(s, e)] = e_count
        return out

    # Largest feasible total given per-stratum capacity, found by stepping down
    # from the unconstrained bound.
    upper = len(records)
    quotas = None
    for total in range(upper, 0, -1):
        quotas = quotas_for(total)
        if quotas is not None:
            break
    if quotas is None:
        raise ValidationError("no feasible balanced subsample")

    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for key in sorted(quotas):
        pool = pools.get(key, [])
        want = quotas[key]
        if want == len(pool):
            chosen.extend(pool)
        elif want > 0:
            picks = rng.choice(len(pool), size=want, replace=False)
            chosen.extend(pool[i] for i in sorted(picks))
    chosen.sort()
    return [records[i] for i in chosen]
