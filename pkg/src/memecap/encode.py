"""Pluggable feature encoders and the structured sub-image description.

The bundled encoders are deliberately tiny: a patch-mean visual encoder and a
hashed-embedding text encoder with a sinusoidal position signal. Both project
into a shared feature width d so the alignment projections downstream are
well-posed. Adapters for large multimodal backbones can implement the same
two-method interface.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import blob
from .errors import ValidationError

MAX_SEQUENCE_LENGTH = 1024


@dataclass
class AreaFeatures:
    """Row i holds the feature vector of image area (patch) i; shape (N, d)."""

    matrix: np.ndarray
    source_index: int = 0

    def __post_init__(self):
        if not np.isfinite(self.matrix).all():
            raise ValidationError("area features contain non-finite values")


@dataclass
class TokenFeatures:
    """Row j holds the feature vector of caption token j; shape (n, d)."""

    matrix: np.ndarray
    tokens: list[str]

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.tokens):
            raise ValidationError("token feature rows do not match the token list")
        if not np.isfinite(self.matrix).all():
            raise ValidationError("token features contain non-finite values")


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None].astype(np.float64)
    idx = np.arange(d)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / d)
    enc = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


class PatchMeanImageEncoder:
    """Splits a sub-image into a P x P patch grid, mean-pools each patch per
    channel, and maps the channel means through a trainable linear layer.

    Channel means are divided by value_range (255 for uint8 images) so the
    feature scale stays O(1); pass value_range=1.0 for float images whose
    pixels already live in [0, 1]."""

    def __init__(
        self,
        d: int = 64,
        patch_grid: int = 4,
        channels: int = 3,
        seed: int = 0,
        value_range: float = 255.0,
    ):
        self.d = d
        self.patch_grid = patch_grid
        self.channels = channels
        self.value_range = value_range
        rng = np.random.default_rng(seed)
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(channels), size=(d, channels))
        self.bias = np.zeros(d)

    @property
    def areas_per_subimage(self) -> int:
        return self.patch_grid * self.patch_grid

    def patch_means(self, subimage: np.ndarray) -> np.ndarray:
        arr = np.asarray(subimage, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValidationError(f"expected 2-D or 3-D sub-image, got shape {arr.shape}")
        if arr.shape[2] != self.channels:
            if arr.shape[2] == 1 and self.channels > 1:
                arr = np.repeat(arr, self.channels, axis=2)
            else:
                raise ValidationError(
                    f"sub-image has {arr.shape[2]} channels, encoder expects {self.channels}"
                )
        h, w = arr.shape[:2]
        p = self.patch_grid
        if h < p or w < p:
            raise ValidationError(f"{w}x{h} sub-image smaller than {p}x{p} patch grid")
        means = np.empty((p * p, self.channels))
        for r, rows in enumerate(np.array_split(arr, p, axis=0)):
            for c, cell in enumerate(np.array_split(rows, p, axis=1)):
                means[r * p + c] = cell.mean(axis=(0, 1))
        return means / self.value_range

    def encode(self, subimage: np.ndarray, source_index: int = 0) -> AreaFeatures:
        means = self.patch_means(subimage)
        return AreaFeatures(matrix=means @ self.weight.T + self.bias, source_index=source_index)

    def save(self, path, meta: dict | None = None) -> None:
        info = {
            "kind": "patch_mean",
            "d": self.d,
            "patch_grid": self.patch_grid,
            "channels": self.channels,
            "value_range": self.value_range,
        }
        blob.dump_arrays(path, {"weight": self.weight, "bias": self.bias}, {**info, **(meta or {})})

    @classmethod
    def load(cls, path) -> "PatchMeanImageEncoder":
        meta, arrays = blob.load_arrays(path)
        enc = cls(
            d=meta["d"],
            patch_grid=meta["patch_grid"],
            channels=meta["channels"],
            value_range=meta.get("value_range", 255.0),
        )
        enc.weight = arrays["weight"]
        enc.bias = arrays["bias"]
        return enc


def _bucket(token: str, buckets: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % buckets


class HashEmbeddingTextEncoder:
    """Trainable embedding lookup over hash buckets plus sinusoidal positions.

    With closed_vocab set, tokens outside the vocabulary raise instead of
    hashing into a shared bucket.
    """

    def __init__(
        self,
        d: int = 64,
        buckets: int = 512,
        seed: int = 0,
        closed_vocab: set[str] | None = None,
    ):
        self.d = d
        self.buckets = buckets
        self.closed_vocab = closed_vocab
        rng = np.random.default_rng(seed)
        self.embedding = rng.normal(0.0, 1.0, size=(buckets, d))

    def encode(self, tokens: list[str]) -> TokenFeatures:
        n = len(tokens)
        if n < 1:
            raise ValidationError("cannot encode an empty token list")
        if n > MAX_SEQUENCE_LENGTH:
            raise ValidationError(f"{n} tokens exceeds the {MAX_SEQUENCE_LENGTH}-token limit")
        if self.closed_vocab is not None:
            for tok in tokens:
                if tok not in self.closed_vocab:
                    raise ValidationError(f"token {tok!r} not in the closed vocabulary")
        rows = self.embedding[[_bucket(t, self.buckets) for t in tokens]]
        return TokenFeatures(matrix=rows + sinusoidal_positions(n, self.d), tokens=list(tokens))

    def save(self, path, meta: dict | None = None) -> None:
        info = {"kind": "hash_embedding", "d": self.d, "buckets": self.buckets}
        blob.dump_arrays(path, {"embedding": self.embedding}, {**info, **(meta or {})})

    @classmethod
    def load(cls, path) -> "HashEmbeddingTextEncoder":
        meta, arrays = blob.load_arrays(path)
        enc = cls(d=meta["d"], buckets=meta["buckets"])
        enc.embedding = arrays["embedding"]
        return enc


def encode_image_areas(subimage: np.ndarray, encoder: PatchMeanImageEncoder, source_index: int = 0) -> AreaFeatures:
    return encoder.encode(subimage, source_index=source_index)


def encode_caption(tokens: list[str], encoder: HashEmbeddingTextEncoder) -> TokenFeatures:
    return encoder.encode(tokens)


def combine_variant_features(
    original: AreaFeatures, variants: list[AreaFeatures], mode: str = "average"
) -> AreaFeatures:
    """Merge augmented-variant features with the original's.

    average: element-wise mean across original and variants (shapes must
    match). concat: stack variant rows below the original's.
    """
    if not variants:
        return original
    if mode == "average":
        stack = [original.matrix] + [v.matrix for v in variants]
        if any(m.shape != original.matrix.shape for m in stack):
            raise ValidationError("average mode requires equal feature shapes")
        return AreaFeatures(np.mean(stack, axis=0), source_index=original.source_index)
    if mode == "concat":
        rows = np.concatenate([original.matrix] + [v.matrix for v in variants], axis=0)
        return AreaFeatures(rows, source_index=original.source_index)
    raise ValidationError(f"unknown variant combination mode {mode!r}")


# ---------------------------------------------------------------------------
# chain-of-humor template
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChainOfHumor:
    concept: str
    emotion: str
    event: str
    consequence: str
    humor_device: str

    def __post_init__(self):
        for name in ("concept", "emotion", "event", "consequence", "humor_device"):
            if not getattr(self, name):
                raise ValidationError(f"chain-of-humor field {name!r} is empty")


COH_TEMPLATE = (
    "concept: {concept} ; emotion: {emotion} ; event: {event} ; "
    "consequence: {consequence} ; humor device: {humor_device}"
)


def assemble_chain_of_humor(c: ChainOfHumor) -> str:
    """Render the five-slot structured description as one conditioning string."""
    return COH_TEMPLATE.format(
        concept=c.concept,
        emotion=c.emotion,
        event=c.event,
        consequence=c.consequence,
        humor_device=c.humor_device,
    )
