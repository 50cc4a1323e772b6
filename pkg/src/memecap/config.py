"""Run configuration: one INI-style file with a [stage.*] section per stage.

Every default below reproduces the reference training settings, so an empty
config file (or none at all) runs the canonical setup. The config hash pins
the resolved values; every stage artifact records it so reports produced
under different settings are never compared silently.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ValidationError

BASELINE_PROMPT = "What is a humorous short sentence that complements the image as a meme?"


@dataclass
class TrainConfig:
    # run-wide
    seed: int = 0
    workers: int = 1
    max_seq_len: int = 1024
    max_caption_len: int = 25
    data_dir: str = "data"
    # corpus generation
    corpus_size: int = 32
    # segmentation
    segment_std_frac: float = 0.02
    segment_min_thickness: int = 3
    # augmentation
    augment_variants: int = 2
    augment_combine: str = "average"
    # encoders
    d: int = 64
    patch_grid: int = 4
    text_buckets: int = 512
    # alignment
    d_k: int = 32
    tau: float = 0.07
    align_epochs: int = 5
    align_lr: float = 0.01
    align_batch: int = 8
    align_candidate_mode: str = "token"
    # sft
    lam_ori: float = 0.4
    lam_g: float = 0.2
    lam_t: float = 0.4
    sft_epochs: int = 20
    sft_lr: float = 0.3
    sft_batch: int = 8
    prompt_mode: str = "chain_of_humor"  # or "baseline"
    decoder_layers: int = 2
    decoder_ff: int = 128
    # candidate generation
    candidates_k: int = 4
    candidate_temperatures: tuple[float, ...] = (0.7, 1.0, 1.3)
    # annotation
    annotation_fraction: float = 0.01
    min_annotators: int = 3
    annotators: tuple[str, ...] = ("a1", "a2", "a3")
    human_weight: float = 0.7
    # reward model
    reward_steps: int = 500
    reward_lr: float = 0.05
    reward_batch_pairs: int = 8
    # rl
    w1: float = 0.4
    w2: float = 0.6
    rl_steps: int = 200
    rl_lr: float = 0.02
    rl_samples_per_step: int = 8
    rl_kl_ceiling: float = 50.0
    paper_literal_sign: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        weights = (self.lam_ori, self.lam_g, self.lam_t, self.w1, self.w2)
        if any(w < 0 for w in weights):
            raise ValidationError("loss weights must be non-negative")
        if self.sft_epochs < 1 or self.align_epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if self.max_seq_len < 25:
            raise ValidationError("max sequence length must be at least 25")
        if self.prompt_mode not in ("chain_of_humor", "baseline"):
            raise ValidationError(f"unknown prompt mode {self.prompt_mode!r}")
        if not 0.0 <= self.annotation_fraction <= 1.0:
            raise ValidationError("annotation fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def config_hash(self) -> str:
        """Hash of the semantic configuration. Storage location and worker
        count change neither data nor results, so they stay out of the hash
        and runs in different directories remain comparable."""
        payload = {k: v for k, v in self.to_dict().items() if k not in ("data_dir", "workers")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


# (section, option) -> TrainConfig field
_FILE_MAP = {
    ("run", "seed"): "seed",
    ("run", "workers"): "workers",
    ("run", "max_seq_len"): "max_seq_len",
    ("run", "max_caption_len"): "max_caption_len",
    ("run", "data_dir"): "data_dir",
    ("stage.gen-corpus", "size"): "corpus_size",
    ("stage.segment", "std_frac"): "segment_std_frac",
    ("stage.segment", "min_thickness"): "segment_min_thickness",
    ("stage.augment", "variants"): "augment_variants",
    ("stage.augment", "combine"): "augment_combine",
    ("stage.encode", "d"): "d",
    ("stage.encode", "patch_grid"): "patch_grid",
    ("stage.encode", "text_buckets"): "text_buckets",
    ("stage.align", "d_k"): "d_k",
    ("stage.align", "tau"): "tau",
    ("stage.align", "epochs"): "align_epochs",
    ("stage.align", "lr"): "align_lr",
    ("stage.align", "batch"): "align_batch",
    ("stage.align", "candidate_mode"): "align_candidate_mode",
    ("stage.sft", "lam_ori"): "lam_ori",
    ("stage.sft", "lam_g"): "lam_g",
    ("stage.sft", "lam_t"): "lam_t",
    ("stage.sft", "epochs"): "sft_epochs",
    ("stage.sft", "lr"): "sft_lr",
    ("stage.sft", "batch"): "sft_batch",
    ("stage.sft", "prompt_mode"): "prompt_mode",
    ("stage.sft", "decoder_layers"): "decoder_layers",
    ("stage.sft", "decoder_ff"): "decoder_ff",
    ("stage.candidates", "k"): "candidates_k",
    ("stage.candidates", "temperatures"): "candidate_temperatures",
    ("stage.annotate", "fraction"): "annotation_fraction",
    ("stage.annotate", "min_annotators"): "min_annotators",
    ("stage.annotate", "annotators"): "annotators",
    ("stage.annotate", "human_weight"): "human_weight",
    ("stage.train-reward", "steps"): "reward_steps",
    ("stage.train-reward", "lr"): "reward_lr",
    ("stage.train-reward", "batch_pairs"): "reward_batch_pairs",
    ("stage.rl", "w1"): "w1",
    ("stage.rl", "w2"): "w2",
    ("stage.rl", "steps"): "rl_steps",
    ("stage.rl", "lr"): "rl_lr",
    ("stage.rl", "samples_per_step"): "rl_samples_per_step",
    ("stage.rl", "kl_ceiling"): "rl_kl_ceiling",
    ("stage.rl", "paper_literal_sign"): "paper_literal_sign",
}

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(field_name: str, raw: str):
    kind = _FIELD_TYPES[field_name]
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{field_name}: cannot parse boolean {raw!r}")
    if kind.startswith("tuple[float"):
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if kind.startswith("tuple[str"):
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    return raw


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Read [stage.*] sections; missing file or options keep the defaults."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file {path} does not exist")
        parser = configparser.ConfigParser()
        parser.read(path, encoding="utf-8")
        for section in parser.sections():
            for option in parser[section]:
                key = (section, option)
                if key not in _FILE_MAP:
                    raise ValidationError(f"unknown config option [{section}] {option}")
                field_name = _FILE_MAP[key]
                values[field_name] = _convert(field_name, parser[section][option])
    if overrides:
        values.update(overrides)
    return TrainConfig(**values)


@dataclass
class GridSpec:
    """Sweep combinations: lambda triples are (lam_ori, lam_t, lam_g) to
    keep the token-level weight at least the global weight, and w pairs are
    (w1, w2)."""

    lambdas: list[tuple[float, float, float]] = field(
        default_factory=lambda: [(0.4, 0.4, 0.2), (0.5, 0.3, 0.2), (0.6, 0.2, 0.2)]
    )
    w_pairs: list[tuple[float, float]] = field(
        default_factory=lambda: [(0.5, 0.5), (0.4, 0.6), (0.6, 0.4)]
    )

    def __post_init__(self):
        if not self.lambdas or not self.w_pairs:
            raise ValidationError("grid must hold at least one combination")
        for triple in self.lambdas:
            if len(triple) != 3 or any(v < 0 for v in triple):
                raise ValidationError(f"bad lambda combination {triple}")
        for pair in self.w_pairs:
            if len(pair) != 2 or any(v < 0 for v in pair):
                raise ValidationError(f"bad w combination {pair}")

    def combinations(self) -> list[dict]:
        combos = []
        for lam_ori, lam_t, lam_g in self.lambdas:
            for w1, w2 in self.w_pairs:
                combos.append(
                    {"lam_ori": lam_ori, "lam_t": lam_t, "lam_g": lam_g, "w1": w1, "w2": w2}
                )
        return combos
