"""Preference construction and reward-model training.

Candidate captions per meme are ranked three ways: by human pairwise
annotations (aggregated elsewhere), by closeness of each generated token's
attention profile to the meme's prior attention (Jensen-Shannon divergence),
and by a weighted Borda fusion of the two. The scalar reward model is the
caption-decoder trunk with its vocabulary head replaced by a linear scalar
head, trained with a pairwise ranking loss over all ordered pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import blob
from .align import AttentionMap
from .decoder import CaptionDecoder, DecoderConfig, Vocab
from .errors import ValidationError
from .optim import MomentumSGD

PREFERENCE_SOURCES = ("human", "attention", "fused")
AGREEMENT_GATE = 0.7


@dataclass
class Candidate:
    candidate_id: str
    tokens: list[str]
    attention: AttentionMap | None = None


@dataclass
class CandidateSet:
    meme_id: str
    candidates: list[Candidate]
    provenance: str = ""
    cond: np.ndarray | None = None
    prompt_ids: list[int] = field(default_factory=list)
    prompt_tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise ValidationError(f"meme {self.meme_id}: need at least two candidates")
        ids = [c.candidate_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"meme {self.meme_id}: duplicate candidate ids")
        texts = [tuple(c.tokens) for c in self.candidates]
        if len(set(texts)) != len(texts):
            raise ValidationError(f"meme {self.meme_id}: candidate captions must be distinct")

    def by_id(self, candidate_id: str) -> Candidate:
        for c in self.candidates:
            if c.candidate_id == candidate_id:
                return c
        raise ValidationError(f"meme {self.meme_id}: unknown candidate {candidate_id}")


@dataclass
class PreferenceRecord:
    """A complete worst-to-best ordering of one meme's candidate ids.

    annotator_ids and timestamp are provenance for human-sourced records;
    attention-derived records leave them empty so pipeline artifacts stay
    reproducible."""

    meme_id: str
    ordering: list[str]
    source: str
    agreement: float | None = None
    annotator_ids: list[str] = field(default_factory=list)
    timestamp: float | None = None

    def __post_init__(self):
        if self.source not in PREFERENCE_SOURCES:
            raise ValidationError(f"unknown preference source {self.source!r}")
        if len(set(self.ordering)) != len(self.ordering):
            raise ValidationError(f"meme {self.meme_id}: ordering repeats a candidate")
        if self.agreement is not None and not -1.0 <= self.agreement <= 1.0:
            raise ValidationError(f"agreement {self.agreement} outside [-1, 1]")

    def to_dict(self) -> dict:
        return {
            "meme_id": self.meme_id,
            "ordering": list(self.ordering),
            "source": self.source,
            "agreement": self.agreement,
            "annotator_ids": list(self.annotator_ids),
            "timestamp": self.timestamp,
        }


# ---------------------------------------------------------------------------
# attention-based ranking
# ---------------------------------------------------------------------------


def jensen_shannon_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Base-2 JSD between two distributions; bounded in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def half(a):
        mask = a > 0.0
        return float((a[mask] * np.log2(a[mask] / m[mask])).sum())

    return 0.5 * half(p) + 0.5 * half(q)


def _normalized_column(matrix: np.ndarray, j: int) -> np.ndarray:
    col = matrix[:, j].astype(np.float64)
    total = col.sum()
    if total <= 0.0:
        return np.full(col.shape, 1.0 / col.shape[0])
    return col / total


def attention_alignment_score(candidate_map: AttentionMap, prior_map: AttentionMap) -> float:
    """Mean per-token alignment 1 - JSD between the candidate's and the
    prior's per-token area profiles, compared position-wise over the common
    token horizon."""
    if candidate_map.num_areas != prior_map.num_areas:
        raise ValidationError(
            f"area count mismatch: candidate {candidate_map.num_areas} vs prior {prior_map.num_areas}"
        )
    n = min(candidate_map.num_tokens, prior_map.num_tokens)
    scores = [
        1.0
        - jensen_shannon_divergence(
            _normalized_column(candidate_map.token_level, j),
            _normalized_column(prior_map.token_level, j),
        )
        for j in range(n)
    ]
    return float(np.mean(scores))


def attention_rank(candidates: CandidateSet, prior_map: AttentionMap) -> PreferenceRecord:
    """Order candidates worst-to-best by attention alignment with the prior;
    ties break on candidate id."""
    scored = []
    for cand in candidates.candidates:
        if cand.attention is None:
            raise ValidationError(f"candidate {cand.candidate_id} carries no attention map")
        scored.append((attention_alignment_score(cand.attention, prior_map), cand.candidate_id))
    ordering = [cid for _, cid in sorted(scored, key=lambda s: (s[0], s[1]))]
    return PreferenceRecord(meme_id=candidates.meme_id, ordering=ordering, source="attention")


def borda_points(ordering: Sequence[str]) -> dict[str, int]:
    """Worst-to-best ordering to points: worst scores 0, best k-1."""
    return {cid: i for i, cid in enumerate(ordering)}


def fuse_rankings(
    human: PreferenceRecord,
    attention: PreferenceRecord,
    human_weight: float = 0.7,
) -> PreferenceRecord:
    """Weighted Borda fusion; degenerates to either source at weight 0 or 1."""
    if not 0.0 <= human_weight <= 1.0:
        raise ValidationError("human weight must lie in [0, 1]")
    if human.meme_id != attention.meme_id or set(human.ordering) != set(attention.ordering):
        raise ValidationError("rankings cover different candidate sets")
    bh = borda_points(human.ordering)
    ba = borda_points(attention.ordering)
    score = {cid: human_weight * bh[cid] + (1.0 - human_weight) * ba[cid] for cid in bh}
    ordering = sorted(score, key=lambda cid: (score[cid], cid))
    return PreferenceRecord(
        meme_id=human.meme_id,
        ordering=ordering,
        source="fused",
        agreement=human.agreement,
        annotator_ids=list(human.annotator_ids),
        timestamp=human.timestamp,
    )


def ranking_pairs(ordering: Sequence[str]) -> list[tuple[str, str]]:
    """All k*(k-1)/2 (winner, loser) pairs implied by a worst-to-best ordering."""
    if len(ordering) < 2:
        raise ValidationError("need at least two ranked candidates")
    pairs = []
    for i in range(len(ordering)):
        for j in range(i + 1, len(ordering)):
            pairs.append((ordering[j], ordering[i]))
    return pairs


# ---------------------------------------------------------------------------
# reward model
# ---------------------------------------------------------------------------


class RewardModel:
    """Caption-decoder trunk with the vocabulary head swapped for a scalar."""

    def __init__(self, vocab: Vocab, config: DecoderConfig = DecoderConfig(), seed: int = 0):
        self.trunk = CaptionDecoder(vocab, config, seed=seed)
        rng = np.random.default_rng(seed + 1)
        d = config.d_model
        self.head = {"v_head": rng.normal(0.0, 1.0 / np.sqrt(d), size=(d,)), "b_head": np.zeros(1)}

    @classmethod
    def from_decoder(cls, decoder: CaptionDecoder, seed: int = 0) -> "RewardModel":
        model = cls(decoder.vocab, decoder.config, seed=seed)
        model.trunk = decoder.clone()
        return model

    def all_params(self) -> dict[str, np.ndarray]:
        return {**self.trunk.params, **self.head}

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.all_params().items()}

    def score(self, cond, prompt_ids, cap_ids) -> float:
        r, _ = self.score_with_cache(cond, prompt_ids, cap_ids)
        return r

    def score_with_cache(self, cond, prompt_ids, cap_ids):
        ids = list(prompt_ids) + [self.trunk.vocab.bos] + list(cap_ids)
        h, cache = self.trunk.forward_hidden(ids, cond)
        r = float(h[-1] @ self.head["v_head"] + self.head["b_head"][0])
        if not np.isfinite(r):
            raise ValidationError("reward model produced a non-finite score")
        return r, {"h_last": h[-1], "cache": cache, "rows": h.shape[0]}

    def score_backward(self, cache, d_r: float, grads: dict[str, np.ndarray]) -> None:
        grads["v_head"] += d_r * cache["h_last"]
        grads["b_head"][0] += d_r
        d_h = np.zeros((cache["rows"], self.trunk.config.d_model))
        d_h[-1] = d_r * self.head["v_head"]
        self.trunk.backward_hidden(cache["cache"], d_h, grads)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.all_params()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.all_params()[k]).tobytes())
        return h.hexdigest()

    def save(self, path, meta: dict | None = None) -> None:
        info = {
            "vocab": self.trunk.vocab.tokens,
            "d_model": self.trunk.config.d_model,
            "n_layers": self.trunk.config.n_layers,
            "d_ff": self.trunk.config.d_ff,
            "cond_dim": self.trunk.config.cond_dim,
            "max_len": self.trunk.config.max_len,
        }
        arrays = {f"trunk.{k}": v for k, v in self.trunk.params.items()}
        arrays.update(self.head)
        blob.dump_arrays(path, arrays, {**info, **(meta or {})})

    @classmethod
    def load(cls, path) -> "RewardModel":
        meta, arrays = blob.load_arrays(path)
        vocab = Vocab(meta["vocab"])
        config = DecoderConfig(
            d_model=meta["d_model"],
            n_layers=meta["n_layers"],
            d_ff=meta["d_ff"],
            cond_dim=meta["cond_dim"],
            max_len=meta["max_len"],
        )
        model = cls(vocab, config)
        model.trunk.params = {k[len("trunk.") :]: v for k, v in arrays.items() if k.startswith("trunk.")}
        model.head = {"v_head": arrays["v_head"], "b_head": arrays["b_head"]}
        return model


def pairwise_ranking_loss(
    model: RewardModel,
    x: tuple,
    pairs: Sequence[tuple[list[int], list[int]]],
    with_grads: bool = True,
):
    """Mean -log sigmoid(r(x, winner) - r(x, loser)) over the given pairs.

    x is the shared conditioning (cond vector, prompt ids); each pair holds
    the winner's and loser's caption token ids. Returns (loss, grads) with
    grads None when with_grads is false.
    """
    if not pairs:
        raise ValidationError("no ranking pairs")
    cond, prompt_ids = x
    grads = model.zero_grads() if with_grads else None
    total = 0.0
    inv = 1.0 / len(pairs)
    for win_ids, lose_ids in pairs:
        r_w, cache_w = model.score_with_cache(cond, prompt_ids, win_ids)
        r_l, cache_l = model.score_with_cache(cond, prompt_ids, lose_ids)
        margin = r_w - r_l
        total += float(np.logaddexp(0.0, -margin))
        if with_grads:
            # d/d margin of -log sigmoid(margin) = -sigmoid(-margin)
            d_margin = -1.0 / (1.0 + np.exp(margin))
            model.score_backward(cache_w, inv * d_margin, grads)
            model.score_backward(cache_l, -inv * d_margin, grads)
    return total * inv, grads


@dataclass(frozen=True)
class RewardTrainConfig:
    steps: int = 500
    lr: float = 0.05
    momentum: float = 0.9
    batch_pairs: int = 8
    seed: int = 0
    log_every: int = 25


def usable_preferences(records: Sequence[PreferenceRecord]) -> list[PreferenceRecord]:
    """Human records pass only above the agreement gate; other sources pass."""
    kept = [
        r
        for r in records
        if r.source != "human" or (r.agreement is not None and r.agreement > AGREEMENT_GATE)
    ]
    if not kept:
        raise ValidationError("no usable preferences")
    return kept


def train_reward(
    records: Sequence[PreferenceRecord],
    candidate_sets: dict[str, CandidateSet],
    model: RewardModel,
    config: RewardTrainConfig = RewardTrainConfig(),
) -> tuple[RewardModel, list[dict]]:
    """Train on every record's ranking pairs; deterministic given the seed."""
    kept = usable_preferences(records)
    dataset = []
    for rec in kept:
        cset = candidate_sets.get(rec.meme_id)
        if cset is None:
            raise ValidationError(f"no candidate set for meme {rec.meme_id}")
        if set(rec.ordering) != {c.candidate_id for c in cset.candidates}:
            raise ValidationError(f"meme {rec.meme_id}: ordering does not cover the candidate set")
        vocab = model.trunk.vocab
        for win, lose in ranking_pairs(rec.ordering):
            dataset.append(
                (
                    (cset.cond, cset.prompt_ids),
                    vocab.encode(cset.by_id(win).tokens),
                    vocab.encode(cset.by_id(lose).tokens),
                )
            )
    if not dataset:
        raise ValidationError("no ranking pairs to train on")

    opt = MomentumSGD(model.all_params(), lr=config.lr, momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    log: list[dict] = []
    for step in range(config.steps):
        take = min(config.batch_pairs, len(dataset))
        idx = rng.choice(len(dataset), size=take, replace=False)
        grads = model.zero_grads()
        loss_sum = 0.0
        for i in idx:
            x, win_ids, lose_ids = dataset[i]
            loss, g = pairwise_ranking_loss(model, x, [(win_ids, lose_ids)])
            loss_sum += loss
            for k, v in g.items():
                grads[k] += v / take
        opt.step(grads)
        if step % config.log_every == 0 or step == config.steps - 1:
            log.append({"step": step, "L_r": loss_sum / take})
    return model, log


# ---------------------------------------------------------------------------
# inter-annotator agreement
# ---------------------------------------------------------------------------


def krippendorff_alpha(ratings, level: str = "ordinal") -> float:
    """Chance-corrected agreement over an annotators x items matrix.

    Missing ratings are NaN. Supported distance metrics: "ordinal" (the
    default used for ranked preferences), "nominal", and "interval". Returns
    a coefficient in [-1, 1]; callers gate human preferences at > 0.7.
    """
    arr = np.asarray(ratings, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValidationError("need a 2-D matrix with at least two annotators")
    if level not in ("ordinal", "nominal", "interval"):
        raise ValidationError(f"unknown level {level!r}")

    units = [arr[~np.isnan(arr[:, j]), j] for j in range(arr.shape[1])]
    units = [u for u in units if u.shape[0] >= 2]
    if not units:
        raise ValidationError("no item carries ratings from at least two annotators")

    values = np.unique(np.concatenate(units))
    v_index = {v: i for i, v in enumerate(values)}
    k = len(values)
    coincidence = np.zeros((k, k))
    for u in units:
        m_u = u.shape[0]
        for a in range(m_u):
            for b in range(m_u):
                if a != b:
                    coincidence[v_index[u[a]], v_index[u[b]]] += 1.0 / (m_u - 1)
    marginals = coincidence.sum(axis=1)
    n = marginals.sum()

    delta2 = np.zeros((k, k))
    for c in range(k):
        for d in range(c + 1, k):
            if level == "nominal":
                dist2 = 1.0
            elif level == "interval":
                dist2 = (values[c] - values[d]) ** 2
            else:
                dist2 = (marginals[c : d + 1].sum() - (marginals[c] + marginals[d]) / 2.0) ** 2
            delta2[c, d] = delta2[d, c] = dist2

    d_o = (coincidence * delta2).sum() / n
    d_e = (np.outer(marginals, marginals) * delta2).sum() / (n * (n - 1))
    if d_e == 0.0:
        return 1.0
    return float(1.0 - d_o / d_e)
