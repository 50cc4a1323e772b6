"""Supervised fine-tuning of the caption decoder with the prior-similarity
divergence losses.

The per-meme prior (global scalar + token-level attention matrix) comes from
the alignment module on the ground-truth caption. The prediction side pairs a
generated-vs-reference cosine with the token attention map recomputed from the
generated caption under frozen alignment parameters. Each prior/predicted pair
is compared through a two-way softmax and a two-point KL divergence; the KL
terms are weighted once in the total loss, so scaling all weights scales the
loss linearly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import align as align_mod
from .decoder import CaptionDecoder
from .encode import HashEmbeddingTextEncoder
from .errors import ValidationError
from .optim import MomentumSGD


@dataclass(frozen=True)
class SftWeights:
    lam_ori: float = 0.4
    lam_g: float = 0.2
    lam_t: float = 0.4

    def __post_init__(self):
        if min(self.lam_ori, self.lam_g, self.lam_t) < 0:
            raise ValidationError("loss weights must be non-negative")


@dataclass
class SimilarityPrior:
    """Prior vs predicted similarities for one meme.

    prior_global / predicted_global are scalars; prior_tokens and
    predicted_tokens are equally-shaped (areas x tokens) matrices.
    """

    prior_global: float
    prior_tokens: np.ndarray
    predicted_global: float
    predicted_tokens: np.ndarray

    def __post_init__(self):
        self.prior_tokens = np.asarray(self.prior_tokens, dtype=np.float64)
        self.predicted_tokens = np.asarray(self.predicted_tokens, dtype=np.float64)
        if self.prior_tokens.shape != self.predicted_tokens.shape:
            raise ValidationError(
                f"token similarity shapes differ: {self.prior_tokens.shape} vs "
                f"{self.predicted_tokens.shape}"
            )
        values = [self.prior_global, self.predicted_global]
        if not np.isfinite(values).all() or not np.isfinite(self.prior_tokens).all() or not np.isfinite(self.predicted_tokens).all():
            raise ValidationError("similarity prior holds non-finite values")


def binary_softmax_pair(a: float, b: float) -> tuple[float, float]:
    """Two-way softmax of two reals; the pair sums to 1."""
    m = max(a, b)
    ea, eb = np.exp(a - m), np.exp(b - m)
    z = ea + eb
    return float(ea / z), float(eb / z)


def two_point_kl(delta: float | np.ndarray):
    """KL between the two-point distributions (p, 1-p) and (1-p, p) for
    p = sigmoid(delta); equals (2p - 1) * delta, zero iff delta is zero."""
    p = 1.0 / (1.0 + np.exp(-np.asarray(delta, dtype=np.float64)))
    return (2.0 * p - 1.0) * delta


def two_point_kl_grad(delta: float | np.ndarray):
    """d/d(delta) of two_point_kl."""
    p = 1.0 / (1.0 + np.exp(-np.asarray(delta, dtype=np.float64)))
    return 2.0 * p * (1.0 - p) * delta + (2.0 * p - 1.0)


def kl_alignment_divergences(prior: SimilarityPrior) -> tuple[float, float]:
    """Unweighted divergences: the global scalar term and the summed
    token-level term."""
    raw_g = float(two_point_kl(prior.prior_global - prior.predicted_global))
    raw_t = float(two_point_kl(prior.prior_tokens - prior.predicted_tokens).sum())
    return raw_g, raw_t


def kl_alignment_losses(prior: SimilarityPrior, weights: SftWeights) -> tuple[float, float]:
    """Weighted divergence losses (L_g, L_t); both are always >= 0."""
    raw_g, raw_t = kl_alignment_divergences(prior)
    return weights.lam_g * raw_g, weights.lam_t * raw_t


def kl_alignment_grads(prior: SimilarityPrior) -> dict[str, np.ndarray | float]:
    """Gradients of the unweighted divergences w.r.t. every similarity input."""
    dg = float(two_point_kl_grad(prior.prior_global - prior.predicted_global))
    dt = two_point_kl_grad(prior.prior_tokens - prior.predicted_tokens)
    return {
        "prior_global": dg,
        "predicted_global": -dg,
        "prior_tokens": dt,
        "predicted_tokens": -dt,
    }


def predicted_similarity(
    generated: list[str],
    reference: list[str],
    text_encoder: HashEmbeddingTextEncoder,
    m_proj: np.ndarray | None = None,
    align_params: align_mod.AlignParams | None = None,
):
    """Predicted similarity of a generated caption against the reference.

    The scalar is the cosine of the mean-pooled token embeddings. When the
    projected image areas and alignment parameters are supplied, the
    token-level matrix is the attention map recomputed for the generated
    caption (alignment parameters stay frozen here).
    """
    if not generated or not reference:
        raise ValidationError("captions must be non-empty")
    gen_emb = text_encoder.encode(generated).matrix.mean(axis=0)
    ref_emb = text_encoder.encode(reference).matrix.mean(axis=0)
    ng, nr = np.linalg.norm(gen_emb), np.linalg.norm(ref_emb)
    if ng == 0.0 or nr == 0.0:
        raise ValidationError("zero-norm pooled embedding")
    scalar = float(gen_emb @ ref_emb / (ng * nr))
    matrix = None
    if m_proj is not None and align_params is not None:
        t_feats = text_encoder.encode(generated)
        t_proj = t_feats.matrix @ align_params.w_t.T + align_params.b_t
        matrix = align_mod.attention_similarity(m_proj, t_proj, align_params).token_level
    return scalar, matrix


def clip_token_matrices(prior_tokens: np.ndarray, predicted_tokens: np.ndarray):
    """Truncate both token matrices to the common token horizon so the
    element-wise divergence is defined when caption lengths differ."""
    n = min(prior_tokens.shape[1], predicted_tokens.shape[1])
    return prior_tokens[:, :n], predicted_tokens[:, :n]


# ---------------------------------------------------------------------------
# total SFT loss
# ---------------------------------------------------------------------------


@dataclass
class SftExample:
    meme_id: str
    cond: np.ndarray
    prompt_ids: list[int]
    cap_ids: list[int]


@dataclass
class SftLossResult:
    loss: float
    loss_ori: float
    loss_g: float
    loss_t: float
    grads: dict[str, np.ndarray]


def sft_loss(
    batch: Sequence[SftExample],
    decoder: CaptionDecoder,
    priors: Sequence[SimilarityPrior],
    weights: SftWeights,
) -> SftLossResult:
    """Total loss lam_ori * NLL + lam_g * KL_g + lam_t * KL_t with decoder
    gradients. The divergence terms treat generated captions as data, so the
    decoder gradient flows through the NLL term; alignment-parameter gradients
    for the divergence terms live in sft_align_grads."""
    if not batch:
        raise ValidationError("empty batch")
    if len(priors) != len(batch):
        raise ValidationError("one prior per batch example required")
    grads = decoder.zero_grads()
    nll_total = 0.0
    for ex in batch:
        nll, bundle = decoder.caption_nll(ex.cond, ex.prompt_ids, ex.cap_ids)
        nll_total += nll
        decoder.caption_nll_backward(bundle, grads, coef=weights.lam_ori / len(batch))
    loss_ori = nll_total / len(batch)
    raw_g = raw_t = 0.0
    for prior in priors:
        g, t = kl_alignment_divergences(prior)
        raw_g += g
        raw_t += t
    raw_g /= len(batch)
    raw_t /= len(batch)
    loss = weights.lam_ori * loss_ori + weights.lam_g * raw_g + weights.lam_t * raw_t
    return SftLossResult(
        loss=float(loss),
        loss_ori=float(loss_ori),
        loss_g=float(weights.lam_g * raw_g),
        loss_t=float(weights.lam_t * raw_t),
        grads=grads,
    )


def sft_align_grads(
    records: Sequence[dict],
    params: align_mod.AlignParams,
    weights: SftWeights,
) -> dict[str, np.ndarray]:
    """Alignment-parameter gradients of the divergence terms (the switchable
    path that lets SFT keep training the alignment projections).

    Each record dict carries raw features: "areas" (N x d), "gt_tokens"
    (n_gt x d), "gen_tokens" (n_gen x d), and "predicted_global" (the
    text-encoder cosine, alignment-independent).
    """
    grads = {name: np.zeros_like(t) for name, t in params.tensors().items()}
    for rec in records:
        m_raw = rec["areas"]
        tg_raw = rec["gt_tokens"]
        tp_raw = rec["gen_tokens"]
        m_proj, tg_proj = align_mod.project(m_raw, tg_raw, params)
        _, tp_proj = align_mod.project(m_raw, tp_raw, params)
        _, cache_prior = align_mod.attention_with_cache(m_proj, tg_proj, params)
        _, cache_pred = align_mod.attention_with_cache(m_proj, tp_proj, params)
        p_prior = cache_prior["p"]
        p_pred = cache_pred["p"]
        n_common = min(p_prior.shape[1], p_pred.shape[1])
        delta_t = p_prior[:, :n_common] - p_pred[:, :n_common]
        d_delta_t = weights.lam_t * two_point_kl_grad(delta_t) / len(records)

        d_prior_tl = np.zeros_like(p_prior)
        d_prior_tl[:, :n_common] = d_delta_t
        d_pred_tl = np.zeros_like(p_pred)
        d_pred_tl[:, :n_common] = -d_delta_t

        g1, d_m1, d_tg = align_mod.attention_backward(cache_prior, d_prior_tl)
        g2, d_m2, d_tp = align_mod.attention_backward(cache_pred, d_pred_tl)
        for k in ("w_q", "w_k"):
            grads[k] += g1[k] + g2[k]

        # global scalar term: cosine of mean-pooled projections on the
        # ground-truth side
        a = m_proj.mean(axis=0)
        b = tg_proj.mean(axis=0)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise ValidationError("zero-norm pooled projection")
        cos = float(a @ b / (na * nb))
        delta_g = cos - rec["predicted_global"]
        d_cos = weights.lam_g * float(two_point_kl_grad(delta_g)) / len(records)
        d_a = d_cos * (b / (na * nb) - cos * a / (na * na))
        d_b = d_cos * (a / (na * nb) - cos * b / (nb * nb))
        d_m_proj = d_m1 + np.broadcast_to(d_a / m_proj.shape[0], m_proj.shape)
        d_tg_proj = d_tg + np.broadcast_to(d_b / tg_proj.shape[0], tg_proj.shape)

        pg = align_mod.project_backward(m_raw, tg_raw, d_m_proj, d_tg_proj)
        pg2 = align_mod.project_backward(m_raw, tp_raw, d_m2, d_tp)
        for k in ("w_m", "b_m", "w_t", "b_t"):
            grads[k] += pg[k] + pg2[k]
    return grads


# ---------------------------------------------------------------------------
# decoding helpers and the training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"  # greedy | sample
    temperature: float = 1.0
    seed: int = 0
    max_len: int | None = None


def generate_caption(decoder: CaptionDecoder, cond, prompt_ids, config: DecodeConfig = DecodeConfig()) -> list[str]:
    """Decode a caption and return its tokens (EOS stripped)."""
    rng = np.random.default_rng(config.seed) if config.mode == "sample" else None
    ids, _ = decoder.generate(
        cond,
        prompt_ids,
        mode=config.mode,
        temperature=config.temperature,
        rng=rng,
        max_len=config.max_len,
    )
    return decoder.vocab.decode(ids)


def train_sft(
    examples: Sequence[SftExample],
    decoder: CaptionDecoder,
    prior_builder: Callable[[CaptionDecoder, SftExample], SimilarityPrior],
    weights: SftWeights = SftWeights(),
    epochs: int = 20,
    lr: float = 0.3,
    momentum: float = 0.9,
    batch_size: int = 8,
    clip_norm: float = 5.0,
    checkpoint_fn: Callable[[int, CaptionDecoder, dict], None] | None = None,
) -> tuple[CaptionDecoder, list[dict]]:
    """Momentum gradient descent on the total SFT loss.

    prior_builder is called once per example per epoch (it typically decodes
    a fresh caption and recomputes the predicted similarities). Returns the
    trained decoder and the per-epoch loss log.
    """
    if not examples:
        raise ValidationError("no training examples")
    opt = MomentumSGD(decoder.params, lr=lr, momentum=momentum, clip_norm=clip_norm)
    log: list[dict] = []
    for epoch in range(epochs):
        priors = [prior_builder(decoder, ex) for ex in examples]
        totals = {"loss": 0.0, "loss_ori": 0.0, "loss_g": 0.0, "loss_t": 0.0}
        batches = 0
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            chunk_priors = priors[start : start + batch_size]
            result = sft_loss(chunk, decoder, chunk_priors, weights)
            opt.step(result.grads)
            for key in totals:
                totals[key] += getattr(result, key)
            batches += 1
        entry = {
            "epoch": epoch,
            "L_SFT": totals["loss"] / batches,
            "L_ori": totals["loss_ori"] / batches,
            "L_g": totals["loss_g"] / batches,
            "L_t": totals["loss_t"] / batches,
        }
        log.append(entry)
        if checkpoint_fn is not None:
            checkpoint_fn(epoch, decoder, entry)
    return decoder, log
