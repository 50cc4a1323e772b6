"""Multi-granularity image-text alignment.

Projects area and token features into a shared space, computes token-level
and global attention similarities, trains the projections with an in-batch
contrastive loss, and exports per-token heatmap overlays. All gradients are
hand-derived and checked against central finite differences in the test
suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from PIL import Image, PngImagePlugin

from . import blob
from .encode import AreaFeatures, TokenFeatures
from .errors import ValidationError
from .kernels import row_softmax

PARAM_NAMES = ("w_m", "b_m", "w_t", "b_t", "w_q", "w_k")


@dataclass
class AlignParams:
    """Trainable projection and attention parameters.

    w_m/b_m and w_t/b_t apply row-wise as x -> W x + b to image-area and
    caption-token features; w_q/w_k map the projected width d to the key
    width d_k; tau is the contrastive temperature.
    """

    w_m: np.ndarray
    b_m: np.ndarray
    w_t: np.ndarray
    b_t: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    d_k: int
    tau: float = 0.07

    def __post_init__(self):
        if self.d_k < 1:
            raise ValidationError("d_k must be >= 1")
        if not self.tau > 0:
            raise ValidationError("temperature must be positive")
        for name in PARAM_NAMES:
            if not np.isfinite(getattr(self, name)).all():
                raise ValidationError(f"alignment parameter {name} has non-finite entries")

    @classmethod
    def initialize(cls, d: int = 64, d_k: int = 32, tau: float = 0.07, seed: int = 0) -> "AlignParams":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(d)
        return cls(
            w_m=np.eye(d) + rng.normal(0.0, 0.02, size=(d, d)),
            b_m=np.zeros(d),
            w_t=np.eye(d) + rng.normal(0.0, 0.02, size=(d, d)),
            b_t=np.zeros(d),
            w_q=rng.normal(0.0, scale, size=(d, d_k)),
            w_k=rng.normal(0.0, scale, size=(d, d_k)),
            d_k=d_k,
            tau=tau,
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "AlignParams":
        return AlignParams(
            **{name: getattr(self, name).copy() for name in PARAM_NAMES},
            d_k=self.d_k,
            tau=self.tau,
        )

    def save(self, path, meta: dict | None = None) -> None:
        info = {"d_k": self.d_k, "tau": self.tau}
        blob.dump_arrays(path, self.tensors(), {**info, **(meta or {})})

    @classmethod
    def load(cls, path) -> "AlignParams":
        meta, arrays = blob.load_arrays(path)
        return cls(**arrays, d_k=int(meta["d_k"]), tau=float(meta["tau"]))


@dataclass
class AttentionMap:
    """token_level[i, j]: attention of image area i on caption token j, each
    row softmax-normalized over tokens; global[j]: column mean over areas;
    energies[i, j]: the unnormalized scores, retained for inspection."""

    token_level: np.ndarray
    global_: np.ndarray
    energies: np.ndarray

    def __post_init__(self):
        tl = self.token_level
        if tl.ndim != 2 or tl.shape != self.energies.shape:
            raise ValidationError("token_level and energies must share a 2-D shape")
        if self.global_.shape != (tl.shape[1],):
            raise ValidationError("global vector length must equal the token count")
        if np.abs(tl.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValidationError("token_level rows must sum to 1")
        if tl.min() < 0.0 or tl.max() > 1.0:
            raise ValidationError("token_level entries must lie in [0, 1]")
        if np.abs(self.global_ - tl.mean(axis=0)).max() > 1e-9:
            raise ValidationError("global vector must be the column mean of token_level")

    @property
    def num_areas(self) -> int:
        return self.token_level.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.token_level.shape[1]

    def to_json(self) -> str:
        return json.dumps(
            {
                "token_level": self.token_level.tolist(),
                "global": self.global_.tolist(),
                "energies": self.energies.tolist(),
            },
            separators=(", ", ": "),
        )

    @classmethod
    def from_json(cls, line: str) -> "AttentionMap":
        obj = json.loads(line)
        return cls(
            token_level=np.asarray(obj["token_level"], dtype=np.float64),
            global_=np.asarray(obj["global"], dtype=np.float64),
            energies=np.asarray(obj["energies"], dtype=np.float64),
        )


def _as_matrix(feats) -> np.ndarray:
    if isinstance(feats, (AreaFeatures, TokenFeatures)):
        return feats.matrix
    return np.asarray(feats, dtype=np.float64)


def project(area_feats, token_feats, params: AlignParams) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise linear projections into the shared space."""
    m = _as_matrix(area_feats)
    t = _as_matrix(token_feats)
    if m.shape[1] != params.w_m.shape[1] or t.shape[1] != params.w_t.shape[1]:
        raise ValidationError(
            f"feature widths {m.shape} / {t.shape} do not match projection shapes "
            f"{params.w_m.shape} / {params.w_t.shape}"
        )
    return m @ params.w_m.T + params.b_m, t @ params.w_t.T + params.b_t


def attention_similarity(m_proj: np.ndarray, t_proj: np.ndarray, params: AlignParams) -> AttentionMap:
    att, _ = attention_with_cache(m_proj, t_proj, params)
    return att


def attention_with_cache(m_proj, t_proj, params: AlignParams):
    """Token-level attention map plus the cache needed for the backward pass."""
    m_proj = np.asarray(m_proj, dtype=np.float64)
    t_proj = np.asarray(t_proj, dtype=np.float64)
    if t_proj.shape[0] == 0:
        raise ValidationError("attention requires at least one caption token")
    if m_proj.shape[1] != params.w_q.shape[0] or t_proj.shape[1] != params.w_k.shape[0]:
        raise ValidationError("projection width does not match W_Q/W_K input width")
    q = m_proj @ params.w_q
    k = t_proj @ params.w_k
    energies = q @ k.T
    if not np.isfinite(energies).all():
        raise ValidationError("non-finite attention energy")
    scaled = energies / np.sqrt(params.d_k)
    token_level = row_softmax(scaled)
    att = AttentionMap(token_level=token_level, global_=token_level.mean(axis=0), energies=energies)
    cache = {"m_proj": m_proj, "t_proj": t_proj, "q": q, "k": k, "p": token_level, "params": params}
    return att, cache


def attention_backward(cache, d_token_level=None, d_global=None):
    """Gradients of a scalar through the attention map.

    Returns (param_grads for w_q/w_k, d_m_proj, d_t_proj). Projection-side
    gradients (w_m etc.) follow from d_m_proj / d_t_proj via project_backward.
    """
    params: AlignParams = cache["params"]
    p = cache["p"]
    n_areas, n_tok = p.shape
    dp = np.zeros_like(p)
    if d_token_level is not None:
        dp += d_token_level
    if d_global is not None:
        dp += np.broadcast_to(d_global / n_areas, (n_areas, n_tok))
    # softmax rows backward
    d_scaled = p * (dp - (dp * p).sum(axis=1, keepdims=True))
    d_energies = d_scaled / np.sqrt(params.d_k)
    dq = d_energies @ cache["k"]
    dk = d_energies.T @ cache["q"]
    grads = {"w_q": cache["m_proj"].T @ dq, "w_k": cache["t_proj"].T @ dk}
    d_m_proj = dq @ params.w_q.T
    d_t_proj = dk @ params.w_k.T
    return grads, d_m_proj, d_t_proj


def project_backward(m, t, d_m_proj, d_t_proj):
    """Gradients of the row-wise projections given upstream feature grads."""
    m = _as_matrix(m)
    t = _as_matrix(t)
    return {
        "w_m": d_m_proj.T @ m,
        "b_m": d_m_proj.sum(axis=0),
        "w_t": d_t_proj.T @ t,
        "b_t": d_t_proj.sum(axis=0),
    }


def contrastive_loss(scores, positive_index: int, tau: float) -> float:
    """Softmax cross-entropy of the positive against all candidates.

    Equals ln(len(scores)) exactly when every score is equal, and tends to 0
    as the positive's margin grows.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] < 2:
        raise ValidationError("need at least two candidate scores")
    if not 0 <= positive_index < scores.shape[0]:
        raise ValidationError(f"positive index {positive_index} out of range")
    if not tau > 0:
        raise ValidationError("temperature must be positive")
    z = scores / tau
    m = z.max()
    sumexp = np.exp(z - m).sum()
    return float(np.log(sumexp) + (m - z[positive_index]))


@dataclass
class AlignBatchResult:
    loss: float
    grads: dict[str, np.ndarray]


def align_batch_loss(
    batch: list[tuple],
    params: AlignParams,
    candidate_mode: str = "token",
) -> AlignBatchResult:
    """In-batch contrastive loss over all image areas, with gradients.

    batch holds (area_features, token_features) pairs, one per meme. For each
    image area, its own caption provides the positives and every other meme in
    the batch provides the negatives. candidate_mode "token" treats each token
    in the batch as a candidate (multi-positive softmax averaged over the own
    caption's tokens); "caption" aggregates scores per caption (mean energy)
    and treats each caption as one candidate.
    """
    if len(batch) < 2:
        raise ValidationError("in-batch negatives need at least two memes per batch")
    if candidate_mode not in ("token", "caption"):
        raise ValidationError(f"unknown candidate mode {candidate_mode!r}")

    mats_m = [_as_matrix(m) for m, _ in batch]
    mats_t = [_as_matrix(t) for _, t in batch]
    area_owner = np.concatenate([np.full(m.shape[0], i) for i, m in enumerate(mats_m)])
    token_owner = np.concatenate([np.full(t.shape[0], i) for i, t in enumerate(mats_t)])
    m_all = np.concatenate(mats_m, axis=0)
    t_all = np.concatenate(mats_t, axis=0)

    m_proj, t_proj = project(m_all, t_all, params)
    q = m_proj @ params.w_q
    k = t_proj @ params.w_k
    scores = (q @ k.T) / np.sqrt(params.d_k)
    if not np.isfinite(scores).all():
        raise ValidationError("non-finite attention energy")

    tau = params.tau
    n_areas = scores.shape[0]
    n_memes = len(batch)

    if candidate_mode == "caption":
        cap_scores = np.stack(
            [scores[:, token_owner == c].mean(axis=1) for c in range(n_memes)], axis=1
        )
        z = cap_scores / tau
        mrow = z.max(axis=1, keepdims=True)
        e = np.exp(z - mrow)
        soft = e / e.sum(axis=1, keepdims=True)
        own = area_owner
        loss = float(
            np.mean(np.log(e.sum(axis=1)) + (mrow[:, 0] - z[np.arange(n_areas), own]))
        )
        d_cap = soft.copy()
        d_cap[np.arange(n_areas), own] -= 1.0
        d_cap /= n_areas * tau
        d_scores = np.zeros_like(scores)
        for c in range(n_memes):
            cols = token_owner == c
            d_scores[:, cols] = (d_cap[:, c] / cols.sum())[:, None]
    else:
        z = scores / tau
        mrow = z.max(axis=1, keepdims=True)
        e = np.exp(z - mrow)
        soft = e / e.sum(axis=1, keepdims=True)
        pos_mask = token_owner[None, :] == area_owner[:, None]
        pos_counts = pos_mask.sum(axis=1)
        lse = np.log(e.sum(axis=1)) + mrow[:, 0]
        per_area = lse - (z * pos_mask).sum(axis=1) / pos_counts
        loss = float(per_area.mean())
        d_scores = (soft - pos_mask / pos_counts[:, None]) / (n_areas * tau)

    dq = d_scores @ k / np.sqrt(params.d_k)
    dk = d_scores.T @ q / np.sqrt(params.d_k)
    grads = {"w_q": m_proj.T @ dq, "w_k": t_proj.T @ dk}
    d_m_proj = dq @ params.w_q.T
    d_t_proj = dk @ params.w_k.T
    grads.update(project_backward(m_all, t_all, d_m_proj, d_t_proj))
    return AlignBatchResult(loss=loss, grads=grads)


def global_similarity(m_proj: np.ndarray, t_proj: np.ndarray) -> float:
    """Cosine similarity of the mean-pooled projected features; the scalar
    image-caption prior fed to the SFT divergence loss."""
    a = np.asarray(m_proj, dtype=np.float64).mean(axis=0)
    b = np.asarray(t_proj, dtype=np.float64).mean(axis=0)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("zero-norm pooled feature vector")
    return float(a @ b / (na * nb))


def attention_pool(att: AttentionMap, m_proj: np.ndarray) -> np.ndarray:
    """Pool projected area features with weights from the retained energies
    (softmax over areas of each area's mean scaled energy)."""
    m_proj = np.asarray(m_proj, dtype=np.float64)
    if m_proj.shape[0] != att.num_areas:
        raise ValidationError("area count mismatch between map and features")
    mean_energy = att.energies.mean(axis=1) / np.sqrt(max(1, att.num_tokens))
    w = np.exp(mean_energy - mean_energy.max())
    w /= w.sum()
    return w @ m_proj


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train_align(
    batches: list[list[tuple]],
    params: AlignParams,
    epochs: int = 5,
    lr: float = 0.01,
    momentum: float = 0.9,
    candidate_mode: str = "token",
    clip_norm: float = 5.0,
) -> tuple[AlignParams, list[dict]]:
    """Momentum gradient descent on align_batch_loss; returns params and a log."""
    from .optim import MomentumSGD

    params = params.copy()
    opt = MomentumSGD(params.tensors(), lr=lr, momentum=momentum, clip_norm=clip_norm)
    log = []
    for epoch in range(epochs):
        total = 0.0
        for batch in batches:
            result = align_batch_loss(batch, params, candidate_mode)
            total += result.loss
            opt.step(result.grads)
        log.append({"epoch": epoch, "loss": total / max(1, len(batches))})
    return params, log


# ---------------------------------------------------------------------------
# heatmap export
# ---------------------------------------------------------------------------


def export_heatmap(
    att: AttentionMap,
    image: np.ndarray,
    rois,
    token_index: int,
    path,
    patch_grid: int = 4,
    alpha: float = 0.6,
    text_meta: dict[str, str] | None = None,
) -> None:
    """Write a PNG overlay whose per-area intensity follows one token's
    attention column, min-max normalized across the meme's areas."""
    if not 0 <= token_index < att.num_tokens:
        raise ValidationError(f"token index {token_index} out of range [0, {att.num_tokens})")
    per_roi = patch_grid * patch_grid
    if att.num_areas != per_roi * len(rois):
        raise ValidationError(
            f"map has {att.num_areas} areas, expected {per_roi} x {len(rois)} ROIs"
        )
    col = att.token_level[:, token_index].astype(np.float64)
    span = col.max() - col.min()
    weights = np.full_like(col, 0.5) if span == 0.0 else (col - col.min()) / span

    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    out = arr.copy()
    heat = np.array([255.0, 40.0, 40.0])
    for r_idx, roi in enumerate(rois):
        ys = np.array_split(np.arange(roi.y0, roi.y1), patch_grid)
        xs = np.array_split(np.arange(roi.x0, roi.x1), patch_grid)
        for pr in range(patch_grid):
            for pc in range(patch_grid):
                w = weights[r_idx * per_roi + pr * patch_grid + pc] * alpha
                block = out[ys[pr][0] : ys[pr][-1] + 1, xs[pc][0] : xs[pc][-1] + 1]
                block *= 1.0 - w
                block += heat * w
    img = Image.fromarray(np.clip(np.rint(out), 0, 255).astype(np.uint8))
    pnginfo = PngImagePlugin.PngInfo()
    for key, value in (text_meta or {}).items():
        pnginfo.add_text(key, value)
    img.save(path, format="PNG", pnginfo=pnginfo)
