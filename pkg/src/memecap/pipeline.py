"""Stage orchestration: artifacts, run manifests, and reproducible end-to-end
runs.

Each stage reads its inputs from the data directory, writes its artifacts plus
a run.json (config hash, seed, input and output hashes), and refuses to run
before the stage that produces its inputs. Identical config + seed + inputs
reproduce identical artifact bytes, which the determinism tests verify by
checksum.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
from PIL import Image

from . import align as align_mod
from . import annotate as annotate_mod
from . import metrics as metrics_mod
from . import reward as reward_mod
from . import rl as rl_mod
from . import sft as sft_mod
from .augment import AugmentOp, augment_image
from .config import BASELINE_PROMPT, GridSpec, TrainConfig
from .corpus import (
    MemeRecord,
    SegmentConfig,
    compute_stats,
    default_tokenizer,
    load_manifest,
    save_manifest,
    segment_subimages,
)
from .decoder import CaptionDecoder, DecoderConfig, Vocab
from .encode import (
    ChainOfHumor,
    HashEmbeddingTextEncoder,
    PatchMeanImageEncoder,
    assemble_chain_of_humor,
    combine_variant_features,
)
from .errors import DependencyError, ValidationError
from .synthetic import generate_synthetic_corpus

STAGE_ORDER = (
    "gen-corpus",
    "ingest",
    "segment",
    "augment",
    "align",
    "sft",
    "candidates",
    "annotate-serve",
    "train-reward",
    "rl",
    "evaluate",
    "heatmap",
)

# artifact relative path -> stage that produces it
_PRODUCERS = {
    "corpus/manifest.jsonl": "gen-corpus",
    "corpus/validated.jsonl": "ingest",
    "corpus/stats.json": "ingest",
    "corpus/segmented.jsonl": "segment",
    "augment/variants.jsonl": "augment",
    "align/params.bin": "align",
    "align/encoder_image.bin": "align",
    "align/encoder_text.bin": "align",
    "sft/model.bin": "sft",
    "candidates/candidates.jsonl": "candidates",
    "reward/model.bin": "train-reward",
    "rl/model.bin": "rl",
    "evaluate/summary.json": "evaluate",
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(root: Path, rel_paths: list[str]) -> None:
    for rel in rel_paths:
        if not (root / rel).exists():
            producer = _PRODUCERS.get(rel, "an earlier stage")
            raise DependencyError(f"missing {rel}; run `{producer}` first")


def _write_run_manifest(root: Path, stage: str, cfg: TrainConfig, inputs: list[str], outputs: list[str]) -> None:
    manifest = {
        "stage": stage,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "inputs": {rel: _sha256(root / rel) for rel in sorted(inputs)},
        "artifacts": {rel: _sha256(root / rel) for rel in sorted(outputs)},
    }
    out = root / stage / "run.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _stage_seed(cfg: TrainConfig, label: str) -> int:
    digest = hashlib.sha256(f"{cfg.seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def data_root(cfg: TrainConfig) -> Path:
    env = os.environ.get("MEMECAP_DATA_DIR")
    return Path(env) if env else Path(cfg.data_dir)


# ---------------------------------------------------------------------------
# shared feature plumbing
# ---------------------------------------------------------------------------


def default_describer(record: MemeRecord) -> ChainOfHumor:
    """Deterministic chain-of-humor slots derived from manifest fields; a
    pluggable stand-in for model-generated sub-image descriptions. The meme id
    lands in the concept slot so conditioning separates records."""
    emotion = {
        "self_praise": "pride",
        "praise_others": "admiration",
        "self_mockery": "resignation",
        "mock_others": "smugness",
    }[record.sentiment]
    return ChainOfHumor(
        concept=f"scene {record.id} in a {record.structure} panel meme",
        emotion=emotion,
        event=f"a story told across {len(record.rois)} panel" + ("s" if len(record.rois) != 1 else ""),
        consequence="the caption lands the punchline",
        humor_device="incongruity",
    )


def prompt_tokens_for(record: MemeRecord, cfg: TrainConfig) -> list[str]:
    if cfg.prompt_mode == "baseline":
        return default_tokenizer(BASELINE_PROMPT)
    return default_tokenizer(assemble_chain_of_humor(default_describer(record)))


def _augment_ops(cfg: TrainConfig) -> list[AugmentOp]:
    pool = [
        AugmentOp("crop", (0.05, 0.05, 0.95, 0.95)),
        AugmentOp("rotate", (90,)),
        AugmentOp("rotate", (180,)),
        AugmentOp("crop", (0.1, 0.1, 1.0, 1.0)),
    ]
    return pool[: max(0, cfg.augment_variants)]


@dataclass
class MemeFeatures:
    record: MemeRecord
    areas: np.ndarray  # stacked patch features over ROIs, (len(rois)*P^2, d)
    gt_tokens: np.ndarray  # (n, d)


def load_image(root: Path, record: MemeRecord) -> np.ndarray:
    with Image.open(root / record.image_path) as im:
        return np.asarray(im.convert("RGB"))


def build_meme_features(
    records: list[MemeRecord],
    image_root: Path,
    img_encoder: PatchMeanImageEncoder,
    txt_encoder: HashEmbeddingTextEncoder,
    cfg: TrainConfig,
) -> list[MemeFeatures]:
    ops = _augment_ops(cfg)
    out = []
    for rec in records:
        img = load_image(image_root, rec)
        blocks = []
        for roi in rec.rois:
            sub = img[roi.y0 : roi.y1, roi.x0 : roi.x1]
            feats = img_encoder.encode(sub, source_index=roi.index)
            if ops:
                variants = [
                    img_encoder.encode(v, source_index=roi.index)
                    for v in augment_image(sub, ops)
                ]
                feats = combine_variant_features(feats, variants, cfg.augment_combine)
            blocks.append(feats.matrix)
        areas = np.concatenate(blocks, axis=0)
        tokens = txt_encoder.encode(rec.caption_tokens).matrix
        out.append(MemeFeatures(record=rec, areas=areas, gt_tokens=tokens))
    return out


def image_conditioning(m_proj: np.ndarray) -> np.ndarray:
    """Caption-independent attention pooling of the projected areas: weights
    are a softmax of each area's affinity with the mean area vector."""
    center = m_proj.mean(axis=0)
    logits = m_proj @ center / np.sqrt(m_proj.shape[1])
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return w @ m_proj


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_gen_corpus(cfg: TrainConfig) -> Path:
    root = data_root(cfg)
    corpus_dir = root / "corpus"
    manifest, _ = generate_synthetic_corpus(
        corpus_dir,
        size=cfg.corpus_size,
        seed=_stage_seed(cfg, "gen-corpus"),
        text_meta={"memecap_config": cfg.config_hash()},
    )
    outputs = ["corpus/manifest.jsonl"] + sorted(
        str(p.relative_to(root)) for p in (corpus_dir / "images").glob("*.png")
    )
    _write_run_manifest(root, "gen-corpus", cfg, [], outputs)
    return manifest


def stage_ingest(cfg: TrainConfig) -> list[MemeRecord]:
    root = data_root(cfg)
    _require(root, ["corpus/manifest.jsonl"])
    records = load_manifest(root / "corpus" / "manifest.jsonl")
    save_manifest(records, root / "corpus" / "validated.jsonl")
    stats = compute_stats(records)
    payload = {"config_hash": cfg.config_hash(), **stats.to_dict()}
    (root / "corpus" / "stats.json").write_text(
        json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    _write_run_manifest(
        root, "ingest", cfg, ["corpus/manifest.jsonl"], ["corpus/validated.jsonl", "corpus/stats.json"]
    )
    return records


def _validated_records(root: Path) -> list[MemeRecord]:
    return load_manifest(root / "corpus" / "validated.jsonl")


def stage_segment(cfg: TrainConfig, workers: int | None = None) -> list[MemeRecord]:
    root = data_root(cfg)
    _require(root, ["corpus/validated.jsonl"])
    records = _validated_records(root)
    seg_cfg = SegmentConfig(std_frac=cfg.segment_std_frac, min_thickness=cfg.segment_min_thickness)

    def redo(rec: MemeRecord) -> MemeRecord:
        img = load_image(root / "corpus", rec)
        rois = segment_subimages(img, mode="auto", config=seg_cfg)
        structure = "single" if len(rois) == 1 else "multi"
        return MemeRecord(
            id=rec.id,
            image_path=rec.image_path,
            structure=structure,
            sentiment=rec.sentiment,
            caption=rec.caption,
            rois=rois,
            split=rec.split,
            caption_tokens=list(rec.caption_tokens),
        )

    n_workers = workers or cfg.workers
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            segmented = list(pool.map(redo, records))
    else:
        segmented = [redo(r) for r in records]
    save_manifest(segmented, root / "corpus" / "segmented.jsonl")
    _write_run_manifest(root, "segment", cfg, ["corpus/validated.jsonl"], ["corpus/segmented.jsonl"])
    return segmented


def stage_augment(cfg: TrainConfig) -> Path:
    root = data_root(cfg)
    _require(root, ["corpus/validated.jsonl"])
    records = _validated_records(root)
    ops = _augment_ops(cfg)
    img_dir = root / "augment" / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    outputs = []
    for rec in records:
        img = load_image(root / "corpus", rec)
        entry = {"id": rec.id, "variants": [], "config_hash": cfg.config_hash()}
        for roi in rec.rois:
            sub = img[roi.y0 : roi.y1, roi.x0 : roi.x1]
            for v_idx, variant in enumerate(augment_image(sub, ops)):
                name = f"{rec.id}_roi{roi.index}_v{v_idx}.png"
                Image.fromarray(variant).save(img_dir / name, format="PNG")
                entry["variants"].append(
                    {"roi": roi.index, "op": ops[v_idx].kind, "image": f"images/{name}"}
                )
                outputs.append(f"augment/images/{name}")
        lines.append(json.dumps(entry, sort_keys=True))
    out_file = root / "augment" / "variants.jsonl"
    out_file.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    _write_run_manifest(
        root, "augment", cfg, ["corpus/validated.jsonl"], ["augment/variants.jsonl"] + outputs
    )
    return out_file


def _encoders(cfg: TrainConfig) -> tuple[PatchMeanImageEncoder, HashEmbeddingTextEncoder]:
    img_enc = PatchMeanImageEncoder(
        d=cfg.d, patch_grid=cfg.patch_grid, channels=3, seed=_stage_seed(cfg, "encoder-image")
    )
    txt_enc = HashEmbeddingTextEncoder(
        d=cfg.d, buckets=cfg.text_buckets, seed=_stage_seed(cfg, "encoder-text")
    )
    return img_enc, txt_enc


def _load_encoders(root: Path) -> tuple[PatchMeanImageEncoder, HashEmbeddingTextEncoder]:
    return (
        PatchMeanImageEncoder.load(root / "align" / "encoder_image.bin"),
        HashEmbeddingTextEncoder.load(root / "align" / "encoder_text.bin"),
    )


def stage_align(cfg: TrainConfig) -> align_mod.AlignParams:
    root = data_root(cfg)
    _require(root, ["corpus/validated.jsonl", "augment/variants.jsonl"])
    records = _validated_records(root)
    img_enc, txt_enc = _encoders(cfg)
    feats = build_meme_features(records, root / "corpus", img_enc, txt_enc, cfg)
    params = align_mod.AlignParams.initialize(
        d=cfg.d, d_k=cfg.d_k, tau=cfg.tau, seed=_stage_seed(cfg, "align-init")
    )
    train_feats = [f for f in feats if f.record.split == "train"] or feats
    pairs = [(f.areas, f.gt_tokens) for f in train_feats]
    rng = np.random.default_rng(_stage_seed(cfg, "align-batches"))
    batches = []
    for _ in range(cfg.align_epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), cfg.align_batch):
            chunk = [pairs[i] for i in order[start : start + cfg.align_batch]]
            if len(chunk) >= 2:
                batches.append(chunk)
    trained, log = align_mod.train_align(
        batches,
        params,
        epochs=1,
        lr=cfg.align_lr,
        candidate_mode=cfg.align_candidate_mode,
    )
    meta = {"config_hash": cfg.config_hash()}
    (root / "align").mkdir(parents=True, exist_ok=True)
    trained.save(root / "align" / "params.bin", meta)
    img_enc.save(root / "align" / "encoder_image.bin", meta)
    txt_enc.save(root / "align" / "encoder_text.bin", meta)
    log_lines = [json.dumps({**entry, "config_hash": cfg.config_hash()}, sort_keys=True) for entry in log]
    (root / "align" / "log.jsonl").write_text("".join(s + "\n" for s in log_lines), encoding="utf-8")
    _write_run_manifest(
        root,
        "align",
        cfg,
        ["corpus/validated.jsonl", "augment/variants.jsonl"],
        ["align/params.bin", "align/encoder_image.bin", "align/encoder_text.bin", "align/log.jsonl"],
    )
    return trained


@dataclass
class SftContext:
    """Everything the SFT and later stages share for one corpus."""

    records: list[MemeRecord]
    feats: list[MemeFeatures]
    params: align_mod.AlignParams
    txt_encoder: HashEmbeddingTextEncoder
    vocab: Vocab
    prompts: dict[str, list[str]]
    conds: dict[str, np.ndarray]
    m_projs: dict[str, np.ndarray]


def build_sft_context(cfg: TrainConfig, root: Path) -> SftContext:
    records = _validated_records(root)
    img_enc, txt_enc = _load_encoders(root)
    params = align_mod.AlignParams.load(root / "align" / "params.bin")
    feats = build_meme_features(records, root / "corpus", img_enc, txt_enc, cfg)
    prompts = {rec.id: prompt_tokens_for(rec, cfg) for rec in records}
    vocab = Vocab.build(
        [rec.caption_tokens for rec in records] + [prompts[rec.id] for rec in records]
    )
    conds: dict[str, np.ndarray] = {}
    m_projs: dict[str, np.ndarray] = {}
    for f in feats:
        m_proj = f.areas @ params.w_m.T + params.b_m
        m_projs[f.record.id] = m_proj
        conds[f.record.id] = image_conditioning(m_proj)
    return SftContext(
        records=records,
        feats=feats,
        params=params,
        txt_encoder=txt_enc,
        vocab=vocab,
        prompts=prompts,
        conds=conds,
        m_projs=m_projs,
    )


def _sft_examples(ctx: SftContext, split: str | None = "train") -> list[sft_mod.SftExample]:
    out = []
    for f in ctx.feats:
        rec = f.record
        if split and rec.split != split:
            continue
        out.append(
            sft_mod.SftExample(
                meme_id=rec.id,
                cond=ctx.conds[rec.id],
                prompt_ids=ctx.vocab.encode(ctx.prompts[rec.id]),
                cap_ids=ctx.vocab.encode(rec.caption_tokens),
            )
        )
    return out or [
        sft_mod.SftExample(
            meme_id=f.record.id,
            cond=ctx.conds[f.record.id],
            prompt_ids=ctx.vocab.encode(ctx.prompts[f.record.id]),
            cap_ids=ctx.vocab.encode(f.record.caption_tokens),
        )
        for f in ctx.feats
    ]


def make_prior_builder(ctx: SftContext, cfg: TrainConfig):
    feats_by_id = {f.record.id: f for f in ctx.feats}

    def builder(decoder: CaptionDecoder, ex: sft_mod.SftExample) -> sft_mod.SimilarityPrior:
        f = feats_by_id[ex.meme_id]
        m_proj = ctx.m_projs[ex.meme_id]
        t_proj = f.gt_tokens @ ctx.params.w_t.T + ctx.params.b_t
        prior_map = align_mod.attention_similarity(m_proj, t_proj, ctx.params)
        prior_global = align_mod.global_similarity(m_proj, t_proj)
        gen_ids, _ = decoder.generate(ex.cond, ex.prompt_ids, mode="greedy")
        gen_tokens = decoder.vocab.decode(gen_ids)
        gt_tokens = [decoder.vocab.tokens[i] for i in ex.cap_ids]
        pred_global, pred_matrix = sft_mod.predicted_similarity(
            gen_tokens, gt_tokens, ctx.txt_encoder, m_proj=m_proj, align_params=ctx.params
        )
        prior_tokens, pred_tokens = sft_mod.clip_token_matrices(prior_map.token_level, pred_matrix)
        return sft_mod.SimilarityPrior(
            prior_global=prior_global,
            prior_tokens=prior_tokens,
            predicted_global=pred_global,
            predicted_tokens=pred_tokens,
        )

    return builder


def stage_sft(cfg: TrainConfig) -> CaptionDecoder:
    root = data_root(cfg)
    _require(root, ["align/params.bin", "align/encoder_image.bin", "align/encoder_text.bin"])
    ctx = build_sft_context(cfg, root)
    decoder = CaptionDecoder(
        ctx.vocab,
        DecoderConfig(
            d_model=cfg.d,
            n_layers=cfg.decoder_layers,
            d_ff=cfg.decoder_ff,
            cond_dim=cfg.d,
            max_len=cfg.max_caption_len,
        ),
        seed=_stage_seed(cfg, "sft-init"),
    )
    weights = sft_mod.SftWeights(lam_ori=cfg.lam_ori, lam_g=cfg.lam_g, lam_t=cfg.lam_t)
    sft_dir = root / "sft"
    sft_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    def checkpoint(epoch: int, dec: CaptionDecoder, entry: dict) -> None:
        rel = f"sft/checkpoint_epoch_{epoch:03d}.bin"
        dec.save(root / rel, {"config_hash": cfg.config_hash(), "epoch": epoch})
        outputs.append(rel)

    examples = _sft_examples(ctx)
    decoder, log = sft_mod.train_sft(
        examples,
        decoder,
        make_prior_builder(ctx, cfg),
        weights=weights,
        epochs=cfg.sft_epochs,
        lr=cfg.sft_lr,
        batch_size=cfg.sft_batch,
        checkpoint_fn=checkpoint,
    )
    decoder.save(sft_dir / "model.bin", {"config_hash": cfg.config_hash()})
    log_lines = [json.dumps({**e, "config_hash": cfg.config_hash()}, sort_keys=True) for e in log]
    (sft_dir / "log.jsonl").write_text("".join(s + "\n" for s in log_lines), encoding="utf-8")
    _write_run_manifest(
        root,
        "sft",
        cfg,
        ["align/params.bin"],
        ["sft/model.bin", "sft/log.jsonl"] + outputs,
    )
    return decoder


def stage_candidates(cfg: TrainConfig) -> Path:
    root = data_root(cfg)
    _require(root, ["sft/model.bin"])
    ctx = build_sft_context(cfg, root)
    decoder = CaptionDecoder.load(root / "sft" / "model.bin")
    lines = []
    for f in ctx.feats:
        rec = f.record
        cond = ctx.conds[rec.id]
        prompt_ids = decoder.vocab.encode(ctx.prompts[rec.id])
        captions: list[list[str]] = []
        greedy_ids, _ = decoder.generate(cond, prompt_ids, mode="greedy")
        captions.append(decoder.vocab.decode(greedy_ids))
        attempt = 0
        temps = list(cfg.candidate_temperatures)
        while len(captions) < cfg.candidates_k and attempt < cfg.candidates_k * 6:
            temp = temps[attempt % len(temps)]
            rng = np.random.default_rng(_stage_seed(cfg, f"cand:{rec.id}:{attempt}"))
            ids, _ = decoder.generate(cond, prompt_ids, mode="sample", temperature=temp, rng=rng)
            tokens = decoder.vocab.decode(ids)
            if tokens and tokens not in captions:
                captions.append(tokens)
            attempt += 1
        if len(captions) < 2:
            continue
        cands = []
        for idx, tokens in enumerate(captions):
            t_proj = ctx.txt_encoder.encode(tokens).matrix @ ctx.params.w_t.T + ctx.params.b_t
            att = align_mod.attention_similarity(ctx.m_projs[rec.id], t_proj, ctx.params)
            cands.append(
                {
                    "id": f"c{idx}",
                    "tokens": tokens,
                    "attention": json.loads(att.to_json()),
                }
            )
        lines.append(
            json.dumps(
                {
                    "meme_id": rec.id,
                    "provenance": "sft/model.bin",
                    "cond": ctx.conds[rec.id].tolist(),
                    "prompt_tokens": ctx.prompts[rec.id],
                    "candidates": cands,
                    "config_hash": cfg.config_hash(),
                },
                sort_keys=True,
            )
        )
    out = root / "candidates" / "candidates.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(s + "\n" for s in lines), encoding="utf-8")
    _write_run_manifest(root, "candidates", cfg, ["sft/model.bin"], ["candidates/candidates.jsonl"])
    return out


def load_candidate_sets(root: Path) -> dict[str, reward_mod.CandidateSet]:
    out: dict[str, reward_mod.CandidateSet] = {}
    path = root / "candidates" / "candidates.jsonl"
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        cands = [
            reward_mod.Candidate(
                candidate_id=c["id"],
                tokens=list(c["tokens"]),
                attention=align_mod.AttentionMap(
                    token_level=np.asarray(c["attention"]["token_level"], dtype=np.float64),
                    global_=np.asarray(c["attention"]["global"], dtype=np.float64),
                    energies=np.asarray(c["attention"]["energies"], dtype=np.float64),
                ),
            )
            for c in obj["candidates"]
        ]
        out[obj["meme_id"]] = reward_mod.CandidateSet(
            meme_id=obj["meme_id"],
            candidates=cands,
            provenance=obj.get("provenance", ""),
            cond=np.asarray(obj["cond"], dtype=np.float64),
            prompt_ids=[],  # filled against the decoder vocabulary by callers
            prompt_tokens=list(obj["prompt_tokens"]),
        )
    return out


def _prior_maps(ctx: SftContext) -> dict[str, align_mod.AttentionMap]:
    maps = {}
    for f in ctx.feats:
        t_proj = f.gt_tokens @ ctx.params.w_t.T + ctx.params.b_t
        maps[f.record.id] = align_mod.attention_similarity(ctx.m_projs[f.record.id], t_proj, ctx.params)
    return maps


def build_preferences(
    cfg: TrainConfig,
    root: Path,
    candidate_sets: dict[str, reward_mod.CandidateSet],
    ctx: SftContext,
) -> list[reward_mod.PreferenceRecord]:
    """Attention rankings fused with exported human preferences when the
    annotation store holds any; attention-only otherwise."""
    priors = _prior_maps(ctx)
    attention_records = {
        meme_id: reward_mod.attention_rank(cset, priors[meme_id])
        for meme_id, cset in candidate_sets.items()
        if meme_id in priors
    }
    human_by_meme: dict[str, reward_mod.PreferenceRecord] = {}
    store_path = root / "annotate" / "responses.jsonl"
    tasks_path = root / "annotate" / "tasks.json"
    if store_path.exists() and tasks_path.exists():
        tasks = [
            annotate_mod.AnnotationTask(
                task_id=t["task_id"],
                kind=t["kind"],
                meme_id=t["meme_id"],
                candidate_ids=tuple(t["candidate_ids"]),
                captions=tuple(t["captions"]),
            )
            for t in json.loads(tasks_path.read_text(encoding="utf-8"))
        ]
        service = annotate_mod.AnnotationService(
            tasks,
            annotate_mod.ResponseStore(store_path),
            annotators=cfg.annotators,
            min_annotators=cfg.min_annotators,
        )
        human_by_meme = {r.meme_id: r for r in service.export_preferences()}
    records = []
    for meme_id in sorted(attention_records):
        att = attention_records[meme_id]
        human = human_by_meme.get(meme_id)
        if human is not None:
            records.append(reward_mod.fuse_rankings(human, att, cfg.human_weight))
        else:
            records.append(att)
    return records


def stage_train_reward(cfg: TrainConfig) -> reward_mod.RewardModel:
    root = data_root(cfg)
    _require(root, ["candidates/candidates.jsonl", "sft/model.bin"])
    ctx = build_sft_context(cfg, root)
    candidate_sets = load_candidate_sets(root)
    decoder = CaptionDecoder.load(root / "sft" / "model.bin")
    for cset in candidate_sets.values():
        cset.prompt_ids = decoder.vocab.encode(cset.prompt_tokens)
    records = build_preferences(cfg, root, candidate_sets, ctx)
    model = reward_mod.RewardModel.from_decoder(decoder, seed=_stage_seed(cfg, "reward-head"))
    model, log = reward_mod.train_reward(
        records,
        candidate_sets,
        model,
        reward_mod.RewardTrainConfig(
            steps=cfg.reward_steps,
            lr=cfg.reward_lr,
            batch_pairs=cfg.reward_batch_pairs,
            seed=_stage_seed(cfg, "reward-train"),
        ),
    )
    reward_dir = root / "reward"
    reward_dir.mkdir(parents=True, exist_ok=True)
    model.save(reward_dir / "model.bin", {"config_hash": cfg.config_hash()})
    lines = [json.dumps({**e, "config_hash": cfg.config_hash()}, sort_keys=True) for e in log]
    (reward_dir / "log.jsonl").write_text("".join(s + "\n" for s in lines), encoding="utf-8")
    prefs = [json.dumps({**r.to_dict(), "config_hash": cfg.config_hash()}, sort_keys=True) for r in records]
    (reward_dir / "preferences.jsonl").write_text("".join(s + "\n" for s in prefs), encoding="utf-8")
    _write_run_manifest(
        root,
        "train-reward",
        cfg,
        ["candidates/candidates.jsonl", "sft/model.bin"],
        ["reward/model.bin", "reward/log.jsonl", "reward/preferences.jsonl"],
    )
    return model


def stage_rl(cfg: TrainConfig) -> CaptionDecoder:
    root = data_root(cfg)
    if not (root / "reward" / "model.bin").exists():
        raise DependencyError("missing reward/model.bin; run `train-reward` first")
    _require(root, ["sft/model.bin"])
    ctx = build_sft_context(cfg, root)
    decoder = CaptionDecoder.load(root / "sft" / "model.bin")
    reward_model = reward_mod.RewardModel.load(root / "reward" / "model.bin")
    pair = rl_mod.PolicyPair.from_sft(decoder)
    examples = [
        (ctx.conds[f.record.id], decoder.vocab.encode(ctx.prompts[f.record.id]))
        for f in ctx.feats
        if f.record.split == "train"
    ] or [(ctx.conds[f.record.id], decoder.vocab.encode(ctx.prompts[f.record.id])) for f in ctx.feats]
    policy, log = rl_mod.rl_train(
        examples,
        pair,
        reward_model,
        weights=rl_mod.RlWeights(w1=cfg.w1, w2=cfg.w2),
        config=rl_mod.RlTrainConfig(
            steps=cfg.rl_steps,
            lr=cfg.rl_lr,
            samples_per_step=cfg.rl_samples_per_step,
            seed=_stage_seed(cfg, "rl-train"),
            kl_ceiling=cfg.rl_kl_ceiling,
            paper_literal_sign=cfg.paper_literal_sign,
        ),
    )
    rl_dir = root / "rl"
    rl_dir.mkdir(parents=True, exist_ok=True)
    policy.save(rl_dir / "model.bin", {"config_hash": cfg.config_hash()})
    lines = [json.dumps({**e, "config_hash": cfg.config_hash()}, sort_keys=True) for e in log]
    (rl_dir / "log.jsonl").write_text("".join(s + "\n" for s in lines), encoding="utf-8")
    _write_run_manifest(
        root, "rl", cfg, ["sft/model.bin", "reward/model.bin"], ["rl/model.bin", "rl/log.jsonl"]
    )
    return policy


def _round2(x: float) -> float:
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def stage_evaluate(cfg: TrainConfig, force: bool = False, baseline: Path | None = None) -> dict:
    root = data_root(cfg)
    _require(root, ["sft/model.bin"])
    ctx = build_sft_context(cfg, root)
    model_path = root / "rl" / "model.bin"
    if not model_path.exists():
        model_path = root / "sft" / "model.bin"
    decoder = CaptionDecoder.load(model_path)

    eval_feats = [f for f in ctx.feats if f.record.split == "test"] or ctx.feats
    candidates, references, rows = [], [], []
    for f in eval_feats:
        rec = f.record
        prompt_ids = decoder.vocab.encode(ctx.prompts[rec.id])
        ids, _ = decoder.generate(ctx.conds[rec.id], prompt_ids, mode="greedy")
        cand = decoder.vocab.decode(ids)
        candidates.append(cand)
        references.append(list(rec.caption_tokens))
        rows.append({"meme_id": rec.id, "split": rec.split, "candidate": cand, "reference": rec.caption_tokens})

    cider_scores = metrics_mod.cider(candidates, references)
    for row, cand, ref, cid in zip(rows, candidates, references, cider_scores):
        scores = metrics_mod.AutoScores(
            bleu=metrics_mod.bleu(cand, [ref]) if cand else 0.0,
            rouge_l=metrics_mod.rouge_l(cand, ref) if cand else 0.0,
            cider=cid,
            meteor=metrics_mod.meteor(cand, ref) if cand else 0.0,
        ).scaled()
        row.update(scores)
        row["config_hash"] = cfg.config_hash()

    auto_means = {
        key: float(np.mean([row[key] for row in rows])) for key in ("bleu", "rouge_l", "cider", "meteor")
    }
    human_means = None
    store_path = root / "annotate" / "responses.jsonl"
    tasks_path = root / "annotate" / "tasks.json"
    if store_path.exists() and tasks_path.exists():
        tasks = [
            annotate_mod.AnnotationTask(
                task_id=t["task_id"],
                kind=t["kind"],
                meme_id=t["meme_id"],
                candidate_ids=tuple(t["candidate_ids"]),
                captions=tuple(t["captions"]),
            )
            for t in json.loads(tasks_path.read_text(encoding="utf-8"))
        ]
        service = annotate_mod.AnnotationService(
            tasks, annotate_mod.ResponseStore(store_path), annotators=cfg.annotators
        )
        per_meme = service.rubric_means()
        if per_meme:
            human_means = {
                dim: 20.0 * float(np.mean([m[dim] for m in per_meme.values()]))
                for dim in annotate_mod.RUBRIC_DIMENSIONS
            }

    summary_cols: dict[str, float | None] = {
        "Info": None,
        "Rele": None,
        "Crea": None,
        "Humo": None,
        "HAverage": None,
        "BLEU": _round2(auto_means["bleu"]),
        "ROUGE": _round2(auto_means["rouge_l"]),
        "CIDEr": _round2(auto_means["cider"]),
        "METEOR": _round2(auto_means["meteor"]),
        "MAverage": _round2(float(np.mean(list(auto_means.values())))),
        "Average": None,
    }
    if human_means is not None:
        composite = metrics_mod.composite_score(
            [human_means[d] for d in annotate_mod.RUBRIC_DIMENSIONS],
            [auto_means[k] for k in ("bleu", "rouge_l", "cider", "meteor")],
        )
        summary_cols.update(
            {
                "Info": _round2(human_means["informativeness"]),
                "Rele": _round2(human_means["relevance"]),
                "Crea": _round2(human_means["creativity"]),
                "Humo": _round2(human_means["humor"]),
                "HAverage": composite["HAverage"],
                "MAverage": composite["MAverage"],
                "Average": composite["Average"],
            }
        )

    summary = {
        "config_hash": cfg.config_hash(),
        "model": str(model_path.relative_to(root)),
        "count": len(rows),
        "columns": summary_cols,
        "meteor_note": "exact-match alignment stage only",
    }
    if baseline is not None:
        other = json.loads(Path(baseline).read_text(encoding="utf-8"))
        if other.get("config_hash") != cfg.config_hash() and not force:
            raise ValidationError(
                "baseline report was produced under a different config hash; pass force to compare"
            )
        summary["baseline_delta"] = {
            k: None
            if summary_cols[k] is None or other["columns"].get(k) is None
            else _round2(summary_cols[k] - other["columns"][k])
            for k in summary_cols
        }

    eval_dir = root / "evaluate"
    eval_dir.mkdir(parents=True, exist_ok=True)
    (eval_dir / "report.jsonl").write_text(
        "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows), encoding="utf-8"
    )
    (eval_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    with open(eval_dir / "report.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["meme_id", "split", "bleu", "rouge_l", "cider", "meteor"])
        for row in rows:
            writer.writerow(
                [row["meme_id"], row["split"], row["bleu"], row["rouge_l"], row["cider"], row["meteor"]]
            )
    _write_run_manifest(
        root,
        "evaluate",
        cfg,
        ["sft/model.bin"],
        ["evaluate/report.jsonl", "evaluate/summary.json", "evaluate/report.csv"],
    )
    return summary


def stage_heatmap(cfg: TrainConfig, meme_id: str | None = None, token_index: int = 0) -> list[Path]:
    root = data_root(cfg)
    _require(root, ["align/params.bin"])
    ctx = build_sft_context(cfg, root)
    out_dir = root / "heatmaps"
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = [f for f in ctx.feats if meme_id is None or f.record.id == meme_id]
    if meme_id is not None and not targets:
        raise ValidationError(f"unknown meme id {meme_id!r}")
    if meme_id is None:
        targets = targets[:4]
    written = []
    for f in targets:
        t_proj = f.gt_tokens @ ctx.params.w_t.T + ctx.params.b_t
        att = align_mod.attention_similarity(ctx.m_projs[f.record.id], t_proj, ctx.params)
        img = load_image(root / "corpus", f.record)
        out = out_dir / f"{f.record.id}_tok{token_index}.png"
        align_mod.export_heatmap(
            att,
            img,
            f.record.rois,
            token_index,
            out,
            patch_grid=cfg.patch_grid,
            text_meta={"memecap_config": cfg.config_hash()},
        )
        written.append(out)
    rels = [str(p.relative_to(root)) for p in written]
    _write_run_manifest(root, "heatmap", cfg, ["align/params.bin"], rels)
    return written


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

_STAGE_FUNCS = {
    "gen-corpus": stage_gen_corpus,
    "ingest": stage_ingest,
    "segment": stage_segment,
    "augment": stage_augment,
    "align": stage_align,
    "sft": stage_sft,
    "candidates": stage_candidates,
    "train-reward": stage_train_reward,
    "rl": stage_rl,
    "evaluate": stage_evaluate,
    "heatmap": stage_heatmap,
}


def run_stage(stage: str, cfg: TrainConfig):
    """Run one pipeline stage by name; see STAGE_ORDER for the sequence."""
    if stage not in _STAGE_FUNCS:
        raise ValidationError(f"unknown stage {stage!r}; choose from {sorted(_STAGE_FUNCS)}")
    return _STAGE_FUNCS[stage](cfg)


def run_all(cfg: TrainConfig, stages: tuple[str, ...] | None = None):
    """Run the full chain (annotate-serve excluded) in order."""
    selected = stages or tuple(s for s in STAGE_ORDER if s != "annotate-serve")
    results = {}
    for stage in selected:
        results[stage] = run_stage(stage, cfg)
    return results


def artifact_checksums(root: Path) -> dict[str, str]:
    """sha256 of every artifact file under the data root (stable ordering)."""
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = _sha256(path)
    return out


def grid_search(grid: GridSpec, run_fn, objective: str) -> tuple[dict, list[dict]]:
    """Evaluate every grid combination with run_fn(combo) -> score dict and
    pick the argmax of the objective; ties resolve to the earliest combination.
    """
    combos = grid.combinations()
    table = []
    best = None
    best_score = -math.inf
    for combo in combos:
        scores = run_fn(combo)
        if objective not in scores or scores[objective] is None:
            raise ValidationError(f"objective {objective!r} not produced by the run")
        entry = {**combo, "scores": scores}
        table.append(entry)
        if scores[objective] > best_score:
            best_score = scores[objective]
            best = combo
    return best, table
