import numpy as np
import pytest

from conftest import relative_grad_error
from memecap.align import AttentionMap
from memecap.decoder import DecoderConfig, Vocab
from memecap.errors import ValidationError
from memecap.reward import (
    Candidate,
    CandidateSet,
    PreferenceRecord,
    RewardModel,
    RewardTrainConfig,
    attention_alignment_score,
    attention_rank,
    fuse_rankings,
    jensen_shannon_divergence,
    krippendorff_alpha,
    pairwise_ranking_loss,
    ranking_pairs,
    train_reward,
    usable_preferences,
)


def map_from_token_level(token_level: np.ndarray) -> AttentionMap:
    token_level = np.asarray(token_level, dtype=np.float64)
    return AttentionMap(
        token_level=token_level,
        global_=token_level.mean(axis=0),
        energies=np.zeros_like(token_level),
    )


def uniform_map(n_areas, n_tokens):
    return map_from_token_level(np.full((n_areas, n_tokens), 1.0 / n_tokens))


# -- attention ranking ----------------------------------------------------------


def test_jsd_bounds_and_zero(rng):
    p = rng.random(5)
    p /= p.sum()
    assert jensen_shannon_divergence(p, p) == 0.0
    q = rng.random(5)
    q /= q.sum()
    assert 0.0 <= jensen_shannon_divergence(p, q) <= 1.0
    disjoint_p = np.array([1.0, 0.0])
    disjoint_q = np.array([0.0, 1.0])
    assert jensen_shannon_divergence(disjoint_p, disjoint_q) == pytest.approx(1.0)


def test_exact_match_candidate_ranks_top(rng):
    prior = map_from_token_level(np.array([[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]]))
    exact = Candidate("c_exact", ["x", "y"], attention=prior)
    rival_raw = np.array([[0.1, 0.9], [0.9, 0.1], [0.5, 0.5]])
    rival = Candidate("c_rival", ["x", "z"], attention=map_from_token_level(rival_raw))
    cset = CandidateSet("m0", [exact, rival])
    record = attention_rank(cset, prior)
    assert record.ordering[-1] == "c_exact"
    assert attention_alignment_score(prior, prior) == 1.0
    assert record.source == "attention"


def test_identical_maps_tie_broken_by_id(rng):
    shared = uniform_map(2, 3)
    cands = [Candidate("b", ["1"], shared), Candidate("a", ["2"], shared), Candidate("c", ["3"], shared)]
    record = attention_rank(CandidateSet("m", cands), uniform_map(2, 3))
    assert record.ordering == ["a", "b", "c"]


def test_attention_rank_brute_force_oracle(rng):
    prior_tl = rng.random((3, 4))
    prior_tl /= prior_tl.sum(axis=1, keepdims=True)
    prior = map_from_token_level(prior_tl)
    cands = []
    for i in range(3):
        tl = rng.random((3, 4))
        tl /= tl.sum(axis=1, keepdims=True)
        cands.append(Candidate(f"c{i}", [f"t{i}", "u", "v", "w"], map_from_token_level(tl)))
    record = attention_rank(CandidateSet("m", cands), prior)

    def brute_score(cand):
        scores = []
        for j in range(4):
            p = cand.attention.token_level[:, j]
            p = p / p.sum()
            q = prior.token_level[:, j]
            q = q / q.sum()
            m = (p + q) / 2
            def kl2(a, b):
                mask = a > 0
                return float((a[mask] * np.log2(a[mask] / b[mask])).sum())
            scores.append(1.0 - (0.5 * kl2(p, m) + 0.5 * kl2(q, m)))
        return float(np.mean(scores))

    expected = sorted(cands, key=lambda c: (brute_score(c), c.candidate_id))
    assert record.ordering == [c.candidate_id for c in expected]


def test_attention_rank_invariant_to_candidate_order(rng):
    prior = uniform_map(2, 2)
    tls = [rng.random((2, 2)) for _ in range(4)]
    tls = [t / t.sum(axis=1, keepdims=True) for t in tls]
    cands = [Candidate(f"c{i}", [f"w{i}"], map_from_token_level(t)) for i, t in enumerate(tls)]
    a = attention_rank(CandidateSet("m", cands), prior)
    b = attention_rank(CandidateSet("m", list(reversed(cands))), prior)
    assert a.ordering == b.ordering


def test_area_count_mismatch_rejected(rng):
    prior = uniform_map(3, 2)
    cand = Candidate("c0", ["x"], uniform_map(2, 2))
    other = Candidate("c1", ["y"], uniform_map(2, 2))
    with pytest.raises(ValidationError, match="area count"):
        attention_rank(CandidateSet("m", [cand, other]), prior)


# -- fusion ------------------------------------------------------------------------


def _pref(meme, ordering, source="human", agreement=0.9):
    return PreferenceRecord(meme_id=meme, ordering=ordering, source=source, agreement=agreement)


def test_fusion_degenerate_weights():
    human = _pref("m", ["a", "b", "c"])
    attn = _pref("m", ["c", "a", "b"], source="attention", agreement=None)
    assert fuse_rankings(human, attn, 1.0).ordering == human.ordering
    assert fuse_rankings(human, attn, 0.0).ordering == attn.ordering


def test_fusion_borda_arithmetic():
    human = _pref("m", ["a", "b", "c"])  # a=0 b=1 c=2
    attn = _pref("m", ["c", "b", "a"], source="attention", agreement=None)  # c=0 b=1 a=2
    fused = fuse_rankings(human, attn, 0.5)
    # scores: a = 1.0, b = 1.0, c = 1.0 -> tie broken by id
    assert fused.ordering == ["a", "b", "c"]
    human2 = _pref("m", ["b", "a", "c"])  # b=0 a=1 c=2
    fused2 = fuse_rankings(human2, attn, 0.5)
    # a: .5*1+.5*2=1.5, b: .5*0+.5*1=0.5, c: .5*2+.5*0=1.0
    assert fused2.ordering == ["b", "c", "a"]
    assert fused2.source == "fused"


def test_fusion_candidate_set_mismatch():
    with pytest.raises(ValidationError):
        fuse_rankings(_pref("m", ["a", "b"]), _pref("m", ["a", "c"], source="attention", agreement=None))


# -- ranking pairs -------------------------------------------------------------------


def test_ranking_pairs_counts():
    assert len(ranking_pairs(["a", "b"])) == 1
    pairs4 = ranking_pairs(["a", "b", "c", "d"])
    assert len(pairs4) == 6


def test_ranking_pairs_cover_all_unordered_pairs():
    ordering = ["w", "x", "y", "z"]
    pairs = ranking_pairs(ordering)
    seen = {frozenset(p) for p in pairs}
    expected = {frozenset((a, b)) for i, a in enumerate(ordering) for b in ordering[i + 1 :]}
    assert seen == expected
    for win, lose in pairs:
        assert ordering.index(win) > ordering.index(lose)


# -- pairwise ranking loss --------------------------------------------------------------


def reward_fixture(rng, seed=0):
    vocab = Vocab.build([["a", "b", "c", "d"]])
    model = RewardModel(vocab, DecoderConfig(d_model=8, n_layers=1, d_ff=12, cond_dim=4), seed=seed)
    cond = rng.normal(size=4)
    pairs = [
        (vocab.encode(["a", "b"]), vocab.encode(["c"])),
        (vocab.encode(["d"]), vocab.encode(["b", "a"])),
    ]
    return model, (cond, vocab.encode(["a"])), pairs


def test_equal_rewards_ln2(rng):
    model, x, _ = reward_fixture(rng)
    for k, v in model.trunk.params.items():
        v[:] = 0.0
    model.head["v_head"][:] = 0.0
    model.head["b_head"][:] = 0.0
    pairs = [(model.trunk.vocab.encode(["a"]), model.trunk.vocab.encode(["b"]))]
    loss, _ = pairwise_ranking_loss(model, x, pairs, with_grads=False)
    assert abs(loss - np.log(2.0)) <= 1e-9


def test_margin_one_loss_value(rng):
    class StubModel:
        def score_with_cache(self, cond, prompt_ids, cap_ids):
            # winner captions are longer in this fixture: margin exactly +1
            return (1.0 if len(cap_ids) == 2 else 0.0), None

    pairs = [([0, 1], [0]), ([2, 3], [1])]
    loss, _ = pairwise_ranking_loss(StubModel(), (None, []), pairs, with_grads=False)
    assert loss == pytest.approx(float(np.log1p(np.exp(-1.0))), abs=1e-12)
    assert loss == pytest.approx(0.313262, abs=1e-6)


def test_margin_invariance_and_duplication(rng):
    model, x, pairs = reward_fixture(rng)
    loss, _ = pairwise_ranking_loss(model, x, pairs, with_grads=False)
    loss_dup, _ = pairwise_ranking_loss(model, x, pairs + pairs, with_grads=False)
    assert loss_dup == pytest.approx(loss, abs=1e-12)
    model.head["b_head"][0] += 123.456  # constant shift of every reward
    shifted, _ = pairwise_ranking_loss(model, x, pairs, with_grads=False)
    assert shifted == pytest.approx(loss, abs=1e-9)


def test_margins_to_infinity_loss_to_zero(rng):
    losses = [float(np.log1p(np.exp(-m))) for m in (0.0, 1.0, 3.0, 10.0, 30.0)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-12


def test_ranking_loss_gradients_finite_differences(rng):
    model, x, pairs = reward_fixture(rng, seed=3)
    loss, grads = pairwise_ranking_loss(model, x, pairs)
    eps = 1e-5
    analytic, numeric = {}, {}
    for name, p in model.all_params().items():
        coords = [tuple(rng.integers(0, s) for s in p.shape) for _ in range(min(4, p.size))]
        a = np.zeros_like(p)
        g = np.zeros_like(p)
        for idx in coords:
            orig = p[idx]
            p[idx] = orig + eps
            lp, _ = pairwise_ranking_loss(model, x, pairs, with_grads=False)
            p[idx] = orig - eps
            lm, _ = pairwise_ranking_loss(model, x, pairs, with_grads=False)
            p[idx] = orig
            g[idx] = (lp - lm) / (2 * eps)
            a[idx] = grads[name][idx]
        analytic[name], numeric[name] = a, g
    assert relative_grad_error(analytic, numeric) < 1e-4


# -- training -----------------------------------------------------------------------------


def planted_sets(rng, n, start=0):
    words = [f"w{i}" for i in range(10)]
    vocab = Vocab.build([words + ["good"]])
    sets, records = {}, []
    for i in range(start, start + n):
        cands = []
        for ci, good_count in enumerate((0, 1, 2, 3)):
            toks = ["good"] * good_count + [words[int(rng.integers(10))] for _ in range(6 - good_count)]
            perm = rng.permutation(len(toks))
            cands.append(Candidate(f"c{ci}", [toks[j] for j in perm]))
        cset = CandidateSet(f"m{i}", cands, cond=rng.normal(size=8))
        sets[cset.meme_id] = cset
        records.append(PreferenceRecord(cset.meme_id, [f"c{j}" for j in range(4)], source="attention"))
    return vocab, sets, records


def test_planted_preferences_held_out_accuracy(rng):
    vocab, train_sets, train_recs = planted_sets(rng, 24)
    _, held_sets, _ = planted_sets(rng, 8, start=100)
    model = RewardModel(vocab, DecoderConfig(d_model=32, n_layers=1, d_ff=64, cond_dim=8), seed=1)
    model, _ = train_reward(train_recs, train_sets, model, RewardTrainConfig(steps=500, lr=0.05, seed=5))
    correct = total = 0
    for cset in held_sets.values():
        scores = {c.candidate_id: model.score(cset.cond, [], vocab.encode(c.tokens)) for c in cset.candidates}
        for win, lose in ranking_pairs([f"c{j}" for j in range(4)]):
            total += 1
            correct += scores[win] > scores[lose]
    assert correct / total >= 0.95


def test_single_pair_overfits(rng):
    vocab, sets, _ = planted_sets(rng, 1)
    cset = next(iter(sets.values()))
    records = [PreferenceRecord(cset.meme_id, ["c0", "c1"][:2], source="attention")]
    small = {cset.meme_id: CandidateSet(cset.meme_id, cset.candidates[:2], cond=cset.cond)}
    model = RewardModel(vocab, DecoderConfig(d_model=16, n_layers=1, d_ff=32, cond_dim=8), seed=2)
    model, log = train_reward(records, small, model, RewardTrainConfig(steps=120, lr=0.05, seed=3))
    pairs = [(vocab.encode(small[cset.meme_id].by_id("c1").tokens), vocab.encode(small[cset.meme_id].by_id("c0").tokens))]
    loss, _ = pairwise_ranking_loss(model, (cset.cond, []), pairs, with_grads=False)
    assert loss < 0.1


def test_training_bit_deterministic(rng):
    vocab, sets, records = planted_sets(rng, 4)
    results = []
    for _ in range(2):
        model = RewardModel(vocab, DecoderConfig(d_model=16, n_layers=1, d_ff=32, cond_dim=8), seed=4)
        model, _ = train_reward(records, sets, model, RewardTrainConfig(steps=40, lr=0.05, seed=9))
        results.append(model.checksum())
    assert results[0] == results[1]


def test_agreement_gate_filters_human_records():
    low = PreferenceRecord("m0", ["a", "b"], source="human", agreement=0.5)
    high = PreferenceRecord("m1", ["a", "b"], source="human", agreement=0.9)
    attn = PreferenceRecord("m2", ["a", "b"], source="attention")
    kept = usable_preferences([low, high, attn])
    assert {r.meme_id for r in kept} == {"m1", "m2"}
    with pytest.raises(ValidationError, match="no usable preferences"):
        usable_preferences([low])


def test_reward_model_serialization(tmp_path, rng):
    vocab, sets, records = planted_sets(rng, 2)
    model = RewardModel(vocab, DecoderConfig(d_model=16, n_layers=1, d_ff=32, cond_dim=8), seed=6)
    model.save(tmp_path / "rm.bin")
    again = RewardModel.load(tmp_path / "rm.bin")
    assert again.checksum() == model.checksum()
    cond = rng.normal(size=8)
    caption = vocab.encode(["good", "w1"])
    assert again.score(cond, [], caption) == pytest.approx(model.score(cond, [], caption), abs=1e-12)


# -- krippendorff alpha ---------------------------------------------------------------------


def brute_alpha(arr, level):
    units = [arr[~np.isnan(arr[:, j]), j] for j in range(arr.shape[1])]
    units = [u for u in units if len(u) >= 2]
    vals = sorted({float(v) for u in units for v in u})
    vi = {v: i for i, v in enumerate(vals)}
    k = len(vals)
    o = np.zeros((k, k))
    for u in units:
        m = len(u)
        for a in range(m):
            for b in range(m):
                if a != b:
                    o[vi[float(u[a])], vi[float(u[b])]] += 1.0 / (m - 1)
    marg = o.sum(axis=1)
    n = marg.sum()

    def d2(c, d):
        if c == d:
            return 0.0
        if level == "nominal":
            return 1.0
        if level == "interval":
            return (vals[c] - vals[d]) ** 2
        lo, hi = min(c, d), max(c, d)
        return (marg[lo : hi + 1].sum() - (marg[lo] + marg[hi]) / 2.0) ** 2

    d_o = sum(o[c, d] * d2(c, d) for c in range(k) for d in range(k)) / n
    d_e = sum(marg[c] * marg[d] * d2(c, d) for c in range(k) for d in range(k)) / (n * (n - 1))
    return 1.0 - d_o / d_e


def test_alpha_matches_coincidence_oracle():
    nan = np.nan
    data = np.array(
        [
            [1, 2, 3, 3, 2, 1, 4, 1, 2, nan, nan, nan],
            [1, 2, 3, 3, 2, 2, 4, 1, 2, 5, nan, 3],
            [nan, 3, 3, 3, 2, 3, 4, 2, 2, 5, 1, nan],
            [1, 2, 3, 3, 2, 4, 4, 1, 2, 5, 1, nan],
        ]
    )
    for level in ("ordinal", "nominal", "interval"):
        assert krippendorff_alpha(data, level) == pytest.approx(brute_alpha(data, level), abs=1e-9)


def test_alpha_perfect_agreement():
    data = np.array([[1, 2, 3, 4, 5], [1, 2, 3, 4, 5], [1, 2, 3, 4, 5]], dtype=float)
    assert krippendorff_alpha(data) == 1.0


def test_alpha_independent_ratings_near_zero():
    rng = np.random.default_rng(5)
    data = rng.integers(1, 6, size=(3, 400)).astype(float)
    assert abs(krippendorff_alpha(data)) <= 0.1


def test_alpha_requires_pairable_items():
    data = np.array([[1.0, np.nan], [np.nan, 2.0]])
    with pytest.raises(ValidationError):
        krippendorff_alpha(data)
    with pytest.raises(ValidationError):
        krippendorff_alpha(np.array([[1.0, 2.0]]))
