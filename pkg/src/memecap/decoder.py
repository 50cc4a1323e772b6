"""Small autoregressive caption decoder with hand-derived gradients.

Architecture: a learned conditioning row (projected pooled image features)
followed by prompt tokens, then BOS and the caption, through n_layers of
pre-LayerNorm single-head causal self-attention + ReLU MLP blocks, a final
LayerNorm, and a linear vocabulary head. Everything runs in float64 numpy;
every backward path is validated against central finite differences in the
tests, which is the point of keeping the model this small.

The same trunk serves three roles: the SFT caption decoder, the RL policy,
and (with the vocabulary head swapped for a scalar head) the reward model.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import blob
from .encode import sinusoidal_positions
from .errors import ValidationError

LN_EPS = 1e-5
NEG_INF = -1e30

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
SPECIALS = (BOS, EOS, UNK)


class Vocab:
    """Closed vocabulary with BOS/EOS/UNK specials at fixed low ids."""

    def __init__(self, words: list[str]):
        seen = dict.fromkeys(words)
        for s in SPECIALS:
            seen.pop(s, None)
        self.tokens: list[str] = list(SPECIALS) + list(seen)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.bos = self.index[BOS]
        self.eos = self.index[EOS]
        self.unk = self.index[UNK]

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, token_lists) -> "Vocab":
        words: list[str] = []
        known = set()
        for toks in token_lists:
            for t in toks:
                if t not in known:
                    known.add(t)
                    words.append(t)
        return cls(sorted(words))

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.index.get(t, self.unk) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 64
    n_layers: int = 2
    d_ff: int = 128
    cond_dim: int = 64
    max_len: int = 25  # generated caption length cap


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    y = xc * inv
    return y * g + b, (y, inv, g)


def _layer_norm_backward(dout, ctx):
    y, inv, g = ctx
    dg = (dout * y).sum(axis=0)
    db = dout.sum(axis=0)
    dy = dout * g
    dx = inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))
    return dx, dg, db


class CaptionDecoder:
    def __init__(self, vocab: Vocab, config: DecoderConfig = DecoderConfig(), seed: int = 0):
        self.vocab = vocab
        self.config = config
        rng = np.random.default_rng(seed)
        d, ff, v = config.d_model, config.d_ff, len(vocab)
        p: dict[str, np.ndarray] = {}
        p["emb"] = rng.normal(0.0, 0.5, size=(v, d))
        p["w_cond"] = rng.normal(0.0, 1.0 / np.sqrt(config.cond_dim), size=(d, config.cond_dim))
        p["b_cond"] = np.zeros(d)
        for layer in range(config.n_layers):
            k = f"l{layer}_"
            p[k + "ln1_g"] = np.ones(d)
            p[k + "ln1_b"] = np.zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                p[k + name] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
            p[k + "ln2_g"] = np.ones(d)
            p[k + "ln2_b"] = np.zeros(d)
            p[k + "w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, ff))
            p[k + "b1"] = np.zeros(ff)
            p[k + "w2"] = rng.normal(0.0, 1.0 / np.sqrt(ff), size=(ff, d))
            p[k + "b2"] = np.zeros(d)
        p["lnf_g"] = np.ones(d)
        p["lnf_b"] = np.zeros(d)
        p["w_out"] = rng.normal(0.0, 0.02, size=(d, v))
        p["b_out"] = np.zeros(v)
        self.params = p

    # -- plumbing ----------------------------------------------------------

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def clone(self) -> "CaptionDecoder":
        twin = CaptionDecoder.__new__(CaptionDecoder)
        twin.vocab = self.vocab
        twin.config = self.config
        twin.params = {k: v.copy() for k, v in self.params.items()}
        return twin

    def param_bytes(self) -> bytes:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.digest()

    def checksum(self) -> str:
        return self.param_bytes().hex()

    def save(self, path, meta: dict | None = None) -> None:
        info = {
            "vocab": self.vocab.tokens,
            "d_model": self.config.d_model,
            "n_layers": self.config.n_layers,
            "d_ff": self.config.d_ff,
            "cond_dim": self.config.cond_dim,
            "max_len": self.config.max_len,
        }
        blob.dump_arrays(path, self.params, {**info, **(meta or {})})

    @classmethod
    def load(cls, path) -> "CaptionDecoder":
        meta, arrays = blob.load_arrays(path)
        vocab = Vocab(meta["vocab"])
        config = DecoderConfig(
            d_model=meta["d_model"],
            n_layers=meta["n_layers"],
            d_ff=meta["d_ff"],
            cond_dim=meta["cond_dim"],
            max_len=meta["max_len"],
        )
        dec = cls.__new__(cls)
        dec.vocab = vocab
        dec.config = config
        dec.params = arrays
        return dec

    # -- forward / backward ------------------------------------------------

    def forward_hidden(self, ids: list[int], cond: np.ndarray):
        """Hidden states for the sequence [cond] + ids; returns (H, cache)."""
        p = self.params
        d = self.config.d_model
        cond = np.asarray(cond, dtype=np.float64)
        rows = [p["w_cond"] @ cond + p["b_cond"]]
        if ids:
            rows.append(p["emb"][list(ids)])
        x = np.vstack(rows)
        t = x.shape[0]
        x = x + sinusoidal_positions(t, d)
        scale = 1.0 / np.sqrt(d)
        causal = np.triu(np.full((t, t), NEG_INF), k=1)
        layers = []
        for layer in range(self.config.n_layers):
            k = f"l{layer}_"
            a, ln1_ctx = _layer_norm(x, p[k + "ln1_g"], p[k + "ln1_b"])
            q, kk, v = a @ p[k + "wq"], a @ p[k + "wk"], a @ p[k + "wv"]
            s = q @ kk.T * scale + causal
            s -= s.max(axis=1, keepdims=True)
            e = np.exp(s)
            att = e / e.sum(axis=1, keepdims=True)
            o = att @ v
            x_attn = x + o @ p[k + "wo"]
            b_in, ln2_ctx = _layer_norm(x_attn, p[k + "ln2_g"], p[k + "ln2_b"])
            pre = b_in @ p[k + "w1"] + p[k + "b1"]
            hh = np.maximum(pre, 0.0)
            x_out = x_attn + hh @ p[k + "w2"] + p[k + "b2"]
            layers.append(
                {"a": a, "ln1": ln1_ctx, "q": q, "k": kk, "v": v, "att": att, "o": o,
                 "x_attn": x_attn, "ln2": ln2_ctx, "b": b_in, "pre": pre, "hh": hh}
            )
            x = x_out
        h, lnf_ctx = _layer_norm(x, p["lnf_g"], p["lnf_b"])
        cache = {"ids": list(ids), "cond": cond, "layers": layers, "lnf": lnf_ctx, "scale": scale}
        return h, cache

    def backward_hidden(self, cache, d_h: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        """Accumulate parameter gradients for upstream gradient d_h on the
        final hidden states."""
        p = self.params
        scale = cache["scale"]
        dx, dg, db = _layer_norm_backward(d_h, cache["lnf"])
        grads["lnf_g"] += dg
        grads["lnf_b"] += db
        for layer in reversed(range(self.config.n_layers)):
            k = f"l{layer}_"
            ctx = cache["layers"][layer]
            # MLP block
            d_hh = dx @ p[k + "w2"].T
            grads[k + "w2"] += ctx["hh"].T @ dx
            grads[k + "b2"] += dx.sum(axis=0)
            d_pre = d_hh * (ctx["pre"] > 0.0)
            grads[k + "w1"] += ctx["b"].T @ d_pre
            grads[k + "b1"] += d_pre.sum(axis=0)
            d_b = d_pre @ p[k + "w1"].T
            d_x_attn, dg, db = _layer_norm_backward(d_b, ctx["ln2"])
            grads[k + "ln2_g"] += dg
            grads[k + "ln2_b"] += db
            d_x_attn = d_x_attn + dx  # residual
            # attention block
            d_o_wo = d_x_attn
            grads[k + "wo"] += ctx["o"].T @ d_o_wo
            d_o = d_o_wo @ p[k + "wo"].T
            att = ctx["att"]
            d_att = d_o @ ctx["v"].T
            d_v = att.T @ d_o
            d_s = att * (d_att - (d_att * att).sum(axis=1, keepdims=True))
            d_q = d_s @ ctx["k"] * scale
            d_k = d_s.T @ ctx["q"] * scale
            grads[k + "wq"] += ctx["a"].T @ d_q
            grads[k + "wk"] += ctx["a"].T @ d_k
            grads[k + "wv"] += ctx["a"].T @ d_v
            d_a = d_q @ p[k + "wq"].T + d_k @ p[k + "wk"].T + d_v @ p[k + "wv"].T
            d_x, dg, db = _layer_norm_backward(d_a, ctx["ln1"])
            grads[k + "ln1_g"] += dg
            grads[k + "ln1_b"] += db
            dx = d_x + d_x_attn  # residual
        # embedding / conditioning rows
        d_cond_row = dx[0]
        grads["w_cond"] += np.outer(d_cond_row, cache["cond"])
        grads["b_cond"] += d_cond_row
        for row, tok in enumerate(cache["ids"], start=1):
            grads["emb"][tok] += dx[row]

    # -- language modelling ------------------------------------------------

    def _step_mask(self, caption_step: int) -> np.ndarray:
        """Additive logit mask for the caption_step-th generated token.
        BOS and UNK are never emitted; EOS is banned on the first step so
        captions have at least one token."""
        mask = np.zeros(len(self.vocab))
        mask[self.vocab.bos] = NEG_INF
        mask[self.vocab.unk] = NEG_INF
        if caption_step == 0:
            mask[self.vocab.eos] = NEG_INF
        return mask

    def _sequence(self, prompt_ids: list[int], cap_ids: list[int]) -> list[int]:
        return list(prompt_ids) + [self.vocab.bos] + list(cap_ids)

    def caption_nll(self, cond, prompt_ids, cap_ids):
        """Mean negative log-likelihood of cap_ids + EOS given conditioning.

        Returns (nll, cache bundle for caption_nll_backward).
        """
        if len(cap_ids) > self.config.max_len:
            raise ValidationError(
                f"caption of {len(cap_ids)} tokens exceeds the {self.config.max_len}-token limit"
            )
        ids = self._sequence(prompt_ids, cap_ids)
        h, cache = self.forward_hidden(ids, cond)
        start = 1 + len(prompt_ids)  # row of BOS in the hidden sequence
        targets = list(cap_ids) + [self.vocab.eos]
        rows = h[start : start + len(targets)]
        logits = rows @ self.params["w_out"] + self.params["b_out"]
        for step in range(len(targets)):
            logits[step] += self._step_mask(step)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        logp = shifted[np.arange(len(targets)), targets] - logz
        nll = -float(logp.mean())
        bundle = {
            "cache": cache,
            "rows": rows,
            "probs": np.exp(shifted - logz[:, None]),
            "targets": targets,
            "start": start,
        }
        return nll, bundle

    def caption_nll_backward(self, bundle, grads: dict[str, np.ndarray], coef: float = 1.0) -> None:
        targets = bundle["targets"]
        n = len(targets)
        d_logits = bundle["probs"].copy()
        d_logits[np.arange(n), targets] -= 1.0
        d_logits *= coef / n
        grads["w_out"] += bundle["rows"].T @ d_logits
        grads["b_out"] += d_logits.sum(axis=0)
        d_rows = d_logits @ self.params["w_out"].T
        h_shape = (1 + len(bundle["cache"]["ids"]), self.config.d_model)
        d_h = np.zeros(h_shape)
        d_h[bundle["start"] : bundle["start"] + n] = d_rows
        self.backward_hidden(bundle["cache"], d_h, grads)

    def caption_log_probs(self, cond, prompt_ids, cap_ids, ended_with_eos: bool = True) -> np.ndarray:
        """Per-token log-probabilities of an emitted caption (EOS included
        when the caption terminated with it)."""
        ids = self._sequence(prompt_ids, cap_ids)
        h, _ = self.forward_hidden(ids, cond)
        start = 1 + len(prompt_ids)
        targets = list(cap_ids) + ([self.vocab.eos] if ended_with_eos else [])
        rows = h[start : start + len(targets)]
        logits = rows @ self.params["w_out"] + self.params["b_out"]
        for step in range(len(targets)):
            logits[step] += self._step_mask(step)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        return shifted[np.arange(len(targets)), targets] - logz

    def log_prob_backward(self, cond, prompt_ids, cap_ids, ended_with_eos, grads, coef: float = 1.0) -> None:
        """Accumulate coef * d(sum log p(caption))/d(params)."""
        ids = self._sequence(prompt_ids, cap_ids)
        h, cache = self.forward_hidden(ids, cond)
        start = 1 + len(prompt_ids)
        targets = list(cap_ids) + ([self.vocab.eos] if ended_with_eos else [])
        n = len(targets)
        rows = h[start : start + n]
        logits = rows @ self.params["w_out"] + self.params["b_out"]
        for step in range(n):
            logits[step] += self._step_mask(step)
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted - np.log(np.exp(shifted).sum(axis=1))[:, None])
        d_logits = -probs
        d_logits[np.arange(n), targets] += 1.0
        d_logits *= coef
        grads["w_out"] += rows.T @ d_logits
        grads["b_out"] += d_logits.sum(axis=0)
        d_rows = d_logits @ self.params["w_out"].T
        d_h = np.zeros((1 + len(ids), self.config.d_model))
        d_h[start : start + n] = d_rows
        self.backward_hidden(cache, d_h, grads)

    # -- generation ----------------------------------------------------------

    def next_token_distribution(self, cond, prompt_ids, cap_so_far: list[int]) -> np.ndarray:
        ids = self._sequence(prompt_ids, cap_so_far)
        h, _ = self.forward_hidden(ids, cond)
        logits = h[-1] @ self.params["w_out"] + self.params["b_out"]
        logits += self._step_mask(len(cap_so_far))
        shifted = logits - logits.max()
        e = np.exp(shifted)
        return e / e.sum()

    def generate(
        self,
        cond,
        prompt_ids: list[int],
        mode: str = "greedy",
        temperature: float = 1.0,
        rng: np.random.Generator | None = None,
        max_len: int | None = None,
    ) -> tuple[list[int], bool]:
        """Decode up to max_len tokens; returns (caption ids, ended_with_eos).

        Greedy decoding (or temperature 0) is deterministic; sampling draws
        from the temperature-scaled distribution using the supplied rng.
        """
        if len(self.vocab) <= len(SPECIALS):
            raise ValidationError("vocabulary holds no caption words")
        if mode not in ("greedy", "sample"):
            raise ValidationError(f"unknown decode mode {mode!r}")
        if mode == "sample" and temperature < 0:
            raise ValidationError("temperature must be non-negative")
        limit = self.config.max_len if max_len is None else min(max_len, self.config.max_len)
        greedy = mode == "greedy" or temperature == 0.0
        if not greedy and rng is None:
            raise ValidationError("sampling requires an rng")
        cap: list[int] = []
        for _ in range(limit):
            ids = self._sequence(prompt_ids, cap)
            h, _ = self.forward_hidden(ids, cond)
            logits = h[-1] @ self.params["w_out"] + self.params["b_out"]
            logits += self._step_mask(len(cap))
            if greedy:
                tok = int(np.argmax(logits))
            else:
                z = logits / temperature
                z -= z.max()
                probs = np.exp(z)
                probs /= probs.sum()
                tok = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
                tok = min(tok, len(probs) - 1)
            if tok == self.vocab.eos:
                return cap, True
            cap.append(tok)
        return cap, False


def enumerate_captions(decoder: CaptionDecoder, cond, prompt_ids, max_len: int):
    """All captions the sampler can emit up to max_len, with probabilities.

    Yields (cap_ids tuple, ended_with_eos, log_prob); the probabilities sum
    to 1 over the enumeration, which makes exact expectation oracles possible
    on toy vocabularies.
    """
    results = []

    def walk(cap: list[int], logp: float):
        if len(cap) == max_len:
            results.append((tuple(cap), False, logp))
            return
        probs = decoder.next_token_distribution(cond, prompt_ids, cap)
        for tok, prob in enumerate(probs):
            if prob <= 0.0:
                continue
            if tok == decoder.vocab.eos:
                results.append((tuple(cap), True, logp + float(np.log(prob))))
            else:
                walk(cap + [tok], logp + float(np.log(prob)))

    walk([], 0.0)
    return results
