"""Conditional sentence generator: a 2-layer, 4-head, 64-dim pre-norm
causal transformer with learned positions, an affine 1024->64 prefix
projector for region conditioning, and an output projection tied to the
token embedding table. Forward and backward passes are written out by
hand so gradients can be verified against central differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .errors import DimensionError, InputError
from .metrics import tokenize
from .optim import AdamWConfig, AdamWState, PlateauScheduler, adamw_step, plateau_step

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

EMBED_DIM = 64
N_HEADS = 4
HEAD_DIM = EMBED_DIM // N_HEADS
N_LAYERS = 2
FFN_DIM = 256
FEATURE_DIM = 1024


@dataclass
class Vocab:
    tokens: list[str]

    def __post_init__(self):
        if list(self.tokens[:4]) != list(RESERVED):
            raise InputError("vocab must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise InputError("vocab tokens must be unique")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: list[str]) -> "Vocab":
        seen = sorted({t for text in texts for t in tokenize(text)})
        return cls(list(RESERVED) + [t for t in seen if t not in RESERVED])

    def encode(self, text: str) -> list[int]:
        return [self._index.get(t, UNK) for t in tokenize(text)]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i > UNK)


@dataclass
class GenLimits:
    max_tokens: int

    def __post_init__(self):
        if self.max_tokens < 1:
            raise InputError("max_tokens must be at least 1")


def avg_tokens_per_report(corpus: list[str], vocab: Vocab) -> int:
    """Mean tokenized report length, rounded half away from zero."""
    if not corpus:
        raise InputError("empty corpus")
    del vocab  # tokenization is vocabulary-independent
    mean = sum(len(tokenize(t)) for t in corpus) / len(corpus)
    return int(math.floor(mean + 0.5))


def decoder_layout(vocab_size: int, max_len: int) -> nnops.ParamLayout:
    entries: list[tuple[str, tuple[int, ...]]] = [
        ("gen.embed", (vocab_size, EMBED_DIM)),
        ("gen.pos", (max_len, EMBED_DIM)),
        ("gen.prefix.weight", (FEATURE_DIM, EMBED_DIM)),
        ("gen.prefix.bias", (EMBED_DIM,)),
    ]
    for i in range(N_LAYERS):
        p = f"gen.block{i}"
        entries += [
            (f"{p}.ln1.gamma", (EMBED_DIM,)), (f"{p}.ln1.beta", (EMBED_DIM,)),
            (f"{p}.attn.wq", (EMBED_DIM, EMBED_DIM)), (f"{p}.attn.bq", (EMBED_DIM,)),
            (f"{p}.attn.wk", (EMBED_DIM, EMBED_DIM)), (f"{p}.attn.bk", (EMBED_DIM,)),
            (f"{p}.attn.wv", (EMBED_DIM, EMBED_DIM)), (f"{p}.attn.bv", (EMBED_DIM,)),
            (f"{p}.attn.wo", (EMBED_DIM, EMBED_DIM)), (f"{p}.attn.bo", (EMBED_DIM,)),
            (f"{p}.ln2.gamma", (EMBED_DIM,)), (f"{p}.ln2.beta", (EMBED_DIM,)),
            (f"{p}.ffn.w1", (EMBED_DIM, FFN_DIM)), (f"{p}.ffn.b1", (FFN_DIM,)),
            (f"{p}.ffn.w2", (FFN_DIM, EMBED_DIM)), (f"{p}.ffn.b2", (EMBED_DIM,)),
        ]
    entries += [("gen.lnf.gamma", (EMBED_DIM,)), ("gen.lnf.beta", (EMBED_DIM,))]
    return nnops.ParamLayout(entries)


def _init_scale(name: str, shape) -> float:
    if name.endswith((".gamma",)):
        return 0.0  # set to 1 afterwards
    if len(shape) >= 2:
        return 1.0 / math.sqrt(shape[0])
    return 0.0


@dataclass
class TinyDecoder:
    vocab_size: int
    max_len: int
    params: np.ndarray

    @classmethod
    def init(cls, vocab_size: int, max_len: int, seed: int) -> "TinyDecoder":
        layout = decoder_layout(vocab_size, max_len)
        rng = np.random.default_rng(seed)
        params = layout.init_vector(rng, scale_of=_init_scale)
        views = layout.views(params)
        for name, _ in layout.entries:
            if name.endswith(".gamma"):
                views[name][...] = 1.0
        views["gen.embed"][...] = rng.normal(0.0, 0.05, size=views["gen.embed"].shape)
        views["gen.pos"][...] = rng.normal(0.0, 0.05, size=views["gen.pos"].shape)
        return cls(vocab_size, max_len, params)

    @property
    def layout(self) -> nnops.ParamLayout:
        return decoder_layout(self.vocab_size, self.max_len)


def _forward(views: dict, feature: np.ndarray, ids: np.ndarray):
    """Runs the decoder over [prefix] + tokens; returns (logits, tape)."""
    s = ids.shape[0] + 1
    x = np.empty((s, EMBED_DIM))
    x[0] = feature @ views["gen.prefix.weight"] + views["gen.prefix.bias"]
    x[1:] = views["gen.embed"][ids]
    x = x + views["gen.pos"][:s]
    mask = np.triu(np.full((s, s), -1e30), k=1)
    tape = {"x0": x, "ids": ids, "feature": feature, "blocks": []}
    for i in range(N_LAYERS):
        p = f"gen.block{i}"
        a_in, ln1_cache = nnops.layer_norm(x, views[f"{p}.ln1.gamma"], views[f"{p}.ln1.beta"])
        q = (a_in @ views[f"{p}.attn.wq"] + views[f"{p}.attn.bq"])
        k = (a_in @ views[f"{p}.attn.wk"] + views[f"{p}.attn.bk"])
        v = (a_in @ views[f"{p}.attn.wv"] + views[f"{p}.attn.bv"])
        qh = q.reshape(s, N_HEADS, HEAD_DIM).transpose(1, 0, 2)
        kh = k.reshape(s, N_HEADS, HEAD_DIM).transpose(1, 0, 2)
        vh = v.reshape(s, N_HEADS, HEAD_DIM).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(HEAD_DIM) + mask
        attn = nnops.softmax(scores, axis=-1)
        ctx = (attn @ vh).transpose(1, 0, 2).reshape(s, EMBED_DIM)
        attn_out = ctx @ views[f"{p}.attn.wo"] + views[f"{p}.attn.bo"]
        x_mid = x + attn_out
        f_in, ln2_cache = nnops.layer_norm(x_mid, views[f"{p}.ln2.gamma"], views[f"{p}.ln2.beta"])
        z1 = f_in @ views[f"{p}.ffn.w1"] + views[f"{p}.ffn.b1"]
        h1 = nnops.relu(z1)
        ff = h1 @ views[f"{p}.ffn.w2"] + views[f"{p}.ffn.b2"]
        tape["blocks"].append({"x": x, "a_in": a_in, "ln1": ln1_cache, "qh": qh,
                               "kh": kh, "vh": vh, "attn": attn, "ctx": ctx,
                               "x_mid": x_mid, "f_in": f_in, "ln2": ln2_cache,
                               "z1": z1, "h1": h1})
        x = x_mid + ff
    hn, lnf_cache = nnops.layer_norm(x, views["gen.lnf.gamma"], views["gen.lnf.beta"])
    tape["lnf"] = lnf_cache
    tape["hn"] = hn
    logits = hn @ views["gen.embed"].T
    return logits, tape


def _backward(views: dict, gviews: dict, tape: dict, dlogits: np.ndarray) -> None:
    """Accumulates parameter gradients for one sequence into gviews."""
    hn = tape["hn"]
    gviews["gen.embed"][...] += dlogits.T @ hn
    dhn = dlogits @ views["gen.embed"]
    dx, dgf, dbf = nnops.layer_norm_backward(dhn, tape["lnf"])
    gviews["gen.lnf.gamma"][...] += dgf
    gviews["gen.lnf.beta"][...] += dbf
    s = hn.shape[0]
    for i in reversed(range(N_LAYERS)):
        p = f"gen.block{i}"
        blk = tape["blocks"][i]
        # feed-forward branch
        dh1, dw2, db2 = nnops.affine_backward(blk["h1"], views[f"{p}.ffn.w2"], dx)
        gviews[f"{p}.ffn.w2"][...] += dw2
        gviews[f"{p}.ffn.b2"][...] += db2
        dz1 = nnops.relu_backward(blk["z1"], dh1)
        df_in, dw1, db1 = nnops.affine_backward(blk["f_in"], views[f"{p}.ffn.w1"], dz1)
        gviews[f"{p}.ffn.w1"][...] += dw1
        gviews[f"{p}.ffn.b1"][...] += db1
        dx_mid, dg2, db2n = nnops.layer_norm_backward(df_in, blk["ln2"])
        gviews[f"{p}.ln2.gamma"][...] += dg2
        gviews[f"{p}.ln2.beta"][...] += db2n
        dx_mid = dx_mid + dx
        # attention branch
        dctx, dwo, dbo = nnops.affine_backward(blk["ctx"], views[f"{p}.attn.wo"], dx_mid)
        gviews[f"{p}.attn.wo"][...] += dwo
        gviews[f"{p}.attn.bo"][...] += dbo
        dctx_h = dctx.reshape(s, N_HEADS, HEAD_DIM).transpose(1, 0, 2)
        attn, vh = blk["attn"], blk["vh"]
        dattn = dctx_h @ vh.transpose(0, 2, 1)
        dvh = attn.transpose(0, 2, 1) @ dctx_h
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores /= math.sqrt(HEAD_DIM)
        dqh = dscores @ blk["kh"]
        dkh = dscores.transpose(0, 2, 1) @ blk["qh"]
        dq = dqh.transpose(1, 0, 2).reshape(s, EMBED_DIM)
        dk = dkh.transpose(1, 0, 2).reshape(s, EMBED_DIM)
        dv = dvh.transpose(1, 0, 2).reshape(s, EMBED_DIM)
        a_in = blk["a_in"]
        da_in = np.zeros_like(a_in)
        for w_name, b_name, d in ((f"{p}.attn.wq", f"{p}.attn.bq", dq),
                                  (f"{p}.attn.wk", f"{p}.attn.bk", dk),
                                  (f"{p}.attn.wv", f"{p}.attn.bv", dv)):
            dai, dw, db = nnops.affine_backward(a_in, views[w_name], d)
            gviews[w_name][...] += dw
            gviews[b_name][...] += db
            da_in += dai
        dx_res, dg1, db1n = nnops.layer_norm_backward(da_in, blk["ln1"])
        gviews[f"{p}.ln1.gamma"][...] += dg1
        gviews[f"{p}.ln1.beta"][...] += db1n
        dx = dx_mid + dx_res
    gviews["gen.pos"][:s] += dx
    ids = tape["ids"]
    np.add.at(gviews["gen.embed"], ids, dx[1:])
    feature = tape["feature"]
    gviews["gen.prefix.weight"][...] += feature[:, None] @ dx[0][None, :]
    gviews["gen.prefix.bias"][...] += dx[0]


def lm_loss(model: TinyDecoder, region_feature: np.ndarray, target: list[int],
            params: np.ndarray | None = None):
    """Teacher-forced mean cross-entropy over target positions.

    The input sequence is [prefix] + BOS + target[:-1]; the prediction at
    position t scores target[t-1]. PAD targets are masked out. Returns
    (loss, flat gradient vector).
    """
    feature = np.asarray(region_feature, dtype=np.float64)
    if feature.shape != (FEATURE_DIM,):
        raise DimensionError(f"region feature must be {FEATURE_DIM}-dim")
    tgt = np.asarray(target, dtype=int)
    if tgt.size == 0:
        raise InputError("empty target sequence")
    if tgt.size > model.max_len - 1:
        raise InputError(f"target of {tgt.size} tokens exceeds max_len-1 = {model.max_len - 1}")
    layout = model.layout
    p = model.params if params is None else params
    views = layout.views(p)
    ids = np.concatenate(([BOS], tgt[:-1]))
    logits, tape = _forward(views, feature, ids)
    mask = np.zeros(logits.shape[0], dtype=bool)
    mask[1:] = tgt != PAD
    full_targets = np.concatenate(([0], tgt))
    loss, dlogits = nnops.cross_entropy_logits(logits, full_targets, mask)
    grads = np.zeros_like(p)
    _backward(views, layout.views(grads), tape, dlogits)
    return loss, grads


def decode_greedy(model: TinyDecoder, region_feature: np.ndarray,
                  limits: GenLimits) -> list[int]:
    """Greedy argmax decoding from the prefix; EOS stops and is dropped."""
    feature = np.asarray(region_feature, dtype=np.float64)
    if feature.shape != (FEATURE_DIM,):
        raise DimensionError(f"region feature must be {FEATURE_DIM}-dim")
    views = model.layout.views(model.params)
    cap = min(limits.max_tokens, model.max_len - 2)
    out: list[int] = []
    ids = np.array([BOS], dtype=int)
    while len(out) < cap:
        logits, _ = _forward(views, feature, ids)
        nxt = int(np.argmax(logits[-1]))
        if nxt == EOS:
            break
        out.append(nxt)
        ids = np.append(ids, nxt)
    return out


@dataclass
class GeneratorTrainConfig:
    epochs: int = 5
    batch_size: int = 1
    learn_rate: float = 5e-5
    weight_decay: float = 0.0
    factor: float = 0.5
    cooldown: int = 5
    patience: int = 3
    val_fraction: float = 0.1
    max_len: int = 302  # positions for prefix + BOS + 300 tokens
    seed: int = 0


def train_generator(corpus: list[tuple[np.ndarray, str]], vocab: Vocab,
                    cfg: GeneratorTrainConfig) -> tuple[TinyDecoder, list[dict]]:
    """Teacher-forced training over (region feature, sentence) pairs.

    Sentences are encoded with EOS appended and truncated to fit max_len.
    Plateau scheduling follows validation loss; with val_fraction 0 the
    training loss stands in (memorization corpora are too small to split).
    Returns (best-validation model, per-epoch history).
    """
    if not corpus:
        raise InputError("empty generator corpus")
    encoded = []
    for feature, sentence in corpus:
        ids = vocab.encode(sentence)[:cfg.max_len - 2] + [EOS]
        encoded.append((np.asarray(feature, dtype=np.float64), ids))
    rng = np.random.default_rng(cfg.seed)
    model = TinyDecoder.init(len(vocab), cfg.max_len, cfg.seed)
    n = len(encoded)
    n_val = int(round(n * cfg.val_fraction))
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        train_idx = perm
    opt_cfg = AdamWConfig(cfg.learn_rate, cfg.weight_decay)
    state = AdamWState.zeros(model.params.size)
    sched = PlateauScheduler(cfg.factor, cfg.patience, cfg.cooldown, cfg.learn_rate)
    best = (math.inf, model.params.copy())
    history = []
    lr = cfg.learn_rate
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grads = np.zeros_like(model.params)
            batch_loss = 0.0
            for bi in batch:
                feature, ids = encoded[int(bi)]
                loss, g = lm_loss(model, feature, ids)
                grads += g / batch.size
                batch_loss += loss / batch.size
            model.params, state = adamw_step(model.params, grads, state, opt_cfg, lr=lr)
            total += batch_loss * batch.size
        train_loss = total / order.size
        if val_idx.size:
            val_loss = 0.0
            for vi in val_idx:
                feature, ids = encoded[int(vi)]
                loss, _ = lm_loss(model, feature, ids)
                val_loss += loss / val_idx.size
        else:
            val_loss = train_loss
        if val_loss < best[0]:
            best = (val_loss, model.params.copy())
        lr = plateau_step(sched, val_loss, mode="min")
        history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss,
                        "val_loss": val_loss})
    model.params = best[1]
    return model, history


def assemble_report(selected: list[tuple[int, np.ndarray]], model: TinyDecoder,
                    vocab: Vocab, limits: GenLimits) -> str:
    """One decoded sentence per selected (class_id, feature), class order,
    empty decodes skipped, joined by single spaces."""
    parts = []
    for _, feature in sorted(selected, key=lambda t: t[0]):
        ids = decode_greedy(model, feature, limits)
        text = vocab.decode(ids)
        if text:
            parts.append(text)
    return " ".join(parts)
