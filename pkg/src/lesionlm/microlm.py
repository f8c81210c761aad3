"""A micro decoder-only transformer with a hand-written backward pass.

Parameters live in a :class:`ParamStore` (a ``dict`` of float64 arrays tagged
with its :class:`ModelConfig`). Row-vector convention throughout: a linear
layer computes ``x @ W`` with ``W`` of shape ``(fan_in, fan_out)``.

Block layout (pre-norm, parameter-free layer norm inside blocks)::

    x = embed[tok] + sinusoid(pos)
    x = x + attn(ln(x)) @ wo
    x = x + gelu(ln(x) @ up) @ down
    hidden = ln(x) * final_norm
    logits = hidden @ head
"""
from __future__ import annotations

import csv
import json
import math
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensorio import read_archive, write_archive

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Loss became non-finite; the run should be aborted."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_mult: int = 4
    context_len: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "dim", "n_layers", "n_heads", "mlp_mult", "context_len"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.dim % self.n_heads:
            raise ConfigError(f"dim={self.dim} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class ParamStore(dict):
    """Model parameters keyed by name, carrying the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors=()):
        super().__init__(tensors)
        self.config = config

    def copy(self) -> "ParamStore":
        return ParamStore(self.config, {k: v.copy() for k, v in self.items()})

    def replace(self, tensors) -> "ParamStore":
        return ParamStore(self.config, tensors)


# component taxonomy used by the lesion selection scope
COMPONENTS = ("attn-q", "attn-k", "attn-v", "attn-o", "mlp-up", "mlp-down",
              "embed", "norm", "head")
_COMPONENT_OF = {"wq": "attn-q", "wk": "attn-k", "wv": "attn-v", "wo": "attn-o",
                 "up": "mlp-up", "down": "mlp-down"}
_LAYER_RE = re.compile(r"^layer(\d+)\.(attn|mlp)\.(\w+)$")


def classify(name: str) -> tuple[int | None, str]:
    """Map a parameter name to ``(layer index or None, component)``."""
    m = _LAYER_RE.match(name)
    if m:
        return int(m.group(1)), _COMPONENT_OF[m.group(3)]
    if name == "embed":
        return None, "embed"
    if name == "final_norm":
        return None, "norm"
    if name == "head":
        return None, "head"
    raise KeyError(f"unknown parameter name {name!r}")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.dim, cfg.dim * cfg.mlp_mult
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"layer{i}.attn.{w}"] = (d, d)
        shapes[f"layer{i}.mlp.up"] = (d, h)
        shapes[f"layer{i}.mlp.down"] = (h, d)
    shapes["final_norm"] = (d,)
    shapes["head"] = (d, cfg.vocab_size)
    return shapes


def init_model(cfg: ModelConfig) -> ParamStore:
    rng = np.random.default_rng(cfg.seed)
    resid_scale = 1.0 / math.sqrt(2 * cfg.n_layers)
    out = {}
    for name, shape in param_shapes(cfg).items():
        _, comp = classify(name)
        if comp == "embed":
            w = rng.standard_normal(shape)
        elif comp == "norm":
            w = np.ones(shape)
        elif comp == "head":
            w = rng.standard_normal(shape) * 0.02
        else:
            w = rng.standard_normal(shape) / math.sqrt(shape[0])
            if comp in ("attn-o", "mlp-down"):
                w *= resid_scale
        # values representable in float32 so checkpoints round-trip exactly
        out[name] = w.astype(np.float32).astype(np.float64)
    return ParamStore(cfg, out)


def save_model(store: ParamStore, path: str | os.PathLike) -> None:
    path = Path(path)
    write_archive(store, path)
    with open(path / "model_config.json", "w") as fh:
        json.dump(store.config.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path: str | os.PathLike) -> ParamStore:
    path = Path(path)
    with open(path / "model_config.json") as fh:
        cfg = ModelConfig(**json.load(fh))
    tensors = {k: v.astype(np.float64) for k, v in read_archive(path).items()}
    expected = param_shapes(cfg)
    if {k: tuple(v.shape) for k, v in tensors.items()} != expected:
        raise ConfigError(f"checkpoint at {path} does not match its config layout")
    return ParamStore(cfg, tensors)


# ---------------------------------------------------------------------------
# corpora


@dataclass
class TimedCorpus:
    """Token ids with onset times (s) and sentence start indices."""

    tokens: np.ndarray
    onsets: np.ndarray
    sentence_breaks: np.ndarray
    word_ids: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.onsets = np.asarray(self.onsets, dtype=np.float64)
        starts = np.unique(np.asarray(self.sentence_breaks, dtype=np.int64))
        if len(self.tokens) and (len(starts) == 0 or starts[0] != 0):
            starts = np.concatenate([[0], starts])
        self.sentence_breaks = starts
        if self.word_ids is None:
            self.word_ids = np.arange(len(self.tokens), dtype=np.int64)
        self.word_ids = np.asarray(self.word_ids, dtype=np.int64)
        if not (len(self.tokens) == len(self.onsets) == len(self.word_ids)):
            raise ValueError("tokens, onsets and word_ids must have equal length")
        if len(self.onsets) and (self.onsets[0] < 0 or np.any(np.diff(self.onsets) < 0)):
            raise ValueError("onsets must be nonnegative and nondecreasing")
        if np.any(self.sentence_breaks >= max(len(self.tokens), 1)):
            raise ValueError("sentence break beyond end of corpus")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def sentence_ids(self) -> np.ndarray:
        ids = np.zeros(len(self.tokens), dtype=np.int64)
        ids[self.sentence_breaks[1:]] = 1
        return np.cumsum(ids)

    def sentences(self) -> list[np.ndarray]:
        return np.split(self.tokens, self.sentence_breaks[1:])

    def slice(self, start: int, stop: int) -> "TimedCorpus":
        b = self.sentence_breaks
        b = b[(b >= start) & (b < stop)] - start
        return TimedCorpus(self.tokens[start:stop], self.onsets[start:stop], b,
                           self.word_ids[start:stop])

    def check_vocab(self, vocab_size: int) -> None:
        if len(self.tokens) and (self.tokens.min() < 0 or self.tokens.max() >= vocab_size):
            raise ValueError(f"token id outside vocabulary of size {vocab_size}")


def write_corpus_csv(corpus: TimedCorpus, path: str | os.PathLike) -> None:
    sid = corpus.sentence_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token", "onset_seconds", "sentence_id"])
        for tok, onset, s in zip(corpus.tokens, corpus.onsets, sid):
            w.writerow([int(tok), repr(float(onset)), int(s)])


def read_corpus_csv(path: str | os.PathLike) -> TimedCorpus:
    toks, onsets, sids = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            toks.append(int(row["token"]))
            onsets.append(float(row["onset_seconds"]))
            sids.append(int(row["sentence_id"]))
    sids = np.asarray(sids)
    breaks = np.flatnonzero(np.diff(sids, prepend=sids[:1] - 1) != 0) if len(sids) else []
    return TimedCorpus(toks, onsets, breaks)


def corpus_from_text(text: str, tokens_per_second: float = 3.0) -> TimedCorpus:
    """Byte-level corpus from UTF-8 text; words split on whitespace,
    sentences on ``.``, ``!`` and ``?``."""
    data = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    onsets = np.arange(len(data)) / tokens_per_second
    is_space = np.isin(data, [9, 10, 13, 32])
    word_ids = np.cumsum(np.concatenate([[0], is_space[:-1] & ~is_space[1:]]))
    ends = np.flatnonzero(np.isin(data, [ord("."), ord("!"), ord("?")])) + 1
    breaks = ends[ends < len(data)]
    return TimedCorpus(data, onsets, breaks, word_ids)


# ---------------------------------------------------------------------------
# forward / backward


def sinusoid(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / dim))
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)[:, : dim - dim // 2]
    return pe


def _ln(x):
    xc = x - x.mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat, (xhat, rstd)


def _ln_back(dy, cache):
    xhat, rstd = cache
    return rstd * (dy - dy.mean(-1, keepdims=True)
                   - xhat * (dy * xhat).mean(-1, keepdims=True))


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(dy, u, t):
    du = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return dy * du


def _forward(store: ParamStore, tokens: np.ndarray, keep_cache: bool = False):
    cfg = store.config
    B, T = tokens.shape
    if T > cfg.context_len:
        raise ValueError(f"window of length {T} exceeds context_len={cfg.context_len}")
    H, dh = cfg.n_heads, cfg.head_dim
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    x = store["embed"][tokens] + sinusoid(T, cfg.dim)
    caches = []
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        h, ln1 = _ln(x)
        q = (h @ store[p + "attn.wq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (h @ store[p + "attn.wk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (h @ store[p + "attn.wv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
        s = np.where(causal, -np.inf, s)
        s = s - s.max(-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(-1, keepdims=True)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.dim)
        x = x + o @ store[p + "attn.wo"]
        h2, ln2 = _ln(x)
        u = h2 @ store[p + "mlp.up"]
        g, t = _gelu(u)
        x = x + g @ store[p + "mlp.down"]
        if keep_cache:
            caches.append((h, ln1, q, k, v, a, o, h2, ln2, u, g, t))
    xhat, lnf = _ln(x)
    hidden = xhat * store["final_norm"]
    logits = hidden @ store["head"]
    return hidden, logits, (caches, xhat, lnf)


def forward(store: ParamStore, ctx: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Final-layer hidden states ``(T, dim)`` and logits ``(T, vocab)``."""
    tokens = np.asarray(ctx, dtype=np.int64)[None, :]
    hidden, logits, _ = _forward(store, tokens)
    return hidden[0], logits[0]


def _log_softmax(logits):
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def loss_and_grads(store: ParamStore, batch: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean next-token cross-entropy over a ``(B, T+1)`` batch and its gradient."""
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 2 or batch.shape[0] == 0 or batch.shape[1] < 2:
        raise ValueError("batch must be a nonempty (B, T+1) array with T >= 1")
    cfg = store.config
    inp, tgt = batch[:, :-1], batch[:, 1:]
    B, T = inp.shape
    H, dh = cfg.n_heads, cfg.head_dim
    hidden, logits, (caches, xhat_f, lnf) = _forward(store, inp, keep_cache=True)

    logp = _log_softmax(logits)
    n = B * T
    loss = -np.take_along_axis(logp, tgt[..., None], -1).sum() / n
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, tgt[..., None],
                      np.take_along_axis(dlogits, tgt[..., None], -1) - 1.0, -1)
    dlogits /= n

    grads: dict[str, np.ndarray] = {}
    grads["head"] = hidden.reshape(n, -1).T @ dlogits.reshape(n, -1)
    dhidden = dlogits @ store["head"].T
    grads["final_norm"] = (dhidden * xhat_f).sum((0, 1))
    dx = _ln_back(dhidden * store["final_norm"], lnf)

    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}."
        h, ln1, q, k, v, a, o, h2, ln2, u, g, t = caches[i]
        # mlp
        grads[p + "mlp.down"] = g.reshape(n, -1).T @ dx.reshape(n, -1)
        du = _gelu_back(dx @ store[p + "mlp.down"].T, u, t)
        grads[p + "mlp.up"] = h2.reshape(n, -1).T @ du.reshape(n, -1)
        dx = dx + _ln_back(du @ store[p + "mlp.up"].T, ln2)
        # attention
        grads[p + "attn.wo"] = o.reshape(n, -1).T @ dx.reshape(n, -1)
        do = (dx @ store[p + "attn.wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(-1, keepdims=True)) / math.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        merge = lambda z: z.transpose(0, 2, 1, 3).reshape(n, cfg.dim)
        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        hf = h.reshape(n, -1)
        grads[p + "attn.wq"] = hf.T @ dq
        grads[p + "attn.wk"] = hf.T @ dk
        grads[p + "attn.wv"] = hf.T @ dv
        dh_ = (dq @ store[p + "attn.wq"].T + dk @ store[p + "attn.wk"].T
               + dv @ store[p + "attn.wv"].T).reshape(B, T, cfg.dim)
        dx = dx + _ln_back(dh_, ln1)

    gemb = np.zeros_like(store["embed"])
    np.add.at(gemb, inp.reshape(-1), dx.reshape(n, -1))
    grads["embed"] = gemb
    return float(loss), grads


# ---------------------------------------------------------------------------
# training


@dataclass
class GradAccumulator:
    """Running sum of per-step absolute gradients, float64."""

    sums: dict[str, np.ndarray]
    step_count: int = 0

    @classmethod
    def zeros_like(cls, store) -> "GradAccumulator":
        return cls({k: np.zeros(np.shape(v), dtype=np.float64) for k, v in store.items()})

    def add(self, grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            self.sums[k] += np.abs(g)
        self.step_count += 1


def train_step(store: ParamStore, batch: np.ndarray, lr: float,
               acc: GradAccumulator | None = None, clip: float | None = None) -> float:
    """One plain gradient-descent step, in place. Returns the batch loss.

    ``clip`` bounds the global gradient norm of the applied update only; the
    accumulator always receives the raw gradients.
    """
    loss, grads = loss_and_grads(store, batch)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss}")
    if acc is not None:
        acc.add(grads)
    scale = lr
    if clip is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > clip:
            scale = lr * clip / norm
    if scale != 0.0:
        for k, g in grads.items():
            store[k] -= scale * g
    return loss


def sample_batch(tokens: np.ndarray, batch_size: int, seq_len: int,
                 rng: np.random.Generator) -> np.ndarray:
    """``batch_size`` random windows of ``seq_len + 1`` tokens."""
    tokens = np.asarray(tokens)
    span = min(seq_len + 1, len(tokens))
    if span < 2:
        raise ValueError("corpus too short to form a training window")
    starts = rng.integers(0, len(tokens) - span + 1, size=batch_size)
    return tokens[starts[:, None] + np.arange(span)[None, :]]


def train(store: ParamStore, tokens: np.ndarray, steps: int, lr: float, *,
          batch_size: int = 16, seq_len: int = 64, seed: int = 0,
          acc: GradAccumulator | None = None, clip: float | None = 1.0,
          lr_final: float | None = None) -> list[float]:
    """Run ``steps`` SGD steps on random windows of ``tokens``; returns losses.

    With ``lr_final`` the step size decays linearly from ``lr`` to it.
    """
    rng = np.random.default_rng(seed)
    seq_len = min(seq_len, store.config.context_len)
    losses = []
    for s in range(steps):
        step_lr = lr if lr_final is None else lr + (lr_final - lr) * s / max(steps - 1, 1)
        batch = sample_batch(tokens, batch_size, seq_len, rng)
        losses.append(train_step(store, batch, step_lr, acc, clip))
    return losses


def finetune_language(base: ParamStore, corpus: TimedCorpus, steps: int, lr: float, *,
                      batch_size: int = 16, seq_len: int = 64, seed: int = 0,
                      clip: float | None = 1.0) -> tuple[ParamStore, GradAccumulator]:
    """Fine-tune a copy of ``base`` on one language, accumulating |grad|."""
    store = base.copy()
    acc = GradAccumulator.zeros_like(store)
    train(store, corpus.tokens, steps, lr, batch_size=batch_size, seq_len=seq_len,
          seed=seed, acc=acc, clip=clip)
    return store, acc


# ---------------------------------------------------------------------------
# evaluation


def perplexity(store: ParamStore, corpus: TimedCorpus | np.ndarray, ctx_len: int | None = None,
               batch: int = 32) -> float:
    """exp(mean NLL) over every next-token prediction in the corpus.

    The corpus is cut into windows of ``ctx_len`` overlapping by one token so
    each prediction is scored exactly once.
    """
    tokens = np.asarray(getattr(corpus, "tokens", corpus), dtype=np.int64)
    if len(tokens) < 2:
        raise ValueError("perplexity needs a corpus of at least two tokens")
    ctx_len = min(ctx_len or store.config.context_len, store.config.context_len)
    if ctx_len < 2:
        raise ValueError("ctx_len must be at least 2")
    step = ctx_len - 1
    starts = list(range(0, len(tokens) - 1, step))
    total, count = 0.0, 0
    full = [s for s in starts if s + ctx_len <= len(tokens)]
    for j in range(0, len(full), batch):
        win = np.stack([tokens[s:s + ctx_len] for s in full[j:j + batch]])
        total_, count_ = _nll(store, win)
        total += total_
        count += count_
    for s in starts:
        if s + ctx_len > len(tokens):
            total_, count_ = _nll(store, tokens[s:][None, :])
            total += total_
            count += count_
    return float(math.exp(total / count))


def _nll(store, win):
    _, logits, _ = _forward(store, win[:, :-1])
    logp = _log_softmax(logits)
    nll = -np.take_along_axis(logp, win[:, 1:, None], -1)
    return float(nll.sum()), nll.size


@dataclass
class TokenEmbeddings:
    """Final-layer vectors for every corpus token plus alignment metadata."""

    vectors: np.ndarray
    onsets: np.ndarray
    word_ids: np.ndarray
    sentence_ids: np.ndarray
    context_lengths: np.ndarray = field(repr=False, default=None)


def context_starts(corpus: TimedCorpus, ctx_len: int) -> np.ndarray:
    """Window start for every token: the earliest sentence start such that
    the window (preceding complete sentences plus the current sentence up to
    the token) fits in ``ctx_len``; inside an over-long sentence the window
    is simply the last ``ctx_len`` tokens."""
    n = len(corpus)
    idx = np.arange(n)
    b = corpus.sentence_breaks
    # first sentence start >= i - ctx_len + 1
    j = np.searchsorted(b, idx - ctx_len + 1, side="left")
    cur = b[np.searchsorted(b, idx, side="right") - 1]
    cand = b[np.minimum(j, len(b) - 1)]
    ok = (j < len(b)) & (cand <= cur)
    return np.where(ok, cand, idx - ctx_len + 1).astype(np.int64)


def extract_embeddings(store: ParamStore, corpus: TimedCorpus,
                       ctx_len: int | None = None) -> TokenEmbeddings:
    ctx_len = min(ctx_len or store.config.context_len, store.config.context_len)
    corpus.check_vocab(store.config.vocab_size)
    n = len(corpus)
    starts = context_starts(corpus, ctx_len)
    out = np.zeros((n, store.config.dim))
    # tokens sharing a window start share one causal forward pass
    order = np.argsort(starts, kind="stable")
    uniq, first = np.unique(starts[order], return_index=True)
    bounds = list(first) + [n]
    for s, a, b in zip(uniq, bounds[:-1], bounds[1:]):
        members = order[a:b]
        end = members.max() + 1
        hidden, _ = forward(store, corpus.tokens[s:end])
        out[members] = hidden[members - s]
    return TokenEmbeddings(out, corpus.onsets.copy(), corpus.word_ids.copy(),
                           corpus.sentence_ids, np.arange(n) - starts + 1)
