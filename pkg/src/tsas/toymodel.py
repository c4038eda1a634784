"""A small trainable copy-pointer answer generator with dropout.

The model reads a rendered prompt, scores every prompt position plus an
end-of-sequence slot at each decoding step, and copies the chosen token.

    features  x_t = [emb(tok_t), match_t, in_question_t]
    encoder   h_t = tanh(conv_w^T [x_{t-W} .. x_{t+W}] + conv_b)
    step k    s   = start             (k = 0)
                  = h_{prev}          (k > 0)
              z_t = h_t . (bilinear s) + adj * [t == prev + 1]
              z_eos = eos_w . s + eos_b

The last line of the prompt is treated as the question. MC dropout multiplies
the encoder weights (``emb`` and ``conv_w``) by seeded inverted-dropout masks,
or, with ``dropout_site="activations"``, the encoder outputs.
"""

from __future__ import annotations

import hashlib
import logging
import re
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tsas.backends import DEFAULT_TEMPLATE, DecodeSpec, Generation, TrainRecord, render_prompt, require_mode
from tsas.core import DECODE_MODES, ConfigError, TrainConfig, TsasError

log = logging.getLogger(__name__)

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
RESERVED = (PAD, EOS, UNK)
CHECKPOINT_VERSION = 1
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
PARAM_NAMES = ("emb", "conv_w", "conv_b", "bilinear", "start", "adj", "eos_w", "eos_b")
WEIGHT_DROPOUT_SITES = ("emb", "conv_w")


class InputTooLongError(TsasError, ValueError):
    pass


class UnrepresentableTargetError(TsasError, ValueError):
    """The target cannot be produced by copying from the prompt."""


class DivergenceError(TsasError, FloatingPointError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


def encode_corpus(dataset: Iterable, extra_texts: Sequence[str] = ()) -> Vocab:
    """Vocabulary over question and document text.

    Tokens are ordered by descending frequency, ties broken by first
    occurrence; the reserved tokens come first.
    """
    counts: Counter[str] = Counter()
    first: dict[str, int] = {}
    texts = list(extra_texts)
    n_items = 0
    for ex in dataset:
        n_items += 1
        texts.extend([ex.document, ex.question])
    if n_items == 0:
        raise ValueError("cannot build a vocabulary from an empty dataset")
    for text in texts:
        for tok in tokenize(text):
            counts[tok] += 1
            first.setdefault(tok, len(first))
    ordered = sorted((t for t in counts if t not in RESERVED), key=lambda t: (-counts[t], first[t]))
    return Vocab(RESERVED + tuple(ordered))


@dataclass(frozen=True)
class ToyConfig:
    embed_dim: int = 32
    hidden: int = 64
    window: int = 4
    init_seed: int = 0
    max_prompt_tokens: int = 256
    # "weights" masks the encoder weights (theta * M); "activations" masks encoder outputs.
    dropout_site: str = "weights"

    def __post_init__(self) -> None:
        if self.dropout_site not in ("weights", "activations"):
            raise ConfigError(f"unknown dropout site {self.dropout_site!r}")

    @property
    def feat_dim(self) -> int:
        return self.embed_dim + 2


@dataclass(frozen=True)
class EncodedPrompt:
    tokens: tuple[str, ...]
    ids: np.ndarray
    flags: np.ndarray  # T x 2: (match, in_question)

    def __len__(self) -> int:
        return len(self.tokens)


def encode_prompt(vocab: Vocab, prompt: str, max_tokens: int = 256) -> EncodedPrompt:
    lines = [ln for ln in prompt.split("\n") if ln.strip()]
    toks: list[str] = []
    in_q: list[float] = []
    for li, line in enumerate(lines):
        lt = tokenize(line)
        toks.extend(lt)
        in_q.extend([1.0 if (li == len(lines) - 1 and len(lines) > 1) else 0.0] * len(lt))
    if not toks:
        raise ValueError("prompt has no tokens")
    if len(toks) > max_tokens:
        raise InputTooLongError(f"prompt has {len(toks)} tokens, cap is {max_tokens}")
    ids = np.array([vocab.id(t) for t in toks], dtype=np.int64)
    q_ids = {int(i) for i, q in zip(ids, in_q) if q and i != vocab.unk_id}
    match = [1.0 if (not q and int(i) in q_ids) else 0.0 for i, q in zip(ids, in_q)]
    flags = np.stack([np.array(match), np.array(in_q)], axis=1)
    return EncodedPrompt(tuple(toks), ids, flags)


def init_params(vocab_size: int, cfg: ToyConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.init_seed)
    fan_in = (2 * cfg.window + 1) * cfg.feat_dim
    return {
        "emb": rng.normal(0.0, 0.3, (vocab_size, cfg.embed_dim)),
        "conv_w": rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, cfg.hidden)),
        "conv_b": np.zeros(cfg.hidden),
        "bilinear": rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden), (cfg.hidden, cfg.hidden)),
        "start": rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden), cfg.hidden),
        "adj": np.zeros(1),
        "eos_w": rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden), cfg.hidden),
        "eos_b": np.zeros(1),
    }


def dropout_mask(shape: tuple[int, ...], p: float, seed: int | np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 or 1/(1-p), mean 1."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def sample_masks(params, cfg: ToyConfig, T: int, p: float, seed: int):
    """Weight masks (dict by parameter name) and/or an activation mask for one draw."""
    rng = np.random.default_rng(seed)
    if cfg.dropout_site == "weights":
        return {k: dropout_mask(params[k].shape, p, rng) for k in WEIGHT_DROPOUT_SITES}, None
    return None, dropout_mask((T, cfg.hidden), p, rng)


@dataclass
class _Forward:
    P: np.ndarray  # T x (2W+1)F unfolded inputs
    conv_w: np.ndarray  # effective (masked) conv weights
    pre_h: np.ndarray  # tanh output before activation mask
    H: np.ndarray  # effective encoder states
    act_mask: np.ndarray | None


def _encode(params, enc: EncodedPrompt, cfg: ToyConfig, w_mask=None, a_mask=None) -> _Forward:
    W = cfg.window
    emb = params["emb"][enc.ids]
    if w_mask is not None:
        emb = emb * w_mask["emb"][enc.ids]
    X = np.concatenate([emb, enc.flags], axis=1)
    Xp = np.pad(X, ((W, W), (0, 0)))
    P = sliding_window_view(Xp, (2 * W + 1, X.shape[1]))[:, 0].reshape(len(enc), -1)
    conv_w = params["conv_w"] if w_mask is None else params["conv_w"] * w_mask["conv_w"]
    pre_h = np.tanh(P @ conv_w + params["conv_b"])
    H = pre_h if a_mask is None else pre_h * a_mask
    return _Forward(P, conv_w, pre_h, H, a_mask)


def _logits(params, H: np.ndarray, state: np.ndarray, prev: int | None) -> np.ndarray:
    z = np.empty(H.shape[0] + 1)
    z[:-1] = H @ (params["bilinear"] @ state)
    if prev is not None and prev + 1 < H.shape[0]:
        z[prev + 1] += params["adj"][0]
    z[-1] = params["eos_w"] @ state + params["eos_b"][0]
    return z


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - (m + np.log(np.exp(z - m).sum()))


@dataclass
class ToyModel:
    vocab: Vocab
    cfg: ToyConfig
    params: dict[str, np.ndarray]

    @classmethod
    def create(cls, vocab: Vocab, cfg: ToyConfig | None = None) -> ToyModel:
        cfg = cfg or ToyConfig()
        return cls(vocab, cfg, init_params(len(vocab), cfg))

    def copy(self) -> ToyModel:
        return ToyModel(self.vocab, self.cfg, {k: v.copy() for k, v in self.params.items()})

    def encode(self, prompt: str) -> EncodedPrompt:
        return encode_prompt(self.vocab, prompt, self.cfg.max_prompt_tokens)

    def decode(self, enc: EncodedPrompt, spec: DecodeSpec) -> Generation:
        return decode(self.params, enc, spec, self.cfg)

    def decode_prompt(self, prompt: str, spec: DecodeSpec) -> Generation:
        return decode(self.params, self.encode(prompt), spec, self.cfg)


def decode(params, enc: EncodedPrompt, spec: DecodeSpec, cfg: ToyConfig) -> Generation:
    """Autoregressive copy decoding; stops at EOS or ``spec.max_new_tokens``."""
    if len(enc) > cfg.max_prompt_tokens:
        raise InputTooLongError(f"prompt has {len(enc)} tokens, cap is {cfg.max_prompt_tokens}")
    w_mask = a_mask = None
    if spec.mode == "mc_dropout":
        w_mask, a_mask = sample_masks(params, cfg, len(enc), spec.dropout_rate, spec.mask_seed)
    rng = np.random.default_rng(spec.sampling_seed) if spec.mode == "top_k" else None
    fwd = _encode(params, enc, cfg, w_mask, a_mask)
    T = len(enc)
    out: list[str] = []
    lps: list[float] = []
    state, prev = params["start"], None
    for _ in range(spec.max_new_tokens):
        z = _logits(params, fwd.H, state, prev)
        logp = _log_softmax(z)
        if rng is not None:
            k = min(spec.top_k, T + 1)
            top = np.argsort(-z, kind="stable")[:k]
            scaled = z[top] / spec.temperature
            probs = np.exp(scaled - scaled.max())
            choice = int(top[rng.choice(k, p=probs / probs.sum())])
        else:
            choice = int(np.argmax(z))
        lps.append(float(logp[choice]))
        if choice == T:
            break
        out.append(enc.tokens[choice])
        state, prev = fwd.H[choice], choice
    return Generation(" ".join(out), tuple(lps))


def _target_paths(enc: EncodedPrompt, target: Sequence[str]) -> list[int]:
    """Start positions of every contiguous occurrence of ``target``."""
    m = len(target)
    toks = enc.tokens
    if m == 0:
        return [-1]
    starts = [i for i in range(len(toks) - m + 1) if tuple(toks[i : i + m]) == tuple(target)]
    if not starts:
        raise UnrepresentableTargetError(f"target {' '.join(target)!r} is not a span of the prompt")
    return starts


def loss_and_gradients(
    params,
    enc: EncodedPrompt,
    target: Sequence[str],
    weight: float,
    cfg: ToyConfig,
    w_mask: dict[str, np.ndarray] | None = None,
    a_mask: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted negative log-likelihood of copying ``target`` then EOS.

    The likelihood marginalizes over every contiguous occurrence of the
    target span in the prompt.
    """
    if weight <= 0:
        raise ValueError(f"weight must be > 0, got {weight}")
    starts = _target_paths(enc, target)
    fwd = _encode(params, enc, cfg, w_mask, a_mask)
    H = fwd.H
    T = len(enc)
    m = len(target)

    # Forward every path, keeping per-step softmaxes for the backward pass.
    path_steps = []
    path_logp = np.empty(len(starts))
    for pi, s0 in enumerate(starts):
        steps = []
        total = 0.0
        state, prev = params["start"], None
        for k in range(m + 1):
            tgt = s0 + k if k < m else T
            z = _logits(params, H, state, prev)
            logp = _log_softmax(z)
            total += logp[tgt]
            steps.append((state, prev, tgt, np.exp(logp)))
            if k < m:
                state, prev = H[tgt], tgt
        path_steps.append(steps)
        path_logp[pi] = total
    mx = path_logp.max()
    lse = mx + np.log(np.exp(path_logp - mx).sum())
    post = np.exp(path_logp - lse)
    loss = -weight * lse

    g = {k: np.zeros_like(v) for k, v in params.items()}
    dH = np.zeros_like(H)
    B = params["bilinear"]
    for coef, steps in zip(weight * post, path_steps):
        for state, prev, tgt, probs in steps:
            dz = coef * probs
            dz[tgt] -= coef
            dz_pos, dz_eos = dz[:-1], dz[-1]
            u = B @ state
            dH += np.outer(dz_pos, u)
            du = H.T @ dz_pos
            g["bilinear"] += np.outer(du, state)
            dstate = B.T @ du + dz_eos * params["eos_w"]
            if prev is not None and prev + 1 < T:
                g["adj"][0] += dz_pos[prev + 1]
            g["eos_w"] += dz_eos * state
            g["eos_b"][0] += dz_eos
            if prev is None:
                g["start"] += dstate
            else:
                dH[prev] += dstate

    if fwd.act_mask is not None:
        dH = dH * fwd.act_mask
    dA = dH * (1.0 - fwd.pre_h**2)
    dW_eff = fwd.P.T @ dA
    g["conv_w"] = dW_eff if w_mask is None else dW_eff * w_mask["conv_w"]
    g["conv_b"] = dA.sum(axis=0)
    W = cfg.window
    F = cfg.feat_dim
    dP = (dA @ fwd.conv_w.T).reshape(T, 2 * W + 1, F)
    dXp = np.zeros((T + 2 * W, F))
    for j in range(2 * W + 1):
        dXp[j : j + T] += dP[:, j]
    d_emb = dXp[W : W + T, : cfg.embed_dim]
    if w_mask is not None:
        d_emb = d_emb * w_mask["emb"][enc.ids]
    np.add.at(g["emb"], enc.ids, d_emb)
    return float(loss), g


def train(
    model: ToyModel,
    records: Sequence[tuple[EncodedPrompt, Sequence[str], float]],
    cfg: TrainConfig,
    dropout_rate: float = 0.1,
) -> list[float]:
    """Mini-batch SGD with dropout active; mutates ``model.params`` in place.

    Returns the mean loss of every epoch.
    """
    if len(records) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    trace = []
    batch_no = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(records))
        epoch_loss = 0.0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            mask_seed = int(rng.integers(2**62))
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            batch_loss = 0.0
            w_mask = None
            if model.cfg.dropout_site == "weights":
                w_mask, _ = sample_masks(params, model.cfg, 0, dropout_rate, mask_seed)
            for i in idx:
                enc, target, weight = records[i]
                a_mask = None
                if model.cfg.dropout_site == "activations":
                    _, a_mask = sample_masks(params, model.cfg, len(enc), dropout_rate, mask_seed)
                loss, g = loss_and_gradients(params, enc, target, weight, model.cfg, w_mask, a_mask)
                batch_loss += loss
                for k in grads:
                    grads[k] += g[k]
            if not np.isfinite(batch_loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch}, batch {batch_no}")
            scale = cfg.learning_rate / len(idx)
            for k in params:
                params[k] -= scale * grads[k]
            epoch_loss += batch_loss
            batch_no += 1
        trace.append(epoch_loss / len(records))
        log.debug("epoch %d mean loss %.4f", epoch, trace[-1])
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"parameter {k} became non-finite")
    return trace


def save_checkpoint(model: ToyModel, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    cfg = model.cfg
    np.savez(
        tmp,
        version=np.array(CHECKPOINT_VERSION),
        vocab_hash=np.array(model.vocab.digest()),
        vocab=np.array(model.vocab.tokens),
        dims=np.array([cfg.embed_dim, cfg.hidden, cfg.window, cfg.max_prompt_tokens]),
        dropout_site=np.array(cfg.dropout_site),
        **{f"param_{k}": model.params[k].ravel() for k in PARAM_NAMES},
    )
    tmp.replace(path)


def load_checkpoint(path: str | Path, vocab: Vocab | None = None) -> ToyModel:
    """Load a checkpoint; if ``vocab`` is given its hash must match."""
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(z['version'])}")
        stored = Vocab(tuple(str(t) for t in z["vocab"]))
        if stored.digest() != str(z["vocab_hash"]):
            raise ValueError("checkpoint vocabulary does not match its stored hash")
        if vocab is not None and vocab.digest() != stored.digest():
            raise ValueError("checkpoint vocabulary hash differs from the expected vocabulary")
        e, h, w, cap = (int(x) for x in z["dims"])
        cfg = ToyConfig(embed_dim=e, hidden=h, window=w, max_prompt_tokens=cap, dropout_site=str(z["dropout_site"]))
        shapes = {k: v.shape for k, v in init_params(len(stored), replace(cfg, init_seed=0)).items()}
        params = {k: z[f"param_{k}"].reshape(shapes[k]).astype(np.float64) for k in PARAM_NAMES}
    return ToyModel(stored, cfg, params)


class ToyBackend:
    """Backend adapter around :class:`ToyModel`.

    Decoding reads a snapshot of the parameters; training swaps in new
    arrays under a lock, so concurrent decodes never see a half update.
    """

    trainable = True

    def __init__(self, model: ToyModel, train_dropout: float = 0.1):
        self.model = model
        self.train_dropout = train_dropout
        self._lock = threading.Lock()
        self.dropped_targets = 0

    def capabilities(self) -> frozenset[str]:
        return frozenset(DECODE_MODES)

    def generate(self, prompt: str, spec: DecodeSpec) -> Generation:
        require_mode(self, spec.mode)
        model = self.model
        return decode(model.params, model.encode(prompt), spec, model.cfg)

    def snapshot(self) -> ToyModel:
        return self.model.copy()

    def restore(self, snap: ToyModel) -> None:
        with self._lock:
            self.model = snap.copy()

    def train(self, records: Sequence[TrainRecord], cfg: TrainConfig) -> list[float]:
        prepared = []
        dropped = 0
        for r in records:
            enc = self.model.encode(r.prompt)
            target = tokenize(r.target)
            try:
                _target_paths(enc, target)
            except UnrepresentableTargetError:
                dropped += 1
                continue
            prepared.append((enc, target, r.weight))
        if dropped:
            log.info("dropped %d non-copyable training targets", dropped)
        self.dropped_targets += dropped
        if not prepared:
            log.warning("no copy-representable training targets; skipping training")
            return []
        with self._lock:
            work = self.model.copy()
            trace = train(work, prepared, cfg, self.train_dropout)
            self.model = work
        return trace

    def save_checkpoint(self, path: str | Path) -> None:
        save_checkpoint(self.model, path)


PRETRAIN = TrainConfig(epochs=8, learning_rate=0.1, batch_size=8)


def pretrain(
    train_set: Sequence,
    unlabeled: Iterable = (),
    template: str = DEFAULT_TEMPLATE,
    toy_cfg: ToyConfig | None = None,
    train_cfg: TrainConfig = PRETRAIN,
    dropout_rate: float = 0.1,
) -> ToyBackend:
    """Build a vocabulary over both splits and fit the model on the labeled one.

    Only question and document text of ``unlabeled`` enter the vocabulary.
    """
    train_set = list(train_set)
    vocab = encode_corpus(train_set + list(unlabeled), [template])
    model = ToyModel.create(vocab, toy_cfg or ToyConfig(init_seed=train_cfg.seed))
    records = []
    for ex in train_set:
        prompt = render_prompt(template, ex.document, ex.question)
        records.append((model.encode(prompt), tokenize(ex.gold_answers[0]), 1.0))
    train(model, records, train_cfg, dropout_rate)
    return ToyBackend(model, train_dropout=dropout_rate)
