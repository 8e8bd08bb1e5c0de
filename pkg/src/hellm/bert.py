"""Transformer encoder with MLM and NSP heads at configurable scale.

Post-norm blocks, learned positional embeddings, gelu feed-forward, and
an MLM output projection tied to the token embedding table: the original
BERT-BASE recipe, scaled down by default. The encoder processes one
packed sequence [T] at a time (the trainer loops a batch); padding
columns are masked out of every attention softmax so they receive
exactly zero weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError
from .pretrain_data import IS_NEXT, NOT_NEXT, PretrainInstance

NSP_CLASS = {IS_NEXT: 0, NOT_NEXT: 1}

INIT_STD = 0.02
INIT_CLIP = 2.0  # in units of std


@dataclass(frozen=True)
class BertConfig:
    """Encoder dimensions; intermediate defaults to 4 * hidden."""

    layers: int = 2
    hidden: int = 64
    heads: int = 2
    intermediate: int | None = None
    max_positions: int = 128
    vocab_size: int = 2000
    dropout: float = 0.1
    type_vocab: int = 2

    def __post_init__(self):
        if self.intermediate is None:
            object.__setattr__(self, "intermediate", 4 * self.hidden)
        if self.layers < 1 or self.hidden < 1 or self.heads < 1:
            raise ConfigError("layers, hidden, and heads must be positive")
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden {self.hidden} must be divisible by heads {self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.vocab_size < 6:
            raise ConfigError("vocab_size must cover the 5 specials plus content")
        if self.max_positions < 1 or self.type_vocab < 2:
            raise ConfigError("max_positions must be >= 1 and type_vocab >= 2")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @classmethod
    def full_scale(cls, vocab_size: int = 35000) -> "BertConfig":
        return cls(
            layers=12,
            hidden=768,
            heads=12,
            max_positions=512,
            vocab_size=vocab_size,
        )


@dataclass
class EncoderWeights:
    """Named parameter tensors; names are stable and sorted for I/O."""

    params: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def astype(self, dtype) -> "EncoderWeights":
        out = {}
        for name, t in self.params.items():
            c = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=name)
            out[name] = c
        return EncoderWeights(out)


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD,
                     clip: float = INIT_CLIP) -> np.ndarray:
    """N(0, std^2) truncated to +-clip*std by resampling rejected draws."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > clip
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > clip
    return (z * std).astype(np.float32)


def init_weights(config: BertConfig, seed: int) -> EncoderWeights:
    """Deterministic initialization: truncated-normal matrices, zero
    biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    h, i, v = config.hidden, config.intermediate, config.vocab_size
    params: dict[str, Tensor] = {}

    def matrix(name, *shape):
        params[name] = Tensor(truncated_normal(rng, shape), requires_grad=True, name=name)

    def zeros(name, *shape):
        params[name] = Tensor(
            np.zeros(shape, dtype=np.float32), requires_grad=True, name=name
        )

    def ones(name, *shape):
        params[name] = Tensor(
            np.ones(shape, dtype=np.float32), requires_grad=True, name=name
        )

    matrix("embeddings.token", v, h)
    matrix("embeddings.position", config.max_positions, h)
    matrix("embeddings.segment", config.type_vocab, h)
    ones("embeddings.ln.gain", h)
    zeros("embeddings.ln.bias", h)
    for l in range(config.layers):
        p = f"layer{l}"
        for proj in ("q", "k", "v", "out"):
            matrix(f"{p}.attn.{proj}.w", h, h)
            zeros(f"{p}.attn.{proj}.b", h)
        ones(f"{p}.attn.ln.gain", h)
        zeros(f"{p}.attn.ln.bias", h)
        matrix(f"{p}.ff.w1", h, i)
        zeros(f"{p}.ff.b1", i)
        matrix(f"{p}.ff.w2", i, h)
        zeros(f"{p}.ff.b2", h)
        ones(f"{p}.ff.ln.gain", h)
        zeros(f"{p}.ff.ln.bias", h)
    matrix("mlm.transform.w", h, h)
    zeros("mlm.transform.b", h)
    ones("mlm.ln.gain", h)
    zeros("mlm.ln.bias", h)
    zeros("mlm.out.bias", v)
    matrix("pooler.w", h, h)
    zeros("pooler.b", h)
    matrix("nsp.w", h, 2)
    zeros("nsp.b", 2)
    return EncoderWeights(params)


def _linear(x: Tensor, weights: EncoderWeights, name: str) -> Tensor:
    return ad.add(ad.matmul(x, weights[f"{name}.w"]), weights[f"{name}.b"])


def encode(
    ids,
    segment_ids,
    attention_length: int,
    weights: EncoderWeights,
    config: BertConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the encoder over one packed sequence; returns hidden [T, H].

    mode "train" applies dropout (requires rng when dropout > 0);
    mode "eval" is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    drop_rng = None
    if mode == "train" and config.dropout > 0.0:
        if rng is None:
            raise ContractError("train mode with dropout needs an rng")
        drop_rng = rng

    ids = np.asarray(ids, dtype=np.int64)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    T = ids.shape[0]
    if T > config.max_positions:
        raise DataError(
            f"sequence length {T} exceeds max_positions {config.max_positions}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise DataError(
            f"invalid token id {int(ids.max())} for vocabulary of {config.vocab_size}"
        )
    if not 1 <= attention_length <= T:
        raise ContractError(
            f"attention_length {attention_length} out of range for length {T}"
        )

    def drop(x):
        return ad.dropout(x, config.dropout, drop_rng)

    tok = ad.embedding_lookup(weights["embeddings.token"], ids)
    pos = ad.slice_axis(weights["embeddings.position"], 0, 0, T)
    seg = ad.embedding_lookup(weights["embeddings.segment"], segment_ids)
    x = ad.layer_norm(
        ad.add(ad.add(tok, pos), seg),
        weights["embeddings.ln.gain"],
        weights["embeddings.ln.bias"],
    )
    x = drop(x)

    valid = np.arange(T) < attention_length
    dh = config.head_dim
    inv_sqrt_dh = 1.0 / math.sqrt(dh)
    for l in range(config.layers):
        p = f"layer{l}"
        q = _linear(x, weights, f"{p}.attn.q")
        k = _linear(x, weights, f"{p}.attn.k")
        v = _linear(x, weights, f"{p}.attn.v")
        heads = []
        for a in range(config.heads):
            lo, hi = a * dh, (a + 1) * dh
            qh = ad.slice_axis(q, 1, lo, hi)
            kh = ad.slice_axis(k, 1, lo, hi)
            vh = ad.slice_axis(v, 1, lo, hi)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt_dh)
            probs = ad.softmax(scores, axis=-1, mask=valid)
            probs = drop(probs)
            heads.append(ad.matmul(probs, vh))
        attn = _linear(ad.concat(heads, axis=1), weights, f"{p}.attn.out")
        x = ad.layer_norm(
            ad.add(x, drop(attn)),
            weights[f"{p}.attn.ln.gain"],
            weights[f"{p}.attn.ln.bias"],
        )
        ff = ad.gelu(ad.add(ad.matmul(x, weights[f"{p}.ff.w1"]), weights[f"{p}.ff.b1"]))
        ff = ad.add(ad.matmul(ff, weights[f"{p}.ff.w2"]), weights[f"{p}.ff.b2"])
        x = ad.layer_norm(
            ad.add(x, drop(ff)),
            weights[f"{p}.ff.ln.gain"],
            weights[f"{p}.ff.ln.bias"],
        )
    return x


def attention_probs(
    ids, segment_ids, attention_length, weights, config: BertConfig
) -> np.ndarray:
    """Eval-mode attention weights of the first layer's first head,
    exposed for diagnostics: [T, T] row-stochastic over valid columns."""
    ids = np.asarray(ids, dtype=np.int64)
    T = ids.shape[0]
    x = ad.layer_norm(
        ad.add(
            ad.add(
                ad.embedding_lookup(weights["embeddings.token"], ids),
                ad.slice_axis(weights["embeddings.position"], 0, 0, T),
            ),
            ad.embedding_lookup(
                weights["embeddings.segment"], np.asarray(segment_ids, dtype=np.int64)
            ),
        ),
        weights["embeddings.ln.gain"],
        weights["embeddings.ln.bias"],
    )
    dh = config.head_dim
    q = ad.slice_axis(_linear(x, weights, "layer0.attn.q"), 1, 0, dh)
    k = ad.slice_axis(_linear(x, weights, "layer0.attn.k"), 1, 0, dh)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
    valid = np.arange(T) < attention_length
    return ad.softmax(scores, axis=-1, mask=valid).data


@dataclass(frozen=True)
class PretrainStats:
    """Per-instance diagnostics reported alongside the joint loss."""

    mlm_loss: float
    nsp_loss: float
    mlm_correct: int
    mlm_total: int
    nsp_correct: bool


def mlm_logits(
    hidden: Tensor, positions, weights: EncoderWeights
) -> Tensor:
    """Vocabulary logits at the given positions: transform with gelu and
    layer norm, then the tied output projection plus its free bias."""
    gathered = ad.embedding_lookup(
        hidden, np.asarray(positions, dtype=np.int64)
    )
    t = ad.gelu(ad.add(ad.matmul(gathered, weights["mlm.transform.w"]),
                       weights["mlm.transform.b"]))
    t = ad.layer_norm(t, weights["mlm.ln.gain"], weights["mlm.ln.bias"])
    return ad.add(
        ad.matmul(t, ad.transpose(weights["embeddings.token"])),
        weights["mlm.out.bias"],
    )


def mlm_nsp_loss(
    hidden: Tensor,
    instance: PretrainInstance,
    weights: EncoderWeights,
) -> tuple[Tensor, PretrainStats]:
    """Joint loss: masked-token cross-entropy (tied output projection)
    plus 2-way NSP cross-entropy on the pooled CLS vector.

    Returns the scalar loss tensor and per-component diagnostics.
    """
    if not instance.mlm_positions:
        raise ContractError("instance has no masked positions")
    labels = np.asarray(instance.mlm_labels, dtype=np.int64)

    logits = mlm_logits(hidden, instance.mlm_positions, weights)
    mlm_loss = ad.cross_entropy(logits, labels)
    mlm_correct = int((logits.data.argmax(axis=1) == labels).sum())

    cls = ad.slice_axis(hidden, 0, 0, 1)
    pooled = ad.tanh(ad.add(ad.matmul(cls, weights["pooler.w"]), weights["pooler.b"]))
    nsp_logits = ad.add(ad.matmul(pooled, weights["nsp.w"]), weights["nsp.b"])
    target = NSP_CLASS[instance.nsp_label]
    nsp_loss = ad.cross_entropy(nsp_logits, np.array([target]))
    nsp_correct = bool(int(nsp_logits.data.argmax(axis=1)[0]) == target)

    stats = PretrainStats(
        mlm_loss=float(mlm_loss.data),
        nsp_loss=float(nsp_loss.data),
        mlm_correct=mlm_correct,
        mlm_total=len(instance.mlm_positions),
        nsp_correct=nsp_correct,
    )
    return ad.add(mlm_loss, nsp_loss), stats


def pretrain_loss(
    instance: PretrainInstance,
    weights: EncoderWeights,
    config: BertConfig,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, PretrainStats]:
    """Encode one masked instance and evaluate the joint MLM+NSP loss."""
    hidden = encode(
        instance.ids,
        instance.segment_ids,
        instance.attention_length,
        weights,
        config,
        mode=mode,
        rng=rng,
    )
    return mlm_nsp_loss(hidden, instance, weights)
