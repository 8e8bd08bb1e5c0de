"""Pre-transformer reference models over frozen word vectors.

Two architectures: a sequence tagger stacking a character-level
convolution, a two-layer bidirectional LSTM, and a linear-chain CRF;
and a decomposable-attention pair classifier that soft-aligns the two
sentences and aggregates compared token pairs. Word vectors come from
a plain-text table and stay fixed during training; out-of-vocabulary
words map to the zero vector, so the character convolution (tagger)
and the attention stack (pair model) carry the trainable signal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import crf as crf_mod
from .autodiff import Tape, Tensor
from .bert import truncated_normal
from .crf import CrfParams
from .errors import ConfigError, ContractError, DataError, ParseError
from .finetune import (
    NLI_LABEL_IDS,
    NLI_LABELS,
    FinetuneRunConfig,
    NliPair,
    TaggedSentence,
)
from .trainer import AdamState, GridSpec, adam_step, collect_grads

logger = logging.getLogger("hellm.baselines")

CHAR_PAD = 0
CHAR_UNK = 1
CNN_WIDTH = 3
BASELINE_INIT_STD = 0.1

DEFAULT_TAGGER_GRID = GridSpec(
    axes={
        "hidden": [100, 200, 300],
        "lr": [1e-2, 1e-3],
        "dropout": [0.0, 0.1, 0.2, 0.3],
        "batch_size": [16, 32, 64],
    }
)
DEFAULT_DAM_GRID = GridSpec(
    axes={
        "lr": [1e-2, 1e-3, 1e-4],
        "dropout": [0.0, 0.1, 0.2, 0.3],
        "batch_size": [16, 32, 64],
    }
)


# ---------------------------------------------------------------------------
# Word-vector table


@dataclass
class WordVectors:
    """Frozen word-vector table; unknown words map to the zero vector."""

    dim: int
    table: dict[str, np.ndarray]

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"vector dimension must be >= 1, got {self.dim}")

    def get(self, word: str) -> np.ndarray:
        vec = self.table.get(word)
        if vec is None:
            return np.zeros(self.dim, dtype=np.float32)
        return vec

    def __len__(self) -> int:
        return len(self.table)


def load_word_vectors(path: str | Path) -> WordVectors:
    """Parse a text table: a 'count dim' header line, then one
    'word v1 ... v_dim' row per line, whitespace separated."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 2:
            raise ParseError(
                f"expected 'count dim' header, got {header.strip()!r}", line=1
            )
        try:
            count, dim = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(
                f"expected 'count dim' header, got {header.strip()!r}", line=1
            ) from None
        if count < 0 or dim < 1:
            raise ParseError(
                f"header needs count >= 0 and dim >= 1, got {count} {dim}",
                line=1,
            )
        table: dict[str, np.ndarray] = {}
        lineno = 1
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != dim + 1:
                raise ParseError(
                    f"expected a word and {dim} values, got "
                    f"{len(fields)} fields",
                    line=lineno,
                )
            try:
                vec = np.array([float(v) for v in fields[1:]], dtype=np.float32)
            except ValueError as exc:
                raise ParseError(f"bad number: {exc}", line=lineno) from None
            table[fields[0]] = vec
    if len(table) != count:
        raise ParseError(
            f"header declares {count} vectors, file holds {len(table)}",
            line=lineno,
        )
    return WordVectors(dim=dim, table=table)


def write_word_vectors(path: str | Path, vectors: WordVectors) -> None:
    """Write the text format; float32 values survive a write-then-load
    round trip exactly (shortest decimal repr)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(vectors.table)} {vectors.dim}\n")
        for word, vec in vectors.table.items():
            if vec.shape != (vectors.dim,):
                raise ContractError(
                    f"vector for {word!r} has shape {vec.shape}, expected "
                    f"({vectors.dim},)"
                )
            values = " ".join(repr(float(v)) for v in vec)
            fh.write(f"{word} {values}\n")


# ---------------------------------------------------------------------------
# Character convolution


def build_char_vocab(words) -> dict[str, int]:
    """Character inventory to dense ids; 0 is padding, 1 is unknown."""
    chars = sorted({ch for word in words for ch in word})
    return {ch: i + 2 for i, ch in enumerate(chars)}


def char_cnn(
    word: str, char_vocab: dict[str, int], params: dict[str, Tensor]
) -> Tensor:
    """[1, n_filters] word feature: embed characters, slide width-3
    windows, relu, max-pool over windows. Words shorter than one window
    are right-padded with the padding character."""
    if not word:
        raise ContractError("char_cnn: empty word")
    ids = [char_vocab.get(ch, CHAR_UNK) for ch in word]
    while len(ids) < CNN_WIDTH:
        ids.append(CHAR_PAD)
    emb = ad.embedding_lookup(
        params["char.table"], np.asarray(ids, dtype=np.int64)
    )
    windows = []
    for t in range(len(ids) - CNN_WIDTH + 1):
        parts = [
            ad.slice_axis(emb, 0, t + k, t + k + 1) for k in range(CNN_WIDTH)
        ]
        windows.append(ad.concat(parts, axis=1))
    stacked = windows[0] if len(windows) == 1 else ad.concat(windows, axis=0)
    conv = ad.relu(
        ad.add(ad.matmul(stacked, params["char.filters"]), params["char.bias"])
    )
    return ad.reduce_max(conv, axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# Bidirectional LSTM


def lstm_direction(
    xs: Tensor, w: Tensor, u: Tensor, b: Tensor, reverse: bool = False
) -> Tensor:
    """[T, H] hidden states of one scan direction. The packed projection
    xs @ w + h @ u + b holds the gates in i, f, g, o order."""
    T = xs.shape[0]
    size = u.shape[0]
    h = Tensor(np.zeros((1, size), dtype=np.float32))
    c = Tensor(np.zeros((1, size), dtype=np.float32))
    outputs: list[Tensor | None] = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        x_t = ad.slice_axis(xs, 0, t, t + 1)
        z = ad.add(ad.add(ad.matmul(x_t, w), ad.matmul(h, u)), b)
        i_gate = ad.sigmoid(ad.slice_axis(z, 1, 0, size))
        f_gate = ad.sigmoid(ad.slice_axis(z, 1, size, 2 * size))
        g_cell = ad.tanh(ad.slice_axis(z, 1, 2 * size, 3 * size))
        o_gate = ad.sigmoid(ad.slice_axis(z, 1, 3 * size, 4 * size))
        c = ad.add(ad.mul(f_gate, c), ad.mul(i_gate, g_cell))
        h = ad.mul(o_gate, ad.tanh(c))
        outputs[t] = h
    return outputs[0] if T == 1 else ad.concat(outputs, axis=0)


def bilstm(
    xs: Tensor,
    params: dict[str, Tensor],
    layers: int,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> Tensor:
    """[T, 2H] stacked bidirectional features; layer inputs are dropped
    out during training."""
    out = xs
    for layer in range(layers):
        inp = ad.dropout(out, dropout, rng) if mode == "train" else out
        fw = lstm_direction(
            inp,
            params[f"lstm{layer}.fw.w"],
            params[f"lstm{layer}.fw.u"],
            params[f"lstm{layer}.fw.b"],
        )
        bw = lstm_direction(
            inp,
            params[f"lstm{layer}.bw.w"],
            params[f"lstm{layer}.bw.u"],
            params[f"lstm{layer}.bw.b"],
            reverse=True,
        )
        out = ad.concat([fw, bw], axis=1)
    return out


# ---------------------------------------------------------------------------
# Tagger model


@dataclass(frozen=True)
class TaggerConfig:
    """Shapes for the char-convolution + BiLSTM + CRF tagger."""

    word_dim: int
    hidden: int
    n_labels: int
    char_dim: int = 30
    char_filters: int = 30
    layers: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        sizes = (
            self.word_dim, self.hidden, self.n_labels, self.char_dim,
            self.char_filters, self.layers,
        )
        if min(sizes) < 1:
            raise ConfigError(f"tagger sizes must be positive, got {sizes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class TaggerModel:
    """Trainable parameters plus the character inventory."""

    config: TaggerConfig
    char_vocab: dict[str, int]
    params: dict[str, Tensor]

    @property
    def crf(self) -> CrfParams:
        return CrfParams(self.params["crf.transitions"])


def _param(rng, shape, name, std=BASELINE_INIT_STD) -> Tensor:
    return Tensor(
        truncated_normal(rng, shape, std=std), requires_grad=True, name=name
    )


def _zeros(shape, name) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True, name=name)


def make_tagger(
    config: TaggerConfig, char_vocab: dict[str, int], seed: int = 0
) -> TaggerModel:
    """Fresh tagger parameters; LSTM forget-gate biases start at 1 so
    early training keeps cell memory open."""
    rng = np.random.default_rng(seed)
    n_chars = len(char_vocab) + 2
    h = config.hidden
    params = {
        "char.table": _param(rng, (n_chars, config.char_dim), "char.table"),
        "char.filters": _param(
            rng, (CNN_WIDTH * config.char_dim, config.char_filters),
            "char.filters",
        ),
        "char.bias": _zeros(config.char_filters, "char.bias"),
    }
    in_dim = config.word_dim + config.char_filters
    for layer in range(config.layers):
        for direction in ("fw", "bw"):
            prefix = f"lstm{layer}.{direction}"
            params[f"{prefix}.w"] = _param(rng, (in_dim, 4 * h), f"{prefix}.w")
            params[f"{prefix}.u"] = _param(rng, (h, 4 * h), f"{prefix}.u")
            bias = np.zeros(4 * h, dtype=np.float32)
            bias[h : 2 * h] = 1.0
            params[f"{prefix}.b"] = Tensor(
                bias, requires_grad=True, name=f"{prefix}.b"
            )
        in_dim = 2 * h
    params["emit.w"] = _param(rng, (2 * h, config.n_labels), "emit.w")
    params["emit.b"] = _zeros(config.n_labels, "emit.b")
    params["crf.transitions"] = CrfParams.create(config.n_labels, rng).transitions
    return TaggerModel(config=config, char_vocab=char_vocab, params=params)


def tagger_emissions(
    words: Sequence[str],
    vectors: WordVectors,
    model: TaggerModel,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """[T, n_labels] per-word label scores."""
    if not words:
        raise ContractError("tagger needs at least one word")
    config = model.config
    if vectors.dim != config.word_dim:
        raise ConfigError(
            f"word vectors have dim {vectors.dim}, tagger expects "
            f"{config.word_dim}"
        )
    reps = []
    for word in words:
        wv = Tensor(vectors.get(word)[None, :])
        cv = char_cnn(word, model.char_vocab, model.params)
        reps.append(ad.concat([wv, cv], axis=1))
    xs = reps[0] if len(reps) == 1 else ad.concat(reps, axis=0)
    feats = bilstm(
        xs, model.params, config.layers, mode=mode, rng=rng,
        dropout=config.dropout,
    )
    return ad.add(
        ad.matmul(feats, model.params["emit.w"]), model.params["emit.b"]
    )


def _label_ids(labels, label_map) -> np.ndarray:
    try:
        return np.array([label_map[l] for l in labels], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]!r} missing from label map") from None


def tagger_loss(
    sentence: TaggedSentence,
    vectors: WordVectors,
    model: TaggerModel,
    label_map: dict[str, int],
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Per-word CRF negative log-likelihood."""
    emissions = tagger_emissions(
        sentence.words, vectors, model, mode=mode, rng=rng
    )
    ids = _label_ids(sentence.labels, label_map)
    ll = crf_mod.log_likelihood(emissions, ids, model.crf)
    return ad.scale(ll, -1.0 / len(sentence.words))


def tag(
    words: Sequence[str], vectors: WordVectors, model: TaggerModel
) -> np.ndarray:
    """Viterbi-decoded label ids."""
    emissions = tagger_emissions(words, vectors, model)
    path, _ = crf_mod.viterbi(emissions.data, model.crf)
    return path


def evaluate_tagger(
    sentences: Sequence[TaggedSentence],
    vectors: WordVectors,
    model: TaggerModel,
    label_map: dict[str, int],
) -> tuple[float, list[np.ndarray]]:
    """Word-level accuracy and per-sentence predicted label ids."""
    correct = total = 0
    outputs = []
    for sent in sentences:
        pred = tag(sent.words, vectors, model)
        gold = _label_ids(sent.labels, label_map)
        outputs.append(pred)
        correct += int((pred == gold).sum())
        total += gold.shape[0]
    return correct / total, outputs


# ---------------------------------------------------------------------------
# Decomposable attention


@dataclass(frozen=True)
class DamConfig:
    """Shapes for the decomposable-attention classifier. Setting
    positions appends a one-hot position block to each word vector;
    without it the model is order-invariant by construction."""

    word_dim: int
    hidden: int = 200
    positions: bool = False
    max_positions: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        if min(self.word_dim, self.hidden, self.max_positions) < 1:
            raise ConfigError("dam sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def input_dim(self) -> int:
        return self.word_dim + (self.max_positions if self.positions else 0)


@dataclass
class DamModel:
    """Attend/compare/aggregate parameters."""

    config: DamConfig
    params: dict[str, Tensor]


def make_dam(config: DamConfig, seed: int = 0) -> DamModel:
    """Fresh parameters: attend (F), compare (G), and aggregate (H) are
    each one-hidden-layer relu nets of config.hidden units; H projects
    to the 3 labels."""
    rng = np.random.default_rng(seed)
    d = config.input_dim
    h = config.hidden
    params: dict[str, Tensor] = {}
    blocks = (
        ("attend", d, h),
        ("compare", 2 * d, h),
        ("aggregate", 2 * h, len(NLI_LABELS)),
    )
    for name, in_dim, out_dim in blocks:
        params[f"{name}.w1"] = _param(rng, (in_dim, h), f"{name}.w1")
        params[f"{name}.b1"] = _zeros(h, f"{name}.b1")
        params[f"{name}.w2"] = _param(rng, (h, out_dim), f"{name}.w2")
        params[f"{name}.b2"] = _zeros(out_dim, f"{name}.b2")
    return DamModel(config=config, params=params)


def _mlp(x, params, prefix, mode, rng, rate) -> Tensor:
    """One-hidden-layer relu block; input and hidden are dropped out
    during training."""
    if mode == "train":
        x = ad.dropout(x, rate, rng)
    hidden = ad.relu(
        ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])
    )
    if mode == "train":
        hidden = ad.dropout(hidden, rate, rng)
    return ad.add(ad.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _embed_sentence(words: list[str], vectors: WordVectors, config: DamConfig) -> Tensor:
    if not words:
        raise ContractError("pair model needs non-empty sentences")
    if config.positions and len(words) > config.max_positions:
        raise ContractError(
            f"sentence of {len(words)} words exceeds max_positions="
            f"{config.max_positions}"
        )
    rows = np.stack([vectors.get(w) for w in words]).astype(np.float32)
    if config.positions:
        pos = np.zeros((len(words), config.max_positions), dtype=np.float32)
        pos[np.arange(len(words)), np.arange(len(words))] = 1.0
        rows = np.concatenate([rows, pos], axis=1)
    return Tensor(rows)


def _canonical_rowsum(v: Tensor) -> Tensor:
    """[1, H] column sums accumulated in a content-sorted row order, so
    the result is bitwise independent of input row permutation."""
    key = np.lexsort(v.data.T[::-1]).astype(np.int64)
    sorted_rows = ad.embedding_lookup(v, key)
    ones = Tensor(np.ones((1, v.shape[0]), dtype=np.float32))
    return ad.matmul(ones, sorted_rows)


@dataclass
class DamResult:
    """Logits plus the attention maps, attended averages, and pooled
    comparison vectors."""

    logits: Tensor
    loss: Tensor
    predicted: str
    premise_attention: np.ndarray
    hypothesis_attention: np.ndarray
    premise_attended: np.ndarray
    hypothesis_attended: np.ndarray
    s_p: Tensor
    s_q: Tensor


def dam_classify(
    pair: NliPair,
    vectors: WordVectors,
    model: DamModel,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> DamResult:
    """Attend, compare, aggregate. Each premise token attends over the
    hypothesis (attention rows sum to 1) and vice versa; every token is
    compared with its attended summary, compared vectors are summed per
    side, and the concatenated sums produce the 3-way logits."""
    config = model.config
    if vectors.dim != config.word_dim:
        raise ConfigError(
            f"word vectors have dim {vectors.dim}, model expects "
            f"{config.word_dim}"
        )
    p = _embed_sentence(pair.premise.split(), vectors, config)
    q = _embed_sentence(pair.hypothesis.split(), vectors, config)
    params = model.params
    fp = _mlp(p, params, "attend", mode, rng, config.dropout)
    fq = _mlp(q, params, "attend", mode, rng, config.dropout)
    scores = ad.matmul(fp, ad.transpose(fq))
    attn_p = ad.softmax(scores, axis=1)
    attn_q = ad.softmax(ad.transpose(scores), axis=1)
    beta = ad.matmul(attn_p, q)
    alpha = ad.matmul(attn_q, p)
    v_p = _mlp(
        ad.concat([p, beta], axis=1), params, "compare", mode, rng,
        config.dropout,
    )
    v_q = _mlp(
        ad.concat([q, alpha], axis=1), params, "compare", mode, rng,
        config.dropout,
    )
    s_p = _canonical_rowsum(v_p)
    s_q = _canonical_rowsum(v_q)
    logits = _mlp(
        ad.concat([s_p, s_q], axis=1), params, "aggregate", mode, rng,
        config.dropout,
    )
    target = NLI_LABEL_IDS[pair.label]
    loss = ad.cross_entropy(logits, np.array([target]))
    predicted = NLI_LABELS[int(logits.data.argmax(axis=1)[0])]
    return DamResult(
        logits=logits,
        loss=loss,
        predicted=predicted,
        premise_attention=attn_p.data,
        hypothesis_attention=attn_q.data,
        premise_attended=beta.data,
        hypothesis_attended=alpha.data,
        s_p=s_p,
        s_q=s_q,
    )


def evaluate_dam(
    pairs: Sequence[NliPair], vectors: WordVectors, model: DamModel
) -> tuple[float, list[str]]:
    """Pair accuracy and predicted label strings."""
    correct = 0
    predictions = []
    for pair in pairs:
        result = dam_classify(pair, vectors, model)
        predictions.append(result.predicted)
        correct += int(result.predicted == pair.label)
    return correct / len(pairs), predictions


# ---------------------------------------------------------------------------
# Training loops


@dataclass
class BaselineResult:
    """Trained parameter set plus the evaluation trace."""

    params: dict[str, Tensor]
    steps_run: int
    accuracy_trace: list[tuple[int, float]]
    reached_target: bool


def _run_loop(n_examples, params, run, batch_loss, evaluate) -> BaselineResult:
    """Shared Adam loop: sample a batch, accumulate mean loss on the
    tape, step, and trace dev accuracy at the eval cadence."""
    state = AdamState.create(params, run.lr)
    seeds = np.random.SeedSequence(run.seed).generate_state(2)
    order_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])
    trace: list[tuple[int, float]] = []
    reached = False
    steps_run = 0
    for step in range(1, run.steps + 1):
        batch_idx = order_rng.integers(0, n_examples, size=run.batch_size)
        for t in params.values():
            t.zero_grad()
        with Tape() as tape:
            total = None
            for i in batch_idx:
                loss = batch_loss(int(i), drop_rng)
                total = loss if total is None else ad.add(total, loss)
            tape.backward(ad.scale(total, 1.0 / run.batch_size))
        adam_step(params, collect_grads(params), state)
        steps_run = step
        if run.target_accuracy is not None and step % run.eval_every == 0:
            accuracy = evaluate()
            trace.append((step, accuracy))
            logger.debug("step %d accuracy %.4f", step, accuracy)
            if accuracy >= run.target_accuracy:
                reached = True
                break
    if run.target_accuracy is None or not trace or trace[-1][0] != steps_run:
        accuracy = evaluate()
        trace.append((steps_run, accuracy))
        reached = reached or (
            run.target_accuracy is not None and accuracy >= run.target_accuracy
        )
    return BaselineResult(params, steps_run, trace, reached)


def train_tagger(
    train: Sequence[TaggedSentence],
    vectors: WordVectors,
    model: TaggerModel,
    label_map: dict[str, int],
    run: FinetuneRunConfig,
    dev: Sequence[TaggedSentence] | None = None,
) -> BaselineResult:
    """Adam over the full tagger; word vectors stay frozen."""
    if not train:
        raise DataError("training needs at least one sentence")
    dev_sents = list(dev) if dev is not None else list(train)

    def batch_loss(i, rng):
        return tagger_loss(
            train[i], vectors, model, label_map, mode="train", rng=rng
        )

    def evaluate():
        accuracy, _ = evaluate_tagger(dev_sents, vectors, model, label_map)
        return accuracy

    return _run_loop(len(train), model.params, run, batch_loss, evaluate)


def train_dam(
    train: Sequence[NliPair],
    vectors: WordVectors,
    model: DamModel,
    run: FinetuneRunConfig,
    dev: Sequence[NliPair] | None = None,
) -> BaselineResult:
    """Adam over the attend/compare/aggregate stack."""
    if not train:
        raise DataError("training needs at least one pair")
    dev_pairs = list(dev) if dev is not None else list(train)

    def batch_loss(i, rng):
        return dam_classify(train[i], vectors, model, mode="train", rng=rng).loss

    def evaluate():
        accuracy, _ = evaluate_dam(dev_pairs, vectors, model)
        return accuracy

    return _run_loop(len(train), model.params, run, batch_loss, evaluate)
