"""
Token embeddings: vocabulary, continuous bag-of-words training with negative
sampling, and pre-padded fixed-length encoding of token streams.
"""

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

from errors import DataError, EmptyCorpusError
from log_utils import is_quiet, log_metric, log_with_timestamp

SUBSAMPLE_VARIANTS = ("sqrt", "word2vec")
TRUNCATE_MODES = ("pre", "post")


def _tokens_of(item):
    return getattr(item, "tokens", item)


@dataclass
class Vocabulary:
    token_to_index: Dict[str, int]
    index_to_token: List[str]
    frequencies: Dict[str, int]
    total_tokens: int

    def __len__(self):
        return len(self.index_to_token)

    def index(self, token):
        """Index of token, -1 when out of vocabulary"""
        return self.token_to_index.get(token, -1)

    def counts(self):
        return np.array([self.frequencies[t] for t in self.index_to_token], dtype=np.int64)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as out:
            for index, token in enumerate(self.index_to_token):
                out.write(f"{token}\t{index}\t{self.frequencies[token]}\n")

    @classmethod
    def load(cls, path):
        index_to_token, frequencies = [], {}
        with open(path, "r", encoding="utf-8") as stream:
            for line in stream:
                token, index, freq = line.rstrip("\n").split("\t")
                if int(index) != len(index_to_token):
                    raise DataError(f"{path}: vocabulary indices are not dense at '{token}'")
                index_to_token.append(token)
                frequencies[token] = int(freq)
        return cls(
            token_to_index={t: i for i, t in enumerate(index_to_token)},
            index_to_token=index_to_token,
            frequencies=frequencies,
            total_tokens=sum(frequencies.values()),
        )


@dataclass
class CbowParams:
    dimension: int = 100
    window: int = 3
    downsample: float = 1e-3
    negatives: int = 5
    epochs: int = 5
    alpha: float = 0.025
    min_alpha: float = 1e-4
    seed: int = 1
    subsample_variant: str = "sqrt"
    workers: int = 1

    def __post_init__(self):
        if self.dimension < 1 or self.window < 1 or self.negatives < 1 or self.epochs < 0:
            raise ValueError(f"Invalid CBOW parameters: {self}")
        if self.subsample_variant not in SUBSAMPLE_VARIANTS:
            raise ValueError(f"subsample_variant must be one of {SUBSAMPLE_VARIANTS}")


@dataclass
class EmbeddingMatrix:
    vectors: np.ndarray
    params: CbowParams = field(default_factory=CbowParams)

    @property
    def dimension(self):
        return self.vectors.shape[1]

    def vector(self, vocab, token):
        return self.vectors[vocab.token_to_index[token]]

    def save(self, path, vocab):
        """Text format: 'V D' header, then token and D decimal floats per line"""
        with open(path, "w", encoding="utf-8", newline="\n") as out:
            out.write(f"{self.vectors.shape[0]} {self.vectors.shape[1]}\n")
            for token, row in zip(vocab.index_to_token, self.vectors):
                out.write(token + " " + " ".join(format(float(x), ".17g") for x in row) + "\n")

    @classmethod
    def load(cls, path, vocab=None):
        with open(path, "r", encoding="utf-8") as stream:
            size, dim = (int(v) for v in stream.readline().split())
            vectors = np.zeros((size, dim), dtype=np.float64)
            for i in range(size):
                parts = stream.readline().rstrip("\n").rsplit(" ", dim)
                if vocab is not None and parts[0] != vocab.index_to_token[i]:
                    raise DataError(f"{path}: row {i} is '{parts[0]}', vocabulary says "
                                    f"'{vocab.index_to_token[i]}'")
                vectors[i] = [float(x) for x in parts[1:]]
        return cls(vectors=vectors, params=CbowParams(dimension=dim))


@dataclass
class EncodedSample:
    matrix: np.ndarray
    label: Optional[int]
    true_length: int


def build_vocabulary(corpus):
    """Every distinct token, indexed in order of first occurrence"""
    token_to_index, frequencies = {}, {}
    total = 0
    for item in corpus:
        for token in _tokens_of(item):
            if token not in token_to_index:
                token_to_index[token] = len(token_to_index)
                frequencies[token] = 0
            frequencies[token] += 1
            total += 1
    if total == 0:
        raise EmptyCorpusError("Cannot build a vocabulary from an empty corpus")
    return Vocabulary(token_to_index, list(token_to_index), frequencies, total)


def subsample_keep_probability(token_freq, total, rate=1e-3, variant="sqrt"):
    """Probability of keeping one occurrence of a token during CBOW training"""
    if token_freq < 1:
        raise ValueError(f"token_freq must be >= 1, got {token_freq}")
    if rate <= 0:
        return 1.0
    f = token_freq / total
    if variant == "sqrt":
        p = math.sqrt(rate / f)
    elif variant == "word2vec":
        p = (math.sqrt(f / rate) + 1.0) * rate / f
    else:
        raise ValueError(f"Unknown subsampling variant '{variant}'")
    return min(1.0, p)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def cbow_loss_and_gradients(w_in, w_out, context, center, negatives):
    """
    Negative-sampling loss of predicting `center` from the mean of the `context`
    input vectors. Returns (loss, grad rows for w_in[context], grad rows for
    w_out[[center, *negatives]]).
    """
    context = np.asarray(context)
    targets = np.concatenate(([center], np.asarray(negatives, dtype=np.int64)))
    h = w_in[context].mean(axis=0)
    scores = w_out[targets] @ h
    signs = np.ones(len(targets))
    signs[1:] = -1.0
    loss = -np.sum(_log_sigmoid(signs * scores))

    sig = 1.0 / (1.0 + np.exp(-scores))
    labels = np.zeros(len(targets))
    labels[0] = 1.0
    g = sig - labels
    grad_h = g @ w_out[targets]
    grad_in = np.tile(grad_h / len(context), (len(context), 1))
    grad_out = g[:, None] * h[None, :]
    return float(loss), grad_in, grad_out


class _CbowTrainer:
    def __init__(self, streams, vocab, params, w_in, w_out):
        self.streams = streams
        self.params = params
        self.w_in = w_in
        self.w_out = w_out
        counts = vocab.counts()
        self.keep = np.array([
            subsample_keep_probability(c, vocab.total_tokens, params.downsample,
                                       params.subsample_variant)
            for c in counts
        ])
        noise = counts.astype(np.float64) ** 0.75
        self.noise = noise / noise.sum()
        self.total_work = max(1, params.epochs * sum(len(s) for s in streams))
        self.done = 0
        self.lock = threading.Lock()

    def alpha(self):
        p = self.params
        progress = min(1.0, self.done / self.total_work)
        return max(p.min_alpha, p.alpha - (p.alpha - p.min_alpha) * progress)

    def train_stream(self, stream, rng):
        p = self.params
        kept = stream[rng.random(len(stream)) < self.keep[stream]]
        negatives = rng.choice(len(self.noise), size=(len(kept), p.negatives), p=self.noise)
        alpha = self.alpha()
        loss, steps = 0.0, 0
        for pos, center in enumerate(kept):
            context = np.concatenate((kept[max(0, pos - p.window):pos], kept[pos + 1:pos + 1 + p.window]))
            if len(context) == 0:
                continue
            negs = negatives[pos][negatives[pos] != center]
            step_loss, grad_in, grad_out = cbow_loss_and_gradients(
                self.w_in, self.w_out, context, center, negs)
            targets = np.concatenate(([center], negs))
            np.subtract.at(self.w_out, targets, alpha * grad_out)
            np.subtract.at(self.w_in, context, alpha * grad_in)
            loss += step_loss
            steps += 1
        with self.lock:
            self.done += len(stream)
        return loss, steps


def train_cbow(corpus, vocab, params=None):
    """Train CBOW input vectors; deterministic for a fixed seed when workers == 1"""
    params = params or CbowParams()
    streams = [
        np.array([vocab.token_to_index[t] for t in _tokens_of(item) if t in vocab.token_to_index],
                 dtype=np.int64)
        for item in corpus
    ]
    if not streams or params.window > max(len(s) for s in streams):
        raise DataError(f"Context window {params.window} is larger than every token stream")

    dim = params.dimension
    rng = np.random.default_rng(params.seed)
    w_in = rng.uniform(-0.5 / dim, 0.5 / dim, size=(len(vocab), dim))
    w_out = np.zeros((len(vocab), dim))

    if params.epochs == 0 or len(vocab) < 2:
        log_with_timestamp("⚠️  CBOW training skipped (no epochs or single-token vocabulary)")
        return EmbeddingMatrix(vectors=w_in, params=params)

    trainer = _CbowTrainer(streams, vocab, params, w_in, w_out)
    log_with_timestamp(f"🚀 Training CBOW: V={len(vocab)} D={dim} window={params.window} "
                       f"epochs={params.epochs} workers={params.workers}")

    for epoch in tqdm(range(1, params.epochs + 1), desc="cbow", disable=is_quiet() or None):
        order = rng.permutation(len(streams))
        if params.workers <= 1:
            results = [trainer.train_stream(streams[i], rng) for i in order]
        else:
            # Lock-free shared updates; results vary between runs
            seeds = np.random.SeedSequence(params.seed + epoch).spawn(params.workers)
            shards = np.array_split(order, params.workers)

            def run(shard, seed):
                local = np.random.default_rng(seed)
                return [trainer.train_stream(streams[i], local) for i in shard]

            with ThreadPoolExecutor(max_workers=params.workers) as pool:
                results = [r for part in pool.map(run, shards, seeds) for r in part]
        loss = sum(r[0] for r in results)
        steps = sum(r[1] for r in results)
        log_metric("cbow_epoch", epoch=epoch, loss=round(loss / max(1, steps), 6),
                   alpha=round(trainer.alpha(), 6))

    if not np.all(np.isfinite(w_in)):
        raise DataError("CBOW training produced non-finite vectors")
    return EmbeddingMatrix(vectors=w_in, params=params)


def encode_indices(tokens, vocab, seq_len=1000, truncate="pre"):
    """
    Vocabulary indices right-aligned in a seq_len row; -1 marks padding and unknown
    tokens (both encode as the zero vector). 'pre' truncation keeps the final tokens.
    """
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    if truncate not in TRUNCATE_MODES:
        raise ValueError(f"truncate must be one of {TRUNCATE_MODES}")
    tokens = list(_tokens_of(tokens))
    if len(tokens) > seq_len:
        tokens = tokens[-seq_len:] if truncate == "pre" else tokens[:seq_len]
    row = np.full(seq_len, -1, dtype=np.int64)
    if tokens:
        row[seq_len - len(tokens):] = [vocab.index(t) for t in tokens]
    return row


def _lookup_table(vectors):
    # Last row is the zero vector, so index -1 selects it
    return np.vstack([vectors, np.zeros((1, vectors.shape[1]))])


def encode_sample(tokens, vocab, emb, seq_len=1000, label=None, truncate="pre"):
    tokens = list(_tokens_of(tokens))
    row = encode_indices(tokens, vocab, seq_len, truncate)
    matrix = _lookup_table(emb.vectors)[row]
    return EncodedSample(matrix=matrix, label=label, true_length=min(len(tokens), seq_len))


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise ValueError("Cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


@dataclass
class EncodedDataset:
    """Pre-padded index matrix plus labels; float batches are built on demand"""
    indices: np.ndarray
    labels: np.ndarray
    vectors: np.ndarray
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self._table = _lookup_table(self.vectors)

    def __len__(self):
        return len(self.labels)

    @property
    def seq_len(self):
        return self.indices.shape[1]

    @property
    def dimension(self):
        return self.vectors.shape[1]

    def inputs(self, rows=None):
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        return self._table[self.indices[rows]]

    def batch(self, rows):
        rows = np.asarray(rows)
        return self.inputs(rows), self.labels[rows]

    def subset(self, rows):
        rows = np.asarray(rows)
        return EncodedDataset(self.indices[rows], self.labels[rows], self.vectors,
                              [self.ids[i] for i in rows] if self.ids else [])


def encode_dataset(samples, vocab, emb, seq_len=1000, truncate="pre"):
    indices = np.stack([encode_indices(s.tokens, vocab, seq_len, truncate) for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return EncodedDataset(indices, labels, emb.vectors, [s.id for s in samples])
