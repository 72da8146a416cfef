"""Toy corpora with latent cluster structure, text loading and BERT-style masking.

Token ids 0 and 1 are reserved for padding and the mask token; content ids
start at 2.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import MASK_ID, PAD_ID
from .tensor import Rng

NUM_SPECIALS = 2
UNK_ID = 2  # whitespace tokenisation only


@dataclass
class SyntheticCorpusSpec:
    vocab_size: int = 256
    num_clusters: int = 8
    tokens_per_cluster: int = 16
    sequences: int = 2048
    seq_len: int = 64
    cluster_purity: float = 0.8
    seed: int = 0
    val_fraction: float = 0.05
    mask_rate: float = 0.15

    def validate(self) -> None:
        if self.num_clusters < 1 or self.tokens_per_cluster < 1:
            raise ValueError("need at least one cluster with at least one token")
        if self.num_clusters * self.tokens_per_cluster > self.vocab_size - NUM_SPECIALS:
            raise ValueError(
                f"{self.num_clusters} clusters x {self.tokens_per_cluster} tokens do not fit in "
                f"{self.vocab_size - NUM_SPECIALS} non-special ids"
            )
        if not 0.0 < self.cluster_purity <= 1.0:
            raise ValueError("cluster_purity must lie in (0, 1]")
        if self.sequences < 1 or self.seq_len < 1:
            raise ValueError("sequences and seq_len must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Corpus:
    tokens: np.ndarray  # [S, T] int64
    clusters: np.ndarray | None = None  # [S] latent cluster per sequence
    vocab_size: int = 0


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    target_ids: np.ndarray
    mask_flags: np.ndarray
    originals: np.ndarray


def cluster_block(spec: SyntheticCorpusSpec, c: int) -> tuple[int, int]:
    start = NUM_SPECIALS + c * spec.tokens_per_cluster
    return start, start + spec.tokens_per_cluster


def gen_synthetic(spec: SyntheticCorpusSpec) -> Corpus:
    """Each sequence picks a latent cluster; each position draws from that
    cluster's id block with probability ``cluster_purity``, otherwise uniformly
    over all content ids."""
    spec.validate()
    rng = Rng(spec.seed, ("corpus",))
    S, T = spec.sequences, spec.seq_len
    clusters = rng.child("cluster").integers(0, spec.num_clusters, size=S)
    in_block = rng.child("purity").random((S, T)) < spec.cluster_purity
    offsets = rng.child("offset").integers(0, spec.tokens_per_cluster, size=(S, T))
    block_ids = NUM_SPECIALS + clusters[:, None] * spec.tokens_per_cluster + offsets
    noise = rng.child("noise").integers(NUM_SPECIALS, spec.vocab_size, size=(S, T))
    tokens = np.where(in_block, block_ids, noise).astype(np.int64)
    return Corpus(tokens=tokens, clusters=clusters.astype(np.int64), vocab_size=spec.vocab_size)


def split_indices(num_sequences: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split of sequence indices (validation at least one when possible)."""
    order = Rng(seed, ("split",)).permutation(num_sequences)
    n_val = int(round(num_sequences * val_fraction))
    if val_fraction > 0 and n_val == 0 and num_sequences > 1:
        n_val = 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def eval_token_set(val_tokens: np.ndarray, max_tokens: int = 4096) -> np.ndarray:
    """The fixed sequences covering the first ``max_tokens`` validation tokens."""
    T = val_tokens.shape[1]
    return val_tokens[: max(1, math.ceil(max_tokens / T))]


def mask_tokens(
    seqs,
    rng: Rng,
    mask_rate: float = 0.15,
    mask_id: int = MASK_ID,
    vocab_size: int | None = None,
    num_specials: int = NUM_SPECIALS,
) -> MaskedBatch:
    """80/10/10 masking of non-special positions.

    A sequence that draws no masked position gets exactly one, chosen uniformly
    among its maskable positions.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must lie in (0, 1)")
    orig = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    if vocab_size is None:
        vocab_size = int(orig.max()) + 1
    maskable = orig >= num_specials
    if not maskable.any(axis=1).all():
        raise ValueError("no maskable positions in at least one sequence")
    chosen = (rng.child("select").random(orig.shape) < mask_rate) & maskable
    fallback = rng.child("fallback")
    for r in np.flatnonzero(~chosen.any(axis=1)):
        candidates = np.flatnonzero(maskable[r])
        chosen[r, candidates[fallback.integers(0, candidates.size)]] = True
    action = rng.child("action").random(orig.shape)
    random_ids = rng.child("random").integers(num_specials, vocab_size, size=orig.shape)
    inputs = orig.copy()
    inputs[chosen & (action < 0.8)] = mask_id
    swap = chosen & (action >= 0.8) & (action < 0.9)
    inputs[swap] = random_ids[swap]
    return MaskedBatch(input_ids=inputs, target_ids=orig.copy(), mask_flags=chosen, originals=orig)


def load_text_corpus(path, tokenization: str = "byte", seq_len: int = 64, max_vocab: int = 4096) -> tuple[Corpus, list[str]]:
    """Tokenise a text file and chunk it into ``seq_len`` rows, padding the last.

    Byte mode maps byte ``b`` to id ``b + 2``. Whitespace mode keeps the
    ``max_vocab - 3`` most frequent words (ties by first appearance) and maps
    the rest to an unknown id. Returns the corpus and the id -> string vocab.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    if tokenization == "byte":
        ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64) + NUM_SPECIALS
        vocab = ["<pad>", "<mask>"] + [bytes([b]).decode("latin-1") for b in range(256)]
    elif tokenization == "whitespace":
        words = raw.decode("utf-8").split()
        counts = Counter(words)
        first = {}
        for i, w in enumerate(words):
            first.setdefault(w, i)
        ranked = sorted(counts, key=lambda w: (-counts[w], first[w]))[: max(0, max_vocab - 3)]
        vocab = ["<pad>", "<mask>", "<unk>"] + ranked
        index = {w: i + 3 for i, w in enumerate(ranked)}
        ids = np.array([index.get(w, UNK_ID) for w in words], dtype=np.int64)
    else:
        raise ValueError(f"unknown tokenization {tokenization!r}")
    if ids.size == 0:
        raise ValueError(f"corpus {path} is empty")
    rows = math.ceil(ids.size / seq_len)
    tokens = np.full(rows * seq_len, PAD_ID, dtype=np.int64)
    tokens[: ids.size] = ids
    return Corpus(tokens=tokens.reshape(rows, seq_len), vocab_size=len(vocab)), vocab


def detokenize_bytes(ids) -> bytes:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    ids = ids[ids >= NUM_SPECIALS]
    return bytes((ids - NUM_SPECIALS).astype(np.uint8).tolist())
