"""
Seqinit Text Encoder
Desk-scale bidirectional transformer over flattened item text

Items and user histories are turned into one token sequence:

    [CLS] key value value key value ... | key value ... | ...
           most recent item               older items

Every token carries four ids that are embedded and summed at the input:
the token itself, its absolute position, its type (CLS, attribute key or
attribute value) and the position of the item it belongs to (0 for CLS,
1 for the most recent item, 2 for the one before, ...). The final hidden
state of [CLS], L2-normalised, is the representation.
"""

import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import rec_tensor as T
from rec_checkpoint import Checkpoint, CheckpointError
from rec_corpus import ItemCatalog
from rec_layers import INIT_STD, Module, attention_mask, block_forward, init_block
from rec_tensor import Tensor

logger = logging.getLogger(__name__)

# Special token ids; learned tokens start right after them
PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ('[PAD]', '[CLS]', '[MASK]', '[UNK]')
NUM_SPECIAL = len(SPECIAL_TOKENS)

# Token type ids
TYPE_CLS = 0
TYPE_KEY = 1
TYPE_VALUE = 2
NUM_TYPES = 3


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------
@dataclass
class Tokenizer:
    """Lowercased whitespace tokenizer with a frequency-thresholded vocabulary"""
    vocab: Dict[str, int]
    min_frequency: int = 1

    @property
    def size(self) -> int:
        return len(self.vocab)

    def tokenize(self, text: str) -> List[int]:
        return [self.vocab.get(tok, UNK_ID) for tok in text.lower().split()]

    @staticmethod
    def is_special(token_id: int) -> bool:
        return token_id < NUM_SPECIAL

    def save(self, filepath: str):
        """Two-column text file: token <TAB> id (min_frequency in a comment line)"""
        with open(filepath, 'w', encoding='utf-8') as f:
            f.write(f"# min_frequency={self.min_frequency}\n")
            for token, token_id in sorted(self.vocab.items(), key=lambda kv: kv[1]):
                f.write(f"{token}\t{token_id}\n")

    @classmethod
    def load(cls, filepath: str) -> "Tokenizer":
        if not os.path.exists(filepath):
            raise FileNotFoundError(f"Tokenizer file not found: {filepath}")
        vocab = {}
        min_frequency = 1
        with open(filepath, 'r', encoding='utf-8') as f:
            for line_number, line in enumerate(f, start=1):
                line = line.rstrip('\n')
                if line.startswith('# min_frequency='):
                    min_frequency = int(line.split('=', 1)[1])
                    continue
                if not line:
                    continue
                parts = line.split('\t')
                if len(parts) != 2:
                    raise ValueError(f"{filepath}:{line_number}: expected token <TAB> id")
                vocab[parts[0]] = int(parts[1])
        return cls(vocab=vocab, min_frequency=min_frequency)


def build_tokenizer(catalog: ItemCatalog, min_frequency: int = 1) -> Tokenizer:
    """
    Vocabulary from every attribute key and value in the catalog.

    Learned tokens are sorted alphabetically so ids do not depend on
    catalog order; anything below min_frequency maps to [UNK].
    """
    if catalog.size == 0:
        raise ValueError("Cannot build a tokenizer from an empty catalog")
    counts = Counter()
    for pairs in catalog.items:
        for key, value in pairs:
            counts.update(key.lower().split())
            counts.update(value.lower().split())
    learned = sorted(tok for tok, c in counts.items() if c >= min_frequency)
    if not learned:
        raise ValueError(f"Empty vocabulary: no token reaches min_frequency={min_frequency}")
    vocab = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
    for tok in learned:
        vocab[tok] = len(vocab)
    logger.info("Built tokenizer: %d learned tokens (min_frequency=%d)", len(learned), min_frequency)
    return Tokenizer(vocab=vocab, min_frequency=min_frequency)


# ---------------------------------------------------------------------------
# Flattening
# ---------------------------------------------------------------------------
@dataclass
class FlatInput:
    token_ids: List[int] = field(default_factory=list)
    token_types: List[int] = field(default_factory=list)
    item_positions: List[int] = field(default_factory=list)
    attention_mask: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)

    def extend(self, other: "FlatInput", item_position: Optional[int] = None, limit: Optional[int] = None):
        n = len(other) if limit is None else min(limit, len(other))
        self.token_ids.extend(other.token_ids[:n])
        self.token_types.extend(other.token_types[:n])
        if item_position is None:
            self.item_positions.extend(other.item_positions[:n])
        else:
            self.item_positions.extend([item_position] * n)
        self.attention_mask.extend(other.attention_mask[:n])


def flatten_item(attributes: Sequence[Tuple[str, str]], tokenizer: Tokenizer) -> FlatInput:
    """Key tokens then value tokens for each attribute, in attribute order."""
    frag = FlatInput()
    for key, value in attributes:
        for ids, type_id in ((tokenizer.tokenize(key), TYPE_KEY), (tokenizer.tokenize(value), TYPE_VALUE)):
            frag.token_ids.extend(ids)
            frag.token_types.extend([type_id] * len(ids))
    frag.item_positions = [0] * len(frag.token_ids)
    frag.attention_mask = [1] * len(frag.token_ids)
    return frag


def flatten_history(prefix: Sequence[int], catalog: ItemCatalog, tokenizer: Tokenizer,
                    max_tokens: int) -> FlatInput:
    """
    [CLS] followed by the history most-recent-first.

    Older items are dropped whole once the budget runs out; only when the
    most recent item alone does not fit is it cut short.
    """
    if not prefix:
        raise ValueError("flatten_history needs a nonempty prefix")
    if max_tokens < 2:
        raise ValueError(f"max_tokens must leave room for [CLS] and one token, got {max_tokens}")

    flat = FlatInput(token_ids=[CLS_ID], token_types=[TYPE_CLS], item_positions=[0], attention_mask=[1])
    for position, item_id in enumerate(reversed(prefix), start=1):
        frag = flatten_item(catalog.attributes(item_id), tokenizer)
        remaining = max_tokens - len(flat)
        if len(frag) <= remaining:
            flat.extend(frag, item_position=position)
        else:
            if position == 1:
                flat.extend(frag, item_position=position, limit=remaining)
            break
    return flat


@dataclass
class TokenBatch:
    """Tail-padded (B, T) arrays"""
    token_ids: np.ndarray
    token_types: np.ndarray
    item_positions: np.ndarray
    attention_mask: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.token_ids.shape


def pad_batch(inputs: Sequence[FlatInput], length: Optional[int] = None) -> TokenBatch:
    length = length or max(len(x) for x in inputs)
    arrays = [np.zeros((len(inputs), length), dtype=np.int64) for _ in range(4)]
    for row, flat in enumerate(inputs):
        n = len(flat)
        if n > length:
            raise ValueError(f"Input of {n} tokens does not fit padded length {length}")
        for arr, values in zip(arrays, (flat.token_ids, flat.token_types,
                                        flat.item_positions, flat.attention_mask)):
            arr[row, :n] = values
    return TokenBatch(*arrays)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------
@dataclass
class EncoderConfig:
    vocab_size: int = 0
    layers: int = 6
    heads: int = 4
    d: int = 64
    max_tokens: int = 128
    ffn_mult: int = 4
    dropout: float = 0.1
    extra_embeddings: bool = True
    seed: int = 0

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.d

    def validate(self):
        if self.layers < 1:
            raise ValueError(f"Encoder needs at least one layer, got {self.layers}")
        if self.heads < 1 or self.d % self.heads:
            raise ValueError(f"Hidden size {self.d} is not divisible by {self.heads} heads")
        if self.vocab_size <= NUM_SPECIAL:
            raise ValueError(f"vocab_size {self.vocab_size} leaves no learned tokens")


# Full-size configuration, used for shape checks only
FULL_SCALE = dict(layers=12, heads=12, d=768)


@dataclass
class AttentionTrace:
    """
    Attention of the [CLS] query: weights[layer, head, token].

    Token annotations come from the FlatInput that produced the trace.
    """
    weights: np.ndarray
    token_ids: List[int]
    token_types: List[int]
    item_positions: List[int]
    description: str = ""

    @property
    def num_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def num_heads(self) -> int:
        return self.weights.shape[1]


class Encoder(Module):
    """
    RECFORMER-style text encoder.

    Parameters are named "embeddings.*", "layers.<i>.*", "final_ln.*" and
    "mlm.bias"; the MLM output projection is tied to the token embeddings.
    """

    def __init__(self, config: EncoderConfig, provenance: str = 'random'):
        super().__init__()
        config.validate()
        self.config = config
        self.provenance = provenance
        rng = np.random.default_rng(config.seed)
        d = config.d
        self.add_param("embeddings.token", rng.normal(0.0, INIT_STD, (config.vocab_size, d)))
        self.add_param("embeddings.position", rng.normal(0.0, INIT_STD, (config.max_tokens, d)))
        self.add_param("embeddings.token_type", rng.normal(0.0, INIT_STD, (NUM_TYPES, d)))
        self.add_param("embeddings.item_position", rng.normal(0.0, INIT_STD, (config.max_tokens, d)))
        for i in range(config.layers):
            init_block(self, f"layers.{i}", d, config.ffn_dim, rng)
        self.add_param("final_ln.gamma", np.ones(d))
        self.add_param("final_ln.beta", np.zeros(d))
        self.add_param("mlm.bias", np.zeros(config.vocab_size))

    def layer_param_names(self, layer: int) -> List[str]:
        prefix = f"layers.{layer}."
        return [n for n in self.params if n.startswith(prefix)]

    def hidden_states(self, batch: TokenBatch, training: bool = False,
                      rng: Optional[np.random.Generator] = None,
                      capture: Optional[List[np.ndarray]] = None) -> Tensor:
        """Final-layer hidden states (B, T, d)."""
        b, t = batch.shape
        if t > self.config.max_tokens:
            raise ValueError(f"Input has {t} tokens, encoder accepts at most {self.config.max_tokens}")
        p = self.params
        x = T.embedding(p["embeddings.token"], batch.token_ids)
        x = T.add(x, T.embedding(p["embeddings.position"], np.broadcast_to(np.arange(t), (b, t))))
        if self.config.extra_embeddings:
            x = T.add(x, T.embedding(p["embeddings.token_type"], batch.token_types))
            x = T.add(x, T.embedding(p["embeddings.item_position"], batch.item_positions))
        x = T.dropout(x, self.config.dropout, rng, training)

        mask = attention_mask(batch.attention_mask, causal=False)
        for i in range(self.config.layers):
            x = block_forward(self, f"layers.{i}", x, self.config.heads, mask,
                              activation=T.gelu, dropout=self.config.dropout, rng=rng,
                              training=training, capture=capture)
        return T.layer_norm(x, p["final_ln.gamma"], p["final_ln.beta"])

    def cls_vectors(self, batch: TokenBatch, training: bool = False,
                    rng: Optional[np.random.Generator] = None,
                    capture: Optional[List[np.ndarray]] = None) -> Tensor:
        """L2-normalised [CLS] outputs (B, d)."""
        hidden = self.hidden_states(batch, training, rng, capture)
        return T.l2_normalize(T.index(hidden, (slice(None), 0)))

    def mlm_logits(self, rows: Tensor) -> Tensor:
        """Vocabulary logits for hidden rows (N, d) through the tied token table."""
        return T.add(T.matmul(rows, T.transpose(self.params["embeddings.token"], 0, 1)), self.params["mlm.bias"])

    def to_checkpoint(self, lineage: Optional[Dict] = None) -> Checkpoint:
        meta = {'config': asdict(self.config), 'provenance': self.provenance}
        if lineage:
            meta['lineage'] = lineage
        return Checkpoint(kind='text_encoder', tensors=self.state_dict(), meta=meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Encoder":
        if ckpt.kind != 'text_encoder':
            raise CheckpointError(f"Checkpoint kind {ckpt.kind!r} is not a text encoder")
        encoder = cls(EncoderConfig(**ckpt.meta['config']), provenance=ckpt.meta.get('provenance', 'random'))
        encoder.load_state_dict(ckpt.tensors)
        return encoder


def encode(encoder: Encoder, flat: FlatInput,
           capture_attention: bool = False) -> Tuple[np.ndarray, Optional[AttentionTrace]]:
    """Evaluation-mode vector for one input, optionally with the [CLS] attention trace."""
    if len(flat) > encoder.config.max_tokens:
        raise ValueError(f"Input has {len(flat)} tokens, encoder accepts at most {encoder.config.max_tokens}")
    capture: Optional[List[np.ndarray]] = [] if capture_attention else None
    vec = encoder.cls_vectors(pad_batch([flat]), capture=capture)
    trace = None
    if capture_attention:
        weights = np.stack([layer_att[0, :, 0, :] for layer_att in capture])
        trace = AttentionTrace(weights=weights, token_ids=list(flat.token_ids),
                               token_types=list(flat.token_types),
                               item_positions=list(flat.item_positions))
    return vec.data[0].copy(), trace


def encode_item(encoder: Encoder, item_id: int, catalog: ItemCatalog, tokenizer: Tokenizer) -> np.ndarray:
    flat = flatten_history([item_id], catalog, tokenizer, encoder.config.max_tokens)
    return encode(encoder, flat)[0]


def encode_histories(encoder: Encoder, prefixes: Sequence[Sequence[int]], catalog: ItemCatalog,
                     tokenizer: Tokenizer, batch_size: int = 64, workers: int = 1) -> np.ndarray:
    """
    Evaluation-mode vectors (N, d) for many histories.

    Chunks are encoded independently and gathered in input order, so the
    result does not depend on the number of worker threads.
    """
    flats = [flatten_history(p, catalog, tokenizer, encoder.config.max_tokens) for p in prefixes]
    chunks = [flats[i:i + batch_size] for i in range(0, len(flats), batch_size)]

    def run(chunk):
        return encoder.cls_vectors(pad_batch(chunk)).data

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    if not parts:
        return np.zeros((0, encoder.config.d), dtype=np.float32)
    return np.concatenate(parts, axis=0)


def encode_items(encoder: Encoder, item_ids: Sequence[int], catalog: ItemCatalog, tokenizer: Tokenizer,
                 batch_size: int = 64, workers: int = 1) -> np.ndarray:
    """Item table rows for item_ids, each encoded as a single-item history."""
    return encode_histories(encoder, [[i] for i in item_ids], catalog, tokenizer, batch_size, workers)


def encode_catalog(encoder: Encoder, catalog: ItemCatalog, tokenizer: Tokenizer,
                   batch_size: int = 64, workers: int = 1) -> np.ndarray:
    return encode_items(encoder, range(catalog.size), catalog, tokenizer, batch_size, workers)


def new_encoder(tokenizer: Tokenizer, **overrides) -> Encoder:
    """Randomly initialised encoder sized for a tokenizer."""
    config = EncoderConfig(vocab_size=tokenizer.size, **overrides)
    return Encoder(config)
