"""
Seqinit Sequence Models
ID-based next-item backbones with pluggable item embedding tables

Two backbones share one parameter layout:
- SASRec: causal self-attention, next-item prediction at every position
- BERT4Rec: bidirectional self-attention with the Cloze (masked item) task

Item logits are dot products with the item table (tied input/output
weights). Sequences are left-padded; position ids count from the first
real item so a sequence's outputs do not depend on how much padding the
batch needed.
"""

import hashlib
import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import rec_tensor as T
from rec_checkpoint import Checkpoint, CheckpointError
from rec_layers import INIT_STD, Module, attention_mask, block_forward, init_block
from rec_tensor import Tensor

logger = logging.getLogger(__name__)

SASREC = 'sasrec'
BERT4REC = 'bert4rec'
BACKBONE_KINDS = (SASREC, BERT4REC)
PROVENANCES = ('random', 'LF', 'PT', 'FT')

# Table file header: "rows cols provenance\n", then row-major little-endian float32
TABLE_HEADER_ENCODING = 'ascii'


class EmbeddingTable:
    """Catalog-aligned item vectors with an immutable provenance tag"""

    def __init__(self, matrix: np.ndarray, provenance: str, trainable: bool = True,
                 source_hash: Optional[str] = None):
        if provenance not in PROVENANCES:
            raise ValueError(f"Unknown provenance {provenance!r}; expected one of {PROVENANCES}")
        matrix = np.ascontiguousarray(np.asarray(matrix, dtype=np.float32))
        if matrix.ndim != 2:
            raise T.ShapeError(f"Item table must be 2-D, got shape {matrix.shape}")
        self.matrix = matrix
        self._provenance = provenance
        self.trainable = trainable
        self.source_hash = source_hash

    @property
    def provenance(self) -> str:
        return self._provenance

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def checksum(self) -> str:
        return hashlib.sha256(self.matrix.tobytes()).hexdigest()

    @classmethod
    def random(cls, catalog_size: int, d: int, seed: int, std: float = INIT_STD) -> "EmbeddingTable":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, (catalog_size, d)), 'random')

    def to_checkpoint(self) -> Checkpoint:
        meta = {'provenance': self.provenance, 'trainable': self.trainable}
        if self.source_hash:
            meta['source_hash'] = self.source_hash
        return Checkpoint(kind='item_table', tensors={'matrix': self.matrix}, meta=meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "EmbeddingTable":
        if ckpt.kind != 'item_table':
            raise CheckpointError(f"Checkpoint kind {ckpt.kind!r} is not an item table")
        return cls(ckpt.tensors['matrix'], ckpt.meta['provenance'],
                   trainable=ckpt.meta.get('trainable', True), source_hash=ckpt.meta.get('source_hash'))

    def export(self, filepath: str):
        """Plain binary matrix with a one-line text header."""
        with open(filepath, 'wb') as f:
            f.write(f"{self.rows} {self.dim} {self.provenance}\n".encode(TABLE_HEADER_ENCODING))
            f.write(self.matrix.astype('<f4').tobytes())

    @classmethod
    def import_matrix(cls, filepath: str) -> "EmbeddingTable":
        if not os.path.exists(filepath):
            raise FileNotFoundError(f"Table file not found: {filepath}")
        with open(filepath, 'rb') as f:
            header = f.readline().decode(TABLE_HEADER_ENCODING).split()
            if len(header) != 3:
                raise ValueError(f"Invalid table header in {filepath}")
            rows, cols, provenance = int(header[0]), int(header[1]), header[2]
            data = np.frombuffer(f.read(), dtype='<f4')
        if data.size != rows * cols:
            raise ValueError(f"Table payload has {data.size} values, header says {rows}x{cols}")
        return cls(data.reshape(rows, cols), provenance)


@dataclass
class BackboneConfig:
    kind: str = SASREC
    layers: int = 2
    heads: int = 1
    d: int = 64
    max_items: int = 50
    dropout: float = 0.2
    mask_prob: float = 0.2
    seed: int = 0

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "BackboneConfig":
        defaults = {SASREC: dict(layers=2, heads=1), BERT4REC: dict(layers=2, heads=2)}
        if kind not in defaults:
            raise ValueError(f"Unknown backbone kind {kind!r}; expected one of {BACKBONE_KINDS}")
        values = dict(defaults[kind])
        values.update(overrides)
        return cls(kind=kind, **values)

    def validate(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"Unknown backbone kind {self.kind!r}")
        if self.heads < 1 or self.d % self.heads:
            raise ValueError(f"Hidden size {self.d} is not divisible by {self.heads} heads")
        if self.layers < 1 or self.max_items < 1:
            raise ValueError("Backbone needs at least one layer and max_items >= 1")


class SequenceRecommender(Module):
    """
    Backbone parameters plus the item table(s) it scores against.

    "items.text" holds the initialising table; when an "items.id" table is
    present the effective item vector is the sum of the two rows.
    """

    def __init__(self, config: BackboneConfig, table: EmbeddingTable,
                 id_table: Optional[EmbeddingTable] = None):
        super().__init__()
        config.validate()
        if table.dim != config.d:
            raise T.ShapeError(f"Item table dim {table.dim} does not match backbone dim {config.d}")
        if id_table is not None and id_table.matrix.shape != table.matrix.shape:
            raise T.ShapeError("ID table and text table shapes differ")
        self.config = config
        self.catalog_size = table.rows
        self.provenance = table.provenance
        self.source_hash = table.source_hash

        rng = np.random.default_rng(config.seed)
        d = config.d
        self.add_param("position", rng.normal(0.0, INIT_STD, (config.max_items, d)))
        if config.kind == BERT4REC:
            self.add_param("mask_item", rng.normal(0.0, INIT_STD, (d,)))
        for i in range(config.layers):
            init_block(self, f"layers.{i}", d, 4 * d, rng)
        self.add_param("final_ln.gamma", np.ones(d))
        self.add_param("final_ln.beta", np.zeros(d))
        self.add_param("items.text", table.matrix)
        if id_table is not None:
            self.add_param("items.id", id_table.matrix)
        self.params["items.text"].requires_grad = table.trainable

    @property
    def mask_id(self) -> int:
        return self.catalog_size

    @property
    def pad_id(self) -> int:
        return self.catalog_size + 1

    @property
    def table_names(self) -> List[str]:
        return [n for n in ("items.text", "items.id") if n in self.params]

    @property
    def backbone_names(self) -> List[str]:
        return [n for n in self.params if not n.startswith("items.")]

    def item_matrix(self) -> Tensor:
        """Effective item vectors (C, d)."""
        items = self.params["items.text"]
        if "items.id" in self.params:
            items = T.add(self.params["items.id"], items)
        return items

    def export_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.params["items.text"].data.copy(), self.provenance,
                              trainable=self.params["items.text"].requires_grad, source_hash=self.source_hash)

    def to_checkpoint(self, meta: Optional[Dict] = None) -> Checkpoint:
        full_meta = {'config': asdict(self.config), 'provenance': self.provenance}
        if self.source_hash:
            full_meta['source_hash'] = self.source_hash
        full_meta.update(meta or {})
        return Checkpoint(kind='seqrec', tensors=self.state_dict(), meta=full_meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "SequenceRecommender":
        if ckpt.kind != 'seqrec':
            raise CheckpointError(f"Checkpoint kind {ckpt.kind!r} is not a sequence recommender")
        config = BackboneConfig(**ckpt.meta['config'])
        table = EmbeddingTable(ckpt.tensors['items.text'], ckpt.meta['provenance'],
                               source_hash=ckpt.meta.get('source_hash'))
        id_table = None
        if 'items.id' in ckpt.tensors:
            id_table = EmbeddingTable(ckpt.tensors['items.id'], 'random')
        model = cls(config, table, id_table)
        model.load_state_dict(ckpt.tensors)
        return model

    # Scorer protocol used by rec_eval
    def score(self, prefixes: Sequence[Sequence[int]], candidates: Optional[np.ndarray]) -> np.ndarray:
        users = self.user_vectors(prefixes)
        items = self.item_matrix().data
        if candidates is None:
            candidates = np.broadcast_to(np.arange(self.catalog_size), (len(users), self.catalog_size))
        return score_candidates(users, items, candidates)

    def user_vectors(self, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Evaluation-mode next-item query vectors (B, d)."""
        items = self.item_matrix()
        if self.config.kind == SASREC:
            hidden, _ = sasrec_forward(self, items, prefixes)
            return hidden.data[:, -1, :].copy()
        keep = self.config.max_items - 1
        masked = [list(p)[-keep:] + [self.mask_id] if keep > 0 else [self.mask_id] for p in prefixes]
        hidden, _ = _encode_items(self, items, masked, causal=False)
        return hidden.data[:, -1, :].copy()


def _left_pad(model: SequenceRecommender, sequences: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ids, key_mask, position_ids), each (B, T), keeping the most recent max_items."""
    if not sequences or any(len(s) == 0 for s in sequences):
        raise ValueError("Sequences must be nonempty")
    trimmed = [list(s)[-model.config.max_items:] for s in sequences]
    t = max(len(s) for s in trimmed)
    b = len(trimmed)
    ids = np.full((b, t), model.pad_id, dtype=np.int64)
    key_mask = np.zeros((b, t), dtype=bool)
    positions = np.zeros((b, t), dtype=np.int64)
    for row, seq in enumerate(trimmed):
        n = len(seq)
        ids[row, t - n:] = seq
        key_mask[row, t - n:] = True
        positions[row, t - n:] = np.arange(n)
    return ids, key_mask, positions


def _encode_items(model: SequenceRecommender, items: Tensor, sequences: Sequence[Sequence[int]],
                  causal: bool, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, np.ndarray]:
    ids, key_mask, positions = _left_pad(model, sequences)
    b, t = ids.shape
    d = model.config.d
    rows = [items]
    if model.config.kind == BERT4REC:
        rows.append(T.reshape(model.params["mask_item"], (1, d)))
    else:
        rows.append(Tensor(np.zeros((1, d))))
    rows.append(Tensor(np.zeros((1, d))))
    lookup = T.concat(rows, axis=0)

    x = T.add(T.embedding(lookup, ids), T.embedding(model.params["position"], positions))
    x = T.dropout(x, model.config.dropout, rng, training)

    mask = attention_mask(key_mask, causal) | np.eye(t, dtype=bool)[None, None]
    activation = T.relu if model.config.kind == SASREC else T.gelu
    for i in range(model.config.layers):
        x = block_forward(model, f"layers.{i}", x, model.config.heads, mask, activation=activation,
                          dropout=model.config.dropout, rng=rng, training=training)
    hidden = T.layer_norm(x, model.params["final_ln.gamma"], model.params["final_ln.beta"])
    return hidden, key_mask


def sasrec_forward(model: SequenceRecommender, items: Union[Tensor, EmbeddingTable],
                   sequences: Sequence[Sequence[int]], training: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, np.ndarray]:
    """
    Causal per-position user vectors (B, T, d) and the real-position mask (B, T).

    Sequences longer than max_items keep their most recent items.
    """
    if isinstance(items, EmbeddingTable):
        items = Tensor(items.matrix)
    return _encode_items(model, items, sequences, causal=True, training=training, rng=rng)


def bert4rec_forward(model: SequenceRecommender, items: Union[Tensor, EmbeddingTable],
                     masked_sequences: Sequence[Sequence[int]], training: bool = False,
                     rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, np.ndarray]:
    """
    Catalog logits (N, C) at every masked slot, in row-major slot order.

    Returns the logits and the (row, column) coordinates of the masked slots
    in the padded batch.
    """
    if isinstance(items, EmbeddingTable):
        items = Tensor(items.matrix)
    if not any(model.mask_id in s for s in masked_sequences):
        raise ValueError("bert4rec_forward needs at least one masked position")
    hidden, _ = _encode_items(model, items, masked_sequences, causal=False, training=training, rng=rng)
    ids, _, _ = _left_pad(model, masked_sequences)
    slots = np.argwhere(ids == model.mask_id)
    rows = T.index(hidden, (slots[:, 0], slots[:, 1]))
    return T.matmul(rows, T.transpose(items, 0, 1)), slots


def score_candidates(user_vectors: np.ndarray, items: Union[np.ndarray, EmbeddingTable],
                     candidates: np.ndarray) -> np.ndarray:
    """
    Dot-product scores of candidate items.

    user_vectors (d,) with candidates (K,), or (B, d) with candidates (B, K).
    """
    matrix = items.matrix if isinstance(items, EmbeddingTable) else np.asarray(items)
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("score_candidates needs at least one candidate")
    if candidates.min() < 0 or candidates.max() >= matrix.shape[0]:
        raise ValueError(f"Candidate id out of range [0, {matrix.shape[0]})")
    user_vectors = np.asarray(user_vectors)
    if user_vectors.ndim == 1:
        return (matrix[candidates] * user_vectors[None, :]).sum(axis=-1)
    return (matrix[candidates] * user_vectors[:, None, :]).sum(axis=-1)


def next_item_loss(kind: str, outputs: Tensor, items: Tensor, targets: Sequence[int]) -> Tensor:
    """
    Full-softmax cross-entropy over the catalog.

    SASRec: outputs are hidden rows (N, d) at the predicting positions.
    BERT4Rec: outputs are the masked-slot logits (N, C) from bert4rec_forward.
    """
    if kind == SASREC:
        if outputs.ndim != 2 or outputs.shape[1] != items.shape[1]:
            raise T.ShapeError(f"Expected hidden rows (N, {items.shape[1]}), got {outputs.shape}")
        logits = T.matmul(outputs, T.transpose(items, 0, 1))
    elif kind == BERT4REC:
        logits = outputs
    else:
        raise ValueError(f"Unknown backbone kind {kind!r}")
    if len(targets) != logits.shape[0]:
        raise T.ShapeError(f"{len(targets)} targets for {logits.shape[0]} predictions")
    return T.cross_entropy_logits(logits, targets)


def training_loss(model: SequenceRecommender, sequences: Sequence[Sequence[int]],
                  rng: np.random.Generator, training: bool = True) -> Optional[Tensor]:
    """
    Batch loss for either backbone.

    SASRec predicts item t+1 from every prefix ending at t; BERT4Rec masks
    items with probability mask_prob (at least one per sequence) and
    predicts them. Sequences shorter than 2 are skipped.
    """
    items = model.item_matrix()
    seqs = [list(s) for s in sequences if len(s) >= 2]
    if not seqs:
        return None
    if model.config.kind == SASREC:
        window = model.config.max_items + 1
        seqs = [s[-window:] for s in seqs]
        hidden, key_mask = sasrec_forward(model, items, [s[:-1] for s in seqs], training, rng)
        coords = np.argwhere(key_mask)
        targets = []
        for s in seqs:
            targets.extend(s[1:])
        rows = T.index(hidden, (coords[:, 0], coords[:, 1]))
        return next_item_loss(SASREC, rows, items, targets)

    masked, targets = [], []
    for s in seqs:
        s = s[-model.config.max_items:]
        chosen = rng.random(len(s)) < model.config.mask_prob
        if not chosen.any():
            chosen[-1] = True
        masked.append([model.mask_id if c else i for i, c in zip(s, chosen)])
        targets.extend(i for i, c in zip(s, chosen) if c)
    logits, _ = bert4rec_forward(model, items, masked, training, rng)
    return next_item_loss(BERT4REC, logits, items, targets)
