"""
Seqinit Training Pipeline
RECFORMER-style training stages on the desk text encoder

Stages:
- LF:  MLM on single-item catalog texts only (semantic-only encoder)
- PT:  MLM + item-item contrastive (IIC) on pre-training user histories
- FT1: next-item cross-entropy against a catalog table re-encoded each epoch
- FT2: the same objective against one fixed item table

All stages share TrainingLoop: Adam with a global-norm gradient cap,
early stopping on validation NDCG@10 (PT and LF monitor training loss)
and restoring the best epoch's parameters at the end.
"""

import datetime
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np

import rec_tensor as T
from rec_checkpoint import Checkpoint
from rec_corpus import EmptyDatasetError, EvalInstance, ItemCatalog, LeaveOneOutSplit, SequenceDataset
from rec_eval import EvalProtocol, evaluate
from rec_seqmodels import EmbeddingTable, score_candidates
from rec_tensor import Tensor
from rec_textenc import (MASK_ID, NUM_SPECIAL, Encoder, FlatInput, Tokenizer, encode_catalog,
                         encode_histories, flatten_history, pad_batch)

logger = logging.getLogger(__name__)

STAGE_LF = 'LF'
STAGE_PT = 'PT'
STAGE_FT1 = 'FT1'
STAGE_FT2 = 'FT2'
STAGES = (STAGE_LF, STAGE_PT, STAGE_FT1, STAGE_FT2)

ALL = 'ALL'
NONE = 'NONE'
LayerSelection = Union[str, FrozenSet[int]]

DEFAULT_TEMPERATURE = 0.05
DEFAULT_PATIENCE = 10
GRAD_CLIP = 5.0
LR_GRID = (3e-4, 1e-3, 3e-3, 1e-2)
MONITOR_K = 10


def parse_layers(text: Union[str, Sequence[int], FrozenSet[int]]) -> LayerSelection:
    """'ALL', 'NONE' or a comma-separated list of layer indices."""
    if isinstance(text, (frozenset, set, list, tuple)):
        return frozenset(int(i) for i in text)
    text = str(text).strip()
    if text.upper() in (ALL, NONE):
        return text.upper()
    if not text:
        return NONE
    return frozenset(int(part) for part in text.split(',') if part.strip())


def format_layers(layers: LayerSelection) -> str:
    if isinstance(layers, str):
        return layers
    return ','.join(str(i) for i in sorted(layers))


@dataclass
class StageConfig:
    stage: str = STAGE_FT1
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    temperature: float = DEFAULT_TEMPERATURE
    mlm_rate: float = 0.15
    patience: int = DEFAULT_PATIENCE
    tuned_layers: LayerSelection = ALL
    seed: int = 0
    grad_clip: float = GRAD_CLIP
    workers: int = 1

    def validate(self, num_layers: Optional[int] = None):
        if self.stage not in STAGES:
            raise ValueError(f"Unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 < self.mlm_rate < 1.0:
            raise ValueError(f"mlm_rate must be in (0, 1), got {self.mlm_rate}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if isinstance(self.tuned_layers, str):
            if self.tuned_layers not in (ALL, NONE):
                raise ValueError(f"tuned_layers must be ALL, NONE or a set of indices, got {self.tuned_layers!r}")
        elif num_layers is not None:
            bad = sorted(i for i in self.tuned_layers if not 0 <= i < num_layers)
            if bad:
                raise ValueError(f"tuned_layers {bad} out of range for {num_layers} layers")

    def describe(self) -> Dict:
        values = asdict(self)
        values['tuned_layers'] = format_layers(self.tuned_layers)
        return values


@dataclass
class TrainReport:
    stage: str
    losses: List[float] = field(default_factory=list)
    valid_ndcg: List[Optional[float]] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""
    wall_time: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.losses)

    def to_lines(self) -> List[str]:
        """One JSON line per epoch plus a summary line; wall time is left out."""
        lines = []
        for epoch, (loss, ndcg) in enumerate(zip(self.losses, self.valid_ndcg)):
            lines.append(json.dumps({'epoch': epoch, 'stage': self.stage, 'train_loss': loss,
                                     'valid_ndcg@10': ndcg}, sort_keys=True))
        lines.append(json.dumps({'stage': self.stage, 'summary': True, 'best_epoch': self.best_epoch,
                                 'epochs_run': self.epochs_run, 'stop_reason': self.stop_reason},
                                sort_keys=True))
        return lines


class EarlyStopper:
    """Stops once `patience` epochs pass without a strict improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_value = -np.inf
        self.best_epoch = -1

    def update(self, epoch: int, value: float) -> Tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        improved = value > self.best_value
        if improved:
            self.best_value = value
            self.best_epoch = epoch
        return improved, epoch - self.best_epoch >= self.patience


class TrainingLoop:
    """
    Epoch loop with Adam, gradient clipping, early stopping and best-state restore

    Args:
        stage: label used in logs and reports
        params: every parameter whose value should be snapshotted; only
            those with requires_grad are optimised
        config: epochs, lr, patience, grad_clip
        verbose: print progress lines
    """

    def __init__(self, stage: str, params: Dict[str, Tensor], config: StageConfig, verbose: bool = False):
        self.stage = stage
        self.params = params
        self.config = config
        self.verbose = verbose
        self.trainable = {n: p for n, p in params.items() if p.requires_grad}
        self.adam = T.AdamState(lr=config.lr)
        self.updates = 0

    def log(self, message: str):
        logger.info("[%s] %s", self.stage, message)
        if self.verbose:
            timestamp = datetime.datetime.now().strftime('%H:%M:%S')
            print(f"[{self.stage} {timestamp}] {message}")

    def step(self, loss: Tensor) -> float:
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"{self.stage}: non-finite loss {value}")
        T.backward(loss)
        T.clip_grad_norm(self.trainable.values(), self.config.grad_clip)
        T.adam_step(self.trainable, self.adam)
        for p in self.trainable.values():
            p.grad = None
        self.updates += 1
        return value

    def run(self, train_epoch: Callable[[int], float],
            validate: Optional[Callable[[], float]] = None) -> TrainReport:
        """
        train_epoch(epoch) returns the mean training loss. With `validate`
        the monitored value is validation NDCG@10, otherwise -loss.
        """
        start = time.time()
        report = TrainReport(stage=self.stage)
        if not self.trainable:
            report.losses.append(0.0)
            report.valid_ndcg.append(validate() if validate else None)
            report.best_epoch = 0
            report.stop_reason = 'nothing_trainable'
            self.log("No trainable parameters; evaluated once")
            report.wall_time = time.time() - start
            return report

        stopper = EarlyStopper(self.config.patience)
        best_state = {n: p.data.copy() for n, p in self.params.items()}
        report.stop_reason = 'max_epochs'
        for epoch in range(self.config.epochs):
            loss = train_epoch(epoch)
            ndcg = validate() if validate else None
            report.losses.append(loss)
            report.valid_ndcg.append(ndcg)
            improved, stop = stopper.update(epoch, ndcg if validate else -loss)
            if improved:
                best_state = {n: p.data.copy() for n, p in self.params.items()}
            self.log(f"epoch {epoch}: loss={loss:.4f}" + (f" valid NDCG@10={ndcg:.4f}" if validate else ""))
            if stop:
                report.stop_reason = 'patience'
                break

        for n, p in self.params.items():
            p.data[...] = best_state[n]
        report.best_epoch = stopper.best_epoch
        report.wall_time = time.time() - start
        self.log(f"best epoch {report.best_epoch} ({report.stop_reason}, {report.wall_time:.1f}s)")
        return report


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------
@dataclass
class MlmSample:
    corrupted: np.ndarray
    positions: np.ndarray
    labels: np.ndarray


def mlm_mask(token_ids: Sequence[int], mlm_rate: float, seed: Union[int, np.random.Generator],
             vocab_size: Optional[int] = None) -> Optional[MlmSample]:
    """
    BERT-style corruption of non-special tokens.

    Each maskable token is selected with probability mlm_rate; selected
    tokens become [MASK] (80%), a random learned token (10%) or stay (10%).
    Returns None when the input has no maskable token.
    """
    if not 0.0 < mlm_rate < 1.0:
        raise ValueError(f"mlm_rate must be in (0, 1), got {mlm_rate}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.asarray(token_ids, dtype=np.int64)
    maskable = ids >= NUM_SPECIAL
    if not maskable.any():
        return None
    vocab_size = vocab_size or int(ids.max()) + 1

    selected = maskable & (rng.random(ids.shape) < mlm_rate)
    positions = np.flatnonzero(selected)
    corrupted = ids.copy()
    roll = rng.random(positions.size)
    random_tokens = rng.integers(NUM_SPECIAL, max(vocab_size, NUM_SPECIAL + 1), size=positions.size)
    corrupted[positions[roll < 0.8]] = MASK_ID
    swap = (roll >= 0.8) & (roll < 0.9)
    corrupted[positions[swap]] = random_tokens[swap]
    return MlmSample(corrupted=corrupted, positions=positions, labels=ids[positions])


def iic_loss(seq_vectors: Tensor, next_vectors: Tensor, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """In-batch contrastive loss: row i's positive is next item i, the other rows are negatives."""
    b = seq_vectors.shape[0]
    if b < 2:
        raise ValueError("iic_loss needs a batch of at least 2 (no in-batch negatives)")
    if next_vectors.shape != seq_vectors.shape:
        raise T.ShapeError(f"Vector batches differ: {seq_vectors.shape} vs {next_vectors.shape}")
    sims = T.matmul(seq_vectors, T.transpose(next_vectors, 0, 1))
    return T.cross_entropy_logits(T.scale(sims, 1.0 / temperature), np.arange(b))


def _mlm_term(encoder: Encoder, hidden: Tensor, samples: List[Optional[MlmSample]]) -> Optional[Tensor]:
    rows, cols, labels = [], [], []
    for r, sample in enumerate(samples):
        if sample is None:
            continue
        rows.extend([r] * sample.positions.size)
        cols.extend(sample.positions.tolist())
        labels.extend(sample.labels.tolist())
    if not labels:
        return None
    picked = T.index(hidden, (np.asarray(rows), np.asarray(cols)))
    return T.cross_entropy_logits(encoder.mlm_logits(picked), labels)


def _corrupt(flats: List[FlatInput], config: StageConfig, rng: np.random.Generator,
             vocab_size: int) -> Tuple[List[FlatInput], List[Optional[MlmSample]]]:
    corrupted, samples = [], []
    for flat in flats:
        sample = mlm_mask(flat.token_ids, config.mlm_rate, rng, vocab_size)
        samples.append(sample)
        corrupted.append(flat if sample is None else replace(flat, token_ids=sample.corrupted.tolist()))
    return corrupted, samples


# ---------------------------------------------------------------------------
# Layer mask
# ---------------------------------------------------------------------------
def apply_layer_mask(encoder: Encoder, tuned_layers: LayerSelection) -> List[str]:
    """
    Mark trainable exactly the block parameters of the listed layers.

    ALL makes the whole encoder trainable; any explicit selection freezes
    the embeddings and the final norm too.
    """
    if tuned_layers == ALL:
        names = list(encoder.params)
    elif tuned_layers == NONE:
        names = []
    else:
        names = []
        for layer in sorted(tuned_layers):
            if not 0 <= layer < encoder.config.layers:
                raise ValueError(f"Layer {layer} out of range for {encoder.config.layers} layers")
            names.extend(encoder.layer_param_names(layer))
    encoder.set_trainable(names)
    return names


# ---------------------------------------------------------------------------
# Scoring with the text encoder
# ---------------------------------------------------------------------------
class RecformerScorer:
    """History [CLS] vectors against a fixed item matrix (eval Scorer protocol)"""

    def __init__(self, encoder: Encoder, table: np.ndarray, catalog: ItemCatalog, tokenizer: Tokenizer,
                 batch_size: int = 64, workers: int = 1):
        self.encoder = encoder
        self.table = np.asarray(table, dtype=np.float32)
        self.catalog = catalog
        self.tokenizer = tokenizer
        self.batch_size = batch_size
        self.workers = workers

    def score(self, prefixes, candidates):
        users = encode_histories(self.encoder, prefixes, self.catalog, self.tokenizer,
                                 self.batch_size, self.workers)
        if candidates is None:
            candidates = np.broadcast_to(np.arange(self.table.shape[0]), (len(users), self.table.shape[0]))
        return score_candidates(users, self.table, candidates)


def next_item_pairs(train: Dict[int, List[int]], rng: np.random.Generator) -> List[Tuple[List[int], int]]:
    """One (prefix, next item) pair per user with a seeded random cut point."""
    pairs = []
    for user in sorted(train):
        seq = train[user]
        if len(seq) < 2:
            continue
        cut = int(rng.integers(1, len(seq)))
        pairs.append((seq[:cut], seq[cut]))
    return pairs


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= min_size:
            yield idx


def _lineage(encoder: Encoder, stage: str, config: StageConfig, parent: str, **extra) -> Dict:
    lineage = {'stage': stage, 'parent': parent, 'config': config.describe()}
    lineage.update(extra)
    return lineage


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------
def stage_text_mlm(encoder: Encoder, catalog: ItemCatalog, tokenizer: Tokenizer, config: StageConfig,
                   verbose: bool = False) -> Tuple[Checkpoint, TrainReport]:
    """MLM on each item's own text; produces the semantic-only LF encoder."""
    config = replace(config, stage=STAGE_LF)
    config.validate(encoder.config.layers)
    parent = encoder.to_checkpoint().content_hash()
    apply_layer_mask(encoder, config.tuned_layers)
    flats = [flatten_history([i], catalog, tokenizer, encoder.config.max_tokens) for i in range(catalog.size)]
    loop = TrainingLoop(STAGE_LF, encoder.params, config, verbose)

    def train_epoch(epoch: int) -> float:
        rng = np.random.default_rng([config.seed, epoch])
        losses = []
        for b, idx in enumerate(_batches(len(flats), config.batch_size, rng)):
            corrupted, samples = _corrupt([flats[i] for i in idx], config, rng, tokenizer.size)
            drop_rng = np.random.default_rng([config.seed, epoch, b])
            hidden = encoder.hidden_states(pad_batch(corrupted), training=True, rng=drop_rng)
            loss = _mlm_term(encoder, hidden, samples)
            if loss is not None:
                losses.append(loop.step(loss))
        return float(np.mean(losses)) if losses else 0.0

    report = loop.run(train_epoch)
    encoder.provenance = 'LF'
    return encoder.to_checkpoint(_lineage(encoder, STAGE_LF, config, parent)), report


def pt_loss(encoder: Encoder, pairs: List[Tuple[List[int], int]], catalog: ItemCatalog, tokenizer: Tokenizer,
            config: StageConfig, rng: np.random.Generator, drop_rng: Optional[np.random.Generator] = None) -> Tensor:
    """MLM on the corrupted histories plus IIC between their [CLS] and the next items."""
    max_tokens = encoder.config.max_tokens
    flats = [flatten_history(prefix, catalog, tokenizer, max_tokens) for prefix, _ in pairs]
    corrupted, samples = _corrupt(flats, config, rng, tokenizer.size)
    hidden = encoder.hidden_states(pad_batch(corrupted), training=drop_rng is not None, rng=drop_rng)
    seq_vectors = T.l2_normalize(T.index(hidden, (slice(None), 0)))
    next_flats = [flatten_history([target], catalog, tokenizer, max_tokens) for _, target in pairs]
    next_vectors = encoder.cls_vectors(pad_batch(next_flats), training=drop_rng is not None, rng=drop_rng)
    loss = iic_loss(seq_vectors, next_vectors, config.temperature)
    mlm = _mlm_term(encoder, hidden, samples)
    return loss if mlm is None else T.add(mlm, loss)


def stage_pt(encoder: Encoder, dataset: SequenceDataset, catalog: ItemCatalog, tokenizer: Tokenizer,
             config: StageConfig, verbose: bool = False) -> Tuple[Checkpoint, TrainReport]:
    """Pre-train on behaviour sequences with MLM + IIC (unit weights)."""
    config = replace(config, stage=STAGE_PT)
    config.validate(encoder.config.layers)
    train = {u: s for u, s in dataset.sequences.items() if len(s) >= 2}
    if len(train) < 2:
        raise EmptyDatasetError("Pre-training needs at least two users with two or more interactions")
    parent = encoder.to_checkpoint().content_hash()
    apply_layer_mask(encoder, config.tuned_layers)
    loop = TrainingLoop(STAGE_PT, encoder.params, config, verbose)

    def train_epoch(epoch: int) -> float:
        rng = np.random.default_rng([config.seed, epoch])
        pairs = next_item_pairs(train, rng)
        losses = []
        for b, idx in enumerate(_batches(len(pairs), config.batch_size, rng, min_size=2)):
            drop_rng = np.random.default_rng([config.seed, epoch, b])
            loss = pt_loss(encoder, [pairs[i] for i in idx], catalog, tokenizer, config, rng, drop_rng)
            losses.append(loop.step(loss))
        return float(np.mean(losses)) if losses else 0.0

    report = loop.run(train_epoch)
    encoder.provenance = 'PT'
    return encoder.to_checkpoint(_lineage(encoder, STAGE_PT, config, parent, users=len(dataset))), report


def ft_loss(encoder: Encoder, pairs: List[Tuple[List[int], int]], table: Tensor, catalog: ItemCatalog,
            tokenizer: Tokenizer, temperature: float, drop_rng: Optional[np.random.Generator] = None) -> Tensor:
    """Cross-entropy of history [CLS] similarities (scaled by 1/temperature) over the full table."""
    flats = [flatten_history(prefix, catalog, tokenizer, encoder.config.max_tokens) for prefix, _ in pairs]
    cls = encoder.cls_vectors(pad_batch(flats), training=drop_rng is not None, rng=drop_rng)
    logits = T.scale(T.matmul(cls, T.transpose(table, 0, 1)), 1.0 / temperature)
    return T.cross_entropy_logits(logits, [target for _, target in pairs])


def _finetune(stage: str, encoder: Encoder, table_source: Callable[[int], Tensor], extra_params: Dict[str, Tensor],
              split: LeaveOneOutSplit, catalog: ItemCatalog, tokenizer: Tokenizer, config: StageConfig,
              valid_instances: List[EvalInstance], protocol: EvalProtocol, verbose: bool) -> TrainReport:
    params = dict(encoder.params)
    params.update(extra_params)
    loop = TrainingLoop(stage, params, config, verbose)

    def train_epoch(epoch: int) -> float:
        rng = np.random.default_rng([config.seed, epoch])
        table = table_source(loop.updates)
        pairs = next_item_pairs(split.train, rng)
        losses = []
        for b, idx in enumerate(_batches(len(pairs), config.batch_size, rng)):
            drop_rng = np.random.default_rng([config.seed, epoch, b])
            loss = ft_loss(encoder, [pairs[i] for i in idx], table, catalog, tokenizer,
                           config.temperature, drop_rng)
            losses.append(loop.step(loss))
        return float(np.mean(losses)) if losses else 0.0

    def validate() -> float:
        scorer = RecformerScorer(encoder, table_source(loop.updates).data, catalog, tokenizer, workers=config.workers)
        return evaluate(scorer, valid_instances, protocol).ndcg[MONITOR_K]

    return loop.run(train_epoch, validate)


def stage_ft1(encoder: Encoder, split: LeaveOneOutSplit, catalog: ItemCatalog, tokenizer: Tokenizer,
              config: StageConfig, valid_instances: List[EvalInstance],
              protocol: Optional[EvalProtocol] = None,
              verbose: bool = False) -> Tuple[Checkpoint, EmbeddingTable, TrainReport]:
    """
    Fine-tune against a catalog table re-encoded before each epoch.

    The table is detached: gradients reach the encoder only through the
    history side.
    """
    config = replace(config, stage=STAGE_FT1)
    config.validate(encoder.config.layers)
    protocol = protocol or EvalProtocol()
    parent = encoder.to_checkpoint().content_hash()
    apply_layer_mask(encoder, config.tuned_layers)
    cache: Dict[str, object] = {}

    def table_source(updates: int) -> Tensor:
        # re-encode only when parameters moved since the last encoding
        if cache.get('updates_seen') != updates:
            try:
                matrix = encode_catalog(encoder, catalog, tokenizer, workers=config.workers)
            except Exception as e:
                raise RuntimeError(f"FT1: catalog encoding failed: {e}") from e
            cache['table'] = Tensor(matrix)
            cache['updates_seen'] = updates
        return cache['table']

    report = _finetune(STAGE_FT1, encoder, table_source, {}, split, catalog, tokenizer, config,
                       valid_instances, protocol, verbose)
    encoder.provenance = 'FT'
    ckpt = encoder.to_checkpoint(_lineage(encoder, STAGE_FT1, config, parent))
    matrix = encode_catalog(encoder, catalog, tokenizer, workers=config.workers)
    table = EmbeddingTable(matrix, 'FT', trainable=False, source_hash=ckpt.content_hash())
    return ckpt, table, report


def stage_ft2(encoder: Encoder, table: EmbeddingTable, split: LeaveOneOutSplit, catalog: ItemCatalog,
              tokenizer: Tokenizer, config: StageConfig, valid_instances: List[EvalInstance],
              protocol: Optional[EvalProtocol] = None, train_table: bool = False,
              verbose: bool = False) -> Tuple[Checkpoint, EmbeddingTable, TrainReport]:
    """
    Fine-tune the sequence side against a fixed item table.

    With train_table the table itself becomes a trainable parameter
    (combined with tuned_layers=NONE only the table moves).
    """
    config = replace(config, stage=STAGE_FT2)
    config.validate(encoder.config.layers)
    protocol = protocol or EvalProtocol()
    if table.dim != encoder.config.d:
        raise T.ShapeError(f"Table dim {table.dim} does not match encoder dim {encoder.config.d}")
    parent = encoder.to_checkpoint().content_hash()
    apply_layer_mask(encoder, config.tuned_layers)
    table_param = Tensor(table.matrix.copy(), requires_grad=train_table, name='item_table')

    report = _finetune(STAGE_FT2, encoder, lambda updates: table_param, {'item_table': table_param}, split,
                       catalog, tokenizer, config, valid_instances, protocol, verbose)
    result = EmbeddingTable(table_param.data.copy(), table.provenance, trainable=train_table,
                            source_hash=table.source_hash)
    lineage = _lineage(encoder, STAGE_FT2, config, parent, table=table.checksum(), train_table=train_table)
    ckpt = encoder.to_checkpoint(lineage)
    if train_table:
        ckpt.tensors['item_table'] = result.matrix
    return ckpt, result, report
