"""
Seqinit Attention Probe
[CLS] attention capture, head/layer redundancy and the tuned-layer sweep

A trace holds the [CLS] query's attention over the input tokens for every
(layer, head). Comparing those rows pairwise shows how similar heads and
layers behave; averaging the similarities within and between layer blocks
turns the visual "stratification" into a number.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.distance import jensenshannon

from rec_checkpoint import Checkpoint, CheckpointError, load as load_checkpoint
from rec_corpus import ItemCatalog
from rec_eval import EvalProtocol, MetricsReport, evaluate
from rec_initlab import LabData
from rec_pipeline import ALL, NONE, LayerSelection, RecformerScorer, StageConfig, format_layers, stage_ft2
from rec_seqmodels import EmbeddingTable
from rec_textenc import AttentionTrace, Encoder, Tokenizer, encode, flatten_history

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-5
COSINE = 'cosine'
JENSEN_SHANNON = 'js'


def validate_trace(trace: AttentionTrace):
    weights = trace.weights
    if weights.ndim != 3:
        raise ValueError(f"Trace weights must be (layers, heads, tokens), got {weights.shape}")
    if (weights < 0).any():
        raise ValueError("Trace has negative attention weights")
    sums = weights.sum(axis=-1)
    if np.abs(sums - 1.0).max() > ROW_SUM_TOLERANCE:
        raise ValueError(f"Attention rows do not sum to 1 (max deviation {np.abs(sums - 1.0).max():.2e})")


def first_token_positions(trace: AttentionTrace) -> Dict[int, int]:
    """item_position -> index of that item's first token."""
    firsts: Dict[int, int] = {}
    for index, pos in enumerate(trace.item_positions):
        if pos > 0 and pos not in firsts:
            firsts[pos] = index
    return firsts


def item_spans(trace: AttentionTrace) -> Dict[int, Tuple[int, int]]:
    """item_position -> [start, end) token range."""
    spans: Dict[int, Tuple[int, int]] = {}
    for index, pos in enumerate(trace.item_positions):
        if pos == 0:
            continue
        start, _ = spans.get(pos, (index, index))
        spans[pos] = (start, index + 1)
    return spans


def capture(encoder, prefix: Sequence[int], catalog: ItemCatalog, tokenizer: Tokenizer,
            max_tokens: Optional[int] = None) -> AttentionTrace:
    """
    Evaluation-mode [CLS] attention for one history.

    `encoder` may be an Encoder, a text-encoder Checkpoint or a path to one.
    """
    if isinstance(encoder, str):
        encoder = load_checkpoint(encoder)
    if isinstance(encoder, Checkpoint):
        encoder = Encoder.from_checkpoint(encoder)
    if not isinstance(encoder, Encoder):
        raise CheckpointError(f"Expected a text encoder, got {type(encoder).__name__}")
    if encoder.config.vocab_size != tokenizer.size:
        raise ValueError(f"Tokenizer has {tokenizer.size} tokens, encoder expects {encoder.config.vocab_size}")
    if len(prefix) < 1:
        raise ValueError("capture needs a prefix of at least one item")
    flat = flatten_history(list(prefix), catalog, tokenizer, max_tokens or encoder.config.max_tokens)
    _, trace = encode(encoder, flat, capture_attention=True)
    trace.description = f"prefix={list(prefix)} provenance={encoder.provenance}"
    validate_trace(trace)
    return trace


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    labels: List[Tuple[int, int]] = field(default_factory=list)
    metric: str = COSINE

    def to_frame(self) -> pd.DataFrame:
        names = [f"L{l}H{h}" for l, h in self.labels]
        return pd.DataFrame(self.values, index=names, columns=names)


def similarity(trace: AttentionTrace, metric: str = COSINE) -> SimilarityMatrix:
    """
    Pairwise similarity of every (layer, head) attention row.

    cosine: plain cosine of the rows; js: 1 - Jensen-Shannon distance (base 2).
    """
    rows = trace.weights.reshape(-1, trace.weights.shape[-1]).astype(np.float64)
    labels = [(l, h) for l in range(trace.num_layers) for h in range(trace.num_heads)]
    if metric == COSINE:
        norms = np.linalg.norm(rows, axis=1)
        if (norms == 0).any():
            raise ValueError("Attention row with zero norm")
        unit = rows / norms[:, None]
        values = np.clip(unit @ unit.T, -1.0, 1.0)
        np.fill_diagonal(values, 1.0)
        values = (values + values.T) / 2.0
    elif metric == JENSEN_SHANNON:
        if (rows.sum(axis=1) == 0).any():
            raise ValueError("Attention row with zero mass")
        n = rows.shape[0]
        values = np.ones((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                values[i, j] = values[j, i] = 1.0 - jensenshannon(rows[i], rows[j], base=2)
    else:
        raise ValueError(f"Unknown similarity metric {metric!r}")
    return SimilarityMatrix(values=values, labels=labels, metric=metric)


@dataclass
class StratificationScore:
    within: float
    between: float

    @property
    def evidence(self) -> float:
        return self.within - self.between


def layer_blocks(num_layers: int, num_heads: int, blocks: int = 3) -> List[List[int]]:
    """Row indices grouped by equal contiguous layer blocks."""
    blocks = max(1, min(blocks, num_layers))
    bounds = np.array_split(np.arange(num_layers), blocks)
    return [[l * num_heads + h for l in part for h in range(num_heads)] for part in bounds]


def stratification_score(matrix: SimilarityMatrix, partition: Sequence[Sequence[int]]) -> StratificationScore:
    """
    Mean similarity over i<j pairs inside the same block vs across blocks.

    A side with no pairs (one block, or only single-row blocks) is NaN, and so
    is the evidence.
    """
    n = matrix.values.shape[0]
    if any(len(block) == 0 for block in partition):
        raise ValueError("Partition contains an empty block")
    flat = [i for block in partition for i in block]
    if sorted(flat) != list(range(n)):
        raise ValueError(f"Partition must cover each of the {n} rows exactly once")
    block_of = np.empty(n, dtype=np.int64)
    for b, block in enumerate(partition):
        block_of[list(block)] = b
    iu, ju = np.triu_indices(n, k=1)
    same = block_of[iu] == block_of[ju]
    pair_values = matrix.values[iu, ju]
    within = float(pair_values[same].mean()) if same.any() else float('nan')
    between = float(pair_values[~same].mean()) if not same.all() else float('nan')
    return StratificationScore(within=within, between=between)


def export_trace(trace: AttentionTrace) -> pd.DataFrame:
    """One row per (layer, head, token) with the token annotations."""
    layers, heads, tokens = trace.weights.shape
    l, h, t = np.meshgrid(np.arange(layers), np.arange(heads), np.arange(tokens), indexing='ij')
    t = t.reshape(-1)
    return pd.DataFrame({
        'layer': l.reshape(-1),
        'head': h.reshape(-1),
        'token_index': t,
        'item_position': np.asarray(trace.item_positions)[t],
        'token_type': np.asarray(trace.token_types)[t],
        'weight': trace.weights.reshape(-1),
    })


# ---------------------------------------------------------------------------
# Layer sweep
# ---------------------------------------------------------------------------
def default_layer_sets(num_layers: int) -> List[Tuple[str, LayerSelection]]:
    """
    NONE, ALL, one layer per third at every offset, and the last layer of
    each third alone. At 12 layers this gives {0,4,8} ... {3,7,11} and {3},
    {7}, {11}. Thirds follow np.array_split, so when the depth is not a
    multiple of three the leading thirds are one layer longer and the shorter
    ones repeat their last layer at the extra offsets.
    """
    sets: List[Tuple[str, LayerSelection]] = [(NONE, NONE), (ALL, ALL)]
    if num_layers < 3:
        for layer in range(num_layers):
            sets.append((str(layer), frozenset([layer])))
        return sets
    thirds = [list(part) for part in np.array_split(np.arange(num_layers), 3)]
    for offset in range(len(thirds[0])):
        chosen = frozenset(int(part[min(offset, len(part) - 1)]) for part in thirds)
        sets.append((format_layers(chosen), chosen))
    for part in thirds:
        single = frozenset([int(part[-1])])
        sets.append((format_layers(single), single))
    return sets


@dataclass
class SweepReport:
    rows: List[Tuple[str, MetricsReport, int]]

    def to_frame(self) -> pd.DataFrame:
        records = []
        for label, metrics, trainable in self.rows:
            row = {'tuned_layers': label, 'trainable_params': trainable}
            row.update(metrics.columns())
            records.append(row)
        return pd.DataFrame(records)

    def format_table(self) -> str:
        """Metrics as rows and layer sets as columns, in percent."""
        frame = self.to_frame().set_index('tuned_layers').drop(columns=['trainable_params'])
        return (100 * frame.T).round(2).to_string()


def layer_sweep(data: LabData, base_checkpoint: Checkpoint, table: EmbeddingTable,
                layer_sets: Sequence[Tuple[str, LayerSelection]], config: StageConfig,
                protocol: Optional[EvalProtocol] = None, verbose: bool = False) -> SweepReport:
    """Stage FT2 from the same base checkpoint once per layer set, evaluated on test."""
    protocol = protocol or EvalProtocol()
    if data.tokenizer is None:
        raise ValueError("layer_sweep needs the tokenizer")
    rows = []
    for label, layers in layer_sets:
        encoder = Encoder.from_checkpoint(base_checkpoint)
        cell = replace(config, tuned_layers=layers)
        _, final_table, _ = stage_ft2(encoder, table, data.split, data.catalog, data.tokenizer, cell,
                                      data.valid, protocol, verbose=verbose)
        trainable = encoder.parameter_count(encoder.trainable_names())
        scorer = RecformerScorer(encoder, final_table.matrix, data.catalog, data.tokenizer)
        metrics = evaluate(scorer, data.test, protocol, data.catalog_size,
                           checkpoint_hash=base_checkpoint.content_hash(), label=label)
        logger.info("Layer set %s: %s", label, metrics.format_table())
        rows.append((label, metrics, trainable))
    return SweepReport(rows=rows)
