"""
Seqinit Initialization Lab
Item tables from encoder checkpoints and the variant matrix built on them

Variant modes:
    freeze               text table fixed, backbone trained
    trainable            text table and backbone trained
    further_all          continue a trained FT-freeze run with everything trainable
    further_emb          continue a trained FT-freeze run with only the table trainable
    additive_id          item vector = trainable random ID row + frozen text row
    recformer            stage FT2 of the FT encoder with its table fixed
    recformer_trainable  stage FT2 with the table trainable
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from rec_checkpoint import Checkpoint, load as load_checkpoint, save_artifact
from rec_corpus import EvalInstance, ItemCatalog, LeaveOneOutSplit
from rec_eval import EvalProtocol, MetricsReport, evaluate
from rec_pipeline import (MONITOR_K, RecformerScorer, StageConfig, TrainReport, TrainingLoop,
                          parse_layers, stage_ft2)
from rec_seqmodels import (BackboneConfig, EmbeddingTable, SequenceRecommender, SASREC,
                           training_loss)
from rec_textenc import Encoder, Tokenizer, encode_catalog

logger = logging.getLogger(__name__)

FREEZE = 'freeze'
TRAINABLE = 'trainable'
FURTHER_ALL = 'further_all'
FURTHER_EMB = 'further_emb'
ADDITIVE_ID = 'additive_id'
RECFORMER = 'recformer'
RECFORMER_TRAINABLE = 'recformer_trainable'
MODES = (FREEZE, TRAINABLE, FURTHER_ALL, FURTHER_EMB, ADDITIVE_ID, RECFORMER, RECFORMER_TRAINABLE)
FURTHER_MODES = (FURTHER_ALL, FURTHER_EMB)
RECFORMER_MODES = (RECFORMER, RECFORMER_TRAINABLE)


class LineageError(ValueError):
    """A variant's starting point does not have the required history"""


@dataclass
class VariantSpec:
    name: str
    backbone: str = SASREC
    provenance: str = 'random'
    mode: str = TRAINABLE
    seed: int = 0
    lr: float = 1e-3
    lr_grid: Tuple[float, ...] = ()
    epochs: int = 200
    batch_size: int = 128
    patience: int = 10
    parent: Optional[str] = None

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"{self.name}: unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode in FURTHER_MODES:
            if self.provenance != 'FT':
                raise ValueError(f"{self.name}: {self.mode} starts from an FT-freeze run, provenance must be FT")
            if not self.parent:
                raise ValueError(f"{self.name}: {self.mode} needs a parent FT-freeze variant")
        if self.mode == ADDITIVE_ID and self.provenance == 'random':
            raise ValueError(f"{self.name}: additive_id needs a text table, not a random one")
        if self.mode in RECFORMER_MODES and self.provenance != 'FT':
            raise ValueError(f"{self.name}: {self.mode} runs on the FT encoder, provenance must be FT")

    def stage_config(self, lr: Optional[float] = None) -> StageConfig:
        return StageConfig(stage='FT2', epochs=self.epochs, batch_size=self.batch_size,
                           lr=self.lr if lr is None else lr, patience=self.patience, seed=self.seed)


@dataclass
class LabData:
    """Everything the variants of one comparison share"""
    split: LeaveOneOutSplit
    valid: List[EvalInstance]
    test: List[EvalInstance]
    catalog: ItemCatalog
    tokenizer: Optional[Tokenizer] = None

    @property
    def catalog_size(self) -> int:
        return self.catalog.size


@dataclass
class VariantResult:
    spec: VariantSpec
    checkpoint: Checkpoint
    metrics: MetricsReport
    train_report: TrainReport
    lr: float
    path: Optional[str] = None


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------
def provenance_of(ckpt: Checkpoint) -> str:
    """LF / PT / FT from the encoder checkpoint's recorded lineage."""
    provenance = ckpt.meta.get('provenance', 'random')
    if provenance not in ('random', 'LF', 'PT', 'FT'):
        raise LineageError(f"Encoder checkpoint has unknown provenance {provenance!r}")
    return provenance


def build_item_table(encoder_ckpt, catalog: ItemCatalog, tokenizer: Tokenizer,
                     d: Optional[int] = None, workers: int = 1) -> EmbeddingTable:
    """Row i is the encoder's vector for item i; provenance follows the checkpoint lineage."""
    if isinstance(encoder_ckpt, str):
        encoder_ckpt = load_checkpoint(encoder_ckpt)
    encoder = Encoder.from_checkpoint(encoder_ckpt)
    if encoder.config.vocab_size != tokenizer.size:
        raise ValueError(f"Tokenizer has {tokenizer.size} tokens, encoder expects {encoder.config.vocab_size}")
    if d is not None and encoder.config.d != d:
        raise ValueError(f"Encoder dim {encoder.config.d} does not match backbone dim {d}")
    matrix = encode_catalog(encoder, catalog, tokenizer, workers=workers)
    return EmbeddingTable(matrix, provenance_of(encoder_ckpt), trainable=False,
                          source_hash=encoder_ckpt.content_hash())


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------
def check_lineage(parent: Checkpoint, spec: VariantSpec):
    meta = parent.meta
    if parent.kind != 'seqrec' or meta.get('mode') != FREEZE or meta.get('provenance') != 'FT':
        raise LineageError(f"{spec.name}: parent must be a persisted FT-freeze run, got kind={parent.kind} "
                           f"mode={meta.get('mode')} provenance={meta.get('provenance')}")
    if meta.get('backbone') != spec.backbone:
        raise LineageError(f"{spec.name}: parent backbone {meta.get('backbone')} differs from {spec.backbone}")


def assemble(spec: VariantSpec, table: EmbeddingTable, backbone: Optional[BackboneConfig] = None,
             parent: Optional[Checkpoint] = None) -> SequenceRecommender:
    """Backbone + table(s) with trainability set by the spec's mode."""
    spec.validate()
    if spec.mode in RECFORMER_MODES:
        raise ValueError(f"{spec.name}: {spec.mode} is trained by stage FT2, not assembled on a backbone")
    if table.provenance != spec.provenance:
        raise ValueError(f"{spec.name}: table provenance {table.provenance} differs from spec {spec.provenance}")
    backbone = backbone or BackboneConfig.for_kind(spec.backbone, d=table.dim)
    backbone = replace(backbone, kind=spec.backbone, seed=spec.seed)

    if spec.mode in FURTHER_MODES:
        if parent is None:
            raise LineageError(f"{spec.name}: {spec.mode} needs the persisted FT-freeze checkpoint")
        check_lineage(parent, spec)
        model = SequenceRecommender.from_checkpoint(parent)
        if spec.mode == FURTHER_ALL:
            model.set_trainable(model.params)
        else:
            model.set_trainable(["items.text"])
        return model

    id_table = None
    if spec.mode == ADDITIVE_ID:
        id_table = EmbeddingTable.random(table.rows, table.dim, seed=spec.seed + 1)
    model = SequenceRecommender(backbone, table, id_table)
    if spec.mode == FREEZE or spec.mode == ADDITIVE_ID:
        model.set_trainable([n for n in model.params if n != "items.text"])
    else:
        model.set_trainable(model.params)
    return model


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------
def train_recommender(model: SequenceRecommender, data: LabData, config: StageConfig,
                      protocol: EvalProtocol, verbose: bool = False) -> TrainReport:
    """Backbone training with early stopping on validation NDCG@10."""
    users = sorted(u for u, s in data.split.train.items() if len(s) >= 2)
    loop = TrainingLoop(f"{model.config.kind}", model.params, config, verbose)

    def train_epoch(epoch: int) -> float:
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(users))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [data.split.train[users[i]] for i in order[start:start + config.batch_size]]
            loss = training_loss(model, batch, rng)
            if loss is not None:
                losses.append(loop.step(loss))
        return float(np.mean(losses)) if losses else 0.0

    def validate() -> float:
        return evaluate(model, data.valid, protocol, data.catalog_size).ndcg[MONITOR_K]

    return loop.run(train_epoch, validate)


def _variant_meta(spec: VariantSpec, lr: float, table: EmbeddingTable) -> Dict:
    return {'variant': spec.name, 'mode': spec.mode, 'backbone': spec.backbone,
            'provenance': spec.provenance, 'seed': spec.seed, 'lr': lr,
            'table_source': table.source_hash or '', 'parent': spec.parent or ''}


def _run_backbone(spec: VariantSpec, data: LabData, protocol: EvalProtocol, table: EmbeddingTable,
                  backbone: Optional[BackboneConfig], parent: Optional[Checkpoint], lr: float,
                  verbose: bool) -> Tuple[SequenceRecommender, TrainReport]:
    model = assemble(spec, table, backbone, parent)
    report = train_recommender(model, data, spec.stage_config(lr), protocol, verbose)
    return model, report


def _run_recformer(spec: VariantSpec, data: LabData, protocol: EvalProtocol, table: EmbeddingTable,
                   encoder_ckpt: Checkpoint, lr: float, verbose: bool):
    if data.tokenizer is None:
        raise ValueError(f"{spec.name}: recformer variants need the tokenizer")
    if provenance_of(encoder_ckpt) != 'FT':
        raise LineageError(f"{spec.name}: recformer variants start from the FT1 encoder")
    encoder = Encoder.from_checkpoint(encoder_ckpt)
    config = replace(spec.stage_config(lr), tuned_layers=parse_layers('ALL'))
    ckpt, final_table, report = stage_ft2(encoder, table, data.split, data.catalog, data.tokenizer, config,
                                          data.valid, protocol, train_table=spec.mode == RECFORMER_TRAINABLE,
                                          verbose=verbose)
    scorer = RecformerScorer(encoder, final_table.matrix, data.catalog, data.tokenizer)
    return scorer, ckpt, report


def run_variant(spec: VariantSpec, data: LabData, protocol: EvalProtocol, table: EmbeddingTable,
                backbone: Optional[BackboneConfig] = None, parent: Optional[Checkpoint] = None,
                encoder_ckpt: Optional[Checkpoint] = None, out_dir: Optional[str] = None,
                verbose: bool = False) -> VariantResult:
    """
    Train one variant (choosing the learning rate on validation when a
    grid is given), then evaluate the best checkpoint on the test set.
    """
    spec.validate()
    grid = tuple(spec.lr_grid) or (spec.lr,)
    best = None
    for lr in grid:
        if spec.mode in RECFORMER_MODES:
            if encoder_ckpt is None:
                raise ValueError(f"{spec.name}: recformer variants need the FT encoder checkpoint")
            scorer, ckpt, report = _run_recformer(spec, data, protocol, table, encoder_ckpt, lr, verbose)
            ckpt.meta.update(_variant_meta(spec, lr, table))
        else:
            scorer, report = _run_backbone(spec, data, protocol, table, backbone, parent, lr, verbose)
            ckpt = scorer.to_checkpoint(_variant_meta(spec, lr, table))
        valid_score = max(v for v in report.valid_ndcg if v is not None) if any(
            v is not None for v in report.valid_ndcg) else 0.0
        if best is None or valid_score > best[0]:
            best = (valid_score, lr, scorer, ckpt, report)

    _, lr, scorer, ckpt, report = best
    metrics = evaluate(scorer, data.test, protocol, data.catalog_size,
                       checkpoint_hash=table.source_hash or '', label=spec.name)
    path = save_artifact(ckpt, out_dir, f"variant-{spec.name}") if out_dir else None
    logger.info("Variant %s (lr=%g): %s", spec.name, lr, metrics.format_table())
    return VariantResult(spec=spec, checkpoint=ckpt, metrics=metrics, train_report=report, lr=lr, path=path)


# ---------------------------------------------------------------------------
# Matrix
# ---------------------------------------------------------------------------
@dataclass
class MatrixReport:
    results: List[VariantResult]
    baseline: Optional[str] = None

    def to_frame(self) -> pd.DataFrame:
        """One row per variant with metrics and improvement on NDCG@10 over the baseline (%)."""
        rows = []
        for r in self.results:
            row = {'variant': r.spec.name, 'backbone': r.spec.backbone, 'provenance': r.spec.provenance,
                   'mode': r.spec.mode}
            row.update(r.metrics.columns())
            rows.append(row)
        frame = pd.DataFrame(rows)
        base = None
        if self.baseline is not None:
            base = frame.loc[frame['variant'] == self.baseline, 'NDCG@10'].iloc[0]
        frame['Improv.'] = [improvement(v, base) for v in frame['NDCG@10']] if len(frame) else []
        return frame

    def format_table(self) -> str:
        frame = self.to_frame()
        shown = frame.copy()
        for col in shown.columns:
            if col.startswith('HR@') or col.startswith('NDCG@'):
                shown[col] = (100 * shown[col]).map(lambda v: f"{v:.2f}")
        shown['Improv.'] = shown['Improv.'].map(lambda v: '-' if pd.isna(v) else f"{v:+.2f}%")
        return shown.to_string(index=False)

    def to_records(self) -> List[str]:
        return [r.metrics.to_record() for r in self.results]


def improvement(value: float, base: Optional[float]) -> float:
    """Relative improvement in percent; NaN without a usable baseline."""
    if base is None or base == 0:
        return float('nan')
    return 100.0 * (value - base) / base


def run_matrix(specs: Sequence[VariantSpec], data: LabData, protocol: EvalProtocol,
               tables: Dict[str, EmbeddingTable], backbone: Optional[BackboneConfig] = None,
               encoder_ckpt: Optional[Checkpoint] = None, out_dir: Optional[str] = None,
               verbose: bool = False) -> MatrixReport:
    """
    Run every spec on the same data and frozen negatives.

    further_* specs name their parent spec, which must appear earlier in
    the list. The first random-provenance spec is the Improv. baseline.
    """
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"Variant names must be unique: {names}")
    finished: Dict[str, VariantResult] = {}
    results = []
    for spec in specs:
        if spec.provenance not in tables:
            raise ValueError(f"{spec.name}: no {spec.provenance} item table available")
        parent = None
        if spec.mode in FURTHER_MODES:
            if spec.parent not in finished:
                raise LineageError(f"{spec.name}: parent {spec.parent!r} has not been run")
            done = finished[spec.parent]
            parent = load_checkpoint(done.path) if done.path else done.checkpoint
        result = run_variant(spec, data, protocol, tables[spec.provenance], backbone, parent,
                             encoder_ckpt, out_dir, verbose)
        finished[spec.name] = result
        results.append(result)
    baseline = next((s.name for s in specs if s.provenance == 'random'), None)
    return MatrixReport(results=results, baseline=baseline)


def default_matrix(backbone: str = SASREC, seed: int = 0, **overrides) -> List[VariantSpec]:
    """Random baseline, the six freeze/trainable x {LF, PT, FT} variants and the two further-train rows."""
    specs = [VariantSpec(name='random', backbone=backbone, provenance='random', mode=TRAINABLE, seed=seed, **overrides)]
    for provenance in ('LF', 'PT', 'FT'):
        for mode in (FREEZE, TRAINABLE):
            specs.append(VariantSpec(name=f"{provenance}-{mode}", backbone=backbone, provenance=provenance,
                                     mode=mode, seed=seed, **overrides))
    for mode, label in ((FURTHER_ALL, 'All'), (FURTHER_EMB, 'Emb')):
        specs.append(VariantSpec(name=f"FT-further-{label}", backbone=backbone, provenance='FT', mode=mode,
                                 seed=seed, parent='FT-freeze', **overrides))
    return specs
