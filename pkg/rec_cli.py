#!/usr/bin/env python
"""
Seqinit Command Line
Experiment driver: data preparation, training stages, variants and reports

    seqinit synth --config desk.cfg --seed 1
    seqinit pretrain --objective mlm --config desk.cfg --seed 1
    seqinit pretrain --objective mlm+iic --config desk.cfg --seed 1
    seqinit ft1 --config desk.cfg --seed 1
    seqinit run-matrix --config desk.cfg --seed 1 --set backbone.kind=bert4rec

Every command rebuilds the same data from the config and seed, writes its
checkpoints under content-hash names in the output directory and records
label -> file in artifacts.tsv so later commands can find them.

Exit status: 0 success, 1 runtime failure, 2 usage or config error.
"""

import argparse
import datetime
import logging
import os
import sys
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from rec_checkpoint import Checkpoint, load as load_checkpoint, save_artifact
from rec_config import ConfigError, ExperimentConfig, dump_config, load_config, validate
from rec_corpus import (InteractionLog, ItemCatalog, SequenceDataset, attach_negatives, dataset_statistics,
                        dataset_to_checkpoint, exclude_cold_eval, filter_and_build, generate_synthetic, ingest,
                        leave_one_out, split_users, subsample_users, trained_items, write_catalog,
                        write_interactions)
from rec_eval import SAMPLED, evaluate
from rec_initlab import (FURTHER_MODES, RECFORMER_MODES, LabData, LineageError, VariantSpec, build_item_table,
                         default_matrix, run_matrix, run_variant)
from rec_pipeline import (RecformerScorer, TrainReport, parse_layers, stage_ft1, stage_ft2, stage_pt,
                          stage_text_mlm)
from rec_probe import (capture, default_layer_sets, export_trace, layer_blocks, layer_sweep, similarity,
                       stratification_score)
from rec_seqmodels import EmbeddingTable, SequenceRecommender
from rec_textenc import Encoder, Tokenizer, build_tokenizer, new_encoder

logger = logging.getLogger(__name__)

COMMANDS = ('ingest', 'synth', 'pretrain', 'ft1', 'ft2', 'build-table', 'run-variant', 'run-matrix', 'eval',
            'probe-attention', 'sweep-layers', 'pretrain-size-ablation', 'validate')
OBJECTIVES = ('mlm', 'mlm+iic')
REGISTRY_FILE = 'artifacts.tsv'
REPORTS_DIR = 'reports'

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------
@dataclass
class PreparedData:
    catalog: ItemCatalog
    log: InteractionLog
    tokenizer: Tokenizer
    pretrain: SequenceDataset
    downstream: SequenceDataset
    lab: LabData


def load_corpus(config: ExperimentConfig, out_dir: Optional[str] = None) -> Tuple[ItemCatalog, InteractionLog]:
    ds = config.dataset
    if ds.synthetic:
        return generate_synthetic(ds.clusters, ds.items_per_cluster, ds.users, (ds.min_len, ds.max_len),
                                  ds.intra_cluster_prob, ds.vocab_per_cluster, config.seed,
                                  shared_vocab=ds.shared_vocab, item_chain_prob=ds.item_chain_prob)
    if not ds.interactions or not ds.catalog:
        raise ConfigError("set dataset.interactions and dataset.catalog, or dataset.synthetic = true",
                          field='dataset')
    return ingest(ds.interactions, ds.catalog, out_dir)


def prepare_data(config: ExperimentConfig, out_dir: Optional[str] = None) -> PreparedData:
    """
    Deterministic data for one seed: pre-training users carved off first,
    then filtering, leave-one-out, cold-item exclusion and frozen negatives.
    """
    ds = config.dataset
    catalog, log = load_corpus(config, out_dir)
    pre_log, down_log = split_users(log, ds.pretrain_fraction, config.seed)
    pretrain = filter_and_build(pre_log, ds.pretrain_min_user, ds.pretrain_min_item, catalog.size)
    downstream = filter_and_build(down_log, ds.min_user, ds.min_item, catalog.size)
    split = leave_one_out(downstream)
    seen = trained_items(split.train)
    valid = exclude_cold_eval(split.valid, seen)
    test = exclude_cold_eval(split.test, seen)
    if config.protocol.kind == SAMPLED:
        n = config.protocol.n_negatives
        valid = attach_negatives(valid, catalog.size, n, config.seed)
        test = attach_negatives(test, catalog.size, n, config.seed + 1)
    tokenizer = build_tokenizer(catalog, ds.min_frequency)
    lab = LabData(split=split, valid=valid, test=test, catalog=catalog, tokenizer=tokenizer)
    return PreparedData(catalog=catalog, log=log, tokenizer=tokenizer, pretrain=pretrain,
                        downstream=downstream, lab=lab)


# ---------------------------------------------------------------------------
# Artifact registry
# ---------------------------------------------------------------------------
class ArtifactRegistry:
    """label -> file name table kept next to the artifacts"""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.path = os.path.join(out_dir, REGISTRY_FILE)
        self.entries: Dict[str, str] = {}
        if os.path.exists(self.path):
            with open(self.path, 'r', encoding='utf-8') as f:
                for line in f:
                    parts = line.rstrip('\n').split('\t')
                    if len(parts) == 2:
                        self.entries[parts[0]] = parts[1]

    def register(self, label: str, path: str):
        self.entries[label] = os.path.basename(path)
        os.makedirs(self.out_dir, exist_ok=True)
        with open(self.path, 'w', encoding='utf-8') as f:
            for name in sorted(self.entries):
                f.write(f"{name}\t{self.entries[name]}\n")

    def lookup(self, label: str) -> Optional[str]:
        name = self.entries.get(label)
        if name is None:
            return None
        path = os.path.join(self.out_dir, name)
        return path if os.path.exists(path) else None


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------
class ExperimentRunner:
    """
    One command against one config

    Args:
        config: validated experiment configuration
        verbose: print progress lines as well as logging them
    """

    def __init__(self, config: ExperimentConfig, verbose: bool = False):
        self.config = config
        self.verbose = verbose or config.verbose
        self.out_dir = config.resolved_out_dir()
        os.makedirs(self.out_dir, exist_ok=True)
        self.registry = ArtifactRegistry(self.out_dir)
        self._data: Optional[PreparedData] = None

    def log(self, message: str):
        logger.info(message)
        if self.verbose:
            timestamp = datetime.datetime.now().strftime('%H:%M:%S')
            print(f"[CLI {timestamp}] {message}")

    @property
    def data(self) -> PreparedData:
        if self._data is None:
            self._data = prepare_data(self.config)
            stats = dataset_statistics(self._data.downstream)
            self.log(f"Data ready: {stats['users']} users, {stats['items']} items, "
                     f"{len(self._data.lab.test)} test instances")
        return self._data

    # -- artifacts ----------------------------------------------------------
    def save(self, ckpt: Checkpoint, label: str) -> str:
        path = save_artifact(ckpt, self.out_dir, label)
        self.registry.register(label, path)
        self.log(f"Saved {label}: {path}")
        return path

    def resolve(self, label: str, explicit: str = "", hint: str = "") -> Checkpoint:
        """Explicit path, a registry label given as the path, or the registry entry for label."""
        path = explicit
        if explicit and not os.path.exists(explicit):
            path = self.registry.lookup(explicit) or explicit
        if not path:
            path = self.registry.lookup(label)
        if not path:
            raise FileNotFoundError(f"No {label} artifact in {self.out_dir}" + (f"; {hint}" if hint else ""))
        return load_checkpoint(path)

    def encoder_checkpoint(self, provenance: str) -> Checkpoint:
        explicit = getattr(self.config.paths, f"encoder_{provenance.lower()}", "")
        hints = {'LF': "run `pretrain --objective mlm` first", 'PT': "run `pretrain --objective mlm+iic` first",
                 'FT': "run `ft1` first"}
        return self.resolve(f"encoder-{provenance}", explicit, hints.get(provenance, ""))

    def item_table(self, provenance: str) -> EmbeddingTable:
        path = self.registry.lookup(f"table-{provenance}")
        if path:
            return EmbeddingTable.from_checkpoint(load_checkpoint(path))
        return self.build_table(provenance)

    def build_table(self, provenance: str) -> EmbeddingTable:
        if provenance == 'random':
            table = EmbeddingTable.random(self.data.catalog.size, self.config.backbone.d, self.config.seed)
        else:
            table = build_item_table(self.encoder_checkpoint(provenance), self.data.catalog, self.data.tokenizer,
                                     d=self.config.backbone.d, workers=self.config.workers)
        self.save(table.to_checkpoint(), f"table-{provenance}")
        return table

    # -- reports -------------------------------------------------------------
    def write_report(self, name: str, text: str, records: Sequence[str] = ()) -> str:
        directory = os.path.join(self.out_dir, REPORTS_DIR)
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"{name}.txt")
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text.rstrip('\n') + '\n')
        if records:
            with open(os.path.join(directory, f"{name}.jsonl"), 'w', encoding='utf-8') as f:
                f.write('\n'.join(records) + '\n')
        print(text)
        return path

    def write_frame(self, name: str, frame: pd.DataFrame) -> str:
        directory = os.path.join(self.out_dir, REPORTS_DIR)
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"{name}.tsv")
        frame.to_csv(path, sep='\t', index=False, float_format='%.6g')
        return path

    def write_training(self, label: str, report: TrainReport):
        directory = os.path.join(self.out_dir, REPORTS_DIR)
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, f"train-{label}.jsonl"), 'w', encoding='utf-8') as f:
            f.write('\n'.join(report.to_lines()) + '\n')
        self.log(f"{label}: {report.epochs_run} epochs, best {report.best_epoch} ({report.stop_reason}, "
                 f"{report.wall_time:.1f}s)")

    def new_encoder(self) -> Encoder:
        overrides = {k: v for k, v in asdict(self.config.encoder).items() if k != 'vocab_size'}
        return new_encoder(self.data.tokenizer, **overrides)

    # -- commands ------------------------------------------------------------
    def cmd_synth(self, options) -> int:
        catalog, log = load_corpus(self.config)
        catalog_path = os.path.join(self.out_dir, 'catalog.tsv')
        interactions_path = os.path.join(self.out_dir, 'interactions.tsv')
        write_catalog(catalog, catalog_path)
        write_interactions(log, interactions_path, catalog)
        self.log(f"Wrote {catalog_path} and {interactions_path}")
        return self._statistics()

    def cmd_ingest(self, options) -> int:
        if self.config.dataset.synthetic:
            raise ConfigError("ingest reads files; set dataset.synthetic = false", field='dataset.synthetic')
        self._data = prepare_data(self.config, self.out_dir)
        self.save(dataset_to_checkpoint(self._data.pretrain), 'dataset-pretrain')
        self.save(dataset_to_checkpoint(self._data.downstream), 'dataset-downstream')
        return self._statistics()

    def _statistics(self) -> int:
        rows = []
        for name, dataset in (('pretrain', self.data.pretrain), ('downstream', self.data.downstream)):
            row = {'dataset': name}
            row.update(dataset_statistics(dataset))
            rows.append(row)
        frame = pd.DataFrame(rows)
        self.write_frame('statistics', frame)
        self.write_report('statistics', frame.to_string(index=False))
        return EXIT_OK

    def cmd_pretrain(self, options) -> int:
        objective = getattr(options, 'objective', 'mlm+iic')
        data = self.data
        if objective == 'mlm':
            encoder = self.new_encoder()
            ckpt, report = stage_text_mlm(encoder, data.catalog, data.tokenizer, self.config.stages.lf,
                                          verbose=self.verbose)
            label = 'encoder-LF'
        elif objective == 'mlm+iic':
            encoder = Encoder.from_checkpoint(self.encoder_checkpoint('LF'))
            ckpt, report = stage_pt(encoder, data.pretrain, data.catalog, data.tokenizer, self.config.stages.pt,
                                    verbose=self.verbose)
            label = 'encoder-PT'
        else:
            raise ConfigError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}", field='objective')
        self.save(ckpt, label)
        self.write_training(label, report)
        return EXIT_OK

    def cmd_ft1(self, options) -> int:
        data = self.data
        encoder = Encoder.from_checkpoint(self.encoder_checkpoint('PT'))
        ckpt, table, report = stage_ft1(encoder, data.lab.split, data.catalog, data.tokenizer,
                                        self.config.stages.ft1, data.lab.valid, self.config.protocol,
                                        verbose=self.verbose)
        self.save(ckpt, 'encoder-FT')
        self.save(table.to_checkpoint(), 'table-FT')
        self.write_training('encoder-FT', report)
        return EXIT_OK

    def cmd_ft2(self, options) -> int:
        data = self.data
        base = self.encoder_checkpoint('FT')
        encoder = Encoder.from_checkpoint(base)
        table = self.item_table('FT')
        ckpt, final_table, report = stage_ft2(encoder, table, data.lab.split, data.catalog, data.tokenizer,
                                              self.config.stages.ft2, data.lab.valid, self.config.protocol,
                                              verbose=self.verbose)
        self.save(ckpt, 'recformer-FT2')
        self.write_training('recformer-FT2', report)
        scorer = RecformerScorer(encoder, final_table.matrix, data.catalog, data.tokenizer,
                                 workers=self.config.workers)
        metrics = evaluate(scorer, data.lab.test, self.config.protocol, data.catalog.size,
                           checkpoint_hash=ckpt.content_hash(), label='recformer-FT2')
        self.write_report('ft2', metrics.format_table(), [metrics.to_record()])
        return EXIT_OK

    def cmd_build_table(self, options) -> int:
        provenance = getattr(options, 'provenance', 'FT')
        table = self.build_table(provenance)
        self.write_report(f"table-{provenance}", f"table-{provenance}: {table.rows}x{table.dim} "
                                                 f"source={table.source_hash or '-'} checksum={table.checksum()}")
        return EXIT_OK

    def variant_specs(self) -> List[VariantSpec]:
        if self.config.variants:
            return list(self.config.variants.values())
        return default_matrix(self.config.backbone.kind, self.config.seed)

    def cmd_run_variant(self, options) -> int:
        name = getattr(options, 'variant', None)
        specs = {s.name: s for s in self.variant_specs()}
        if name not in specs:
            raise ConfigError(f"unknown variant {name!r}; known: {sorted(specs)}", field='variant')
        spec = specs[name]
        parent = None
        if spec.mode in FURTHER_MODES:
            path = self.registry.lookup(f"variant-{spec.parent}")
            if path is None:
                raise LineageError(f"{spec.name}: run variant {spec.parent!r} first")
            parent = load_checkpoint(path)
        encoder_ckpt = self.encoder_checkpoint('FT') if spec.mode in RECFORMER_MODES else None
        result = run_variant(spec, self.data.lab, self.config.protocol, self.item_table(spec.provenance),
                             self._backbone_for(spec), parent, encoder_ckpt, self.out_dir, self.verbose)
        self.registry.register(f"variant-{spec.name}", result.path)
        self.write_training(f"variant-{spec.name}", result.train_report)
        self.write_report(f"variant-{spec.name}", result.metrics.format_table(), [result.metrics.to_record()])
        return EXIT_OK

    def _backbone_for(self, spec: VariantSpec):
        if spec.backbone == self.config.backbone.kind:
            return self.config.backbone
        return None

    def cmd_run_matrix(self, options) -> int:
        specs = self.variant_specs()
        tables = {p: self.item_table(p) for p in sorted({s.provenance for s in specs})}
        encoder_ckpt = None
        if any(s.mode in RECFORMER_MODES for s in specs):
            encoder_ckpt = self.encoder_checkpoint('FT')
        backbones = {s.backbone for s in specs}
        backbone = self.config.backbone if backbones == {self.config.backbone.kind} else None
        report = run_matrix(specs, self.data.lab, self.config.protocol, tables, backbone, encoder_ckpt,
                            self.out_dir, self.verbose)
        for result in report.results:
            self.registry.register(f"variant-{result.spec.name}", result.path)
            self.write_training(f"variant-{result.spec.name}", result.train_report)
        self.write_frame('matrix', report.to_frame())
        self.write_report('matrix', report.format_table(), report.to_records())
        return EXIT_OK

    def cmd_eval(self, options) -> int:
        data = self.data
        target = getattr(options, 'checkpoint', None) or self.config.paths.checkpoint
        if not target:
            raise ConfigError("eval needs --checkpoint or paths.checkpoint", field='paths.checkpoint')
        ckpt = self.resolve(target, target)
        label = os.path.splitext(os.path.basename(target))[0]
        if ckpt.kind == 'seqrec':
            scorer = SequenceRecommender.from_checkpoint(ckpt)
            source = ckpt.meta.get('source_hash', '')
        elif ckpt.kind == 'text_encoder':
            encoder = Encoder.from_checkpoint(ckpt)
            if 'item_table' in ckpt.tensors:
                matrix = ckpt.tensors['item_table']
            else:
                matrix = self.item_table('FT').matrix
            scorer = RecformerScorer(encoder, matrix, data.catalog, data.tokenizer, workers=self.config.workers)
            source = ckpt.content_hash()
        else:
            raise ValueError(f"Cannot evaluate a {ckpt.kind!r} checkpoint")
        metrics = evaluate(scorer, data.lab.test, self.config.protocol, data.catalog.size,
                           checkpoint_hash=source, label=label)
        self.write_report(f"eval-{label}", metrics.format_table(), [metrics.to_record()])
        return EXIT_OK

    def cmd_probe_attention(self, options) -> int:
        data = self.data
        probe = self.config.probe
        ckpt = self.encoder_checkpoint(probe.provenance)
        encoder = Encoder.from_checkpoint(ckpt)
        instances = data.lab.test[:probe.instances]
        if not instances:
            raise ValueError("No test instances to probe")
        partition = layer_blocks(encoder.config.layers, encoder.config.heads, probe.blocks)
        rows, traces = [], []
        first_matrix = None
        for inst in instances:
            trace = capture(encoder, inst.prefix[-probe.prefix_len:], data.catalog, data.tokenizer)
            matrix = similarity(trace, probe.metric)
            score = stratification_score(matrix, partition)
            if first_matrix is None:
                first_matrix = matrix
            frame = export_trace(trace)
            frame.insert(0, 'user', inst.user)
            traces.append(frame)
            rows.append({'user': inst.user, 'tokens': len(trace.token_ids), 'within': score.within,
                         'between': score.between, 'evidence': score.evidence})
        self.write_frame('attention-trace', pd.concat(traces, ignore_index=True))
        sim_frame = first_matrix.to_frame()
        sim_frame.index.name = 'row'
        self.write_frame('attention-similarity', sim_frame.reset_index())
        summary = pd.DataFrame(rows)
        # NaN scores are written as null
        records = summary.to_json(orient='records', lines=True).splitlines()
        self.write_report('probe', f"{probe.provenance} encoder {ckpt.content_hash()[:12]}, metric={probe.metric}\n"
                                   + summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"), records)
        return EXIT_OK

    def layer_sets(self, num_layers: int):
        text = self.config.probe.layer_sets
        if not text:
            return default_layer_sets(num_layers)
        return [(part.strip(), parse_layers(part)) for part in text.split(';') if part.strip()]

    def cmd_sweep_layers(self, options) -> int:
        base = self.encoder_checkpoint('FT')
        table = self.item_table('FT')
        num_layers = Encoder.from_checkpoint(base).config.layers
        report = layer_sweep(self.data.lab, base, table, self.layer_sets(num_layers), self.config.stages.ft2,
                             self.config.protocol, verbose=self.verbose)
        self.write_frame('sweep', report.to_frame())
        self.write_report('sweep', report.format_table(), [m.to_record() for _, m, _ in report.rows])
        return EXIT_OK

    def cmd_pretrain_size_ablation(self, options) -> int:
        """PT on a fraction of the pre-training users, then FT1 and one variant on the FT table."""
        data = self.data
        ablation = self.config.ablation
        lf = self.encoder_checkpoint('LF')
        rows, records = [], []
        for seed in ablation.seeds:
            for fraction in ablation.fractions:
                tag = f"f{fraction:g}-s{seed}"
                subset = subsample_users(data.pretrain, fraction, seed)
                encoder = Encoder.from_checkpoint(lf)
                pt_ckpt, pt_report = stage_pt(encoder, subset, data.catalog, data.tokenizer,
                                              replace(self.config.stages.pt, seed=seed), verbose=self.verbose)
                self.save(pt_ckpt, f"encoder-PT-{tag}")
                self.write_training(f"encoder-PT-{tag}", pt_report)
                ft_ckpt, table, _ = stage_ft1(encoder, data.lab.split, data.catalog, data.tokenizer,
                                              replace(self.config.stages.ft1, seed=seed), data.lab.valid,
                                              self.config.protocol, verbose=self.verbose)
                self.save(ft_ckpt, f"encoder-FT-{tag}")
                spec = VariantSpec(name=f"ablation-{tag}", backbone=self.config.backbone.kind, provenance='FT',
                                   mode=ablation.mode, seed=seed, lr=ablation.lr, epochs=ablation.epochs,
                                   patience=ablation.patience)
                result = run_variant(spec, data.lab, self.config.protocol, table, self.config.backbone,
                                     out_dir=self.out_dir, verbose=self.verbose)
                self.registry.register(f"variant-{spec.name}", result.path)
                row = {'fraction': fraction, 'seed': seed, 'pretrain_users': len(subset)}
                row.update(result.metrics.columns())
                rows.append(row)
                records.append(result.metrics.to_record())
        frame = pd.DataFrame(rows)
        self.write_frame('ablation', frame)
        summary = frame.drop(columns=['seed']).groupby('fraction', sort=True).mean().reset_index()
        self.write_report('ablation', summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"), records)
        return EXIT_OK


def dispatch(command: str, config: ExperimentConfig, options: Optional[argparse.Namespace] = None,
             verbose: bool = False) -> int:
    """Run one command; returns the exit status."""
    if command == 'validate':
        problems = validate(config)
        for problem in problems:
            print(problem)
        if not problems:
            print("Config OK")
        return EXIT_USAGE if problems else EXIT_OK
    if command not in COMMANDS:
        logger.error("Unknown command %r; expected one of %s", command, ', '.join(COMMANDS))
        return EXIT_USAGE
    problems = validate(config)
    if problems:
        for problem in problems:
            logger.error("Config: %s", problem)
        return EXIT_USAGE
    runner = ExperimentRunner(config, verbose)
    with open(os.path.join(runner.out_dir, 'config.txt'), 'w', encoding='utf-8') as f:
        f.write(dump_config(config))
    handler = getattr(runner, 'cmd_' + command.replace('-', '_'))
    return handler(options or argparse.Namespace())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Experiment file (key = value lines)')
    common.add_argument('--seed', type=int, help='Master seed (overrides the file)')
    common.add_argument('--out', help='Output directory (default: $SEQINIT_OUT or ./seqinit-out)')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override any config key, e.g. --set encoder.layers=4')
    common.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    common.add_argument('--verbose', action='store_true', help='Print progress lines')

    parser = argparse.ArgumentParser(prog='seqinit', description='Behaviour-tuned text-encoder item initialisation lab')
    sub = parser.add_subparsers(dest='command', required=True)
    for command in COMMANDS:
        p = sub.add_parser(command, parents=[common])
        if command == 'pretrain':
            p.add_argument('--objective', choices=OBJECTIVES, default='mlm+iic',
                           help='mlm: text-only LF encoder; mlm+iic: behaviour pre-training from LF')
        elif command == 'build-table':
            p.add_argument('--provenance', choices=('random', 'LF', 'PT', 'FT'), default='FT')
        elif command == 'run-variant':
            p.add_argument('--variant', required=True, help='Variant name from the config or the default matrix')
        elif command == 'eval':
            p.add_argument('--checkpoint', help='Checkpoint path or artifact label')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    try:
        config = load_config(args.config, args.set, seed=args.seed, out_dir=args.out)
    except (ConfigError, FileNotFoundError) as e:
        print(f"seqinit: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return dispatch(args.command, config, args, verbose=args.verbose)
    except ConfigError as e:
        print(f"seqinit: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError, RuntimeError, FloatingPointError, KeyError) as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(f"seqinit: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
