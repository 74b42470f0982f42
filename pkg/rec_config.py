"""
Seqinit Experiment Configuration
Flat key = value experiment files with dotted section keys

    # comments start with '#'
    seed = 7
    out_dir = runs/desk
    dataset.users = 2000
    encoder.layers = 6
    stages.ft2.tuned_layers = 1,3,5
    protocol.kind = sampled
    variant.FT-trainable.provenance = FT
    variant.FT-trainable.mode = trainable

Precedence: dataclass defaults < file < command-line overrides.
SEQINIT_OUT supplies out_dir when neither the file nor the command line do.
"""

import logging
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

from rec_corpus import TITLE_CLUSTER_TOKENS, TITLE_SHARED_TOKENS
from rec_eval import EvalProtocol
from rec_initlab import FURTHER_MODES, VariantSpec
from rec_pipeline import (LR_GRID, STAGE_FT1, STAGE_FT2, STAGE_LF, STAGE_PT, StageConfig, format_layers,
                          parse_layers)
from rec_seqmodels import BackboneConfig
from rec_textenc import EncoderConfig

logger = logging.getLogger(__name__)

OUT_ENV = 'SEQINIT_OUT'
DEFAULT_OUT = 'seqinit-out'

_TUPLE_ELEMENT = {'ks': int, 'lr_grid': float, 'fractions': float, 'seeds': int}
_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off')


class ConfigError(ValueError):
    """Config problem tied to one field (and line, when it came from a file)"""

    def __init__(self, message: str, field: str = "", line_number: Optional[int] = None):
        self.field = field
        self.line_number = line_number
        location = f"line {line_number}: " if line_number is not None else ""
        prefix = f"{field}: " if field else ""
        super().__init__(f"{location}{prefix}{message}")


@dataclass
class DatasetConfig:
    interactions: str = ""
    catalog: str = ""
    synthetic: bool = True
    clusters: int = 8
    items_per_cluster: int = 50
    users: int = 2000
    min_len: int = 5
    max_len: int = 20
    intra_cluster_prob: float = 0.8
    vocab_per_cluster: int = 30
    shared_vocab: int = 20
    item_chain_prob: float = 0.5
    pretrain_fraction: float = 0.5
    pretrain_min_user: int = 5
    pretrain_min_item: int = 5
    min_user: int = 4
    min_item: int = 0
    min_frequency: int = 1


@dataclass
class StagesConfig:
    lf: StageConfig = field(default_factory=lambda: StageConfig(stage=STAGE_LF, epochs=10))
    pt: StageConfig = field(default_factory=lambda: StageConfig(stage=STAGE_PT, epochs=10))
    ft1: StageConfig = field(default_factory=lambda: StageConfig(stage=STAGE_FT1))
    ft2: StageConfig = field(default_factory=lambda: StageConfig(stage=STAGE_FT2))


@dataclass
class PathsConfig:
    """Explicit artifact paths; empty means look the label up in the run registry"""
    encoder_lf: str = ""
    encoder_pt: str = ""
    encoder_ft: str = ""
    checkpoint: str = ""


@dataclass
class ProbeConfig:
    prefix_len: int = 3
    instances: int = 4
    metric: str = 'cosine'
    blocks: int = 3
    provenance: str = 'FT'
    layer_sets: str = ""


@dataclass
class AblationConfig:
    fractions: Tuple[float, ...] = (0.1, 0.5, 1.0)
    seeds: Tuple[int, ...] = (0,)
    mode: str = 'trainable'
    lr: float = 1e-3
    epochs: int = 200
    patience: int = 10


@dataclass
class ExperimentConfig:
    seed: Optional[int] = None
    out_dir: str = ""
    verbose: bool = False
    workers: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stages: StagesConfig = field(default_factory=StagesConfig)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    paths: PathsConfig = field(default_factory=PathsConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    variants: Dict[str, VariantSpec] = field(default_factory=dict)

    def resolved_out_dir(self) -> str:
        return self.out_dir or os.environ.get(OUT_ENV, '') or DEFAULT_OUT


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------
def parse_lines(text: str) -> List[Tuple[str, str, Optional[int]]]:
    """(key, raw value, line number) for every assignment in the text."""
    entries = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split('#', 1)[0].strip()
        if not stripped:
            continue
        if '=' not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", line_number=line_number)
        key, value = (part.strip() for part in stripped.split('=', 1))
        if not key:
            raise ConfigError("empty key", line_number=line_number)
        entries.append((key, value, line_number))
    return entries


def _coerce(name: str, current, raw: str, key: str, line_number: Optional[int]):
    try:
        if name == 'tuned_layers':
            return parse_layers(raw)
        if name in _TUPLE_ELEMENT:
            if name == 'lr_grid' and raw.lower() == 'grid':
                return tuple(LR_GRID)
            element = _TUPLE_ELEMENT[name]
            return tuple(element(part) for part in raw.split(',') if part.strip())
        if isinstance(current, bool):
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(current, int) or name == 'seed':
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(str(e), field=key, line_number=line_number) from e


def _assign(target, path: List[str], raw: str, key: str, line_number: Optional[int]):
    name = path[0]
    names = {f.name for f in fields(target)}
    if name not in names:
        raise ConfigError("unknown key", field=key, line_number=line_number)
    current = getattr(target, name)
    if len(path) > 1:
        if not is_dataclass(current):
            raise ConfigError("not a section", field=key, line_number=line_number)
        _assign(current, path[1:], raw, key, line_number)
        return
    if is_dataclass(current):
        raise ConfigError("is a section, not a value", field=key, line_number=line_number)
    setattr(target, name, _coerce(name, current, raw, key, line_number))


def apply_setting(config: ExperimentConfig, key: str, raw: str, line_number: Optional[int] = None):
    path = key.split('.')
    if path[0] == 'variant':
        if len(path) != 3:
            raise ConfigError("variant keys look like variant.<name>.<field>", field=key, line_number=line_number)
        spec = config.variants.setdefault(path[1], VariantSpec(name=path[1]))
        if path[2] == 'name':
            raise ConfigError("variant name comes from the key", field=key, line_number=line_number)
        _assign(spec, path[2:], raw, key, line_number)
        return
    _assign(config, path, raw, key, line_number)


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (),
                seed: Optional[int] = None, out_dir: Optional[str] = None) -> ExperimentConfig:
    """
    Build an ExperimentConfig from defaults, an optional file and overrides.

    overrides are 'key=value' strings (the command line's --set); seed and
    out_dir come from dedicated flags and win over everything.
    """
    config = ExperimentConfig()
    assigned = set()
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            for key, raw, line_number in parse_lines(f.read()):
                apply_setting(config, key, raw, line_number)
                assigned.add(key)
    for item in overrides:
        if '=' not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split('=', 1))
        apply_setting(config, key, raw)
        assigned.add(key)
    if 'protocol.ks' not in assigned:
        # cutoffs default per protocol kind
        config.protocol = replace(config.protocol, ks=())
    if seed is not None:
        config.seed = seed
    if out_dir:
        config.out_dir = out_dir
    if config.seed is not None:
        _propagate_seed(config, assigned)
    return config


def _propagate_seed(config: ExperimentConfig, assigned: Set[str]):
    """Components whose seed was never set explicitly inherit the master seed."""
    sections = {'encoder': config.encoder, 'backbone': config.backbone,
                'stages.lf': config.stages.lf, 'stages.pt': config.stages.pt,
                'stages.ft1': config.stages.ft1, 'stages.ft2': config.stages.ft2}
    sections.update((f"variant.{name}", spec) for name, spec in config.variants.items())
    for prefix, section in sections.items():
        if f"{prefix}.seed" not in assigned:
            section.seed = config.seed


def dump_config(config: ExperimentConfig) -> str:
    """Flat key = value rendering (round-trips through load_config)."""
    lines = []

    def walk(prefix: str, obj):
        for f in fields(obj):
            value = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if (f.name == 'variants' and not prefix) or (f.name == 'name' and prefix.startswith('variant.')):
                continue
            if is_dataclass(value):
                walk(key + '.', value)
            elif value is None:
                continue
            elif f.name == 'tuned_layers':
                lines.append(f"{key} = {format_layers(value)}")
            elif isinstance(value, tuple):
                lines.append(f"{key} = {','.join(str(v) for v in value)}")
            else:
                lines.append(f"{key} = {value}")

    walk('', config)
    for name, spec in config.variants.items():
        walk(f"variant.{name}.", spec)
    return '\n'.join(lines) + '\n'


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------
def validate(config: ExperimentConfig) -> List[str]:
    """Every violation as 'field.path: message'; empty means dispatchable."""
    problems: List[str] = []

    def check(condition: bool, key: str, message: str):
        if not condition:
            problems.append(f"{key}: {message}")

    check(config.seed is not None, 'seed', "master seed is required")

    ds = config.dataset
    if ds.synthetic:
        check(0.0 <= ds.intra_cluster_prob <= 1.0, 'dataset.intra_cluster_prob', "must be in [0, 1]")
        check(0.0 <= ds.item_chain_prob <= 1.0, 'dataset.item_chain_prob', "must be in [0, 1]")
        check(1 <= ds.min_len <= ds.max_len, 'dataset.max_len', "needs 1 <= min_len <= max_len")
        check(ds.clusters >= 1 and ds.items_per_cluster >= 1, 'dataset.clusters', "needs at least one cluster and item")
        check(ds.shared_vocab >= TITLE_SHARED_TOKENS, 'dataset.shared_vocab', f"must be >= {TITLE_SHARED_TOKENS}")
        check(ds.vocab_per_cluster >= TITLE_CLUSTER_TOKENS, 'dataset.vocab_per_cluster',
              f"must be >= {TITLE_CLUSTER_TOKENS}")
    else:
        for key, value in (('dataset.interactions', ds.interactions), ('dataset.catalog', ds.catalog)):
            check(bool(value) and os.path.exists(value), key, f"file not found: {value!r}")
    check(0.0 < ds.pretrain_fraction < 1.0, 'dataset.pretrain_fraction', "must be in (0, 1)")

    enc = config.encoder
    check(enc.layers >= 1, 'encoder.layers', "must be >= 1")
    check(enc.heads >= 1 and enc.d % enc.heads == 0, 'encoder.heads', f"d={enc.d} is not divisible by heads={enc.heads}")
    bb = config.backbone
    check(bb.heads >= 1 and bb.d % bb.heads == 0, 'backbone.heads', f"d={bb.d} is not divisible by heads={bb.heads}")
    check(bb.d == enc.d, 'backbone.d', f"backbone dim {bb.d} differs from encoder dim {enc.d}")

    for name in ('lf', 'pt', 'ft1', 'ft2'):
        stage = getattr(config.stages, name)
        try:
            stage.validate(enc.layers)
        except ValueError as e:
            problems.append(f"stages.{name}: {e}")

    proto = config.protocol
    try:
        proto.validate(proto.n_negatives + 1 if proto.kind == 'sampled' else None)
    except ValueError as e:
        problems.append(f"protocol: {e}")

    for name, spec in config.variants.items():
        try:
            spec.validate()
        except ValueError as e:
            problems.append(f"variant.{name}: {e}")
        if spec.mode in FURTHER_MODES and spec.parent and spec.parent not in config.variants:
            problems.append(f"variant.{name}.parent: unknown variant {spec.parent!r}")

    for f in fields(config.paths):
        value = getattr(config.paths, f.name)
        check(not value or os.path.exists(value), f"paths.{f.name}", f"file not found: {value!r}")

    check(all(0.0 < x <= 1.0 for x in config.ablation.fractions), 'ablation.fractions', "must be in (0, 1]")
    check(config.ablation.mode in ('freeze', 'trainable'), 'ablation.mode', "must be freeze or trainable")
    check(config.probe.metric in ('cosine', 'js'), 'probe.metric', "must be cosine or js")
    check(config.probe.prefix_len >= 1, 'probe.prefix_len', "must be >= 1")
    return problems
