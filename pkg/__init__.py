"""
Seqinit - Behaviour-tuned text-encoder item initialisation
Desk-scale lab for initialising SASRec/BERT4Rec item tables from text encoders

Pure numpy: the autograd engine, the text encoder and both backbones are
implemented here, so every experiment runs on a laptop CPU.
"""

__version__ = "0.3.0"
__author__ = "seqinit contributors"

# Autograd
from .rec_tensor import Tensor, ShapeError, AxisError, AdamState, adam_step, high_precision

# Checkpoints
from .rec_checkpoint import Checkpoint, CheckpointError, save_artifact

# Data
from .rec_corpus import (
    ItemCatalog,
    InteractionLog,
    SequenceDataset,
    EvalInstance,
    LeaveOneOutSplit,
    CorpusError,
    EmptyDatasetError,
    ingest,
    filter_and_build,
    leave_one_out,
    exclude_cold_eval,
    sample_negatives,
    subsample_users,
    generate_synthetic,
)

# Text encoder
from .rec_textenc import Tokenizer, Encoder, EncoderConfig, AttentionTrace, build_tokenizer, encode

# Backbones
from .rec_seqmodels import EmbeddingTable, BackboneConfig, SequenceRecommender

# Training stages
from .rec_pipeline import StageConfig, TrainReport, stage_text_mlm, stage_pt, stage_ft1, stage_ft2

# Evaluation
from .rec_eval import EvalProtocol, MetricsReport, evaluate

# Variants and probes
from .rec_initlab import VariantSpec, LabData, LineageError, build_item_table, assemble, run_variant, run_matrix
from .rec_probe import capture, similarity, stratification_score, layer_sweep

# Experiment driver
from .rec_config import ExperimentConfig, ConfigError, load_config
from .rec_cli import dispatch, main

__all__ = [
    "Tensor",
    "ShapeError",
    "AxisError",
    "AdamState",
    "adam_step",
    "high_precision",
    "Checkpoint",
    "CheckpointError",
    "save_artifact",
    "ItemCatalog",
    "InteractionLog",
    "SequenceDataset",
    "EvalInstance",
    "LeaveOneOutSplit",
    "CorpusError",
    "EmptyDatasetError",
    "ingest",
    "filter_and_build",
    "leave_one_out",
    "exclude_cold_eval",
    "sample_negatives",
    "subsample_users",
    "generate_synthetic",
    "Tokenizer",
    "Encoder",
    "EncoderConfig",
    "AttentionTrace",
    "build_tokenizer",
    "encode",
    "EmbeddingTable",
    "BackboneConfig",
    "SequenceRecommender",
    "StageConfig",
    "TrainReport",
    "stage_text_mlm",
    "stage_pt",
    "stage_ft1",
    "stage_ft2",
    "EvalProtocol",
    "MetricsReport",
    "evaluate",
    "VariantSpec",
    "LabData",
    "LineageError",
    "build_item_table",
    "assemble",
    "run_variant",
    "run_matrix",
    "capture",
    "similarity",
    "stratification_score",
    "layer_sweep",
    "ExperimentConfig",
    "ConfigError",
    "load_config",
    "dispatch",
    "main",
]

def get_version():
    """Get the current version of Seqinit"""
    return __version__

def about():
    """Print information about Seqinit"""
    print(f"""
    ╔═══════════════════════════════════════════╗
    ║            Seqinit v{__version__}               ║
    ║   Text-encoder item initialisation lab    ║
    ╚═══════════════════════════════════════════╝

    Features:
    - numpy autograd with finite-difference checks
    - key/value item text encoder (MLM, IIC, FT1/FT2)
    - SASRec and BERT4Rec backbones
    - random / LF / PT / FT item tables, freeze or trainable
    - [CLS] attention probe and tuned-layer sweep
    - sampled and full-ranking HR@k / NDCG@k

    Usage:
      seqinit synth --seed 1 --out runs/desk
      seqinit pretrain --objective mlm --seed 1 --out runs/desk
      seqinit run-matrix --seed 1 --out runs/desk
    """)

if __name__ == "__main__":
    about()
