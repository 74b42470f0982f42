"""
Seqinit Corpus
Dataset ingestion, filtering, leave-one-out splitting and negative sampling

Input files are tab-separated, one record per line:
    interactions:  user_id <TAB> item_id <TAB> integer_timestamp
    catalog:       item_id <TAB> key <TAB> value [<TAB> key <TAB> value ...]

Raw ids are remapped to dense integers in order of first appearance, so
ingesting the same files twice yields the same assignment. A seeded
synthetic generator writes files in the same format as a desk-scale
stand-in for the Amazon review dumps.
"""

import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from rec_checkpoint import Checkpoint, load as load_checkpoint

logger = logging.getLogger(__name__)

# Filtering defaults: (min_user_interactions, min_item_interactions)
PRETRAIN_THRESHOLDS = (5, 5)
DOWNSTREAM_THRESHOLDS = (4, 0)
DEFAULT_NEGATIVES = 100
# synthetic titles: distinct shared tokens plus distinct cluster tokens
TITLE_SHARED_TOKENS = 2
TITLE_CLUSTER_TOKENS = 3


class CorpusError(ValueError):
    """Malformed or inconsistent corpus input"""

    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        location = ""
        if path is not None:
            location = f"{path}:{line_number}: " if line_number is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class EmptyDatasetError(CorpusError):
    """Filtering or subsampling left nothing to train on"""


@dataclass
class ItemCatalog:
    """Dense item id -> ordered (key, value) attribute pairs"""
    items: List[List[Tuple[str, str]]]
    raw_ids: List[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.items)

    def attributes(self, item_id: int) -> List[Tuple[str, str]]:
        return self.items[item_id]


@dataclass
class InteractionLog:
    """(user, item, timestamp) records in file order"""
    frame: pd.DataFrame
    user_raw_ids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def records(self) -> List[Tuple[int, int, int]]:
        return list(zip(self.frame['user'].tolist(), self.frame['item'].tolist(),
                        self.frame['timestamp'].tolist()))

    @classmethod
    def from_records(cls, records: Iterable[Tuple[int, int, int]],
                     user_raw_ids: Optional[List[str]] = None) -> "InteractionLog":
        records = list(records)
        frame = pd.DataFrame(records, columns=['user', 'item', 'timestamp']).astype('int64')
        return cls(frame=frame, user_raw_ids=user_raw_ids or [])


@dataclass
class SequenceDataset:
    """Per-user chronologically ordered item ids"""
    sequences: Dict[int, List[int]]
    catalog_size: int

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def users(self) -> List[int]:
        return list(self.sequences.keys())

    @property
    def num_interactions(self) -> int:
        return sum(len(s) for s in self.sequences.values())


@dataclass
class EvalInstance:
    """One evaluation case: prefix -> positive, plus frozen negatives"""
    user: int
    prefix: List[int]
    positive: int
    negatives: List[int] = field(default_factory=list)


@dataclass
class LeaveOneOutSplit:
    train: Dict[int, List[int]]
    valid: List[EvalInstance]
    test: List[EvalInstance]
    skipped_users: int = 0


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------
def _read_lines(path: str):
    if not os.path.exists(path):
        raise FileNotFoundError(f"Corpus file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip('\n').rstrip('\r')
            if line.strip():
                yield line_number, line


def read_catalog(catalog_path: str) -> ItemCatalog:
    items: List[List[Tuple[str, str]]] = []
    raw_ids: List[str] = []
    seen: Dict[str, int] = {}
    for line_number, line in _read_lines(catalog_path):
        fields = line.split('\t')
        if len(fields) < 3 or len(fields) % 2 == 0:
            raise CorpusError("expected item id followed by (key, value) pairs", catalog_path, line_number)
        raw_id = fields[0]
        if raw_id in seen:
            raise CorpusError(f"duplicate item id {raw_id!r}", catalog_path, line_number)
        pairs = [(fields[i], fields[i + 1]) for i in range(1, len(fields), 2)]
        if any(not key for key, _ in pairs):
            raise CorpusError("empty attribute key", catalog_path, line_number)
        seen[raw_id] = len(items)
        raw_ids.append(raw_id)
        items.append(pairs)
    if not items:
        raise EmptyDatasetError("catalog contains no items", catalog_path)
    return ItemCatalog(items=items, raw_ids=raw_ids)


def read_interactions(interactions_path: str, catalog: ItemCatalog) -> InteractionLog:
    item_index = {raw: i for i, raw in enumerate(catalog.raw_ids)}
    user_index: Dict[str, int] = {}
    records = []
    for line_number, line in _read_lines(interactions_path):
        fields = line.split('\t')
        if len(fields) != 3:
            raise CorpusError(f"expected 3 tab-separated fields, got {len(fields)}",
                              interactions_path, line_number)
        raw_user, raw_item, raw_ts = fields
        try:
            timestamp = int(raw_ts)
        except ValueError:
            raise CorpusError(f"timestamp {raw_ts!r} is not an integer", interactions_path, line_number)
        if raw_item not in item_index:
            raise CorpusError(f"unknown item id {raw_item!r}", interactions_path, line_number)
        user = user_index.setdefault(raw_user, len(user_index))
        records.append((user, item_index[raw_item], timestamp))
    user_raw_ids = [None] * len(user_index)
    for raw, dense in user_index.items():
        user_raw_ids[dense] = raw
    return InteractionLog.from_records(records, user_raw_ids)


def write_id_map(raw_ids: Sequence[str], path: str):
    """Two-column text file: raw id <TAB> dense id"""
    with open(path, 'w', encoding='utf-8') as f:
        for dense, raw in enumerate(raw_ids):
            f.write(f"{raw}\t{dense}\n")


def read_id_map(path: str) -> Dict[str, int]:
    mapping = {}
    for line_number, line in _read_lines(path):
        fields = line.split('\t')
        if len(fields) != 2:
            raise CorpusError("expected 2 tab-separated fields", path, line_number)
        mapping[fields[0]] = int(fields[1])
    return mapping


def ingest(interactions_path: str, catalog_path: str,
           out_dir: Optional[str] = None) -> Tuple[ItemCatalog, InteractionLog]:
    """
    Parse catalog and interactions into dense-id structures.

    When out_dir is given the id maps are persisted there as
    item_ids.tsv and user_ids.tsv.
    """
    catalog = read_catalog(catalog_path)
    log = read_interactions(interactions_path, catalog)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_id_map(catalog.raw_ids, os.path.join(out_dir, 'item_ids.tsv'))
        write_id_map(log.user_raw_ids, os.path.join(out_dir, 'user_ids.tsv'))
    logger.info("Ingested %d items and %d interactions from %d users",
                catalog.size, len(log), len(log.user_raw_ids))
    return catalog, log


def write_catalog(catalog: ItemCatalog, path: str):
    with open(path, 'w', encoding='utf-8') as f:
        for i, pairs in enumerate(catalog.items):
            raw = catalog.raw_ids[i] if catalog.raw_ids else str(i)
            fields = [raw] + [x for pair in pairs for x in pair]
            f.write('\t'.join(fields) + '\n')


def write_interactions(log: InteractionLog, path: str, catalog: ItemCatalog):
    with open(path, 'w', encoding='utf-8') as f:
        for user, item, ts in log.records:
            raw_user = log.user_raw_ids[user] if log.user_raw_ids else str(user)
            raw_item = catalog.raw_ids[item] if catalog.raw_ids else str(item)
            f.write(f"{raw_user}\t{raw_item}\t{ts}\n")


# ---------------------------------------------------------------------------
# Filtering and splitting
# ---------------------------------------------------------------------------
def filter_and_build(log: InteractionLog, min_user_interactions: int, min_item_interactions: int,
                     catalog_size: Optional[int] = None) -> SequenceDataset:
    """
    Drop sparse users/items until a fixed point, then build time-ordered sequences.

    Timestamp ties keep file order (stable sort).
    """
    if min_user_interactions < 0 or min_item_interactions < 0:
        raise ValueError("Filtering thresholds must be >= 0")

    df = log.frame.copy()
    df['order'] = np.arange(len(df))
    rounds = 0
    while True:
        before = len(df)
        if min_item_interactions > 0:
            counts = df.groupby('item')['user'].transform('size')
            df = df[counts >= min_item_interactions]
        if min_user_interactions > 0:
            counts = df.groupby('user')['item'].transform('size')
            df = df[counts >= min_user_interactions]
        rounds += 1
        if len(df) == before:
            break

    if df.empty:
        raise EmptyDatasetError(
            f"no interactions survive filtering at thresholds ({min_user_interactions}, {min_item_interactions})")

    df = df.sort_values(['user', 'timestamp', 'order'], kind='mergesort')
    sequences = {int(user): group['item'].astype(int).tolist()
                 for user, group in df.groupby('user', sort=True)}
    if catalog_size is None:
        catalog_size = int(log.frame['item'].max()) + 1
    logger.info("Filtering (%d, %d) converged after %d rounds: %d users, %d interactions",
                min_user_interactions, min_item_interactions, rounds, len(sequences), len(df))
    return SequenceDataset(sequences=sequences, catalog_size=catalog_size)


def leave_one_out(dataset: SequenceDataset) -> LeaveOneOutSplit:
    """Last item -> test, second-to-last -> validation, the rest -> training."""
    train: Dict[int, List[int]] = {}
    valid: List[EvalInstance] = []
    test: List[EvalInstance] = []
    skipped = 0
    for user, seq in dataset.sequences.items():
        if len(seq) < 3:
            skipped += 1
            continue
        train[user] = list(seq[:-2])
        valid.append(EvalInstance(user=user, prefix=list(seq[:-2]), positive=seq[-2]))
        test.append(EvalInstance(user=user, prefix=list(seq[:-1]), positive=seq[-1]))
    if skipped:
        logger.warning("leave_one_out skipped %d users with fewer than 3 interactions", skipped)
    return LeaveOneOutSplit(train=train, valid=valid, test=test, skipped_users=skipped)


def trained_items(train: Dict[int, List[int]]) -> Set[int]:
    return {item for seq in train.values() for item in seq}


def exclude_cold_eval(instances: List[EvalInstance], trained_item_set: Set[int]) -> List[EvalInstance]:
    """Keep instances whose positive and whole prefix were seen in training."""
    kept = [inst for inst in instances
            if inst.positive in trained_item_set and all(i in trained_item_set for i in inst.prefix)]
    dropped = len(instances) - len(kept)
    if dropped:
        logger.info("Excluded %d of %d evaluation instances with untrained items", dropped, len(instances))
    return kept


def sample_negatives(instance: EvalInstance, catalog_size: int, n: int, seed: int) -> EvalInstance:
    """n distinct uniform negatives excluding the positive; deterministic in (seed, user)."""
    if n > catalog_size - 1:
        raise ValueError(f"Cannot sample {n} negatives from a catalog of {catalog_size} items")
    rng = np.random.default_rng([seed, instance.user])
    idx = rng.choice(catalog_size - 1, size=n, replace=False)
    negatives = idx + (idx >= instance.positive)
    return replace(instance, negatives=[int(x) for x in negatives])


def attach_negatives(instances: List[EvalInstance], catalog_size: int, n: int, seed: int) -> List[EvalInstance]:
    """Freeze negatives for a whole instance list."""
    return [sample_negatives(inst, catalog_size, n, seed) for inst in instances]


def subsample_users(dataset: SequenceDataset, fraction: float, seed: int) -> SequenceDataset:
    """Keep floor(fraction * users) users chosen by a seeded uniform permutation."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    users = dataset.users
    n = int(math.floor(fraction * len(users)))
    if n == 0:
        raise EmptyDatasetError(f"fraction {fraction} of {len(users)} users keeps no users")
    if n == len(users):
        return SequenceDataset(sequences={u: list(s) for u, s in dataset.sequences.items()},
                               catalog_size=dataset.catalog_size)
    chosen = set(np.random.default_rng(seed).permutation(len(users))[:n].tolist())
    sequences = {u: list(dataset.sequences[u]) for i, u in enumerate(users) if i in chosen}
    return SequenceDataset(sequences=sequences, catalog_size=dataset.catalog_size)


def split_users(log: InteractionLog, fraction: float, seed: int) -> Tuple[InteractionLog, InteractionLog]:
    """
    Carve a disjoint user group out of one log.

    Returns (selected, rest); the selected group holds floor(fraction * users)
    users. Used to separate pre-training users from downstream users.
    """
    users = sorted(log.frame['user'].unique().tolist())
    n = int(math.floor(fraction * len(users)))
    chosen = set(np.asarray(users)[np.random.default_rng(seed).permutation(len(users))[:n]].tolist())
    mask = log.frame['user'].isin(chosen)
    selected = InteractionLog(frame=log.frame[mask].reset_index(drop=True), user_raw_ids=log.user_raw_ids)
    rest = InteractionLog(frame=log.frame[~mask].reset_index(drop=True), user_raw_ids=log.user_raw_ids)
    return selected, rest


def dataset_statistics(dataset: SequenceDataset) -> Dict[str, float]:
    lengths = [len(s) for s in dataset.sequences.values()]
    items = {i for s in dataset.sequences.values() for i in s}
    return {
        'users': len(lengths),
        'items': len(items),
        'interactions': int(sum(lengths)),
        'avg_len': float(np.mean(lengths)) if lengths else 0.0,
    }


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------
def generate_synthetic(k_clusters: int, items_per_cluster: int, users: int,
                       seq_len_range: Tuple[int, int], intra_cluster_prob: float,
                       vocab_per_cluster: int, seed: int,
                       shared_vocab: int = 20, item_chain_prob: float = 0.5
                       ) -> Tuple[ItemCatalog, InteractionLog]:
    """
    Clustered catalog plus users following a cluster-level Markov chain.

    Each item's title mixes shared tokens with tokens from its cluster's
    vocabulary. A user stays in the current cluster with probability
    intra_cluster_prob, otherwise jumps uniformly to another cluster.
    Within a cluster the next item is the cluster successor of the previous
    one with probability item_chain_prob, else uniform.
    """
    if not 0.0 <= intra_cluster_prob <= 1.0:
        raise ValueError(f"intra_cluster_prob must be in [0, 1], got {intra_cluster_prob}")
    if not 0.0 <= item_chain_prob <= 1.0:
        raise ValueError(f"item_chain_prob must be in [0, 1], got {item_chain_prob}")
    lo, hi = seq_len_range
    if k_clusters < 1 or items_per_cluster < 1 or users < 1 or lo < 1 or hi < lo:
        raise ValueError("Invalid synthetic corpus dimensions")
    if shared_vocab < TITLE_SHARED_TOKENS:
        raise ValueError(f"shared_vocab must be at least {TITLE_SHARED_TOKENS}, got {shared_vocab}")
    if vocab_per_cluster < TITLE_CLUSTER_TOKENS:
        raise ValueError(f"vocab_per_cluster must be at least {TITLE_CLUSTER_TOKENS}, got {vocab_per_cluster}")

    rng = np.random.default_rng(seed)
    items: List[List[Tuple[str, str]]] = []
    raw_ids: List[str] = []
    for c in range(k_clusters):
        for j in range(items_per_cluster):
            shared = rng.choice(shared_vocab, size=TITLE_SHARED_TOKENS, replace=False)
            own = rng.choice(vocab_per_cluster, size=TITLE_CLUSTER_TOKENS, replace=False)
            title = ' '.join([f"w{s}" for s in shared] + [f"c{c}t{t}" for t in own])
            brand = f"c{c}b{int(rng.integers(vocab_per_cluster))}"
            items.append([('title', title), ('brand', brand)])
            raw_ids.append(f"item{c * items_per_cluster + j:05d}")
    catalog = ItemCatalog(items=items, raw_ids=raw_ids)

    records = []
    for u in range(users):
        length = int(rng.integers(lo, hi + 1))
        cluster = int(rng.integers(k_clusters))
        local = int(rng.integers(items_per_cluster))
        t = int(rng.integers(0, 1_000_000))
        for step in range(length):
            if step > 0:
                stay = k_clusters == 1 or rng.random() < intra_cluster_prob
                if stay:
                    if rng.random() < item_chain_prob:
                        local = (local + 1) % items_per_cluster
                    else:
                        local = int(rng.integers(items_per_cluster))
                else:
                    other = int(rng.integers(k_clusters - 1))
                    cluster = other + (other >= cluster)
                    local = int(rng.integers(items_per_cluster))
            records.append((u, cluster * items_per_cluster + local, t + 60 * step))
    log = InteractionLog.from_records(records, [f"user{u:05d}" for u in range(users)])
    logger.info("Generated synthetic corpus: %d items in %d clusters, %d users, %d interactions",
                catalog.size, k_clusters, users, len(records))
    return catalog, log


def item_cluster(item_id: int, items_per_cluster: int) -> int:
    return item_id // items_per_cluster


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------
def dataset_to_checkpoint(dataset: SequenceDataset) -> Checkpoint:
    users = dataset.users
    lengths = [len(dataset.sequences[u]) for u in users]
    flat = [i for u in users for i in dataset.sequences[u]]
    return Checkpoint(
        kind='sequence_dataset',
        tensors={
            'users': np.asarray(users, dtype=np.int32),
            'lengths': np.asarray(lengths, dtype=np.int32),
            'items': np.asarray(flat, dtype=np.int32),
        },
        meta={'catalog_size': dataset.catalog_size},
    )


def dataset_from_checkpoint(ckpt: Checkpoint) -> SequenceDataset:
    if ckpt.kind != 'sequence_dataset':
        raise CorpusError(f"checkpoint kind {ckpt.kind!r} is not a sequence dataset")
    sequences = {}
    offset = 0
    items = ckpt.tensors['items'].tolist()
    for user, length in zip(ckpt.tensors['users'].tolist(), ckpt.tensors['lengths'].tolist()):
        sequences[int(user)] = items[offset:offset + length]
        offset += length
    return SequenceDataset(sequences=sequences, catalog_size=int(ckpt.meta['catalog_size']))


def save_dataset(dataset: SequenceDataset, path: str) -> str:
    return dataset_to_checkpoint(dataset).save(path)


def load_dataset(path: str) -> SequenceDataset:
    return dataset_from_checkpoint(load_checkpoint(path))


def instances_to_checkpoint(instances: List[EvalInstance], label: str) -> Checkpoint:
    """Evaluation instances with their frozen negatives (all equal length)."""
    n_neg = len(instances[0].negatives) if instances else 0
    if any(len(inst.negatives) != n_neg for inst in instances):
        raise CorpusError("instances carry different numbers of negatives")
    return Checkpoint(
        kind='eval_instances',
        tensors={
            'users': np.asarray([i.user for i in instances], dtype=np.int32),
            'positives': np.asarray([i.positive for i in instances], dtype=np.int32),
            'prefix_lengths': np.asarray([len(i.prefix) for i in instances], dtype=np.int32),
            'prefix_items': np.asarray([x for i in instances for x in i.prefix], dtype=np.int32),
            'negatives': np.asarray([i.negatives for i in instances], dtype=np.int32).reshape(len(instances), n_neg),
        },
        meta={'label': label},
    )


def instances_from_checkpoint(ckpt: Checkpoint) -> List[EvalInstance]:
    t = ckpt.tensors
    prefix_items = t['prefix_items'].tolist()
    instances = []
    offset = 0
    for k, (user, pos, length) in enumerate(zip(t['users'].tolist(), t['positives'].tolist(),
                                                t['prefix_lengths'].tolist())):
        instances.append(EvalInstance(user=int(user), prefix=prefix_items[offset:offset + length],
                                      positive=int(pos), negatives=t['negatives'][k].tolist()))
        offset += length
    return instances
