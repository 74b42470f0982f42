"""
Seqinit Evaluation
Ranking metrics and the sampled / full-ranking protocols

A scorer is anything with score(prefixes, candidates) returning one score
per candidate; candidates=None asks for scores over the whole catalog.
"""

import json
import math
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from rec_corpus import EvalInstance

logger = logging.getLogger(__name__)

PESSIMISTIC = 'pessimistic'
OPTIMISTIC = 'optimistic'
SAMPLED = 'sampled'
FULL = 'full'


class Scorer(Protocol):
    def score(self, prefixes: Sequence[Sequence[int]], candidates: Optional[np.ndarray]) -> np.ndarray:
        ...


@dataclass
class EvalProtocol:
    kind: str = SAMPLED
    n_negatives: int = 100
    ks: Tuple[int, ...] = ()
    tie_rule: str = PESSIMISTIC
    exclude_history: bool = False
    batch_size: int = 256

    def __post_init__(self):
        if not self.ks:
            self.ks = (5, 10) if self.kind == SAMPLED else (5, 10, 50)
        self.ks = tuple(sorted(int(k) for k in self.ks))

    def validate(self, candidate_count: Optional[int] = None):
        if self.kind not in (SAMPLED, FULL):
            raise ValueError(f"Unknown protocol kind {self.kind!r}")
        if self.tie_rule not in (PESSIMISTIC, OPTIMISTIC):
            raise ValueError(f"Unknown tie rule {self.tie_rule!r}")
        if any(k < 1 for k in self.ks):
            raise ValueError(f"k values must be positive, got {self.ks}")
        if candidate_count is not None and max(self.ks) > candidate_count:
            raise ValueError(f"k={max(self.ks)} exceeds the {candidate_count} candidates")

    def describe(self) -> str:
        if self.kind == SAMPLED:
            return f"sampled(n={self.n_negatives},ties={self.tie_rule})"
        return f"full(exclude_history={self.exclude_history},ties={self.tie_rule})"


@dataclass
class MetricsReport:
    hr: Dict[int, float]
    ndcg: Dict[int, float]
    count: int
    protocol: str
    checkpoint_hash: str = ""
    label: str = ""

    def to_record(self) -> str:
        """One-line JSON record"""
        return json.dumps({
            'label': self.label,
            'protocol': self.protocol,
            'checkpoint': self.checkpoint_hash,
            'count': self.count,
            'hr': {str(k): v for k, v in self.hr.items()},
            'ndcg': {str(k): v for k, v in self.ndcg.items()},
        }, sort_keys=True)

    @classmethod
    def from_record(cls, line: str) -> "MetricsReport":
        rec = json.loads(line)
        return cls(hr={int(k): v for k, v in rec['hr'].items()},
                   ndcg={int(k): v for k, v in rec['ndcg'].items()},
                   count=rec['count'], protocol=rec['protocol'],
                   checkpoint_hash=rec.get('checkpoint', ''), label=rec.get('label', ''))

    def to_frame(self) -> pd.DataFrame:
        """One row per (metric, k)"""
        rows = [{'metric': 'HR', 'k': k, 'value': v} for k, v in sorted(self.hr.items())]
        rows += [{'metric': 'NDCG', 'k': k, 'value': v} for k, v in sorted(self.ndcg.items())]
        return pd.DataFrame(rows, columns=['metric', 'k', 'value'])

    def columns(self) -> Dict[str, float]:
        values = {f"HR@{k}": v for k, v in sorted(self.hr.items())}
        values.update({f"NDCG@{k}": v for k, v in sorted(self.ndcg.items())})
        return values

    def format_table(self) -> str:
        """Human-readable line with percentages"""
        cells = [f"{name}={100 * v:.2f}" for name, v in self.columns().items()]
        return f"{self.label or 'metrics'} [{self.protocol}, n={self.count}]: " + "  ".join(cells)


def rank_of_positive(scores: np.ndarray, positive_index: int, tie_rule: str = PESSIMISTIC) -> int:
    """1-based rank of scores[positive_index] among all scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise ValueError("Scores contain NaN")
    s = scores[positive_index]
    higher = int((scores > s).sum())
    if tie_rule == OPTIMISTIC:
        return 1 + higher
    if tie_rule != PESSIMISTIC:
        raise ValueError(f"Unknown tie rule {tie_rule!r}")
    ties = int((scores == s).sum()) - 1
    return 1 + higher + ties


def ranks_from_scores(scores: np.ndarray, positive_indices: np.ndarray, tie_rule: str = PESSIMISTIC) -> np.ndarray:
    """Row-wise rank_of_positive for a (B, K) score matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise ValueError("Scores contain NaN")
    rows = np.arange(scores.shape[0])
    pos = scores[rows, positive_indices][:, None]
    higher = (scores > pos).sum(axis=1)
    if tie_rule == OPTIMISTIC:
        return 1 + higher
    if tie_rule != PESSIMISTIC:
        raise ValueError(f"Unknown tie rule {tie_rule!r}")
    return 1 + higher + (scores == pos).sum(axis=1) - 1


def _check_ranks(ranks) -> np.ndarray:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("No ranks to aggregate")
    if ranks.min() < 1:
        raise ValueError("Ranks are 1-based")
    return ranks


def hr_at_k(ranks, k: int) -> float:
    ranks = _check_ranks(ranks)
    return float((ranks <= k).sum()) / ranks.size


def ndcg_at_k(ranks, k: int) -> float:
    ranks = _check_ranks(ranks)
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return math.fsum(gains.tolist()) / ranks.size


def evaluate(scorer: Scorer, instances: List[EvalInstance], protocol: EvalProtocol,
             catalog_size: Optional[int] = None, checkpoint_hash: str = "", label: str = "") -> MetricsReport:
    """
    Rank each instance's positive and aggregate HR@k / NDCG@k.

    Sampled: candidates are [positive] + frozen negatives.
    Full: candidates are the whole catalog (catalog_size required).
    """
    if not instances:
        raise ValueError("Cannot evaluate an empty instance set")
    if protocol.kind == FULL and catalog_size is None:
        raise ValueError("Full-ranking evaluation needs catalog_size")
    candidate_count = catalog_size if protocol.kind == FULL else 1 + len(instances[0].negatives)
    protocol.validate(candidate_count)

    ranks = []
    for start in range(0, len(instances), protocol.batch_size):
        batch = instances[start:start + protocol.batch_size]
        prefixes = [inst.prefix for inst in batch]
        if protocol.kind == SAMPLED:
            if any(len(inst.negatives) != candidate_count - 1 for inst in batch):
                raise ValueError("Sampled evaluation needs the same number of frozen negatives per instance")
            candidates = np.array([[inst.positive] + list(inst.negatives) for inst in batch], dtype=np.int64)
            scores = np.asarray(scorer.score(prefixes, candidates), dtype=np.float64)
            positive_idx = np.zeros(len(batch), dtype=np.int64)
        else:
            scores = np.array(scorer.score(prefixes, None), dtype=np.float64)
            positive_idx = np.array([inst.positive for inst in batch], dtype=np.int64)
            if protocol.exclude_history:
                for row, inst in enumerate(batch):
                    seen = [i for i in set(inst.prefix) if i != inst.positive]
                    scores[row, seen] = -np.inf
        ranks.append(ranks_from_scores(scores, positive_idx, protocol.tie_rule))
    ranks = np.concatenate(ranks)

    report = MetricsReport(
        hr={k: hr_at_k(ranks, k) for k in protocol.ks},
        ndcg={k: ndcg_at_k(ranks, k) for k in protocol.ks},
        count=int(ranks.size),
        protocol=protocol.describe(),
        checkpoint_hash=checkpoint_hash,
        label=label,
    )
    logger.debug("Evaluated %d instances: %s", report.count, report.format_table())
    return report


def reports_frame(reports: List[MetricsReport]) -> pd.DataFrame:
    """Long table (label, metric, k, value) for several reports."""
    frames = []
    for r in reports:
        frame = r.to_frame()
        frame.insert(0, 'label', r.label)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=['label', 'metric', 'k', 'value'])
