"""Attack/defense metrics: ROC AUC, Succ_Repair and sweep aggregates."""

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats
from sklearn.metrics import roc_auc_score

from .exceptions import EmptyInputError


def roc_auc(scores_backdoored, scores_clean):
    """
    Probability that a random backdoored score exceeds a random clean score,
    ties counted one half.
    """
    scores_backdoored = np.asarray(scores_backdoored, dtype=np.float64)
    scores_clean = np.asarray(scores_clean, dtype=np.float64)
    if len(scores_backdoored) == 0 or len(scores_clean) == 0:
        raise EmptyInputError("roc_auc needs at least one score of each kind")
    labels = np.concatenate([np.ones(len(scores_backdoored)), np.zeros(len(scores_clean))])
    scores = np.concatenate([scores_backdoored, scores_clean])
    return float(roc_auc_score(y_true=labels, y_score=scores))


def succ_repair(outcomes):
    """Mean of (A_CDA - A_ASR) over game outcomes."""
    outcomes = list(outcomes)
    if not outcomes:
        raise EmptyInputError("succ_repair needs at least one outcome")
    return float(np.mean([o.cda - o.asr for o in outcomes]))


def mean_std(values):
    """Mean and sample standard deviation (ddof=1; 0.0 for a single value)."""
    values = np.asarray(list(values), dtype=np.float64)
    if len(values) == 0:
        raise EmptyInputError("cannot aggregate an empty list")
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std


def spearman(xs, ys):
    """Spearman rank correlation; 0.0 when either side is constant."""
    if np.ptp(np.asarray(xs, dtype=float)) == 0 or np.ptp(np.asarray(ys, dtype=float)) == 0:
        return 0.0
    return float(stats.spearmanr(xs, ys).statistic)


@dataclass
class MetricReport:
    """Aggregated metrics for one point of a sweep."""

    attack: str
    defense: str = "none"
    m: int = 0
    r: float = 0.0
    delta: float = 0.0
    effectiveness: float = None
    effectiveness_std: float = None
    detectability: float = None
    detectability_std: float = None
    robustness: float = None
    data_efficiency: float = None
    budget_used: float = None
    samples: int = 0

    def __post_init__(self):
        for name in ("detectability", "data_efficiency"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0 + 1e-12:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def as_dict(self):
        return asdict(self)
