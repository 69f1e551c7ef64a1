"""Joint training objective: generation quality plus expected latency.

The latency part has two terms.  The segment-count term pulls the expected
number of segments (sum of close probabilities) toward lam * target_len
and pushes the close decisions toward a uniform spread via max-pooling.
The lagging term is the mean mass of the availability matrix: the expected
number of source tokens read per generated token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class LossConfig:
    lam: float = 0.3
    label_smoothing: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")


@dataclass
class LossReport:
    ce: float
    cw_term: float
    al_term: float
    total: float

    @classmethod
    def combine(cls, ce: float, cw_term: float, al_term: float) -> "LossReport":
        return cls(ce=ce, cw_term=cw_term, al_term=al_term, total=ce + cw_term + al_term)


def total_loss(ce: float, cw_term: float, al_term: float) -> LossReport:
    """Bundle the three loss terms; total is exactly their sum."""
    return LossReport.combine(float(ce), float(cw_term), float(al_term))


def cross_entropy(dists: Tensor, refs, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed negative log-likelihood.

    `dists` rows are probability distributions over the target vocabulary;
    the smoothed reference mixes (1 - smoothing) on the true token with
    smoothing spread uniformly over all classes.  With smoothing 0 only
    the picked entries are touched, so exact one-hot predictions score 0.
    """
    i_total, vocab = dists.shape
    idx = np.asarray(refs, dtype=np.int64)
    if idx.shape != (i_total,):
        raise ValueError(f"cross_entropy: {i_total} rows but {idx.shape} references")
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise ValueError(f"cross_entropy: reference token out of vocabulary of size {vocab}")
    picked = dists[np.arange(i_total), idx]
    nll = -(picked.log().mean())
    if smoothing == 0.0:
        return nll
    uniform = -(dists.log().mean())
    return (1.0 - smoothing) * nll + smoothing * uniform


def cw_constraint(alpha: Tensor, target_len: int, source_len: int, lam: float) -> Tensor:
    """Segment-count constraint on the close probabilities.

    |sum(alpha) - lam*I| + |sum(maxpool(alpha, floor(J / (lam*I)))) - lam*I|,
    with non-overlapping windows and the final partial window kept.  A
    kernel below 1 is clamped to 1; at lam = 0 the kernel spans the whole
    source (single window, target count 0).
    """
    if alpha.shape[0] != source_len:
        raise ValueError(
            f"cw_constraint: alpha has {alpha.shape[0]} entries, source_len is {source_len}")
    target = lam * target_len
    if target <= 0.0:
        kernel = source_len
    else:
        kernel = max(int(source_len / target), 1)
    count_term = (alpha.sum() - target).abs()
    pool_term = (alpha.maxpool(kernel).sum() - target).abs()
    return count_term + pool_term


def al_constraint(m: Tensor) -> Tensor:
    """Expected lagging: mean availability mass per target token."""
    i_total = m.shape[0]
    return m.sum() * (1.0 / i_total)
