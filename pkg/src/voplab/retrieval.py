"""Ranking of matched items and the R@K / MnR / MdR report, in both directions.

Ties between the matched item and a distractor resolve in the query's favor, and
MdR is the lower median when the query count is even.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DIRECTIONS = ("t2v", "v2t")
TIE_RULE = "match-wins-ties"
MEDIAN_RULE = "lower-median"


def _scores(S, direction: str) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ValueError(f"similarity matrix must be 2-D, got shape {S.shape}")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if not np.isfinite(S).all():
        raise ValueError("similarity matrix has non-finite entries")
    return S if direction == "t2v" else S.T


def ranks(S, direction: str = "t2v", match=None) -> np.ndarray:
    """1-based rank of each query's match; rows of ``S`` are texts.

    ``match[i]`` names the matched candidate of query ``i``; without it ``S`` must be
    square and the diagonal holds the pairs.
    """
    Q = _scores(S, direction)
    n_q, n_c = Q.shape
    if match is None:
        if n_q != n_c:
            raise ValueError(f"non-square matrix {Q.shape} needs an explicit match map")
        match = np.arange(n_q)
    match = np.asarray(match, dtype=np.int64)
    if match.shape != (n_q,) or (match < 0).any() or (match >= n_c).any():
        raise ValueError("match map must give one in-range candidate per query")
    target = Q[np.arange(n_q), match][:, None]
    return 1 + (Q > target).sum(axis=1)


@dataclass
class RetrievalReport:
    direction: str
    recall_at: dict[int, float] = field(default_factory=dict)
    mean_rank: float = 0.0
    median_rank: float = 0.0
    n_queries: int = 0

    def as_row(self) -> dict[str, float]:
        row = {f"{self.direction}_R@{k}": v for k, v in self.recall_at.items()}
        row[f"{self.direction}_MnR"] = self.mean_rank
        row[f"{self.direction}_MdR"] = self.median_rank
        return row


def metrics(rank_values, Ks=(1, 5, 10), direction: str = "t2v") -> RetrievalReport:
    r = np.asarray(rank_values, dtype=np.int64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("ranks must be a non-empty 1-D sequence")
    srt = np.sort(r)
    return RetrievalReport(
        direction=direction,
        recall_at={int(k): 100.0 * float(np.count_nonzero(r <= k)) / r.size for k in Ks},
        mean_rank=float(r.mean()),
        median_rank=float(srt[(r.size - 1) // 2]),
        n_queries=int(r.size),
    )


def evaluate(S, Ks=(1, 5, 10)) -> dict[str, RetrievalReport]:
    return {d: metrics(ranks(S, d), Ks, d) for d in DIRECTIONS}
