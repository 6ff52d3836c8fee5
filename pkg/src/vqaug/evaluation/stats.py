"""Rank-based group comparison: Kruskal-Wallis with Dunn's pairwise follow-up."""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import stats


def _pooled(groups: Sequence[Sequence[float]]):
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    arrays = [np.asarray(g, dtype=np.float64).reshape(-1) for g in groups]
    if any(a.size == 0 for a in arrays):
        raise ValueError("every group must be non-empty")
    pooled = np.concatenate(arrays)
    ranks = stats.rankdata(pooled)
    _, ties = np.unique(pooled, return_counts=True)
    return arrays, pooled, ranks, ties.astype(np.float64)


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """Tie-corrected H and its chi-squared p-value; identical values give (0, 1)."""
    arrays, pooled, ranks, ties = _pooled(groups)
    n = pooled.size
    correction = 1.0 - np.sum(ties**3 - ties) / (n**3 - n)
    if correction <= 0:
        return 0.0, 1.0
    h, start = 0.0, 0
    for a in arrays:
        r = ranks[start:start + a.size]
        h += r.sum() ** 2 / a.size
        start += a.size
    h = (12.0 / (n * (n + 1)) * h - 3 * (n + 1)) / correction
    h = max(h, 0.0)
    return float(h), float(stats.chi2.sf(h, len(arrays) - 1))


class NotSignificant(RuntimeError):
    """Post-hoc comparison requested although the omnibus test found no difference."""


def dunn_test(
    groups: Sequence[Sequence[float]],
    adjust: str | None = None,
    alpha: float = 0.05,
    require_significant: bool = True,
) -> np.ndarray:
    """Symmetric matrix of two-sided pairwise p-values (unit diagonal)."""
    if require_significant:
        _, p = kruskal_wallis(groups)
        if p >= alpha:
            raise NotSignificant(f"Kruskal-Wallis p = {p:.4g} >= {alpha}; pairwise ranking not warranted")
    arrays, pooled, ranks, ties = _pooled(groups)
    n = pooled.size
    k = len(arrays)
    mean_rank, start = [], 0
    for a in arrays:
        mean_rank.append(ranks[start:start + a.size].mean())
        start += a.size
    var = n * (n + 1) / 12.0 - np.sum(ties**3 - ties) / (12.0 * (n - 1))
    out = np.ones((k, k))
    pairs = []
    for i in range(k):
        for j in range(i + 1, k):
            se = math.sqrt(max(var, 0.0) * (1 / arrays[i].size + 1 / arrays[j].size))
            diff = mean_rank[i] - mean_rank[j]
            p = 1.0 if se == 0 or diff == 0 else float(2 * stats.norm.sf(abs(diff) / se))
            pairs.append((i, j, p))
    m = len(pairs)
    if adjust == "bonferroni":
        pairs = [(i, j, min(1.0, p * m)) for i, j, p in pairs]
    elif adjust == "holm":
        order = sorted(range(m), key=lambda t: pairs[t][2])
        adj, running = [0.0] * m, 0.0
        for rank, t in enumerate(order):
            running = max(running, min(1.0, (m - rank) * pairs[t][2]))
            adj[t] = running
        pairs = [(i, j, adj[t]) for t, (i, j, _) in enumerate(pairs)]
    elif adjust is not None:
        raise ValueError(f"unknown adjustment {adjust!r}")
    for i, j, p in pairs:
        out[i, j] = out[j, i] = p
    return out


@dataclass
class RankingReport:
    names: list[str]
    h: float
    p: float
    pairwise: np.ndarray | None
    ranking: list[str] | None
    mean_ranks: list[float]

    @property
    def significant(self) -> bool:
        return self.ranking is not None

    def text(self) -> str:
        lines = [f"Kruskal-Wallis H = {self.h:.4f}, p = {self.p:.4g}"]
        if self.ranking is None:
            lines.append("no significant difference")
            return "\n".join(lines)
        lines.append("ranking (best first): " + " > ".join(self.ranking))
        w = max(len(n) for n in self.names)
        lines.append(" " * (w + 1) + " ".join(f"{n:>{max(w, 8)}}" for n in self.names))
        for n, row in zip(self.names, self.pairwise):
            lines.append(f"{n:<{w}} " + " ".join(f"{v:>{max(w, 8)}.4g}" for v in row))
        return "\n".join(lines)


def rank_methods(named: dict[str, Sequence[float]], alpha: float = 0.05, adjust: str | None = None) -> RankingReport:
    """Kruskal-Wallis across methods; a Dunn matrix and an ordering only when significant."""
    names = list(named)
    groups = [named[n] for n in names]
    h, p = kruskal_wallis(groups)
    _, _, ranks, _ = _pooled(groups)
    mean_ranks, start = [], 0
    for g in groups:
        mean_ranks.append(float(ranks[start:start + len(g)].mean()))
        start += len(g)
    if p >= alpha:
        return RankingReport(names, h, p, None, None, mean_ranks)
    pairwise = dunn_test(groups, adjust=adjust, require_significant=False)
    order = sorted(range(len(names)), key=lambda i: -mean_ranks[i])
    return RankingReport(names, h, p, pairwise, [names[i] for i in order], mean_ranks)
