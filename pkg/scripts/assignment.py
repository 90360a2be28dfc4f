#!/usr/bin/env python3
"""
assignment.py — exact minimum-cost matching of square cost matrices

hungarian() runs the O(K³) shortest-augmenting-path method with row/column
potentials. Among several optimal permutations it returns the
lexicographically smallest: an optimal permutation uses only edges that are
tight under the final potentials, so rows are fixed in order to the lowest
tight column that still admits a perfect tight matching for the rest.

match_slots() pairs object tokens of two views by maximal total cosine
similarity (cost = −cos). The matching is a constant for the losses; no
gradient flows through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ocl_utils import AssignmentError


@dataclass
class MatchAssignment:
    sigma: np.ndarray  # int64 permutation, row i → column sigma[i]
    total_cost: float
    zero_norm: int = 0  # slots with zero norm (their cosines were taken as 0)

    @property
    def similarity(self) -> float:
        return -self.total_cost


# ============================================================
# Hungarian algorithm
# ============================================================

def _potentials(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Optimal assignment and duals (u, v) with u[i] + v[j] <= cost[i, j]."""
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    sigma = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        sigma[p[j] - 1] = j - 1
    return sigma, u[1:], v[1:]


def _has_perfect_matching(tight: np.ndarray, rows: list[int], cols: list[int]) -> bool:
    """Kuhn's augmenting paths on the tight-edge subgraph restricted to rows × cols."""
    owner: dict[int, int] = {}

    def try_row(r: int, seen: set[int]) -> bool:
        for c in cols:
            if tight[r, c] and c not in seen:
                seen.add(c)
                if c not in owner or try_row(owner[c], seen):
                    owner[c] = r
                    return True
        return False

    return all(try_row(r, set()) for r in rows)


def _lexicographic_optimum(cost: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray | None:
    n = cost.shape[0]
    scale = 1.0 + float(np.abs(cost).max())
    tight = np.abs(cost - u[:, None] - v[None, :]) <= 1e-9 * scale
    sigma = np.empty(n, dtype=np.int64)
    free_cols = list(range(n))
    for row in range(n):
        for col in free_cols:
            if not tight[row, col]:
                continue
            rest = [c for c in free_cols if c != col]
            if _has_perfect_matching(tight, list(range(row + 1, n)), rest):
                sigma[row] = col
                free_cols = rest
                break
        else:
            return None
    return sigma


def hungarian(cost: np.ndarray | torch.Tensor) -> MatchAssignment:
    """Minimum-cost permutation of a square, finite cost matrix."""
    if isinstance(cost, torch.Tensor):
        cost = cost.detach().cpu().numpy()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise AssignmentError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise AssignmentError("cost matrix contains non-finite entries")
    n = cost.shape[0]
    if n == 0:
        return MatchAssignment(np.empty(0, dtype=np.int64), 0.0)

    sigma, u, v = _potentials(cost)
    lexicographic = _lexicographic_optimum(cost, u, v)
    if lexicographic is not None:
        sigma = lexicographic
    total = float(cost[np.arange(n), sigma].sum())
    return MatchAssignment(sigma, total)


# ============================================================
# Slot correspondence
# ============================================================

def cosine_matrix(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    """Pairwise cosine similarity; rows of zero norm contribute 0 and are counted."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero_a, zero_b = na == 0, nb == 0
    sim = (a @ b.T) / (np.where(zero_a, 1.0, na)[:, None] * np.where(zero_b, 1.0, nb)[None, :])
    sim[zero_a, :] = 0.0
    sim[:, zero_b] = 0.0
    return sim, int(zero_a.sum() + zero_b.sum())


def match_slots(slots_a: np.ndarray | torch.Tensor, slots_b: np.ndarray | torch.Tensor) -> MatchAssignment:
    """σ maximising Σ_i cos(a_i, b_σ(i)) on raw object tokens (K×D each)."""
    if isinstance(slots_a, torch.Tensor):
        slots_a = slots_a.detach().cpu().double().numpy()
    if isinstance(slots_b, torch.Tensor):
        slots_b = slots_b.detach().cpu().double().numpy()
    sim, zero_norm = cosine_matrix(np.asarray(slots_a, dtype=np.float64), np.asarray(slots_b, dtype=np.float64))
    result = hungarian(-sim)
    result.zero_norm = zero_norm
    return result


def match_batch(slots_a: torch.Tensor, slots_b: torch.Tensor) -> tuple[torch.Tensor, int]:
    """B×K×D views → (B×K long tensor of σ, number of zero-norm slots seen)."""
    a = slots_a.detach().cpu().double().numpy()
    b = slots_b.detach().cpu().double().numpy()
    sigmas = []
    zero_norm = 0
    for idx in range(a.shape[0]):
        result = match_slots(a[idx], b[idx])
        sigmas.append(result.sigma)
        zero_norm += result.zero_norm
    return torch.from_numpy(np.stack(sigmas)).to(slots_a.device), zero_norm


def inverse_permutation(sigma: np.ndarray) -> np.ndarray:
    inverse = np.empty_like(sigma)
    inverse[sigma] = np.arange(len(sigma))
    return inverse
