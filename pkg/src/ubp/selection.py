"""Block importance scoring and unaligned 1xN block selection.

Candidate blocks are addressed by a flat start index ``k = i + c_out * j``
(output channel ``i``, input channel ``j``). A block covers output channels
``i .. i+N-1`` of input column ``j``; starts whose block would run past the
last output channel carry a score of ``-inf`` and are never selected. With
that sentinel in place, flat indices of selected blocks must differ by at
least ``N``, and no block straddles two input columns.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .tensor_io import WeightTensor

NEG_INF = float("-inf")

METHODS = ("greedy", "bed", "optimal", "abp", "ep")
BLOCK_METHODS = ("greedy", "bed", "optimal", "abp")


class SelectionError(ValueError):
    pass


class InfeasibleSelectionError(SelectionError):
    """Fewer than ``m`` mutually non-overlapping eligible blocks could be selected."""


class SelectionTimeout(SelectionError):
    """The optimal selector ran past its deadline or would exceed its memory budget."""


class EfficacyUndefined(ArithmeticError):
    """EP and ABP keep the same importance, so the efficacy ratio has no meaning."""


@dataclass(frozen=True, eq=False)
class ScoreArray:
    scores: np.ndarray
    n: int
    c_out: int
    c_in: int

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        if scores.size != self.c_out * self.c_in:
            raise SelectionError(f"expected {self.c_out * self.c_in} scores, got {scores.size}")
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)

    @property
    def b(self) -> int:
        return self.scores.size

    def eligible(self) -> np.ndarray:
        return np.isfinite(self.scores)

    def with_scores(self, scores) -> ScoreArray:
        return ScoreArray(scores, self.n, self.c_out, self.c_in)


@dataclass(frozen=True)
class BlockSelection:
    """Sorted flat block starts; validated against the layer geometry on construction."""

    starts: tuple
    n: int
    c_out: int
    c_in: int
    m: int = field(default=-1)

    def __post_init__(self):
        starts = tuple(sorted(int(k) for k in self.starts))
        object.__setattr__(self, "starts", starts)
        if self.m < 0:
            object.__setattr__(self, "m", len(starts))
        problems = self.violations()
        if problems:
            raise SelectionError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        n, c_out, b = self.n, self.c_out, self.c_out * self.c_in
        if n < 1 or n > c_out:
            out.append(f"block size {n} outside [1, {c_out}]")
        if len(self.starts) != self.m:
            out.append(f"{len(self.starts)} starts but m={self.m}")
        for k in self.starts:
            if not 0 <= k < b:
                out.append(f"start {k} out of range [0, {b})")
            elif k % c_out + n - 1 >= c_out:
                out.append(f"start {k} crosses the output-channel boundary")
        for a, c in zip(self.starts, self.starts[1:]):
            if c - a < n:
                out.append(f"starts {a} and {c} overlap")
        return out

    def rows_cols(self) -> tuple[np.ndarray, np.ndarray]:
        k = np.asarray(self.starts, dtype=np.int64)
        return k % self.c_out, k // self.c_out

    def kernel_mask(self) -> np.ndarray:
        """Boolean (c_out, c_in) mask of the kept kernels."""
        mask = np.zeros((self.c_out, self.c_in), dtype=bool)
        rows, cols = self.rows_cols()
        for s in range(self.n):
            mask[rows + s, cols] = True
        return mask

    def element_mask(self, w: WeightTensor) -> np.ndarray:
        return np.broadcast_to(self.kernel_mask()[:, :, None, None], w.shape)


@dataclass(frozen=True, eq=False)
class ElementMask:
    mask: np.ndarray

    @property
    def kept(self) -> int:
        return int(self.mask.sum())

    def element_mask(self, w: WeightTensor) -> np.ndarray:
        return self.mask.reshape(w.shape)


@dataclass(frozen=True)
class PruningConfig:
    n: int
    sparsity: float
    method: str = "bed"
    score_fn: str = "l1"

    def __post_init__(self):
        if self.n < 1:
            raise SelectionError(f"block size must be >= 1, got {self.n}")
        if not 0 <= self.sparsity < 1:
            raise SelectionError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if self.method not in METHODS:
            raise SelectionError(f"unknown method {self.method!r}")
        if self.score_fn not in SCORE_FNS:
            raise SelectionError(f"unknown score function {self.score_fn!r}")


def _l1_kernels(w: WeightTensor) -> np.ndarray:
    return np.abs(w.array().astype(np.float64)).sum(axis=(2, 3))


SCORE_FNS = {"l1": _l1_kernels}


def score_blocks(w: WeightTensor, n: int, score_fn: str = "l1") -> ScoreArray:
    """Importance of every candidate 1xN block of ``w``."""
    if n < 1 or n > w.c_out:
        raise SelectionError(f"block size {n} must lie in [1, c_out={w.c_out}]")
    if score_fn not in SCORE_FNS:
        raise SelectionError(f"unknown score function {score_fn!r}; known: {sorted(SCORE_FNS)}")
    per_kernel = SCORE_FNS[score_fn](w)
    valid = w.c_out - n + 1
    scores = np.full((w.c_out, w.c_in), NEG_INF)
    acc = per_kernel[0:valid].copy()
    for s in range(1, n):
        acc += per_kernel[s:s + valid]
    scores[:valid] = acc
    # flat k = i + c_out * j is column-major order
    return ScoreArray(scores.T.reshape(-1), n, w.c_out, w.c_in)


def blocks_for_sparsity(b: int, n: int, sparsity: float) -> int:
    """``floor(b * (1 - p) / N)`` evaluated exactly on the decimal value of ``p``."""
    keep = 1 - Fraction(str(sparsity))
    return math.floor(b * keep / n)


def elements_for_sparsity(e: int, sparsity: float) -> int:
    return math.floor(e * (1 - Fraction(str(sparsity))))


def max_blocks(s: ScoreArray, limit: int | None = None) -> int:
    """Largest number of mutually non-overlapping eligible blocks (leftmost-first scan).

    With ``limit`` the scan stops as soon as that many blocks are found.
    """
    count, nxt, n = 0, 0, s.n
    for k in np.flatnonzero(s.eligible()).tolist():
        if k >= nxt:
            count += 1
            if count == limit:
                break
            nxt = k + n
    return count


def _check_feasible(s: ScoreArray, m: int) -> None:
    if m < 0:
        raise SelectionError(f"block count must be >= 0, got {m}")
    avail = max_blocks(s, limit=m)
    if m > avail:
        raise InfeasibleSelectionError(f"m={m} exceeds the {avail} non-overlapping eligible blocks")


def _selection(s: ScoreArray, starts) -> BlockSelection:
    return BlockSelection(tuple(starts), s.n, s.c_out, s.c_in)


def _leading_order(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of at least the ``count`` best scores, by (score desc, index asc).

    Everything tied with the ``count``-th best is included, so the prefix of
    the full stable order is reproduced exactly.
    """
    b = scores.size
    if count >= b:
        return np.argsort(-scores, kind="stable")
    cut = np.partition(scores, b - count)[b - count]
    idx = np.flatnonzero(scores >= cut)
    return idx[np.argsort(-scores[idx], kind="stable")]


def select_greedy(s: ScoreArray, m: int) -> BlockSelection:
    """Repeatedly take the best remaining block and invalidate its overlapping neighbours."""
    _check_feasible(s, m)
    n = s.n
    alive = s.eligible().copy()
    chosen = []
    # a stable sort on -score visits blocks in (score desc, index asc) order,
    # which is the order repeated argmax would pick them in; each pick retires
    # at most 2N - 1 candidates, so only that many leading entries are ever read
    for k in _leading_order(s.scores, (2 * n - 1) * m + 1).tolist():
        if len(chosen) == m:
            break
        if alive[k]:
            chosen.append(k)
            alive[max(0, k - n + 1):k + n] = False
    if len(chosen) < m:
        raise InfeasibleSelectionError(f"greedy ran out of candidates after {len(chosen)} of {m} blocks")
    return _selection(s, chosen)


def block_expansion(s: ScoreArray, m: int) -> list[int]:
    """First BED phase: pick ``m`` blocks, letting neighbours of a pick merge into it.

    Works on the list of surviving candidates in index order. Picking the
    candidate at list position ``k`` rescores the ``N - 1`` windows before it as
    ``S[k-o] + S[k-o+N] - S[k]`` (as if the picked kernels were gone), then
    removes positions ``k .. k+N-1``. A rescored window whose partner is
    missing or ``-inf`` becomes ``-inf``. Ties go to the lowest index.

    The list is a doubly linked list stored sparsely (only relinked entries
    are recorded); the maximum comes from the initial descending order merged
    with a heap of rescored entries. A pick retires at most ``2N - 1``
    candidates of the initial order besides itself, so ``O(N * m)`` leading
    entries suffice and the cost is independent of ``b`` beyond one partition.
    """
    n, b = s.n, s.b
    base = s.scores
    cur: dict[int, float] = {}  # rescored values
    nxt: dict[int, int] = {}  # relinked successors (default k + 1; b means none)
    prv: dict[int, int] = {}  # relinked predecessors (default k - 1; -1 means none)
    dead: set[int] = set()
    touched: dict[int, int] = {}  # rescore version; initial-order entries are valid only at 0
    heap: list[tuple[float, int, int]] = []
    order = _leading_order(base, 2 * n * m + 1).tolist()
    pos = 0
    picked = []

    def score(k):
        return cur[k] if k in cur else float(base[k])

    for it in range(m):
        while pos < len(order) and (order[pos] in dead or order[pos] in touched):
            pos += 1
        while heap and (heap[0][1] in dead or touched[heap[0][1]] != heap[0][2]):
            heapq.heappop(heap)
        cand = None
        if pos < len(order):
            cand = (-float(base[order[pos]]), order[pos])
        if heap and (cand is None or heap[0][:2] < cand):
            cand = heap[0][:2]
        if cand is None or cand[0] == -NEG_INF:
            raise InfeasibleSelectionError(f"expansion ran out of candidates after {it} of {m} blocks")
        k = cand[1]
        best = score(k)
        # successors of k at distance 1..n-1 (None past the end)
        succ = []
        q = nxt.get(k, k + 1)
        for _ in range(n - 1):
            succ.append(q if q < b else None)
            q = nxt.get(q, q + 1) if q < b else b
        p = prv.get(k, k - 1)
        for off in range(1, n):
            if p < 0:
                break
            q = succ[n - off - 1]
            sp = score(p)
            if q is not None and sp != NEG_INF and score(q) != NEG_INF:
                cur[p] = sp + score(q) - best
            else:
                cur[p] = NEG_INF
            touched[p] = touched.get(p, 0) + 1
            if cur[p] != NEG_INF:
                heapq.heappush(heap, (-cur[p], p, touched[p]))
            p = prv.get(p, p - 1)
        picked.append(k)
        # unlink k and its next n-1 successors
        gone = [k] + [q for q in succ if q is not None]
        dead.update(gone)
        left, right = prv.get(k, k - 1), nxt.get(gone[-1], gone[-1] + 1)
        if left >= 0:
            nxt[left] = right
        if right < b:
            prv[right] = left
    return picked


def block_division(expanded, n: int) -> list[int]:
    """Second BED phase: split merged regions back into N-sized blocks."""
    out = []
    next_idx = 0
    for k in sorted(expanded):
        if next_idx > k:
            out.append(next_idx)
            next_idx += n
        else:
            out.append(k)
            next_idx = k + n
    return out


def select_bed(s: ScoreArray, m: int) -> BlockSelection:
    _check_feasible(s, m)
    return _selection(s, block_division(block_expansion(s, m), s.n))


def _deadline_hit(deadline) -> bool:
    return deadline is not None and time.perf_counter() >= deadline


def _dp_level(prev: np.ndarray, scores: np.ndarray, base_idx: np.ndarray):
    """One block-count level of the recurrence.

    ``prev[p]`` is the best score with one block fewer among the first ``p``
    candidates. Returns ``(best, take)`` for this level: ``best[p]`` is a
    running maximum over ``cand[k] = prev[max(k-N+1, 0)] + S[k]`` and
    ``take[k]`` marks a strict improvement at ``k``, so ties keep the
    earlier candidate.
    """
    cand = prev[base_idx] + scores
    best = np.empty(scores.size + 1)
    best[0] = NEG_INF
    np.maximum.accumulate(cand, out=best[1:])
    take = cand > best[:-1]
    return best, take


def select_optimal(s: ScoreArray, m: int, deadline: float | None = None,
                   max_table_bytes: int = 1 << 30) -> BlockSelection:
    """Exact maximum-score selection by dynamic programming.

    ``best[c, p]`` is the best score using ``c`` blocks among the first ``p``
    candidates: taking candidate ``k`` extends ``best[c-1, k-N+1]``, skipping
    it keeps ``best[c, k]``. Levels are built one block count at a time
    (a vectorised running maximum over ``k``); only the previous level is
    kept, while the take/skip decisions form an ``(m+1) x b`` bit table that
    is walked backwards to recover the starts. Taking requires a strictly
    better score, so ties resolve toward lower indices.

    ``deadline`` is an absolute :func:`time.perf_counter` value.
    """
    _check_feasible(s, m)
    b, n = s.b, s.n
    if b * (m + 1) > max_table_bytes:
        raise SelectionTimeout(f"decision table of {b}x{m + 1} exceeds {max_table_bytes} bytes")
    if _deadline_hit(deadline):
        raise SelectionTimeout("deadline reached before start")
    scores = s.scores
    base_idx = np.maximum(np.arange(b) - n + 1, 0)
    level = np.zeros(b + 1)
    take = np.zeros((m + 1, b), dtype=bool)
    for c in range(1, m + 1):
        if _deadline_hit(deadline):
            raise SelectionTimeout(f"deadline reached at block count {c} of {m}")
        level, take[c] = _dp_level(level, scores, base_idx)
    if level[b] == NEG_INF:
        raise InfeasibleSelectionError(f"no feasible set of {m} blocks")
    starts = []
    p, c = b, m
    while c > 0:
        k = p - 1
        if take[c, k]:
            starts.append(k)
            p = max(k - n + 1, 0)
            c -= 1
        else:
            p = k
    return _selection(s, starts)


def select_optimal_indexset(s: ScoreArray, m: int, deadline: float | None = None) -> BlockSelection:
    """The same recurrence carrying the chosen index set alongside every score.

    Each level stores, for every prefix, the full set of starts behind its
    best score and rebuilds those sets from the previous level, so level
    ``c`` copies ``b * c`` indices and the cost is ``O(b * m^2)``. It returns
    exactly what :func:`select_optimal` returns and exists to measure the cost
    of the set-carrying formulation.
    """
    _check_feasible(s, m)
    b, n = s.b, s.n
    if _deadline_hit(deadline):
        raise SelectionTimeout("deadline reached before start")
    scores = s.scores
    base_idx = np.maximum(np.arange(b) - n + 1, 0)
    positions = np.arange(b)
    level = np.zeros(b + 1)
    sets = np.zeros((b + 1, 0), dtype=np.int64)
    for c in range(1, m + 1):
        if _deadline_hit(deadline):
            raise SelectionTimeout(f"deadline reached at block count {c} of {m}")
        level, take = _dp_level(level, scores, base_idx)
        # the best set for prefix p ends at the last strict improvement before p
        last = np.empty(b + 1, dtype=np.int64)
        last[0] = 0
        np.maximum.accumulate(np.where(take, positions, 0), out=last[1:])
        grown = np.empty((b + 1, c), dtype=np.int64)
        grown[:, :c - 1] = sets[base_idx[last]]
        grown[:, c - 1] = last
        sets = grown
    if level[b] == NEG_INF:
        raise InfeasibleSelectionError(f"no feasible set of {m} blocks")
    return _selection(s, sets[b].tolist())


def aligned_scores(s: ScoreArray) -> ScoreArray:
    """Copy of ``s`` with every start that is not a multiple of N set to ``-inf``."""
    rows = np.arange(s.b) % s.c_out
    return s.with_scores(np.where(rows % s.n == 0, s.scores, NEG_INF))


def select_abp(s: ScoreArray, m: int) -> BlockSelection:
    masked = aligned_scores(s)
    _check_feasible(masked, m)
    order = np.argsort(-masked.scores, kind="stable")[:m]
    return _selection(s, order.tolist())


def select_ep(w: WeightTensor, sparsity: float) -> ElementMask:
    """Keep the ``floor(E * (1 - p))`` largest-magnitude elements."""
    keep = elements_for_sparsity(w.data.size, sparsity)
    order = np.argsort(-np.abs(w.data), kind="stable")[:keep]
    mask = np.zeros(w.data.size, dtype=bool)
    mask[order] = True
    return ElementMask(mask.reshape(w.shape))


SELECTORS = {
    "greedy": select_greedy,
    "bed": select_bed,
    "optimal": select_optimal,
    "abp": select_abp,
}


def kept_score(w: WeightTensor, sel: BlockSelection | ElementMask) -> float:
    """Correctly rounded l1 mass of the kept weights (independent of summation order)."""
    if isinstance(sel, BlockSelection) and (sel.c_out, sel.c_in) != (w.c_out, w.c_in):
        raise SelectionError("selection does not match the weight tensor")
    kept = np.abs(w.array())[sel.element_mask(w)]
    return math.fsum(kept.astype(np.float64))


def select(w: WeightTensor, cfg: PruningConfig, **kwargs) -> BlockSelection | ElementMask:
    """Run ``cfg.method`` on ``w`` at ``cfg.sparsity``."""
    if cfg.method == "ep":
        return select_ep(w, cfg.sparsity)
    s = score_blocks(w, cfg.n, cfg.score_fn)
    m = blocks_for_sparsity(s.b, cfg.n, cfg.sparsity)
    return SELECTORS[cfg.method](s, m, **kwargs)


def reference_scores(w: WeightTensor, n: int, sparsity: float) -> tuple[float, float]:
    """Kept l1 under ABP and under EP, the two ends of the efficacy scale."""
    s = score_blocks(w, n)
    abp = kept_score(w, select_abp(s, blocks_for_sparsity(s.b, n, sparsity)))
    ep = kept_score(w, select_ep(w, sparsity))
    return abp, ep


def efficacy_from(method_score: float, abp_score: float, ep_score: float, tol: float = 1e-12) -> float:
    den = ep_score - abp_score
    if abs(den) <= tol:
        raise EfficacyUndefined(f"|EP - ABP| = {abs(den):.3g} is within {tol:g}")
    return (method_score - abp_score) / den


def efficacy(w: WeightTensor, cfg: PruningConfig, method_score: float) -> float:
    """0 at the aligned-block baseline, 1 at the element-wise bound."""
    abp, ep = reference_scores(w, cfg.n, cfg.sparsity)
    return efficacy_from(method_score, abp, ep)
