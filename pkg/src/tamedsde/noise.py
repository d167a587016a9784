"""Exact per-step randomness: jumps, Wiener increments and Wiener areas.

Every path owns counter-based random streams derived from
``(master_seed, path_id, purpose_tag)``, so the complete noise realisation
of a path is reproducible independently of scheduling or worker count.

A :class:`StepNoise` carries the randomness one scheme step consumes: the
ordered jump events inside the step, a Gaussian increment per sub-interval
of the jump-induced partition, and the local time-integral ("area")
``int (w_s - w_start) ds`` of each sub-interval drawn from its exact
conditional law given the increment (mean ``len * dw / 2``, variance
``len^3 / 12`` per component).

Coarsening is exact coupling, not resampling: merged increments are sums of
fine increments and merged areas follow the recombination

    area([a, c] + [c, b]) = area([a, c]) + (b - c) * dw([a, c]) + area([c, b])

with a fixed left-to-right fold so results are bitwise reproducible.  Each
step keeps the finest-level pieces it was built from, which makes repeated
coarsening independent of the grouping of the calls.  The folds are
realised with ``np.add.accumulate`` (strictly left-associated), giving the
same bits as an explicit loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .model import MarkMeasure

__all__ = [
    "TAG_JUMPS",
    "TAG_WIENER",
    "TAG_XI",
    "RngStream",
    "derive_stream",
    "JumpEvent",
    "StepNoise",
    "sample_poisson_jumps",
    "sample_step_noise",
    "coarsen",
    "PathNoise",
    "sample_path_noise",
]

TAG_JUMPS = 1
TAG_WIENER = 2
TAG_XI = 3

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Address of a deterministic random stream.

    The output sequence is a pure function of ``(master_seed, path_id,
    purpose_tag)`` plus the position in the stream; distinct addresses give
    independent streams (distinct keys of a counter-based generator).
    """

    master_seed: int
    path_id: int
    purpose_tag: int

    def __post_init__(self):
        if not 0 <= self.purpose_tag < 256:
            raise ValueError(f"purpose_tag must fit a byte, got {self.purpose_tag}")
        if not 0 <= self.path_id < (1 << 56):
            raise ValueError(f"path_id must fit 56 bits, got {self.path_id}")

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of the stream."""
        key = [self.master_seed & _MASK64, ((self.path_id << 8) | self.purpose_tag) & _MASK64]
        return np.random.Generator(np.random.Philox(counter=0, key=key))


def derive_stream(master_seed: int, path_id: int, purpose_tag: int) -> RngStream:
    return RngStream(master_seed, path_id, purpose_tag)


@dataclass(frozen=True)
class JumpEvent:
    time: float
    mark: Any


# ---------------------------------------------------------------------------
# canonical folds (the bitwise contract of coarsening lives here)
# ---------------------------------------------------------------------------

def _fold_run(lengths, dws, areas):
    """Merge a run of consecutive pieces into one piece, left-to-right.

    The binary rule is ``area <- (area + len_i * dw_acc) + area_i`` followed
    by ``dw_acc <- dw_acc + dw_i``; realised through sequential accumulation
    so the bits match the explicit fold.
    """
    if len(lengths) == 1:
        return dws[0], areas[0]
    w = np.add.accumulate(dws, axis=0)
    terms = np.empty((2 * len(lengths) - 1,) + dws.shape[1:])
    terms[0::2] = areas
    terms[1::2] = lengths[1:, None] * w[:-1]
    return w[-1], np.add.accumulate(terms, axis=0)[-1]


def _segments(lengths, dws, areas, cut_after):
    """Merge pieces into the runs separated by jump boundaries."""
    ends = np.nonzero(cut_after)[0].tolist()
    if not ends or ends[-1] != len(lengths) - 1:
        ends = ends + [len(lengths) - 1]
    seg_len = np.empty(len(ends))
    seg_dw = np.empty((len(ends),) + dws.shape[1:])
    seg_area = np.empty_like(seg_dw)
    start = 0
    for s, end in enumerate(ends):
        seg_len[s] = np.add.reduce(lengths[start:end + 1])
        seg_dw[s], seg_area[s] = _fold_run(
            lengths[start:end + 1], dws[start:end + 1], areas[start:end + 1]
        )
        start = end + 1
    return seg_len, seg_dw, seg_area


def _summary(seg_len, seg_dw, seg_area):
    """Totals over the whole step plus Wiener prefixes at the jump times.

    Returns ``(dw, area, w_pre)`` with ``w_pre[i]`` the Wiener increment
    from the step start to the i-th jump.  Fold order identical to
    :func:`_fold_run` applied to the segments.
    """
    if len(seg_len) == 1:
        return seg_dw[0], seg_area[0], seg_dw[:0]
    w = np.add.accumulate(seg_dw, axis=0)
    terms = np.empty((2 * len(seg_len) - 1,) + seg_dw.shape[1:])
    terms[0::2] = seg_area
    terms[1::2] = seg_len[1:, None] * w[:-1]
    return w[-1], np.add.accumulate(terms, axis=0)[-1], w[:-1]


class StepNoise:
    """All randomness of one scheme step over ``[a, b]``.

    ``sub_increments``/``sub_areas`` hold one row per sub-interval of the
    partition cut at the ``len(jump_times)`` jumps.  The finest-level pieces
    the object was assembled from are retained so that further coarsening
    folds over the original leaves regardless of call grouping.
    """

    __slots__ = (
        "a", "b", "jump_times", "jump_marks",
        "sub_lengths", "sub_increments", "sub_areas",
        "_leaf_lengths", "_leaf_dw", "_leaf_area", "_leaf_cut",
    )

    def __init__(self, a, b, jump_times, jump_marks, leaf_lengths, leaf_dw, leaf_area, leaf_cut):
        if not b > a:
            raise ValueError(f"degenerate step [{a}, {b}]")
        self.a = float(a)
        self.b = float(b)
        self.jump_times = np.asarray(jump_times, dtype=float)
        self.jump_marks = np.asarray(jump_marks)
        self._leaf_lengths = np.asarray(leaf_lengths, dtype=float)
        self._leaf_dw = np.asarray(leaf_dw, dtype=float)
        self._leaf_area = np.asarray(leaf_area, dtype=float)
        self._leaf_cut = np.asarray(leaf_cut, dtype=bool)
        if int(np.sum(self._leaf_cut)) != len(self.jump_times):
            raise ValueError("jump boundaries inconsistent with leaf cut marks")
        self.sub_lengths, self.sub_increments, self.sub_areas = _segments(
            self._leaf_lengths, self._leaf_dw, self._leaf_area, self._leaf_cut
        )

    @property
    def m(self) -> int:
        return self.sub_increments.shape[1]

    @property
    def jumps(self):
        return [JumpEvent(float(t), z) for t, z in zip(self.jump_times, self.jump_marks)]

    def summary(self):
        """Canonical ``(dw, area, w_pre)`` of the step (left-to-right folds)."""
        return _summary(self.sub_lengths, self.sub_increments, self.sub_areas)


def sample_poisson_jumps(rng, lam: float, a: float, b: float, marks: MarkMeasure):
    """Jump events of a finite-activity Poisson random measure on ``(a, b]``.

    Count is Poisson(lam (b-a)); times are iid uniform on ``(a, b]`` sorted
    ascending (ties resampled); marks are iid from the normalised mark law.
    ``rng`` is a Generator or an :class:`RngStream`.
    """
    if b <= a:
        raise ValueError(f"need b > a, got [{a}, {b}]")
    if lam < 0.0:
        raise ValueError(f"intensity must be >= 0, got {lam}")
    if isinstance(rng, RngStream):
        rng = rng.generator()
    times, zs = _sample_jump_arrays(rng, lam, a, b, marks)
    return [JumpEvent(float(t), z) for t, z in zip(times, zs)]


def _sample_jump_arrays(rng: np.random.Generator, lam, a, b, marks: MarkMeasure):
    count = int(rng.poisson(lam * (b - a))) if lam > 0.0 else 0
    if count == 0:
        return np.empty(0), np.empty(0)
    times = np.sort(a + (b - a) * (1.0 - rng.random(count)))
    while np.any(np.diff(times) == 0.0):
        times = np.sort(a + (b - a) * (1.0 - rng.random(count)))
    return times, np.asarray(marks.sampler(rng, count))


def _draw_pieces(rng: np.random.Generator, lengths: np.ndarray, m: int):
    """Increments then areas for a batch of pieces, in pinned draw order."""
    scale = np.sqrt(lengths)[:, None]
    dws = rng.standard_normal((len(lengths), m)) * scale
    resid = rng.standard_normal((len(lengths), m))
    areas = lengths[:, None] * dws / 2.0 + np.sqrt(lengths**3 / 12.0)[:, None] * resid
    return dws, areas


def _cut_marks(n_pieces: int) -> np.ndarray:
    cut = np.ones(n_pieces, dtype=bool)
    cut[-1] = False
    return cut


def sample_step_noise(rng, a: float, b: float, jumps, m: int) -> StepNoise:
    """Draw the partitioned Wiener data of one step given its jump events.

    Sub-increments are independent ``Normal(0, len I_m)``; each local area
    is drawn from its conditional law given the increment.  ``jumps`` is a
    sequence of :class:`JumpEvent` (or ``(time, mark)`` pairs) sorted inside
    ``(a, b]``.
    """
    if isinstance(rng, RngStream):
        rng = rng.generator()
    times = np.asarray([j.time if isinstance(j, JumpEvent) else j[0] for j in jumps], dtype=float)
    marks = np.asarray([j.mark if isinstance(j, JumpEvent) else j[1] for j in jumps])
    if len(times) and not (np.all(times > a) and np.all(times <= b) and np.all(np.diff(times) > 0)):
        raise ValueError("jump times must be strictly increasing inside (a, b]")
    bounds = np.concatenate([[a], times, [b]])
    lengths = np.diff(bounds)
    dws, areas = _draw_pieces(rng, lengths, m)
    return StepNoise(a, b, times, marks, lengths, dws, areas, _cut_marks(len(lengths)))


def coarsen(fine: Sequence[StepNoise]) -> StepNoise:
    """Merge adjacent steps into one step by exact recombination.

    The merged partition splits only at the union of the jump times; all
    sums run left-to-right over the finest-level pieces, so coarsening in
    stages and coarsening in one call agree bitwise.
    """
    if len(fine) == 0:
        raise ValueError("nothing to coarsen")
    for prev, nxt in zip(fine, fine[1:]):
        if prev.b != nxt.a:
            raise ValueError(f"steps do not tile: [{prev.a}, {prev.b}] then [{nxt.a}, {nxt.b}]")
    first = fine[0]
    if len(fine) == 1:
        return StepNoise(
            first.a, first.b, first.jump_times, first.jump_marks,
            first._leaf_lengths, first._leaf_dw, first._leaf_area, first._leaf_cut,
        )
    return StepNoise(
        first.a,
        fine[-1].b,
        np.concatenate([s.jump_times for s in fine]),
        np.concatenate([s.jump_marks for s in fine]),
        np.concatenate([s._leaf_lengths for s in fine]),
        np.concatenate([s._leaf_dw for s in fine]),
        np.concatenate([s._leaf_area for s in fine]),
        np.concatenate([s._leaf_cut for s in fine]),
    )


# ---------------------------------------------------------------------------
# whole-path noise at the finest resolution
# ---------------------------------------------------------------------------

class PathNoise:
    """Finest-level noise realisation of one path over ``[0, T]``.

    Jump events are sampled once for the whole horizon and routed to leaf
    steps.  Pieces (leaf steps split at their jumps) live in flat arrays
    indexed by ``indptr``: leaf step ``k`` owns pieces
    ``indptr[k]:indptr[k+1]``.  ``reg_dw``/``reg_area`` hold the merged
    increment/area per leaf step (equal to the single piece for the
    jump-free majority).  Coarse steps at any resolution dividing
    ``n_leaf`` are exact recombinations of the same draws.
    """

    def __init__(self, T, n_leaf, m, grid, jump_times, jump_marks, jump_step,
                 piece_lengths, piece_dw, piece_area, indptr, reg_dw, reg_area):
        self.T = float(T)
        self.n_leaf = int(n_leaf)
        self.m = int(m)
        self.grid = grid
        self.jump_times = jump_times
        self.jump_marks = jump_marks
        self.jump_step = jump_step
        self.piece_lengths = piece_lengths
        self.piece_dw = piece_dw
        self.piece_area = piece_area
        self.indptr = indptr
        self.reg_dw = reg_dw
        self.reg_area = reg_area

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    def window_jump_slice(self, lo_leaf: int, hi_leaf: int):
        """Index range of the jumps falling in leaf steps ``[lo_leaf, hi_leaf)``."""
        lo = int(np.searchsorted(self.jump_step, lo_leaf, side="left"))
        hi = int(np.searchsorted(self.jump_step, hi_leaf, side="left"))
        return lo, hi

    def leaf_step(self, k: int) -> StepNoise:
        return self._window_step(k, k + 1)

    def coarse_steps(self, n: int):
        """The path's noise regrouped on the coarser ``n``-step grid."""
        if self.n_leaf % n:
            raise ValueError(f"{n} does not divide the leaf resolution {self.n_leaf}")
        r = self.n_leaf // n
        return [self._window_step(k * r, (k + 1) * r) for k in range(n)]

    def _window_cut(self, lo_leaf: int, hi_leaf: int, p0: int, p1: int) -> np.ndarray:
        # pieces ending at jumps are exactly the non-final pieces of their leaf step
        cut = np.ones(p1 - p0, dtype=bool)
        cut[np.asarray(self.indptr[lo_leaf + 1:hi_leaf + 1]) - p0 - 1] = False
        return cut

    def _window_step(self, lo_leaf: int, hi_leaf: int) -> StepNoise:
        lo, hi = self.window_jump_slice(lo_leaf, hi_leaf)
        p0, p1 = int(self.indptr[lo_leaf]), int(self.indptr[hi_leaf])
        cut = self._window_cut(lo_leaf, hi_leaf, p0, p1)
        return StepNoise(
            self.grid[lo_leaf], self.grid[hi_leaf],
            self.jump_times[lo:hi], self.jump_marks[lo:hi],
            self.piece_lengths[p0:p1], self.piece_dw[p0:p1], self.piece_area[p0:p1],
            cut,
        )

    def window_data(self, lo_leaf: int, hi_leaf: int):
        """Canonical ``(dw, area, w_pre, times, marks)`` over a leaf window.

        Matches ``self._window_step(lo, hi).summary()`` bitwise; used by the
        vectorised engine for lanes whose window contains jumps.
        """
        lo, hi = self.window_jump_slice(lo_leaf, hi_leaf)
        p0, p1 = int(self.indptr[lo_leaf]), int(self.indptr[hi_leaf])
        cut = self._window_cut(lo_leaf, hi_leaf, p0, p1)
        seg = _segments(
            self.piece_lengths[p0:p1], self.piece_dw[p0:p1], self.piece_area[p0:p1], cut
        )
        dw, area, w_pre = _summary(*seg)
        return dw, area, w_pre, self.jump_times[lo:hi], self.jump_marks[lo:hi]


def sample_path_noise(
    master_seed: int,
    path_id: int,
    marks: MarkMeasure,
    T: float,
    n_leaf: int,
    m: int,
) -> PathNoise:
    """Sample the whole noise tree of one path at leaf resolution ``n_leaf``.

    Draw order is pinned: jump stream (count, times, marks), then Wiener
    stream (all piece increments in time order, then all piece area
    residuals).  The realisation is a pure function of
    ``(master_seed, path_id)``.
    """
    gj = derive_stream(master_seed, path_id, TAG_JUMPS).generator()
    times, zs = _sample_jump_arrays(gj, marks.intensity, 0.0, T, marks)
    grid = np.arange(n_leaf + 1, dtype=float) * T / n_leaf
    jump_step = np.searchsorted(grid, times, side="left") - 1
    J = len(times)

    if J == 0:
        lengths = np.diff(grid)
        indptr = np.arange(n_leaf + 1)
    else:
        counts = np.bincount(jump_step, minlength=n_leaf)
        indptr = np.zeros(n_leaf + 1, dtype=int)
        indptr[1:] = np.cumsum(counts + 1)
        lengths = np.empty(indptr[-1])
        lengths[indptr[:-1]] = np.diff(grid)
        for k in np.nonzero(counts)[0]:
            ts = times[jump_step == k]
            bl = np.concatenate([[grid[k]], ts, [grid[k + 1]]])
            lengths[indptr[k]:indptr[k + 1]] = np.diff(bl)

    gw = derive_stream(master_seed, path_id, TAG_WIENER).generator()
    dws, areas = _draw_pieces(gw, lengths, m)

    if J == 0:
        reg_dw, reg_area = dws, areas
    else:
        reg_dw = dws[indptr[:-1]].copy()
        reg_area = areas[indptr[:-1]].copy()
        for k in np.nonzero(counts)[0]:
            sl = slice(indptr[k], indptr[k + 1])
            reg_dw[k], reg_area[k] = _fold_run(lengths[sl], dws[sl], areas[sl])

    return PathNoise(T, n_leaf, m, grid, times, zs, jump_step,
                     lengths, dws, areas, indptr, reg_dw, reg_area)
