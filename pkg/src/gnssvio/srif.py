"""Square-root information filtering on a segmented state layout.

The posterior over the error state x~ is carried as an upper-triangular
factor R and residual vector r with cost ||R x~ - r||^2, so R^T R is the
information matrix and the covariance is (R^T R)^-1.  All operations are
pure: they return new states and never mutate their inputs.

Sign/whitening conventions: a LinearizedConstraint encodes rows
r ~= H x~ + n with n ~ N(0, I) after multiplication by noise_sqrt_inv,
where r is measured-minus-predicted.  After an update the caller retracts
the correction on its manifold estimate and resets the residual to zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any

import numpy as np
import scipy.linalg
from scipy.stats import chi2

# Diagonal entries of the factor below this fraction of the largest one are
# treated as carrying no information (rank checks, delayed init acceptance).
RANK_DIAG_RATIO = 1e-10


@lru_cache(maxsize=64)
def chi2_cut(quantile: float, df: int) -> float:
    """Cached chi-square quantile; gating calls this per measurement."""
    return float(chi2.ppf(quantile, df=df))


class FilterError(Exception):
    pass


class LayoutError(FilterError):
    pass


class RankDeficiencyError(FilterError):
    pass


class InitRejectedError(FilterError):
    """Delayed initialization left the new segment unobservable."""


@dataclass
class LinearizedConstraint:
    """A block-sparse measurement linearization.

    blocks maps segment id -> (m, segment_dim) Jacobian block; segments not
    present are implicitly zero.  residual has length m.  noise_sqrt_inv is
    the whitener S^(-1/2): an (m, m) matrix, a length-m diagonal, or None
    when the rows are already whitened.
    """
    blocks: dict[str, np.ndarray]
    residual: np.ndarray
    noise_sqrt_inv: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return len(np.atleast_1d(self.residual))

    def whitened(self) -> tuple[dict[str, np.ndarray], np.ndarray]:
        r = np.atleast_1d(np.asarray(self.residual, dtype=float))
        blocks = {k: np.atleast_2d(np.asarray(b, dtype=float)) for k, b in self.blocks.items()}
        w = self.noise_sqrt_inv
        if w is None:
            return blocks, r
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            if len(w) != len(r):
                raise FilterError("diagonal whitener length mismatch")
            return {k: w[:, None] * b for k, b in blocks.items()}, w * r
        if w.shape != (len(r), len(r)):
            raise FilterError("whitener shape mismatch")
        return {k: w @ b for k, b in blocks.items()}, w @ r


@dataclass
class SquareRootState:
    """Upper-triangular information factor, residual, and segment layout."""
    factor: np.ndarray
    residual: np.ndarray
    layout: list[tuple[str, int]] = field(default_factory=list)
    estimate: Any = None

    @property
    def dim(self) -> int:
        return sum(d for _, d in self.layout)

    @property
    def dtype(self):
        return self.factor.dtype

    def ids(self) -> list[str]:
        return [sid for sid, _ in self.layout]

    def has(self, sid: str) -> bool:
        return sid in self.offsets()

    def offsets(self) -> dict[str, tuple[int, int]]:
        # memoized per instance; states are never mutated after creation
        cached = self.__dict__.get("_offsets")
        if cached is None:
            cached, off = {}, 0
            for sid, d in self.layout:
                cached[sid] = (off, d)
                off += d
            self.__dict__["_offsets"] = cached
        return cached

    def columns(self, sid: str) -> slice:
        off = self.offsets()
        if sid not in off:
            raise LayoutError(f"unknown segment {sid!r}")
        o, d = off[sid]
        return slice(o, o + d)

    def covariance(self) -> np.ndarray:
        """(R^T R)^-1 via two triangular solves."""
        n = self.dim
        self._check_solvable()
        Rinv = scipy.linalg.solve_triangular(
            self.factor, np.eye(n, dtype=self.dtype), check_finite=False)
        return Rinv @ Rinv.T

    def marginal_covariance(self, sids: list[str]) -> np.ndarray:
        """Covariance restricted to the listed segments (layout order)."""
        self._check_solvable()
        cols = np.concatenate([np.arange(self.columns(s).start, self.columns(s).stop)
                               for s in sids])
        E = np.zeros((self.dim, len(cols)), dtype=self.dtype)
        E[cols, np.arange(len(cols))] = 1.0
        X = scipy.linalg.solve_triangular(self.factor, E, trans='T', check_finite=False)
        X = scipy.linalg.solve_triangular(self.factor, X, check_finite=False)
        return X[cols, :]

    def condition_estimate(self) -> float:
        """1-norm condition estimate of the triangular factor."""
        n = self.dim
        if n == 0:
            return 1.0
        diag = np.abs(np.diag(self.factor))
        if diag.min() <= RANK_DIAG_RATIO * max(diag.max(), 1.0):
            return np.inf
        trcon = scipy.linalg.get_lapack_funcs(('trcon',), (self.factor,))[0]
        rcond, info = trcon(self.factor, norm='1', uplo='U', diag='N')
        if info != 0 or rcond <= 0.0:
            return np.inf
        return 1.0 / float(rcond)

    def _check_solvable(self):
        if self.dim == 0:
            return
        diag = np.abs(np.diag(self.factor))
        if diag.size and diag.min() <= RANK_DIAG_RATIO * max(diag.max(), 1.0):
            raise RankDeficiencyError("factor is rank deficient")


def empty_state(dtype=np.float64, estimate: Any = None) -> SquareRootState:
    return SquareRootState(factor=np.zeros((0, 0), dtype=dtype),
                           residual=np.zeros(0, dtype=dtype),
                           layout=[], estimate=estimate)


def _expand_constraint(layout: list[tuple[str, int]], constraint: LinearizedConstraint,
                       dtype) -> tuple[np.ndarray, np.ndarray]:
    """Whiten and scatter constraint blocks into full-width rows."""
    blocks, resid = constraint.whitened()
    m = len(resid)
    offsets, off = {}, 0
    for sid, d in layout:
        offsets[sid] = (off, d)
        off += d
    H = np.zeros((m, off), dtype=dtype)
    for sid, block in blocks.items():
        if sid not in offsets:
            raise LayoutError(f"constraint references unknown segment {sid!r}")
        o, d = offsets[sid]
        if block.shape != (m, d):
            raise LayoutError(f"block for {sid!r} has shape {block.shape}, want {(m, d)}")
        H[:, o:o + d] = block
    return H, resid.astype(dtype)


def augment(state: SquareRootState, new_segments,
            cross_jacobian: LinearizedConstraint | None = None) -> SquareRootState:
    """Append segments at the tail of the layout.

    Without cross_jacobian the segments enter with zero information
    (infinite covariance prior): zero columns and zero rows keep the factor
    square.  With cross_jacobian (the propagation prior rows) its whitened
    rows are appended raw below the factor; row count must equal the total
    new dimension, and the factor is transiently block-lower until the next
    marginalization or update restores triangularity.
    """
    if isinstance(new_segments, tuple):
        new_segments = [new_segments]
    for sid, d in new_segments:
        if state.has(sid):
            raise LayoutError(f"segment {sid!r} already present")
        if d <= 0:
            raise LayoutError(f"segment {sid!r} has nonpositive dim")
    n = state.dim
    d_new = sum(d for _, d in new_segments)
    layout = list(state.layout) + [(sid, d) for sid, d in new_segments]
    factor = np.zeros((n + d_new, n + d_new), dtype=state.dtype)
    factor[:n, :n] = state.factor
    residual = np.zeros(n + d_new, dtype=state.dtype)
    residual[:n] = state.residual
    if cross_jacobian is not None:
        H, r = _expand_constraint(layout, cross_jacobian, state.dtype)
        if H.shape[0] != d_new:
            raise LayoutError("propagation prior row count must equal the new dimension")
        factor[n:, :] = H
        residual[n:] = r
    return SquareRootState(factor=factor, residual=residual, layout=layout,
                           estimate=state.estimate)


def marginalize(state: SquareRootState, drop_ids: list[str],
                kept_order: list[str] | None = None) -> SquareRootState:
    """Marginalize segments out by permutation + full QR.

    Dropped columns are permuted to the front, a full QR re-triangularizes
    the (possibly block-lower) factor, and the leading rows/columns are
    discarded; the trailing block is the exact marginal factor (equivalent
    to a Schur complement on the information matrix).  kept_order, when
    given, additionally reorders the surviving segments.
    """
    offsets = state.offsets()
    for sid in drop_ids:
        if sid not in offsets:
            raise LayoutError(f"cannot drop unknown segment {sid!r}")
    kept = [sid for sid, _ in state.layout if sid not in drop_ids]
    if kept_order is not None:
        if sorted(kept_order) != sorted(kept):
            raise LayoutError("kept_order must be a permutation of the surviving segments")
        kept = list(kept_order)
    order = list(drop_ids) + kept
    if not order:
        return replace(state, factor=state.factor.copy(), residual=state.residual.copy())
    cols = np.concatenate([np.arange(offsets[s][0], offsets[s][0] + offsets[s][1])
                           for s in order])
    d_drop = sum(offsets[s][1] for s in drop_ids)
    stacked = np.concatenate([state.factor[:, cols],
                              state.residual[:, None].astype(state.dtype)], axis=1)
    T = np.triu(scipy.linalg.qr(stacked, mode='economic', check_finite=False)[1])
    T = _fix_signs(T)
    n_new = state.dim - d_drop
    factor = T[d_drop:d_drop + n_new, d_drop:d_drop + n_new]
    residual = T[d_drop:d_drop + n_new, -1].copy()
    layout = [(sid, offsets[sid][1]) for sid in kept]
    return SquareRootState(factor=np.ascontiguousarray(factor), residual=residual,
                           layout=layout, estimate=state.estimate)


def update(state: SquareRootState, constraint: LinearizedConstraint
           ) -> tuple[SquareRootState, np.ndarray]:
    """Thin-QR measurement update; returns (state, correction).

    Stacks the whitened rows under [R | r], re-triangularizes, and solves
    the correction dx = R+^-1 r+.  The caller retracts dx on the manifold
    estimate and then zeroes the residual.  Raises RankDeficiencyError if
    the posterior factor is singular (never inverted silently).
    """
    n = state.dim
    if constraint.rows == 0:
        return replace(state, factor=state.factor.copy(),
                       residual=state.residual.copy()), np.zeros(n, dtype=state.dtype)
    H, r = _expand_constraint(state.layout, constraint, state.dtype)
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(r))):
        raise FilterError("non-finite measurement rows")
    stacked = np.zeros((n + H.shape[0], n + 1), dtype=state.dtype)
    stacked[:n, :n] = state.factor
    stacked[:n, n] = state.residual
    stacked[n:, :n] = H
    stacked[n:, n] = r
    T = np.triu(scipy.linalg.qr(stacked, mode='economic', check_finite=False)[1])
    T = _fix_signs(T)
    factor = np.ascontiguousarray(T[:n, :n])
    residual = T[:n, n].copy()
    out = SquareRootState(factor=factor, residual=residual,
                          layout=list(state.layout), estimate=state.estimate)
    out._check_solvable()
    correction = scipy.linalg.solve_triangular(factor, residual, check_finite=False)
    return out, correction


def delayed_init(state: SquareRootState, new_segment: tuple[str, int],
                 constraints: list[LinearizedConstraint]) -> SquareRootState:
    """Initialize a segment with an infinite-covariance prior plus constraints.

    The segment is appended with zero information, all constraints are
    applied in one stacked QR pass, and the new columns must come out with
    diagonal entries above the rank threshold; otherwise the initialization
    is rejected (InitRejectedError) and the input state is left untouched.
    """
    if not constraints:
        raise InitRejectedError("no constraints supplied")
    work = augment(state, new_segment)
    n = work.dim
    rows = [_expand_constraint(work.layout, c, work.dtype) for c in constraints]
    H = np.concatenate([h for h, _ in rows], axis=0)
    r = np.concatenate([v for _, v in rows])
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(r))):
        raise FilterError("non-finite initialization rows")
    stacked = np.zeros((n + H.shape[0], n + 1), dtype=work.dtype)
    stacked[:n, :n] = work.factor
    stacked[:n, n] = work.residual
    stacked[n:, :n] = H
    stacked[n:, n] = r
    T = np.triu(scipy.linalg.qr(stacked, mode='economic', check_finite=False)[1])
    T = _fix_signs(T)
    factor = np.ascontiguousarray(T[:n, :n])
    new_cols = work.columns(new_segment[0])
    diag = np.abs(np.diag(factor))
    floor = RANK_DIAG_RATIO * max(diag.max(), 1.0)
    if np.any(diag[new_cols] <= floor):
        raise InitRejectedError(f"segment {new_segment[0]!r} not observable from constraints")
    return SquareRootState(factor=factor, residual=T[:n, n].copy(),
                           layout=list(work.layout), estimate=state.estimate)


def solve_current(state: SquareRootState) -> np.ndarray:
    """Correction R^-1 r for the current factor; errors if singular."""
    if state.dim == 0:
        return np.zeros(0, dtype=state.dtype)
    state._check_solvable()
    return scipy.linalg.solve_triangular(state.factor, state.residual, check_finite=False)


def _fix_signs(T: np.ndarray) -> np.ndarray:
    """Flip row signs so factor diagonals are non-negative (QR sign freedom)."""
    n = min(T.shape[0], T.shape[1] - 1) if T.shape[1] else T.shape[0]
    d = np.diag(T[:n, :n]).copy()
    flip = d < 0.0
    if np.any(flip):
        T[:n][flip] *= -1.0
    return T
