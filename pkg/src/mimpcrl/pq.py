"""One-dimensional piecewise quadratic functions.

Scalar value functions in this package (cost-to-go of the scalar control
problem, its partial minimisations over one input) are piecewise quadratic
with finitely many breakpoints.  This module stores them exactly and
implements the closed operations needed by dynamic programming:

* pointwise addition,
* pointwise minimum of two functions,
* argument shift,
* partial minimisation  env(z) = min_t  0.5*(t - z)**2 + f(t)
  (unit-weight proximal envelope), together with the data needed to
  recover the minimiser t(z).

Every piece carries an int64 metadata pair so callers can tag pieces
(which branch won a minimum, which source piece an envelope segment came
from) and replay argmins later without re-solving.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Breakpoints closer than this (relative) are considered identical.
_BREAK_TOL = 1e-12
# A quadratic coefficient below this is treated as linear when root-finding.
_TINY = 1e-14


@dataclass
class PiecewiseQuadratic:
    """Piecewise quadratic function on the real line.

    Piece ``j`` is ``a*t**2 + b*t + c`` with row ``coef[j] = (a, b, c)``,
    valid on ``[edge_j, edge_{j+1}]`` where the edges are
    ``[-inf, breaks[0], ..., breaks[-1], +inf]``.  ``meta[j]`` is an
    arbitrary pair of int64 tags owned by the caller.
    """

    breaks: np.ndarray  # (p-1,) sorted interior breakpoints
    coef: np.ndarray    # (p, 3) rows (a, b, c)
    meta: np.ndarray | None = field(default=None)  # (p, 2) int64

    def __post_init__(self) -> None:
        self.breaks = np.asarray(self.breaks, dtype=float)
        self.coef = np.atleast_2d(np.asarray(self.coef, dtype=float))
        if self.meta is None:
            self.meta = np.zeros((self.coef.shape[0], 2), dtype=np.int64)
        else:
            self.meta = np.atleast_2d(np.asarray(self.meta, dtype=np.int64))
        if self.coef.shape[0] != self.breaks.size + 1:
            raise ValueError(
                f"{self.coef.shape[0]} pieces need {self.coef.shape[0] - 1} "
                f"breakpoints, got {self.breaks.size}"
            )
        if self.breaks.size and np.any(np.diff(self.breaks) < 0):
            raise ValueError("breakpoints must be sorted")

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------

    @property
    def n_pieces(self) -> int:
        return self.coef.shape[0]

    def piece_index(self, t: np.ndarray | float) -> np.ndarray:
        return np.searchsorted(self.breaks, np.asarray(t, dtype=float), side="right")

    def __call__(self, t: np.ndarray | float) -> np.ndarray | float:
        t_arr = np.asarray(t, dtype=float)
        j = self.piece_index(t_arr)
        a, b, c = self.coef[j, 0], self.coef[j, 1], self.coef[j, 2]
        out = (a * t_arr + b) * t_arr + c
        return out if t_arr.ndim else float(out)

    def derivative(self, t: np.ndarray | float) -> np.ndarray | float:
        t_arr = np.asarray(t, dtype=float)
        j = self.piece_index(t_arr)
        out = 2.0 * self.coef[j, 0] * t_arr + self.coef[j, 1]
        return out if t_arr.ndim else float(out)

    def edges(self) -> np.ndarray:
        return np.concatenate(([-np.inf], self.breaks, [np.inf]))

    # ------------------------------------------------------------------
    # algebra
    # ------------------------------------------------------------------

    def shift(self, delta: float) -> "PiecewiseQuadratic":
        """Return g with g(t) = f(t + delta).  Piece order and meta survive."""
        a = self.coef[:, 0]
        b = self.coef[:, 1]
        c = self.coef[:, 2]
        coef = np.column_stack(
            [a, 2.0 * a * delta + b, (a * delta + b) * delta + c]
        )
        return PiecewiseQuadratic(self.breaks - delta, coef, self.meta.copy())

    def add_quadratic(self, a: float, b: float, c: float) -> "PiecewiseQuadratic":
        coef = self.coef + np.array([a, b, c])
        return PiecewiseQuadratic(self.breaks.copy(), coef, self.meta.copy())

    def add(self, other: "PiecewiseQuadratic") -> "PiecewiseQuadratic":
        """Pointwise sum.  Meta of self survives (other treated as plain data)."""
        edges, i_self, i_other = _merge_edges(self, other)
        coef = self.coef[i_self] + other.coef[i_other]
        return _build(edges, coef, self.meta[i_self])

    def compress(self) -> "PiecewiseQuadratic":
        """Merge adjacent pieces with identical coefficients and meta."""
        if self.n_pieces == 1:
            return self
        keep = np.ones(self.n_pieces, dtype=bool)
        same = (
            np.all(np.abs(np.diff(self.coef, axis=0)) <= 1e-12, axis=1)
            & np.all(np.diff(self.meta, axis=0) == 0, axis=1)
        )
        keep[1:] = ~same
        if keep.all():
            return self
        idx = np.flatnonzero(keep)
        new_breaks = self.breaks[idx[1:] - 1]
        return PiecewiseQuadratic(new_breaks, self.coef[idx], self.meta[idx])

    def max_jump(self) -> float:
        """Largest value discontinuity across interior breakpoints (debug aid)."""
        if not self.breaks.size:
            return 0.0
        t = self.breaks
        left = (self.coef[:-1, 0] * t + self.coef[:-1, 1]) * t + self.coef[:-1, 2]
        right = (self.coef[1:, 0] * t + self.coef[1:, 1]) * t + self.coef[1:, 2]
        return float(np.max(np.abs(left - right)))


def constant(value: float) -> PiecewiseQuadratic:
    return PiecewiseQuadratic(np.array([]), np.array([[0.0, 0.0, value]]))


def quadratic(a: float, b: float, c: float) -> PiecewiseQuadratic:
    return PiecewiseQuadratic(np.array([]), np.array([[a, b, c]]))


def hinge_band(lo: float, hi: float, slope: float) -> PiecewiseQuadratic:
    """slope * max(lo - t, 0, t - hi): zero inside [lo, hi], linear outside."""
    if hi < lo:
        raise ValueError("band upper edge below lower edge")
    coef = np.array(
        [
            [0.0, -slope, slope * lo],
            [0.0, 0.0, 0.0],
            [0.0, slope, -slope * hi],
        ]
    )
    return PiecewiseQuadratic(np.array([lo, hi]), coef)


# ----------------------------------------------------------------------
# pointwise minimum
# ----------------------------------------------------------------------


def minimum(
    f: PiecewiseQuadratic,
    g: PiecewiseQuadratic,
    tag_f: int = 0,
    tag_g: int = 1,
) -> PiecewiseQuadratic:
    """Pointwise min(f, g).

    Output meta is ``(tag, source piece index)`` of the winning input; ties
    go to ``f`` so a caller that passes the preferred branch first gets a
    deterministic tie-break.
    """
    edges, i_f, i_g = _merge_edges(f, g)
    out_edges: list[float] = [edges[0]]
    out_coef: list[np.ndarray] = []
    out_meta: list[np.ndarray] = []

    for k in range(len(i_f)):
        lo, hi = edges[k], edges[k + 1]
        cf = f.coef[i_f[k]]
        cg = g.coef[i_g[k]]
        cuts = _crossings(cf - cg, lo, hi)
        sub = [lo, *cuts, hi]
        for m in range(len(sub) - 1):
            mid = _representative(sub[m], sub[m + 1])
            vf = (cf[0] * mid + cf[1]) * mid + cf[2]
            vg = (cg[0] * mid + cg[1]) * mid + cg[2]
            if vf <= vg + 1e-13 * (1.0 + abs(vf) + abs(vg)):
                out_coef.append(cf)
                out_meta.append(np.array([tag_f, i_f[k]], dtype=np.int64))
            else:
                out_coef.append(cg)
                out_meta.append(np.array([tag_g, i_g[k]], dtype=np.int64))
            out_edges.append(sub[m + 1])

    return _build(
        np.array(out_edges), np.array(out_coef), np.array(out_meta)
    ).compress()


def _representative(lo: float, hi: float) -> float:
    if np.isinf(lo) and np.isinf(hi):
        return 0.0
    if np.isinf(lo):
        return hi - 1.0
    if np.isinf(hi):
        return lo + 1.0
    return 0.5 * (lo + hi)


def _crossings(dcoef: np.ndarray, lo: float, hi: float) -> list[float]:
    """Real roots of a quadratic strictly inside (lo, hi), sorted."""
    da, db, dc = dcoef
    roots: list[float] = []
    if abs(da) <= _TINY:
        if abs(db) > _TINY:
            roots = [-dc / db]
    else:
        disc = db * db - 4.0 * da * dc
        if disc > 0.0:
            sq = np.sqrt(disc)
            q = -0.5 * (db + np.copysign(sq, db if db != 0.0 else 1.0))
            if abs(q) > _TINY:
                roots = [q / da, dc / q]
            else:
                roots = [-db / (2.0 * da)]
    tol = _BREAK_TOL * (1.0 + min(abs(lo), abs(hi), 1e6))
    inside = [r for r in roots if lo + tol < r < hi - tol]
    return sorted(inside)


def _merge_edges(
    f: PiecewiseQuadratic, g: PiecewiseQuadratic
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Union of edges plus the piece index of each input on every interval."""
    merged = np.union1d(f.breaks, g.breaks)
    if merged.size > 1:
        gap = np.diff(merged)
        tol = _BREAK_TOL * (1.0 + np.abs(merged[1:]))
        merged = np.concatenate([merged[:1], merged[1:][gap > tol]])
    edges = np.concatenate(([-np.inf], merged, [np.inf]))
    reps = np.array(
        [_representative(edges[k], edges[k + 1]) for k in range(len(edges) - 1)]
    )
    return edges, f.piece_index(reps), g.piece_index(reps)


def _build(
    edges: np.ndarray, coef: np.ndarray, meta: np.ndarray
) -> PiecewiseQuadratic:
    """Assemble from an explicit edge list, dropping zero-width intervals."""
    coef_rows: list[np.ndarray] = []
    meta_rows: list[np.ndarray] = []
    breaks: list[float] = []
    started = False
    for j in range(coef.shape[0]):
        lo, hi = edges[j], edges[j + 1]
        zero_width = (
            np.isfinite(lo)
            and np.isfinite(hi)
            and hi - lo <= _BREAK_TOL * (1.0 + min(abs(lo), abs(hi)))
        )
        if zero_width:
            continue
        if started:
            breaks.append(lo)
        coef_rows.append(coef[j])
        meta_rows.append(meta[j])
        started = True
    return PiecewiseQuadratic(
        np.array(breaks), np.array(coef_rows), np.array(meta_rows, dtype=np.int64)
    )


# ----------------------------------------------------------------------
# proximal envelope
# ----------------------------------------------------------------------

META_INTERIOR = 0  # minimiser strictly inside a source piece
META_BREAK = 1     # minimiser at a source breakpoint


@dataclass
class Envelope:
    """env(z) = min_t 0.5*(t - z)**2 + f(t), plus argmin recovery data.

    ``pq.meta[j]`` is ``(META_INTERIOR, source piece)`` or
    ``(META_BREAK, breakpoint index)``; ``argmin`` turns that back into the
    minimising t for any z.
    """

    pq: PiecewiseQuadratic
    source_coef: np.ndarray    # coefficients of f, for interior argmins
    source_breaks: np.ndarray  # finite breakpoints of f

    def value(self, z: np.ndarray | float) -> np.ndarray | float:
        return self.pq(z)

    def argmin(self, z: np.ndarray | float) -> np.ndarray | float:
        z_arr = np.asarray(z, dtype=float)
        j = self.pq.piece_index(z_arr)
        kind = self.pq.meta[j, 0]
        idx = self.pq.meta[j, 1]
        a = self.source_coef[idx, 0]
        b = self.source_coef[idx, 1]
        out = (z_arr - b) / (1.0 + 2.0 * a)
        if self.source_breaks.size:
            at_break = self.source_breaks[np.minimum(idx, self.source_breaks.size - 1)]
            out = np.where(kind == META_INTERIOR, out, at_break)
        return out if z_arr.ndim else float(out)


def proximal_envelope(f: PiecewiseQuadratic) -> Envelope:
    """Exact unit-weight envelope of a (possibly non-convex) piecewise quadratic.

    Requires every piece to have nonnegative curvature and the extreme
    pieces to be coercive, so the inner minimum exists for all z.  The
    candidate minimisers for a given z are the per-piece interior
    stationary points and the breakpoints of f; the envelope is the lower
    envelope of the corresponding quadratic arcs of z.

    Convex inputs take a linear-time path: the inner objective has
    increasing differences in (t, z), so the minimiser is monotone in z
    and the candidate arcs tile the line in source order, with a
    breakpoint parabola filling each derivative jump.
    """
    a = f.coef[:, 0]
    if np.any(a < -1e-12):
        raise ValueError("piece with negative curvature; envelope undefined")
    first, last = f.coef[0], f.coef[-1]
    if first[0] <= _TINY and first[1] >= -_TINY:
        raise ValueError("function not coercive to the left")
    if last[0] <= _TINY and last[1] <= _TINY:
        raise ValueError("function not coercive to the right")

    bp = f.breaks.copy()
    env = _convex_envelope_tiling(f)
    if env is not None:
        return Envelope(env, f.coef.copy(), bp)

    env = None
    if bp.size:
        env = _parabola_envelope(bp, np.asarray(f(bp), dtype=float))

    edges = f.edges()
    for j in range(f.n_pieces):
        aj, bj, cj = f.coef[j]
        d = 1.0 + 2.0 * max(aj, 0.0)
        arc = np.array([aj / d, bj / d, cj - bj * bj / (2.0 * d)])
        zlo = d * edges[j] + bj if np.isfinite(edges[j]) else -np.inf
        zhi = d * edges[j + 1] + bj if np.isfinite(edges[j + 1]) else np.inf
        if env is None:
            env = PiecewiseQuadratic(
                np.array([]), arc[None, :], np.array([[META_INTERIOR, j]], dtype=np.int64)
            )
        else:
            env = _fold_arc(env, arc, zlo, zhi, (META_INTERIOR, j))

    return Envelope(env.compress(), f.coef.copy(), bp)


def _convex_envelope_tiling(f: PiecewiseQuadratic) -> PiecewiseQuadratic | None:
    """Envelope of a convex f by tiling; None if f has a concave kink.

    The arc of piece j covers z in [e_j + f'(e_j), e_{j+1} + f'(e_{j+1})]
    (one-sided derivatives) and the parabola of breakpoint t_j covers the
    derivative jump [t_j + f'-, t_j + f'+]; for convex f these intervals
    are adjacent and ordered, so no comparisons are needed.
    """
    a, b, c = f.coef[:, 0], f.coef[:, 1], f.coef[:, 2]
    bp = f.breaks
    if bp.size:
        d_left = 2.0 * a[:-1] * bp + b[:-1]
        d_right = 2.0 * a[1:] * bp + b[1:]
        if np.any(d_right < d_left - 1e-10 * (1.0 + np.abs(d_left))):
            return None
    edges = f.edges()
    d = 1.0 + 2.0 * a
    arc_lo = np.where(np.isfinite(edges[:-1]), d * edges[:-1] + b, -np.inf)
    arc_hi = np.where(np.isfinite(edges[1:]), d * edges[1:] + b, np.inf)
    arc_coef = np.column_stack([a / d, b / d, c - b * b / (2.0 * d)])
    v_bp = np.asarray(f(bp), dtype=float) if bp.size else np.zeros(0)

    out_breaks: list[float] = []
    out_coef: list[np.ndarray] = []
    out_meta: list[tuple[int, int]] = []
    prev = -np.inf
    for j in range(f.n_pieces):
        if j > 0:
            # breakpoint parabola over the derivative jump, if any
            lo, hi = prev, arc_lo[j]
            if hi > lo + _BREAK_TOL * (1.0 + abs(lo)):
                if out_coef:
                    out_breaks.append(lo)
                out_coef.append(
                    np.array([0.5, -bp[j - 1], 0.5 * bp[j - 1] ** 2 + v_bp[j - 1]])
                )
                out_meta.append((META_BREAK, j - 1))
                prev = hi
            prev = max(prev, arc_lo[j])
        hi = arc_hi[j]
        if hi > prev + _BREAK_TOL * (1.0 + min(abs(prev), 1e6)) or j == f.n_pieces - 1:
            if out_coef:
                out_breaks.append(prev)
            out_coef.append(arc_coef[j])
            out_meta.append((META_INTERIOR, j))
            prev = hi
    return PiecewiseQuadratic(
        np.array(out_breaks),
        np.array(out_coef),
        np.array(out_meta, dtype=np.int64),
    )


def _parabola_envelope(t: np.ndarray, v: np.ndarray) -> PiecewiseQuadratic:
    """Lower envelope of the parabolas 0.5*(z - t_j)**2 + v_j.

    Subtracting z**2/2 turns them into lines with strictly decreasing
    slopes -t_j, so a single monotone hull pass suffices.
    """
    slope = -t
    intercept = 0.5 * t * t + v
    hull: list[int] = []
    cross: list[float] = []
    for j in range(t.size):
        while True:
            if not hull:
                hull.append(j)
                break
            k = hull[-1]
            x = (intercept[j] - intercept[k]) / (slope[k] - slope[j])
            if cross and x <= cross[-1]:
                hull.pop()
                cross.pop()
            else:
                hull.append(j)
                cross.append(x)
                break
    breaks = np.array(cross) if cross else np.array([])
    coef = np.array([[0.5, slope[j], intercept[j]] for j in hull])
    meta = np.array([[META_BREAK, j] for j in hull], dtype=np.int64)
    return PiecewiseQuadratic(breaks, coef, meta)


def _fold_arc(
    env: PiecewiseQuadratic,
    arc: np.ndarray,
    zlo: float,
    zhi: float,
    tag: tuple[int, int],
) -> PiecewiseQuadratic:
    """min(env, arc restricted to [zlo, zhi]); env wins outside and on ties."""
    if zhi <= zlo:
        return env
    extra = [x for x in (zlo, zhi) if np.isfinite(x)]
    cut = np.unique(np.concatenate([env.edges(), extra])) if extra else env.edges()
    out_edges: list[float] = [cut[0]]
    out_coef: list[np.ndarray] = []
    out_meta: list[np.ndarray] = []
    tag_row = np.array(tag, dtype=np.int64)
    for k in range(len(cut) - 1):
        lo, hi = cut[k], cut[k + 1]
        if hi <= lo:
            continue
        rep = _representative(lo, hi)
        je = int(env.piece_index(rep))
        ce = env.coef[je]
        me = env.meta[je]
        if rep < zlo or rep > zhi:
            out_coef.append(ce)
            out_meta.append(me)
            out_edges.append(hi)
            continue
        cuts = _crossings(ce - arc, lo, hi)
        sub = [lo, *cuts, hi]
        for m in range(len(sub) - 1):
            mid = _representative(sub[m], sub[m + 1])
            ve = (ce[0] * mid + ce[1]) * mid + ce[2]
            va = (arc[0] * mid + arc[1]) * mid + arc[2]
            if ve <= va + 1e-13 * (1.0 + abs(ve) + abs(va)):
                out_coef.append(ce)
                out_meta.append(me)
            else:
                out_coef.append(arc)
                out_meta.append(tag_row)
            out_edges.append(sub[m + 1])
    return _build(
        np.array(out_edges), np.array(out_coef), np.array(out_meta)
    ).compress()
