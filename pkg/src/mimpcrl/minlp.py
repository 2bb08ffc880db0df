"""Mixed-integer optimisation over the pinned-profile subproblem family.

Two strategies compute the same minimum:

* exhaustive enumeration of integer profiles, either through the
  closed-form value atlas (the production path for the scalar problem)
  or through warm-started barrier solves of every pinned subproblem
  (slower, independent of the atlas);
* best-first branch and bound on a convex relaxation that treats each
  undecided integer as a box variable in [0, 1] and replaces the
  bilinear input-times-switch term in the dynamics with its McCormick
  envelope over a configured input box.

Node relaxations are state-condensed quadratic programs solved exactly
by the primal active-set method, so node bounds carry no barrier gap:
they lower-bound every integer completion of the node as long as the
completions' optimal inputs stay inside the McCormick box, and a node
whose relaxation lands on integer switches is closed outright because
the envelope is exact there.

Infeasible integer choices are reported through an explicit flag rather
than a floating-point infinity so that downstream weighting code never
feeds ``inf`` into arithmetic.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from itertools import count, product

import numpy as np

from .atlas import ScalarValueAtlas
from .ipsolver import PinnedProfileNlp, PrimalDualPoint, SolveReport, solve_fixed_profile
from .ocp import OcpSpec
from .qp_oracle import active_set_qp

DEFAULT_INPUT_BOX = 10.0
ENUMERATION_LIMIT = 12


@dataclass(frozen=True)
class BranchEntry:
    """Pinned-first-integer minimum, or an explicit infeasibility marker."""

    first: int
    feasible: bool
    value: float
    completion: np.ndarray | None
    point: PrimalDualPoint | None = None

    def __post_init__(self) -> None:
        if self.feasible:
            if not np.isfinite(self.value):
                raise ValueError("feasible entries must carry a finite value")
            if self.completion is None or int(self.completion[0]) != self.first:
                raise ValueError("completion must start with the pinned integer")


@dataclass(frozen=True)
class IntegerValueTable:
    """One ``BranchEntry`` per first-integer choice, in integer order."""

    entries: tuple[BranchEntry, ...]

    @property
    def feasible(self) -> np.ndarray:
        return np.array([e.feasible for e in self.entries])

    def finite_values(self) -> tuple[np.ndarray, np.ndarray]:
        """(first integers, values) of the feasible entries only."""
        idx = np.array([e.first for e in self.entries if e.feasible], dtype=np.int64)
        vals = np.array([e.value for e in self.entries if e.feasible])
        return idx, vals

    def best(self) -> BranchEntry:
        """Feasible entry with the smallest value, ties to the off branch."""
        finite = [e for e in self.entries if e.feasible]
        if not finite:
            raise ValueError("no feasible integer choice")
        return min(finite, key=lambda e: (e.value, e.first))


@dataclass(frozen=True)
class MinlpSolution:
    value: float
    profile: np.ndarray
    inputs: np.ndarray
    strategy: str
    subproblems: int


@dataclass(frozen=True)
class StrategyComparison:
    enumeration_value: float
    bnb_value: float
    enumeration_profile: np.ndarray
    bnb_profile: np.ndarray
    enumeration_subproblems: int
    bnb_nodes: int
    value_gap: float
    agree: bool


def _atlas_applies(spec: OcpSpec) -> bool:
    return (
        spec.n_x == 1
        and spec.n_u == 1
        and spec.n_i == 1
        and spec.n_slack == 1
        and spec.m_term == 0
        and spec.is_quadratic
    )


def _resolve_engine(spec: OcpSpec, engine: str) -> str:
    if engine == "auto":
        return "atlas" if _atlas_applies(spec) else "barrier"
    if engine not in ("atlas", "barrier"):
        raise ValueError(f"unknown engine {engine!r}")
    if engine == "atlas" and not _atlas_applies(spec):
        raise ValueError("the atlas engine requires the scalar problem layout")
    return engine


def _pinned_report(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    bits: np.ndarray,
    tau_target: float,
    warm: PrimalDualPoint | None = None,
) -> SolveReport:
    profile = np.asarray(bits, dtype=float).reshape(spec.horizon, spec.n_i)
    nlp = PinnedProfileNlp(spec, s0, theta, profile)
    return solve_fixed_profile(nlp, tau_target=tau_target, warm_start=warm)


def phi_i(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    first: int,
    engine: str = "auto",
    atlas: ScalarValueAtlas | None = None,
    tau_target: float = 1e-9,
    want_point: bool = False,
) -> BranchEntry:
    """Minimum over completions with the first integer pinned to ``first``.

    The atlas engine is exact and cheap but limited to the scalar
    layout; the barrier engine sweeps all completions with warm-started
    interior-point solves and works for any spec, including ones where
    some (or all) completions are infeasible.
    """
    if first not in (0, 1):
        raise ValueError("the first integer must be 0 or 1")
    engine = _resolve_engine(spec, engine)
    if engine == "atlas":
        atlas = atlas or ScalarValueAtlas(spec, theta)
        value = float(atlas.phi(s0)[first])
        completion = atlas.completion(s0, first)[0]
        point = None
        if want_point:
            report = _pinned_report(spec, s0, theta, completion, tau_target)
            if not report.solved:
                raise RuntimeError(f"solve at the optimal completion failed: {report.message}")
            point = report.point
        return BranchEntry(first, True, value, completion, point)
    return _phi_by_sweep(spec, s0, theta, first, tau_target)


def _phi_by_sweep(
    spec: OcpSpec, s0: float, theta: np.ndarray, first: int, tau_target: float
) -> BranchEntry:
    best_value = np.inf
    best: tuple[np.ndarray, PrimalDualPoint] | None = None
    warm: PrimalDualPoint | None = None
    for tail in product((0, 1), repeat=spec.horizon - 1):
        bits = np.array((first,) + tail, dtype=np.int64)
        report = _pinned_report(spec, s0, theta, bits, tau_target, warm)
        if report.status == "max_iter" and warm is not None:
            # the neighbour's point can be interior yet dynamically
            # inconsistent with this profile; a cold rollout recovers
            report = _pinned_report(spec, s0, theta, bits, tau_target)
        if report.status == "max_iter":
            raise RuntimeError(f"pinned solve did not converge: {report.message}")
        if not report.solved:
            continue
        warm = report.point
        if report.objective < best_value:
            best_value = report.objective
            best = (bits, report.point)
    if best is None:
        return BranchEntry(first, False, np.nan, None)
    return BranchEntry(first, True, best_value, best[0], best[1])


def integer_value_table(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    engine: str = "auto",
    atlas: ScalarValueAtlas | None = None,
    tau_target: float = 1e-9,
    want_points: bool = False,
) -> IntegerValueTable:
    if _resolve_engine(spec, engine) == "atlas" and atlas is None:
        atlas = ScalarValueAtlas(spec, theta)
    entries = tuple(
        phi_i(spec, s0, theta, first, engine, atlas, tau_target, want_points)
        for first in (0, 1)
    )
    return IntegerValueTable(entries)


def solve_minlp(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    strategy: str = "auto",
    engine: str = "auto",
    atlas: ScalarValueAtlas | None = None,
    tau_target: float = 1e-9,
    input_box: float = DEFAULT_INPUT_BOX,
) -> MinlpSolution:
    """Full mixed-integer optimum with continuous input recovery.

    ``strategy`` picks enumeration for small integer spaces and branch
    and bound above ``ENUMERATION_LIMIT`` binary decisions when left on
    ``auto``.  Ties between integer profiles resolve to the
    lexicographically smaller profile.
    """
    n_bits = spec.horizon * spec.n_i
    if strategy == "auto":
        strategy = "enumeration" if n_bits <= ENUMERATION_LIMIT else "bnb"
    if strategy == "enumeration":
        value, bits, subproblems = _enumerate(spec, s0, theta, engine, atlas, tau_target)
    elif strategy == "bnb":
        value, bits, subproblems = _branch_and_bound(
            spec, s0, theta, engine, atlas, tau_target, input_box
        )
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    report = _pinned_report(spec, s0, theta, bits, tau_target)
    if not report.solved:
        raise RuntimeError(f"solve at the optimal profile failed: {report.message}")
    nlp = PinnedProfileNlp(spec, s0, theta, np.asarray(bits, dtype=float).reshape(-1, 1))
    inputs = np.stack([report.point.y[nlp.iu(k)] for k in range(spec.horizon)])
    return MinlpSolution(value, np.asarray(bits, dtype=np.int64), inputs, strategy, subproblems)


def compare_enumeration_bnb(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    engine: str = "auto",
    atlas: ScalarValueAtlas | None = None,
    tau_target: float = 1e-9,
    input_box: float = DEFAULT_INPUT_BOX,
    tol: float = 1e-8,
) -> StrategyComparison:
    """Run enumeration and branch-and-bound and report whether they agree."""
    engine = _resolve_engine(spec, engine)
    if engine == "atlas" and atlas is None:
        atlas = ScalarValueAtlas(spec, theta)
    ev, ep, en = _enumerate(spec, s0, theta, engine, atlas, tau_target)
    bv, bp, bn = _branch_and_bound(spec, s0, theta, engine, atlas, tau_target, input_box)
    gap = abs(ev - bv)
    return StrategyComparison(ev, bv, ep, bp, en, bn, gap, bool(gap <= tol))


def _enumerate(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    engine: str,
    atlas: ScalarValueAtlas | None,
    tau_target: float,
) -> tuple[float, np.ndarray, int]:
    engine = _resolve_engine(spec, engine)
    if engine == "atlas":
        atlas = atlas or ScalarValueAtlas(spec, theta)
        profiles, values = atlas.all_profile_values(s0)
        idx = int(np.argmin(values))
        return float(values[idx]), profiles[idx], len(values)
    best_value = np.inf
    best_bits: np.ndarray | None = None
    warm: PrimalDualPoint | None = None
    n = 0
    for row in product((0, 1), repeat=spec.horizon):
        bits = np.array(row, dtype=np.int64)
        report = _pinned_report(spec, s0, theta, bits, tau_target, warm)
        n += 1
        if report.status == "max_iter" and warm is not None:
            report = _pinned_report(spec, s0, theta, bits, tau_target)
        if report.status == "max_iter":
            raise RuntimeError(f"pinned solve did not converge: {report.message}")
        if not report.solved:
            continue
        warm = report.point
        if report.objective < best_value:
            best_value = report.objective
            best_bits = bits
    if best_bits is None:
        raise ValueError("no feasible integer profile")
    return best_value, best_bits, n

# -- branch and bound --------------------------------------------------


@dataclass(frozen=True)
class _NodeQp:
    """State-condensed relaxation of one search node.

    Variables are [inputs, slacks, free switches, free products]; fixed
    stages have their switch substituted into the state recursion, so a
    node shrinks as decisions accumulate.  Solved exactly by the primal
    active-set method, which makes the node bound the true relaxation
    minimum up to linear-algebra precision.
    """

    h: np.ndarray
    g: np.ndarray
    c_ineq: np.ndarray
    b_ineq: np.ndarray
    const: float
    free: tuple[int, ...]
    off_i: int
    off_z: int

    def objective(self, v: np.ndarray) -> float:
        return float(0.5 * v @ self.h @ v + self.g @ v + self.const)


def _condense_node(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    fixed: tuple[int | None, ...],
    input_box: float,
) -> _NodeQp:
    """Box relaxation of the remaining integer decisions.

    Undecided switches live in [0, 1] and their input product is boxed
    by McCormick envelopes over ``|u| <= input_box``; the bound is valid
    for every completion whose optimal inputs respect that box, so the
    box must be generous for the state range in play.
    """
    if not _atlas_applies(spec):
        raise ValueError("the relaxation covers the scalar problem layout only")
    n = spec.horizon
    if len(fixed) != n:
        raise ValueError("fixed must assign one entry per stage")
    x_ref, u_ref, switch_cost, penalty, bias = (float(v) for v in np.asarray(theta))
    box = float(input_box)
    free = tuple(k for k in range(n) if fixed[k] is None)
    nf = len(free)
    off_s, off_i, off_z = n, 2 * n, 2 * n + nf
    nv = off_z + nf
    zpos = {k: idx for idx, k in enumerate(free)}

    # states as affine maps of the decision vector
    t_rows = np.zeros((n + 1, nv))
    t_off = np.empty(n + 1)
    t_off[0] = float(s0)
    for k in range(n):
        t_rows[k + 1] = t_rows[k]
        t_off[k + 1] = t_off[k] + bias
        if fixed[k] is None:
            t_rows[k + 1, off_z + zpos[k]] += 1.0
        elif fixed[k]:
            t_rows[k + 1, k] += 1.0

    h = np.zeros((nv, nv))
    g = np.zeros(nv)
    const = switch_cost * sum(v for v in fixed if v is not None)
    weights = [1.0] * n + [spec.terminal_weight]
    for k in range(n + 1):
        err = t_off[k] - x_ref
        h += weights[k] * np.outer(t_rows[k], t_rows[k])
        g += weights[k] * err * t_rows[k]
        const += 0.5 * weights[k] * err * err
    for k in range(n):
        h[k, k] += 1.0
        g[k] -= u_ref
        const += 0.5 * u_ref * u_ref
        g[off_s + k] += penalty
    for pos in range(nf):
        g[off_i + pos] += switch_cost

    n_rows = 5 * n + 6 * nf
    c = np.zeros((n_rows, nv))
    b = np.zeros(n_rows)
    lo, hi = spec.band.lo, spec.band.hi
    for k in range(n):
        c[3 * k] = t_rows[k]
        c[3 * k, off_s + k] = -1.0
        b[3 * k] = hi - t_off[k]
        c[3 * k + 1] = -t_rows[k]
        c[3 * k + 1, off_s + k] = -1.0
        b[3 * k + 1] = t_off[k] - lo
        c[3 * k + 2, off_s + k] = -1.0
        c[3 * n + 2 * k, k] = 1.0
        b[3 * n + 2 * k] = box
        c[3 * n + 2 * k + 1, k] = -1.0
        b[3 * n + 2 * k + 1] = box
    for pos, k in enumerate(free):
        base = 5 * n + 6 * pos
        iv, zv = off_i + pos, off_z + pos
        c[base, iv] = -1.0
        c[base + 1, iv] = 1.0
        b[base + 1] = 1.0
        c[base + 2, zv] = -1.0
        c[base + 2, iv] = -box
        c[base + 3, zv] = 1.0
        c[base + 3, iv] = -box
        c[base + 4, k] = 1.0
        c[base + 4, iv] = box
        c[base + 4, zv] = -1.0
        b[base + 4] = box
        c[base + 5, zv] = 1.0
        c[base + 5, k] = -1.0
        c[base + 5, iv] = box
        b[base + 5] = box

    return _NodeQp(h, g, c, b, float(const), free, off_i, off_z)


def _node_vertex(qp: _NodeQp, spec: OcpSpec, s0: float, bias: float) -> tuple[np.ndarray, list[int]]:
    """Feasible start pinning every zero-curvature direction.

    Inputs and products start at zero, switches at their lower bound,
    and each slack sits exactly on its worst band row, so the working
    set renders the first reduced system nonsingular.
    """
    n = spec.horizon
    v0 = np.zeros(qp.off_z + len(qp.free))
    working: list[int] = []
    x = float(s0)
    for k in range(n):
        v0[n + k] = _pin_slack(working, spec, k, x)
        x += bias
    for pos in range(len(qp.free)):
        working.append(5 * n + 6 * pos)
        working.append(5 * n + 6 * pos + 2)
    return v0, working


def _pin_slack(working: list[int], spec: OcpSpec, k: int, x: float) -> float:
    """Slack value sitting exactly on stage ``k``'s worst band row."""
    candidates = (x - spec.band.hi, spec.band.lo - x, 0.0)
    row = int(np.argmax(candidates))
    working.append(3 * k + row)
    return candidates[row]


def _warm_node(
    qp: _NodeQp,
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    fixed: tuple[int | None, ...],
    parent_v: np.ndarray,
    parent_work: list[int],
    parent_free: tuple[int, ...],
) -> tuple[np.ndarray, list[int]]:
    """Child start from the parent's solution and working set.

    Inputs, kept switches, and kept products carry over, so the box and
    McCormick rows keep their activity; the states move, so slacks are
    re-floored onto their worst band rows and the parent's band choices
    are discarded.
    """
    n = spec.horizon
    bias = float(theta[4])
    keep = [pos for pos, k in enumerate(parent_free) if k in qp.free]
    v0 = np.zeros(qp.off_z + len(qp.free))
    v0[:n] = parent_v[:n]
    for new, old in enumerate(keep):
        v0[qp.off_i + new] = parent_v[2 * n + old]
        v0[qp.off_z + new] = parent_v[2 * n + len(parent_free) + old]

    working: list[int] = []
    x = float(s0)
    zpos = {k: idx for idx, k in enumerate(qp.free)}
    for k in range(n):
        v0[n + k] = _pin_slack(working, spec, k, x)
        if fixed[k] is None:
            x += v0[qp.off_z + zpos[k]] + bias
        else:
            x += fixed[k] * v0[k] + bias

    remap = {old: new for new, old in enumerate(keep)}
    for row in parent_work:
        if 3 * n <= row < 5 * n:
            working.append(row)
        elif row >= 5 * n:
            old, sub = divmod(row - 5 * n, 6)
            new = remap.get(old)
            if new is not None:
                working.append(5 * n + 6 * new + sub)
    return v0, working


def _branch_and_bound(
    spec: OcpSpec,
    s0: float,
    theta: np.ndarray,
    engine: str,
    atlas: ScalarValueAtlas | None,
    tau_target: float,
    input_box: float,
    prune_margin: float = 1e-9,
    max_nodes: int = 100000,
) -> tuple[float, np.ndarray, int]:
    """Best-first search with exact relaxation bounds.

    Node relaxations are solved to optimality, so an integral node value
    is the exact cost of its rounded profile and the subtree is closed;
    fractional nodes branch on the switch closest to one half.
    """
    engine = _resolve_engine(spec, engine)
    if engine == "atlas" and atlas is None:
        atlas = ScalarValueAtlas(spec, theta)
    n = spec.horizon
    bias = float(theta[4])
    leaf_cache: dict[tuple[int, ...], float] = {}

    def leaf_value(bits: tuple[int, ...]) -> float:
        cached = leaf_cache.get(bits)
        if cached is None:
            if engine == "atlas":
                cached = float(atlas.pinned_value(s0, bits))
            else:
                report = _pinned_report(spec, s0, theta, np.array(bits), tau_target)
                if not report.solved:
                    raise RuntimeError(f"leaf solve failed: {report.message}")
                cached = report.objective
            leaf_cache[bits] = cached
        return cached

    incumbent = np.inf
    incumbent_bits: tuple[int, ...] | None = None

    def offer(bits: tuple[int, ...]) -> None:
        nonlocal incumbent, incumbent_bits
        value = leaf_value(bits)
        if value < incumbent - 1e-12 or (
            abs(value - incumbent) <= 1e-12
            and (incumbent_bits is None or bits < incumbent_bits)
        ):
            incumbent = value
            incumbent_bits = bits

    def solve_node(fixed, parent=None):
        qp = _condense_node(spec, s0, theta, fixed, input_box)
        if parent is not None:
            v0, working = _warm_node(qp, spec, s0, theta, fixed, *parent)
            try:
                v, work, _ = active_set_qp(qp, v0, working)
            except (RuntimeError, ValueError):
                parent = None
        if parent is None:
            v0, working = _node_vertex(qp, spec, s0, bias)
            v, work, _ = active_set_qp(qp, v0, working)
        return qp.objective(v), qp.free, (v, work, qp.free)

    root_fixed = (None,) * n
    bound, free, sol = solve_node(root_fixed)
    nodes = 1
    order = count()
    heap = [(bound, next(order), root_fixed, free, sol)]
    while heap:
        bound, _, fixed, free, sol = heapq.heappop(heap)
        if bound >= incumbent - prune_margin:
            break
        i_vals = sol[0][2 * n : 2 * n + len(free)]
        rounded = np.rint(i_vals).astype(np.int64)
        bits = list(fixed)
        for pos, k in enumerate(free):
            bits[k] = int(rounded[pos])
        offer(tuple(bits))
        if np.max(np.abs(i_vals - rounded), initial=0.0) <= 1e-9:
            # exact relaxation optimum at an integer point: subtree solved
            continue
        frac_pos = int(np.argmax(0.5 - np.abs(i_vals - 0.5)))
        stage = free[frac_pos]
        for v in (0, 1):
            child_fixed = tuple(v if k == stage else fixed[k] for k in range(n))
            if all(bit is not None for bit in child_fixed):
                offer(tuple(child_fixed))
                continue
            child_bound, child_free, child_sol = solve_node(child_fixed, sol)
            nodes += 1
            if nodes > max_nodes:
                raise RuntimeError("branch and bound exceeded the node budget")
            if child_bound < incumbent - prune_margin:
                heapq.heappush(
                    heap,
                    (child_bound, next(order), child_fixed, child_free, child_sol),
                )
    if incumbent_bits is None:
        raise ValueError("no feasible integer profile")
    return float(incumbent), np.array(incumbent_bits, dtype=np.int64), nodes
