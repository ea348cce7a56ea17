"""Search drivers for the variable-box models built by assemble_case2.

Two independent routes to the same answer.  solve_bnb runs branch and
bound on the box membership binaries: every node solves the SDP
relaxation for a bound, a rounding heuristic probes integral candidates,
and jump binaries are never branched on (once both endpoints of a lattice
step are decided, the jump pair follows by propagation; equal endpoints
take the no-jump pair, which is feasible whenever the wasteful double
jump is).  enumerate_boxes is an exact oracle for tiny instances: it
walks lattice-aligned candidate boxes in nondecreasing bound order,
discards candidates that a cached adversary measure already rules out,
and solves the remaining fixed SDPs honestly; the first candidate whose
true objective beats every open bound is optimal.  run_search dispatches
on SearchOptions.mode and cross-checks the two routes in "both" mode.

Progress goes to the drobox.search logger as machine-parseable key=value
lines: node=, bound=, incumbent=, gap= (all in minimization scale).
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import time
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .assemble import AssembledModel, canonical_assignment, decode_box
from .certify import adversary_problem
from .model import BoxRegion, Decision, DualSolution, WholeDomain
from .sdp import SdpSolution, SolveOptions, solve_sdp

LOG = logging.getLogger("drobox.search")

_INTEGRAL_TOL = 1e-6


@dataclass(frozen=True)
class SearchOptions:
    """Knobs shared by both search drivers.

    node_limit counts SDP relaxation solves in solve_bnb and honest
    candidate solves in enumerate_boxes.  gap_tol is an absolute gap on
    the objective; 0 demands a full proof.
    """

    mode: str = "bnb"
    node_limit: int = 100_000
    time_limit: float = 3600.0
    gap_tol: float = 0.0
    branching: str = "line-guided"

    def __post_init__(self):
        if self.mode not in ("bnb", "enumerate", "both"):
            raise ValueError("mode must be bnb, enumerate or both")
        if self.branching not in ("most-fractional", "line-guided"):
            raise ValueError("branching must be most-fractional or line-guided")
        if self.gap_tol < 0:
            raise ValueError("gap_tol must be >= 0")
        if self.node_limit < 1:
            raise ValueError("node_limit must be >= 1")
        if self.time_limit <= 0:
            raise ValueError("time_limit must be positive")


@dataclass(frozen=True)
class Incumbent:
    """Best solution a search run produced, plus how much it proved.

    objective follows the model's stated sense; for an infeasible model it
    is +inf when minimizing and -inf when maximizing.  boxes contains one
    BoxRegion per simple-function box (the width-0 origin sentinel stands
    in for an unused box).  dual_vars holds the (Y1, Y2, y) values of the
    fixed SDP that certified the incumbent; they satisfy every assembled
    row with the incumbent binaries substituted.  proof is "optimal",
    "gap-limit" or "resource-limit"; status is "solved",
    "infeasible-model" or "unknown" (resource limit hit before any
    conclusion).
    """

    objective: float
    boxes: tuple
    dual_vars: Optional[DualSolution]
    node_count: int
    wall_time: float
    proof: str
    status: str


def root_relaxation(model: AssembledModel,
                    options: Optional[SolveOptions] = None) -> SdpSolution:
    """Solve the model with every binary relaxed to [0, 1]."""
    return solve_sdp(model.program.relax_binaries(), options)


# ---------------------------------------------------------------------------
# Shared helpers


def _require_variable(model: AssembledModel):
    if model.case != "variable":
        raise TypeError("search drivers need a variable-mode model")


def _bt_names(model: AssembledModel) -> list:
    return ["bt[%d,%d]" % (i, f)
            for i in range(model.fn.k) for f in range(model.lattice.n_points)]


def _propagate_jumps(model: AssembledModel, bt_fixed: dict) -> dict:
    """Jump binaries implied by decided membership pairs.

    For each lattice step the jump row forces dm - dp = next - here, with
    "next" equal to 0 past the upper boundary.  Whenever both endpoints
    are fixed the difference pins (dm, dp) up to the wasteful (1, 1)
    choice at equal endpoints; that choice burns per-line jump budget and
    tightens nothing, so the propagated pair is always the sparse one.
    """
    lattice = model.lattice
    out = {}
    for i in range(model.fn.k):
        grid = np.full(lattice.n_points, np.nan)
        for f in range(lattice.n_points):
            v = bt_fixed.get("bt[%d,%d]" % (i, f))
            if v is not None:
                grid[f] = v
        grid = grid.reshape(lattice.shape)
        for j in range(lattice.dim):
            pad_shape = list(lattice.shape)
            pad_shape[j] = 1
            shifted = np.concatenate(
                [np.take(grid, range(1, lattice.n_axis), axis=j), np.zeros(pad_shape)],
                axis=j)
            diff = (shifted - grid).reshape(-1)
            for f in np.nonzero(~np.isnan(diff))[0]:
                out["dm[%d,%d,%d]" % (i, j, f)] = 1.0 if diff[f] > 0.5 else 0.0
                out["dp[%d,%d,%d]" % (i, j, f)] = 1.0 if diff[f] < -0.5 else 0.0
    return out


def _duals_from(sol: SdpSolution, model: AssembledModel) -> DualSolution:
    n_conf = len(model.spec.confidence_sets)
    return DualSolution(
        Y1=sol.value("Y1"),
        Y2=sol.value("Y2"),
        y=np.array([sol.value("y[%d]" % i) for i in range(n_conf)]),
        spec=model.spec,
    )


def _decode_quiet(values: dict, model: AssembledModel) -> tuple:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return tuple(decode_box(values, model))


def _quantum_ceil(value: float, quantum) -> float:
    if quantum is None or not math.isfinite(value):
        return value
    return math.ceil(value / quantum - 1e-9) * quantum


class _BestCell:
    """Monotone incumbent store in minimization scale."""

    def __init__(self):
        self.scaled = math.inf
        self.objective = math.nan
        self.boxes = ()
        self.duals = None

    @property
    def have(self) -> bool:
        return math.isfinite(self.scaled)

    def offer(self, scaled: float, objective: float, boxes: tuple,
              duals: DualSolution) -> bool:
        if scaled >= self.scaled - 1e-12:
            return False
        self.scaled = scaled
        self.objective = objective
        self.boxes = boxes
        self.duals = duals
        return True


# ---------------------------------------------------------------------------
# Branch and bound


def solve_bnb(model: AssembledModel, opts: Optional[SearchOptions] = None) -> Incumbent:
    """Branch-and-bound over membership binaries with SDP node relaxations.

    Node selection is best-bound with depth-first plunging; ties break on
    insertion order, which follows lattice index order.  Only bt variables
    are branched; jump binaries come from _propagate_jumps.  Limits never
    raise: the incumbent is returned with proof "resource-limit".
    """
    _require_variable(model)
    opts = opts or SearchOptions()
    t0 = time.perf_counter()
    program = model.program
    sgn = 1.0 if program.obj_sense == "min" else -1.0
    quantum = model.objective_quantum
    bt_names = _bt_names(model)
    grid_slack = (quantum - 1e-9) if quantum else 1e-12

    best = _BestCell()
    node_count = 0
    hit_limit = False
    gap_pruned = [False]
    counter = itertools.count()
    heap = []  # (scaled bound, seq, fixed bt dict)
    stack = []  # plunge pile, same tuples, LIFO
    tried = set()

    def global_bound(extra: float) -> float:
        vals = [extra]
        if heap:
            vals.append(heap[0][0])
        vals.extend(entry[0] for entry in stack)
        return min(vals)

    def log_progress(level: int, extra_bound: float):
        bound = global_bound(extra_bound)
        inc = best.scaled if best.have else math.inf
        LOG.log(level, "node=%d bound=%.9g incumbent=%.9g gap=%.9g",
                node_count, bound, inc, max(inc - bound, 0.0))

    def try_assignment(bt_values: dict) -> bool:
        """Fix a full binary assignment and offer the honest solve."""
        key = frozenset(name for name in bt_names if bt_values[name] > 0.5)
        if key in tried:
            return False
        tried.add(key)
        assign = dict(bt_values)
        assign.update(_propagate_jumps(model, bt_values))
        sol = solve_sdp(program.fix_binaries(assign))
        if sol.status != "optimal":
            return False
        accepted = best.offer(sgn * sol.objective, sol.objective,
                              _decode_quiet(assign, model), _duals_from(sol, model))
        if accepted:
            log_progress(logging.INFO, math.inf)
        return accepted

    def membership(fixed: dict, values: dict, name: str) -> float:
        if name in fixed:
            return fixed[name]
        return float(np.clip(values.get(name, 0.0), 0.0, 1.0))

    def round_to_boxes(fixed: dict, values: dict, theta: float) -> dict:
        """Bounding rectangle of each box's relaxed support above theta."""
        lattice = model.lattice
        out = {}
        for i in range(model.fn.k):
            member = np.array([membership(fixed, values, "bt[%d,%d]" % (i, f))
                               for f in range(lattice.n_points)])
            sel = np.nonzero(member > theta)[0]
            chosen = np.zeros(lattice.n_points, dtype=bool)
            if sel.size:
                multis = np.array(np.unravel_index(sel, lattice.shape)).T
                lo, hi = multis.min(axis=0), multis.max(axis=0)
                all_multis = np.array(
                    np.unravel_index(np.arange(lattice.n_points), lattice.shape)).T
                chosen = np.all((all_multis >= lo) & (all_multis <= hi), axis=1)
            for f in range(lattice.n_points):
                out["bt[%d,%d]" % (i, f)] = 1.0 if chosen[f] else 0.0
        return out

    def prunable(bound: float) -> bool:
        if not best.have:
            return False
        if bound >= best.scaled - grid_slack:
            return True
        if bound >= best.scaled - opts.gap_tol:
            gap_pruned[0] = True
            return True
        return False

    def pick_branch(fixed: dict, values: dict):
        fracs = {}
        for name in bt_names:
            if name in fixed:
                continue
            v = membership(fixed, values, name)
            frac = min(v, 1.0 - v)
            if frac > _INTEGRAL_TOL:
                fracs[name] = frac
        if not fracs:
            return None
        if opts.branching == "most-fractional":
            return max(sorted(fracs), key=lambda n: fracs[n])
        lattice = model.lattice
        best_line, best_mass = None, 0.0
        for i in range(model.fn.k):
            for j in range(lattice.dim):
                for line in lattice.lines(j):
                    members = ["bt[%d,%d]" % (i, f) for f in line]
                    mass = sum(fracs.get(n, 0.0) for n in members)
                    if mass > best_mass + 1e-15:
                        best_mass = mass
                        best_line = members
        return max(best_line, key=lambda n: (fracs.get(n, 0.0), -bt_names.index(n)))

    # A cheap honest start: all boxes spanning the whole domain.
    try_assignment({name: 1.0 for name in bt_names})

    heapq.heappush(heap, (-math.inf, next(counter), {}))
    while heap or stack:
        if node_count >= opts.node_limit or time.perf_counter() - t0 > opts.time_limit:
            hit_limit = True
            break
        entry = stack.pop() if stack else heapq.heappop(heap)
        bound0, _, fixed = entry
        if prunable(bound0):
            continue
        node_count += 1
        derived = _propagate_jumps(model, fixed)
        sol = solve_sdp(program.relax_binaries({**fixed, **derived}))
        if sol.status == "infeasible":
            log_progress(logging.DEBUG, math.inf)
            continue
        if sol.status == "optimal":
            bound = max(bound0, _quantum_ceil(sgn * sol.objective, quantum))
            values = sol.primal
        else:
            bound = bound0  # keep the inherited bound; explore blind
            values = None
        if prunable(bound):
            log_progress(logging.DEBUG, math.inf)
            continue
        unfixed = [n for n in bt_names if n not in fixed]
        if values is not None:
            for theta in (0.5, 1e-3):
                try_assignment(round_to_boxes(fixed, values, theta))
            if prunable(bound):
                log_progress(logging.DEBUG, math.inf)
                continue
            branch_var = pick_branch(fixed, values)
            if branch_var is None:
                rounded = {n: (fixed[n] if n in fixed else
                               (1.0 if membership(fixed, values, n) >= 0.5 else 0.0))
                           for n in bt_names}
                try_assignment(rounded)
                if not (best.have and best.scaled <= bound + 1e-6) and unfixed:
                    branch_var = unfixed[0]  # integral node failed its honest solve
                else:
                    log_progress(logging.DEBUG, bound)
                    continue
            prefer = 1.0 if membership(fixed, values, branch_var) >= 0.5 else 0.0
        else:
            if not unfixed:
                log_progress(logging.DEBUG, math.inf)
                continue
            branch_var = unfixed[0]
            prefer = 1.0
        other = dict(fixed)
        other[branch_var] = 1.0 - prefer
        heapq.heappush(heap, (bound, next(counter), other))
        plunge = dict(fixed)
        plunge[branch_var] = prefer
        stack.append((bound, next(counter), plunge))
        log_progress(logging.DEBUG, bound)

    wall = time.perf_counter() - t0
    if best.have:
        if hit_limit and (heap or stack):
            proof = "resource-limit"
        elif gap_pruned[0]:
            proof = "gap-limit"
        else:
            proof = "optimal"
        return Incumbent(best.objective, best.boxes, best.duals,
                         node_count, wall, proof, "solved")
    if hit_limit:
        return Incumbent(sgn * math.inf, (), None, node_count, wall,
                         "resource-limit", "unknown")
    return Incumbent(sgn * math.inf, (), None, node_count, wall,
                     "optimal", "infeasible-model")


# ---------------------------------------------------------------------------
# Exact enumeration for tiny instances


class _MeasurePool:
    """Adversary measures that prune candidate boxes without a solve.

    Summing the assembled lattice rows with the weights of any measure in
    the discrete ambiguity family, and dropping the PSD and sign terms,
    shows every feasible candidate must give the measure expected value
    at least b + margin.  Candidates falling short for any cached measure
    are infeasible.  The point-mass variant precomputes which lattice
    atoms are feasible measures on their own; those checks are free.
    """

    def __init__(self, model: AssembledModel):
        self.model = model
        spec = model.spec
        lattice = model.lattice
        self.heights = np.asarray(model.fn.heights, dtype=float)
        self.threshold = spec.b + model.margin - 1e-7
        d = lattice.points - spec.mu
        dist = np.einsum("ni,ij,nj->n", d, np.linalg.inv(spec.sigma), d)
        ok = dist <= min(spec.eps_mu, spec.eps_sigma) + 1e-12
        for cs in spec.confidence_sets:
            if isinstance(cs.region, WholeDomain):
                continue
            inside = np.asarray(cs.region.contains(lattice.points), dtype=bool)
            if cs.eps > 0:
                ok &= inside
            elif -cs.eps < 1.0:
                ok &= ~inside
        self.atoms = lattice.points[ok]
        self.prefix = []

    def point_mass_ok(self, boxes) -> bool:
        if self.atoms.shape[0] == 0:
            return True
        total = np.zeros(self.atoms.shape[0])
        for h, box in zip(self.heights, boxes):
            if box is not None:
                total = total + h * box.contains(self.atoms)
        return bool(np.all(total >= self.threshold))

    def add(self, weights: np.ndarray):
        lattice = self.model.lattice
        grid = np.asarray(weights, dtype=float).reshape(lattice.shape)
        for ax in range(lattice.dim):
            grid = np.cumsum(grid, axis=ax)
        self.prefix.append(np.pad(grid, [(1, 0)] * lattice.dim))

    def _mass(self, pad: np.ndarray, box: BoxRegion) -> float:
        lattice = self.model.lattice
        lo = [lattice.index_of_value(v) for v in box.lower]
        hi = [lattice.index_of_value(v) for v in box.upper]
        total = 0.0
        for corner in itertools.product(*[((l, -1.0), (h + 1, 1.0))
                                          for l, h in zip(lo, hi)]):
            idx = tuple(c[0] for c in corner)
            sign = math.prod(c[1] for c in corner)
            total += sign * pad[idx]
        return total

    def ruled_out(self, boxes) -> bool:
        for pad in self.prefix:
            value = 0.0
            for h, box in zip(self.heights, boxes):
                if box is not None:
                    value += h * self._mass(pad, box)
            if value < self.threshold:
                return True
        return False


def _candidate_stream(model: AssembledModel, i: int, sgn: float) -> list:
    """All candidate boxes for one index, sorted by optimistic bound.

    Entries are (scaled bound, code); code is None for the empty box or a
    (lo_multi, hi_multi) pair of per-axis index tuples.  For the width-sum
    objective the bound is exact.  Under an explicit corner objective the
    empty box leaves its corner variables anywhere in the feasible
    triangle 0 <= lo <= hi <= edge, so its bound takes the best corner.
    """
    lattice = model.lattice
    mode = model.fn.mode
    axis = lattice.axis
    entries = []
    if mode.width_sum:
        entries.append((0.0, None))

        def bound_box(lo, hi):
            return float(sum(axis[b] - axis[a] for a, b in zip(lo, hi)))
    else:
        cm = np.atleast_2d(mode.c_minus)[i]
        cp = np.atleast_2d(mode.c_plus)[i]
        edge = lattice.edge
        empty = sum(min(sgn * (cm[j] * lo + cp[j] * hi)
                        for lo, hi in ((0.0, 0.0), (0.0, edge), (edge, edge)))
                    for j in range(lattice.dim))
        entries.append((float(empty), None))

        def bound_box(lo, hi):
            return sgn * float(sum(cm[j] * axis[a] + cp[j] * axis[b]
                                   for j, (a, b) in enumerate(zip(lo, hi))))

    axis_pairs = [(a, b) for a in range(lattice.n_axis) for b in range(a, lattice.n_axis)]
    for combo in itertools.product(axis_pairs, repeat=lattice.dim):
        lo = tuple(a for a, _ in combo)
        hi = tuple(b for _, b in combo)
        entries.append((bound_box(lo, hi), (lo, hi)))
    entries.sort(key=lambda e: (e[0], e[1] is not None, e[1] or ()))
    return entries


def _box_of_code(lattice, code):
    if code is None:
        return None
    lo, hi = code
    return BoxRegion(lattice.axis[list(lo)], lattice.axis[list(hi)])


def enumerate_boxes(model: AssembledModel,
                    opts: Optional[SearchOptions] = None) -> Incumbent:
    """Exact search over lattice-aligned boxes for tiny instances.

    Candidates stream in nondecreasing bound order from a lazy product
    heap; each surviving candidate is fixed through canonical_assignment
    and solved honestly, and feasible ones re-enter the heap keyed by
    their true objective.  Popping a solved candidate therefore proves
    optimality.  Infeasible candidates donate their adversary measure to
    the screening pool.  node_count reports honest candidate solves.
    """
    _require_variable(model)
    opts = opts or SearchOptions()
    lattice = model.lattice
    k = model.fn.k
    if k > 2 or lattice.dim > 2 or lattice.n_axis > 26:
        raise ValueError(
            "instance-too-large: enumerate_boxes handles k <= 2, m <= 2 "
            "and at most 26 lattice points per axis")
    t0 = time.perf_counter()
    sgn = 1.0 if model.program.obj_sense == "min" else -1.0
    streams = [_candidate_stream(model, i, sgn) for i in range(k)]
    pool = _MeasurePool(model)
    counter = itertools.count()

    heap = []
    start = (0,) * k
    heapq.heappush(heap, (sum(streams[i][0][0] for i in range(k)), 1,
                          next(counter), start))
    seen = {start}
    solves = 0
    hit_limit = False
    unknown_best = math.inf
    best = _BestCell()

    def finish(objective, boxes, duals):
        proof = "optimal" if unknown_best >= sgn * objective - 1e-9 else "gap-limit"
        LOG.info("node=%d bound=%.9g incumbent=%.9g gap=0",
                 solves, sgn * objective, sgn * objective)
        return Incumbent(objective, boxes, duals, solves,
                         time.perf_counter() - t0, proof, "solved")

    while heap:
        if solves >= opts.node_limit or time.perf_counter() - t0 > opts.time_limit:
            hit_limit = True
            break
        bound, flag, _, payload = heapq.heappop(heap)
        if flag == 0:
            return finish(*payload)
        if best.have and bound >= best.scaled - 1e-9:
            # every open candidate is bounded below by this pop
            return finish(best.objective, best.boxes, best.duals)
        for i in range(k):
            nxt = payload[:i] + (payload[i] + 1,) + payload[i + 1:]
            if nxt[i] < len(streams[i]) and nxt not in seen:
                seen.add(nxt)
                heapq.heappush(heap, (sum(streams[i][nxt[i]][0] for i in range(k)),
                                      1, next(counter), nxt))
        codes = [streams[i][payload[i]][1] for i in range(k)]
        boxes = [_box_of_code(lattice, c) for c in codes]
        if not pool.point_mass_ok(boxes) or pool.ruled_out(boxes):
            continue
        solves += 1
        assign = canonical_assignment(boxes, model)
        sol = solve_sdp(model.program.fix_binaries(assign))
        if sol.status == "optimal":
            scaled = sgn * sol.objective
            decoded = tuple(b if b is not None
                            else BoxRegion(np.zeros(lattice.dim), np.zeros(lattice.dim))
                            for b in boxes)
            duals = _duals_from(sol, model)
            best.offer(scaled, sol.objective, decoded, duals)
            heapq.heappush(heap, (max(scaled, bound), 0, next(counter),
                                  (sol.objective, decoded, duals)))
            LOG.info("node=%d bound=%.9g incumbent=%.9g gap=%.9g",
                     solves, bound, best.scaled, max(best.scaled - bound, 0.0))
        elif sol.status == "infeasible":
            nonempty = [(h, b) for h, b in zip(model.fn.heights, boxes)
                        if b is not None]
            if nonempty:
                decision = Decision(np.array([h for h, _ in nonempty]),
                                    tuple(b for _, b in nonempty))
                _, _, weights = adversary_problem(decision, model.spec, lattice)
                if weights is not None:
                    pool.add(weights)
        else:
            unknown_best = min(unknown_best, bound)

    wall = time.perf_counter() - t0
    if best.have:
        return Incumbent(best.objective, best.boxes, best.duals, solves, wall,
                         "resource-limit", "solved")
    if hit_limit:
        return Incumbent(sgn * math.inf, (), None, solves, wall,
                         "resource-limit", "unknown")
    if math.isfinite(unknown_best):
        return Incumbent(sgn * math.inf, (), None, solves, wall,
                         "gap-limit", "unknown")
    return Incumbent(sgn * math.inf, (), None, solves, wall,
                     "optimal", "infeasible-model")


# ---------------------------------------------------------------------------
# Driver


def run_search(model: AssembledModel,
               opts: Optional[SearchOptions] = None) -> Incumbent:
    """Dispatch on opts.mode; "both" cross-checks the two drivers.

    In "both" mode the enumerate result is returned when it proves
    optimality (it pins the argmin as well as the value); a disagreement
    beyond 1e-6 between two optimal proofs raises RuntimeError.
    """
    opts = opts or SearchOptions()
    if opts.mode == "bnb":
        return solve_bnb(model, opts)
    if opts.mode == "enumerate":
        return enumerate_boxes(model, opts)
    enum_inc = enumerate_boxes(model, opts)
    bnb_inc = solve_bnb(model, opts)
    if enum_inc.proof == "optimal" and bnb_inc.proof == "optimal":
        if enum_inc.status != bnb_inc.status:
            raise RuntimeError("search drivers disagree on feasibility: "
                               "enumerate=%s bnb=%s" % (enum_inc.status, bnb_inc.status))
        if enum_inc.status == "solved":
            scale = max(1.0, abs(enum_inc.objective))
            if abs(enum_inc.objective - bnb_inc.objective) > 1e-6 * scale:
                raise RuntimeError(
                    "search drivers disagree on the optimum: enumerate=%.12g "
                    "bnb=%.12g" % (enum_inc.objective, bnb_inc.objective))
    if enum_inc.proof == "optimal":
        return enum_inc
    if bnb_inc.proof == "optimal":
        return bnb_inc
    return enum_inc
