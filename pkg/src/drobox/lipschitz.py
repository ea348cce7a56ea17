"""Trace bounds, Lipschitz constant, and the safe discretization step.

The discretized dual model enforces its lattice rows with a safety margin
L * delta * sqrt(m).  L bounds the Lipschitz constant (Euclidean norm) of
the moment part q(t) = -<block(t), Y1> + <outer(t), Y2> over the domain,
uniformly over dual matrices whose traces respect the bounds computed
here.  The trace bounds come from the dual row at the mean together with
the threshold row; their denominators are the smallest eigenvalues of the
moment matrices at the mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from drobox.model import AmbiguitySpec, FixedBoxes, SimpleFunctionSpec, VariableBoxes

SYMMETRY_RTOL = 1e-10


@dataclass(frozen=True)
class LipschitzCertificate:
    """Everything needed to justify one discretization step choice."""

    tr_y1_max: float
    tr_y2_max: float
    L: float
    delta_max: float
    lambda_min_block: float
    lambda_min_sigma: float
    feasible_step_exists: bool = True


def sym_min_eig(a: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix.

    Raises ValueError when the input is not symmetric to within a 1e-10
    relative tolerance; symmetrizing silently would hide modelling bugs.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("need a square matrix")
    scale = max(1.0, float(np.max(np.abs(a))))
    if float(np.max(np.abs(a - a.T))) > SYMMETRY_RTOL * scale:
        raise ValueError("matrix is not symmetric")
    return float(np.min(np.linalg.eigvalsh(a)))


def _max_height_sum_at_mean(spec: AmbiguitySpec, fn: SimpleFunctionSpec) -> float:
    """Largest value the simple function can take at the mean.

    Variable boxes: heights are fixed positive data and every box may cover
    the mean, so the sum of positive heights.  Fixed boxes: the indicators
    at the mean are constants; with pinned heights this is a plain
    evaluation, otherwise one LP over the height polytope.
    """
    if isinstance(fn.mode, VariableBoxes):
        return float(np.sum(np.maximum(fn.heights, 0.0)))

    mode = fn.mode
    at_mean = np.array([1.0 if box.contains(spec.mu) else 0.0 for box in mode.boxes])
    if mode.heights_pinned:
        return float(at_mean @ fn.heights)

    a_ub, b_ub, a_eq, b_eq = [], [], [], []
    for row in mode.constraints:
        if row.sense == "<=":
            a_ub.append(row.coeffs)
            b_ub.append(row.rhs)
        elif row.sense == ">=":
            a_ub.append(-row.coeffs)
            b_ub.append(-row.rhs)
        else:
            a_eq.append(row.coeffs)
            b_eq.append(row.rhs)
    res = linprog(
        -at_mean,
        A_ub=np.array(a_ub) if a_ub else None,
        b_ub=np.array(b_ub) if b_ub else None,
        A_eq=np.array(a_eq) if a_eq else None,
        b_eq=np.array(b_eq) if b_eq else None,
        bounds=[(None, None)] * fn.k,
        method="highs",
    )
    if res.status == 3:
        raise ValueError("height polytope leaves the value at the mean unbounded")
    if res.status != 0:
        raise ValueError("height polytope is empty or the LP failed: %s" % res.message)
    return float(-res.fun)


def trace_bounds(spec: AmbiguitySpec, fn: SimpleFunctionSpec) -> tuple[float, float]:
    """Upper bounds on Tr(Y1) and Tr(Y2) for feasible dual matrices.

    Returns (tr_y1_max, tr_y2_max), unrounded:

        tr_y1_max = (S + |b|) / lambda_min(blockdiag(Sigma, 1))
        tr_y2_max = 1 / (eps_sigma * lambda_min(Sigma))

    with S the largest value of the simple function at the mean.  Raises
    ValueError when either eigenvalue is nonpositive.
    """
    lam_sigma = sym_min_eig(spec.sigma)
    block = np.zeros((spec.m + 1, spec.m + 1))
    block[: spec.m, : spec.m] = spec.sigma
    block[spec.m, spec.m] = 1.0
    lam_block = sym_min_eig(block)
    if lam_sigma <= 0.0 or lam_block <= 0.0:
        raise ValueError("covariance must be strictly positive definite")
    if spec.eps_sigma <= 0.0:
        raise ValueError("eps_sigma must be positive")
    s_max = _max_height_sum_at_mean(spec, fn)
    numerator = max(s_max + abs(spec.b), 0.0)
    return numerator / lam_block, 1.0 / (spec.eps_sigma * lam_sigma)


def lipschitz_constant(spec: AmbiguitySpec, tr_y1_max: float, tr_y2_max: float) -> float:
    """Lipschitz bound for the moment part of the dual integrand.

        L = 2 * tr_y1_max + (M - min_j mu_j) * tr_y2_max * 2 * sqrt(m)

    Requires min_j mu_j <= M / 2 (the domain reaches far enough past the
    mean on some axis for this radius bound to hold).
    """
    m, M = spec.m, spec.edge
    mu_min = float(np.min(spec.mu))
    if mu_min > M / 2.0:
        raise ValueError("need min_j mu_j <= edge / 2")
    return 2.0 * tr_y1_max + (M - mu_min) * tr_y2_max * 2.0 * math.sqrt(m)


def max_safe_step(spec: AmbiguitySpec, L: float) -> float:
    """Largest step delta with guaranteed-feasible margin, (1 - b) / (L sqrt(m)).

    Returns 0.0 when b >= 1 (no margin is available at any step) and +inf
    when L == 0 (the moment part is constant).
    """
    if L < 0.0:
        raise ValueError("L must be nonnegative")
    if spec.b >= 1.0:
        return 0.0
    if L == 0.0:
        return math.inf
    return (1.0 - spec.b) / (L * math.sqrt(spec.m))


def safety_margin(L: float, delta: float, m: int) -> float:
    """The lattice-row margin L * delta * sqrt(m)."""
    return L * delta * math.sqrt(m)


def lipschitz_certificate(spec: AmbiguitySpec, fn: SimpleFunctionSpec) -> LipschitzCertificate:
    """Compute the full certificate for one instance."""
    tr1, tr2 = trace_bounds(spec, fn)
    L = lipschitz_constant(spec, tr1, tr2)
    delta_max = max_safe_step(spec, L)
    block = np.zeros((spec.m + 1, spec.m + 1))
    block[: spec.m, : spec.m] = spec.sigma
    block[spec.m, spec.m] = 1.0
    return LipschitzCertificate(
        tr_y1_max=tr1,
        tr_y2_max=tr2,
        L=L,
        delta_max=delta_max,
        lambda_min_block=sym_min_eig(block),
        lambda_min_sigma=sym_min_eig(spec.sigma),
        feasible_step_exists=spec.b < 1.0,
    )
