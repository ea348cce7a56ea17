import math

import numpy as np
import pytest

from drobox.assemble import assemble_case2
from drobox.certify import (
    adversary_oracle,
    adversary_problem,
    certify_solution,
    sample_fc,
    weak_duality_gap,
)
from drobox.lipschitz import lipschitz_certificate
from drobox.model import (
    AmbiguitySpec,
    BoxRegion,
    ConfidenceSet,
    Decision,
    DualSolution,
    SimpleFunctionSpec,
    VariableBoxes,
    first_moment_block,
    lattice_points,
)
from drobox.search import SearchOptions, enumerate_boxes


@pytest.fixture
def line_spec():
    return AmbiguitySpec.with_normalization(
        edge=0.2, mu=[0.1], sigma=[[1.0]], eps_mu=0.05, eps_sigma=1.0, b=0.1
    )


def zero_dual(spec):
    m = spec.m
    return DualSolution(
        Y1=np.zeros((m + 1, m + 1)),
        Y2=np.zeros((m, m)),
        y=np.zeros(len(spec.confidence_sets)),
        spec=spec,
    )


def fallback_dual(spec):
    """y carries b on the (T, +1) normalization row, matrices zero."""
    m = spec.m
    y = np.zeros(len(spec.confidence_sets))
    y[1] = spec.b
    return DualSolution(
        Y1=np.zeros((m + 1, m + 1)), Y2=np.zeros((m, m)), y=y, spec=spec
    )


def full_box_decision(spec):
    box = BoxRegion(np.zeros(spec.m), np.full(spec.m, spec.edge))
    return Decision(heights=np.array([1.0]), boxes=[box])


# ---------------------------------------------------------------------------
# adversary oracle


def test_oracle_full_box_is_total_mass(ref_spec):
    value = adversary_oracle(
        full_box_decision(ref_spec), ref_spec, lattice_points(1.0, 2, 0.05)
    )
    assert value == pytest.approx(1.0, abs=1e-7)


def test_oracle_falsifies_tiny_box_under_huge_ambiguity():
    spec = AmbiguitySpec.with_normalization(
        edge=0.2, mu=[0.1], sigma=[[1.0]], eps_mu=100.0, eps_sigma=100.0, b=0.1
    )
    decision = Decision(
        heights=np.array([1.0]), boxes=[BoxRegion([0.1], [0.1])]
    )
    value = adversary_oracle(spec=spec, decision=decision,
                             fine_lattice=lattice_points(0.2, 1, 0.025))
    # a point mass on any other atom is admissible and escapes the box
    assert value <= 1e-7
    assert value < spec.b - 1e-6


def test_oracle_measure_is_feasible(line_spec):
    decision = Decision(
        heights=np.array([1.0]), boxes=[BoxRegion([0.05], [0.15])]
    )
    fine = lattice_points(0.2, 1, 0.025)
    status, value, weights = adversary_problem(decision, line_spec, fine)
    assert status == "optimal"
    assert weights.min() >= 0.0
    assert float(np.sum(weights)) == pytest.approx(1.0, abs=1e-7)
    blocks = sum(
        w * first_moment_block(t, line_spec)
        for w, t in zip(weights, fine.points)
    )
    assert np.linalg.eigvalsh(blocks).min() >= -1e-7
    d = fine.points - line_spec.mu
    second = sum(w * np.outer(dj, dj) for w, dj in zip(weights, d))
    cap = line_spec.eps_sigma * line_spec.sigma - second
    assert np.linalg.eigvalsh(cap).min() >= -1e-7
    expect = float(weights @ decision.evaluate(fine.points))
    assert expect == pytest.approx(value, abs=1e-8)


def test_oracle_nonincreasing_under_refinement(line_spec):
    decision = Decision(
        heights=np.array([1.0]), boxes=[BoxRegion([0.05], [0.15])]
    )
    values = [
        adversary_oracle(decision, line_spec, lattice_points(0.2, 1, step))
        for step in (0.05, 0.025, 0.0125)
    ]
    assert values[0] >= values[1] - 1e-7
    assert values[1] >= values[2] - 1e-7


def test_oracle_infeasible_returns_nan(line_spec):
    # a confidence row demanding mass inside a sliver no atom hits
    spec = AmbiguitySpec.with_normalization(
        edge=0.2,
        mu=[0.1],
        sigma=[[1.0]],
        eps_mu=0.05,
        eps_sigma=1.0,
        b=0.1,
        extra_sets=(ConfidenceSet(BoxRegion([0.051], [0.074]), 0.9),),
    )
    value = adversary_oracle(
        full_box_decision(spec), spec, lattice_points(0.2, 1, 0.05)
    )
    assert math.isnan(value)


# ---------------------------------------------------------------------------
# weak duality


def test_gap_of_fallback_against_full_box(ref_spec):
    assert weak_duality_gap(fallback_dual(ref_spec), 1.0) == pytest.approx(
        0.9, abs=1e-12
    )


def test_gap_of_zero_dual(ref_spec):
    assert weak_duality_gap(zero_dual(ref_spec), 1.0) == pytest.approx(
        1.0, abs=1e-12
    )


def test_gap_nonnegative_for_solved_pair(ref_spec, ref_fn, ref_lattice):
    L = lipschitz_certificate(ref_spec, ref_fn).L
    model = assemble_case2(ref_spec, ref_fn, ref_lattice, L)
    inc = enumerate_boxes(model, SearchOptions())
    value = adversary_oracle(
        Decision(heights=np.asarray(ref_fn.heights, dtype=float),
                 boxes=list(inc.boxes)),
        ref_spec,
        lattice_points(1.0, 2, 0.05),
    )
    assert weak_duality_gap(inc.dual_vars, value) >= -1e-6


# ---------------------------------------------------------------------------
# f^c sampling


def test_sample_fc_zero_dual_box_floor(ref_spec):
    decision = Decision(
        heights=np.array([1.0]), boxes=[BoxRegion([0.3, 0.3], [0.5, 0.5])]
    )
    fc_min, argmin = sample_fc(
        decision, zero_dual(ref_spec), ref_spec, n_samples=2000, delta=0.1
    )
    assert fc_min == pytest.approx(0.0, abs=1e-12)
    assert not decision.boxes[0].contains(argmin)


def test_sample_fc_fallback_is_flat(ref_spec):
    fc_min, _ = sample_fc(
        full_box_decision(ref_spec),
        fallback_dual(ref_spec),
        ref_spec,
        delta=0.1,
    )
    # f^c = 1 - b everywhere on T
    assert fc_min == pytest.approx(1.0 - ref_spec.b, abs=1e-9)


def test_sample_fc_detects_corrupted_multiplier(ref_spec):
    corrupted = DualSolution(
        Y1=np.zeros((3, 3)),
        Y2=np.zeros((2, 2)),
        y=np.array([0.0, 1.5]),
        spec=ref_spec,
    )
    fc_min, _ = sample_fc(
        full_box_decision(ref_spec), corrupted, ref_spec, delta=0.1
    )
    assert fc_min == pytest.approx(1.0 - 1.5, abs=1e-9)
    assert fc_min < 0.0


def test_sample_fc_deterministic_per_seed(ref_spec):
    decision = Decision(
        heights=np.array([1.0]), boxes=[BoxRegion([0.2, 0.0], [0.9, 0.6])]
    )
    a = sample_fc(decision, zero_dual(ref_spec), ref_spec, seed=7, delta=0.1)
    b = sample_fc(decision, zero_dual(ref_spec), ref_spec, seed=7, delta=0.1)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_sample_fc_delta_is_keyword_only(ref_spec):
    with pytest.raises(TypeError):
        sample_fc(
            full_box_decision(ref_spec), zero_dual(ref_spec), ref_spec,
            100, 0, 0.1
        )


def test_fc_uses_lower_tent_for_negative_heights(ref_spec):
    # a negative height must not let f^c borrow mass outside the box, so
    # the tent sits inside: zero right at the boundary, -h at depth delta
    decision = Decision(
        heights=np.array([-0.5]), boxes=[BoxRegion([0.2, 0.2], [0.8, 0.8])]
    )
    from drobox.certify import fc_values

    dual = zero_dual(ref_spec)
    on_edge = fc_values(decision, dual, ref_spec, [[0.2, 0.5]], delta=0.1)
    deep = fc_values(decision, dual, ref_spec, [[0.5, 0.5]], delta=0.1)
    outside = fc_values(decision, dual, ref_spec, [[0.05, 0.5]], delta=0.1)
    assert on_edge[0] == pytest.approx(0.0, abs=1e-12)
    assert deep[0] == pytest.approx(-0.5, abs=1e-12)
    assert outside[0] == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# end-to-end certificates


def test_certify_reference_solution(ref_spec, ref_fn, ref_lattice):
    L = lipschitz_certificate(ref_spec, ref_fn).L
    model = assemble_case2(ref_spec, ref_fn, ref_lattice, L)
    inc = enumerate_boxes(model, SearchOptions())
    decision = Decision(
        heights=np.asarray(ref_fn.heights, dtype=float), boxes=list(inc.boxes)
    )
    cert = certify_solution(decision, inc.dual_vars, ref_spec, delta=0.1)
    assert cert.verdict == "certified"
    assert cert.worst_case_expectation >= ref_spec.b - 1e-6
    assert cert.fc_min_sampled >= -1e-6
    assert cert.duality_gap >= -1e-6
    assert cert.fine_delta == pytest.approx(0.05)
    assert cert.samples == 10_000


def test_certify_coarse_fine_lattice_is_inconclusive(ref_spec, ref_fn, ref_lattice):
    L = lipschitz_certificate(ref_spec, ref_fn).L
    model = assemble_case2(ref_spec, ref_fn, ref_lattice, L)
    inc = enumerate_boxes(model, SearchOptions())
    decision = Decision(
        heights=np.asarray(ref_fn.heights, dtype=float), boxes=list(inc.boxes)
    )
    cert = certify_solution(
        decision, inc.dual_vars, ref_spec, delta=0.1,
        fine_lattice=lattice_points(1.0, 2, 0.1),
    )
    assert cert.verdict == "inconclusive"
    assert math.isnan(cert.worst_case_expectation)


def test_certify_falsifies_gap_solution(line_spec):
    # the two-box optimum leaves a one-cell gap; the discretized model
    # accepts it (its guarantee is for the tent-smoothed constraint) but a
    # point mass inside the gap is admissible and drives the exact
    # expectation to zero, so the certificate must come back falsified
    fn = SimpleFunctionSpec(k=2, heights=[0.6, 0.4], mode=VariableBoxes())
    L = lipschitz_certificate(line_spec, fn).L
    model = assemble_case2(line_spec, fn, lattice_points(0.2, 1, 0.05), L)
    inc = enumerate_boxes(model, SearchOptions())
    assert inc.objective == pytest.approx(0.15, abs=1e-6)
    decision = Decision(
        heights=np.asarray(fn.heights, dtype=float), boxes=list(inc.boxes)
    )
    cert = certify_solution(decision, inc.dual_vars, line_spec, delta=0.05)
    assert cert.verdict == "falsified"
    assert cert.worst_case_expectation < line_spec.b - 1e-6
    # the smoothed constraint itself still holds for these duals
    assert cert.fc_min_sampled >= -1e-6
