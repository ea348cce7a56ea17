import itertools

import numpy as np
import pytest

from drobox.assemble import (
    assemble_case1,
    assemble_case2,
    canonical_assignment,
    decode_box,
)
from drobox.lipschitz import lipschitz_certificate
from drobox.model import (
    AmbiguitySpec,
    BoxRegion,
    FixedBoxes,
    LinearConstraint,
    SimpleFunctionSpec,
    VariableBoxes,
    first_moment_block,
    lattice_points,
    second_moment_outer,
)
from drobox.sdp import solve_sdp
from encoding_tools import (
    binary_rows_ok,
    corner_feasible,
    evaluate_rows,
    fallback_values,
    zero_duals,
)
from oracles import dual_integrand


@pytest.fixture
def ref_L(ref_spec, ref_fn):
    return lipschitz_certificate(ref_spec, ref_fn).L


@pytest.fixture
def ref_model2(ref_spec, ref_fn, ref_lattice, ref_L):
    return assemble_case2(ref_spec, ref_fn, ref_lattice, ref_L)


@pytest.fixture
def fixed_fn():
    box = BoxRegion([0.0, 0.0], [1.0, 1.0])
    return SimpleFunctionSpec(k=1, heights=[1.0], mode=FixedBoxes((box,)))


@pytest.fixture
def line_spec():
    """1-D instance on [0, 0.2] used for the 3-point encoding example."""
    return AmbiguitySpec.with_normalization(
        edge=0.2, mu=[0.1], sigma=[[1.0]], eps_mu=0.05, eps_sigma=1.0, b=0.1
    )


def name_counts(program):
    out = {}
    for row in program.rows:
        key = row.name.split("[")[0]
        out[key] = out.get(key, 0) + 1
    return out


# ---------------------------------------------------------------------------
# fixed mode


def test_case1_row_counts(ref_spec, fixed_fn, ref_lattice, ref_L):
    model = assemble_case1(ref_spec, fixed_fn, ref_lattice, ref_L)
    counts = name_counts(model.program)
    assert counts == {"threshold": 1, "lattice": 121, "pin": 1}
    assert model.program.binary_vars == []
    assert model.case == "fixed"
    assert model.margin == pytest.approx(ref_L * 0.1 * np.sqrt(2.0))


def test_case1_row_structure_at_origin(ref_spec, fixed_fn, ref_lattice, ref_L):
    # with the box covering T the row at any point reads
    # x[0] + y[0] - y[1] - <block, Y1> + <outer, Y2> >= margin
    model = assemble_case1(ref_spec, fixed_fn, ref_lattice, ref_L)
    row = next(r for r in model.program.rows if r.name == "lattice[0]")
    t = ref_lattice.points[0]
    assert row.sense == ">="
    assert row.rhs == pytest.approx(model.margin)
    assert row.lin == {"x[0]": 1.0, "y[0]": 1.0, "y[1]": -1.0}
    np.testing.assert_allclose(row.mats["Y1"], -first_moment_block(t, ref_spec))
    np.testing.assert_allclose(row.mats["Y2"], second_moment_outer(t, ref_spec))


def test_case1_partial_box_indicator(ref_spec, ref_lattice, ref_L):
    box = BoxRegion([0.3, 0.3], [0.5, 0.5])
    fn = SimpleFunctionSpec(k=1, heights=[1.0], mode=FixedBoxes((box,)))
    model = assemble_case1(ref_spec, fn, ref_lattice, ref_L)
    hits = sum(
        1 for r in model.program.rows if r.name.startswith("lattice") and "x[0]" in r.lin
    )
    assert hits == 9  # 3 x 3 lattice points inside [0.3, 0.5]^2


def test_case1_misaligned_box_rejected(ref_spec, ref_lattice, ref_L):
    fn = SimpleFunctionSpec(
        k=1, heights=[1.0], mode=FixedBoxes((BoxRegion([0.05, 0.0], [1.0, 1.0]),))
    )
    with pytest.raises(ValueError):
        assemble_case1(ref_spec, fn, ref_lattice, ref_L)


def test_case1_empty_box_list_rejected(ref_spec, ref_lattice, ref_L):
    fn = SimpleFunctionSpec(k=0, heights=[], mode=FixedBoxes(()))
    with pytest.raises(ValueError):
        assemble_case1(ref_spec, fn, ref_lattice, ref_L)


def test_case1_requires_fixed_mode(ref_spec, ref_fn, ref_lattice, ref_L):
    with pytest.raises(TypeError):
        assemble_case1(ref_spec, ref_fn, ref_lattice, ref_L)


def test_case1_height_polytope(ref_spec, ref_lattice, ref_L):
    """Non-pinned mode keeps heights free inside the user polytope."""
    box = BoxRegion([0.0, 0.0], [1.0, 1.0])
    mode = FixedBoxes(
        (box,),
        objective=np.array([1.0]),
        constraints=(LinearConstraint(np.array([1.0]), ">=", 0.5),),
    )
    fn = SimpleFunctionSpec(k=1, heights=[1.0], mode=mode)
    model = assemble_case1(ref_spec, fn, ref_lattice, ref_L)
    counts = name_counts(model.program)
    assert counts == {"threshold": 1, "lattice": 121, "user": 1}
    assert model.program.obj_sense == "min"
    assert model.program.obj_lin == {"x[0]": 1.0}


def test_case1_pinned_reference_is_feasible(ref_spec, fixed_fn, ref_lattice, ref_L):
    model = assemble_case1(ref_spec, fixed_fn, ref_lattice, ref_L)
    sol = solve_sdp(model.program)
    assert sol.status == "optimal"


def test_case1_solution_yields_nonnegative_smoothed_function(
    ref_spec, fixed_fn, ref_lattice, ref_L
):
    """Any feasible point of the assembled SDP certifies f^c >= 0 on T."""
    model = assemble_case1(ref_spec, fixed_fn, ref_lattice, ref_L)
    sol = solve_sdp(model.program)
    assert sol.status == "optimal"
    y = np.array([sol.value("y[%d]" % i) for i in range(2)])
    rng = np.random.default_rng(7)
    t = rng.uniform(0.0, 1.0, size=(10_000, 2))
    vals = dual_integrand(
        t,
        [1.0],
        [fixed_fn.mode.boxes[0]],
        sol.value("Y1"),
        sol.value("Y2"),
        y,
        ref_spec,
        smoothed=True,
        delta=ref_lattice.delta,
    )
    assert float(vals.min()) >= -1e-9


# ---------------------------------------------------------------------------
# variable mode: counts and row content


def test_case2_counts(ref_model2):
    program = ref_model2.program
    assert len(program.binary_vars) == 121 + 484
    bt = [v for v in program.binary_vars if v.startswith("bt")]
    dm = [v for v in program.binary_vars if v.startswith("dm")]
    dp = [v for v in program.binary_vars if v.startswith("dp")]
    assert (len(bt), len(dm), len(dp)) == (121, 242, 242)
    counts = name_counts(program)
    assert counts == {
        "threshold": 1,
        "lattice": 121,
        "jump": 242,
        "budget": 22,
        "xlo": 22,
        "xhi": 22,
        "wlow": 22,
        "wline": 22,
        "xmax": 2,
        "wnn": 2,
        "zlo": 2,
        "zhi": 2,
    }
    assert program.n_rows == 482
    assert ref_model2.objective_quantum == pytest.approx(0.1)


def test_case2_lattice_row_uses_heights(ref_spec, ref_lattice, ref_L):
    fn = SimpleFunctionSpec(k=1, heights=[0.7], mode=VariableBoxes())
    model = assemble_case2(ref_spec, fn, ref_lattice, ref_L)
    row = next(r for r in model.program.rows if r.name == "lattice[5]")
    assert row.lin["bt[0,5]"] == pytest.approx(0.7)


def test_case2_requires_variable_mode(ref_spec, fixed_fn, ref_lattice, ref_L):
    with pytest.raises(TypeError):
        assemble_case2(ref_spec, fixed_fn, ref_lattice, ref_L)


def test_case2_rejects_nonpositive_heights(ref_spec, ref_lattice, ref_L):
    fn = SimpleFunctionSpec(k=2, heights=[1.0, 0.0], mode=VariableBoxes())
    with pytest.raises(ValueError):
        assemble_case2(ref_spec, fn, ref_lattice, ref_L)


def test_case2_margin_positive_and_override(ref_spec, ref_fn, ref_lattice, ref_L):
    model = assemble_case2(ref_spec, ref_fn, ref_lattice, ref_L)
    assert model.margin == pytest.approx(ref_L * 0.1 * np.sqrt(2.0))
    assert model.margin > 0.0
    forced = assemble_case2(ref_spec, ref_fn, ref_lattice, ref_L, margin_override=0.0)
    assert forced.margin == 0.0
    row = next(r for r in forced.program.rows if r.name == "lattice[0]")
    assert row.rhs == 0.0


def test_case2_explicit_corner_objective(ref_spec, ref_lattice, ref_L):
    mode = VariableBoxes(
        c_minus=np.array([[1.0, 0.0]]), c_plus=np.array([[0.0, 1.0]]), sense="max"
    )
    fn = SimpleFunctionSpec(k=1, heights=[1.0], mode=mode)
    model = assemble_case2(ref_spec, fn, ref_lattice, ref_L)
    assert model.program.obj_sense == "max"
    assert ("z", 0, 0) not in model.var_index
    counts = name_counts(model.program)
    assert "zlo" not in counts and "zhi" not in counts
    assert model.program.n_rows == 478
    assert model.objective_quantum is None


def test_case2_user_constraint_row(ref_spec, ref_lattice, ref_L):
    # coefficient layout: x- entries row-major, then x+ entries row-major
    con = LinearConstraint(np.array([1.0, 0.0, 0.0, 2.0]), "<=", 0.8)
    fn = SimpleFunctionSpec(
        k=1, heights=[1.0], mode=VariableBoxes(constraints=(con,))
    )
    model = assemble_case2(ref_spec, fn, ref_lattice, ref_L)
    row = next(r for r in model.program.rows if r.name == "user[0]")
    assert row.lin == {"xm[0,0]": 1.0, "xp[0,1]": 2.0}
    assert row.sense == "<=" and row.rhs == pytest.approx(0.8)
    assert model.objective_quantum is None


# ---------------------------------------------------------------------------
# variable mode: encoding semantics


def test_canonical_assignment_inner_box(ref_model2):
    box = BoxRegion([0.3, 0.3], [0.5, 0.5])
    vals = canonical_assignment([box], ref_model2)
    lattice = ref_model2.lattice
    on = [f for f in range(lattice.n_points) if vals["bt[0,%d]" % f] == 1.0]
    assert len(on) == 9
    dm_on = [
        (j, tuple(lattice.points[f]))
        for j in range(2)
        for f in range(lattice.n_points)
        if vals["dm[0,%d,%d]" % (j, f)] == 1.0
    ]
    dp_on = [
        (j, tuple(lattice.points[f]))
        for j in range(2)
        for f in range(lattice.n_points)
        if vals["dp[0,%d,%d]" % (j, f)] == 1.0
    ]
    # one up-jump per grid line through the box, one step below the lower
    # edge; one down-jump on the upper edge itself
    dm_expected = [
        (0, (0.2, 0.3)),
        (0, (0.2, 0.4)),
        (0, (0.2, 0.5)),
        (1, (0.3, 0.2)),
        (1, (0.4, 0.2)),
        (1, (0.5, 0.2)),
    ]
    dp_expected = [
        (0, (0.5, 0.3)),
        (0, (0.5, 0.4)),
        (0, (0.5, 0.5)),
        (1, (0.3, 0.5)),
        (1, (0.4, 0.5)),
        (1, (0.5, 0.5)),
    ]
    for got, want in ((dm_on, dm_expected), (dp_on, dp_expected)):
        assert len(got) == len(want)
        for (ja, ta), (jb, tb) in zip(sorted(got), want):
            assert ja == jb
            np.testing.assert_allclose(ta, tb, atol=1e-12)


def test_canonical_assignment_satisfies_encoding_rows(ref_model2):
    box = BoxRegion([0.3, 0.3], [0.5, 0.5])
    vals = canonical_assignment([box], ref_model2)
    assert binary_rows_ok(ref_model2, vals)
    vals["xm[0,0]"] = vals["xm[0,1]"] = 0.3
    vals["xp[0,0]"] = vals["xp[0,1]"] = 0.5
    slacks = evaluate_rows(
        ref_model2.program, vals, ("xlo", "xhi", "wlow", "wline", "xmax", "wnn")
    )
    assert min(slacks.values()) >= -1e-12
    # the corner rows pin the box exactly: moving any bound inward breaks a row
    vals["xm[0,0]"] = 0.3 - 1e-6
    slacks = evaluate_rows(ref_model2.program, vals, ("xlo",))
    assert min(slacks.values()) < 0


def test_canonical_assignment_whole_domain(ref_model2):
    vals = canonical_assignment([BoxRegion([0.0, 0.0], [1.0, 1.0])], ref_model2)
    lattice = ref_model2.lattice
    assert all(vals["bt[0,%d]" % f] == 1.0 for f in range(lattice.n_points))
    assert not any(
        vals["dm[0,%d,%d]" % (j, f)]
        for j in range(2)
        for f in range(lattice.n_points)
    )
    dp_points = [
        (j, lattice.points[f][j])
        for j in range(2)
        for f in range(lattice.n_points)
        if vals["dp[0,%d,%d]" % (j, f)] == 1.0
    ]
    assert len(dp_points) == 22
    assert all(pos == 1.0 for _, pos in dp_points)
    assert binary_rows_ok(ref_model2, vals)


def test_canonical_assignment_misaligned_box(ref_model2):
    with pytest.raises(ValueError):
        canonical_assignment([BoxRegion([0.05, 0.0], [0.5, 0.5])], ref_model2)


def test_decode_roundtrip_inner_box(ref_model2):
    box = BoxRegion([0.3, 0.3], [0.5, 0.5])
    vals = canonical_assignment([box], ref_model2)
    out = decode_box(vals, ref_model2)
    assert len(out) == 1
    np.testing.assert_allclose(out[0].lower, [0.3, 0.3])
    np.testing.assert_allclose(out[0].upper, [0.5, 0.5])


def test_decode_fallback_assignment(ref_model2):
    vals = fallback_values(ref_model2)
    out = decode_box(vals, ref_model2)
    np.testing.assert_allclose(out[0].lower, [0.0, 0.0])
    np.testing.assert_allclose(out[0].upper, [1.0, 1.0])


def test_decode_empty_support_warns(ref_model2):
    vals = canonical_assignment([None], ref_model2)
    with pytest.warns(UserWarning):
        out = decode_box(vals, ref_model2)
    np.testing.assert_allclose(out[0].lower, [0.0, 0.0])
    np.testing.assert_allclose(out[0].upper, [0.0, 0.0])


def test_decode_non_rectangle_support_rejected(ref_model2):
    box = BoxRegion([0.3, 0.3], [0.5, 0.5])
    vals = canonical_assignment([box], ref_model2)
    middle = ref_model2.lattice.flat_of_multi((4, 4))  # the point (0.4, 0.4)
    vals["bt[0,%d]" % middle] = 0.0
    with pytest.raises(ValueError, match="rectangle"):
        decode_box(vals, ref_model2)


def test_decode_fractional_values_rejected(ref_model2):
    vals = canonical_assignment([BoxRegion([0.3, 0.3], [0.5, 0.5])], ref_model2)
    vals["bt[0,0]"] = 0.4
    with pytest.raises(ValueError, match="fractional"):
        decode_box(vals, ref_model2)


def test_decode_requires_variable_model(ref_spec, fixed_fn, ref_lattice, ref_L):
    model = assemble_case1(ref_spec, fixed_fn, ref_lattice, ref_L)
    with pytest.raises(ValueError):
        decode_box({}, model)
    with pytest.raises(ValueError):
        canonical_assignment([None], model)


def test_fallback_assignment_residual(ref_model2, ref_spec):
    """The whole-domain box with dual y = (0, b) clears every row by 1 - b - margin."""
    vals = fallback_values(ref_model2)
    slacks = evaluate_rows(ref_model2.program, vals)
    assert min(slacks.values()) >= -1e-12
    lattice_slacks = [v for n, v in slacks.items() if n.startswith("lattice")]
    expected = 1.0 - ref_spec.b - ref_model2.margin
    assert expected == pytest.approx(0.0031239, abs=2e-6)
    assert min(lattice_slacks) == pytest.approx(expected, abs=1e-9)
    assert max(lattice_slacks) == pytest.approx(expected, abs=1e-9)
    assert slacks["threshold"] == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# the 3-point line: exhaustive check of the jump encoding


def test_line_example_brute_force(line_spec):
    """On [0, 0.2] with delta 0.1 the box [0.1, 0.2] has a unique encoding.

    Enumerates all 512 binary assignments, keeps the ones satisfying the
    jump and budget rows together with some feasible corner pair, and
    checks them against the membership pattern (0, 1, 1).
    """
    lattice = lattice_points(0.2, 1, 0.1)
    fn = SimpleFunctionSpec(k=1, heights=[1.0], mode=VariableBoxes())
    model = assemble_case2(line_spec, fn, lattice, L=1.0, margin_override=0.0)
    names = (
        ["bt[0,%d]" % f for f in range(3)]
        + ["dm[0,0,%d]" % f for f in range(3)]
        + ["dp[0,0,%d]" % f for f in range(3)]
    )
    survivors = []
    for bits in itertools.product((0.0, 1.0), repeat=9):
        vals = dict(zip(names, bits))
        if not binary_rows_ok(model, vals):
            continue
        if not corner_feasible(model, vals):
            continue
        survivors.append(bits)
    target = [s for s in survivors if s[:3] == (0.0, 1.0, 1.0)]
    assert len(target) == 1
    # jump one step below the lower edge, drop at the upper edge
    assert target[0][3:6] == (1.0, 0.0, 0.0)
    assert target[0][6:9] == (0.0, 0.0, 1.0)
    canon = canonical_assignment([BoxRegion([0.1], [0.2])], model)
    assert tuple(canon[n] for n in names) == target[0]
    # every surviving membership pattern is a contiguous run (or empty)
    for s in survivors:
        on = [f for f in range(3) if s[f] == 1.0]
        if on:
            assert on == list(range(min(on), max(on) + 1))


def test_line_example_corner_rows_pin_bounds(line_spec):
    lattice = lattice_points(0.2, 1, 0.1)
    fn = SimpleFunctionSpec(k=1, heights=[1.0], mode=VariableBoxes())
    model = assemble_case2(line_spec, fn, lattice, L=1.0, margin_override=0.0)
    vals = canonical_assignment([BoxRegion([0.1], [0.2])], model)
    vals["xm[0,0]"] = 0.1
    vals["xp[0,0]"] = 0.2
    slacks = evaluate_rows(
        model.program, vals, ("xlo", "xhi", "wlow", "wline", "xmax", "wnn")
    )
    assert min(slacks.values()) >= -1e-12
    assert slacks["xlo[0,0,0]"] == pytest.approx(0.0, abs=1e-12)
    assert slacks["xhi[0,0,0]"] == pytest.approx(0.0, abs=1e-12)
    vals["xm[0,0]"] = 0.0999
    assert evaluate_rows(model.program, vals, ("xlo",))["xlo[0,0,0]"] < 0
    vals["xm[0,0]"] = 0.1
    vals["xp[0,0]"] = 0.2001
    assert evaluate_rows(model.program, vals, ("xhi",))["xhi[0,0,0]"] < 0


def test_empty_box_allows_zero_width(ref_model2):
    vals = canonical_assignment([None], ref_model2)
    assert binary_rows_ok(ref_model2, vals)
    for j in range(2):
        vals["xm[0,%d]" % j] = 0.0
        vals["xp[0,%d]" % j] = 0.0
    slacks = evaluate_rows(
        ref_model2.program, vals, ("xlo", "xhi", "wlow", "wline", "xmax", "wnn")
    )
    assert min(slacks.values()) >= -1e-12


def test_dump_round_trip_stability(ref_spec, ref_fn, ref_lattice, ref_L):
    a = assemble_case2(ref_spec, ref_fn, ref_lattice, ref_L)
    b = assemble_case2(ref_spec, ref_fn, ref_lattice, ref_L)
    assert a.dump() == b.dump()
