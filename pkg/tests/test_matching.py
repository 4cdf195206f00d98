import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prvr import matching
from prvr.matching import (
    InfeasibleAssignmentError,
    brute_force_assignment,
    solve_max_assignment,
)

BACKENDS = ["python"] + (["compiled"] if matching.BACKEND == "compiled" else [])


def profit_matrices(max_rows=4, max_cols=8):
    return st.integers(1, max_rows).flatmap(
        lambda r: st.integers(r, max_cols).flatmap(
            lambda c: arrays(np.float64, (r, c), elements=st.floats(-1, 1, allow_nan=False))
        )
    )


def test_backend_selected():
    assert matching.BACKEND in ("compiled", "python")


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_row_argmax(backend):
    plan = solve_max_assignment([[0.1, 0.7, -0.3, 0.7]], backend=backend)
    assert plan.columns == (1,)
    assert plan.total_profit == 0.7


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_by_three_example(backend):
    plan = solve_max_assignment([[0.5, 0.9, 0.1], [0.9, 0.4, 0.3]], backend=backend)
    assert plan.columns == (1, 0)
    assert plan.total_profit == pytest.approx(1.8, abs=1e-15)
    oracle = brute_force_assignment([[0.5, 0.9, 0.1], [0.9, 0.4, 0.3]])
    assert oracle.columns == (1, 0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_dominant_diagonal_identity(backend):
    pi = -np.abs(np.random.default_rng(0).uniform(size=(4, 4)))
    np.fill_diagonal(pi, 1.0)
    assert solve_max_assignment(pi, backend=backend).columns == (0, 1, 2, 3)


def test_all_equal_profits():
    plan = solve_max_assignment(np.full((3, 5), 0.25))
    assert len(set(plan.columns)) == 3
    assert plan.total_profit == 0.75
    assert brute_force_assignment(np.full((3, 5), 0.25)).total_profit == 0.75


def test_plan_matrix_invariants():
    plan = solve_max_assignment(np.random.default_rng(1).uniform(-1, 1, size=(3, 6)))
    a = plan.matrix
    assert (a.sum(1) == 1).all() and (a.sum(0) <= 1).all()


def test_errors():
    with pytest.raises(InfeasibleAssignmentError):
        solve_max_assignment(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        solve_max_assignment([[0.1, float("nan")]])
    with pytest.raises(ValueError):
        brute_force_assignment(np.zeros((7, 9)))


def test_backends_agree_on_plans():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernel not built")
    rng = np.random.default_rng(7)
    for _ in range(500):
        r = int(rng.integers(1, 5))
        pi = rng.uniform(-1, 1, size=(r, int(rng.integers(r, 9))))
        assert solve_max_assignment(pi, "python") == solve_max_assignment(pi, "compiled")


@pytest.mark.parametrize("backend", BACKENDS)
@settings(max_examples=300, deadline=None)
@given(pi=profit_matrices())
def test_optimal_profit_equals_brute_force(backend, pi):
    assert solve_max_assignment(pi, backend=backend).total_profit == brute_force_assignment(pi).total_profit


@settings(max_examples=150, deadline=None)
@given(pi=profit_matrices(), data=st.data())
def test_column_permutation_equivariance(pi, data):
    perm = np.array(data.draw(st.permutations(range(pi.shape[1]))))
    a = solve_max_assignment(pi)
    b = solve_max_assignment(pi[:, perm])
    assert abs(a.total_profit - b.total_profit) < 1e-12
    # chosen columns map back to an optimal plan of the original
    assert abs(sum(pi[i, perm[j]] for i, j in enumerate(b.columns)) - a.total_profit) < 1e-12


@settings(max_examples=150, deadline=None)
@given(pi=profit_matrices(), c=st.floats(-5, 5))
def test_constant_shift(pi, c):
    a = solve_max_assignment(pi)
    b = solve_max_assignment(pi + c)
    assert abs(b.total_profit - (a.total_profit + pi.shape[0] * c)) < 1e-9
    # b's plan is optimal for the unshifted problem too
    assert abs(sum(pi[i, j] for i, j in enumerate(b.columns)) - a.total_profit) < 1e-9


def test_benchmark_script_runs():
    import importlib.util
    import pathlib

    path = pathlib.Path(__file__).parents[1] / "benchmarks" / "bench_assignment.py"
    spec = importlib.util.spec_from_file_location("bench_assignment", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    rows = mod.main(["--instances", "5"])
    assert {r["backend"] for r in rows} >= {"python"}
    assert all(r["n"] == 5 and r["mean_us"] > 0 for r in rows)
