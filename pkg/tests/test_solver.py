import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnr.errors import ContractError, DimensionError, SingularMatrixError
from pnr.solver import (
    PnrConfig,
    RegressionProblem,
    lad_oracle,
    objective,
    predict_target,
    sample_mask,
    solve,
    solve_lad_irls,
    solve_lse,
    solve_masked,
    stack_shots,
)
from pnr.synth import SynthSpec, gen_regression_instance

STRICT = PnrConfig(p=2, ridge=0.0)
STRICT_LAD = PnrConfig(p=1, ridge=0.0, irls_iters=10)
MEDIAN = RegressionProblem([[0.0], [0.0], [3.0]], [[1.0], [1.0], [1.0]])


def random_problem(r, n=12, d=3, D=2):
    return RegressionProblem(r.uniform(-1, 1, (n, D)), r.uniform(-1, 1, (n, d)))


def test_config_validation():
    with pytest.raises(ContractError):
        PnrConfig(p=3)
    with pytest.raises(ContractError):
        PnrConfig(irls_eps=0)
    with pytest.raises(ContractError):
        PnrConfig(irls_iters=0)


def test_problem_validation():
    with pytest.raises(DimensionError):
        RegressionProblem(np.ones((3, 2)), np.ones((4, 2)))
    with pytest.raises(ContractError):
        RegressionProblem(np.ones((2, 1)), np.ones((2, 1)), [1.0, -1.0])


# --- LSE ---------------------------------------------------------------------


def test_lse_identity_design():
    H = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_allclose(solve_lse(RegressionProblem(H, np.eye(3)), STRICT).F, H, atol=1e-14)


def test_lse_consistent_full_rank():
    P = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    F_star = np.array([[2.0, 0.0], [-1.0, 3.0]])
    sol = solve_lse(RegressionProblem(P @ F_star, P), STRICT)
    np.testing.assert_allclose(sol.F, F_star, atol=1e-13)
    assert sol.objective == pytest.approx(0.0, abs=1e-24)


def test_lse_mean_minimizes_squared_error():
    sol = solve_lse(MEDIAN, STRICT)
    np.testing.assert_allclose(sol.F, [[1.0]], atol=1e-15)
    assert sol.objective == pytest.approx(6.0)


def test_lse_rank_deficient_is_singular():
    P = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    with pytest.raises(SingularMatrixError, match="ridge"):
        solve_lse(RegressionProblem(np.ones((3, 1)), P), STRICT)


def test_ridge_rescues_rank_deficiency():
    P = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    sol = solve_lse(RegressionProblem(np.ones((3, 1)), P), PnrConfig(ridge=1e-6))
    assert np.all(np.isfinite(sol.F))


def test_ridge_matches_regularized_objective(rng):
    prob = random_problem(rng)
    ridge = 0.3
    F = solve_lse(prob, PnrConfig(ridge=ridge)).F
    lam = ridge * np.trace(prob.P.T @ prob.P) / prob.d
    np.testing.assert_allclose(prob.P.T @ (prob.H - prob.P @ F), lam * F, atol=1e-12)


def test_normal_equations_residual(rng):
    for _ in range(20):
        prob = RegressionProblem(rng.uniform(-1, 1, (40, 3)), rng.uniform(-1, 1, (40, 5)), rng.uniform(0, 2, 40))
        F = solve_lse(prob, STRICT).F
        PtW = prob.P.T * prob.row_weights
        assert np.max(np.abs(PtW @ (prob.H - prob.P @ F))) <= 1e-8 * (1 + np.max(np.abs(PtW @ prob.H)))


def test_row_weight_duplication(rng):
    prob = random_problem(rng)
    w = np.ones(prob.n)
    w[[2, 5]] = [3, 2]
    weighted = solve_lse(RegressionProblem(prob.H, prob.P, w), STRICT).F
    rows = np.repeat(np.arange(prob.n), w.astype(int))
    repeated = solve_lse(RegressionProblem(prob.H[rows], prob.P[rows]), STRICT).F
    np.testing.assert_allclose(weighted, repeated, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.1, 10.0))
def test_scale_equivariance(seed, c):
    r = np.random.default_rng(seed)
    prob = random_problem(r)
    F = solve_lse(prob, STRICT).F
    np.testing.assert_allclose(solve_lse(RegressionProblem(c * prob.H, prob.P), STRICT).F, c * F, atol=1e-9)
    np.testing.assert_allclose(solve_lse(RegressionProblem(prob.H, c * prob.P), STRICT).F, F / c, atol=1e-9)


# --- LAD / IRLS ----------------------------------------------------------------


def test_objective_examples():
    assert objective(MEDIAN, [[0.0]], 1) == 3.0
    assert objective(MEDIAN, [[1.0]], 2) == 6.0
    P = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    F = np.array([[2.0, 0.0], [-1.0, 3.0]])
    assert objective(RegressionProblem(P @ F, P), F, 1) == 0.0
    with pytest.raises(DimensionError):
        objective(MEDIAN, np.ones((2, 1)), 1)


def test_lad_median_instance():
    oracle = lad_oracle(MEDIAN)
    np.testing.assert_allclose(oracle.F, [[0.0]], atol=1e-9)
    assert oracle.objective == pytest.approx(3.0, abs=1e-9)
    # for h = (0, 0, 3) the weighted-mean update is F <- 3F / (6 - F), from F0 = mean = 1
    expected = 1.0
    for iters in range(1, 16):
        expected = 3 * expected / (6 - expected)
        sol = solve_lad_irls(MEDIAN, PnrConfig(p=1, irls_iters=iters, irls_eps=1e-8, ridge=0.0))
        assert sol.F[0, 0] == pytest.approx(expected, rel=1e-9, abs=1e-15)
        assert sol.iterations_used == iters
    assert solve_lad_irls(MEDIAN, PnrConfig(p=1, irls_iters=10)).F[0, 0] == pytest.approx(1.4641e-3, rel=1e-3)
    assert abs(solve_lad_irls(MEDIAN, PnrConfig(p=1, irls_iters=11)).F[0, 0]) < 1e-3
    assert sol.final_weights.shape == (3, 1)


def test_lad_consistent_system_is_fixed_point(rng):
    P = rng.uniform(-1, 1, (10, 3))
    F_star = rng.uniform(-1, 1, (3, 2))
    prob = RegressionProblem(P @ F_star, P)
    for iters in (1, 3, 8):
        sol = solve_lad_irls(prob, PnrConfig(p=1, irls_iters=iters, ridge=0.0))
        np.testing.assert_allclose(sol.F, F_star, atol=1e-10)
        assert np.all(sol.final_weights <= 1e8) and np.all(sol.final_weights > 0)
    assert lad_oracle(prob).objective == pytest.approx(0.0, abs=1e-7)


def test_lad_more_robust_than_lse_with_replaced_rows():
    wins = 0
    for trial in range(100):
        r = np.random.default_rng(trial)
        P = r.uniform(-1, 1, (32, 4))
        F_star = r.uniform(-1, 1, (4, 3))
        H = P @ F_star
        rows = r.choice(32, 6, replace=False)
        H[rows] = 10.0 * r.normal(size=(6, 3))
        prob = RegressionProblem(H, P)
        lad = np.linalg.norm(solve_lad_irls(prob, PnrConfig(p=1)).F - F_star)
        lse = np.linalg.norm(solve_lse(prob).F - F_star)
        wins += lad < lse
    assert wins >= 90


def test_irls_weights_are_per_column():
    P = np.ones((3, 1))
    H = np.array([[0.0, 1.0], [0.0, 1.0], [3.0, -5.0]])
    sol = solve_lad_irls(RegressionProblem(H, P), PnrConfig(p=1, irls_iters=3))
    assert sol.final_weights.shape == (3, 2)
    assert not np.allclose(sol.final_weights[:, 0], sol.final_weights[:, 1])


def test_irls_weight_bounds(rng):
    prob = random_problem(rng)
    sol = solve_lad_irls(prob, PnrConfig(p=1, irls_eps=1e-6))
    assert np.all(sol.final_weights > 0) and np.all(sol.final_weights <= 1e6)


@pytest.mark.parametrize("seed", range(15))
def test_irls_never_worse_than_initializer(seed):
    prob, _, _ = gen_regression_instance(SynthSpec(n=24, d=3, D=2, seed=seed))
    cfg = PnrConfig(p=1)
    assert solve_lad_irls(prob, cfg).objective <= objective(prob, solve_lse(prob, cfg).F, 1) + 1e-9


def test_oracle_cross_check_small_instance():
    prob, _, _ = gen_regression_instance(SynthSpec(n=8, d=2, D=1, seed=11))
    irls = solve_lad_irls(prob, PnrConfig(p=1, irls_iters=20))
    oracle = lad_oracle(prob)
    assert oracle.objective <= irls.objective + 1e-6
    assert irls.objective <= 1.01 * oracle.objective


def test_oracle_size_limit():
    with pytest.raises(ContractError):
        lad_oracle(RegressionProblem(np.ones((65, 1)), np.ones((65, 1))))


def test_oracle_matches_brute_force_median(rng):
    # for a single constant column the LAD optimum is any median
    h = rng.uniform(-1, 1, (9, 1))
    oracle = lad_oracle(RegressionProblem(h, np.ones((9, 1))))
    assert oracle.F[0, 0] == pytest.approx(np.median(h), abs=1e-8)


# --- masking, stacking, prediction -------------------------------------------------


def test_mask_all_ones_is_bitwise_identical(rng):
    prob = random_problem(rng)
    for cfg in (PnrConfig(p=2), PnrConfig(p=1)):
        a = solve(prob, cfg).F
        b = solve_masked(prob, np.ones(prob.n), cfg).F
        assert a.tobytes() == b.tobytes()


def test_masking_equals_weighting(rng):
    prob = random_problem(rng)
    m = (rng.uniform(size=prob.n) < 0.7).astype(float)
    for cfg in (PnrConfig(p=2), PnrConfig(p=1)):
        a = solve_masked(prob, m, cfg).F
        b = solve(RegressionProblem(prob.H, prob.P, m), cfg).F
        assert a.tobytes() == b.tobytes()


def test_mask_removes_corrupted_row(rng):
    P = rng.uniform(-1, 1, (10, 3))
    F_star = rng.uniform(-1, 1, (3, 2))
    H = P @ F_star
    H[4] += 50.0
    mask = np.ones(10)
    mask[4] = 0
    for cfg in (STRICT, STRICT_LAD):
        np.testing.assert_allclose(solve_masked(RegressionProblem(H, P), mask, cfg).F, F_star, atol=1e-8)


def test_mask_underdetermined_is_singular(rng):
    prob = random_problem(rng, n=4, d=3, D=1)
    with pytest.raises(SingularMatrixError):
        solve_masked(prob, [1, 0, 1, 0], STRICT)


def test_mask_rejects_non_binary(rng):
    with pytest.raises(ContractError):
        solve_masked(random_problem(rng), np.full(12, 0.5), STRICT)


def test_sample_mask():
    assert np.all(sample_mask(50, 1.0, 3) == 1)
    assert np.all(sample_mask(50, 0.0, 3) == 0)
    frac = sample_mask(10000, 0.5, 2024).mean()
    assert 0.48 <= frac <= 0.52
    np.testing.assert_array_equal(sample_mask(100, 0.5, 9), sample_mask(100, 0.5, 9))
    with pytest.raises(ContractError):
        sample_mask(3, 1.5, 0)


def test_stack_single_shot_is_identity(rng):
    prob = random_problem(rng)
    stacked = stack_shots([(prob.H, prob.P)])
    np.testing.assert_array_equal(stacked.H, prob.H)
    np.testing.assert_array_equal(stacked.P, prob.P)


def test_stack_duplicate_shot_same_solution(rng):
    prob = random_problem(rng)
    single = solve_lse(prob, STRICT).F
    double = solve_lse(stack_shots([(prob.H, prob.P)] * 2), STRICT).F
    np.testing.assert_allclose(double, single, atol=1e-12)


def test_stack_noiseless_shots_recover(rng):
    F_star = rng.uniform(-1, 1, (3, 4))
    shots = []
    for _ in range(3):
        P = rng.uniform(-1, 1, (6, 3))
        shots.append((P @ F_star, P))
    np.testing.assert_allclose(solve_lse(stack_shots(shots), STRICT).F, F_star, atol=1e-8)


def test_stack_matches_summed_normal_equations(rng):
    shots = [(rng.uniform(-1, 1, (7, 2)), rng.uniform(-1, 1, (7, 3))) for _ in range(4)]
    A = sum(P.T @ P for _, P in shots)
    B = sum(P.T @ H for H, P in shots)
    np.testing.assert_allclose(solve_lse(stack_shots(shots), STRICT).F, np.linalg.solve(A, B), atol=1e-9)


def test_stack_width_mismatch():
    with pytest.raises(DimensionError):
        stack_shots([(np.ones((3, 2)), np.ones((3, 1))), (np.ones((3, 3)), np.ones((3, 1)))])


def test_predict_target_examples():
    F = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(predict_target(F, np.eye(2)), F)
    np.testing.assert_array_equal(predict_target(F, np.zeros((3, 2))), np.zeros((3, 2)))
    np.testing.assert_array_equal(predict_target(F, [[1.0, 1.0]]), [[4.0, 6.0]])
    with pytest.raises(DimensionError):
        predict_target(F, np.ones((1, 3)))
