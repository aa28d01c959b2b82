"""Conduct lab: partitions, shares, equilibrium pricing, moments, study.

Price-solver correctness is judged by an independently coded first-order
condition: for firm j in group G,

    s_j + alpha * sum_{k in G} (p_k - mc_k) * s_k * (1{k=j} - s_j) = 0

with s the logit inside shares. The markup kernel is checked against the
closed form K^{-1} s = 1/(1 - sum_G s) on a full group, not against the
package's own solver.
"""

import numpy as np
import pytest

from gmmcv import rng
from gmmcv.conduct import (
    ConductScenario,
    Partition,
    build_instruments,
    conduct_moment_model,
    conduct_residuals,
    delta_matrix,
    enumerate_partitions,
    logit_shares,
    markup_kernel,
    parse_partition,
    run_conduct_study,
    simulate_market_panel,
    solve_equilibrium_prices,
)

BETA = np.array([2.0, 1.0])


def shares_hand(X: np.ndarray, alpha: float, p: np.ndarray, xi: np.ndarray) -> np.ndarray:
    u = np.exp(X @ BETA + alpha * p + xi)
    return u / (1.0 + u.sum())


def foc_residual_hand(partition, alpha, X, xi, mc, p) -> float:
    s = shares_hand(X, alpha, p, xi)
    worst = 0.0
    for group in partition.groups:
        for j in group:
            acc = s[j]
            for k in group:
                acc += alpha * (p[k] - mc[k]) * s[k] * ((1.0 if k == j else 0.0) - s[j])
            worst = max(worst, abs(acc))
    return worst


def random_market(idx: int, J: int = 3):
    g = rng.stream(0, "conduct-test", idx)
    x = g.normal(0.0, 0.1, J)
    gch = g.normal(0.0, 0.1, J)
    xi = g.standard_normal(J)
    lam = g.standard_normal(J)
    X = np.column_stack([np.ones(J), x])
    mc = 3.0 + 0.0 * x + 1.0 * gch + lam
    if np.any(mc <= 0):
        return random_market(idx + 10_000, J)
    return X, x, gch, xi, mc


# ---------------------------------------------------------------------------
# Partitions


def test_partition_canonical_form_and_label():
    p = Partition(((2,), (1, 0)))
    assert p.groups == ((0, 1), (2,))
    assert p.label == "1,2|3"
    assert p.J == 3
    assert str(p) == "1,2|3"


def test_partition_rejects_bad_groups():
    with pytest.raises(ValueError):
        Partition(((0, 1), (1, 2)))  # overlap
    with pytest.raises(ValueError):
        Partition(((0,), (2,)))  # gap
    with pytest.raises(ValueError):
        Partition(((0,), ()))  # empty group


def test_parse_partition_round_trip():
    for label in ("1|2|3", "1|2,3", "1,2|3", "1,3|2", "1,2,3"):
        assert parse_partition(label).label == label
    assert parse_partition("1,2|3").groups == ((0, 1), (2,))
    with pytest.raises(ValueError):
        parse_partition("1|1,2")
    with pytest.raises(ValueError):
        parse_partition("0|1,2")  # labels are 1-based


def test_enumerate_partitions_counts_and_order():
    three = enumerate_partitions(3)
    assert [p.label for p in three] == ["1|2|3", "1|2,3", "1,2|3", "1,3|2", "1,2,3"]
    # Bell numbers: 1, 2, 5, 15, 52
    assert len(enumerate_partitions(1)) == 1
    assert len(enumerate_partitions(2)) == 2
    assert len(enumerate_partitions(4)) == 15
    assert len(enumerate_partitions(5)) == 52
    with pytest.raises(ValueError):
        enumerate_partitions(0)


# ---------------------------------------------------------------------------
# Shares and price-response blocks


def test_logit_shares_hand_values():
    s = logit_shares(np.zeros(2))
    assert np.allclose(s, [1.0 / 3.0, 1.0 / 3.0])
    s = logit_shares(np.array([np.log(2.0), 0.0]))
    assert np.allclose(s, [0.5, 0.25])
    assert logit_shares(np.array([3.0])) == pytest.approx(np.exp(3) / (1 + np.exp(3)))


def test_logit_shares_overflow_safe():
    s = logit_shares(np.array([800.0, 0.0]))
    assert np.all(np.isfinite(s))
    assert s[0] == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= s[1] < 1e-300


def test_delta_matrix_hand_example():
    s = np.array([1.0 / 3.0, 1.0 / 3.0])
    collusive = delta_matrix(parse_partition("1,2"), s, alpha=-1.0)
    assert np.allclose(collusive, [[2.0 / 9.0, -1.0 / 9.0], [-1.0 / 9.0, 2.0 / 9.0]])
    competitive = delta_matrix(parse_partition("1|2"), s, alpha=-1.0)
    assert np.allclose(competitive, np.diag([2.0 / 9.0, 2.0 / 9.0]))
    scaled = delta_matrix(parse_partition("1,2"), s, alpha=-2.0, M=3.0)
    assert np.allclose(scaled, 6.0 * collusive)


def test_markup_kernel_closed_forms():
    s = np.array([0.2, 0.3, 0.1])
    # full collusion: K^{-1} s = 1/(1 - sum s) on every coordinate
    m = markup_kernel(parse_partition("1,2,3"), s)
    assert np.allclose(m, np.full(3, 1.0 / (1.0 - 0.6)))
    # singletons: 1 / (1 - s_j)
    m = markup_kernel(parse_partition("1|2|3"), s)
    assert np.allclose(m, 1.0 / (1.0 - s))
    # mixed: group {1,2} pools only its own shares
    m = markup_kernel(parse_partition("1,2|3"), s)
    assert np.allclose(m[:2], np.full(2, 1.0 / (1.0 - 0.5)))
    assert m[2] == pytest.approx(1.0 / 0.9)


def test_markup_kernel_matches_delta_inverse_times_shares():
    g = rng.stream(0, "kernel")
    for _ in range(20):
        raw = g.uniform(0.02, 0.4, 3)
        s = raw / max(1.05 * raw.sum(), 1.0)
        for part in enumerate_partitions(3):
            alpha = -0.7
            D = delta_matrix(part, s, alpha)
            markup = np.linalg.solve(D, s)
            assert np.allclose(-(1.0 / alpha) * markup_kernel(part, s), markup)


# ---------------------------------------------------------------------------
# Equilibrium prices


def test_equilibrium_satisfies_hand_foc():
    parts = enumerate_partitions(3)
    for idx in range(30):
        X, x, gch, xi, mc = random_market(idx)
        for pi, part in enumerate(parts):
            alpha = -0.1 if (idx + pi) % 2 == 0 else -0.3
            p = solve_equilibrium_prices(part, alpha, BETA, X, xi, mc)
            assert foc_residual_hand(part, alpha, X, xi, mc, p) < 1e-10
            assert np.all(p > mc)


def test_equilibrium_input_validation():
    X, x, gch, xi, mc = random_market(0)
    part = parse_partition("1,2,3")
    with pytest.raises(ValueError):
        solve_equilibrium_prices(part, 0.1, BETA, X, xi, mc)
    with pytest.raises(ValueError):
        solve_equilibrium_prices(part, -0.1, BETA, X, xi, np.array([1.0, -0.5, 2.0]))


def test_monopoly_price_matches_bisection():
    part = parse_partition("1")
    for idx in range(25):
        g = rng.stream(0, "mono", idx)
        x = g.normal(0.0, 0.1)
        xi = g.standard_normal()
        mc = 3.0 + g.standard_normal()
        if mc <= 0:
            continue
        alpha = -0.1 if idx % 2 == 0 else -0.3
        X = np.array([[1.0, x]])

        def h(p):
            s = shares_hand(X, alpha, np.array([p]), np.array([xi]))[0]
            return p - mc + 1.0 / (alpha * (1.0 - s))

        lo, hi = mc, mc + 20.0 / (-alpha)
        while h(hi) < 0:
            hi += 20.0 / (-alpha)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if h(mid) < 0:
                lo = mid
            else:
                hi = mid
        oracle = 0.5 * (lo + hi)
        p = solve_equilibrium_prices(part, alpha, BETA, X, np.array([xi]), np.array([mc]))
        assert abs(p[0] - oracle) < 1e-8


def test_collusive_duopoly_prices_at_least_competitive():
    coll, comp = parse_partition("1,2"), parse_partition("1|2")
    gaps = []
    for idx in range(100):
        g = rng.stream(0, "duo", idx)
        x = g.normal(0.0, 0.1)
        xi = g.standard_normal()
        mc_val = 3.0 + g.standard_normal()
        if mc_val <= 0:
            continue
        X = np.array([[1.0, x], [1.0, x]])
        xi2 = np.array([xi, xi])
        mc = np.array([mc_val, mc_val])
        p_coll = solve_equilibrium_prices(coll, -0.3, BETA, X, xi2, mc)
        p_comp = solve_equilibrium_prices(comp, -0.3, BETA, X, xi2, mc)
        assert np.all(p_coll >= p_comp - 1e-12)
        gaps.append(float(p_coll.mean() - p_comp.mean()))
    assert np.mean(gaps) > 0.0


def test_extreme_price_sensitivity_erases_conduct_differences():
    X, x, gch, xi, mc = random_market(5)
    p_coll = solve_equilibrium_prices(parse_partition("1,2,3"), -50.0, BETA, X, xi, mc)
    p_comp = solve_equilibrium_prices(parse_partition("1|2|3"), -50.0, BETA, X, xi, mc)
    assert np.max(np.abs(p_coll - p_comp)) < 1e-4


# ---------------------------------------------------------------------------
# Panel simulation, instruments, moments


def test_panel_shapes_validity_determinism():
    sc = ConductScenario(J=3, T=12, alpha=-0.1, true_partition="1,2,3", reps=1, seed=4)
    panel = simulate_market_panel(sc, 0)
    assert panel.x.shape == (12, 3)
    assert np.all(panel.shares > 0)
    assert np.all(panel.shares.sum(axis=1) < 1.0)
    assert np.all(panel.prices > 0)
    again = simulate_market_panel(sc, 0)
    assert np.array_equal(panel.prices, again.prices)
    other = simulate_market_panel(sc, 1)
    assert not np.array_equal(panel.prices, other.prices)


def test_simulated_markets_respect_true_partition_foc():
    sc = ConductScenario(J=3, T=8, alpha=-0.3, true_partition="1,2|3", reps=1, seed=7)
    panel = simulate_market_panel(sc, 0)
    truth = parse_partition("1,2|3")
    xi, lam = conduct_residuals(panel, truth, np.array([-0.3, 2.0, 1.0, 3.0, 0.0, 1.0]))
    # supply residual equals the structural cost shock: prices obey the FOC
    X = np.column_stack
    for t in range(panel.T):
        Xt = np.column_stack([np.ones(3), panel.x[t]])
        mc = 3.0 + 1.0 * panel.g[t] + lam[t]
        res = foc_residual_hand(truth, -0.3, Xt, xi[t], mc, panel.prices[t])
        assert res < 1e-9


def test_round_trip_residuals_recover_shocks():
    # at the true parameters the demand residual is the taste shock and the
    # supply residual the cost shock, market by market
    sc = ConductScenario(J=3, T=10, alpha=-0.1, true_partition="1,2,3", reps=1, seed=11)
    panel = simulate_market_panel(sc, 0)
    truth = parse_partition("1,2,3")
    theta_true = np.array([-0.1, 2.0, 1.0, 3.0, 0.0, 1.0])
    xi, lam = conduct_residuals(panel, truth, theta_true)
    # re-derive the shocks from the simulated primitives
    delta = np.log(panel.shares) - np.log(1.0 - panel.shares.sum(axis=1))[:, None]
    xi_direct = delta - 2.0 - 1.0 * panel.x + 0.1 * panel.prices
    assert np.max(np.abs(xi - xi_direct)) < 1e-10
    m = np.vstack([markup_kernel(truth, panel.shares[t]) for t in range(panel.T)])
    lam_direct = panel.prices - 10.0 * m - 3.0 - 1.0 * panel.g
    assert np.max(np.abs(lam - lam_direct)) < 1e-10


def test_build_instruments_hand_panel():
    x = np.array([[1.0, 2.0, 3.0]])
    g = np.array([[0.5, 0.5, 2.0]])
    Z = build_instruments(x, g)
    assert Z.shape == (3, 9)
    assert np.allclose(Z[:, 0], 1.0)
    assert np.allclose(Z[:, 1], [1.0, 2.0, 3.0])
    assert np.allclose(Z[:, 2], [1.0, 4.0, 9.0])
    assert np.allclose(Z[:, 3], 2.0)  # market mean of x
    assert np.allclose(Z[:, 4], 4.0)
    assert np.allclose(Z[:, 5], [0.5, 0.5, 2.0])
    assert np.allclose(Z[:, 6], [0.25, 0.25, 4.0])
    assert np.allclose(Z[:, 7], 1.0)  # market mean of g
    assert np.allclose(Z[:, 8], 1.0)


def test_moment_model_zero_at_truth_in_population():
    # moments at the true parameters average the instrument-weighted shocks;
    # with many markets they shrink toward zero
    sc = ConductScenario(J=3, T=400, alpha=-0.1, true_partition="1,2,3", reps=1, seed=3)
    panel = simulate_market_panel(sc, 0)
    model = conduct_moment_model(parse_partition("1,2,3"), 3)
    assert model.p == 6 and model.q == 18
    data = panel.to_dataset()
    aux = model.prepare(data.values)
    theta_true = np.array([-0.1, 2.0, 1.0, 3.0, 0.0, 1.0])
    gbar = model.mean_fn(theta_true, aux)
    assert gbar.shape == (18,)
    assert np.max(np.abs(gbar)) < 0.2
    rows = model.moment_fn(data.values, theta_true, aux)
    assert rows.shape == (400, 18)
    assert np.allclose(rows.mean(axis=0), gbar)


def test_moment_model_matches_raw_instrument_products():
    sc = ConductScenario(J=3, T=5, alpha=-0.3, true_partition="1,2|3", reps=1, seed=8)
    panel = simulate_market_panel(sc, 0)
    part = parse_partition("1,2|3")
    model = conduct_moment_model(part, 3)
    data = panel.to_dataset()
    aux = model.prepare(data.values)
    theta = np.array([-0.25, 1.8, 0.9, 2.9, 0.1, 1.1])
    gbar = model.mean_fn(theta, aux)
    xi, lam = conduct_residuals(panel, part, theta)
    Z = build_instruments(panel.x, panel.g)
    hand = np.concatenate(
        [Z.T @ xi.ravel() / Z.shape[0], Z.T @ lam.ravel() / Z.shape[0]]
    )
    assert np.max(np.abs(gbar - hand)) < 1e-12


def test_alpha_bounds_exclude_zero_and_truth_is_inside():
    model = conduct_moment_model(parse_partition("1,2,3"), 3)
    assert model.lower[0] == -2.0
    assert model.upper[0] == -0.01
    assert model.lower[0] < -0.3 < model.upper[0]


def test_scenario_validation():
    with pytest.raises(ValueError):
        ConductScenario(J=3, T=4, alpha=0.1, true_partition="1,2,3", reps=1)
    with pytest.raises(ValueError):
        ConductScenario(J=3, T=4, alpha=-0.1, true_partition="1,2", reps=1)


def test_run_conduct_study_smoke_and_determinism():
    sc = ConductScenario(J=3, T=6, alpha=-0.1, true_partition="1,2,3", reps=2, seed=1)
    cell = run_conduct_study([sc])[0]
    assert cell.candidates == ["1|2|3", "1|2,3", "1,2|3", "1,3|2", "1,2,3"]
    assert cell.reps_used + cell.failures == 2
    assert cell.cv_frequency.sum() == pytest.approx(1.0)
    assert cell.gmm_frequency.sum() == pytest.approx(1.0)
    assert np.all(cell.score_mean > 0)
    again = run_conduct_study([sc])[0]
    assert np.array_equal(cell.cv_frequency, again.cv_frequency)
    assert np.array_equal(cell.score_mean, again.score_mean)
