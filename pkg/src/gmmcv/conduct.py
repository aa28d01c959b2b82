"""Collusion detection in logit-demand Bertrand markets.

Markets have J single-product firms. Demand is multinomial logit with an
outside option: product j's share in market t is

    s_jt = exp(delta_jt) / (1 + sum_j' exp(delta_j't)),
    delta_jt = X_jt beta + alpha p_jt + xi_jt,   alpha < 0.

Marginal cost is MC_jt = Y_jt gamma + lambda_jt. Firm conduct is a set
partition of {1..J}: firms in a group set prices to maximize joint profit,
giving the group first-order condition

    D_G(p) - Delta_G(p) (p_G - MC_G) = 0,
    Delta_G = -alpha * M * (diag(s_G) - s_G s_G'),

zero across groups. Equivalently p_G = MC_G + Delta_G^{-1} D_G, so prices
always exceed marginal cost (Delta_G is a symmetric strictly diagonally
dominant M-matrix whenever inside shares sum below one).

A candidate partition is estimated by GMM on the stacked residuals

    xi_jt(theta)    = ln s_jt - ln s_0t - X_jt beta - alpha p_jt
    lambda_jt(theta) = p_jt - markup_jt(partition) - Y_jt gamma

interacted with instruments, weighting (Z'Z)^{-1}. Because Delta depends
on theta only through the factor -alpha, the markup kernel
m = (diag(s) - s s')^{-1} s is data-only and is precomputed once per data
block; markup = -(1/alpha) * m.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Optional, Sequence

import numpy as np

from . import rng
from .core import Dataset, EstimationError, MomentModel, OptimizerConfig, WeightingSpec
from .parallel import ordered_map
from .selection import cross_validate, select_by_gmm_minimand

__all__ = [
    "Partition",
    "ConductScenario",
    "MarketPanel",
    "ConductCellResult",
    "logit_shares",
    "delta_matrix",
    "solve_equilibrium_prices",
    "build_instruments",
    "conduct_moment_model",
    "conduct_residuals",
    "enumerate_partitions",
    "parse_partition",
    "simulate_market_panel",
    "run_conduct_study",
]

MAX_FIRMS = 8  # Bell(8) = 4140 candidate partitions; beyond that, refuse.


@dataclass(frozen=True)
class Partition:
    """A set partition of firms {0..J-1} in canonical form.

    Groups are sorted by their smallest member; members sorted within each
    group. The text label is 1-based with groups separated by '|', e.g.
    "1,2|3".
    """

    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if not self.groups or any(len(g) == 0 for g in self.groups):
            raise ValueError("groups must be nonempty")
        canon = tuple(sorted((tuple(sorted(g)) for g in self.groups), key=lambda g: g[0]))
        members = [m for g in canon for m in g]
        if sorted(members) != list(range(len(members))):
            raise ValueError("groups must partition {0..J-1} exactly")
        object.__setattr__(self, "groups", canon)

    @property
    def J(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def label(self) -> str:
        return "|".join(",".join(str(m + 1) for m in g) for g in self.groups)

    def __str__(self) -> str:
        return self.label


def parse_partition(text: str) -> Partition:
    """Inverse of Partition.label, e.g. "1,2|3" -> groups ((0,1),(2,))."""
    groups = []
    for part in text.split("|"):
        members = tuple(int(tok) - 1 for tok in part.split(",") if tok.strip() != "")
        groups.append(members)
    return Partition(tuple(groups))


def enumerate_partitions(J: int) -> list[Partition]:
    """All set partitions of {0..J-1}, most to least fragmented.

    Order: group count descending, then lexicographic on the canonical
    group tuples. For J=3 this yields 1|2|3, 1|2,3, 1,2|3, 1,3|2, 1,2,3.
    """
    if not 1 <= J <= MAX_FIRMS:
        raise ValueError(f"need 1 <= J <= {MAX_FIRMS} (Bell-number guard)")

    def assign(j: int, groups: list[list[int]]):
        if j == J:
            yield Partition(tuple(tuple(g) for g in groups))
            return
        for g in groups:
            g.append(j)
            yield from assign(j + 1, groups)
            g.pop()
        groups.append([j])
        yield from assign(j + 1, groups)
        groups.pop()

    parts = list(assign(0, []))
    parts.sort(key=lambda p: (-len(p.groups), p.groups))
    return parts


def logit_shares(delta: np.ndarray) -> np.ndarray:
    """Inside shares s_j = exp(delta_j) / (1 + sum exp(delta)).

    The outside option contributes the 1 in the denominator. Max-shifted
    for overflow safety.
    """
    delta = np.asarray(delta, dtype=float)
    shift = max(0.0, float(np.max(delta)))
    e = np.exp(delta - shift)
    return e / (np.exp(-shift) + e.sum())


def delta_matrix(partition: Partition, shares: np.ndarray, alpha: float, M: float = 1.0) -> np.ndarray:
    """The within-group price-response matrix Delta (zero across groups).

    Entries: -alpha*s_j*(1-s_j)*M on the diagonal, +alpha*s_j*s_r*M within
    a group off the diagonal.
    """
    shares = np.asarray(shares, dtype=float)
    J = shares.size
    out = np.zeros((J, J))
    for g in partition.groups:
        idx = np.array(g)
        s = shares[idx]
        block = -alpha * M * (np.diag(s) - np.outer(s, s))
        out[np.ix_(idx, idx)] = block
    return out


def markup_kernel(partition: Partition, shares: np.ndarray) -> np.ndarray:
    """m with markup = -(1/alpha) * m / 1, i.e. m = K_G^{-1} s_G per group,
    K_G = diag(s_G) - s_G s_G'. Independent of theta and of M."""
    shares = np.asarray(shares, dtype=float)
    m = np.empty_like(shares)
    for g in partition.groups:
        idx = np.array(g)
        s = shares[idx]
        K = np.diag(s) - np.outer(s, s)
        m[idx] = np.linalg.solve(K, s)
    return m


def solve_equilibrium_prices(
    partition: Partition,
    alpha: float,
    beta: np.ndarray,
    X: np.ndarray,
    xi: np.ndarray,
    mc: np.ndarray,
    M: float = 1.0,
    tol: float = 1e-10,
    max_iter: int = 500,
) -> np.ndarray:
    """Prices solving every group's joint-profit first-order condition.

    Stage one iterates the damped markup fixed point
    p <- mc - (1/alpha) K(s(p))^{-1} s(p). The FOC F(p) = D(p) -
    Delta(p)(p - mc) also vanishes as p -> inf (all terms decay with the
    shares), so residual-descent methods can stall at that spurious root;
    the fixed point cannot, because the markup stays bounded as shares
    shrink and pulls prices back toward cost. Stage two polishes the
    localized solution with damped Newton on F to drive the residual
    sup-norm below tol.

    Raises
    ------
    ValueError
        If alpha >= 0 or any marginal cost is nonpositive.
    RuntimeError
        If the residual tolerance is not reached within max_iter.
    """
    if alpha >= 0:
        raise ValueError("alpha must be negative")
    mc = np.asarray(mc, dtype=float)
    if np.any(mc <= 0):
        raise ValueError("marginal costs must be positive")
    X = np.asarray(X, dtype=float)
    xi = np.asarray(xi, dtype=float)
    beta = np.asarray(beta, dtype=float)
    base = X @ beta + xi
    J = mc.size

    def shares_at(p: np.ndarray) -> np.ndarray:
        return logit_shares(base + alpha * p)

    def foc(p: np.ndarray) -> np.ndarray:
        s = shares_at(p)
        return M * s - delta_matrix(partition, s, alpha, M) @ (p - mc)

    def residual(p: np.ndarray) -> float:
        return float(np.max(np.abs(foc(p))))

    p = mc + 1.0 / (-alpha)
    omega = 1.0
    last_change = np.inf
    for _ in range(max_iter):
        target = mc - (1.0 / alpha) * markup_kernel(partition, shares_at(p))
        change = float(np.max(np.abs(target - p)))
        if change < 1e-12 * (1.0 + float(np.max(np.abs(p)))):
            p = target
            break
        # The map is decreasing in prices, so undamped iterates can
        # two-cycle; shrink the step whenever the change stops falling.
        if change >= last_change:
            omega = max(0.1, 0.5 * omega)
        last_change = change
        p = p + omega * (target - p)

    best_p, best_res = p.copy(), residual(p)
    if best_res < tol:
        return best_p
    h = 1e-7
    for _ in range(60):
        F = foc(p)
        res = float(np.max(np.abs(F)))
        if res < best_res:
            best_p, best_res = p.copy(), res
        if res < tol:
            return p
        Jac = np.empty((J, J))
        for j in range(J):
            step = h * max(1.0, abs(p[j]))
            pp = p.copy()
            pm = p.copy()
            pp[j] += step
            pm[j] -= step
            Jac[:, j] = (foc(pp) - foc(pm)) / (2 * step)
        try:
            d = np.linalg.solve(Jac, -F)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(
                f"singular price-response matrix at residual {res:.3e}; check parameters"
            ) from exc
        stepped = False
        for damp in (1.0, 0.5, 0.25, 0.1, 0.05):
            cand = p + damp * d
            if residual(cand) < res:
                p = cand
                stepped = True
                break
        if not stepped:
            break
    if best_res < tol:
        return best_p
    raise RuntimeError(f"price solver did not reach tol={tol:.1e}; residual {best_res:.3e}")


@dataclass(frozen=True)
class ConductScenario:
    """One Monte-Carlo cell of the collusion study."""

    J: int = 3
    T: int = 100
    alpha: float = -0.1
    beta: tuple[float, float] = (2.0, 1.0)
    gamma: tuple[float, float, float] = (3.0, 0.0, 1.0)
    char_sd: float = 0.1
    shock_sd: float = 1.0
    true_partition: str = "1,2,3"
    r: int = 2
    k: int = 1
    reps: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.alpha >= 0:
            raise ValueError("alpha must be negative")
        if self.char_sd <= 0 or self.shock_sd <= 0:
            raise ValueError("draw scales must be positive")
        part = parse_partition(self.true_partition)
        if part.J != self.J:
            raise ValueError("true_partition does not cover {1..J}")


@dataclass(frozen=True)
class MarketPanel:
    """Simulated panel: per market t and product j.

    x is the non-constant demand characteristic, g the extra cost
    characteristic; X_jt = [1, x_jt], Y_jt = [1, x_jt, g_jt]. Shares are
    inside shares (they sum below 1 per market).
    """

    x: np.ndarray  # (T, J)
    g: np.ndarray  # (T, J)
    prices: np.ndarray  # (T, J)
    shares: np.ndarray  # (T, J)
    M: float = 1.0

    @property
    def T(self) -> int:
        return self.x.shape[0]

    @property
    def J(self) -> int:
        return self.x.shape[1]

    def to_dataset(self) -> Dataset:
        """Market-level rows [x_1..x_J, g.., p.., s..]; folds cut markets."""
        return Dataset(np.hstack([self.x, self.g, self.prices, self.shares]))


def _unpack_panel(values: np.ndarray, J: int):
    x = values[:, 0:J]
    g = values[:, J : 2 * J]
    p = values[:, 2 * J : 3 * J]
    s = values[:, 3 * J : 4 * J]
    return x, g, p, s


def simulate_market_panel(scenario: ConductScenario, rep_index: int) -> MarketPanel:
    """Simulate T markets under the true partition.

    Per market: draw characteristics and shocks, redrawing the market if
    any marginal cost lands nonpositive (the design intends positive
    costs; the redraw rate is ~0.1% per market at the default parameters),
    then solve for equilibrium prices and record shares at those prices.
    """
    g_rng = rng.stream(scenario.seed, "conduct", rep_index)
    J, T = scenario.J, scenario.T
    truth = parse_partition(scenario.true_partition)
    beta = np.asarray(scenario.beta)
    gamma = np.asarray(scenario.gamma)
    x = np.empty((T, J))
    gchar = np.empty((T, J))
    prices = np.empty((T, J))
    shares = np.empty((T, J))
    for t in range(T):
        while True:
            xt = g_rng.normal(0.0, scenario.char_sd, J)
            gt = g_rng.normal(0.0, scenario.char_sd, J)
            xit = g_rng.normal(0.0, scenario.shock_sd, J)
            lamt = g_rng.normal(0.0, scenario.shock_sd, J)
            Y = np.column_stack([np.ones(J), xt, gt])
            mc = Y @ gamma + lamt
            if np.all(mc > 0):
                break
        X = np.column_stack([np.ones(J), xt])
        p = solve_equilibrium_prices(truth, scenario.alpha, beta, X, xit, mc)
        s = logit_shares(X @ beta + scenario.alpha * p + xit)
        x[t], gchar[t], prices[t], shares[t] = xt, gt, p, s
    return MarketPanel(x=x, g=gchar, prices=prices, shares=shares)


def build_instruments(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Instrument rows per product: [1, x, x^2, xbar, xbar^2, g, g^2, gbar, gbar^2].

    x and g are (T, J) characteristic panels; bars are within-market means.
    Always 9 columns; N_INSTRUMENTS records the count for moment sizing.
    """
    T, J = x.shape
    cols = [np.ones(T * J)]
    for c in (x, g):
        cm = c.mean(axis=1, keepdims=True) * np.ones_like(c)
        cols.extend([c.ravel(), (c**2).ravel(), cm.ravel(), (cm**2).ravel()])
    return np.column_stack(cols)


N_INSTRUMENTS = 9


def conduct_moment_model(partition: Partition, J: int, alpha_bounds=(-2.0, -0.01)) -> MomentModel:
    """GMM model for one candidate partition over theta = (alpha, beta, gamma).

    Moment rows are market-level means of the per-product stacked moments
    (xi * Z_row, lambda * Z_row); their overall mean equals the mean over
    all (j, t) observations. q = 2 * 9 instruments; p = 6.
    """
    q = 2 * N_INSTRUMENTS

    def prepare(values: np.ndarray):
        x, g, p, s = _unpack_panel(values, J)
        n = values.shape[0]
        s0 = 1.0 - s.sum(axis=1)
        if np.any(s <= 0) or np.any(s0 <= 0):
            raise EstimationError("shares must be strictly inside (0,1) with outside share")
        lnratio = np.log(s) - np.log(s0)[:, None]
        m = np.empty_like(s)
        for t in range(n):
            m[t] = markup_kernel(partition, s[t])
        Z = build_instruments(x, g)  # (n*J, 9)

        def zmean(w: np.ndarray) -> np.ndarray:
            return Z.T @ w.ravel() / (n * J)

        aux = {
            "Z3": Z.reshape(n, J, N_INSTRUMENTS),
            "x": x,
            "g": g,
            "p": p,
            "lnratio": lnratio,
            "m": m,
            "z1": zmean(np.ones_like(x)),
            "zx": zmean(x),
            "zg": zmean(g),
            "zp": zmean(p),
            "zlnr": zmean(lnratio),
            "zm": zmean(m),
            "Zflat": Z,
        }
        return aux

    def mean_fn(theta: np.ndarray, aux) -> np.ndarray:
        a, b0, b1, g0, g1, g2 = theta
        demand = aux["zlnr"] - b0 * aux["z1"] - b1 * aux["zx"] - a * aux["zp"]
        supply = aux["zp"] + (1.0 / a) * aux["zm"] - g0 * aux["z1"] - g1 * aux["zx"] - g2 * aux["zg"]
        return np.concatenate([demand, supply])

    def moment_fn(values: np.ndarray, theta: np.ndarray, aux) -> np.ndarray:
        a, b0, b1, g0, g1, g2 = theta
        xi = aux["lnratio"] - b0 - b1 * aux["x"] - a * aux["p"]
        lam = aux["p"] + (1.0 / a) * aux["m"] - g0 - g1 * aux["x"] - g2 * aux["g"]
        Z3 = aux["Z3"]
        # Market-level mean over the J products of each stacked moment; the
        # row mean then equals the mean over all (j, t) observations.
        demand_rows = np.einsum("tj,tjc->tc", xi, Z3) / J
        supply_rows = np.einsum("tj,tjc->tc", lam, Z3) / J
        return np.hstack([demand_rows, supply_rows])

    def instrument_fn(values: np.ndarray) -> np.ndarray:
        x, g, _, _ = _unpack_panel(values, J)
        return build_instruments(x, g)

    lower = np.array([alpha_bounds[0], -10.0, -10.0, -10.0, -10.0, -10.0])
    upper = np.array([alpha_bounds[1], 10.0, 10.0, 10.0, 10.0, 10.0])
    return MomentModel(
        moment_fn=moment_fn,
        p=6,
        q=q,
        lower=lower,
        upper=upper,
        instrument_count=q,
        instrument_fn=instrument_fn,
        prepare=prepare,
        mean_fn=mean_fn,
        name=partition.label,
    )


def conduct_residuals(panel: MarketPanel, partition: Partition, theta: np.ndarray):
    """Per-observation residuals (xi_hat, lambda_hat), each (T, J)."""
    a, b0, b1, g0, g1, g2 = np.asarray(theta, dtype=float)
    s0 = 1.0 - panel.shares.sum(axis=1)
    lnratio = np.log(panel.shares) - np.log(s0)[:, None]
    xi = lnratio - b0 - b1 * panel.x - a * panel.prices
    m = np.empty_like(panel.shares)
    for t in range(panel.T):
        m[t] = markup_kernel(partition, panel.shares[t])
    lam = panel.prices + (1.0 / a) * m - g0 - g1 * panel.x - g2 * panel.g
    return xi, lam


# Estimation tuning for the study: the objective is quadratic in
# (beta, gamma) and smooth in alpha, so a short simplex stage plus the
# polish reaches the optimum; three starts guard the alpha direction.
_OPT = OptimizerConfig(n_starts=3, max_evals_per_start=900, seed=0)


def _conduct_rep(scenario: ConductScenario, rep: int) -> Optional[dict]:
    """One replication: CV scores per candidate plus CV/GMM choices."""
    candidates = enumerate_partitions(scenario.J)
    try:
        panel = simulate_market_panel(scenario, rep)
        data = panel.to_dataset()
        models = [conduct_moment_model(p, scenario.J) for p in candidates]
        W = WeightingSpec.instrument_gram()
        report = cross_validate(models, data, scenario.r, scenario.k, W, _OPT)
        gmm_res = select_by_gmm_minimand(models, data, W, _OPT)
    except (EstimationError, RuntimeError):
        return None
    if report.failed.any() or gmm_res.failed.any():
        return None
    return {
        "q_valid": report.q_valid.copy(),
        "cv_choice": report.selected_model,
        "gmm_choice": gmm_res.selected_model,
    }


@dataclass
class ConductCellResult:
    """Aggregated study outputs for one (T, alpha, truth) cell."""

    scenario: ConductScenario
    candidates: list[str]
    score_mean: np.ndarray
    score_sd: np.ndarray
    cv_frequency: np.ndarray
    gmm_frequency: np.ndarray
    failures: int
    reps_used: int


def run_conduct_study(
    scenarios: Sequence[ConductScenario],
    parallelism: int = 1,
) -> list[ConductCellResult]:
    """Run every cell: per-candidate CV score moments and choice shares."""
    out = []
    for scenario in scenarios:
        candidates = [p.label for p in enumerate_partitions(scenario.J)]
        task = partial(_conduct_rep, scenario)
        results = ordered_map(task, list(range(scenario.reps)), parallelism)
        kept = [r for r in results if r is not None]
        failures = scenario.reps - len(kept)
        n_cand = len(candidates)
        if kept:
            scores = np.vstack([r["q_valid"] for r in kept])
            mean = scores.mean(axis=0)
            sd = scores.std(axis=0, ddof=1) if len(kept) > 1 else np.zeros(n_cand)
            cv_freq = np.bincount(
                [r["cv_choice"] for r in kept], minlength=n_cand
            ) / len(kept)
            gmm_freq = np.bincount(
                [r["gmm_choice"] for r in kept], minlength=n_cand
            ) / len(kept)
        else:
            mean = sd = cv_freq = gmm_freq = np.full(n_cand, np.nan)
        out.append(
            ConductCellResult(
                scenario=scenario,
                candidates=candidates,
                score_mean=mean,
                score_sd=sd,
                cv_frequency=np.asarray(cv_freq, dtype=float),
                gmm_frequency=np.asarray(gmm_freq, dtype=float),
                failures=failures,
                reps_used=len(kept),
            )
        )
    return out
