"""Asymptotic test for equal fit of two cross-validated GMM models.

Under the null that two globally misspecified models fit equally well
(equal population minimands) and the weighting matrix is a constant
(identity enforced here), the scaled difference of averaged CV scores

    R_CV = sqrt(|N_valid|) * (Q_valid_1 - Q_valid_2) / sigma_hat

is asymptotically standard normal. sigma_hat^2 is estimated from the
validation moments by a delta-method sandwich: per training subset S the
gradient of the score difference with respect to the stacked mean moments
is g_S = [2*mu_1(S); -2*mu_2(S)] (the minus sign on the subtracted model is
essential), and the covariance of the stacked centered moments is taken
either per split (independent-splits mode) or jointly across splits with
cross-split blocks built from shared validation observations (general
mode). Both give

    sigma_hat^2 = (1/C^2) * R' V R,   C = number of training subsets,

where R stacks the g_S and V stacks the (cross-)split covariance blocks.

Normalization note: the statistic divides by sigma_hat, the standard
deviation, not by sigma_hat^2. Dividing by the variance itself leaves the
null spread at 1/sigma, which fails any unit-variance check whenever
sigma != 1; the Monte-Carlo null harness in the test suite confirms that
only the standard-deviation normalization produces N(0,1). The variance
itself is still reported in TestResult.sigma_hat_sq.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .core import Dataset, ModelBlock, MomentModel, WeightingSpec
from .selection import CvReport, SplitPlan

__all__ = [
    "SplitMoments",
    "VarianceEstimate",
    "TestResult",
    "collect_split_moments",
    "estimate_variance_independent",
    "estimate_variance_general",
    "compute_rcv",
]


@dataclass(frozen=True)
class SplitMoments:
    """Validation moments for both models on one training subset.

    moments[i] has shape (n_valid, q_i): model i's moment rows on the
    held-out complement, evaluated at the subset-trained theta_S. The
    observation indices identify shared rows across splits.
    """

    subset: tuple[int, ...]
    valid_indices: np.ndarray
    moments: tuple[np.ndarray, np.ndarray]


@dataclass
class SplitComponent:
    """Per-split pieces of the variance estimate."""

    subset: tuple[int, ...]
    g_hat: np.ndarray
    cov_block: np.ndarray
    contribution: float


@dataclass
class VarianceEstimate:
    """Estimated asymptotic variance of sqrt(n) * (Q_valid_1 - Q_valid_2)."""

    mode: str
    sigma_sq: float
    n_valid: float
    components: list[SplitComponent]
    degenerate: bool
    psd_repaired: bool = False


@dataclass
class TestResult:
    """R_CV statistic, its variance estimate, and the normal p-value."""

    r_cv: float
    sigma_hat_sq: float
    n_valid: float
    p_value_two_sided: float
    direction: str
    q_valid: tuple[float, float]


def _require_identity(W: WeightingSpec | np.ndarray | None, q1: int, q2: int) -> None:
    # Constant identity weighting is a hypothesis of the normality result;
    # under it the weight-parameterization nuisance terms vanish, which is
    # what this estimator implements. Reject anything else loudly.
    if W is None:
        return
    if isinstance(W, WeightingSpec):
        if W.kind == "identity":
            return
        raise ValueError("the CV-difference test requires identity weighting")
    Wm = np.asarray(W, dtype=float)
    for q in {q1, q2}:
        if Wm.shape == (q, q) and np.allclose(Wm, np.eye(q), atol=1e-12):
            continue
        raise ValueError("the CV-difference test requires identity weighting")


def collect_split_moments(
    models: Sequence[MomentModel],
    data: Dataset,
    report: CvReport,
    W: WeightingSpec | np.ndarray | None = None,
) -> list[SplitMoments]:
    """Recompute per-observation validation moments at the trained thetas.

    Requires exactly two non-failed models in the report and identity
    weighting (see module docstring).
    """
    if len(models) != 2:
        raise ValueError("the test compares exactly two models")
    if report.failed.any():
        raise ValueError("both models must be estimated on every subset")
    _require_identity(W, models[0].q, models[1].q)
    plan = report.plan
    out = []
    for s, S in enumerate(plan.training_subsets):
        valid = plan.valid_indices(S)
        rows = []
        for i, model in enumerate(models):
            theta = report.subset_thetas[i][s]
            block = ModelBlock(model, data.values[valid])
            rows.append(block.rows(theta))
        out.append(
            SplitMoments(subset=tuple(S), valid_indices=valid, moments=(rows[0], rows[1]))
        )
    return out


def _split_gradient(sm: SplitMoments) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """g_S = [2*mu_1; -2*mu_2] and the centered stacked moments."""
    f1, f2 = sm.moments
    mu1 = f1.mean(axis=0)
    mu2 = f2.mean(axis=0)
    g = np.concatenate([2.0 * mu1, -2.0 * mu2])
    centered = np.hstack([f1 - mu1, f2 - mu2])
    return g, centered, np.concatenate([mu1, mu2])


def _common_valid_size(split_moments: Sequence[SplitMoments]) -> float:
    sizes = [sm.valid_indices.size for sm in split_moments]
    if min(sizes) < 2:
        raise ValueError("need at least 2 validation observations per split")
    return float(np.mean(sizes))


def estimate_variance_independent(
    split_moments: Sequence[SplitMoments],
    plan: SplitPlan,
) -> VarianceEstimate:
    """Variance treating splits as independent (cross-split covariances 0).

    sigma_hat^2 = (1/C^2) * sum_S (n_bar/n_S) * g_S' Omega_S g_S with
    Omega_S the empirical covariance of the stacked centered validation
    moments of split S. Suited to plans whose validation sets do not
    overlap (e.g. r=2, k=1).
    """
    C = len(split_moments)
    if C != plan.n_subsets:
        raise ValueError("split moments do not match the plan")
    n_bar = _common_valid_size(split_moments)
    components = []
    total = 0.0
    for sm in split_moments:
        g, centered, _ = _split_gradient(sm)
        n_s = centered.shape[0]
        omega = centered.T @ centered / n_s
        contrib = float(g @ omega @ g) * (n_bar / n_s)
        components.append(
            SplitComponent(subset=sm.subset, g_hat=g, cov_block=omega, contribution=contrib)
        )
        total += contrib
    sigma_sq = total / C**2
    return VarianceEstimate(
        mode="independent_splits",
        sigma_sq=sigma_sq,
        n_valid=n_bar,
        components=components,
        degenerate=sigma_sq <= 0.0,
    )


def _clip_psd(V: np.ndarray) -> tuple[np.ndarray, bool]:
    """Symmetrize and clip negative eigenvalues (relative tolerance 1e-10)."""
    V = 0.5 * (V + V.T)
    vals, vecs = np.linalg.eigh(V)
    floor = -1e-10 * max(abs(vals[0]), abs(vals[-1]), 1e-300)
    if vals[0] >= floor:
        return V, False
    clipped = np.clip(vals, 0.0, None)
    return (vecs * clipped) @ vecs.T, True


def estimate_variance_general(
    split_moments: Sequence[SplitMoments],
    plan: SplitPlan,
) -> VarianceEstimate:
    """Variance with cross-split covariance blocks.

    Validation sets of different training subsets may share observations;
    the block for splits (S, S') is accumulated over their shared rows:

        C(S,S') = (n_bar / (n_S * n_S')) * sum_{t in V_S & V_S'}
                  xi_t(S) xi_t(S')'

    with xi the stacked centered moments. The full block matrix is
    symmetrized and eigenvalue-clipped to PSD if needed, then contracted
    with the stacked g_S vectors and divided by C^2.
    """
    C = len(split_moments)
    if C != plan.n_subsets:
        raise ValueError("split moments do not match the plan")
    n_bar = _common_valid_size(split_moments)
    gs, centers, positions = [], [], []
    for sm in split_moments:
        g, centered, _ = _split_gradient(sm)
        gs.append(g)
        centers.append(centered)
        positions.append({int(t): row for row, t in enumerate(sm.valid_indices)})
    d = centers[0].shape[1]
    if any(c.shape[1] != d for c in centers):
        raise ValueError("stacked moment dimension differs across splits")

    V = np.zeros((C * d, C * d))
    components = []
    for a in range(C):
        n_a = centers[a].shape[0]
        for b in range(a, C):
            n_b = centers[b].shape[0]
            shared = sorted(set(positions[a]) & set(positions[b]))
            if not shared:
                continue
            rows_a = centers[a][[positions[a][t] for t in shared]]
            rows_b = centers[b][[positions[b][t] for t in shared]]
            block = (rows_a.T @ rows_b) * (n_bar / (n_a * n_b))
            V[a * d : (a + 1) * d, b * d : (b + 1) * d] = block
            if b != a:
                V[b * d : (b + 1) * d, a * d : (a + 1) * d] = block.T
            else:
                components.append(
                    SplitComponent(
                        subset=split_moments[a].subset,
                        g_hat=gs[a],
                        cov_block=block,
                        contribution=float(gs[a] @ block @ gs[a]),
                    )
                )
    V, repaired = _clip_psd(V)
    R = np.concatenate(gs)
    sigma_sq = float(R @ V @ R) / C**2
    return VarianceEstimate(
        mode="general_split",
        sigma_sq=sigma_sq,
        n_valid=n_bar,
        components=components,
        degenerate=sigma_sq <= 0.0,
        psd_repaired=repaired,
    )


def compute_rcv(
    cv_report: CvReport,
    variance: VarianceEstimate,
    plan: Optional[SplitPlan] = None,
) -> TestResult:
    """The R_CV statistic for a two-model CV report.

    R_CV = sqrt(n_valid) * (Q_valid_1 - Q_valid_2) / sigma_hat, with
    sigma_hat the square root of variance.sigma_sq (see the module
    docstring for why the standard deviation, not the variance, is the
    divisor). Two-sided p-value from the standard normal. direction is
    "H1a" when model 1 fits better (negative difference), "H1b" when model
    2 does.

    Raises
    ------
    ValueError
        If the report does not hold exactly two non-failed models or the
        variance estimate is degenerate (sigma_sq <= 0).
    """
    if cv_report.q_valid.size != 2:
        raise ValueError("the test compares exactly two models")
    if cv_report.failed.any():
        raise ValueError("both models must have valid CV scores")
    if not np.isfinite(variance.sigma_sq) or variance.sigma_sq <= 0.0:
        raise ValueError("degenerate variance estimate (sigma_sq <= 0)")
    plan = plan or cv_report.plan
    n_valid = variance.n_valid
    dq = float(cv_report.q_valid[0] - cv_report.q_valid[1])
    sigma = float(np.sqrt(variance.sigma_sq))
    r_cv = float(np.sqrt(n_valid) * dq / sigma)
    p_value = float(2.0 * stats.norm.sf(abs(r_cv)))
    if dq < 0.0:
        direction = "H1a"
    elif dq > 0.0:
        direction = "H1b"
    else:
        direction = "none"
    return TestResult(
        r_cv=r_cv,
        sigma_hat_sq=variance.sigma_sq,
        n_valid=n_valid,
        p_value_two_sided=p_value,
        direction=direction,
        q_valid=(float(cv_report.q_valid[0]), float(cv_report.q_valid[1])),
    )
