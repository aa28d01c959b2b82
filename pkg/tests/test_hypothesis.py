"""CV score-difference test: variance estimators and the scaled statistic.

The independent-splits estimator is checked against a fully hand-computed
example; the general estimator must reduce to it when validation sets are
disjoint and stay well defined when they overlap.
"""

import numpy as np
import pytest

from gmmcv import rng
from gmmcv.core import Dataset, MomentModel, OptimizerConfig, WeightingSpec
from gmmcv.hypothesis import (
    SplitMoments,
    VarianceEstimate,
    collect_split_moments,
    compute_rcv,
    estimate_variance_general,
    estimate_variance_independent,
)
from gmmcv.selection import CvReport, cross_validate, make_splits

OPT = OptimizerConfig(n_starts=2, max_evals_per_start=400, seed=0)
W_ID = WeightingSpec.identity()


def equal_fit_model(col: int) -> MomentModel:
    """Moments [v_col - theta, theta - 1] on one column of zero-mean data.

    No theta zeroes both moments, so the model is globally misspecified;
    two independent same-law columns give equally misspecified rivals.
    """

    def moment_fn(V, theta):
        t = theta[0]
        return np.column_stack([V[:, col] - t, np.full(V.shape[0], t - 1.0)])

    return MomentModel(
        moment_fn=moment_fn,
        p=1,
        q=2,
        lower=[-2.0],
        upper=[3.0],
        instrument_count=2,
        name=f"col{col}",
    )


def _hand_split_moments() -> list[SplitMoments]:
    # plan T=4, r=2, k=1: subsets (0,) and (1,), each validating 2 rows
    sm1 = SplitMoments(
        subset=(0,),
        valid_indices=np.array([2, 3]),
        moments=(np.array([[1.0], [3.0]]), np.array([[0.0], [2.0]])),
    )
    sm2 = SplitMoments(
        subset=(1,),
        valid_indices=np.array([0, 1]),
        moments=(np.array([[2.0], [0.0]]), np.array([[1.0], [5.0]])),
    )
    return [sm1, sm2]


def test_independent_variance_hand_example():
    # split 1: means (2, 1), g = (4, -2), centered rows (-1,-1)/(1,1),
    #          omega = [[1,1],[1,1]], g'omega g = 4
    # split 2: means (1, 3), g = (2, -6), omega = [[1,-2],[-2,4]],
    #          g'omega g = 196
    # sigma^2 = (4 + 196) / C^2 = 50
    plan = make_splits(4, 2, 1)
    var = estimate_variance_independent(_hand_split_moments(), plan)
    assert var.sigma_sq == pytest.approx(50.0, rel=1e-12)
    assert var.mode == "independent_splits"
    assert var.n_valid == pytest.approx(2.0)
    assert not var.degenerate
    assert [c.contribution for c in var.components] == pytest.approx([4.0, 196.0])


def test_general_equals_independent_without_overlap():
    plan = make_splits(4, 2, 1)
    sm = _hand_split_moments()
    vi = estimate_variance_independent(sm, plan)
    vg = estimate_variance_general(sm, plan)
    assert vg.sigma_sq == pytest.approx(vi.sigma_sq, rel=1e-12)
    assert vg.mode == "general_split"


def test_general_handles_overlapping_validation_sets():
    # r=3, k=2: each training subset is one fold, validation sets overlap
    g = rng.stream(0, "overlap")
    data = Dataset(g.normal(0.0, 2.0, (90, 2)))
    models = [equal_fit_model(0), equal_fit_model(1)]
    report = cross_validate(models, data, 3, 2, W_ID, OPT)
    sm = collect_split_moments(models, data, report, W_ID)
    vi = estimate_variance_independent(sm, report.plan)
    vg = estimate_variance_general(sm, report.plan)
    assert vg.sigma_sq > 0.0 and np.isfinite(vg.sigma_sq)
    assert len(vg.components) == 3
    # overlap correlations must change the estimate
    assert vg.sigma_sq != pytest.approx(vi.sigma_sq, rel=1e-6)


def test_collect_split_moments_recomputes_validation_rows():
    g = rng.stream(0, "collect")
    data = Dataset(g.normal(0.0, 2.0, (40, 2)))
    models = [equal_fit_model(0), equal_fit_model(1)]
    report = cross_validate(models, data, 2, 1, W_ID, OPT)
    sm = collect_split_moments(models, data, report, W_ID)
    assert len(sm) == 2
    s0 = sm[0]
    theta = report.subset_thetas[0][0]
    valid = report.plan.valid_indices((0,))
    hand = np.column_stack(
        [data.values[valid, 0] - theta[0], np.full(valid.size, theta[0] - 1.0)]
    )
    assert np.allclose(s0.moments[0], hand)


def test_identity_weighting_enforced():
    g = rng.stream(0, "weights")
    data = Dataset(g.normal(0.0, 2.0, (30, 2)))
    models = [equal_fit_model(0), equal_fit_model(1)]
    report = cross_validate(models, data, 2, 1, W_ID, OPT)
    with pytest.raises(ValueError, match="identity"):
        collect_split_moments(models, data, report, WeightingSpec.instrument_gram())
    with pytest.raises(ValueError, match="identity"):
        collect_split_moments(models, data, report, 2.0 * np.eye(2))
    # an explicit identity matrix is fine
    collect_split_moments(models, data, report, np.eye(2))


def _fake_report(q1: float, q2: float) -> CvReport:
    plan = make_splits(4, 2, 1)
    return CvReport(
        plan=plan,
        subset_scores=np.array([[q1, q1], [q2, q2]]),
        q_valid=np.array([q1, q2]),
        subset_thetas=[[np.zeros(1)] * 2, [np.zeros(1)] * 2],
        failed=np.zeros(2, dtype=bool),
        failure_reasons=["", ""],
        selected_model=int(q2 < q1),
    )


def _fake_variance(sigma_sq: float, n_valid: float = 100.0) -> VarianceEstimate:
    return VarianceEstimate(
        mode="independent_splits",
        sigma_sq=sigma_sq,
        n_valid=n_valid,
        components=[],
        degenerate=sigma_sq <= 0.0,
    )


def test_rcv_statistic_hand_value():
    # R = sqrt(100) * (0.8 - 0.5) / sqrt(4) = 1.5; two-sided normal p = 0.1336
    res = compute_rcv(_fake_report(0.8, 0.5), _fake_variance(4.0))
    assert res.r_cv == pytest.approx(1.5, rel=1e-12)
    assert res.p_value_two_sided == pytest.approx(0.13361, abs=1e-4)
    assert res.direction == "H1b"  # model 2 fits better
    assert res.q_valid == (0.8, 0.5)


def test_rcv_direction_and_sign():
    res = compute_rcv(_fake_report(0.2, 0.9), _fake_variance(1.0))
    assert res.r_cv == pytest.approx(-7.0)
    assert res.direction == "H1a"


def test_rcv_degenerate_variance_raises():
    with pytest.raises(ValueError, match="degenerate"):
        compute_rcv(_fake_report(0.8, 0.5), _fake_variance(0.0))


def test_rcv_requires_two_healthy_models():
    report = _fake_report(0.8, 0.5)
    report.failed[1] = True
    with pytest.raises(ValueError):
        compute_rcv(report, _fake_variance(1.0))


def test_null_calibration_smoke():
    # light Monte-Carlo: the scaled statistic should be roughly unit spread
    models = [equal_fit_model(0), equal_fit_model(1)]
    stats_out = []
    for rep in range(150):
        g = rng.stream(0, "null-smoke", rep)
        data = Dataset(g.normal(0.0, 2.0, (300, 2)))
        report = cross_validate(models, data, 2, 1, W_ID, OPT)
        sm = collect_split_moments(models, data, report, W_ID)
        var = estimate_variance_independent(sm, report.plan)
        stats_out.append(compute_rcv(report, var).r_cv)
    arr = np.array(stats_out)
    assert 0.6 < arr.var(ddof=1) < 1.5
    assert abs(arr.mean()) < 0.3
