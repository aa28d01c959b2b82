"""(k,r)-fold cross-validation and rival selection criteria for GMM models.

The data are cut into r contiguous folds. For every subset S of r-k folds
the model is estimated on the observations in S (with the weighting matrix
resolved on those training rows only) and scored on the held-out
complement by the GMM quadratic form of the complement's mean moment under
the training weight. The per-subset scores are averaged into Q_valid and
the model with the smallest average wins.

Rivals: the in-sample GMM minimand, and the information criteria
GMM-AIC = T*Q - 2(|c|-p) and GMM-BIC = T*Q - (|c|-p)*ln T.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    Dataset,
    EstimationError,
    GmmEstimate,
    ModelBlock,
    MomentModel,
    OptimizerConfig,
    WeightingSpec,
    estimate,
    quadratic_form,
)

__all__ = [
    "SplitPlan",
    "CvReport",
    "CriterionResult",
    "make_splits",
    "train_on_subset",
    "validate_on_complement",
    "cross_validate",
    "select_by_gmm_minimand",
    "gmm_aic",
    "gmm_bic",
]

# Scores this close to the minimum count as ties; ties go to the lowest
# model index.
TIE_RESOLUTION = 1e-12


@dataclass(frozen=True)
class SplitPlan:
    """Fold boundaries and the enumeration of training subsets.

    folds[j] holds the 0-based observation indices of fold j+1; fold j
    (1-based) is {floor(T(j-1)/r)+1, ..., floor(Tj/r)} in 1-based index
    terms. training_subsets lists every subset S of {0..r-1} with
    |S| = r - k, in lexicographic order.
    """

    T: int
    r: int
    k: int
    folds: tuple[np.ndarray, ...]
    training_subsets: tuple[tuple[int, ...], ...]

    def train_indices(self, S: Sequence[int]) -> np.ndarray:
        return np.concatenate([self.folds[j] for j in sorted(S)])

    def valid_indices(self, S: Sequence[int]) -> np.ndarray:
        rest = [j for j in range(self.r) if j not in set(S)]
        return np.concatenate([self.folds[j] for j in rest])

    @property
    def n_subsets(self) -> int:
        return len(self.training_subsets)

    def common_valid_size(self) -> float:
        """Mean held-out size |N_{\\S}| across subsets; exact when T % r = 0."""
        sizes = [self.valid_indices(S).size for S in self.training_subsets]
        return float(np.mean(sizes))


def make_splits(T: int, r: int, k: int) -> SplitPlan:
    """Build the fold partition and training-subset enumeration.

    Raises
    ------
    ValueError
        If not 2 <= r <= T or not 1 <= k < r.
    """
    if not 2 <= r <= T:
        raise ValueError(f"need 2 <= r <= T, got r={r}, T={T}")
    if not 1 <= k < r:
        raise ValueError(f"need 1 <= k < r, got k={k}, r={r}")
    edges = [math.floor(T * j / r) for j in range(r + 1)]
    folds = tuple(np.arange(edges[j], edges[j + 1], dtype=int) for j in range(r))
    subsets = tuple(itertools.combinations(range(r), r - k))
    return SplitPlan(T=T, r=r, k=k, folds=folds, training_subsets=subsets)


def train_on_subset(
    model: MomentModel,
    data: Dataset,
    plan: SplitPlan,
    S: Sequence[int],
    W: WeightingSpec | np.ndarray,
    opt: Optional[OptimizerConfig] = None,
) -> GmmEstimate:
    """GMM estimate restricted to the training rows N_S.

    The weighting matrix is resolved on the training rows only, so the
    held-out data never enters the weight.
    """
    S = tuple(S)
    if S not in set(plan.training_subsets):
        raise ValueError(f"{S} is not a training subset of the plan")
    train = data.subset(plan.train_indices(S))
    return estimate(model, train, W, opt)


def validate_on_complement(
    model: MomentModel,
    theta_S: np.ndarray,
    data: Dataset,
    plan: SplitPlan,
    S: Sequence[int],
    W_S: np.ndarray,
) -> float:
    """Score theta_S on the held-out complement N_{\\S}.

    W_S must be the resolved training-subset weighting matrix. Returns the
    quadratic form of the complement's mean moment under W_S.
    """
    valid = plan.valid_indices(S)
    if valid.size == 0:
        raise ValueError("empty validation complement")
    block = ModelBlock(model, data.values[valid])
    g = block.mean(theta_S)
    return quadratic_form(g, np.asarray(W_S, dtype=float))


@dataclass
class CvReport:
    """Cross-validation scores and the resulting selection.

    subset_scores[i, s] is Q_{S,valid} for model i on training subset s (in
    plan.training_subsets order); q_valid[i] is their mean. Failed models
    carry NaN scores and are never selected.
    """

    plan: SplitPlan
    subset_scores: np.ndarray
    q_valid: np.ndarray
    subset_thetas: list[list[Optional[np.ndarray]]]
    failed: np.ndarray
    failure_reasons: list[str]
    selected_model: int
    model_names: list[str] = field(default_factory=list)


def _select_min(scores: np.ndarray, eligible: np.ndarray) -> int:
    """Index of the smallest eligible score; ties at TIE_RESOLUTION go to
    the lowest index."""
    if not np.any(eligible):
        raise EstimationError("every candidate model failed")
    masked = np.where(eligible, scores, np.inf)
    best = float(np.min(masked))
    for i, v in enumerate(masked):
        if v <= best + TIE_RESOLUTION:
            return i
    raise AssertionError("unreachable")


def cross_validate(
    models: Sequence[MomentModel],
    data: Dataset,
    r: int,
    k: int,
    W: WeightingSpec | np.ndarray,
    opt: Optional[OptimizerConfig] = None,
    plan: Optional[SplitPlan] = None,
) -> CvReport:
    """Run (k,r)-fold CV over the candidate models and pick the winner.

    Per model and per training subset: estimate on N_S, then score on the
    complement with the training weight; average the C(r,k) scores. A model
    that fails on any subset is disqualified (averages must compare like
    with like). Raises EstimationError if every model fails.
    """
    if len(models) < 1:
        raise ValueError("need at least one candidate model")
    plan = plan or make_splits(data.T, r, k)
    n_models = len(models)
    n_subsets = plan.n_subsets
    scores = np.full((n_models, n_subsets), np.nan)
    thetas: list[list[Optional[np.ndarray]]] = [[None] * n_subsets for _ in range(n_models)]
    failed = np.zeros(n_models, dtype=bool)
    reasons = [""] * n_models

    for i, model in enumerate(models):
        for s, S in enumerate(plan.training_subsets):
            try:
                fit = train_on_subset(model, data, plan, S, W, opt)
                score = validate_on_complement(
                    model, fit.theta_hat, data, plan, S, fit.weighting_used
                )
            except EstimationError as exc:
                failed[i] = True
                reasons[i] = f"subset {S}: {exc}"
                break
            if not np.isfinite(score):
                failed[i] = True
                reasons[i] = f"subset {S}: non-finite validation score"
                break
            scores[i, s] = score
            thetas[i][s] = fit.theta_hat
    q_valid = scores.mean(axis=1)
    selected = _select_min(q_valid, ~failed)
    return CvReport(
        plan=plan,
        subset_scores=scores,
        q_valid=q_valid,
        subset_thetas=thetas,
        failed=failed,
        failure_reasons=reasons,
        selected_model=selected,
        model_names=[m.name for m in models],
    )


@dataclass
class CriterionResult:
    """Per-model scores under one criterion and the induced selection."""

    criterion: str
    scores: np.ndarray
    selected_model: int
    estimates: list[Optional[GmmEstimate]]
    failed: np.ndarray


def gmm_aic(Q: float, T: int, c: int, p: int) -> float:
    """GMM-AIC = T*Q - 2*(c - p)."""
    return T * Q - 2.0 * (c - p)


def gmm_bic(Q: float, T: int, c: int, p: int) -> float:
    """GMM-BIC = T*Q - (c - p)*ln T."""
    return T * Q - (c - p) * math.log(T)


def _full_sample_estimates(
    models: Sequence[MomentModel],
    data: Dataset,
    W: WeightingSpec | np.ndarray,
    opt: Optional[OptimizerConfig],
) -> tuple[list[Optional[GmmEstimate]], np.ndarray, list[str]]:
    fits: list[Optional[GmmEstimate]] = []
    failed = np.zeros(len(models), dtype=bool)
    reasons = [""] * len(models)
    for i, model in enumerate(models):
        try:
            fits.append(estimate(model, data, W, opt))
        except EstimationError as exc:
            fits.append(None)
            failed[i] = True
            reasons[i] = str(exc)
    return fits, failed, reasons


def select_by_gmm_minimand(
    models: Sequence[MomentModel],
    data: Dataset,
    W: WeightingSpec | np.ndarray,
    opt: Optional[OptimizerConfig] = None,
) -> CriterionResult:
    """Full-sample estimate per model; smallest minimand Q_T wins."""
    fits, failed, _ = _full_sample_estimates(models, data, W, opt)
    scores = np.array(
        [f.objective_value if f is not None else np.nan for f in fits]
    )
    selected = _select_min(scores, ~failed)
    return CriterionResult("gmm", scores, selected, fits, failed)


def select_by_information_criterion(
    models: Sequence[MomentModel],
    data: Dataset,
    W: WeightingSpec | np.ndarray,
    kind: str = "aic",
    opt: Optional[OptimizerConfig] = None,
    fits: Optional[list[Optional[GmmEstimate]]] = None,
) -> CriterionResult:
    """Select by GMM-AIC or GMM-BIC; `fits` reuses full-sample estimates."""
    if kind not in ("aic", "bic"):
        raise ValueError("kind must be 'aic' or 'bic'")
    if fits is None:
        fits, failed, _ = _full_sample_estimates(models, data, W, opt)
    else:
        failed = np.array([f is None for f in fits])
    penal = gmm_aic if kind == "aic" else gmm_bic
    scores = np.array(
        [
            penal(f.objective_value, data.T, m.instrument_count, m.p)
            if f is not None
            else np.nan
            for m, f in zip(models, fits)
        ]
    )
    selected = _select_min(scores, ~failed)
    return CriterionResult(f"gmm-{kind}", scores, selected, fits, failed)
