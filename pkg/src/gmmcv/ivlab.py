"""Monte-Carlo study of selection criteria on misspecified linear IV models.

Data-generating process (one replication):

    Z1 (T x c1), Z2 (T x c2)   entries i.i.d. standard normal
    xi1 (T x p1), xi2 (T x p2)   i.i.d. standard normal
    eps (T,)   i.i.d. normal with standard deviation noise_sd
    X1 = Z1 @ delta1 + xi1,  X2 = Z2 @ delta2 + xi2
    y  = X1 @ 1 + X2 @ 1 + (alpha / c2) * Z2 @ 1 + eps

delta matrices are scaled diagonals (delta1_scale, delta2_scale on the
leading p-diagonal, zeros elsewhere), which keeps the instruments relevant
with full rank. The alpha term is spread over Z2's columns so its
magnitude is comparable across c2.

Candidate models: M1 regresses y on X1 with instruments Z1; M2 regresses y
on X2 with instruments Z2. With alpha > 0, M1's exclusion restriction
holds (X2, Z2, eps are independent of Z1) while M2's fails: E[Z2'(y -
X2'theta)] retains a bias component that no theta can remove, so M2 is
globally misspecified yet, with more parameters, tends to fit better in
sample. Selection accuracy is the frequency of choosing M1.

The default scales balance the two candidates' omitted-component
variances. Each model's residual contains the other model's regressor
block plus the shared eps, so with the defaults both residual variances
sit near 380 while M2's unremovable moment bias is (alpha / c2)^2. That
keeps the in-sample minimand comparison in the overfitting regime (M2's
extra parameters soak up sample noise worth (c - p) * var / T, which
dwarfs the bias until T is well past a thousand) while out-of-sample
validation scores, which add variance symmetrically, isolate the bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Optional, Sequence

import numpy as np

from . import rng
from .core import Dataset, EstimationError, MomentModel, OptimizerConfig, WeightingSpec
from .parallel import ordered_map
from .selection import (
    cross_validate,
    select_by_gmm_minimand,
    select_by_information_criterion,
)

__all__ = [
    "IvDesign",
    "IvDataset",
    "IvStudyResult",
    "CRITERIA",
    "generate_iv_data",
    "build_candidates",
    "run_iv_study",
]

CRITERIA = ("cv", "gmm", "gmm-aic", "gmm-bic")


@dataclass(frozen=True)
class IvDesign:
    """Design of one study cell."""

    T: int
    p1: int = 3
    p2: int = 9
    c1: int = 10
    c2: int = 10
    alpha: float = 12.0
    delta1_scale: float = 4.0
    delta2_scale: float = 1.0
    noise_sd: float = 18.0
    r: int = 2
    k: int = 1
    reps: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.p1 > self.c1 or self.p2 > self.c2:
            raise ValueError("identification requires p1 <= c1 and p2 <= c2")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.noise_sd <= 0:
            raise ValueError("noise_sd must be positive")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")


@dataclass(frozen=True)
class IvDataset:
    y: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    Z1: np.ndarray
    Z2: np.ndarray

    def __post_init__(self):
        T = self.y.shape[0]
        for m in (self.X1, self.X2, self.Z1, self.Z2):
            if m.shape[0] != T:
                raise ValueError("row counts differ")


def _delta(c: int, p: int, scale: float) -> np.ndarray:
    d = np.zeros((c, p))
    d[np.arange(p), np.arange(p)] = scale
    return d


def generate_iv_data(design: IvDesign, rep_index: int) -> IvDataset:
    """Simulate one replication, deterministic per (seed, rep_index)."""
    g = rng.stream(design.seed, "iv", rep_index)
    T = design.T
    Z1 = g.standard_normal((T, design.c1))
    Z2 = g.standard_normal((T, design.c2))
    xi1 = g.standard_normal((T, design.p1))
    xi2 = g.standard_normal((T, design.p2))
    eps = design.noise_sd * g.standard_normal(T)
    X1 = Z1 @ _delta(design.c1, design.p1, design.delta1_scale) + xi1
    X2 = Z2 @ _delta(design.c2, design.p2, design.delta2_scale) + xi2
    y = X1.sum(axis=1) + X2.sum(axis=1) + (design.alpha / design.c2) * Z2.sum(axis=1) + eps
    return IvDataset(y=y, X1=X1, X2=X2, Z1=Z1, Z2=Z2)


def pack(ds: IvDataset) -> Dataset:
    """Row layout [y | X1 | X2 | Z1 | Z2] for the moment models."""
    return Dataset(np.column_stack([ds.y, ds.X1, ds.X2, ds.Z1, ds.Z2]))


def _linear_iv_model(
    y_col: int, x_cols: slice, z_cols: slice, p: int, c: int, name: str,
    box: float = 10.0,
) -> MomentModel:
    """Moments f = (y - x'theta) z with exact-mean fast path."""

    def prepare(V: np.ndarray):
        y = V[:, y_col]
        X = V[:, x_cols]
        Z = V[:, z_cols]
        n = V.shape[0]
        return {"Z": Z, "X": X, "y": y, "zy": Z.T @ y / n, "zx": Z.T @ X / n}

    def moment_fn(V: np.ndarray, theta: np.ndarray, aux) -> np.ndarray:
        resid = aux["y"] - aux["X"] @ theta
        return aux["Z"] * resid[:, None]

    def mean_fn(theta: np.ndarray, aux) -> np.ndarray:
        return aux["zy"] - aux["zx"] @ theta

    return MomentModel(
        moment_fn=moment_fn,
        p=p,
        q=c,
        lower=np.full(p, -box),
        upper=np.full(p, box),
        instrument_count=c,
        instrument_fn=lambda V: V[:, z_cols],
        prepare=prepare,
        mean_fn=mean_fn,
        name=name,
    )


def build_candidates(ds: IvDataset) -> tuple[MomentModel, MomentModel]:
    """The two rival models over the packed row layout."""
    p1, p2 = ds.X1.shape[1], ds.X2.shape[1]
    c1, c2 = ds.Z1.shape[1], ds.Z2.shape[1]
    x1 = slice(1, 1 + p1)
    x2 = slice(1 + p1, 1 + p1 + p2)
    z1 = slice(1 + p1 + p2, 1 + p1 + p2 + c1)
    z2 = slice(1 + p1 + p2 + c1, 1 + p1 + p2 + c1 + c2)
    M1 = _linear_iv_model(0, x1, z1, p1, c1, "M1")
    M2 = _linear_iv_model(0, x2, z2, p2, c2, "M2")
    return M1, M2


# Linear IV objectives are convex quadratics; the polish stage does the
# precision work, so a short simplex stage suffices.
_OPT = OptimizerConfig(n_starts=2, max_evals_per_start=1200, seed=0)


def _iv_rep(design: IvDesign, criteria: tuple[str, ...], rep: int) -> dict[str, Optional[bool]]:
    """One replication: criterion name -> chose model 1 (None on failure)."""
    ds = generate_iv_data(design, rep)
    data = pack(ds)
    models = list(build_candidates(ds))
    W = WeightingSpec.identity()
    out: dict[str, Optional[bool]] = {}
    if "cv" in criteria:
        try:
            report = cross_validate(models, data, design.r, design.k, W, _OPT)
            out["cv"] = report.selected_model == 0
        except EstimationError:
            out["cv"] = None
    need_full = {"gmm", "gmm-aic", "gmm-bic"} & set(criteria)
    if need_full:
        try:
            gmm_res = select_by_gmm_minimand(models, data, W, _OPT)
            fits = gmm_res.estimates
            if "gmm" in criteria:
                out["gmm"] = gmm_res.selected_model == 0
            for kind in ("aic", "bic"):
                if f"gmm-{kind}" in criteria:
                    res = select_by_information_criterion(
                        models, data, W, kind=kind, fits=fits
                    )
                    out[f"gmm-{kind}"] = res.selected_model == 0
        except EstimationError:
            for name in need_full:
                out[name] = None
    return out


@dataclass
class IvStudyResult:
    """Per-criterion selection accuracy for one design cell."""

    design: IvDesign
    accuracy: dict[str, float]
    stderr: dict[str, float]
    failures: dict[str, int]
    reps: int


def run_iv_study(
    design: IvDesign,
    criteria: Sequence[str] = CRITERIA,
    parallelism: int = 1,
) -> IvStudyResult:
    """Run the replications and report accuracy with binomial stderr."""
    criteria = tuple(criteria)
    unknown = set(criteria) - set(CRITERIA)
    if unknown:
        raise ValueError(f"unknown criteria: {sorted(unknown)}")
    task = partial(_iv_rep, design, criteria)
    results = ordered_map(task, list(range(design.reps)), parallelism)
    accuracy, stderr, failures = {}, {}, {}
    for name in criteria:
        picks = [r[name] for r in results if r.get(name) is not None]
        failures[name] = design.reps - len(picks)
        if picks:
            acc = float(np.mean(picks))
            accuracy[name] = acc
            stderr[name] = float(np.sqrt(acc * (1.0 - acc) / len(picks)))
        else:
            accuracy[name] = float("nan")
            stderr[name] = float("nan")
    return IvStudyResult(
        design=design,
        accuracy=accuracy,
        stderr=stderr,
        failures=failures,
        reps=design.reps,
    )
