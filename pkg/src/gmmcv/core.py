"""Moment-condition models and one-step GMM estimation.

A model is a set of moment conditions f(v, theta) whose population mean is
zero at the true parameter when the model is correctly specified. Given a
dataset and a fixed positive semidefinite weighting matrix W, the estimator
minimizes the quadratic form

    Q_T(theta) = gbar(theta)' W gbar(theta),
    gbar(theta) = (1/T) sum_t f(v_t, theta)

over a bounded parameter box. Only one-step GMM with a user-chosen fixed W
is provided (identity, inverse instrument gram, or an explicit matrix);
iterated and two-step weighting are out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .optimize import OptimizerConfig, OptimizerTrace, minimize_box

__all__ = [
    "Dataset",
    "MomentModel",
    "WeightingSpec",
    "GmmEstimate",
    "OptimizerConfig",
    "EstimationError",
    "resolve_weighting",
    "evaluate_objective",
    "estimate",
]


class EstimationError(RuntimeError):
    """Estimation failed; carries the best-so-far point when available."""

    def __init__(self, message: str, best: Optional[np.ndarray] = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class Dataset:
    """An ordered sample of T observations, each a d-vector.

    Order is significant: cross-validation folds are assigned by index.
    """

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ValueError("observations must form a T x d array")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("need T >= 1 observations of dimension d >= 1")
        object.__setattr__(self, "values", arr)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        """Rows at `indices`, preserving the given order."""
        return Dataset(self.values[np.asarray(indices, dtype=int)])


@dataclass(frozen=True)
class MomentModel:
    """A candidate model defined by vectorized moment conditions.

    Parameters
    ----------
    moment_fn : callable
        Maps an observation block V of shape (n, d) and a parameter vector
        theta of shape (p,) to the (n, q) array of per-observation moments.
        When `prepare` is set, it is called as moment_fn(V, theta, aux).
    p, q : int
        Parameter and moment dimensions. Over- or just-identified models
        have q >= p; set `under_identified` to acknowledge q < p.
    lower, upper : array of shape (p,)
        Finite parameter box.
    instrument_count : int
        The |c| used by the information criteria penalties.
    instrument_fn : callable, optional
        Maps an observation block to its (n, c) instrument matrix; required
        by inverse-instrument-gram weighting.
    prepare : callable, optional
        Maps an observation block to an auxiliary object computed once per
        block (derivations that do not depend on theta). Passed back to
        moment_fn and mean_fn.
    mean_fn : callable, optional
        Maps (theta, aux) to the exact (q,) mean of the moment rows. A fast
        path for estimation; must agree with averaging moment_fn rows.
    """

    moment_fn: Callable[..., np.ndarray]
    p: int
    q: int
    lower: np.ndarray
    upper: np.ndarray
    instrument_count: int = 0
    instrument_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    prepare: Optional[Callable[[np.ndarray], Any]] = None
    mean_fn: Optional[Callable[[np.ndarray, Any], np.ndarray]] = None
    under_identified: bool = False
    name: str = ""

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != (self.p,) or hi.shape != (self.p,):
            raise ValueError("parameter bounds must have shape (p,)")
        if np.any(lo > hi):
            raise ValueError("lower bound exceeds upper bound")
        if self.q < self.p and not self.under_identified:
            raise ValueError("q < p: set under_identified=True to allow")
        if self.mean_fn is not None and self.prepare is None:
            raise ValueError("mean_fn requires a prepare hook")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)


class ModelBlock:
    """A model bound to one observation block, with per-block caching.

    Computes the prepare() auxiliary once, then serves per-row moments and
    exact mean moments for any theta.
    """

    def __init__(self, model: MomentModel, values: np.ndarray):
        self.model = model
        self.values = np.asarray(values, dtype=float)
        self.n = self.values.shape[0]
        self.aux = model.prepare(self.values) if model.prepare is not None else None

    def rows(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.model.prepare is not None:
            out = self.model.moment_fn(self.values, theta, self.aux)
        else:
            out = self.model.moment_fn(self.values, theta)
        out = np.asarray(out, dtype=float)
        if out.shape != (self.n, self.model.q):
            raise ValueError(
                f"moment_fn returned shape {out.shape}, expected {(self.n, self.model.q)}"
            )
        return out

    def mean(self, theta: np.ndarray) -> np.ndarray:
        if self.model.mean_fn is not None:
            theta = np.atleast_1d(np.asarray(theta, dtype=float))
            out = np.asarray(self.model.mean_fn(theta, self.aux), dtype=float)
            if out.shape != (self.model.q,):
                raise ValueError("mean_fn returned wrong shape")
            return out
        return self.rows(theta).mean(axis=0)


@dataclass(frozen=True)
class WeightingSpec:
    """How to build the q x q weighting matrix W.

    kind is one of "identity", "instrument_gram" (W = (Z'Z)^{-1} on the
    block W is resolved on), or "fixed" (an explicit matrix).
    """

    kind: str
    matrix: Optional[np.ndarray] = None

    _KINDS = ("identity", "instrument_gram", "fixed")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown weighting kind {self.kind!r}")
        if self.kind == "fixed":
            if self.matrix is None:
                raise ValueError("fixed weighting needs a matrix")
            m = np.asarray(self.matrix, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError("fixed weighting matrix must be square")
            if not np.allclose(m, m.T, atol=1e-10):
                raise ValueError("fixed weighting matrix must be symmetric")
            object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "WeightingSpec":
        return cls("identity")

    @classmethod
    def instrument_gram(cls) -> "WeightingSpec":
        return cls("instrument_gram")

    @classmethod
    def fixed(cls, matrix: np.ndarray) -> "WeightingSpec":
        return cls("fixed", matrix)


@dataclass
class GmmEstimate:
    """Result of a GMM estimation run."""

    theta_hat: np.ndarray
    objective_value: float
    weighting_used: np.ndarray
    optimizer_trace: OptimizerTrace
    weighting_ridged: bool = False
    model_name: str = ""


def _inverse_gram(Z: np.ndarray, strict: bool) -> tuple[np.ndarray, bool]:
    """(Z'Z)^{-1} with a trace-scaled ridge fallback for singular grams.

    No 1/T normalization is applied: the resolved matrix satisfies
    W @ (Z'Z) = I. Scaling W only rescales the objective, not the argmin.
    """
    G = Z.T @ Z
    G = 0.5 * (G + G.T)
    try:
        np.linalg.cholesky(G)  # definiteness check
        cond = np.linalg.cond(G)
        if np.isfinite(cond) and cond < 1e12:
            inv = np.linalg.inv(G)
            return 0.5 * (inv + inv.T), False
    except np.linalg.LinAlgError:
        pass
    if strict:
        raise EstimationError(
            "singular instrument gram Z'Z; enable the ridge fallback or drop "
            "redundant instruments"
        )
    ridge = 1e-10 * (np.trace(G) / max(G.shape[0], 1) + 1.0)
    inv = np.linalg.inv(G + ridge * np.eye(G.shape[0]))
    return 0.5 * (inv + inv.T), True


def _resolve_weighting_info(
    spec: WeightingSpec,
    model: MomentModel,
    values: np.ndarray,
    strict: bool = False,
) -> tuple[np.ndarray, bool]:
    q = model.q
    if spec.kind == "identity":
        return np.eye(q), False
    if spec.kind == "fixed":
        m = spec.matrix
        if m.shape != (q, q):
            raise ValueError(f"fixed weighting is {m.shape}, model needs {(q, q)}")
        return m, False
    # instrument_gram
    if model.instrument_fn is None:
        raise ValueError("instrument_gram weighting needs model.instrument_fn")
    Z = np.asarray(model.instrument_fn(values), dtype=float)
    # Instrument rows may refine observation rows (e.g. one row per product
    # within a market-level observation), so only the shape class is checked.
    if Z.ndim != 2 or Z.shape[0] < values.shape[0]:
        raise ValueError("instrument_fn must return an (m >= n, c) matrix")
    inv, ridged = _inverse_gram(Z, strict)
    c = inv.shape[0]
    if q == c:
        return inv, ridged
    if q % c == 0:
        # Stacked residual blocks (e.g. demand and cost residuals) share the
        # instrument set; tile the gram inverse block-diagonally to q x q.
        reps = q // c
        W = np.zeros((q, q))
        for b in range(reps):
            W[b * c : (b + 1) * c, b * c : (b + 1) * c] = inv
        return W, ridged
    raise ValueError(f"instrument count {c} incompatible with moment dimension {q}")


def resolve_weighting(
    spec: WeightingSpec,
    model: MomentModel,
    data: Dataset | np.ndarray,
    strict: bool = False,
) -> np.ndarray:
    """Materialize the weighting matrix for a model on a data block.

    For instrument_gram the result is the raw inverse (Z'Z)^{-1} computed on
    exactly the rows of `data`; callers doing cross-validation pass the
    training rows so no validation data leaks into the weight.
    """
    values = data.values if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    W, _ = _resolve_weighting_info(spec, model, values, strict)
    return W


def evaluate_objective(
    model: MomentModel,
    data: Dataset,
    theta: np.ndarray,
    W: WeightingSpec | np.ndarray,
) -> float:
    """The GMM quadratic form gbar' W gbar at theta.

    W may be a WeightingSpec (resolved on `data`) or an already resolved
    q x q matrix.
    """
    block = ModelBlock(model, data.values)
    Wm = W if isinstance(W, np.ndarray) else resolve_weighting(W, model, data)
    if Wm.shape != (model.q, model.q):
        raise ValueError(f"weighting is {Wm.shape}, model needs {(model.q, model.q)}")
    g = block.mean(theta)
    return float(g @ Wm @ g)


def quadratic_form(gbar: np.ndarray, W: np.ndarray) -> float:
    """gbar' W gbar, clipped at zero against roundoff. NaN passes through
    so failed moment evaluations surface as optimizer failures, not as
    perfect scores."""
    val = float(gbar @ W @ gbar)
    if np.isnan(val):
        return val
    return val if val > 0.0 else 0.0


def estimate(
    model: MomentModel,
    data: Dataset,
    W: WeightingSpec | np.ndarray,
    opt: OptimizerConfig | None = None,
) -> GmmEstimate:
    """Minimize the GMM objective over the parameter box.

    Deterministic given (model, data, W, opt.seed). Multistart simplex with
    polish; see optimize.minimize_box.

    Raises
    ------
    EstimationError
        If no optimizer start produced a finite objective.
    """
    opt = opt or OptimizerConfig()
    block = ModelBlock(model, data.values)
    if isinstance(W, np.ndarray):
        Wm, ridged = np.asarray(W, dtype=float), False
    else:
        Wm, ridged = _resolve_weighting_info(W, model, data.values)
    if Wm.shape != (model.q, model.q):
        raise ValueError(f"weighting is {Wm.shape}, model needs {(model.q, model.q)}")

    def objective(theta: np.ndarray) -> float:
        g = block.mean(theta)
        return quadratic_form(g, Wm)

    try:
        x, fx, trace = minimize_box(objective, model.lower, model.upper, opt)
    except RuntimeError as exc:
        raise EstimationError(str(exc)) from exc
    return GmmEstimate(
        theta_hat=x,
        objective_value=fx,
        weighting_used=Wm,
        optimizer_trace=trace,
        weighting_ridged=ridged,
        model_name=model.name,
    )
