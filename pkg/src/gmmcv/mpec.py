"""Cross-validation for models estimated as constrained optimization.

A constrained model splits its unknowns into model variables (parameters
theta and shared endogenous variables sigma) and observation-specific
endogenous variables eta_t, tied together by equality constraints
h(theta, sigma, eta) = 0. Training minimizes the GMM objective over all
unknowns subject to h = 0 on the training observations. Validation freezes
(theta, sigma) at their trained values and minimizes over the validation
observations' eta only; if the validation constraints are infeasible at
the frozen model variables, the score is +inf and the model is
disqualified (constraint violation on held-out data is treated as model
misfit).

Solver: SLSQP on the full variable vector with equality constraints,
warm-starting eta by per-observation constraint solves; if SLSQP stalls,
an augmented-Lagrangian outer loop over the box optimizer takes over.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize as sciopt

from .core import Dataset, EstimationError, MomentModel, OptimizerConfig, WeightingSpec, quadratic_form
from .optimize import minimize_box
from .selection import CvReport, SplitPlan, _select_min, make_splits

__all__ = [
    "ConstrainedModel",
    "ConstrainedEstimate",
    "estimate_mpec",
    "validate_mpec",
    "cross_validate_mpec",
]

KKT_TOL = 1e-6
FEAS_TOL = 1e-8


@dataclass(frozen=True)
class ConstrainedModel:
    """A GMM model posed as equality-constrained optimization.

    moment_fn(V, theta, sigma, eta) -> (n, q) with eta of shape
    (n, eta_per_obs); constraint_fn(theta, sigma, eta, V) -> (m,) residuals
    required to vanish. constraint_jacobian, if given, returns the (m,
    n_vars) derivative with respect to the packed vector [theta, sigma,
    eta.ravel()]. eta_init, if given, solves the constraints for eta at
    fixed (theta, sigma) and is used for warm starts and fast validation.
    """

    theta_dim: int
    sigma_dim: int
    eta_per_obs: int
    q: int
    moment_fn: Callable[..., np.ndarray]
    constraint_fn: Callable[..., np.ndarray]
    constraint_jacobian: Optional[Callable[..., np.ndarray]] = None
    eta_init: Optional[Callable[..., np.ndarray]] = None
    theta_lower: Optional[np.ndarray] = None
    theta_upper: Optional[np.ndarray] = None
    sigma_lower: Optional[np.ndarray] = None
    sigma_upper: Optional[np.ndarray] = None
    instrument_count: int = 0
    name: str = ""

    def __post_init__(self):
        def box(lo, hi, dim, tag):
            lo = np.full(dim, -10.0) if lo is None else np.atleast_1d(np.asarray(lo, float))
            hi = np.full(dim, 10.0) if hi is None else np.atleast_1d(np.asarray(hi, float))
            if lo.shape != (dim,) or hi.shape != (dim,):
                raise ValueError(f"{tag} bounds must have shape ({dim},)")
            return lo, hi

        tl, tu = box(self.theta_lower, self.theta_upper, self.theta_dim, "theta")
        sl, su = box(self.sigma_lower, self.sigma_upper, self.sigma_dim, "sigma")
        object.__setattr__(self, "theta_lower", tl)
        object.__setattr__(self, "theta_upper", tu)
        object.__setattr__(self, "sigma_lower", sl)
        object.__setattr__(self, "sigma_upper", su)


@dataclass
class ConstrainedEstimate:
    theta: np.ndarray
    sigma: np.ndarray
    eta: np.ndarray
    objective_value: float
    feasibility_residual: float
    kkt_residual: float
    weighting_used: np.ndarray
    solver_trace: dict = field(default_factory=dict)


def _unpack(model: ConstrainedModel, x: np.ndarray, n: int):
    td, sd, ed = model.theta_dim, model.sigma_dim, model.eta_per_obs
    theta = x[:td]
    sigma = x[td : td + sd]
    eta = x[td + sd :].reshape(n, ed) if ed else np.zeros((n, 0))
    return theta, sigma, eta


def _resolve_w(model: ConstrainedModel, W, V: np.ndarray) -> np.ndarray:
    if isinstance(W, np.ndarray):
        Wm = np.asarray(W, dtype=float)
    elif isinstance(W, WeightingSpec):
        if W.kind == "identity":
            Wm = np.eye(model.q)
        elif W.kind == "fixed":
            Wm = W.matrix
        else:
            raise ValueError("constrained estimation supports identity or fixed weighting")
    else:
        raise TypeError("W must be a WeightingSpec or matrix")
    if Wm.shape != (model.q, model.q):
        raise ValueError(f"weighting is {Wm.shape}, model needs {(model.q, model.q)}")
    return Wm


def _default_eta(model: ConstrainedModel, V: np.ndarray, theta, sigma) -> np.ndarray:
    n = V.shape[0]
    if model.eta_per_obs == 0:
        return np.zeros((n, 0))
    if model.eta_init is not None:
        eta = np.asarray(model.eta_init(V, theta, sigma), dtype=float)
        if eta.shape != (n, model.eta_per_obs):
            raise ValueError("eta_init returned wrong shape")
        return eta
    return np.zeros((n, model.eta_per_obs))


def _kkt_residual(objective_grad: np.ndarray, A: np.ndarray) -> float:
    """Stationarity residual: min over multipliers of |grad + A' lam|_inf."""
    if A.size == 0:
        return float(np.max(np.abs(objective_grad))) if objective_grad.size else 0.0
    lam, *_ = np.linalg.lstsq(A.T, -objective_grad, rcond=None)
    return float(np.max(np.abs(objective_grad + A.T @ lam)))


def _fd_grad(fn, x: np.ndarray, h: float = 1e-7) -> np.ndarray:
    g = np.empty(x.size)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (fn(xp) - fn(xm)) / (2 * step)
    return g


def _fd_cons_jac(cons, x: np.ndarray, m: int, h: float = 1e-7) -> np.ndarray:
    A = np.empty((m, x.size))
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        A[:, i] = (cons(xp) - cons(xm)) / (2 * step)
    return A


def estimate_mpec(
    model: ConstrainedModel,
    data: Dataset,
    W: WeightingSpec | np.ndarray = None,
    opt: Optional[OptimizerConfig] = None,
    subset_indices: Optional[np.ndarray] = None,
) -> ConstrainedEstimate:
    """Minimize the GMM objective over (theta, sigma, eta) subject to h=0.

    Runs on the rows in subset_indices when given, else all rows. Succeeds
    only with KKT stationarity below 1e-6 and feasibility below 1e-8.
    """
    W = WeightingSpec.identity() if W is None else W
    V = data.values if subset_indices is None else data.values[np.asarray(subset_indices, int)]
    n = V.shape[0]
    Wm = _resolve_w(model, W, V)
    td, sd, ed = model.theta_dim, model.sigma_dim, model.eta_per_obs

    # Unconstrained, eta-free models reduce exactly to plain GMM.
    probe = model.constraint_fn(
        0.5 * (model.theta_lower + model.theta_upper),
        0.5 * (model.sigma_lower + model.sigma_upper),
        np.zeros((n, ed)),
        V,
    )
    m = np.atleast_1d(np.asarray(probe, dtype=float)).size
    if m == 0 and ed == 0 and sd == 0:
        plain = MomentModel(
            moment_fn=lambda Vb, th: model.moment_fn(Vb, th, np.zeros(0), np.zeros((Vb.shape[0], 0))),
            p=td,
            q=model.q,
            lower=model.theta_lower,
            upper=model.theta_upper,
            instrument_count=model.instrument_count,
            name=model.name,
        )
        from .core import estimate as core_estimate

        fit = core_estimate(plain, Dataset(V), Wm, opt)
        return ConstrainedEstimate(
            theta=fit.theta_hat,
            sigma=np.zeros(0),
            eta=np.zeros((n, 0)),
            objective_value=fit.objective_value,
            feasibility_residual=0.0,
            kkt_residual=0.0,
            weighting_used=Wm,
            solver_trace={"path": "unconstrained"},
        )

    def objective(x: np.ndarray) -> float:
        theta, sigma, eta = _unpack(model, x, n)
        g = np.asarray(model.moment_fn(V, theta, sigma, eta), dtype=float).mean(axis=0)
        return quadratic_form(g, Wm)

    def cons(x: np.ndarray) -> np.ndarray:
        theta, sigma, eta = _unpack(model, x, n)
        return np.atleast_1d(np.asarray(model.constraint_fn(theta, sigma, eta, V), dtype=float))

    theta0 = 0.5 * (model.theta_lower + model.theta_upper)
    sigma0 = 0.5 * (model.sigma_lower + model.sigma_upper)
    eta0 = _default_eta(model, V, theta0, sigma0)
    x0 = np.concatenate([theta0, sigma0, eta0.ravel()])
    bounds = (
        list(zip(model.theta_lower, model.theta_upper))
        + list(zip(model.sigma_lower, model.sigma_upper))
        + [(None, None)] * (n * ed)
    )
    if model.constraint_jacobian is not None:

        def cons_jac(x: np.ndarray) -> np.ndarray:
            theta, sigma, eta = _unpack(model, x, n)
            return np.asarray(model.constraint_jacobian(theta, sigma, eta, V), dtype=float)

    else:
        cons_jac = None

    constraints = [{"type": "eq", "fun": cons}]
    if cons_jac is not None:
        constraints[0]["jac"] = cons_jac

    res = sciopt.minimize(
        objective,
        x0,
        method="SLSQP",
        bounds=bounds,
        constraints=constraints,
        options={"maxiter": 400, "ftol": 1e-14},
    )
    x, trace = np.asarray(res.x, dtype=float), {"path": "slsqp", "status": res.status}
    feas = float(np.max(np.abs(cons(x)))) if m else 0.0
    A = (
        cons_jac(x)
        if cons_jac is not None
        else (_fd_cons_jac(cons, x, m) if m else np.zeros((0, x.size)))
    )
    kkt = _kkt_residual(_fd_grad(objective, x), A)

    if feas > FEAS_TOL or kkt > KKT_TOL:
        x_al, feas_al, kkt_al = _augmented_lagrangian(objective, cons, cons_jac, x0, bounds, m, opt)
        if (feas_al <= FEAS_TOL and kkt_al < kkt) or feas > FEAS_TOL:
            x, feas, kkt = x_al, feas_al, kkt_al
            trace = {"path": "augmented-lagrangian"}
    if feas > FEAS_TOL:
        raise EstimationError(
            f"constraints infeasible: max violation {feas:.3e}", best=x
        )
    if kkt > KKT_TOL:
        raise EstimationError(f"solver stalled: KKT residual {kkt:.3e}", best=x)

    theta, sigma, eta = _unpack(model, x, n)
    return ConstrainedEstimate(
        theta=theta,
        sigma=sigma,
        eta=eta,
        objective_value=objective(x),
        feasibility_residual=feas,
        kkt_residual=kkt,
        weighting_used=Wm,
        solver_trace=trace,
    )


def _augmented_lagrangian(objective, cons, cons_jac, x0, bounds, m, opt):
    """Equality-constrained fallback: penalized L-BFGS-B outer loop."""
    lam = np.zeros(m)
    rho = 1.0
    x = x0.copy()
    lo = np.array([b[0] if b[0] is not None else -1e6 for b in bounds])
    hi = np.array([b[1] if b[1] is not None else 1e6 for b in bounds])
    for _ in range(20):
        def lagr(z):
            h = cons(z)
            return objective(z) + lam @ h + 0.5 * rho * float(h @ h)

        res = sciopt.minimize(
            lagr,
            x,
            method="L-BFGS-B",
            bounds=list(zip(lo, hi)),
            options={"maxfun": 20000, "ftol": 1e-14, "gtol": 1e-10},
        )
        x = np.asarray(res.x, dtype=float)
        h = cons(x)
        lam = lam + rho * h
        feas = float(np.max(np.abs(h))) if m else 0.0
        if feas <= FEAS_TOL:
            A = cons_jac(x) if cons_jac is not None else _fd_cons_jac(cons, x, m)
            kkt = _kkt_residual(_fd_grad(objective, x), A)
            if kkt <= KKT_TOL:
                return x, feas, kkt
        rho *= 10.0
    A = cons_jac(x) if cons_jac is not None else _fd_cons_jac(cons, x, m)
    return x, (float(np.max(np.abs(cons(x)))) if m else 0.0), _kkt_residual(_fd_grad(objective, x), A)


def validate_mpec(
    model: ConstrainedModel,
    theta: np.ndarray,
    sigma: np.ndarray,
    data: Dataset,
    W_matrix: np.ndarray,
    valid_indices: Optional[np.ndarray] = None,
) -> tuple[float, dict]:
    """Score frozen (theta, sigma) on validation rows, solving eta only.

    Returns (score, diagnostics). Infeasible validation constraints give
    score +inf with the max violation recorded in diagnostics.
    """
    V = data.values if valid_indices is None else data.values[np.asarray(valid_indices, int)]
    n = V.shape[0]
    ed = model.eta_per_obs
    Wm = np.asarray(W_matrix, dtype=float)

    def objective_eta(eta_flat: np.ndarray) -> float:
        eta = eta_flat.reshape(n, ed) if ed else np.zeros((n, 0))
        g = np.asarray(model.moment_fn(V, theta, sigma, eta), dtype=float).mean(axis=0)
        return quadratic_form(g, Wm)

    def cons_eta(eta_flat: np.ndarray) -> np.ndarray:
        eta = eta_flat.reshape(n, ed) if ed else np.zeros((n, 0))
        return np.atleast_1d(
            np.asarray(model.constraint_fn(theta, sigma, eta, V), dtype=float)
        )

    eta0 = _default_eta(model, V, theta, sigma)
    m = cons_eta(eta0.ravel()).size
    if ed == 0:
        feas = float(np.max(np.abs(cons_eta(np.zeros(0))))) if m else 0.0
        if feas > FEAS_TOL:
            return float("inf"), {"max_violation": feas}
        return objective_eta(np.zeros(0)), {"max_violation": feas}

    feas0 = float(np.max(np.abs(cons_eta(eta0.ravel())))) if m else 0.0
    if m and feas0 > FEAS_TOL:
        res = sciopt.minimize(
            objective_eta,
            eta0.ravel(),
            method="SLSQP",
            constraints=[{"type": "eq", "fun": cons_eta}],
            options={"maxiter": 300, "ftol": 1e-14},
        )
        eta_flat = np.asarray(res.x, dtype=float)
        feas = float(np.max(np.abs(cons_eta(eta_flat))))
        if feas > FEAS_TOL:
            return float("inf"), {"max_violation": feas}
        return objective_eta(eta_flat), {"max_violation": feas}

    # Warm start already feasible. If the constraints pin eta completely
    # (m = n*ed), the score is determined; otherwise optimize the slack.
    if m == n * ed:
        return objective_eta(eta0.ravel()), {"max_violation": feas0}
    res = sciopt.minimize(
        objective_eta,
        eta0.ravel(),
        method="SLSQP",
        constraints=[{"type": "eq", "fun": cons_eta}] if m else [],
        options={"maxiter": 300, "ftol": 1e-14},
    )
    eta_flat = np.asarray(res.x, dtype=float)
    feas = float(np.max(np.abs(cons_eta(eta_flat)))) if m else 0.0
    if feas > FEAS_TOL:
        return float("inf"), {"max_violation": feas}
    return min(objective_eta(eta_flat), objective_eta(eta0.ravel())), {"max_violation": feas}


def cross_validate_mpec(
    models: Sequence[ConstrainedModel],
    data: Dataset,
    r: int,
    k: int,
    W: WeightingSpec | np.ndarray = None,
    opt: Optional[OptimizerConfig] = None,
    plan: Optional[SplitPlan] = None,
) -> CvReport:
    """Algorithm-1 control flow with constrained training and validation.

    A model is disqualified if any training subset fails to solve or any
    validation split is infeasible (+inf score).
    """
    if len(models) < 1:
        raise ValueError("need at least one candidate model")
    W = WeightingSpec.identity() if W is None else W
    plan = plan or make_splits(data.T, r, k)
    n_models, n_subsets = len(models), plan.n_subsets
    scores = np.full((n_models, n_subsets), np.nan)
    thetas: list[list[Optional[np.ndarray]]] = [[None] * n_subsets for _ in range(n_models)]
    failed = np.zeros(n_models, dtype=bool)
    reasons = [""] * n_models

    for i, model in enumerate(models):
        for s_i, S in enumerate(plan.training_subsets):
            train_idx = plan.train_indices(S)
            valid_idx = plan.valid_indices(S)
            try:
                fit = estimate_mpec(model, data, W, opt, subset_indices=train_idx)
            except EstimationError as exc:
                failed[i] = True
                reasons[i] = f"subset {tuple(S)}: {exc}"
                break
            score, diag = validate_mpec(
                model, fit.theta, fit.sigma, data, fit.weighting_used, valid_idx
            )
            if not np.isfinite(score):
                failed[i] = True
                reasons[i] = (
                    f"subset {tuple(S)}: validation constraints infeasible "
                    f"(max violation {diag.get('max_violation', float('nan')):.3e})"
                )
                break
            scores[i, s_i] = score
            thetas[i][s_i] = fit.theta
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
