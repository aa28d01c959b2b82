"""Experiment registry, result bundles, and plot-data reshaping.

Each experiment takes a resolved config and an output directory and writes
a bundle: the echoed config (resolved.cfg), one or more CSV tables, a JSON
summary, and a failure log. File contents are pure functions of the
resolved config, independent of the parallelism degree, so re-runs are
byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy import stats

from . import rng
from .config import ConfigError, Key, format_config, resolve
from .conduct import ConductScenario, enumerate_partitions, parse_partition, run_conduct_study
from .core import Dataset, MomentModel, OptimizerConfig, WeightingSpec, estimate
from .hypothesis import (
    collect_split_moments,
    compute_rcv,
    estimate_variance_general,
    estimate_variance_independent,
)
from .ivlab import CRITERIA, IvDesign, run_iv_study
from .mpec import ConstrainedModel, cross_validate_mpec, estimate_mpec
from .parallel import ordered_map
from .selection import cross_validate

__all__ = [
    "EXPERIMENTS",
    "Experiment",
    "run_config_file",
    "run_resolved",
    "emit_plot_data",
    "output_root",
    "atomic_write_text",
]

OUTPUT_ROOT_ENV = "GMMCV_OUTPUT_ROOT"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def atomic_write_text(path: Path, content: str) -> None:
    """Write-then-rename so readers never observe partial files."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    tmp.write_text(content)
    os.replace(tmp, path)


def write_csv(path: Path, header: list[str], rows: list[list[Any]]) -> None:
    def cell(v: Any) -> str:
        if isinstance(v, float):
            return repr(v)
        return str(v)

    lines = [",".join(header)]
    lines.extend(",".join(cell(v) for v in row) for row in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


_COMMON_SCHEMA = {
    "experiment": Key("str", required=True, help="one of the registered experiments"),
    "rng_seed": Key("int", 0, help="root seed for all replication streams"),
    "parallelism": Key("int", 1, help="worker processes for replications"),
    "output_dir": Key("str", required=True, help="bundle directory under the output root"),
}


# ---------------------------------------------------------------------------
# iv_study


_IV_SCHEMA = {
    **_COMMON_SCHEMA,
    "iv.T_list": Key("int_list", (100,), help="sample sizes"),
    "iv.p1": Key("int", 3),
    "iv.p2": Key("int", 9),
    "iv.c1": Key("int", 10),
    "iv.c2": Key("int", 10),
    "iv.alpha": Key("float", 12.0),
    "iv.r": Key("int", 2),
    "iv.k": Key("int", 1),
    "iv.reps": Key("int", 500),
    "iv.criteria": Key("str_list", CRITERIA),
}


def _run_iv(cfg: dict[str, Any], outdir: Path) -> dict[str, Any]:
    if cfg["iv.reps"] < 1:
        raise ConfigError("iv.reps must be >= 1")
    criteria = tuple(cfg["iv.criteria"])
    rows = []
    summary: dict[str, Any] = {"accuracy": {}, "failures": {}}
    for T in cfg["iv.T_list"]:
        design = IvDesign(
            T=T,
            p1=cfg["iv.p1"],
            p2=cfg["iv.p2"],
            c1=cfg["iv.c1"],
            c2=cfg["iv.c2"],
            alpha=cfg["iv.alpha"],
            r=cfg["iv.r"],
            k=cfg["iv.k"],
            reps=cfg["iv.reps"],
            seed=cfg["rng_seed"],
        )
        res = run_iv_study(design, criteria, parallelism=cfg["parallelism"])
        for name in criteria:
            rows.append(
                [
                    name,
                    T,
                    design.p1,
                    design.p2,
                    design.alpha,
                    res.accuracy[name],
                    res.stderr[name],
                    design.reps,
                    res.failures[name],
                ]
            )
            summary["accuracy"].setdefault(name, {})[str(T)] = res.accuracy[name]
            summary["failures"].setdefault(name, {})[str(T)] = res.failures[name]
    write_csv(
        outdir / "iv_accuracy.csv",
        ["criterion", "T", "p1", "p2", "alpha", "accuracy", "stderr", "reps", "failures"],
        rows,
    )
    return summary


# ---------------------------------------------------------------------------
# conduct_study


_CONDUCT_SCHEMA = {
    **_COMMON_SCHEMA,
    "conduct.J": Key("int", 3),
    "conduct.T_list": Key("int_list", (25, 50, 75, 100)),
    "conduct.alpha_list": Key("float_list", (-0.1,)),
    "conduct.true_partition_list": Key("str_list", ("1,2,3",)),
    "conduct.reps": Key("int", 100),
    "conduct.r": Key("int", 2),
    "conduct.k": Key("int", 1),
}


def _cell_name(T: int, alpha: float) -> str:
    return f"T{T}_a{alpha:g}"


def _run_conduct(cfg: dict[str, Any], outdir: Path) -> dict[str, Any]:
    if cfg["conduct.reps"] < 1:
        raise ConfigError("conduct.reps must be >= 1")
    scenarios = []
    for true_label in cfg["conduct.true_partition_list"]:
        parse_partition(true_label)  # validate early
        for alpha in cfg["conduct.alpha_list"]:
            for T in cfg["conduct.T_list"]:
                scenarios.append(
                    ConductScenario(
                        J=cfg["conduct.J"],
                        T=T,
                        alpha=alpha,
                        true_partition=true_label,
                        r=cfg["conduct.r"],
                        k=cfg["conduct.k"],
                        reps=cfg["conduct.reps"],
                        seed=cfg["rng_seed"],
                    )
                )
    cells = run_conduct_study(scenarios, parallelism=cfg["parallelism"])
    score_rows, choice_rows = [], []
    summary: dict[str, Any] = {"cells": {}}
    for cell in cells:
        sc = cell.scenario
        name = _cell_name(sc.T, sc.alpha)
        for i, cand in enumerate(cell.candidates):
            score_rows.append(
                [name, sc.true_partition, cand, float(cell.score_mean[i]), float(cell.score_sd[i])]
            )
            choice_rows.append(
                [name, "cv", sc.true_partition, cand, float(cell.cv_frequency[i])]
            )
            choice_rows.append(
                [name, "gmm", sc.true_partition, cand, float(cell.gmm_frequency[i])]
            )
        summary["cells"][f"{name}|true={sc.true_partition}"] = {
            "reps_used": cell.reps_used,
            "failures": cell.failures,
            "cv_true_frequency": float(
                cell.cv_frequency[cell.candidates.index(parse_partition(sc.true_partition).label)]
            ),
            "gmm_true_frequency": float(
                cell.gmm_frequency[cell.candidates.index(parse_partition(sc.true_partition).label)]
            ),
        }
    write_csv(
        outdir / "conduct_scores.csv",
        ["cell", "true_partition", "candidate", "mean", "sd"],
        score_rows,
    )
    write_csv(
        outdir / "conduct_choice.csv",
        ["cell", "criterion", "true_partition", "candidate", "frequency"],
        choice_rows,
    )
    return summary


# ---------------------------------------------------------------------------
# null_test_study: two equally misspecified models, R_CV null distribution


_NULL_SCHEMA = {
    **_COMMON_SCHEMA,
    "null.T": Key("int", 2000),
    "null.reps": Key("int", 1000),
    "null.r": Key("int", 2),
    "null.k": Key("int", 1),
    "null.scale": Key("float", 2.0, help="sd of the two independent draws"),
    "null.variance_mode": Key("str", "independent", help="independent or general"),
}

# The null design: v = (a, b) i.i.d. N(0, scale^2) independent of each
# other; model i has moments f(v, theta) = [v_i - theta, theta - 1] on
# theta in [-2, 3]. Both models share the pseudo-true theta* = 1/2 and the
# population minimand 1/2 + ..., are globally misspecified (minimand
# bounded away from zero), and their moment gradients are orthogonal to
# the mean moment at theta*, so the CV score difference is asymptotically
# normal with a variance the estimators must recover.


def _null_model(col: int) -> MomentModel:
    def prepare(V: np.ndarray):
        return {"x": V[:, col], "mean": float(V[:, col].mean())}

    def moment_fn(V: np.ndarray, theta: np.ndarray, aux) -> np.ndarray:
        t = theta[0]
        return np.column_stack([aux["x"] - t, np.full(V.shape[0], t - 1.0)])

    def mean_fn(theta: np.ndarray, aux) -> np.ndarray:
        t = theta[0]
        return np.array([aux["mean"] - t, t - 1.0])

    return MomentModel(
        moment_fn=moment_fn,
        p=1,
        q=2,
        lower=np.array([-2.0]),
        upper=np.array([3.0]),
        instrument_count=2,
        prepare=prepare,
        mean_fn=mean_fn,
        name=f"null-{col}",
    )


_NULL_OPT = OptimizerConfig(n_starts=2, max_evals_per_start=400, seed=0)


def _null_rep(params: tuple, rep: int) -> tuple[float, float]:
    seed, T, r, k, scale, mode = params
    g = rng.stream(seed, "null", rep)
    data = Dataset(g.normal(0.0, scale, (T, 2)))
    models = [_null_model(0), _null_model(1)]
    W = WeightingSpec.identity()
    report = cross_validate(models, data, r, k, W, _NULL_OPT)
    sm = collect_split_moments(models, data, report, W)
    if mode == "general":
        var = estimate_variance_general(sm, report.plan)
    else:
        var = estimate_variance_independent(sm, report.plan)
    res = compute_rcv(report, var)
    return res.r_cv, res.p_value_two_sided


def _run_null(cfg: dict[str, Any], outdir: Path) -> dict[str, Any]:
    if cfg["null.reps"] < 1:
        raise ConfigError("null.reps must be >= 1")
    mode = cfg["null.variance_mode"]
    if mode not in ("independent", "general"):
        raise ConfigError("null.variance_mode must be 'independent' or 'general'")
    params = (
        cfg["rng_seed"],
        cfg["null.T"],
        cfg["null.r"],
        cfg["null.k"],
        cfg["null.scale"],
        mode,
    )
    results = ordered_map(
        partial(_null_rep, params), list(range(cfg["null.reps"])), cfg["parallelism"]
    )
    rows = [[i, r, p] for i, (r, p) in enumerate(results)]
    write_csv(outdir / "null_rcv.csv", ["rep", "r_cv", "p_value"], rows)
    r_values = np.array([r for r, _ in results])
    ks_stat, ks_p = stats.kstest(r_values, "norm")
    summary = {
        "rejection_rate_5pct": float(np.mean(np.abs(r_values) > stats.norm.ppf(0.975))),
        "ks_stat": float(ks_stat),
        "ks_pvalue": float(ks_p),
        "mean_rcv": float(r_values.mean()),
        "var_rcv": float(r_values.var(ddof=1)),
    }
    return summary


# ---------------------------------------------------------------------------
# mpec_check: the GMM / GMM-MPEC equivalence identity on linear models


_MPEC_SCHEMA = {
    **_COMMON_SCHEMA,
    "mpec.instances": Key("int", 50),
    "mpec.T": Key("int", 24),
    "mpec.p": Key("int", 2),
    "mpec.c": Key("int", 3),
    "mpec.r": Key("int", 2),
    "mpec.k": Key("int", 1),
}


def make_eliminable_pair(
    T: int, p: int, c: int, seed: int, instance: int
) -> tuple[Dataset, list[ConstrainedModel], list[MomentModel]]:
    """A random linear IV dataset with its constrained and plain models.

    The constrained form carries one eta per observation defined by
    h_t: y_t - x_t' theta - eta_t = 0 and moments eta_t * z_t; eliminating
    eta gives the plain IV model (y - x'theta) z, so the two estimators
    must agree. Two candidates are produced: one using the first
    ceil(p/2) regressors (misspecified) and one using all p (correct).
    """
    g = rng.stream(seed, "mpec", instance)
    Z = g.standard_normal((T, c))
    delta = g.normal(0.5, 0.5, (c, p))
    X = Z @ delta + 0.5 * g.standard_normal((T, p))
    theta_true = g.normal(1.0, 0.5, p)
    y = X @ theta_true + 0.3 * g.standard_normal(T)
    data = Dataset(np.column_stack([y, X, Z]))
    p_small = max(1, (p + 1) // 2)

    def constrained(px: int, name: str) -> ConstrainedModel:
        xs = slice(1, 1 + px)
        zs = slice(1 + p, 1 + p + c)

        def moment_fn(V, theta, sigma, eta):
            return V[:, zs] * eta[:, 0][:, None]

        def constraint_fn(theta, sigma, eta, V):
            return V[:, 0] - V[:, xs] @ theta - eta[:, 0]

        def constraint_jacobian(theta, sigma, eta, V):
            n = V.shape[0]
            A = np.zeros((n, px + n))
            A[:, :px] = -V[:, xs]
            A[np.arange(n), px + np.arange(n)] = -1.0
            return A

        def eta_init(V, theta, sigma):
            return (V[:, 0] - V[:, xs] @ theta)[:, None]

        return ConstrainedModel(
            theta_dim=px,
            sigma_dim=0,
            eta_per_obs=1,
            q=c,
            moment_fn=moment_fn,
            constraint_fn=constraint_fn,
            constraint_jacobian=constraint_jacobian,
            eta_init=eta_init,
            theta_lower=np.full(px, -5.0),
            theta_upper=np.full(px, 5.0),
            instrument_count=c,
            name=name,
        )

    def plain(px: int, name: str) -> MomentModel:
        xs = slice(1, 1 + px)
        zs = slice(1 + p, 1 + p + c)

        def moment_fn(V, theta):
            resid = V[:, 0] - V[:, xs] @ theta
            return V[:, zs] * resid[:, None]

        return MomentModel(
            moment_fn=moment_fn,
            p=px,
            q=c,
            lower=np.full(px, -5.0),
            upper=np.full(px, 5.0),
            instrument_count=c,
            instrument_fn=lambda V: V[:, zs],
            name=name,
        )

    constrained_models = [constrained(p_small, "restricted"), constrained(p, "full")]
    plain_models = [plain(p_small, "restricted"), plain(p, "full")]
    return data, constrained_models, plain_models


def _mpec_instance(params: tuple, instance: int) -> tuple[float, float, bool]:
    seed, T, p, c, r, k = params
    data, cons_models, plain_models = make_eliminable_pair(T, p, c, seed, instance)
    W = WeightingSpec.identity()
    opt = OptimizerConfig(n_starts=2, max_evals_per_start=2000, seed=0)
    fit_mpec = estimate_mpec(cons_models[1], data, W)
    fit_gmm = estimate(plain_models[1], data, W, opt)
    theta_gap = float(np.max(np.abs(fit_mpec.theta - fit_gmm.theta_hat)))
    score_gap = float(abs(fit_mpec.objective_value - fit_gmm.objective_value))
    report_mpec = cross_validate_mpec(cons_models, data, r, k, W)
    report_gmm = cross_validate(plain_models, data, r, k, W, opt)
    same = report_mpec.selected_model == report_gmm.selected_model
    return theta_gap, score_gap, same


def _run_mpec(cfg: dict[str, Any], outdir: Path) -> dict[str, Any]:
    if cfg["mpec.instances"] < 1:
        raise ConfigError("mpec.instances must be >= 1")
    params = (
        cfg["rng_seed"],
        cfg["mpec.T"],
        cfg["mpec.p"],
        cfg["mpec.c"],
        cfg["mpec.r"],
        cfg["mpec.k"],
    )
    results = ordered_map(
        partial(_mpec_instance, params),
        list(range(cfg["mpec.instances"])),
        cfg["parallelism"],
    )
    rows = [
        [i, tg, sg, str(same).lower()] for i, (tg, sg, same) in enumerate(results)
    ]
    write_csv(
        outdir / "mpec_equivalence.csv",
        ["instance", "theta_gap", "score_gap", "same_selection"],
        rows,
    )
    return {
        "max_theta_gap": float(max(tg for tg, _, _ in results)),
        "max_score_gap": float(max(sg for _, sg, _ in results)),
        "all_same_selection": bool(all(same for _, _, same in results)),
    }


# ---------------------------------------------------------------------------
# registry and the run/plot entry points


@dataclass(frozen=True)
class Experiment:
    name: str
    schema: dict[str, Key]
    run: Callable[[dict[str, Any], Path], dict[str, Any]]
    description: str


EXPERIMENTS: dict[str, Experiment] = {
    "iv_study": Experiment(
        "iv_study",
        _IV_SCHEMA,
        _run_iv,
        "selection accuracy of CV/GMM/AIC/BIC on misspecified linear IV",
    ),
    "conduct_study": Experiment(
        "conduct_study",
        _CONDUCT_SCHEMA,
        _run_conduct,
        "collusion-partition detection in logit-demand Bertrand markets",
    ),
    "null_test_study": Experiment(
        "null_test_study",
        _NULL_SCHEMA,
        _run_null,
        "null distribution of the CV score-difference statistic",
    ),
    "mpec_check": Experiment(
        "mpec_check",
        _MPEC_SCHEMA,
        _run_mpec,
        "GMM vs constrained (MPEC) estimation equivalence on linear models",
    ),
}


def run_resolved(resolved: dict[str, Any]) -> Path:
    """Execute a resolved config and write its bundle. Returns the dir."""
    exp = EXPERIMENTS[resolved["experiment"]]
    outdir = output_root() / resolved["output_dir"]
    outdir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(outdir / "resolved.cfg", format_config(resolved, exp.schema))
    summary = exp.run(resolved, outdir)
    summary_full = {"experiment": exp.name, **summary}
    atomic_write_text(
        outdir / "summary.json", json.dumps(summary_full, sort_keys=True, indent=2) + "\n"
    )
    return outdir


def run_config_file(path: str | Path) -> Path:
    """Parse, resolve, and run a config file."""
    from .config import parse_config_text

    raw = parse_config_text(Path(path).read_text())
    if "experiment" not in raw:
        raise ConfigError("config must set 'experiment'")
    name = raw["experiment"]
    if name not in EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {name!r}; known: {sorted(EXPERIMENTS)}"
        )
    resolved = resolve(raw, EXPERIMENTS[name].schema)
    return run_resolved(resolved)


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


def emit_plot_data(bundle_dir: str | Path) -> Path:
    """Reshape a bundle into long-format (series, x, y, stderr) rows."""
    bundle = Path(bundle_dir)
    summary = json.loads((bundle / "summary.json").read_text())
    experiment = summary.get("experiment")
    rows: list[list[Any]] = []
    if experiment == "iv_study":
        header, data = _read_csv(bundle / "iv_accuracy.csv")
        idx = {name: i for i, name in enumerate(header)}
        for row in data:
            rows.append(
                [row[idx["criterion"]], row[idx["T"]], row[idx["accuracy"]], row[idx["stderr"]]]
            )
    elif experiment == "conduct_study":
        header, data = _read_csv(bundle / "conduct_choice.csv")
        idx = {name: i for i, name in enumerate(header)}
        for row in data:
            if row[idx["candidate"]] != row[idx["true_partition"]]:
                continue
            cell = row[idx["cell"]]  # "T{T}_a{alpha}"
            T, alpha = cell[1:].split("_a")
            series = f"{row[idx['criterion']]}|alpha={alpha}|true={row[idx['true_partition']]}"
            rows.append([series, T, row[idx["frequency"]], ""])
    elif experiment == "null_test_study":
        header, data = _read_csv(bundle / "null_rcv.csv")
        idx = {name: i for i, name in enumerate(header)}
        values = np.sort(np.array([float(row[idx["r_cv"]]) for row in data]))
        n = values.size
        theoretical = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
        for t, v in zip(theoretical, values):
            rows.append(["rcv_qq", repr(float(t)), repr(float(v)), ""])
    elif experiment == "mpec_check":
        header, data = _read_csv(bundle / "mpec_equivalence.csv")
        idx = {name: i for i, name in enumerate(header)}
        for row in data:
            rows.append(["theta_gap", row[idx["instance"]], row[idx["theta_gap"]], ""])
            rows.append(["score_gap", row[idx["instance"]], row[idx["score_gap"]], ""])
    else:
        raise ConfigError(f"bundle has unknown experiment {experiment!r}")
    out = bundle / "plot_data.csv"
    write_csv(out, ["series", "x", "y", "stderr"], rows)
    return out
