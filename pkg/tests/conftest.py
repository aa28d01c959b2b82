"""Shared builders for the test suite.

The linear IV instances double as closed-form oracles: for moments
f = (y - x'theta) z and weighting W, the GMM argmin has the explicit
solution theta = (X'Z W Z'X)^{-1} X'Z W Z'y, computed here with plain
linear algebra so estimator tests never validate the package against
itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gmmcv import rng
from gmmcv.core import Dataset, MomentModel


@dataclass
class LinearIvCase:
    """One simulated linear IV problem with its closed-form solutions."""

    data: Dataset
    model: MomentModel
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    theta_identity: np.ndarray
    theta_gram: np.ndarray

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def c(self) -> int:
        return self.Z.shape[1]


def closed_form_gmm(y: np.ndarray, X: np.ndarray, Z: np.ndarray, W: np.ndarray) -> np.ndarray:
    """theta = (X'Z W Z'X)^{-1} X'Z W Z'y."""
    ZX = Z.T @ X
    Zy = Z.T @ y
    return np.linalg.solve(ZX.T @ W @ ZX, ZX.T @ W @ Zy)


def make_linear_iv_case(
    index: int,
    T: int = 200,
    p: int | None = None,
    c: int | None = None,
    box: float = 10.0,
) -> LinearIvCase:
    """Random well-conditioned instance; dimensions drawn when not given."""
    g = rng.stream(0, "test-oracle", index)
    if p is None:
        p = int(g.integers(1, 5))
    if c is None:
        c = p + int(g.integers(0, 4))
    Z = g.standard_normal((T, c))
    delta = g.normal(0.6, 0.4, (c, p))
    X = Z @ delta + 0.4 * g.standard_normal((T, p))
    theta_true = g.normal(0.0, 1.0, p)
    y = X @ theta_true + 0.5 * g.standard_normal(T)
    data = Dataset(np.column_stack([y, X, Z]))
    xs = slice(1, 1 + p)
    zs = slice(1 + p, 1 + p + c)

    def moment_fn(V: np.ndarray, theta: np.ndarray) -> np.ndarray:
        resid = V[:, 0] - V[:, xs] @ theta
        return V[:, zs] * resid[:, None]

    model = MomentModel(
        moment_fn=moment_fn,
        p=p,
        q=c,
        lower=np.full(p, -box),
        upper=np.full(p, box),
        instrument_count=c,
        instrument_fn=lambda V: V[:, zs],
        name=f"iv-{index}",
    )
    return LinearIvCase(
        data=data,
        model=model,
        y=y,
        X=X,
        Z=Z,
        theta_identity=closed_form_gmm(y, X, Z, np.eye(c)),
        theta_gram=closed_form_gmm(y, X, Z, np.linalg.inv(Z.T @ Z)),
    )
