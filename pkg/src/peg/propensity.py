"""Pooled logistic propensity model fit by Newton-Raphson."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Dataset, ModelIndexSet
from .errors import ConvergenceError, RankDeficiencyError, SeparationError

__all__ = ["PropensityModel", "fit_propensity"]

GRAD_TOL = 1e-8
MAX_ITER = 100
BETA_BOUND = 100.0  # |logit| past this is numerically deterministic treatment


@dataclass(frozen=True)
class PropensityModel:
    """Fitted treatment model: coefficients and per-session scores.

    ``e`` holds one array per subject with the fitted P(A=1 | adjusters),
    aligned with the dataset used for fitting.
    """

    beta: np.ndarray
    columns: ModelIndexSet
    e: tuple[np.ndarray, ...]
    iterations: int
    loglik_path: tuple[float, ...]

    @classmethod
    def from_beta(cls, d: Dataset, columns: ModelIndexSet, beta) -> "PropensityModel":
        """Rebuild fitted scores from stored coefficients (e.g. a fit report)."""
        beta = np.asarray(beta, dtype=float)
        cols = list(columns)
        e = tuple(expit(hi[:, cols] @ beta) for hi in d.h)
        return cls(beta=beta, columns=columns, e=e, iterations=0, loglik_path=())

    def grouped_e(self, d: Dataset) -> list[np.ndarray]:
        """Fitted scores stacked to match ``d.groups()``."""
        return [np.stack([self.e[i] for i in g.idx]) for g in d.groups()]


def _loglik(a: np.ndarray, eta: np.ndarray) -> float:
    # log L = sum a*eta - log(1 + exp(eta)), computed stably
    return float(a @ eta - np.logaddexp(0.0, eta).sum())


def fit_propensity(d: Dataset, columns: ModelIndexSet | None = None) -> PropensityModel:
    """Maximum-likelihood pooled logistic regression of treatment on adjusters.

    Uses Newton-Raphson with step halving, so the log-likelihood never
    decreases. By default all adjuster columns enter the model.

    Raises
    ------
    RankDeficiencyError
        If the selected design columns are collinear.
    SeparationError
        If the likelihood has no finite maximizer.
    ConvergenceError
        If the gradient tolerance is not met within the iteration budget.
    """
    if columns is None:
        columns = ModelIndexSet.full(d.k)
    h_all, a_all, _ = d.stacked()
    cols = list(columns)
    if max(cols) >= d.k:
        raise RankDeficiencyError(f"column index {max(cols)} out of range for K={d.k}")
    x = h_all[:, cols]
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise RankDeficiencyError("propensity design is rank deficient")

    beta = np.zeros(x.shape[1])
    eta = x @ beta
    ll = _loglik(a_all, eta)
    ll_path = [ll]
    iterations = 0
    for iterations in range(1, MAX_ITER + 1):
        p = expit(eta)
        grad = x.T @ (a_all - p)
        if np.max(np.abs(grad)) < GRAD_TOL:
            iterations -= 1
            break
        w = p * (1.0 - p)
        if np.max(w) < 1e-12:
            raise SeparationError("all fitted probabilities degenerate (separation)")
        hess = (x * w[:, None]).T @ x
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise SeparationError(
                "singular information matrix; data may be separated"
            ) from exc
        # halve until the likelihood does not decrease (slack scaled to |ll|,
        # which is large for pooled person-session data)
        slack = 1e-10 * (1.0 + abs(ll))
        scale = 1.0
        for _ in range(40):
            cand = beta + scale * step
            eta_cand = x @ cand
            ll_cand = _loglik(a_all, eta_cand)
            if ll_cand >= ll - slack:
                break
            scale /= 2.0
        beta, eta, ll = cand, eta_cand, ll_cand
        ll_path.append(ll)
        if np.max(np.abs(beta)) > BETA_BOUND:
            raise SeparationError(
                "coefficients diverging; treatment is perfectly separated"
            )
    else:
        raise ConvergenceError(
            f"propensity Newton-Raphson did not reach gradient {GRAD_TOL} "
            f"in {MAX_ITER} iterations"
        )

    p = expit(eta)
    if np.min(p * (1.0 - p)) < 1e-8:
        raise SeparationError(
            "some fitted probabilities are numerically 0 or 1; treatment is "
            "(quasi-)separated and positivity fails"
        )
    e = []
    start = 0
    for yi in d.y:
        stop = start + yi.shape[0]
        e.append(p[start:stop])
        start = stop
    return PropensityModel(
        beta=beta,
        columns=columns,
        e=tuple(e),
        iterations=iterations,
        loglik_path=tuple(ll_path),
    )
