"""Working correlation structures for within-subject dependence.

Supported kinds: independent, exchangeable, ar1, unstructured. A structure
can be materialized as a J x J matrix plus its inverse, and estimated from
residuals by moment methods.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DataError, NumericalError

__all__ = ["WorkingCorrelation", "materialize_correlation", "estimate_correlation"]

KINDS = ("independent", "exchangeable", "ar1", "unstructured")

# Keep estimated correlations strictly inside the SPD region.
RHO_MAX = 0.99


@dataclass(frozen=True)
class WorkingCorrelation:
    """A correlation structure with its parameters.

    ``rho`` is used by the exchangeable and ar1 kinds; ``r`` holds the full
    matrix for the unstructured kind.
    """

    kind: str
    rho: float = 0.0
    r: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown correlation kind {self.kind!r}")
        if self.kind in ("exchangeable", "ar1") and not (-1.0 < self.rho < 1.0):
            raise DataError(f"rho={self.rho} outside (-1, 1)")
        if self.kind == "unstructured":
            if self.r is None:
                raise DataError("unstructured kind needs a matrix")
            r = np.asarray(self.r, dtype=float)
            if r.ndim != 2 or r.shape[0] != r.shape[1]:
                raise DataError("unstructured matrix must be square")
            if not np.allclose(r, r.T, atol=1e-10):
                raise DataError("unstructured matrix must be symmetric")
            if not np.allclose(np.diag(r), 1.0, atol=1e-10):
                raise DataError("unstructured matrix must have unit diagonal")
            object.__setattr__(self, "r", r)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "rho": float(self.rho)}
        if self.r is not None:
            out["r"] = self.r.tolist()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "WorkingCorrelation":
        r = raw.get("r")
        return cls(kind=raw["kind"], rho=float(raw.get("rho", 0.0)),
                   r=np.asarray(r, dtype=float) if r is not None else None)


def materialize_correlation(w: WorkingCorrelation, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Build the J x J correlation matrix and its inverse.

    Independent gives the identity; exchangeable has ``rho`` off-diagonal;
    ar1 has entries ``rho**|j-j'|``; unstructured returns (the leading block
    of) the stored matrix. The inverse comes from a Cholesky factorization,
    which doubles as the positive-definiteness check.
    """
    if j < 1:
        raise DataError("session count must be >= 1")
    if w.kind == "independent":
        eye = np.eye(j)
        return eye, eye.copy()
    if w.kind == "exchangeable":
        if j > 1 and w.rho <= -1.0 / (j - 1):
            raise DataError(f"exchangeable rho={w.rho} not SPD for J={j}")
        r = np.full((j, j), w.rho)
        np.fill_diagonal(r, 1.0)
    elif w.kind == "ar1":
        lags = np.abs(np.subtract.outer(np.arange(j), np.arange(j)))
        r = w.rho ** lags
    else:  # unstructured
        if w.r.shape[0] < j:
            raise DataError(
                f"unstructured matrix of order {w.r.shape[0]} cannot serve J={j}"
            )
        r = np.array(w.r[:j, :j])
    try:
        chol = scipy.linalg.cho_factor(r)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"{w.kind} correlation matrix is not SPD") from exc
    r_inv = scipy.linalg.cho_solve(chol, np.eye(j))
    return r, r_inv


def _standardized_blocks(residuals, sigma2: float) -> list[np.ndarray]:
    """Standardized residuals as 2-d blocks of subjects with a common J.

    Accepts an (n, J) matrix, a sequence of per-subject vectors, or a
    sequence of stacked per-group matrices.
    """
    if sigma2 <= 0:
        raise DataError("sigma2 must be positive")
    sd = np.sqrt(sigma2)
    if isinstance(residuals, np.ndarray) and residuals.ndim == 2:
        return [residuals / sd]
    blocks = []
    for item in residuals:
        arr = np.asarray(item, dtype=float)
        if arr.ndim == 1:
            arr = arr[None, :]
        blocks.append(arr / sd)
    return blocks


def _clamped(rho: float, lower: float, upper: float, kind: str) -> float:
    if lower <= rho <= upper:
        return rho
    clamped = min(max(rho, lower), upper)
    warnings.warn(
        f"estimated {kind} correlation {rho:.4f} outside ({lower:.4f}, "
        f"{upper:.4f}); clamped to {clamped:.4f}",
        RuntimeWarning,
        stacklevel=3,
    )
    return clamped


def estimate_correlation(residuals, kind: str, sigma2: float) -> WorkingCorrelation:
    """Moment estimation of a working correlation from fit residuals.

    ``residuals`` is an (n, J) matrix or a sequence of per-subject vectors.
    Exchangeable averages all within-subject cross-products of standardized
    residuals; ar1 averages lag-1 products; unstructured averages outer
    products and rescales the diagonal to one (balanced data only).
    Out-of-range estimates are clamped into the SPD interior with a warning.
    """
    if kind not in KINDS:
        raise DataError(f"unknown correlation kind {kind!r}")
    if kind == "independent":
        return WorkingCorrelation("independent")
    blocks = _standardized_blocks(residuals, sigma2)
    if kind == "exchangeable":
        total = 0.0
        pairs = 0
        j_max = 1
        for r in blocks:
            j = r.shape[1]
            j_max = max(j_max, j)
            if j < 2:
                continue
            s = r.sum(axis=1)
            total += 0.5 * float((s * s - (r * r).sum(axis=1)).sum())
            pairs += r.shape[0] * j * (j - 1) // 2
        if pairs == 0:
            raise DataError("need at least one subject with 2+ sessions")
        rho = total / pairs
        lower = -RHO_MAX if j_max < 2 else max(-RHO_MAX, -1.0 / (j_max - 1) + 1e-6)
        return WorkingCorrelation("exchangeable", rho=_clamped(rho, lower, RHO_MAX, kind))
    if kind == "ar1":
        total = 0.0
        count = 0
        for r in blocks:
            if r.shape[1] < 2:
                continue
            total += float((r[:, :-1] * r[:, 1:]).sum())
            count += r.shape[0] * (r.shape[1] - 1)
        if count == 0:
            raise DataError("need at least one subject with 2+ sessions")
        rho = total / count
        return WorkingCorrelation("ar1", rho=_clamped(rho, -RHO_MAX, RHO_MAX, kind))
    # unstructured
    j = blocks[0].shape[1]
    if any(r.shape[1] != j for r in blocks):
        raise DataError("unstructured estimation requires balanced data")
    n = sum(r.shape[0] for r in blocks)
    mat = np.zeros((j, j))
    for r in blocks:
        mat += r.T @ r
    mat /= n
    diag = np.sqrt(np.diag(mat))
    if np.any(diag <= 0):
        raise NumericalError("degenerate residual variance in some session")
    mat = mat / np.outer(diag, diag)
    mat = 0.5 * (mat + mat.T)
    # Shrink toward the identity just enough to restore positive definiteness
    # (sample correlation can be singular when n is small relative to J).
    shrink = 0.0
    while True:
        candidate = (1.0 - shrink) * mat + shrink * np.eye(j)
        try:
            scipy.linalg.cho_factor(candidate)
            break
        except scipy.linalg.LinAlgError:
            shrink = 0.05 if shrink == 0.0 else shrink * 2.0
            if shrink > 1.0:
                raise NumericalError("could not make unstructured estimate SPD")
    if shrink > 0.0:
        warnings.warn(
            f"unstructured correlation estimate shrunk toward identity "
            f"(weight {shrink:.2f}) to restore positive definiteness",
            RuntimeWarning,
            stacklevel=2,
        )
        np.fill_diagonal(candidate, 1.0)
    return WorkingCorrelation("unstructured", r=candidate)
