"""Universal post-selection inference via multiplier-bootstrap joint quantiles.

Simultaneous confidence regions for the estimating-equation solution are
driven by two sup-norm deviations: block I of the subject-level Z vectors
carries each subject's contribution to the right-hand side G, block II the
distinct entries of the matrix W. Joint upper quantiles of the two sup
norms, estimated by a Gaussian multiplier bootstrap, give coordinate-wise
intervals that are valid for any data-driven model selection.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .correlation import WorkingCorrelation, materialize_correlation
from .data import Dataset, ModelIndexSet, standardize_dataset
from .errors import DataError, NumericalError
from .estimator import Interval, MomentCache, MomentMatrices, PenalizedFit, moment_matrices
from .propensity import PropensityModel

__all__ = [
    "ZVectors",
    "build_z_vectors",
    "BootstrapQuantiles",
    "multiplier_bootstrap",
    "UposiReport",
    "uposi_intervals",
    "uposi_region_check",
    "eigen_diagnostic",
    "uposi_infer",
]

MIN_REPLICATES = 200


@dataclass(frozen=True)
class ZVectors:
    """Per-subject contributions to the moment matrices.

    ``z`` has one row per subject and 2*K**2 + 4*K columns: the first 2K
    columns average to G (block I), the rest hold the four families of
    pairwise products averaging to the distinct entries of W (block II),
    each family laid out over column pairs k <= k' in row-major upper-
    triangular order.
    """

    z: np.ndarray
    k: int

    def __post_init__(self):
        k = self.k
        expected = 2 * k * k + 4 * k
        if self.z.shape[1] != expected:
            raise DataError(
                f"Z must have {expected} columns for K={k}, got {self.z.shape[1]}"
            )

    @property
    def n(self) -> int:
        return self.z.shape[0]

    @property
    def block_i(self) -> np.ndarray:
        return self.z[:, : 2 * self.k]

    @property
    def block_ii(self) -> np.ndarray:
        return self.z[:, 2 * self.k:]

    def family(self, f: int) -> np.ndarray:
        """Columns of pair family ``f`` (0..3), shape (n, K(K+1)/2)."""
        if f not in (0, 1, 2, 3):
            raise DataError("family index must be 0..3")
        t = self.k * (self.k + 1) // 2
        start = 2 * self.k + f * t
        return self.z[:, start: start + t]

    def pair_indices(self) -> tuple[np.ndarray, np.ndarray]:
        return np.triu_indices(self.k)


def build_z_vectors(d: Dataset, pm: PropensityModel, corr: WorkingCorrelation,
                    sigma2: float) -> ZVectors:
    """Assemble the subject-level Z rows under the full blip model."""
    if sigma2 <= 0:
        raise DataError("sigma2 must be positive")
    k = d.k
    t = k * (k + 1) // 2
    p = 2 * k + 4 * t
    z = np.empty((d.n, p))
    iu = np.triu_indices(k)
    for g, e in zip(d.groups(), pm.grouped_e(d)):
        _, rinv = materialize_correlation(corr, g.j)
        vinv = rinv / sigma2
        h = g.h
        xw = (g.a - e)[:, :, None] * h
        ah = g.a[:, :, None] * h
        u = g.y @ vinv                      # (m, J)
        ph = np.matmul(vinv, h)             # (m, J, K)
        pa = np.matmul(vinv, ah)
        ht = h.transpose(0, 2, 1)
        xt = xw.transpose(0, 2, 1)
        block = np.concatenate(
            [
                np.einsum("mjk,mj->mk", h, u),
                np.einsum("mjk,mj->mk", xw, u),
                np.matmul(ht, ph)[:, iu[0], iu[1]],
                np.matmul(ht, pa)[:, iu[0], iu[1]],
                np.matmul(xt, ph)[:, iu[0], iu[1]],
                np.matmul(xt, pa)[:, iu[0], iu[1]],
            ],
            axis=1,
        )
        z[g.idx] = block
    return ZVectors(z=z, k=k)


@dataclass(frozen=True)
class BootstrapQuantiles:
    """Joint upper-alpha quantiles for the G and W sup-norm deviations."""

    c_g: float
    c_w: float
    alpha: float
    r_n: int
    seed: int

    def __post_init__(self):
        if self.c_g < 0 or self.c_w < 0:
            raise DataError("quantiles must be nonnegative")


def _replicate_sups(zc: np.ndarray, split: int, r_n: int, seed: int,
                    block_rows: int = 256) -> tuple[np.ndarray, np.ndarray]:
    n, p = zc.shape
    g = np.empty(r_n)
    w = np.empty(r_n)
    scale = 1.0 / math.sqrt(n)
    for j0 in range(0, r_n, block_rows):
        m = min(block_rows, r_n - j0)
        mult = np.empty((m, n))
        for jj in range(m):
            mult[jj] = np.random.default_rng([seed, j0 + jj]).standard_normal(n)
        s = (mult @ zc) * scale
        g[j0: j0 + m] = np.abs(s[:, :split]).max(axis=1)
        w[j0: j0 + m] = np.abs(s[:, split:]).max(axis=1)
    return g, w


def multiplier_bootstrap(z: ZVectors, r_n: int = 1000, alpha: float = 0.05,
                         seed: int = 0) -> BootstrapQuantiles:
    """Estimate the joint sup-norm quantiles with Gaussian multipliers.

    Replicate j recenters the Z rows and weights them with standard-normal
    multipliers derived from (seed, j), so results do not depend on
    execution order. The two sup norms are scaled by their medians and a
    single (1-alpha) quantile of the scaled maximum inflates both axes, so
    the box covers at least a 1-alpha fraction of the replicates exactly.
    """
    if r_n < MIN_REPLICATES:
        raise DataError(f"need at least {MIN_REPLICATES} bootstrap replicates")
    if not 0 < alpha < 1:
        raise DataError("alpha must be in (0, 1)")
    n = z.n
    zc = z.z - z.z.mean(axis=0)
    g, w = _replicate_sups(zc, 2 * z.k, r_n, seed)
    m_g = float(np.median(g))
    m_w = float(np.median(w))
    if m_g == 0.0 and g.max() > 0.0:
        m_g = float(np.median(g[g > 0]))
    if m_w == 0.0 and w.max() > 0.0:
        m_w = float(np.median(w[w > 0]))
    if m_g == 0.0 and m_w == 0.0:
        warnings.warn("all bootstrap replicates degenerate (constant Z rows); "
                      "quantiles set to zero", RuntimeWarning, stacklevel=2)
        return BootstrapQuantiles(0.0, 0.0, alpha, r_n, seed)
    ratios = []
    if m_g > 0:
        ratios.append(g / m_g)
    if m_w > 0:
        ratios.append(w / m_w)
    u = np.max(ratios, axis=0) if len(ratios) > 1 else ratios[0]
    t_hat = float(np.quantile(u, 1.0 - alpha, method="higher"))
    root_n = math.sqrt(n)
    c_g = t_hat * m_g / root_n if m_g > 0 else 0.0
    c_w = t_hat * m_w / root_n if m_w > 0 else 0.0
    return BootstrapQuantiles(c_g=c_g, c_w=c_w, alpha=alpha, r_n=r_n, seed=seed)


@dataclass(frozen=True)
class UposiReport:
    """Simultaneous coordinate-wise intervals for the selected blip terms."""

    intervals: tuple[Interval, ...]
    half_lengths: tuple[float, ...]
    c_g: float
    c_w: float
    theta_l1: float
    alpha: float
    r_n: int
    seed: int
    omega: float | None = None


def uposi_intervals(theta_sel: np.ndarray, mm: MomentMatrices,
                    q: BootstrapQuantiles) -> UposiReport:
    """Coordinate intervals from the joint quantiles.

    ``theta_sel`` stacks the treatment-free coefficients and the selected
    blip coefficients on the same scale as ``mm``. Each half-length is the
    L1 norm of the matching row of W(M)^-1 times C_G + C_W * ||theta||_1.
    """
    theta_sel = np.asarray(theta_sel, dtype=float)
    if theta_sel.shape[0] != mm.w.shape[0]:
        raise DataError("theta length does not match the moment matrices")
    try:
        w_inv = np.linalg.inv(mm.w)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular W(M); cannot form intervals") from exc
    budget = q.c_g + q.c_w * float(np.abs(theta_sel).sum())
    intervals = []
    halves = []
    for col in mm.m:
        row = w_inv[mm.theta_index(col)]
        half = float(np.abs(row).sum()) * budget
        est = float(theta_sel[mm.theta_index(col)])
        intervals.append(Interval(index=col, estimate=est, lower=est - half,
                                  upper=est + half))
        halves.append(half)
    return UposiReport(
        intervals=tuple(intervals),
        half_lengths=tuple(halves),
        c_g=q.c_g,
        c_w=q.c_w,
        theta_l1=float(np.abs(theta_sel).sum()),
        alpha=q.alpha,
        r_n=q.r_n,
        seed=q.seed,
    )


def uposi_region_check(theta: np.ndarray, theta_hat: np.ndarray,
                       mm: MomentMatrices, q: BootstrapQuantiles) -> bool:
    """Whether ``theta`` lies in the simultaneous confidence region."""
    theta = np.asarray(theta, dtype=float)
    theta_hat = np.asarray(theta_hat, dtype=float)
    if theta.shape != theta_hat.shape or theta.shape[0] != mm.w.shape[0]:
        raise DataError("theta dimension mismatch")
    lhs = float(np.max(np.abs(mm.w @ (theta_hat - theta))))
    budget = q.c_g + q.c_w * float(np.abs(theta_hat).sum())
    # relative slack keeps exact-boundary points inside despite rounding
    return lhs <= budget * (1.0 + 1e-12)


def eigen_diagnostic(mms: Iterable[MomentMatrices]) -> float:
    """Smallest eigenvalue (real part) over the supplied submodel matrices.

    Reported as a conditioning diagnostic for the simultaneity guarantee;
    nothing is enforced.
    """
    omega = math.inf
    seen = False
    for mm in mms:
        seen = True
        eig = np.linalg.eigvals(mm.w)
        omega = min(omega, float(np.min(eig.real)))
    if not seen:
        raise DataError("need at least one submodel")
    return omega


def uposi_infer(d: Dataset, fit: PenalizedFit, pm: PropensityModel,
                r_n: int = 1000, alpha: float = 0.05, seed: int = 0) -> UposiReport:
    """Full pipeline: standardize, bootstrap, intervals on the original scale.

    Continuous adjusters are standardized by their pooled mean/SD before the
    bootstrap; coefficient intervals are mapped back by inverse scaling (the
    blip-intercept interval is recentred using the fitted coefficients).
    """
    d_std, scaling = standardize_dataset(d)
    delta_std = scaling.to_standardized_coef(fit.delta)
    psi_std = scaling.to_standardized_coef(fit.psi)
    theta_sel = np.concatenate([delta_std, psi_std[list(fit.selected)]])

    cache = MomentCache(d_std, pm)
    mm_sel = moment_matrices(d_std, pm, fit.corr, fit.sigma2, m=fit.selected,
                             cache=cache)
    z = build_z_vectors(d_std, pm, fit.corr, fit.sigma2)
    q = multiplier_bootstrap(z, r_n=r_n, alpha=alpha, seed=seed)
    rep = uposi_intervals(theta_sel, mm_sel, q)

    submodels = [mm_sel]
    for col in fit.selected:
        if col == 0 or len(fit.selected) <= 1:
            continue
        reduced = ModelIndexSet(tuple(c for c in fit.selected if c != col))
        submodels.append(moment_matrices(d_std, pm, fit.corr, fit.sigma2,
                                         m=reduced, cache=cache))
    omega = eigen_diagnostic(submodels)

    intervals = []
    halves = []
    for iv, half in zip(rep.intervals, rep.half_lengths):
        col = iv.index
        if col == 0:
            est = float(fit.psi[0])
            intervals.append(Interval(index=0, estimate=est, lower=est - half,
                                      upper=est + half))
            halves.append(half)
        else:
            s = scaling.scale[col]
            est = float(fit.psi[col])
            intervals.append(Interval(index=col, estimate=est,
                                      lower=est - half / s, upper=est + half / s))
            halves.append(half / s)
    return UposiReport(
        intervals=tuple(intervals),
        half_lengths=tuple(halves),
        c_g=rep.c_g,
        c_w=rep.c_w,
        theta_l1=rep.theta_l1,
        alpha=alpha,
        r_n=r_n,
        seed=seed,
        omega=omega,
    )
