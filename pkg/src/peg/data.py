"""Longitudinal data model: datasets, column schemas, blipped-down outcomes.

A dataset holds, for each subject, the per-session outcomes, binary
treatments, and adjuster rows (intercept first). Subjects may have unequal
numbers of sessions; operations that require balanced data say so.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DataError

__all__ = [
    "ModelIndexSet",
    "Dataset",
    "ColumnSchema",
    "load_dataset",
    "blipped_down",
    "ColumnScaling",
    "standardize_dataset",
]


@dataclass(frozen=True)
class ModelIndexSet:
    """Sorted set of adjuster-column indices; always contains the intercept (0)."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.indices)))
        if not idx or idx[0] != 0:
            raise DataError("model index set must contain the intercept column 0")
        if any(i < 0 for i in idx):
            raise DataError("model indices must be nonnegative")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def full(cls, k: int) -> "ModelIndexSet":
        return cls(tuple(range(k)))

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, item) -> bool:
        return item in self.indices

    def __len__(self) -> int:
        return len(self.indices)

    def position(self, k: int) -> int:
        """Rank of column ``k`` within the set."""
        return self.indices.index(k)


class _Group:
    """Subjects sharing a common session count, stacked into dense arrays."""

    __slots__ = ("j", "idx", "h", "a", "y")

    def __init__(self, j, idx, h, a, y):
        self.j = j        # sessions per subject in this group
        self.idx = idx    # subject positions within the dataset
        self.h = h        # (m, j, K)
        self.a = a        # (m, j)
        self.y = y        # (m, j)


class Dataset:
    """Immutable container of per-subject longitudinal records.

    Parameters
    ----------
    ids : sequence
        Subject identifiers, one per subject.
    y : sequence of 1-d arrays
        Outcomes per subject, ordered by session.
    a : sequence of 1-d arrays
        Binary treatments per subject.
    h : sequence of 2-d arrays
        Adjuster matrices per subject, shape (J_i, K), first column all ones.
    """

    def __init__(self, ids: Sequence, y: Sequence, a: Sequence, h: Sequence):
        if not (len(ids) == len(y) == len(a) == len(h)):
            raise DataError("ids, y, a, h must have one entry per subject")
        if len(ids) == 0:
            raise DataError("dataset has no subjects")
        self.ids = tuple(ids)
        ys, as_, hs = [], [], []
        k = None
        for sid, yi, ai, hi in zip(ids, y, a, h):
            yi = np.array(yi, dtype=float)
            ai = np.array(ai, dtype=float)
            hi = np.array(hi, dtype=float)
            if yi.ndim != 1 or ai.ndim != 1 or hi.ndim != 2:
                raise DataError(f"subject {sid!r}: bad array shapes")
            ji = yi.shape[0]
            if ji < 1:
                raise DataError(f"subject {sid!r}: needs at least one session")
            if ai.shape[0] != ji or hi.shape[0] != ji:
                raise DataError(f"subject {sid!r}: session counts disagree")
            if k is None:
                k = hi.shape[1]
            elif hi.shape[1] != k:
                raise DataError(f"subject {sid!r}: adjuster dimension differs")
            if not (np.isfinite(yi).all() and np.isfinite(hi).all()):
                raise DataError(f"subject {sid!r}: non-finite values")
            if not np.isin(ai, (0.0, 1.0)).all():
                raise DataError(f"subject {sid!r}: treatment must be 0 or 1")
            if not np.all(hi[:, 0] == 1.0):
                raise DataError(f"subject {sid!r}: first adjuster column must be 1")
            yi.setflags(write=False)
            ai.setflags(write=False)
            hi.setflags(write=False)
            ys.append(yi)
            as_.append(ai)
            hs.append(hi)
        self.y = tuple(ys)
        self.a = tuple(as_)
        self.h = tuple(hs)
        self._k = k
        self._groups: list[_Group] | None = None
        self._stacked: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    # ---- basic shape queries -------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def k(self) -> int:
        return self._k

    @property
    def session_counts(self) -> np.ndarray:
        return np.array([len(yi) for yi in self.y])

    @property
    def n_obs(self) -> int:
        return int(self.session_counts.sum())

    @property
    def is_balanced(self) -> bool:
        counts = self.session_counts
        return bool(np.all(counts == counts[0]))

    @property
    def j_common(self) -> int:
        """Common session count; raises for unbalanced data."""
        if not self.is_balanced:
            raise DataError("dataset is unbalanced; no common session count")
        return len(self.y[0])

    # ---- constructors --------------------------------------------------------

    @classmethod
    def from_arrays(cls, y: np.ndarray, a: np.ndarray, h: np.ndarray,
                    ids: Sequence | None = None) -> "Dataset":
        """Balanced constructor from (n, J), (n, J) and (n, J, K) arrays."""
        y = np.asarray(y, dtype=float)
        n = y.shape[0]
        if ids is None:
            ids = tuple(range(n))
        return cls(ids, list(y), list(np.asarray(a, dtype=float)),
                   list(np.asarray(h, dtype=float)))

    # ---- cached dense views --------------------------------------------------

    def groups(self) -> list[_Group]:
        """Subjects grouped by session count, stacked for vectorized work."""
        if self._groups is None:
            counts = self.session_counts
            groups = []
            for j in np.unique(counts):
                idx = np.nonzero(counts == j)[0]
                groups.append(_Group(
                    int(j), idx,
                    np.stack([self.h[i] for i in idx]),
                    np.stack([self.a[i] for i in idx]),
                    np.stack([self.y[i] for i in idx]),
                ))
            self._groups = groups
        return self._groups

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pooled person-session arrays: H (N, K), a (N,), y (N,)."""
        if self._stacked is None:
            self._stacked = (np.concatenate(self.h, axis=0),
                             np.concatenate(self.a),
                             np.concatenate(self.y))
        return self._stacked


# ---- CSV loading -------------------------------------------------------------


@dataclass(frozen=True)
class ColumnSchema:
    """Maps CSV column names to their roles.

    ``covariates=None`` means "every column that is not id/time/outcome/
    treatment, in file order".
    """

    id: str = "id"
    time: str = "time"
    outcome: str = "y"
    treatment: str = "a"
    covariates: tuple[str, ...] | None = None

    @classmethod
    def from_json(cls, path) -> "ColumnSchema":
        with open(path) as fh:
            raw = json.load(fh)
        cov = raw.get("covariates")
        return cls(
            id=raw.get("id", "id"),
            time=raw.get("time", "time"),
            outcome=raw.get("outcome", "y"),
            treatment=raw.get("treatment", "a"),
            covariates=tuple(cov) if cov is not None else None,
        )


def load_dataset(path, schema: ColumnSchema | None = None) -> Dataset:
    """Read a long-format CSV into a `Dataset`.

    The file needs a header with subject id, session index, outcome,
    treatment, and covariate columns. An intercept column is prepended to
    the covariates; sessions are sorted by session index within subject.

    Raises
    ------
    DataError
        On missing values (reported with subject/session), non-binary
        treatment, or missing columns.
    """
    schema = schema or ColumnSchema()
    frame = pd.read_csv(path)
    needed = [schema.id, schema.time, schema.outcome, schema.treatment]
    for col in needed:
        if col not in frame.columns:
            raise DataError(f"column {col!r} not found in {path}")
    if schema.covariates is None:
        covs = [c for c in frame.columns if c not in needed]
    else:
        covs = list(schema.covariates)
        for col in covs:
            if col not in frame.columns:
                raise DataError(f"covariate column {col!r} not found in {path}")

    def _at(col, row):
        value = frame[col].iloc[row]
        return value.item() if hasattr(value, "item") else value

    used = needed + covs
    sub = frame[used]
    if sub.isna().any().any():
        row = int(np.nonzero(sub.isna().any(axis=1).to_numpy())[0][0])
        bad_cols = [c for c in used if pd.isna(frame[c].iloc[row])]
        raise DataError(
            f"missing value in column(s) {bad_cols} at id={_at(schema.id, row)}, "
            f"time={_at(schema.time, row)} (file row {row + 2})"
        )

    a_vals = frame[schema.treatment].to_numpy()
    bad = ~np.isin(a_vals, (0, 1))
    if bad.any():
        row = int(np.nonzero(bad)[0][0])
        raise DataError(
            f"treatment must be 0 or 1; got {_at(schema.treatment, row)} at "
            f"id={_at(schema.id, row)}, time={_at(schema.time, row)} "
            f"(file row {row + 2})"
        )

    ids, ys, as_, hs = [], [], [], []
    for sid, block in frame.groupby(schema.id, sort=False):
        block = block.sort_values(schema.time, kind="stable")
        ids.append(sid)
        ys.append(block[schema.outcome].to_numpy(dtype=float))
        as_.append(block[schema.treatment].to_numpy(dtype=float))
        x = block[covs].to_numpy(dtype=float)
        hs.append(np.column_stack([np.ones(len(block)), x]))
    return Dataset(ids, ys, as_, hs)


# ---- blip arithmetic ----------------------------------------------------------


def blipped_down(y: np.ndarray, a: np.ndarray, h: np.ndarray,
                 psi: np.ndarray) -> np.ndarray:
    """Remove the proximal treatment effect: U_j = y_j - a_j * (h_j ' psi)."""
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    h = np.asarray(h, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if h.shape != (y.shape[0], psi.shape[0]) or a.shape != y.shape:
        raise DataError("blipped_down: dimension mismatch")
    return y - a * (h @ psi)


# ---- standardization of continuous adjusters ----------------------------------


@dataclass(frozen=True)
class ColumnScaling:
    """Pooled location/scale used to standardize continuous adjuster columns.

    Columns with at most two distinct values (and the intercept) are left
    untouched: their entries of ``mean`` are 0 and of ``scale`` are 1.
    """

    mean: np.ndarray
    scale: np.ndarray

    def to_standardized_coef(self, coef: np.ndarray) -> np.ndarray:
        """Coefficients on the original scale -> standardized scale."""
        out = coef * self.scale
        out[0] = coef[0] + float(self.mean[1:] @ coef[1:])
        return out

    def intercept_shift(self, coef: np.ndarray) -> float:
        """Offset absorbed into the intercept when columns are centered."""
        return float(self.mean[1:] @ coef[1:])


def standardize_dataset(d: Dataset) -> tuple[Dataset, ColumnScaling]:
    """Center and scale continuous adjuster columns by pooled mean/SD.

    Returns the transformed dataset and the scaling needed to map
    coefficients and intervals back to the original scale.
    """
    h_all, _, _ = d.stacked()
    k = d.k
    mean = np.zeros(k)
    scale = np.ones(k)
    for col in range(1, k):
        vals = h_all[:, col]
        uniq = np.unique(vals)
        if uniq.size <= 2:
            continue
        sd = float(vals.std())
        if sd <= 0.0:
            continue
        mean[col] = float(vals.mean())
        scale[col] = sd
    new_h = [(hi - mean) / scale for hi in d.h]
    std = Dataset(d.ids, d.y, d.a, new_h)
    return std, ColumnScaling(mean=mean, scale=scale)
