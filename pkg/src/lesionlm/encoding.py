"""Voxel-wise encoding models: TR alignment, hemodynamic lag, ridge
regression and run-wise cross-validation scored by Pearson correlation."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = tuple(10.0 ** k for k in range(-2, 7))


class DegenerateSeriesError(ValueError):
    pass


@dataclass
class EmbeddingSeries:
    """TR-aligned feature matrices, one ``(n_TRs, dim)`` array per run."""

    runs: list[np.ndarray]
    tr_seconds: float = 2.0
    lag_seconds: float = 4.0


@dataclass
class BoldSeries:
    """Per-run ``(n_TRs, n_voxels)`` z-scored BOLD; ``degenerate`` flags
    voxels that were constant in some run."""

    runs: list[np.ndarray]
    degenerate: np.ndarray | None = None


@dataclass
class EncodingResult:
    r_per_fold: np.ndarray
    lambda_per_fold: np.ndarray
    degenerate: np.ndarray
    r_mean: np.ndarray = field(init=False)

    def __post_init__(self):
        self.r_mean = self.r_per_fold.mean(axis=0)

    @property
    def lambda_chosen(self) -> np.ndarray:
        """Most frequently selected lambda per voxel (ties: smaller)."""
        lam = np.atleast_2d(self.lambda_per_fold)
        if lam.shape[1] == 1:
            lam = np.repeat(lam, self.r_per_fold.shape[1], axis=1)
        out = np.empty(lam.shape[1])
        for v in range(lam.shape[1]):
            vals, counts = np.unique(lam[:, v], return_counts=True)
            out[v] = vals[np.argmax(counts)]
        return out


def zscore_runs(runs):
    """z-score every column of every run; constant columns become zero and
    are flagged."""
    out, flags = [], None
    for Y in runs:
        Y = np.asarray(Y, dtype=np.float64)
        mu = Y.mean(axis=0)
        sd = Y.std(axis=0)
        const = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
        z = np.where(const, 0.0, (Y - mu) / np.where(const, 1.0, sd))
        out.append(z)
        flags = const if flags is None else flags | const
    return out, flags


def align_to_tr(vectors: np.ndarray, onsets: np.ndarray, tr: float, n_trs: int) -> np.ndarray:
    """Average the token vectors falling inside each TR window ``[t*tr, (t+1)*tr)``.
    Windows without tokens give zero rows."""
    vectors = np.asarray(vectors, dtype=np.float64)
    onsets = np.asarray(onsets, dtype=np.float64)
    if len(onsets) and onsets.min() < 0:
        raise ValueError("negative token onset")
    idx = np.floor(onsets / tr).astype(np.int64)
    if len(idx) and idx.max() >= n_trs:
        raise ValueError(f"token onset {onsets.max()} beyond {n_trs} TRs of {tr} s")
    sums = np.zeros((n_trs, vectors.shape[1]))
    np.add.at(sums, idx, vectors)
    counts = np.bincount(idx, minlength=n_trs)[:, None]
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


def lag_shift(lag_seconds: float, tr: float) -> int:
    if lag_seconds < 0:
        raise ValueError("lag must be nonnegative")
    k = lag_seconds / tr
    shift = int(round(k))
    if abs(k - shift) > 1e-9:
        warnings.warn(f"lag {lag_seconds} s is not a multiple of TR {tr} s; "
                      f"rounded to {shift} TRs", stacklevel=2)
    return shift


def apply_lag(series: np.ndarray, lag_seconds: float, tr: float) -> np.ndarray:
    """Feature side of the lag: drop the last ``lag/tr`` rows, so row ``k``
    pairs with BOLD row ``k + lag/tr`` (see :func:`lag_pair`)."""
    k = lag_shift(lag_seconds, tr)
    return series[: len(series) - k]


def lag_pair(features: np.ndarray, bold: np.ndarray, lag_seconds: float, tr: float):
    k = lag_shift(lag_seconds, tr)
    n = min(len(features), len(bold))
    return features[: n - k], bold[k:n]


def ridge_fit(X, Y, lam: float) -> np.ndarray:
    """Ridge weights ``(X'X + lam I)^-1 X'Y`` via SVD.

    At ``lam == 0`` a rank-deficient ``X`` gets the minimum-norm
    least-squares solution and a warning.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    X, Y = np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y must have the same number of rows")
    squeeze = Y.ndim == 1
    if squeeze:
        Y = Y[:, None]
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    if lam == 0:
        tol = s.max(initial=0.0) * max(X.shape) * np.finfo(float).eps
        keep = s > tol
        if not keep.all() or X.shape[0] < X.shape[1]:
            warnings.warn("rank-deficient X at lambda=0; using minimum-norm solution",
                          stacklevel=2)
        d = np.zeros_like(s)
        d[keep] = 1.0 / s[keep]
    else:
        d = s / (s * s + lam)
    W = Vt.T @ (d[:, None] * (U.T @ Y))
    return W[:, 0] if squeeze else W


def pearson(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson needs two 1-D series of equal length")
    if len(a) < 3:
        raise ValueError("pearson needs at least 3 samples")
    ac, bc = a - a.mean(), b - b.mean()
    den = np.sqrt((ac * ac).sum() * (bc * bc).sum())
    if den == 0:
        raise DegenerateSeriesError("zero variance series")
    return float(np.clip((ac * bc).sum() / den, -1.0, 1.0))


def pearson_columns(A: np.ndarray, B: np.ndarray):
    """Column-wise correlation; zero-variance columns give r = 0 and a flag."""
    Ac = A - A.mean(axis=0)
    Bc = B - B.mean(axis=0)
    num = (Ac * Bc).sum(axis=0)
    va, vb = (Ac * Ac).sum(axis=0), (Bc * Bc).sum(axis=0)
    scale_a = np.maximum((A * A).sum(axis=0), 1e-300)
    scale_b = np.maximum((B * B).sum(axis=0), 1e-300)
    degenerate = (va <= 1e-24 * scale_a) | (vb <= 1e-24 * scale_b) | (va == 0) | (vb == 0)
    den = np.sqrt(np.where(degenerate, 1.0, va * vb))
    r = np.where(degenerate, 0.0, num / den)
    return np.clip(r, -1.0, 1.0), degenerate


def _shrink(s, lam):
    if lam > 0:
        return s / (s * s + lam)
    d = np.zeros_like(s)
    keep = s > 1e-12 * s.max(initial=0.0)
    d[keep] = 1.0 / s[keep]
    return d


def _standardize(train_X: np.ndarray, *others):
    mu = train_X.mean(axis=0)
    sd = train_X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return [(X - mu) / sd for X in (train_X, *others)]


def _ridge_path_scores(Xtr, Ytr, Xte, Yte, lambdas):
    """Held-out r for every lambda, shape ``(n_lambdas, n_voxels)``, plus
    degenerate flags per lambda."""
    Xtr, Xte = _standardize(Xtr, Xte)
    ymu = Ytr.mean(axis=0)
    U, s, Vt = np.linalg.svd(Xtr, full_matrices=False)
    UtY = U.T @ (Ytr - ymu)
    XteV = Xte @ Vt.T
    rs, flags = [], []
    for lam in lambdas:
        d = _shrink(s, lam)
        pred = XteV @ (d[:, None] * UtY) + ymu
        r, deg = pearson_columns(pred, Yte)
        rs.append(r)
        flags.append(deg)
    return np.array(rs), np.array(flags)


def cross_validated_encode(X_runs, Y_runs, lambdas=DEFAULT_LAMBDAS, *,
                           lambda_mode: str = "global") -> EncodingResult:
    """Leave-one-run-out encoding with nested leave-one-run-out lambda choice.

    ``X_runs`` / ``Y_runs`` are already lag-paired per run. In ``"global"``
    mode one lambda per outer fold maximises the mean inner r over voxels;
    in ``"voxel"`` mode each voxel picks its own.
    """
    X_runs = [np.asarray(X, dtype=np.float64) for X in X_runs]
    Y_runs = [np.asarray(Y, dtype=np.float64) for Y in Y_runs]
    n = len(X_runs)
    if n < 2 or len(Y_runs) != n:
        raise ValueError("need at least two runs of paired X and Y")
    for X, Y in zip(X_runs, Y_runs):
        if len(X) != len(Y):
            raise ValueError("X and Y runs differ in length")
        if len(X) < 3:
            raise ValueError("every run needs at least 3 TRs")
    if lambda_mode not in ("global", "voxel"):
        raise ValueError(f"unknown lambda_mode {lambda_mode!r}")
    lambdas = np.asarray(lambdas, dtype=np.float64)
    n_vox = Y_runs[0].shape[1]

    r_folds = np.zeros((n, n_vox))
    lam_folds = np.zeros((n, 1 if lambda_mode == "global" else n_vox))
    degenerate = np.zeros(n_vox, dtype=bool)
    for test in range(n):
        train = [i for i in range(n) if i != test]
        if len(lambdas) == 1:
            best = np.zeros(n_vox, dtype=np.int64)
        elif len(train) >= 2:
            inner = np.zeros((len(lambdas), n_vox))
            for held in train:
                fit = [i for i in train if i != held]
                r, _ = _ridge_path_scores(np.concatenate([X_runs[i] for i in fit]),
                                          np.concatenate([Y_runs[i] for i in fit]),
                                          X_runs[held], Y_runs[held], lambdas)
                inner += r
            inner /= len(train)
            if lambda_mode == "global":
                best = np.full(n_vox, int(np.argmax(inner.mean(axis=1))))
            else:
                best = np.argmax(inner, axis=0)
        else:
            # a single training run leaves nothing to select on
            best = np.full(n_vox, len(lambdas) // 2)
        r, deg = _ridge_path_scores(np.concatenate([X_runs[i] for i in train]),
                                    np.concatenate([Y_runs[i] for i in train]),
                                    X_runs[test], Y_runs[test], lambdas)
        cols = np.arange(n_vox)
        r_folds[test] = r[best, cols]
        degenerate |= deg[best, cols]
        lam_folds[test] = lambdas[best[:1]] if lambda_mode == "global" else lambdas[best]
    return EncodingResult(r_folds, lam_folds, degenerate)


def encode_subject(features: EmbeddingSeries, bold: BoldSeries, lambdas=DEFAULT_LAMBDAS,
                   lambda_mode: str = "global") -> EncodingResult:
    """Lag-pair each run of ``features`` with ``bold`` and cross-validate."""
    Xs, Ys = [], []
    for X, Y in zip(features.runs, bold.runs):
        x, y = lag_pair(X, Y, features.lag_seconds, features.tr_seconds)
        Xs.append(x)
        Ys.append(y)
    res = cross_validated_encode(Xs, Ys, lambdas, lambda_mode=lambda_mode)
    if bold.degenerate is not None:
        res.degenerate |= bold.degenerate
    return res
