"""Group statistics over per-subject encoding maps: Fisher z, t-tests, FDR,
conjunctions, the Language Processing Index and ROI summaries."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

R_CLAMP = 1.0 - 1e-7


@dataclass
class StatMap:
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    sig: np.ndarray
    df: int
    degenerate: np.ndarray
    threshold: float = 0.01


@dataclass
class LpiMap:
    """LPI values, NaN where the target's significance mask excludes the voxel."""

    values: np.ndarray
    target: str
    epsilon: float

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.values)


def fisher_z(r):
    r = np.asarray(r, dtype=np.float64)
    if np.any(np.abs(r) >= 1):
        warnings.warn("|r| >= 1 clamped before Fisher transform", stacklevel=2)
        r = np.clip(r, -R_CLAMP, R_CLAMP)
    z = np.arctanh(r)
    return float(z) if z.ndim == 0 else z


def one_sample_ttest(x, mu0: float = 0.0):
    """Two-sided one-sample t-test along axis 0 (subjects).

    Returns ``(t, p, df, degenerate)``. Zero-variance columns are flagged
    and reported as ``t = 0``, with ``p = 1`` when their mean equals ``mu0``
    and ``p = 0`` otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x - mu0
    n = d.shape[0]
    if n < 2:
        raise ValueError("t-test needs at least two subjects")
    mean = d.mean(axis=0)
    sd = d.std(axis=0, ddof=1)
    df = n - 1
    # sd this small relative to the values is round-off, not spread
    degenerate = sd <= 1e-12 * np.maximum(np.abs(d).max(axis=0), 1e-300)
    safe_sd = np.where(degenerate, 1.0, sd)
    t = np.where(degenerate, 0.0, mean / (safe_sd / math.sqrt(n)))
    p = np.where(degenerate, np.where(mean == 0, 1.0, 0.0), 2.0 * sps.t.sf(np.abs(t), df))
    if t.ndim == 0:
        return float(t), float(p), df, bool(degenerate)
    return t, p, df, degenerate


def paired_ttest(a, b):
    """Paired t-test of ``a - b`` across subjects (axis 0)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have the same shape")
    return one_sample_ttest(a - b, 0.0)


def fdr_correct(p, q_level: float = 0.01, method: str = "BH"):
    """Step-up FDR control. Returns ``(q_values, significant)``.

    ``BH`` is Benjamini-Hochberg; ``BY`` adds the harmonic correction for
    arbitrary dependence.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty p-value vector")
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    flat = p.ravel()
    if method == "BH":
        c = 1.0
    elif method == "BY":
        c = float(np.sum(1.0 / np.arange(1, m + 1)))
    else:
        raise ValueError(f"unknown FDR method {method!r}")
    order = np.argsort(flat, kind="stable")
    ps = flat[order]
    rank = np.arange(1, m + 1)
    below = ps <= rank / (m * c) * q_level
    k = rank[below].max() if below.any() else 0
    sig = np.zeros(m, dtype=bool)
    sig[order[:k]] = True
    adj = np.minimum.accumulate((ps * m * c / rank)[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(adj, 1.0)
    return q.reshape(p.shape), sig.reshape(p.shape)


def stat_map(t, p, df, degenerate, q_level: float = 0.01, method: str = "BH") -> StatMap:
    q, sig = fdr_correct(p, q_level, method)
    return StatMap(np.asarray(t), np.asarray(p), q, sig, df, np.asarray(degenerate), q_level)


def conjunction_mask(*sig_maps) -> np.ndarray:
    if len(sig_maps) == 1 and not isinstance(sig_maps[0], np.ndarray):
        sig_maps = tuple(sig_maps[0])
    if not sig_maps:
        raise ValueError("no masks given")
    shapes = {np.shape(m) for m in sig_maps}
    if len(shapes) != 1:
        raise ValueError(f"mask shapes differ: {shapes}")
    return np.logical_and.reduce([np.asarray(m, dtype=bool) for m in sig_maps])


def minmax_rectify(t_map) -> np.ndarray:
    """Set negative t-values to zero, then scale to [0, 1]."""
    t = np.maximum(np.asarray(t_map, dtype=np.float64), 0.0)
    lo, hi = t.min(), t.max()
    if hi == lo:
        raise ValueError("cannot min-max normalise a constant map")
    return (t - lo) / (hi - lo)


def lpi(t_target, t_others, epsilon: float = 1e-6, sig_mask=None, target: str = "") -> LpiMap:
    """Language Processing Index on normalised t-maps.

    ``(T_target - mean(T_others)) / (T_target + mean(T_others) + epsilon)``,
    restricted to ``sig_mask``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    tt = np.asarray(t_target, dtype=np.float64)
    others = np.mean([np.asarray(o, dtype=np.float64) for o in t_others], axis=0)
    vals = (tt - others) / (tt + others + epsilon)
    if sig_mask is not None:
        vals = np.where(np.asarray(sig_mask, dtype=bool), vals, np.nan)
    return LpiMap(vals, target, epsilon)


def cross_model_average(maps: list[LpiMap]) -> LpiMap:
    if not maps:
        raise ValueError("no LPI maps to average")
    targets = {m.target for m in maps}
    if len(targets) != 1:
        raise ValueError(f"maps have different targets: {targets}")
    stack = np.stack([m.values for m in maps])
    n = (~np.isnan(stack)).sum(axis=0)
    total = np.nansum(stack, axis=0)
    vals = np.where(n > 0, total / np.maximum(n, 1), np.nan)
    return LpiMap(vals, maps[0].target, maps[0].epsilon)


def roi_summary(r_map, rois: dict[str, list[int]]) -> dict[str, float]:
    r_map = np.asarray(r_map, dtype=np.float64)
    out = {}
    for name, idx in rois.items():
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            raise ValueError(f"ROI {name!r} is empty")
        if idx.min() < 0 or idx.max() >= r_map.size:
            raise IndexError(f"ROI {name!r} has voxel indices out of range")
        out[name] = float(r_map[idx].mean())
    return out


def load_rois(path) -> dict[str, list[int]]:
    with open(path) as fh:
        rois = json.load(fh)
    return {str(k): [int(i) for i in v] for k, v in rois.items()}
