"""Gradient-times-weight importance, core and language-specific scores,
per-group top-k selection and zero-ablation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .microlm import GradAccumulator, ParamStore, classify

DEFAULT_COMPONENTS = ("attn-q", "attn-k", "attn-v", "attn-o", "mlp-up", "mlp-down")


class LayoutError(ValueError):
    pass


@dataclass
class ImportanceMap:
    language: str
    scores: dict[str, np.ndarray]


@dataclass
class SpecificityScore:
    target: str
    percentiles: dict[str, dict[str, np.ndarray]]  # language -> name -> P
    scores: dict[str, np.ndarray]                  # name -> S_rank


@dataclass
class LesionMask:
    kind: str
    fraction: float
    bits: dict[str, np.ndarray] = field(repr=False)

    def count(self) -> int:
        return int(sum(int(b.sum()) for b in self.bits.values()))


def _check_layout(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> None:
    if set(a) != set(b) or any(np.shape(a[k]) != np.shape(b[k]) for k in a):
        raise LayoutError("tensor layouts do not match")


def importance(base: Mapping[str, np.ndarray], acc: GradAccumulator,
               language: str = "") -> ImportanceMap:
    """|weight| times summed |gradient|, elementwise."""
    _check_layout(base, acc.sums)
    return ImportanceMap(language, {k: np.abs(np.asarray(base[k], dtype=np.float64)) * acc.sums[k]
                                    for k in sorted(base)})


def core_score(maps: list[ImportanceMap]) -> dict[str, np.ndarray]:
    """Elementwise sum of the three languages' importance.

    Values are summed in sorted order so the result is bitwise independent of
    the order of ``maps``.
    """
    if len(maps) != 3:
        raise ValueError(f"core score needs exactly three languages, got {len(maps)}")
    for m in maps[1:]:
        _check_layout(maps[0].scores, m.scores)
    return {k: np.sort(np.stack([m.scores[k] for m in maps]), axis=0).sum(axis=0)
            for k in maps[0].scores}


def groups(layout: Mapping[str, object], scope: str = "group",
           components: Iterable[str] = DEFAULT_COMPONENTS) -> dict[str, list[str]]:
    """Selection groups: one per (layer, component) or a single global one.

    Tensor names inside a group are sorted, which fixes the flat index order
    used for tie-breaking.
    """
    comps = set(components)
    out: dict[str, list[str]] = {}
    for name in sorted(layout):
        layer, comp = classify(name)
        if comp not in comps:
            continue
        if scope == "group":
            key = f"{'-' if layer is None else layer}/{comp}"
        elif scope == "global":
            key = "global"
        else:
            raise ValueError(f"unknown scope {scope!r}")
        out.setdefault(key, []).append(name)
    return out


def _flat(scores: Mapping[str, np.ndarray], names: list[str]) -> np.ndarray:
    return np.concatenate([np.asarray(scores[n], dtype=np.float64).ravel() for n in names])


def _unflat(vec: np.ndarray, names: list[str], layout: Mapping[str, np.ndarray], out: dict) -> None:
    i = 0
    for n in names:
        size = int(np.prod(np.shape(layout[n]), dtype=np.int64))
        out[n] = vec[i:i + size].reshape(np.shape(layout[n]))
        i += size


def ascending_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ascending ranks; equal values ranked by position."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.int64)
    ranks[order] = np.arange(1, len(x) + 1)
    return ranks


def specificity_score(maps: Mapping[str, ImportanceMap] | list[ImportanceMap], target: str,
                      scope: str = "group",
                      components: Iterable[str] = DEFAULT_COMPONENTS) -> SpecificityScore:
    """Rank-percentile specificity ``P_target - max(P_other)`` per parameter.

    ``P = (rank - 1) / (N - 1)`` with rank 1 the least important parameter
    of its scoring group of size ``N``.
    """
    if not isinstance(maps, Mapping):
        maps = {m.language: m for m in maps}
    if target not in maps:
        raise KeyError(f"target language {target!r} not among {sorted(maps)}")
    langs = sorted(maps)
    ref = maps[langs[0]].scores
    for L in langs[1:]:
        _check_layout(ref, maps[L].scores)
    # parameters outside the scoring scope stay NaN
    nan = lambda: {k: np.full(np.shape(v), np.nan) for k, v in ref.items()}
    P: dict[str, dict[str, np.ndarray]] = {L: nan() for L in langs}
    S: dict[str, np.ndarray] = nan()
    for key, names in groups(ref, scope, components).items():
        n = sum(int(np.size(ref[k])) for k in names)
        if n < 2:
            raise ValueError(f"scoring group {key} has fewer than two parameters")
        pct = {L: (ascending_ranks(_flat(maps[L].scores, names)) - 1) / (n - 1) for L in langs}
        others = np.max([pct[L] for L in langs if L != target], axis=0)
        for L in langs:
            _unflat(pct[L], names, ref, P[L])
        _unflat(pct[target] - others, names, ref, S)
    return SpecificityScore(target, P, S)


def group_quota(fraction: float, size: int) -> int:
    # rounding guards against 0.01 * 300 = 3.0000000000000004
    return int(math.ceil(round(fraction * size, 9)))


def _check_fraction(fraction: float) -> None:
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")


def _empty_bits(layout: Mapping[str, object]) -> dict[str, np.ndarray]:
    return {k: np.zeros(np.shape(v), dtype=bool) for k, v in layout.items()}


def select_topk(scores: Mapping[str, np.ndarray], fraction: float = 0.01, scope: str = "group",
                components: Iterable[str] = DEFAULT_COMPONENTS, kind: str = "topk") -> LesionMask:
    """Mark the ``ceil(fraction * n)`` highest scores in each group; ties go
    to the lower (tensor name, flat index)."""
    _check_fraction(fraction)
    bits = _empty_bits(scores)
    for key, names in groups(scores, scope, components).items():
        vec = _flat(scores, names)
        if vec.size == 0:
            raise ValueError(f"selection group {key} is empty")
        k = group_quota(fraction, vec.size)
        order = np.lexsort((np.arange(vec.size), -vec))
        chosen = np.zeros(vec.size, dtype=bool)
        chosen[order[:k]] = True
        _unflat(chosen, names, scores, bits)
    return LesionMask(kind, fraction, bits)


def random_mask(layout: Mapping[str, object], fraction: float = 0.01, seed: int = 0,
                scope: str = "group", components: Iterable[str] = DEFAULT_COMPONENTS) -> LesionMask:
    """Uniform random selection with the same per-group counts as :func:`select_topk`."""
    _check_fraction(fraction)
    rng = np.random.default_rng(seed)
    bits = _empty_bits(layout)
    for key, names in groups(layout, scope, components).items():
        n = sum(int(np.prod(np.shape(layout[k]), dtype=np.int64)) for k in names)
        chosen = np.zeros(n, dtype=bool)
        chosen[rng.choice(n, size=group_quota(fraction, n), replace=False)] = True
        _unflat(chosen, names, layout, bits)
    return LesionMask(f"random:{seed}", fraction, bits)


def apply_lesion(store: ParamStore, mask: LesionMask) -> ParamStore:
    """Copy of ``store`` with masked entries set to exactly 0.0."""
    _check_layout(store, mask.bits)
    out = {}
    for k, w in store.items():
        w = w.copy()
        w[mask.bits[k]] = 0.0
        out[k] = w
    return store.replace(out) if isinstance(store, ParamStore) else out


def overlap_fraction(mask: LesionMask, other: LesionMask) -> float:
    """Share of ``mask``'s selected parameters also selected by ``other``."""
    _check_layout(mask.bits, other.bits)
    n = mask.count()
    both = sum(int((mask.bits[k] & other.bits[k]).sum()) for k in mask.bits)
    return both / n if n else 0.0


def mask_to_store(mask: LesionMask) -> dict[str, np.ndarray]:
    return {k: b.astype(np.float32) for k, b in mask.bits.items()}


def mask_from_store(store: Mapping[str, np.ndarray], kind: str, fraction: float) -> LesionMask:
    return LesionMask(kind, fraction, {k: np.asarray(v) != 0 for k, v in store.items()})


def mask_summary_rows(mask: LesionMask, core: LesionMask | None = None,
                      components: Iterable[str] = DEFAULT_COMPONENTS) -> list[dict]:
    rows = []
    for key, names in groups(mask.bits, "group", components).items():
        layer, comp = key.split("/")
        size = sum(int(mask.bits[n].size) for n in names)
        sel = sum(int(mask.bits[n].sum()) for n in names)
        if core is None:
            ov = ""
        else:
            both = sum(int((mask.bits[n] & core.bits[n]).sum()) for n in names)
            ov = repr(both / sel) if sel else "0.0"
        rows.append({"layer": layer, "component": comp, "group_size": size,
                     "selected": sel, "overlap_with_core": ov})
    return rows


def write_mask_summary(path, mask: LesionMask, core: LesionMask | None = None,
                       components: Iterable[str] = DEFAULT_COMPONENTS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer", "component", "group_size", "selected",
                                           "overlap_with_core"])
        w.writeheader()
        w.writerows(mask_summary_rows(mask, core, components))
