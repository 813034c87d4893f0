"""Token adaptive pruning.

Per-block scores are softmaxed over the patch tokens (CLS column dropped)
and averaged into one importance distribution.  Tokens are then visited in
ascending importance, ties broken by ascending grid index, and the longest
prefix whose cumulative mass stays within ``tau`` is pruned.  Pruning is a
routing decision made on plain arrays; no gradient passes through it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

STRATEGIES = ("adaptive", "fixed_k", "cls_attention", "penultimate_only", "none")
VIEW_POLICIES = ("single_view", "multi_view")

# cumulative float sums of a distribution can overshoot 1.0 by a few ulps
MASS_TOL = 1e-12
TIE_DECIMALS = 12


@dataclass
class MultiScaleScore:
    s_m: np.ndarray
    per_layer: list[np.ndarray] = field(default_factory=list)
    source_indices: np.ndarray | None = None

    def __post_init__(self):
        self.s_m = np.asarray(self.s_m, dtype=np.float64)
        if self.source_indices is None:
            self.source_indices = np.arange(len(self.s_m))


@dataclass
class PruneOutcome:
    retained: list[int]
    pruned: list[int]
    pruned_mass: float
    strategy: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "retained": [int(i) for i in self.retained],
                "pruned": [int(i) for i in self.pruned],
                "pruned_mass": float(self.pruned_mass),
                "strategy": self.strategy,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "PruneOutcome":
        d = json.loads(text)
        return cls(list(d["retained"]), list(d["pruned"]), float(d["pruned_mass"]), d["strategy"])

    @classmethod
    def identity(cls, n: int) -> "PruneOutcome":
        return cls(list(range(n)), [], 0.0, "none")


@dataclass
class PruneConfig:
    tau: float = 0.2
    strategy: str = "adaptive"
    fixed_k: int = 0
    view_policy: str = "single_view"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.view_policy not in VIEW_POLICIES:
            raise ValueError(f"unknown view policy {self.view_policy!r}")
        if self.fixed_k < 0:
            raise ValueError("fixed_k must be >= 0")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def fuse_scores(scores: Sequence) -> MultiScaleScore:
    """Mean over layers of softmax(scores without the CLS entry).

    ``scores`` holds raw (N+1,) vectors or ScoreVector-like objects with a
    ``values`` attribute.
    """
    if not len(scores):
        raise ValueError("need at least one score vector")
    raw = [np.asarray(getattr(s, "values", s), dtype=np.float64) for s in scores]
    lengths = {r.shape[-1] for r in raw}
    if len(lengths) != 1:
        raise ValueError(f"score vectors differ in length: {sorted(lengths)}")
    per_layer = [softmax(r[..., 1:]) for r in raw]
    return MultiScaleScore(np.mean(per_layer, axis=0), per_layer)


def fuse_scores_batch(scores: Sequence[np.ndarray]) -> np.ndarray:
    """Batched fuse: list of (B, N+1) -> (B, N)."""
    return np.mean([softmax(np.asarray(s)[:, 1:]) for s in scores], axis=0)


def tie_keys(s_m: np.ndarray) -> np.ndarray:
    """Sort keys where scores equal up to float noise compare equal.

    Averaging softmaxes over layers can give mathematically tied patches
    values a few ulps apart, and which one comes out larger depends on
    rounding (e.g. after a constant shift of one layer).  Snapping to a
    1e-12 grid lets the index decide instead.
    """
    return np.round(np.asarray(s_m, dtype=np.float64), TIE_DECIMALS)


def ascending_order(s_m: np.ndarray) -> np.ndarray:
    # stable sort == ties resolved by ascending index
    return np.argsort(tie_keys(s_m), kind="stable")


def _outcome(s_m: np.ndarray, order: np.ndarray, count: int, strategy: str, src: np.ndarray) -> PruneOutcome:
    pruned = np.sort(order[:count])
    retained = np.sort(order[count:])
    return PruneOutcome(
        [int(src[i]) for i in retained],
        [int(src[i]) for i in pruned],
        float(s_m[pruned].sum()) if count else 0.0,
        strategy,
    )


def adaptive_count(sorted_mass: np.ndarray, tau: float) -> int:
    """Length of the longest ascending prefix with cumulative mass <= tau."""
    return int(np.searchsorted(np.cumsum(sorted_mass), tau + MASS_TOL, side="right"))


def adaptive_prune(score: MultiScaleScore, tau: float, strategy: str = "adaptive") -> PruneOutcome:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    s_m = score.s_m
    order = ascending_order(s_m)
    count = adaptive_count(s_m[order], tau)
    if count == len(s_m):
        log.warning("tau=%g prunes every patch token; only CLS survives", tau)
    return _outcome(s_m, order, count, strategy, score.source_indices)


def fixed_k_prune(score: MultiScaleScore, k: int) -> PruneOutcome:
    n = len(score.s_m)
    if not 0 <= k < n:
        raise ValueError(f"fixed_k must satisfy 0 <= k < N={n}, got {k}")
    return _outcome(score.s_m, ascending_order(score.s_m), k, "fixed_k", score.source_indices)


def cls_attention_scores(attn: np.ndarray) -> MultiScaleScore:
    """Head-averaged CLS -> patch attention, renormalized over the patches.

    ``attn`` is (H, S, S) for one image or (B, H, S, S) for a batch.
    """
    attn = np.asarray(attn, dtype=np.float64)
    row = attn[..., 0, 1:].mean(axis=-2)
    row = row / row.sum(axis=-1, keepdims=True)
    return MultiScaleScore(row)


def prune(score: MultiScaleScore, cfg: PruneConfig) -> PruneOutcome:
    if cfg.strategy == "none":
        return PruneOutcome.identity(len(score.s_m))
    if cfg.strategy == "fixed_k":
        return fixed_k_prune(score, cfg.fixed_k)
    return adaptive_prune(score, cfg.tau, cfg.strategy)


def apply_view_policy(
    view_scores: Sequence[MultiScaleScore], cfg: PruneConfig, training: bool = True
) -> list[PruneOutcome]:
    """Prune decisions per view: single_view prunes view 1 only, multi_view both."""
    if training:
        if len(view_scores) != 2:
            raise ValueError(f"training needs two views, got {len(view_scores)}")
        first = prune(view_scores[0], cfg)
        if cfg.view_policy == "single_view":
            return [first, PruneOutcome.identity(len(view_scores[1].s_m))]
        return [first, prune(view_scores[1], cfg)]
    if len(view_scores) != 1:
        raise ValueError("evaluation prunes exactly one view")
    return [prune(view_scores[0], cfg)]


def keep_mask_batch(s_m: np.ndarray, cfg: PruneConfig) -> np.ndarray:
    """Vectorized prune over (B, N) scores -> (B, N) keep flags, same rules as :func:`prune`."""
    s_m = np.asarray(s_m, dtype=np.float64)
    b, n = s_m.shape
    keep = np.ones((b, n), dtype=bool)
    if cfg.strategy == "none":
        return keep
    order = np.argsort(tie_keys(s_m), axis=1, kind="stable")
    if cfg.strategy == "fixed_k":
        if not 0 <= cfg.fixed_k < n:
            raise ValueError(f"fixed_k must satisfy 0 <= k < N={n}, got {cfg.fixed_k}")
        counts = np.full(b, cfg.fixed_k)
    else:
        csum = np.cumsum(np.take_along_axis(s_m, order, axis=1), axis=1)
        counts = (csum <= cfg.tau + MASS_TOL).sum(axis=1)
        if (counts == n).any():
            log.warning("tau=%g prunes every patch token for %d samples", cfg.tau, int((counts == n).sum()))
    ranks = np.arange(n)[None, :] < counts[:, None]
    np.put_along_axis(keep, order, ~ranks, axis=1)
    return keep


def keep_with_cls(keep_patches: np.ndarray) -> np.ndarray:
    """Prepend the always-kept CLS column: (B, N) -> (B, N+1)."""
    return np.concatenate([np.ones((keep_patches.shape[0], 1), dtype=bool), keep_patches], axis=1)
