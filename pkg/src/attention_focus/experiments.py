"""Named variants, ablation axes and multi-seed runs."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .backbone import ConfigError
from .config import ExperimentConfig, with_overrides
from .training import evaluate, train

# Fixed prune counts 16/64/128 of 196 patches, rescaled to a 16-patch grid.
FIXED_K_SCALED = (1, 5, 10)

BASELINE = dict(af=False, pooling="cls", prune={"strategy": "none"})


def variant(base: ExperimentConfig, name: str) -> ExperimentConfig:
    """Config for a named variant of ``base``.

    ``fixed_k<k>`` prunes exactly k patches; ``baseline`` is plain SimGCD
    (no TIME modules, no pruning, CLS pooling).
    """
    if name == "af":
        return base
    if name == "baseline":
        return with_overrides(base, **BASELINE)
    if name.startswith("fixed_k"):
        return with_overrides(base, prune={"strategy": "fixed_k", "fixed_k": int(name[7:])})
    if name == "multi_view":
        return with_overrides(base, prune={"view_policy": "multi_view"})
    if name == "penultimate_only":
        return with_overrides(base, prune={"strategy": "penultimate_only"})
    if name == "cls_attention":
        return with_overrides(base, prune={"strategy": "cls_attention"})
    if name == "cls_pooling":
        return with_overrides(base, pooling="cls")
    if name == "no_prune":
        return with_overrides(base, prune={"strategy": "none"})
    raise ConfigError(f"unknown variant {name!r}")


def axis_variants(base: ExperimentConfig, axis: str) -> list[tuple[str, ExperimentConfig]]:
    """(label, config) rows for one ablation axis."""
    p = base.prune
    if axis == "strategy":
        rows = [("adaptive", with_overrides(base, prune={"strategy": "adaptive"}))]
        rows += [(f"fixed_k({k})", variant(base, f"fixed_k{k}")) for k in FIXED_K_SCALED]
        rows += [
            ("cls_attention", variant(base, "cls_attention")),
            ("penultimate_only", variant(base, "penultimate_only")),
            ("none", variant(base, "no_prune")),
        ]
        return rows
    if axis == "tau":
        return [(f"tau={t:g}", with_overrides(base, prune={"tau": t})) for t in (0.01, 0.05, 0.1, 0.2)]
    if axis == "k":
        return [(f"k={k}", variant(base, f"fixed_k{k}")) for k in FIXED_K_SCALED]
    if axis == "view_policy":
        return [(v, with_overrides(base, prune={"view_policy": v})) for v in ("single_view", "multi_view")]
    if axis == "query_training":
        return [(q, with_overrides(base, query_training=q)) for q in ("labeled", "all")]
    if axis == "pooling":
        return [(m, with_overrides(base, pooling=m)) for m in ("mean", "cls")]
    if axis == "multiscale":
        return [("multi_scale", with_overrides(base, prune={"strategy": "adaptive"})), ("penultimate_only", variant(base, "penultimate_only"))]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


AXES = ("strategy", "tau", "k", "view_policy", "query_training", "pooling", "multiscale")


@dataclass
class RunSummary:
    label: str
    seed: int
    all: float
    old: float
    new: float
    mean_retained: float
    mean_pruned: float
    pruning_precision: float
    strategy: str
    tau: float


def run_one(label: str, cfg: ExperimentConfig) -> RunSummary:
    res = train(cfg)
    ev = evaluate(res.model, res.data)
    r = ev.report
    return RunSummary(
        label, cfg.seed, r.all, r.old, r.new, ev.mean_retained, ev.mean_pruned, ev.pruning_precision,
        cfg.prune.strategy, cfg.prune.tau,
    )


def _run_job(job):
    return run_one(*job)


def worker_count(jobs: int) -> int:
    raw = os.environ.get("AF_THREADS")
    cap = int(raw) if raw else 1
    return max(1, min(cap, jobs))


def run_grid(rows: list[tuple[str, ExperimentConfig]], seeds) -> list[RunSummary]:
    """Every row at every seed; AF_THREADS worker processes when set above 1."""
    jobs = [(label, replace(cfg, seed=s)) for label, cfg in rows for s in seeds]
    workers = worker_count(len(jobs))
    if workers == 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def mean_by_label(results: list[RunSummary]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for label in dict.fromkeys(r.label for r in results):
        rs = [r for r in results if r.label == label]
        out[label] = {
            k: float(np.mean([getattr(r, k) for r in rs]))
            for k in ("all", "old", "new", "mean_retained", "mean_pruned", "pruning_precision")
        }
    return out
