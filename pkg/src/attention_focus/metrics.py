"""Evaluation and accounting: matched clustering accuracy, attention masks,
analytic FLOP and parameter counts."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .backbone import VitConfig, backbone_param_shapes
from .gcd_head import head_param_shapes
from .importance import time_param_shapes

# One fused multiply-add counted as this many FLOPs.  The 16.87G ViT-B/16
# reference figure is a multiply-add count, so this stays 1.
FLOPS_PER_MAC = 1


@dataclass
class AccReport:
    all: float
    old: float
    new: float
    permutation: dict[int, int]  # predicted cluster -> true class
    counts: dict[str, int]

    def csv_row(self, run_id: str, seed: int, strategy: str, tau: float) -> str:
        return f"{run_id},{self.all:.6f},{self.old:.6f},{self.new:.6f},{seed},{strategy},{tau:g}"


CSV_HEADER = "run_id,all,old,new,seed,strategy,tau"


def hungarian_accuracy(y_true, y_pred, old_classes, num_classes: int | None = None) -> AccReport:
    """Accuracy after the best one-to-one relabeling of predicted clusters.

    One assignment is solved over every class; Old and New are scored under
    that same permutation.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label arrays differ in shape: {y_true.shape} vs {y_pred.shape}")
    k = num_classes or int(max(y_true.max(initial=0), y_pred.max(initial=0)) + 1)
    if (y_true < 0).any() or (y_pred < 0).any() or (y_true >= k).any() or (y_pred >= k).any():
        raise ValueError(f"labels must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y_pred, y_true), 1)
    rows, cols = linear_sum_assignment(counts, maximize=True)
    mapping = dict(zip(rows.tolist(), cols.tolist()))
    remapped = np.array([mapping[p] for p in y_pred], dtype=np.int64)
    hit = remapped == y_true
    old_mask = np.isin(y_true, list(old_classes))

    def frac(mask):
        return float(hit[mask].mean()) if mask.any() else 0.0

    return AccReport(
        all=float(hit.mean()) if len(hit) else 0.0,
        old=frac(old_mask),
        new=frac(~old_mask),
        permutation=mapping,
        counts={"all": int(len(hit)), "old": int(old_mask.sum()), "new": int((~old_mask).sum())},
    )


@dataclass
class MaskGrid:
    mask: np.ndarray  # (H, W) bool
    retained_mass: float
    threshold: float

    def to_pgm(self) -> str:
        h, w = self.mask.shape
        rows = "\n".join(" ".join(str(int(v)) for v in row) for row in self.mask)
        return f"P2\n{w} {h}\n1\n{rows}\n"

    def save_pgm(self, path) -> None:
        Path(path).write_text(self.to_pgm())

    def save_png(self, path, scale: int = 16) -> None:
        from PIL import Image

        img = np.kron(self.mask.astype(np.uint8) * 255, np.ones((scale, scale), dtype=np.uint8))
        Image.fromarray(img).save(path)


def attention_mask(attn_row: np.ndarray, threshold: float, grid: tuple[int, int]) -> MaskGrid:
    """Smallest top-attention patch set whose normalized mass reaches ``threshold``; 1.0 keeps every patch."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    a = np.asarray(attn_row, dtype=np.float64)
    if a.size != grid[0] * grid[1]:
        raise ValueError(f"{a.size} attention values for a {grid} grid")
    a = a / a.sum()
    order = np.argsort(-a, kind="stable")
    csum = np.cumsum(a[order])
    if threshold >= 1.0:
        # the whole mass, including patches that received exactly zero attention
        count = a.size
    else:
        count = min(int(np.searchsorted(csum, threshold - 1e-12, side="left")) + 1, a.size)
    flat = np.zeros(a.size, dtype=bool)
    flat[order[:count]] = True
    return MaskGrid(flat.reshape(grid), float(a[flat].sum()), threshold)


def retained_mask(retained, grid: tuple[int, int]) -> MaskGrid:
    """Grid mask of the patches a prune decision kept."""
    flat = np.zeros(grid[0] * grid[1], dtype=bool)
    flat[list(retained)] = True
    return MaskGrid(flat.reshape(grid), float(flat.mean()), 0.0)


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def block_macs(cfg: VitConfig, seq_len: int) -> dict[str, int]:
    s, d = seq_len, cfg.embed_dim
    return {
        "qkv": 3 * s * d * d,
        "attention": 2 * s * s * d,
        "proj": s * d * d,
        "ffn": 2 * s * d * cfg.mlp_hidden,
    }


def estimate_flops(
    cfg: VitConfig, seq_len: int | None = None, with_af: bool = False, final_seq_len: int | None = None
) -> int:
    """Matmul FLOPs of one forward pass.

    ``seq_len`` counts CLS (197 for ViT-B/16 at 224).  ``final_seq_len`` is
    the length entering the last block after pruning; it defaults to
    ``seq_len``.  With AF the test-time cost adds one query dot product per
    token for each of the L-1 scored blocks.
    """
    s = cfg.num_patches + 1 if seq_len is None else seq_len
    final = s if final_seq_len is None else final_seq_len
    macs = (s - 1) * cfg.patch_dim * cfg.embed_dim
    macs += (cfg.num_blocks - 1) * sum(block_macs(cfg, s).values())
    macs += sum(block_macs(cfg, final).values())
    if with_af:
        macs += (cfg.num_blocks - 1) * s * cfg.embed_dim
    return macs * FLOPS_PER_MAC


def resized(cfg: VitConfig, image_side: int) -> VitConfig:
    return VitConfig(**{**cfg.__dict__, "image_side": image_side})


def _size(shapes: dict[str, tuple[int, int]]) -> int:
    return sum(r * c for r, c in shapes.values())


def count_params(cfg: VitConfig, mode: str = "test", with_af: bool = False, time_hidden: int | None = None) -> dict[str, int]:
    """Parameter totals per module.  At test time TIME contributes only its queries."""
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be train or test, got {mode!r}")
    out = {
        "backbone": _size(backbone_param_shapes(cfg)),
        "head": _size(head_param_shapes(cfg.embed_dim, cfg.num_total_classes)),
        "time": 0,
    }
    if with_af:
        for l in range(cfg.num_blocks - 1):
            shapes = time_param_shapes(cfg, l, time_hidden)
            if mode == "test":
                shapes = {k: v for k, v in shapes.items() if k.endswith(".query")}
            out["time"] += _size(shapes)
    out["total"] = out["backbone"] + out["head"] + out["time"]
    return out


def format_count(n: float, unit: str) -> str:
    scale = {"G": 1e9, "M": 1e6}[unit]
    return f"{n / scale:.2f}{unit}"
