"""Training and evaluation of SimGCD with attention focusing on the synthetic benchmark."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import numcore as nc
from .config import ExperimentConfig
from .gcd_head import BatchViews, GcdHead, LossParts, init_head, proto_logits, total_loss
from .importance import TimeModule, cross_entropy, init_time_modules, time_forward
from .metrics import AccReport, hungarian_accuracy
from .numcore import Tensor
from .pruning import (
    PruneConfig,
    cls_attention_scores,
    fuse_scores_batch,
    keep_mask_batch,
    keep_with_cls,
)
from .synthdata import SynthDataset, augment_patches, generate, make_templates, patches_to_images, pruning_precision_batch

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class Model:
    cfg: ExperimentConfig
    backbone: dict[str, Tensor]
    time: list[TimeModule]
    head: GcdHead

    @property
    def vit(self) -> bb.VitConfig:
        return self.cfg.backbone

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.backbone)
        for m in self.time:
            out.update(m.named_parameters())
        out.update(self.head.named_parameters())
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in params.items():
            if state[k].shape != p.value.shape:
                raise ValueError(f"checkpoint tensor {k} has shape {state[k].shape}, model expects {p.value.shape}")
            p.value[...] = state[k]

    def trainable(self) -> dict[str, Tensor]:
        frozen = set(bb.frozen_names(self.backbone, self.vit)) if self.cfg.freeze_earlier_blocks else set()
        return {k: v for k, v in self.parameters().items() if k not in frozen}

    def frozen_view(self) -> dict[str, Tensor]:
        """Backbone mapping where frozen tensors are constants (no graph is recorded for them)."""
        if not self.cfg.freeze_earlier_blocks:
            return self.backbone
        frozen = set(bb.frozen_names(self.backbone, self.vit))
        return {k: (nc.Tensor(v.value) if k in frozen else v) for k, v in self.backbone.items()}


def build_model(cfg: ExperimentConfig) -> Model:
    """Independent init streams, so dropping TIME never shifts backbone or head init."""
    backbone = bb.init_backbone(cfg.backbone, np.random.default_rng([cfg.seed, 10]))
    time = init_time_modules(cfg.backbone, np.random.default_rng([cfg.seed, 11]), cfg.time_hidden) if cfg.af else []
    head = init_head(cfg.backbone.embed_dim, cfg.backbone.num_total_classes, np.random.default_rng([cfg.seed, 12]), cfg.head)
    return Model(cfg, backbone, time, head)


def constant_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: nc.Tensor(v.value) for k, v in params.items()}


@dataclass
class Encoded:
    h: Tensor  # (B, D) pooled features
    tokens: Tensor  # (B, S, D) final-block output after the last norm
    keep: np.ndarray | None  # (B, N+1) tokens entering the last block
    time_out: list  # TimeOutput per tapped block
    tap_attention: np.ndarray  # (B, H, S, S) attention of block L-1
    final_attention: np.ndarray  # (B, H, S, S) attention of block L
    s_m: np.ndarray | None  # (B, N) importance used for pruning
    states: list = field(default_factory=list)  # tapped block outputs feeding TIME


def pruning_scores(time_out, tap_attention: np.ndarray, strategy: str) -> np.ndarray:
    if strategy == "cls_attention":
        return cls_attention_scores(tap_attention).s_m
    if strategy == "penultimate_only":
        return fuse_scores_batch([time_out[-1].scores.value])
    return fuse_scores_batch([t.scores.value for t in time_out])


def encode(
    model: Model,
    images: np.ndarray,
    prune_rows: np.ndarray | None,
    prune_cfg: PruneConfig,
    params: dict[str, Tensor] | None = None,
    time_modules: list[TimeModule] | None = None,
) -> Encoded:
    """Forward a batch through the tapped encoder.

    ``prune_rows`` flags which rows TAP may prune; ``None`` prunes none.
    Pruned tokens are masked out of the last block's keys and out of the
    pooling, which matches removing them from the sequence.
    """
    vit = model.vit
    params = model.frozen_view() if params is None else params
    time_modules = model.time if time_modules is None else time_modules
    x = bb.embed_batch(images, params, vit)
    states = []
    attn = None
    for i in range(vit.num_blocks - 1):
        x, attn = bb.block_forward(x, params, vit, i)
        states.append(x)
    time_out = [time_forward(s, m) for s, m in zip(states, time_modules)]

    keep = None
    s_m = None
    if prune_cfg.strategy != "none" and prune_rows is not None and prune_rows.any():
        s_m = pruning_scores(time_out, attn, prune_cfg.strategy)
        kp = keep_mask_batch(s_m, prune_cfg)
        kp[~prune_rows] = True
        keep = keep_with_cls(kp)
    x, final_attn = bb.block_forward(x, params, vit, vit.num_blocks - 1, keep)
    x = bb.final_norm(x, params)
    h = bb.pool_batch(x, keep, model.cfg.pooling)
    return Encoded(h, x, keep, time_out, attn, final_attn, s_m, states)


def view_prune_rows(batch: int, policy: str) -> np.ndarray:
    rows = np.zeros(2 * batch, dtype=bool)
    rows[:batch] = True
    if policy == "multi_view":
        rows[batch:] = True
    return rows


def time_targets(model: Model, enc: Encoded, labels: np.ndarray, labeled: np.ndarray, epoch: float):
    """Row indices and targets for the TIME classifiers.

    Labeled rows use their labels.  With ``query_training == "all"`` the
    unlabeled rows get the other view's teacher distribution restricted to
    the known-class prototypes and renormalized.
    """
    from .gcd_head import teacher_temperature

    k_known = model.vit.num_known_classes
    b = len(labels)
    lab2 = np.concatenate([labeled, labeled])
    y2 = np.concatenate([labels, labels])
    rows = np.flatnonzero(lab2)
    onehot = np.zeros((len(rows), k_known))
    onehot[np.arange(len(rows)), y2[rows]] = 1.0
    if model.cfg.query_training == "labeled":
        return rows, onehot
    tau_t = teacher_temperature(epoch, model.head.hp)
    cos = proto_logits(nc.Tensor(enc.h.value), GcdHead(nc.Tensor(model.head.prototypes.value), [], model.head.hp), tau_t).value
    q = np.exp(cos - cos.max(axis=1, keepdims=True))
    q /= q.sum(axis=1, keepdims=True)
    swapped = np.concatenate([q[b:], q[:b]])[:, :k_known]
    swapped /= swapped.sum(axis=1, keepdims=True)
    un_rows = np.flatnonzero(~lab2)
    return np.concatenate([rows, un_rows]), np.concatenate([onehot, swapped[un_rows]])


def batch_loss(
    model: Model,
    data: SynthDataset,
    idx: np.ndarray,
    rng: np.random.Generator,
    epoch: float,
    templates=None,
    params: dict[str, Tensor] | None = None,
) -> tuple[Tensor, LossParts, Encoded]:
    spec = data.spec
    b = len(idx)
    v1 = augment_patches(data, idx, rng, templates)
    v2 = augment_patches(data, idx, rng, templates)
    images = patches_to_images(np.concatenate([v1, v2]), spec)
    rows = view_prune_rows(b, model.cfg.prune.view_policy)
    enc = encode(model, images, rows, model.cfg.prune, params)

    labels = np.where(data.labeled[idx], data.labels[idx], -1)
    labeled = data.labeled[idx]
    time_losses = []
    if model.time:
        t_rows, targets = time_targets(model, enc, labels, labeled, epoch)
        if len(t_rows):
            for out in enc.time_out:
                time_losses.append(cross_entropy(out.logits[t_rows], targets))
    batch = BatchViews(enc.h[:b], enc.h[b:], labeled, labels)
    parts = LossParts()
    loss = total_loss(batch, model.head, time_losses, epoch, parts)
    return loss, parts, enc


class SGD:
    """Momentum SGD; weight decay applies to weight matrices only."""

    def __init__(self, params: dict[str, Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.decay = {k: k.endswith("weight") for k in params}

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        for k, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            if self.decay[k] and self.weight_decay:
                g = g + self.weight_decay * p.value
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.value -= lr * v


def cosine_lr(epoch: int, cfg: ExperimentConfig) -> float:
    o = cfg.optim
    lo = o.lr * o.lr_final_ratio
    return lo + 0.5 * (o.lr - lo) * (1.0 + math.cos(math.pi * epoch / o.epochs))


@dataclass
class TrainResult:
    model: Model
    data: SynthDataset
    log: list[dict] = field(default_factory=list)


def train(cfg: ExperimentConfig, log_path=None, ckpt_path=None, data: SynthDataset | None = None) -> TrainResult:
    """Full training run; writes JSON-lines log and checkpoint when paths are given.

    Raises NumericalError on a non-finite loss after writing the last good
    checkpoint.
    """
    data = generate(cfg.data_spec) if data is None else data
    model = build_model(cfg)
    tpl = make_templates(data.spec)
    trainable = model.trainable()
    opt = SGD(trainable, cfg.optim.momentum, cfg.optim.weight_decay)
    order_rng = np.random.default_rng([cfg.seed, 20])
    aug_rng = np.random.default_rng([cfg.seed, 21])
    n = len(data)
    bs = cfg.optim.batch_size
    records = []
    last_good = model.state()
    fh = open(log_path, "w") if log_path else None
    try:
        if fh:
            fh.write(json.dumps({"config": cfg.to_dict()}, sort_keys=True) + "\n")
        for epoch in range(cfg.optim.epochs):
            lr = cosine_lr(epoch, cfg)
            perm = order_rng.permutation(n)
            sums = {"rep": 0.0, "cls": 0.0, "time": 0.0, "gcd": 0.0, "total": 0.0}
            retained = []
            steps = 0
            for start in range(0, n - bs + 1, bs):
                idx = perm[start : start + bs]
                loss, parts, enc = batch_loss(model, data, idx, aug_rng, epoch, tpl)
                if not np.isfinite(loss.value).all():
                    if ckpt_path:
                        model.load_state(last_good)
                        save_model(model, ckpt_path)
                    raise NumericalError(f"non-finite loss at epoch {epoch}, step {steps}")
                grads = nc.backward(loss)
                opt.step(grads, lr)
                for key in sums:
                    sums[key] += getattr(parts, key)
                if enc.keep is not None:
                    retained.append(enc.keep[:bs, 1:].sum(axis=1).mean())
                tau_t = parts.tau_t
                steps += 1
            rec = {
                "epoch": epoch,
                "lr": lr,
                "L_rep": sums["rep"] / steps,
                "L_cls": sums["cls"] / steps,
                "sum_L_ce": sums["time"] / steps,
                "L_gcd": sums["gcd"] / steps,
                "total": sums["total"] / steps,
                "tau_t": tau_t,
                "mean_retained": float(np.mean(retained)) if retained else float(model.vit.num_patches),
            }
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
            last_good = model.state()
    finally:
        if fh:
            fh.close()
    if ckpt_path:
        save_model(model, ckpt_path)
    return TrainResult(model, data, records)


def save_model(model: Model, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bb.save_checkpoint(path, model.state())
    config_sidecar(path).write_text(model.cfg.to_json())


def config_sidecar(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_suffix(p.suffix + ".json")


def load_model(cfg: ExperimentConfig, ckpt_path) -> Model:
    model = build_model(cfg)
    model.load_state(bb.load_checkpoint(ckpt_path))
    return model


@dataclass
class EvalResult:
    report: AccReport
    predictions: np.ndarray
    indices: np.ndarray
    mean_retained: float
    mean_pruned: float
    pruning_precision: float
    keep: np.ndarray  # (M, N) patch keep flags


def evaluate(model: Model, data: SynthDataset, chunk: int = 200) -> EvalResult:
    """Prototype-argmax on every unlabeled sample's clean image; the test view is pruned."""
    idx = data.unlabeled_indices
    params = constant_params(model.backbone)
    time_modules = [TimeModule.from_parameters(m.block_index, constant_params(m.named_parameters())) for m in model.time]
    preds, keeps = [], []
    n = model.vit.num_patches
    for start in range(0, len(idx), chunk):
        sel = idx[start : start + chunk]
        images = patches_to_images(data.patches[sel], data.spec)
        enc = encode(model, images, np.ones(len(sel), dtype=bool), model.cfg.prune, params, time_modules)
        logits = proto_logits(nc.Tensor(enc.h.value), model.head, 1.0).value
        preds.append(np.argmax(logits, axis=1))
        keeps.append(enc.keep[:, 1:] if enc.keep is not None else np.ones((len(sel), n), dtype=bool))
    pred = np.concatenate(preds)
    keep = np.concatenate(keeps)
    report = hungarian_accuracy(
        data.labels[idx], pred, range(model.vit.num_known_classes), model.vit.num_total_classes
    )
    precision, _ = pruning_precision_batch(keep, data.object_masks[idx])
    retained = float(keep.sum(axis=1).mean())
    return EvalResult(report, pred, idx, retained, n - retained, precision, keep)
