"""SimGCD objective: contrastive representation losses and a prototype
classifier trained by self-distillation with a mean-entropy regularizer.

Shapes: backbone features ``h`` are (B, D); ``z`` are the unit-norm
projections.  Two views of every sample are always present in training.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .backbone import trunc_normal
from .importance import cross_entropy
from .numcore import Tensor

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


class DegenerateNormError(ValueError):
    pass


@dataclass(frozen=True)
class HeadHyperparams:
    lambda_sim: float = 0.35
    tau_u: float = 0.07
    tau_c: float = 1.0
    tau_s: float = 0.1
    tau_t_start: float = 0.07
    tau_t_end: float = 0.04
    tau_t_warmup_epochs: int = 30
    mean_entropy_weight: float = 1.0  # epsilon
    aux_weight: float = 0.05  # lambda on the summed TIME losses

    def __post_init__(self):
        for name in ("tau_u", "tau_c", "tau_s", "tau_t_start", "tau_t_end"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.lambda_sim <= 1.0:
            raise ValueError("lambda_sim must lie in [0, 1]")


def teacher_temperature(epoch: float, hp: HeadHyperparams) -> float:
    """Cosine warm-up from tau_t_start to tau_t_end over the warm-up epochs, then flat."""
    if epoch >= hp.tau_t_warmup_epochs or hp.tau_t_warmup_epochs <= 0:
        return hp.tau_t_end
    frac = epoch / hp.tau_t_warmup_epochs
    return hp.tau_t_end + 0.5 * (hp.tau_t_start - hp.tau_t_end) * (1.0 + math.cos(math.pi * frac))


@dataclass
class GcdHead:
    prototypes: Tensor  # (K, D)
    proj: list[tuple[Tensor, Tensor]]  # three (weight, bias) layers
    hp: HeadHyperparams = field(default_factory=HeadHyperparams)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"head.prototypes": self.prototypes}
        for i, (w, b) in enumerate(self.proj):
            out[f"head.proj.{i}.weight"] = w
            out[f"head.proj.{i}.bias"] = b
        return out

    @classmethod
    def from_parameters(cls, params: dict[str, Tensor], hp: HeadHyperparams | None = None) -> "GcdHead":
        proj = [(params[f"head.proj.{i}.weight"], params[f"head.proj.{i}.bias"]) for i in range(3)]
        return cls(params["head.prototypes"], proj, hp or HeadHyperparams())


def head_param_shapes(embed_dim: int, num_classes: int) -> dict[str, tuple[int, int]]:
    d, h = embed_dim, 2 * embed_dim
    dims = [(d, h), (h, h), (h, d)]
    shapes = {"head.prototypes": (num_classes, d)}
    for i, (a, b) in enumerate(dims):
        shapes[f"head.proj.{i}.weight"] = (a, b)
        shapes[f"head.proj.{i}.bias"] = (1, b)
    return shapes


def init_head(
    embed_dim: int, num_classes: int, rng: np.random.Generator, hp: HeadHyperparams | None = None
) -> GcdHead:
    params = {}
    for name, shape in head_param_shapes(embed_dim, num_classes).items():
        if name == "head.prototypes":
            c = rng.normal(size=shape)
            value = c / np.linalg.norm(c, axis=1, keepdims=True)
        elif name.endswith("bias"):
            value = np.zeros(shape)
        else:
            value = trunc_normal(rng, shape, std=1.0 / np.sqrt(shape[0]))
        params[name] = nc.parameter(value, name)
    return GcdHead.from_parameters(params, hp)


def _check_norm(norm: np.ndarray, what: str) -> None:
    if (norm < NORM_FLOOR).any():
        raise DegenerateNormError(f"{what} has norm below {NORM_FLOOR}")


def project(h: Tensor, head: GcdHead) -> Tensor:
    x = h
    for i, (w, b) in enumerate(head.proj):
        x = nc.matmul(x, w) + b
        if i < len(head.proj) - 1:
            x = nc.gelu(x)
    return x


def project_normalize(h: Tensor, head: GcdHead | None = None) -> Tensor:
    """z = g(h) / ||g(h)||; with ``head=None`` g is the identity."""
    g = h if head is None else project(h, head)
    _check_norm(np.linalg.norm(g.value, axis=-1), "projection g(h)")
    return nc.l2_normalize(g)


def unsup_contrastive(z: Tensor, z2: Tensor, tau_u: float) -> Tensor:
    """InfoNCE with z'_i as the positive for z_i and the other z'_n as negatives."""
    b = z.shape[0]
    if b < 2:
        raise ValueError("unsupervised contrastive loss needs a batch of at least 2")
    logits = nc.matmul(z, nc.transpose(z2, (1, 0))) * (1.0 / tau_u)
    logp = nc.log_softmax_rows(logits)
    return -(logp * np.eye(b)).sum() * (1.0 / b)


def sup_contrastive(z: Tensor, z2: Tensor, labels: np.ndarray, tau_c: float) -> Tensor:
    """Supervised contrastive loss over a labeled batch.

    For anchor i the positives are the other samples sharing its label and
    the denominator runs over every n != i.  Anchors whose class has no
    other member in the batch are skipped.
    """
    labels = np.asarray(labels)
    b = len(labels)
    if b == 0:
        return nc.Tensor(0.0)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(b, dtype=bool)
    positives = same & off_diag
    counts = positives.sum(axis=1)
    if (counts == 0).any():
        log.debug("%d labeled anchors have no positive in the batch; skipped", int((counts == 0).sum()))
    active = counts > 0
    if not active.any():
        return nc.Tensor(0.0)
    logits = nc.matmul(z, nc.transpose(z2, (1, 0))) * (1.0 / tau_c)
    # drop the n == i column from each denominator
    logits = logits + np.where(off_diag, 0.0, nc.MASK_FILL)
    logp = nc.log_softmax_rows(logits)
    weights = np.zeros((b, b))
    weights[active] = positives[active] / counts[active, None]
    return -(logp * weights).sum() * (1.0 / active.sum())


def proto_logits(h: Tensor, head: GcdHead, temperature: float) -> Tensor:
    """Cosine similarity to every prototype divided by the temperature."""
    _check_norm(np.linalg.norm(h.value, axis=-1), "feature h")
    _check_norm(np.linalg.norm(head.prototypes.value, axis=-1), "prototype")
    hn = nc.l2_normalize(h)
    cn = nc.l2_normalize(head.prototypes)
    return nc.matmul(hn, nc.transpose(cn, (1, 0))) * (1.0 / temperature)


def proto_probs(h: Tensor, head: GcdHead, temperature: float | None = None) -> Tensor:
    t = head.hp.tau_s if temperature is None else temperature
    return nc.softmax_rows(proto_logits(h, head, t))


def entropy(p: Tensor) -> Tensor:
    return -(p * nc.log(p)).sum()


@dataclass
class BatchViews:
    h1: Tensor
    h2: Tensor
    labeled: np.ndarray  # (B,) bool
    labels: np.ndarray  # (B,) int, -1 where unlabeled

    def __post_init__(self):
        self.labeled = np.asarray(self.labeled, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.h1.shape != self.h2.shape:
            raise ValueError("both views must be present for every sample")


@dataclass
class LossParts:
    rep_u: float = 0.0
    rep_s: float = 0.0
    cls_u: float = 0.0
    cls_s: float = 0.0
    entropy: float = 0.0
    rep: float = 0.0
    cls: float = 0.0
    time: float = 0.0
    gcd: float = 0.0
    total: float = 0.0
    tau_t: float = 0.0


def representation_loss(batch: BatchViews, head: GcdHead, parts: LossParts | None = None) -> Tensor:
    """(1 - lambda_sim) L_rep^u + lambda_sim L_rep^s, each symmetrized over the view order."""
    hp = head.hp
    z1 = project_normalize(batch.h1, head)
    z2 = project_normalize(batch.h2, head)
    rep_u = (unsup_contrastive(z1, z2, hp.tau_u) + unsup_contrastive(z2, z1, hp.tau_u)) * 0.5
    idx = np.flatnonzero(batch.labeled)
    lab = batch.labels[idx]
    rep_s = (
        sup_contrastive(z1[idx], z2[idx], lab, hp.tau_c) + sup_contrastive(z2[idx], z1[idx], lab, hp.tau_c)
    ) * 0.5
    if parts is not None:
        parts.rep_u, parts.rep_s = rep_u.item(), rep_s.item()
    return rep_u * (1.0 - hp.lambda_sim) + rep_s * hp.lambda_sim


def teacher_targets(batch: BatchViews, head: GcdHead, epoch: float) -> tuple[np.ndarray, np.ndarray]:
    """Sharpened prototype predictions (q1, q2) of both views as plain arrays."""
    tau_t = teacher_temperature(epoch, head.hp)
    cos1 = proto_logits(batch.h1, head, 1.0).value
    cos2 = proto_logits(batch.h2, head, 1.0).value
    return _softmax_np(cos1 / tau_t), _softmax_np(cos2 / tau_t)


def classifier_loss(
    batch: BatchViews, head: GcdHead, epoch: float, parts: LossParts | None = None, teacher=None
) -> Tensor:
    """(1 - lambda_sim)[CE(q', p) - eps H(p_bar)] + lambda_sim CE(y, p).

    p uses tau_s; the target q' comes from the other view at the sharper
    teacher temperature and carries no gradient.  Both view orders are
    averaged, and p_bar is the mean student prediction over both views.
    ``teacher`` pins (q1, q2) instead of deriving them from this batch.
    """
    hp = head.hp
    tau_t = teacher_temperature(epoch, hp)
    cos1 = proto_logits(batch.h1, head, 1.0)
    cos2 = proto_logits(batch.h2, head, 1.0)
    logits1, logits2 = cos1 * (1.0 / hp.tau_s), cos2 * (1.0 / hp.tau_s)
    if teacher is None:
        q1, q2 = _softmax_np(cos1.value / tau_t), _softmax_np(cos2.value / tau_t)
    else:
        q1, q2 = teacher
    cls_u_ce = (cross_entropy(logits1, q2) + cross_entropy(logits2, q1)) * 0.5
    p_bar = nc.concat([nc.softmax_rows(logits1), nc.softmax_rows(logits2)], axis=0).mean(axis=0)
    ent = entropy(p_bar)
    cls_u = cls_u_ce - ent * hp.mean_entropy_weight

    idx = np.flatnonzero(batch.labeled)
    if len(idx):
        lab = batch.labels[idx]
        cls_s = (cross_entropy(logits1[idx], lab) + cross_entropy(logits2[idx], lab)) * 0.5
    else:
        cls_s = nc.Tensor(0.0)
    if parts is not None:
        parts.cls_u, parts.cls_s, parts.entropy, parts.tau_t = cls_u.item(), cls_s.item(), ent.item(), tau_t
    return cls_u * (1.0 - hp.lambda_sim) + cls_s * hp.lambda_sim


def total_loss(
    batch: BatchViews, head: GcdHead, time_losses, epoch: float, parts: LossParts | None = None, teacher=None
) -> Tensor:
    """L_rep + L_cls + lambda * sum of the per-block TIME losses."""
    rep = representation_loss(batch, head, parts)
    cls = classifier_loss(batch, head, epoch, parts, teacher)
    gcd = rep + cls
    total = gcd
    time_sum = None
    for t in time_losses:
        time_sum = t if time_sum is None else time_sum + t
    if time_sum is not None:
        total = gcd + time_sum * head.hp.aux_weight
    if parts is not None:
        parts.rep, parts.cls, parts.gcd = rep.item(), cls.item(), gcd.item()
        parts.time = time_sum.item() if time_sum is not None else 0.0
        parts.total = total.item()
    return total


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
