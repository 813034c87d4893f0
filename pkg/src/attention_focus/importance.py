"""Token importance measurement.

Each tapped block owns a learnable query vector.  Its scaled dot product
with the block's tokens gives one score per token; a softmax over those
scores pools the tokens into a summary, which a small residual FFN refines
and a linear classifier over the known classes supervises.  The tokens enter
through a stop-gradient, so the auxiliary loss trains the query, FFN and
classifier but never the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .backbone import TokenSequence, VitConfig, trunc_normal
from .numcore import Tensor


class UnlabeledSampleError(ValueError):
    pass


@dataclass
class TimeModule:
    block_index: int
    query: Tensor  # (1, D)
    norm_gain: Tensor
    norm_bias: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    cls_weight: Tensor  # (|Y_l|, D)
    cls_bias: Tensor  # (1, |Y_l|)

    _FIELDS = (
        ("query", "query"),
        ("norm_gain", "ffn.norm.gain"),
        ("norm_bias", "ffn.norm.bias"),
        ("fc1_weight", "ffn.fc1.weight"),
        ("fc1_bias", "ffn.fc1.bias"),
        ("fc2_weight", "ffn.fc2.weight"),
        ("fc2_bias", "ffn.fc2.bias"),
        ("cls_weight", "classifier.weight"),
        ("cls_bias", "classifier.bias"),
    )

    def named_parameters(self) -> dict[str, Tensor]:
        prefix = f"time.{self.block_index}."
        return {prefix + key: getattr(self, attr) for attr, key in self._FIELDS}

    @classmethod
    def from_parameters(cls, block_index: int, params: dict[str, Tensor]) -> "TimeModule":
        prefix = f"time.{block_index}."
        return cls(block_index, **{attr: params[prefix + key] for attr, key in cls._FIELDS})

    @property
    def num_classes(self) -> int:
        return self.cls_weight.shape[0]


def time_param_shapes(cfg: VitConfig, block_index: int, hidden: int | None = None) -> dict[str, tuple[int, int]]:
    d = cfg.embed_dim
    hidden = hidden or 4 * d
    k = cfg.num_known_classes
    p = f"time.{block_index}."
    return {
        p + "query": (1, d),
        p + "ffn.norm.gain": (1, d),
        p + "ffn.norm.bias": (1, d),
        p + "ffn.fc1.weight": (d, hidden),
        p + "ffn.fc1.bias": (1, hidden),
        p + "ffn.fc2.weight": (hidden, d),
        p + "ffn.fc2.bias": (1, d),
        p + "classifier.weight": (k, d),
        p + "classifier.bias": (1, k),
    }


def init_time_modules(cfg: VitConfig, rng: np.random.Generator, hidden: int | None = None) -> list[TimeModule]:
    """One module per block except the last."""
    modules = []
    for l in range(cfg.num_blocks - 1):
        params = {}
        for name, shape in time_param_shapes(cfg, l, hidden).items():
            if name.endswith("query"):
                value = rng.normal(0.0, 0.02, size=shape)
            elif name.endswith(".gain"):
                value = np.ones(shape)
            elif name.endswith(".bias"):
                value = np.zeros(shape)
            else:
                value = trunc_normal(rng, shape)
            params[name] = nc.parameter(value, name)
        modules.append(TimeModule.from_parameters(l, params))
    return modules


@dataclass
class ScoreVector:
    scores: Tensor  # (N+1,) or batched (B, N+1); CLS at column 0
    block_index: int

    @property
    def values(self) -> np.ndarray:
        return self.scores.value


def measure_tokens(tokens: Tensor, query: Tensor) -> Tensor:
    """s = Q K^T / sqrt(D) with K the tokens themselves; (..., S, D) -> (..., S)."""
    d = tokens.shape[-1]
    s = nc.matmul(tokens, nc.transpose(query, (1, 0))) * (1.0 / np.sqrt(d))
    return s.reshape(tokens.shape[:-1])


def aggregate_tokens(scores: Tensor, tokens: Tensor) -> Tensor:
    """r = softmax(s) V over all S tokens, CLS included; (..., S) x (..., S, D) -> (..., D)."""
    w = nc.softmax_rows(scores)
    lead = scores.shape[:-1]
    r = nc.matmul(w.reshape(lead + (1, scores.shape[-1])), tokens)
    return r.reshape(lead + (tokens.shape[-1],))


def refine(r: Tensor, module: TimeModule) -> Tensor:
    """r' = MLP(LN(r)) + r."""
    h = nc.layernorm(r, module.norm_gain, module.norm_bias)
    h = nc.gelu(nc.matmul(h, module.fc1_weight) + module.fc1_bias)
    return nc.matmul(h, module.fc2_weight) + module.fc2_bias + r


def classify(r_refined: Tensor, module: TimeModule) -> Tensor:
    return nc.matmul(r_refined, nc.transpose(module.cls_weight, (1, 0))) + module.cls_bias


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -sum_k y^k log p^k.

    ``targets`` is either an int array of class ids or a (rows, K) array of
    soft targets, treated as constants.
    """
    logp = nc.log_softmax_rows(logits)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        onehot = np.zeros(logits.shape)
        onehot[np.arange(len(targets)), targets] = 1.0
        targets = onehot
    return -(logp * targets).sum() * (1.0 / logits.shape[0])


def measure(seq: TokenSequence, module: TimeModule) -> ScoreVector:
    return ScoreVector(measure_tokens(seq.tokens, module.query), module.block_index)


def aggregate(score: ScoreVector, seq: TokenSequence) -> Tensor:
    if score.scores.shape[-1] != len(seq):
        raise nc.DimensionError(f"{score.scores.shape[-1]} scores for {len(seq)} tokens")
    return aggregate_tokens(score.scores.reshape(1, len(seq)), seq.tokens)


def auxiliary_loss(r_refined: Tensor, labels, module: TimeModule) -> Tensor:
    """Cross-entropy of the auxiliary classifier; every label must be a known class."""
    labels = np.atleast_1d(np.asarray(labels))
    if labels.dtype.kind not in "iu" or (labels < 0).any():
        raise UnlabeledSampleError("auxiliary loss is trained on labeled samples only")
    if (labels >= module.num_classes).any():
        raise ValueError(f"label outside the {module.num_classes} known classes")
    return cross_entropy(classify(r_refined.reshape(-1, r_refined.shape[-1]), module), labels)


@dataclass
class TimeOutput:
    scores: Tensor  # (B, S)
    logits: Tensor  # (B, |Y_l|)


def time_forward(tokens: Tensor, module: TimeModule) -> TimeOutput:
    """Full TIME pass for a batch of token states (B, S, D) behind a stop-gradient."""
    k = nc.stop_gradient(tokens)
    s = measure_tokens(k, module.query)
    r = refine(aggregate_tokens(s, k), module)
    return TimeOutput(s, classify(r, module))


def time_scores(tokens: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Inference-time scoring: only the query is consulted."""
    return (tokens @ query.reshape(-1)) / np.sqrt(tokens.shape[-1])
