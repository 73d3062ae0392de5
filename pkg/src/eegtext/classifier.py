"""Dense softmax head: ELU layers, dropout, L2 penalty and max-norm projection."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, as_tensor

LOG_CLAMP = 1e-12


@dataclass
class ClassifierConfig:
    hidden: list[int] = field(default_factory=lambda: [128, 64])
    n_classes: int = 2
    dropout_p: float = 0.3
    l2_lambda: float = 0.001
    maxnorm_c: float = 3.0
    elu_alpha: float = 1.0

    def __post_init__(self):
        self.hidden = [int(h) for h in self.hidden]
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.maxnorm_c <= 0:
            raise ValueError("maxnorm_c must be > 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def layer_sizes(self, in_dim: int) -> list[tuple[int, int]]:
        dims = [in_dim, *self.hidden, self.n_classes]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class ClassPrediction:
    probs: np.ndarray
    label: int
    class_name: str | None = None

    @classmethod
    def from_probs(cls, probs, class_names: Sequence[str] | None = None):
        probs = np.asarray(probs, dtype=np.float64)
        label = int(np.argmax(probs))  # first maximum wins ties
        name = class_names[label] if class_names is not None else None
        return cls(probs=probs, label=label, class_name=name)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    pos = xd > 0
    ex = np.exp(np.minimum(xd, 0.0))
    out = np.where(pos, xd, alpha * (ex - 1.0))

    def bw(g):
        return (g * np.where(pos, 1.0, alpha * ex).astype(xd.dtype),)

    return Tensor.from_op(out.astype(xd.dtype, copy=False), (x,), bw, "elu")


def dense_forward(h: Tensor, W: Tensor, b: Tensor, activation: str = "elu",
                  alpha: float = 1.0) -> Tensor:
    """``act(h @ W.T + b)`` with W stored as (out, in)."""
    if h.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"dense shape mismatch: h{h.shape} W{W.shape} b{b.shape}")
    z = h @ W.T + b
    if activation == "elu":
        return elu(z, alpha)
    if activation in ("identity", "linear", None):
        return z
    raise ValueError(f"unknown activation {activation!r}")


def softmax(z) -> Tensor:
    z = as_tensor(z)
    zd = z.data
    e = np.exp(zd - zd.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(p, (z,), bw, "softmax")


def cross_entropy(probs, labels) -> Tensor:
    """Mean of -log p[true class], with p clamped below at 1e-12."""
    probs = as_tensor(probs)
    pd = probs.data
    labels = np.asarray(labels, dtype=np.int64)
    n, nc = pd.shape
    if labels.shape != (n,):
        raise ValueError("one label per row required")
    if (labels < 0).any() or (labels >= nc).any():
        raise ValueError(f"label out of range [0, {nc})")
    rows = np.arange(n)
    picked = pd[rows, labels]
    clamped = np.maximum(picked, LOG_CLAMP)
    loss = -np.log(clamped).mean()

    def bw(g):
        grad = np.zeros_like(pd)
        grad[rows, labels] = np.where(picked > LOG_CLAMP, -1.0 / (n * clamped), 0.0)
        return (grad * g,)

    return Tensor.from_op(np.asarray(loss, dtype=pd.dtype), (probs,), bw, "cross_entropy")


def l2_penalty(weights: Iterable, lam: float) -> Tensor:
    """``lam * sum(||W||^2)`` over the given kernels."""
    if lam < 0:
        raise ValueError("l2 strength must be >= 0")
    total = None
    for w in weights:
        w = as_tensor(w)
        sq = (w * w).sum()
        total = sq if total is None else total + sq
    if total is None:
        return Tensor(0.0)
    return total * lam


def maxnorm_project(W: np.ndarray, c: float) -> np.ndarray:
    """Rescale every column of ``W`` whose Euclidean norm exceeds ``c`` to norm ``c``."""
    if c <= 0:
        raise ValueError("max-norm bound must be > 0")
    W = np.asarray(W)
    norms = np.linalg.norm(W.astype(np.float64), axis=0)
    over = norms > c
    if not over.any():
        return W.copy()
    scale = np.ones_like(norms)
    scale[over] = c / norms[over]
    out = W * scale.astype(W.dtype)
    # rounding can leave a column a hair above c; nudge it down
    renorm = np.linalg.norm(out.astype(np.float64), axis=0)
    bad = renorm > c
    if bad.any():
        out[:, bad] = out[:, bad] * np.nextafter(c / renorm[bad], 0).astype(W.dtype)
    return out


def init_classifier_params(cfg: ClassifierConfig, in_dim: int, rng: np.random.Generator,
                           dtype=np.float32) -> dict[str, np.ndarray]:
    p = {}
    for i, (fan_in, fan_out) in enumerate(cfg.layer_sizes(in_dim), start=1):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        p[f"dense{i}.W"] = rng.uniform(-limit, limit, (fan_out, fan_in)).astype(dtype)
        p[f"dense{i}.b"] = np.zeros(fan_out, dtype)
    return p


def classifier_logits(emb: Tensor, params: dict, cfg: ClassifierConfig, mode: str = "infer",
                      rng: np.random.Generator | None = None) -> Tensor:
    from .encoder import dropout

    n_layers = len(cfg.hidden) + 1
    h = emb
    for i in range(1, n_layers + 1):
        last = i == n_layers
        h = dense_forward(h, params[f"dense{i}.W"], params[f"dense{i}.b"],
                          "identity" if last else "elu", cfg.elu_alpha)
        if i == 1:
            h = dropout(h, cfg.dropout_p, mode, rng)
    return h


def classify(emb, params: dict, cfg: ClassifierConfig, mode: str = "infer",
             rng: np.random.Generator | None = None,
             class_names: Sequence[str] | None = None) -> list[ClassPrediction]:
    """Embeddings -> one :class:`ClassPrediction` per row."""
    emb = as_tensor(emb)
    params = {k: as_tensor(v, emb.dtype) for k, v in params.items()}
    probs = softmax(classifier_logits(emb, params, cfg, mode, rng)).data
    return [ClassPrediction.from_probs(row, class_names) for row in probs]
