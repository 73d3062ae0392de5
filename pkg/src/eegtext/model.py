"""Encoder + classifier parameters and the training objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classifier import (ClassifierConfig, ClassPrediction, classifier_logits,
                         cross_entropy, init_classifier_params, l2_penalty, softmax)
from .encoder import EncoderConfig, encoder_forward, init_encoder_params
from .tensor import Tensor

# running batch-norm statistics: stored and checkpointed, never trained
_STAT_SUFFIXES = (".mean", ".var")


@dataclass
class Model:
    encoder: EncoderConfig
    classifier: ClassifierConfig
    params: dict[str, np.ndarray]
    class_names: list[str] = field(default_factory=list)
    timesteps: int = 384

    @classmethod
    def init(cls, encoder: EncoderConfig, classifier: ClassifierConfig, seed: int = 0,
             dtype=np.float32, class_names=None, timesteps: int = 384) -> "Model":
        rng = np.random.default_rng(seed)
        params = init_encoder_params(encoder, rng, dtype)
        params.update(init_classifier_params(classifier, encoder.embedding_dim(timesteps),
                                             rng, dtype))
        names = list(class_names) if class_names else [
            f"class_{i}" for i in range(classifier.n_classes)]
        if len(names) != classifier.n_classes:
            raise ValueError("class_names length differs from n_classes")
        return cls(encoder, classifier, params, names, timesteps)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        return Model(self.encoder, self.classifier,
                     {k: v.astype(dtype) for k, v in self.params.items()},
                     list(self.class_names), self.timesteps)

    def trainable_names(self) -> list[str]:
        return [k for k in self.params if not k.endswith(_STAT_SUFFIXES)]

    def l2_names(self) -> list[str]:
        """Dense and convolution kernels (biases, BN and LSTM weights excluded)."""
        return [k for k in self.params
                if (k.startswith(("block", "depthwise", "sep.")) and k.endswith((".W", ".depthwise", ".pointwise")))
                or (k.startswith("dense") and k.endswith(".W"))]

    def dense_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("dense") and k.endswith(".W")]

    def count_parameters(self, trainable_only: bool = False) -> int:
        names = self.trainable_names() if trainable_only else list(self.params)
        return int(sum(self.params[k].size for k in names))

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        train = set(self.trainable_names())
        return {k: (Tensor(v, requires_grad=requires_grad and k in train) if k in train else v)
                for k, v in self.params.items()}

    # ------------------------------------------------------------------
    def logits(self, x, tensors: dict, mode: str = "infer", rng=None):
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.dtype)
        emb, updates = encoder_forward(x, tensors, self.encoder, mode, rng)
        return classifier_logits(emb, tensors, self.classifier, mode, rng), updates

    def loss(self, x, labels, tensors: dict, mode: str = "train", rng=None):
        """Total objective ``CE + lambda * sum ||W||^2`` on one batch.

        Returns ``(total, ce, probs, bn_updates)``.
        """
        logits, updates = self.logits(x, tensors, mode, rng)
        probs = softmax(logits)
        ce = cross_entropy(probs, labels)
        reg = l2_penalty([tensors[k] for k in self.l2_names()], self.classifier.l2_lambda)
        return ce + reg, ce, probs, updates

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        x = np.asarray(x)
        tensors = self.leaves(requires_grad=False)
        out = []
        for start in range(0, len(x), batch_size):
            logits, _ = self.logits(x[start:start + batch_size].astype(self.dtype), tensors)
            out.append(softmax(logits).data)
        return np.concatenate(out, axis=0)

    def predict(self, x, batch_size: int = 64) -> list[ClassPrediction]:
        probs = self.predict_proba(x, batch_size)
        return [ClassPrediction.from_probs(p, self.class_names) for p in probs]

    def embed(self, x) -> np.ndarray:
        tensors = self.leaves(requires_grad=False)
        emb, _ = encoder_forward(Tensor(np.asarray(x), dtype=self.dtype), tensors,
                                 self.encoder, "infer")
        return emb.data
