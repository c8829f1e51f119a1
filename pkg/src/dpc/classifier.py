"""Cosine-similarity scoring, argmax prediction and cross-entropy loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import graph as G
from .encoders import DualEncoder, TextEncoder
from .graph import ContractViolation, Parameter, Tensor
from .prompting import (
    AblationFlags,
    ClassEmbeddings,
    PromptBank,
    Template,
    ablation_prompt,
    init_prompt_bank,
)


def score(image_feature, sequences: Sequence[Tensor], text_encoder: TextEncoder) -> Tensor:
    """One cosine logit per class sequence: (C,) for one image, (N, C) for a batch.

    The text encoder runs once per class, batched over images.
    """
    if len(sequences) < 1:
        raise ContractViolation("score needs at least one class sequence")
    f = G.as_tensor(image_feature)
    logits = []
    for seq in sequences:
        txt = text_encoder.encode(seq)
        if txt.ndim < f.ndim:
            txt = G.broadcast_to(txt, f.shape)
        logits.append(G.cosine_similarity(f, txt))
    return G.stack(logits, axis=-1)


def predict(logits) -> np.ndarray | int:
    """Argmax over the last axis; ties go to the lowest class index."""
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    out = np.argmax(values, axis=-1)
    return int(out) if out.ndim == 0 else out


def cross_entropy(logits, target, logit_scale: float = 1.0) -> Tensor:
    """Mean over the batch of ``-log softmax(scale * logits)[target]``."""
    if logit_scale <= 0:
        raise ContractViolation(f"logit_scale must be positive, got {logit_scale}")
    logits = G.as_tensor(logits)
    if logits.ndim == 1:
        logits = G.reshape(logits, (1,) + logits.shape)
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n, c = logits.shape
    if target.shape != (n,) or target.min() < 0 or target.max() >= c:
        raise ContractViolation(f"targets {target.tolist()} invalid for logits of shape {logits.shape}")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), target] = 1
    logp = G.log_softmax(G.scale(logits, logit_scale), axis=-1)
    return G.scale(G.sum(logp * onehot), -1.0 / n)


@dataclass
class PromptClassifier:
    """Frozen dual encoder plus a trainable prompt bank.

    ``parameters()`` is the only thing an optimizer ever sees, and it is
    exactly the prompt bank.
    """

    encoders: DualEncoder
    template: Template
    class_embeddings: ClassEmbeddings
    bank: PromptBank
    flags: AblationFlags = AblationFlags()
    normalize_weights: bool = False
    logit_scale: float = 1.0

    @classmethod
    def build(cls, encoders: DualEncoder, template: Template, class_embeddings: ClassEmbeddings,
              flags: AblationFlags = AblationFlags(), seed=0, normalize_weights: bool = False,
              logit_scale: float = 1.0) -> "PromptClassifier":
        n_classes = len(class_embeddings)
        if n_classes < 2:
            raise ContractViolation(f"classification needs C >= 2 classes, got {n_classes}")
        bank = init_prompt_bank(
            template, encoders.text.token_embedding, flags.bank_classes(n_classes),
            flags.instance_specific, seed=seed,
            context_length=encoders.text.config.context_length,
            max_class_length=class_embeddings.max_length)
        return cls(encoders, template, class_embeddings, bank, flags, normalize_weights, logit_scale)

    @property
    def n_classes(self) -> int:
        return len(self.class_embeddings)

    def parameters(self) -> list[Parameter]:
        return [self.bank.values]

    def image_features(self, pixels) -> np.ndarray:
        return self.encoders.image.encode(pixels).data

    def sequences(self, image_features) -> list[Tensor]:
        return ablation_prompt(self.flags, self.bank, image_features, self.class_embeddings,
                               self.normalize_weights, self.encoders.text.config.context_length)

    def logits(self, image_features) -> Tensor:
        f = Tensor(np.asarray(image_features, dtype=self.bank.values.dtype))
        return score(f, self.sequences(f), self.encoders.text)

    def loss(self, image_features, targets) -> Tensor:
        return cross_entropy(self.logits(image_features), targets, self.logit_scale)

    def predict(self, image_features) -> np.ndarray:
        return predict(self.logits(image_features))
