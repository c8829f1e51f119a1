"""Template tokenisation, class-specific prompt banks and diversified composition.

A prompt bank holds ``C`` sequences of ``L`` virtual tokens.  For one image
feature ``f`` the diversified prompt is, position by position::

    p_d[j] = sum_i cos(f, bank[i, j]) * bank[i, j]

with raw (unnormalised) cosine weights.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import graph as G
from .graph import ContractViolation, NumericError, Parameter, Tensor

PLACEHOLDER = "[label word]"
UNK, PAD = "<unk>", "<pad>"
PROMPT_NOISE_STD = 0.02

_PUNCT = str.maketrans("", "", string.punctuation)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != [UNK, PAD]:
            raise ContractViolation(f"vocabulary must start with {UNK!r}, {PAD!r}; got {tokens[:2]}")
        if len(set(tokens)) != len(tokens):
            dupes = sorted({t for t in tokens if tokens.count(t) > 1})
            raise ContractViolation(f"duplicate vocabulary tokens: {dupes}")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, words) -> "Vocabulary":
        """Reserved tokens first, then the normalised words in sorted order."""
        found = set()
        for w in words:
            found.update(normalize_words(w))
        return cls([UNK, PAD] + sorted(found - {UNK, PAD}))

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line.strip() for line in lines if line.strip()])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def lookup(self, token: str) -> int:
        return self._ids.get(token, 0)

    def token(self, idx: int) -> str:
        return self.tokens[idx]


def normalize_words(text: str) -> list[str]:
    words = (w.translate(_PUNCT) for w in text.lower().split())
    return [w for w in words if w]


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    if not text.strip():
        raise ContractViolation("tokenize: empty text")
    return [vocab.lookup(w) for w in normalize_words(text)]


@dataclass(frozen=True)
class Template:
    text: str
    ids: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.ids)


def parse_template(text: str, vocab: Vocabulary) -> Template:
    if text.count(PLACEHOLDER) != 1 or not text.rstrip().endswith(PLACEHOLDER):
        raise ContractViolation(
            f"template must contain {PLACEHOLDER!r} exactly once, at the end: {text!r}")
    prefix = text.rstrip()[: -len(PLACEHOLDER)]
    ids = tokenize(prefix, vocab) if prefix.strip() else []
    if not ids:
        raise ContractViolation(f"template has no prompt tokens before the placeholder: {text!r}")
    return Template(text, tuple(ids))


@dataclass
class ClassEmbeddings:
    """Frozen embedding rows of each class word, in label order."""

    labels: tuple[str, ...]
    ids: tuple[tuple[int, ...], ...]
    rows: tuple[Tensor, ...]

    @classmethod
    def build(cls, labels: Sequence[str], vocab: Vocabulary, table: Tensor) -> "ClassEmbeddings":
        ids = tuple(tuple(tokenize(label.replace("_", " "), vocab)) for label in labels)
        # Plain tensors: gradient stops at the class-word rows.
        rows = tuple(Tensor(table.data[list(i)]) for i in ids)
        return cls(tuple(labels), ids, rows)

    @property
    def max_length(self) -> int:
        return max(len(i) for i in self.ids)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class PromptBank:
    values: Parameter  # (C, L, d)

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


def init_prompt_bank(template: Template, table: Tensor, n_classes: int, is_flag: bool,
                     seed=0, context_length: int | None = None,
                     max_class_length: int = 1, dtype=None) -> PromptBank:
    """Copy the template's embedded tokens into every class slice.

    With ``is_flag`` the slices additionally get independent Gaussian noise so
    classes start distinct.
    """
    if n_classes < 1:
        raise ContractViolation(f"prompt bank needs C >= 1, got {n_classes}")
    if context_length is not None and template.length + max_class_length > context_length:
        raise ContractViolation(
            f"template of {template.length} tokens plus class word of {max_class_length} "
            f"exceeds context length {context_length}")
    dtype = dtype or table.dtype
    base = np.asarray(table.data[list(template.ids)], dtype=dtype)
    values = np.repeat(base[None], n_classes, axis=0)
    if is_flag:
        rng = np.random.default_rng(seed)
        values = values + (rng.standard_normal(values.shape) * PROMPT_NOISE_STD).astype(dtype)
    return PromptBank(Parameter(values, trainable=True, name="prompt_bank", dtype=dtype))


def _check_token_norms(bank: Tensor) -> None:
    norms = np.sqrt((bank.data ** 2).sum(axis=-1))
    zero = np.argwhere(norms == 0)
    if zero.size:
        i, j = (int(v) for v in zero[0])
        raise NumericError(f"zero-norm prompt token at class {i}, position {j}")


def compose_diversified(image_feature, bank, normalize: bool = False) -> Tensor:
    """Image-queried weighting of class prompts.

    ``image_feature`` is (d,) or (N, d); ``bank`` is (C, L, d).  Returns (L, d)
    or (N, L, d).  ``normalize`` replaces the raw cosine weights with a softmax
    over classes (experimental, off by default).
    """
    values = bank.values if isinstance(bank, PromptBank) else G.as_tensor(bank)
    f = G.as_tensor(image_feature)
    if values.ndim != 3:
        raise ContractViolation(f"prompt bank must be (C, L, d), got {values.shape}")
    if f.shape[-1] != values.shape[-1]:
        raise ContractViolation(
            f"image feature dim {f.shape[-1]} != prompt token dim {values.shape[-1]}")
    _check_token_norms(values)
    lead = f.shape[:-1]
    q = G.reshape(f, lead + (1, 1, f.shape[-1]))
    weights = G.cosine_similarity(q, values)  # (..., C, L)
    if normalize:
        weights = G.softmax(weights, axis=-2)
    weighted = G.reshape(weights, weights.shape + (1,)) * values  # (..., C, L, d)
    return G.sum(weighted, axis=-3)


def assemble_full_prompt(prompt: Tensor, class_rows: Tensor,
                         context_length: int | None = None) -> Tensor:
    """Prompt tokens first, class-word rows appended: (..., L + L_i, d)."""
    prompt = G.as_tensor(prompt)
    if prompt.shape[-1] != class_rows.shape[-1]:
        raise ContractViolation(f"prompt dim {prompt.shape[-1]} != class embedding dim {class_rows.shape[-1]}")
    total = prompt.shape[-2] + class_rows.shape[-2]
    if context_length is not None and total > context_length:
        raise ContractViolation(f"full prompt length {total} exceeds context length {context_length}")
    rows = class_rows
    if prompt.ndim > 2:
        rows = G.broadcast_to(class_rows, prompt.shape[:-2] + class_rows.shape)
    return G.concat([prompt, rows], axis=-2)


@dataclass(frozen=True)
class AblationFlags:
    instance_specific: bool = True
    class_specific: bool = True

    @property
    def label(self) -> str:
        return f"IS={'on' if self.instance_specific else 'off'},CS={'on' if self.class_specific else 'off'}"

    def bank_classes(self, n_classes: int) -> int:
        return n_classes if self.class_specific else 1


ABLATION_ROWS = (
    AblationFlags(False, False),
    AblationFlags(True, False),
    AblationFlags(False, True),
    AblationFlags(True, True),
)


def ablation_prompt(flags: AblationFlags, bank, image_feature, class_embeddings: ClassEmbeddings,
                    normalize: bool = False, context_length: int | None = None) -> list[Tensor]:
    """The C embedding sequences to score for one image (or a batch).

    * neither flag: one shared prompt, used verbatim for every class
    * IS only: one shared bank, image-weighted per token
    * CS only: class i uses its own bank slice, no image weighting
    * both: full diversified composition over all C slices
    """
    values = bank.values if isinstance(bank, PromptBank) else G.as_tensor(bank)
    n_classes = len(class_embeddings)
    expected = flags.bank_classes(n_classes)
    if values.shape[0] != expected:
        raise ContractViolation(f"{flags.label} needs a bank of {expected} classes, got {values.shape[0]}")
    if flags.instance_specific:
        shared = compose_diversified(image_feature, values, normalize)
        prompts = [shared] * n_classes
    elif flags.class_specific:
        prompts = [values[i] for i in range(n_classes)]
    else:
        prompts = [values[0]] * n_classes
    return [assemble_full_prompt(p, rows, context_length)
            for p, rows in zip(prompts, class_embeddings.rows)]
