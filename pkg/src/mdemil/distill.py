"""Learnable-prompt text bank and the similarity distillation loss.

Each class prompt is the trainable template rows followed by that class's frozen
token rows. The class text vector is the L2-normalized row mean of its prompt.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bags import Bag, read_bag_payload, save_bag
from .errors import SpecError

TEMPLATE_LABEL = 0xFFFFFFFF
NORM_EPS = 1e-12


def _string_seed(seed: int, *parts: str) -> int:
    digest = hashlib.sha256("\x1f".join([str(seed), *parts]).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class TextEncoderStub:
    """Deterministic stand-in for a pretrained text encoder.

    Every (seed, string, position) triple maps to a fixed unit-norm row, so two
    stubs with the same seed agree exactly on the same strings.
    """

    def __init__(self, dim: int = 512, seed: int = 0, template: str = "an image of"):
        if dim < 1:
            raise SpecError(f"text dim must be positive, got {dim}")
        self.dim = int(dim)
        self.seed = int(seed)
        self.template = template

    def encode_template(self, length: int) -> np.ndarray:
        rng = np.random.default_rng(_string_seed(self.seed, "template", self.template))
        return _unit_rows(rng, length, self.dim)

    def encode_class(self, name: str, length: int) -> np.ndarray:
        rng = np.random.default_rng(_string_seed(self.seed, "class", name))
        return _unit_rows(rng, length, self.dim)


class FileTextSource:
    """Precomputed text embeddings stored in the bag layout.

    ``template.bag`` holds the template rows (label field ``0xFFFFFFFF``);
    ``class_<k>.bag`` holds class ``k``'s token rows (label field ``k``).
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        label, payload = read_bag_payload(self.directory / "template.bag")
        if label != TEMPLATE_LABEL:
            raise SpecError(f"template.bag label must be {TEMPLATE_LABEL:#x}, got {label}")
        self._template = payload.astype(np.float64)
        self.dim = self._template.shape[1]

    def encode_template(self, length: int) -> np.ndarray:
        if length != self._template.shape[0]:
            raise SpecError(f"template file has {self._template.shape[0]} rows, {length} requested")
        return self._template.copy()

    def encode_class_index(self, k: int) -> np.ndarray:
        label, payload = read_bag_payload(self.directory / f"class_{k}.bag")
        if label != k:
            raise SpecError(f"class_{k}.bag carries label {label}")
        return payload.astype(np.float64)


def write_text_embeddings(directory, template: np.ndarray, classes: Sequence[np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_bag(Bag("template", TEMPLATE_LABEL, template), directory / "template.bag")
    for k, rows in enumerate(classes):
        save_bag(Bag(f"class_{k}", k, rows), directory / f"class_{k}.bag")


@dataclass
class PromptBank:
    template: np.ndarray        # frozen record of the initial template rows
    prompt: Tensor              # trainable template rows, initialized from ``template``
    class_tokens: List[Tensor]  # frozen per-class token rows
    class_names: List[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_tokens)

    def assembled(self, k: int) -> Tensor:
        return ad.concat_rows([self.prompt, self.class_tokens[k]])

    def parameters(self) -> List[Tensor]:
        return [self.prompt]


def build_prompt_bank(
    source,
    template_len: int,
    class_names: Sequence[str],
    class_len: int = 2,
) -> PromptBank:
    if template_len < 1:
        raise SpecError(f"template length must be >= 1, got {template_len}")
    names = list(class_names)
    if len(names) < 2:
        raise SpecError(f"need at least 2 classes, got {len(names)}")
    if len(set(names)) != len(names):
        raise SpecError(f"duplicate class names in {names}")
    template = np.asarray(source.encode_template(template_len), dtype=np.float64)
    if isinstance(source, FileTextSource):
        tokens = [source.encode_class_index(k) for k in range(len(names))]
    else:
        tokens = [source.encode_class(name, class_len) for name in names]
    return PromptBank(
        template=template.copy(),
        prompt=Tensor(template.copy(), requires_grad=True, name="prompt"),
        class_tokens=[Tensor(t, requires_grad=False) for t in tokens],
        class_names=names,
    )


def class_text_matrix(bank: PromptBank) -> Tensor:
    """C x D_T matrix of normalized pooled prompts; differentiable only into the trainable prompt."""
    pooled = [ad.mean_rows(bank.assembled(k)) for k in range(bank.num_classes)]
    return ad.l2_normalize_rows(ad.concat_rows(pooled))


def similarity_logits(slide: Tensor, text: Tensor, scale: float) -> Tensor:
    if scale <= 0:
        raise SpecError(f"logit scale must be positive, got {scale}")
    # a dead slide embedding gives all-zero logits instead of an error
    unit = ad.l2_normalize_rows(slide, eps=NORM_EPS)
    return ad.scalar_scale(ad.matmul(unit, ad.transpose(text)), scale)


def distill_loss(slide: Tensor, text: Tensor, label: int, scale: float = 10.0) -> Tensor:
    """Cross-entropy over scaled cosine similarities between one adapted slide embedding and each class text."""
    return ad.cross_entropy(similarity_logits(slide, text, scale), label)


def load_text_source(directory: Optional[str], dim: int, seed: int):
    if directory:
        return FileTextSource(directory)
    return TextEncoderStub(dim=dim, seed=seed)

