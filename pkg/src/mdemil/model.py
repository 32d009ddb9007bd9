"""Aggregators, adaptor, expert networks and the bundle tying them together."""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError, DimensionError, SpecError

FUSION_MODES = ("mean-softmax", "U-only", "B-only")
ENSEMBLE_MODES = ("none", "separate", "shared")
AGGREGATORS = ("gated", "mean")


class Module:
    """Parameter container; submodules and tensors are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + attr] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + attr + "."))
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
        self.bias = Tensor(np.zeros((1, fan_out)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_bias(ad.matmul(x, self.weight), self.bias)


def _as_instances(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.shape[0] == 0:
        raise DegenerateInputError("cannot aggregate an empty bag")
    return t


class GatedAttentionAggregator(Module):
    """Projection, then tanh-branch gated by a sigmoid-branch, softmax over instances."""

    def __init__(self, in_dim: int, embed_dim: int, attn_dim: int, rng: np.random.Generator):
        self.proj = Linear(in_dim, embed_dim, rng)
        self.attn_v = Linear(embed_dim, attn_dim, rng)
        self.attn_u = Linear(embed_dim, attn_dim, rng)
        self.score = Linear(attn_dim, 1, rng)

    def __call__(self, x) -> Tuple[Tensor, Tensor]:
        x = _as_instances(x)
        h = ad.relu(self.proj(x))
        gated = ad.mul(ad.tanh(self.attn_v(h)), ad.sigmoid(self.attn_u(h)))
        attn = ad.softmax_rows(ad.transpose(self.score(gated)))
        return ad.matmul(attn, h), attn


class MeanPoolAggregator(Module):
    def __init__(self, in_dim: int, embed_dim: int, rng: np.random.Generator):
        self.proj = Linear(in_dim, embed_dim, rng)

    def __call__(self, x) -> Tuple[Tensor, Tensor]:
        x = _as_instances(x)
        n = x.shape[0]
        return ad.mean_rows(ad.relu(self.proj(x))), Tensor(np.full((1, n), 1.0 / n))


def aggregate(agg, bag_embeddings) -> Tuple[Tensor, Tensor]:
    """Slide embedding (1 x D) and attention over instances (1 x N)."""
    return agg(bag_embeddings)


class Adaptor(Module):
    """MLP on the slide embedding followed by a projector into the text-embedding space."""

    def __init__(self, embed_dim: int, text_dim: int, rng: np.random.Generator):
        self.fc1 = Linear(embed_dim, embed_dim, rng)
        self.fc2 = Linear(embed_dim, embed_dim, rng)
        self.projector = Linear(embed_dim, text_dim, rng)

    def __call__(self, s: Tensor) -> Tensor:
        return self.projector(self.fc2(ad.relu(self.fc1(s))))


class ExpertNetwork(Module):
    def __init__(self, embed_dim: int, hidden_dim: int, num_classes: int, rng: np.random.Generator):
        self.ffn = Linear(embed_dim, hidden_dim, rng)
        self.head = Linear(hidden_dim, num_classes, rng)

    def __call__(self, s: Tensor) -> Tensor:
        return self.head(ad.relu(self.ffn(s)))


@dataclass(frozen=True)
class ModelShape:
    in_dim: int
    num_classes: int
    embed_dim: int = 256
    attn_dim: int = 128
    ffn_dim: int = 256
    text_dim: int = 512
    aggregator: str = "gated"
    ensemble: str = "shared"
    distillation: bool = True

    def validate(self) -> None:
        if self.aggregator not in AGGREGATORS:
            raise SpecError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.ensemble not in ENSEMBLE_MODES:
            raise SpecError(f"ensemble must be one of {ENSEMBLE_MODES}, got {self.ensemble!r}")
        if min(self.in_dim, self.embed_dim, self.attn_dim, self.ffn_dim, self.text_dim) < 1 or self.num_classes < 1:
            raise SpecError(f"all model sizes must be positive: {self}")


def _make_aggregator(shape: ModelShape, rng):
    if shape.aggregator == "gated":
        return GatedAttentionAggregator(shape.in_dim, shape.embed_dim, shape.attn_dim, rng)
    return MeanPoolAggregator(shape.in_dim, shape.embed_dim, rng)


def _clone(module: Module) -> Module:
    import copy

    twin = copy.deepcopy(module)
    for p in twin.parameters():
        p.grad = None
    return twin


class ModelBundle(Module):
    """Shared aggregator, optional B-branch aggregator (``separate`` mode), adaptor and experts.

    With ``ensemble='shared'`` both branches call the very same aggregator object.
    """

    def __init__(self, shape: ModelShape, rng: np.random.Generator, logit_scale: float = 10.0):
        shape.validate()
        self.shape = shape
        self.logit_scale = float(logit_scale)
        # init order is fixed so the same seed gives the same aggregator/E_U across ablation rows
        self.aggregator = _make_aggregator(shape, rng)
        self.expert_u = ExpertNetwork(shape.embed_dim, shape.ffn_dim, shape.num_classes, rng)
        self.expert_b = (
            ExpertNetwork(shape.embed_dim, shape.ffn_dim, shape.num_classes, rng) if shape.ensemble != "none" else None
        )
        self.adaptor = Adaptor(shape.embed_dim, shape.text_dim, rng) if shape.distillation else None
        self.aggregator_b = _clone(self.aggregator) if shape.ensemble == "separate" else None

    @property
    def branch_b_aggregator(self):
        return self.aggregator_b if self.aggregator_b is not None else self.aggregator

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise SpecError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.copy()


@dataclass
class PairOutputs:
    s_u: Tensor
    s_b: Optional[Tensor]
    z_u: Tensor
    z_b: Optional[Tensor]
    z_u_cross: Optional[Tensor]
    z_b_cross: Optional[Tensor]
    attn_u: Tensor
    attn_b: Optional[Tensor]


def forward_pair(bundle: ModelBundle, bag_u, bag_b=None) -> PairOutputs:
    """Direct logits ``z_U = E_U(S_U)``, ``z_B = E_B(S_B)`` and crossed ``E_B(S_U)``, ``E_U(S_B)``.

    With ``ensemble='none'`` only the U branch is evaluated and ``bag_b`` is ignored.
    """
    s_u, attn_u = bundle.aggregator(bag_u)
    z_u = bundle.expert_u(s_u)
    if bundle.expert_b is None:
        return PairOutputs(s_u, None, z_u, None, None, None, attn_u, None)
    if bag_b is None:
        raise SpecError("ensemble modes other than 'none' need a B-branch bag")
    s_b, attn_b = bundle.branch_b_aggregator(bag_b)
    z_b = bundle.expert_b(s_b)
    return PairOutputs(s_u, s_b, z_u, z_b, bundle.expert_b(s_u), bundle.expert_u(s_b), attn_u, attn_b)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def predict(bundle: ModelBundle, bag_embeddings, fusion: str = "mean-softmax") -> Tuple[np.ndarray, int]:
    """Class probabilities and argmax label (ties go to the lowest index)."""
    if fusion not in FUSION_MODES:
        raise SpecError(f"fusion must be one of {FUSION_MODES}, got {fusion!r}")
    with ad.Tape():  # a throwaway tape keeps inference off any enclosing training tape
        s_u, _ = bundle.aggregator(bag_embeddings)
        p_u = _softmax(bundle.expert_u(s_u).data[0])
        if bundle.expert_b is None or fusion == "U-only":
            probs = p_u
        else:
            s_b = s_u if bundle.aggregator_b is None else bundle.aggregator_b(bag_embeddings)[0]
            p_b = _softmax(bundle.expert_b(s_b).data[0])
            probs = p_b if fusion == "B-only" else 0.5 * (p_u + p_b)
    return probs, int(np.argmax(probs))


# ------------------------------------------------------------------ checkpoints
#
# magic b"MDEC" | u16 version | u16 reserved | u32 meta_len | meta (UTF-8 JSON) | u32 count
# then per array: u16 name_len | name (UTF-8) | u32 rows | u32 cols | rows*cols float64
# all little-endian.

CKPT_MAGIC = b"MDEC"
CKPT_VERSION = 1


def save_checkpoint(path, arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [struct.pack("<4sHHI", CKPT_MAGIC, CKPT_VERSION, 0, len(meta_bytes)), meta_bytes]
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 2:
            raise DimensionError(f"checkpoint array {name!r} must be 2-D, got {arr.shape}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded + struct.pack("<II", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Tuple["OrderedDict[str, np.ndarray]", dict]:
    from .errors import BadMagicError, TruncatedPayloadError, VersionMismatchError

    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedPayloadError(f"{path}: checkpoint truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    magic, version, _, meta_len = struct.unpack("<4sHHI", take(12))
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        rows, cols = struct.unpack("<II", take(8))
        arrays[name] = np.frombuffer(take(rows * cols * 8), dtype="<f8").reshape(rows, cols).astype(np.float64)
    return arrays, meta
