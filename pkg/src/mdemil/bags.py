"""Bags of instance embeddings, synthetic long-tailed datasets, and their on-disk formats.

Bag file layout (little-endian)::

    magic    4 bytes  b"MDEB"
    version  u16      1
    reserved u16      0
    label    u32
    n        u32      instances in the bag
    d        u32      embedding width
    payload  n*d float32, row-major

The bag id is not stored; it is the file stem.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BadMagicError,
    DegenerateInputError,
    NonFiniteValueError,
    SpecError,
    TruncatedPayloadError,
    VersionMismatchError,
)

BAG_MAGIC = b"MDEB"
BAG_VERSION = 1
_HEADER = struct.Struct("<4sHHIII")
GROUP_NAMES = ("head", "medium", "tail")
MANIFEST_FORMAT = "mde-manifest"
MANIFEST_VERSION = 1


@dataclass
class Bag:
    id: str
    label: int
    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
            raise DegenerateInputError(f"bag {self.id!r}: embeddings must be N x d with N >= 1, got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise NonFiniteValueError(f"bag {self.id!r} contains non-finite values")
        if int(self.label) < 0:
            raise SpecError(f"bag {self.id!r}: negative label {self.label}")
        self.embeddings = emb
        self.label = int(self.label)

    @property
    def n_instances(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def save_bag(bag: Bag, path) -> None:
    payload = np.ascontiguousarray(bag.embeddings, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise NonFiniteValueError(f"bag {bag.id!r} overflows float32")
    n, d = payload.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BAG_MAGIC, BAG_VERSION, 0, bag.label, n, d))
        fh.write(payload.tobytes())


def read_bag_payload(path) -> Tuple[int, np.ndarray]:
    """Return ``(label, float32 payload)`` exactly as stored."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header is {len(raw)} bytes, need {_HEADER.size}")
    magic, version, _reserved, label, n, d = _HEADER.unpack_from(raw)
    if magic != BAG_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != BAG_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {BAG_VERSION}")
    expected = n * d * 4
    body = raw[_HEADER.size:]
    if len(body) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(body)} bytes, header promises {expected}")
    payload = np.frombuffer(body, dtype="<f4", count=n * d).reshape(n, d)
    if not np.all(np.isfinite(payload)):
        raise NonFiniteValueError(f"{path}: payload contains non-finite values")
    return label, payload.astype(np.float32)


def load_bag(path) -> Bag:
    label, payload = read_bag_payload(path)
    return Bag(Path(path).stem, label, payload.astype(np.float64))


def imbalance_ratio(counts: Sequence[int]) -> float:
    counts = [int(c) for c in counts]
    if not counts or min(counts) < 1:
        raise DegenerateInputError(f"imbalance ratio needs every class count >= 1, got {counts}")
    return max(counts) / min(counts)


def default_groups(counts: Sequence[int]) -> Dict[str, List[int]]:
    """Sort classes by descending count (stable) and cut into contiguous thirds."""
    order = sorted(range(len(counts)), key=lambda k: (-counts[k], k))
    chunks = np.array_split(np.array(order, dtype=int), 3)
    return {name: sorted(int(k) for k in chunk) for name, chunk in zip(GROUP_NAMES, chunks)}


@dataclass
class DatasetSpec:
    num_classes: int = 4
    embed_dim: int = 64
    head_count: int = 871
    imbalance_ratio: float = 35.0
    instances_range: Tuple[int, int] = (16, 48)
    evidence_fraction: Optional[Tuple[float, ...]] = None
    noise_sigma: float = 0.5
    test_per_class: int = 40
    seed: int = 0
    class_names: Optional[Tuple[str, ...]] = None

    def validate(self) -> None:
        if self.num_classes < 2:
            raise SpecError(f"need at least 2 classes, got {self.num_classes}")
        if not self.imbalance_ratio >= 1:
            raise SpecError(f"imbalance ratio must be >= 1, got {self.imbalance_ratio}")
        lo, hi = self.instances_range
        if lo < 1 or hi < lo:
            raise SpecError(f"bad instances_range {self.instances_range}")
        if self.embed_dim < 1 or self.head_count < 1 or self.test_per_class < 0:
            raise SpecError("embed_dim and head_count must be positive, test_per_class non-negative")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be non-negative")
        rho = self.evidence()
        if len(rho) != self.num_classes or any(not 0 < r <= 1 for r in rho):
            raise SpecError(f"evidence fractions must be C values in (0, 1], got {rho}")
        if self.class_names is not None:
            if len(self.class_names) != self.num_classes or len(set(self.class_names)) != self.num_classes:
                raise SpecError("class_names must be C distinct names")

    def evidence(self) -> Tuple[float, ...]:
        # tail classes get the sparsest evidence by default
        if self.evidence_fraction is not None:
            return tuple(float(r) for r in self.evidence_fraction)
        return tuple(float(r) for r in np.linspace(0.5, 0.1, self.num_classes))

    def names(self) -> Tuple[str, ...]:
        if self.class_names is not None:
            return tuple(self.class_names)
        return tuple(f"class_{k}" for k in range(self.num_classes))

    def class_counts(self) -> List[int]:
        c = self.num_classes
        counts = [int(round(self.head_count * self.imbalance_ratio ** (-k / (c - 1)))) for k in range(c)]
        if min(counts) < 1:
            raise SpecError(
                f"class counts {counts} round to zero; increase head_count (M_0={self.head_count}) "
                f"or lower the imbalance ratio"
            )
        return counts

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "embed_dim": self.embed_dim,
            "head_count": self.head_count,
            "imbalance_ratio": self.imbalance_ratio,
            "instances_range": list(self.instances_range),
            "evidence_fraction": list(self.evidence()),
            "noise_sigma": self.noise_sigma,
            "test_per_class": self.test_per_class,
            "seed": self.seed,
            "class_names": list(self.names()),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        for key in ("instances_range", "evidence_fraction", "class_names"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class DatasetManifest:
    class_names: List[str]
    entries: List[Tuple[str, int]]
    groups: Dict[str, List[int]]
    root: Path = field(default_factory=Path)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def counts(self) -> List[int]:
        counts = [0] * self.num_classes
        for _, label in self.entries:
            counts[label] += 1
        return counts

    @property
    def labels(self) -> List[int]:
        return [label for _, label in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def path_of(self, i: int) -> Path:
        return self.root / self.entries[i][0]

    def load_bags(self) -> List[Bag]:
        bags = []
        for i, (_, label) in enumerate(self.entries):
            bag = load_bag(self.path_of(i))
            if bag.label != label:
                raise SpecError(f"{self.path_of(i)}: file label {bag.label} disagrees with manifest label {label}")
            bags.append(bag)
        return bags

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "class_names": list(self.class_names),
            "counts": self.counts,
            "groups": {g: list(self.groups.get(g, [])) for g in GROUP_NAMES},
            "bags": [{"path": p, "label": label} for p, label in self.entries],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: manifest is not valid JSON ({exc})") from exc
        if doc.get("format") != MANIFEST_FORMAT or doc.get("version") != MANIFEST_VERSION:
            raise SpecError(f"{path}: not a version-{MANIFEST_VERSION} {MANIFEST_FORMAT} document")
        names = list(doc["class_names"])
        entries = [(b["path"], int(b["label"])) for b in doc["bags"]]
        for _, label in entries:
            if not 0 <= label < len(names):
                raise SpecError(f"{path}: label {label} outside {len(names)} classes")
        manifest = cls(names, entries, {g: list(doc["groups"].get(g, [])) for g in GROUP_NAMES}, path.parent)
        if doc.get("counts") is not None and list(doc["counts"]) != manifest.counts:
            raise SpecError(f"{path}: stored counts {doc['counts']} disagree with bag list {manifest.counts}")
        return manifest


def class_prototypes(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit prototypes, mutually orthogonal when ``num_classes <= dim``."""
    raw = rng.standard_normal((dim, num_classes))
    if num_classes <= dim:
        q, r = np.linalg.qr(raw)
        q = q * np.sign(np.diag(r))
        return q.T.copy()
    return (raw / np.linalg.norm(raw, axis=0)).T.copy()


def _make_bag(bag_id, label, proto, rho, spec, rng) -> Bag:
    lo, hi = spec.instances_range
    n = int(rng.integers(lo, hi + 1))
    n_evidence = min(n, math.ceil(rho * n))
    noise = spec.noise_sigma * rng.standard_normal((n, spec.embed_dim))
    noise[:n_evidence] += proto
    perm = rng.permutation(n)
    # stored precision is float32; keep the in-memory bag identical to a reloaded one
    bag = Bag(bag_id, label, noise[perm].astype(np.float32).astype(np.float64))
    return bag, perm < n_evidence


def synthesize(spec: DatasetSpec, with_masks: bool = False):
    """Generate (train, test) bags in memory. Train follows the long-tail profile; test is balanced.

    With ``with_masks`` each split is a list of ``(bag, evidence_mask)`` pairs instead.
    """
    spec.validate()
    counts = spec.class_counts()
    rng = np.random.default_rng(spec.seed)
    protos = class_prototypes(spec.num_classes, spec.embed_dim, rng)
    rho = spec.evidence()
    train = [
        _make_bag(f"train_{k}_{i:05d}", k, protos[k], rho[k], spec, rng)
        for k in range(spec.num_classes)
        for i in range(counts[k])
    ]
    test = [
        _make_bag(f"test_{k}_{i:05d}", k, protos[k], rho[k], spec, rng)
        for k in range(spec.num_classes)
        for i in range(spec.test_per_class)
    ]
    if with_masks:
        return train, test
    return [b for b, _ in train], [b for b, _ in test]


def write_split(bags: Sequence[Bag], out_dir, split: str, class_names, groups) -> DatasetManifest:
    out_dir = Path(out_dir)
    (out_dir / split).mkdir(parents=True, exist_ok=True)
    entries = []
    for bag in bags:
        rel = f"{split}/{bag.id}.bag"
        save_bag(bag, out_dir / rel)
        entries.append((rel, bag.label))
    manifest = DatasetManifest(list(class_names), entries, groups, out_dir)
    manifest.save(out_dir / f"{split}_manifest.json")
    return manifest


def generate_longtail(spec: DatasetSpec, out_dir) -> Tuple[DatasetManifest, DatasetManifest]:
    train, test = synthesize(spec)
    groups = default_groups(spec.class_counts())
    names = spec.names()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_m = write_split(train, out_dir, "train", names, groups)
    test_m = write_split(test, out_dir, "test", names, groups)
    summary = {
        "spec": spec.to_dict(),
        "train_counts": train_m.counts,
        "test_counts": test_m.counts,
        "imbalance_ratio": imbalance_ratio(train_m.counts),
        "groups": groups,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return train_m, test_m


def find_manifests(data_dir) -> Tuple[Path, Path]:
    data_dir = Path(data_dir)
    train, test = data_dir / "train_manifest.json", data_dir / "test_manifest.json"
    missing = [str(p) for p in (train, test) if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"dataset directory {os.fspath(data_dir)!r} lacks {', '.join(missing)}")
    return train, test
