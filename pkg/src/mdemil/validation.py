"""Input checks for ragged bag collections, in the spirit of sklearn's check_X_y."""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from .bags import Bag
from .errors import DegenerateInputError, DimensionError


def check_bag(x, dim: Optional[int] = None, name: str = "bag") -> np.ndarray:
    if isinstance(x, Bag):
        x = x.embeddings
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected an N x d array, got {arr.ndim}-D input")
    if arr.shape[0] < 1:
        raise DegenerateInputError(f"{name}: bag has no instances")
    if dim is not None and arr.shape[1] != dim:
        raise DimensionError(f"{name}: instances are {arr.shape[1]}-d, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains NaN or infinity")
    return arr


def check_bags(X, dim: Optional[int] = None) -> List[np.ndarray]:
    """Validate a sequence of bags; all must share the instance width."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError("X must be a sequence of N_i x d arrays")
    if len(X) == 0:
        raise DegenerateInputError("X contains no bags")
    out = []
    for i, x in enumerate(X):
        arr = check_bag(x, dim, name=f"X[{i}]")
        dim = arr.shape[1]
        out.append(arr)
    return out


def check_bags_labels(X, y) -> Tuple[List[np.ndarray], np.ndarray]:
    bags = check_bags(X)
    y = np.asarray(y)
    if y.ndim != 1:
        raise DimensionError(f"y must be 1-D, got shape {y.shape}")
    if y.shape[0] != len(bags):
        raise DimensionError(f"{len(bags)} bags but {y.shape[0]} labels")
    return bags, y


def bags_from_arrays(X: Sequence[np.ndarray], y_idx: Sequence[int]) -> List[Bag]:
    return [Bag(f"bag_{i:05d}", int(label), x) for i, (x, label) in enumerate(zip(X, y_idx))]
