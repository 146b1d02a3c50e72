"""Multi-view multi-label datasets: loading, corruption simulation, synthesis.

A dataset bundles m per-view feature matrices (n x d_v), a binary label
matrix Y (n x c), a view-availability mask W (n x m) and a label-known mask
G (n x c). Missing entries are zero-filled: features of an unavailable view
and labels of an unknown entry are exactly 0, so the masks are the single
source of truth about what is observed.

File format: a JSON manifest with keys ``views`` (ordered list of CSV paths),
``labels`` and optional ``view_mask`` / ``label_mask``. Matrix files are
headerless comma-separated CSV, one sample per row; binary files must contain
exactly 0 or 1.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateSplit,
    DimensionMismatch,
    EmptyRowMask,
    InfeasibleRatio,
    MissingFile,
    NonBinary,
)

MANIFEST_NAME = "manifest.json"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _check_binary(arr: np.ndarray, name: str):
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise NonBinary(f"{name} contains values outside {{0, 1}}")


@dataclass(frozen=True)
class MultiViewDataset:
    """Immutable container for multi-view features, labels, and masks."""

    views: list[np.ndarray]
    labels: np.ndarray
    view_mask: np.ndarray
    label_mask: np.ndarray

    def __post_init__(self):
        if not self.views:
            raise DimensionMismatch("a dataset needs at least one view")
        views = [_freeze(v) for v in self.views]
        labels = _freeze(self.labels)
        view_mask = _freeze(self.view_mask)
        label_mask = _freeze(self.label_mask)
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "view_mask", view_mask)
        object.__setattr__(self, "label_mask", label_mask)

        n = views[0].shape[0]
        for v, x in enumerate(views):
            if x.ndim != 2 or x.shape[0] != n:
                raise DimensionMismatch(f"view {v} has shape {x.shape}; expected {n} rows")
        for name, arr in (("labels", labels), ("view_mask", view_mask), ("label_mask", label_mask)):
            if arr.ndim != 2 or arr.shape[0] != n:
                raise DimensionMismatch(f"{name} has shape {arr.shape}; expected {n} rows")
        if view_mask.shape[1] != len(views):
            raise DimensionMismatch(
                f"view_mask has {view_mask.shape[1]} columns for {len(views)} views"
            )
        if label_mask.shape != labels.shape:
            raise DimensionMismatch(
                f"label_mask shape {label_mask.shape} != labels shape {labels.shape}"
            )
        _check_binary(labels, "labels")
        _check_binary(view_mask, "view_mask")
        _check_binary(label_mask, "label_mask")
        if np.any(view_mask.sum(axis=1) == 0):
            raise EmptyRowMask("every sample must keep at least one available view")
        for v, x in enumerate(views):
            if np.any(x[view_mask[:, v] == 0] != 0.0):
                raise ValueError(f"view {v} has nonzero features on masked rows")
        if np.any(labels[label_mask == 0.0] != 0.0):
            raise ValueError("labels must be 0 where the label mask is 0")

    @property
    def n(self) -> int:
        return self.views[0].shape[0]

    @property
    def m(self) -> int:
        return len(self.views)

    @property
    def c(self) -> int:
        return self.labels.shape[1]

    @property
    def view_dims(self) -> list[int]:
        return [x.shape[1] for x in self.views]

    def take(self, indices) -> "MultiViewDataset":
        """New dataset holding the given rows; masks travel with their rows."""
        idx = np.asarray(indices, dtype=int)
        return MultiViewDataset(
            views=[x[idx].copy() for x in self.views],
            labels=self.labels[idx].copy(),
            view_mask=self.view_mask[idx].copy(),
            label_mask=self.label_mask[idx].copy(),
        )


def apply_masks(
    ds: MultiViewDataset,
    view_mask: np.ndarray | None = None,
    label_mask: np.ndarray | None = None,
) -> MultiViewDataset:
    """Return a copy with the given masks applied and features/labels zero-filled.

    New masks combine with existing ones (an already-missing entry stays
    missing).
    """
    w = ds.view_mask if view_mask is None else ds.view_mask * np.asarray(view_mask, dtype=np.float64)
    g = ds.label_mask if label_mask is None else ds.label_mask * np.asarray(label_mask, dtype=np.float64)
    views = [x * w[:, v : v + 1] for v, x in enumerate(ds.views)]
    labels = ds.labels * g
    return MultiViewDataset(views=views, labels=labels, view_mask=w, label_mask=g)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def _load_matrix(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFile(str(path))
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)


def load_dataset(manifest_path) -> MultiViewDataset:
    """Load and validate a dataset from a manifest file (or its directory)."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise MissingFile(str(path))
    manifest = json.loads(path.read_text())
    base = path.parent

    view_paths = manifest.get("views")
    if not view_paths:
        raise ValueError(f"manifest {path} lists no views")
    if "labels" not in manifest:
        raise ValueError(f"manifest {path} lists no labels file")

    views = [_load_matrix(base / p) for p in view_paths]
    labels = _load_matrix(base / manifest["labels"])
    n = views[0].shape[0]
    if "view_mask" in manifest:
        view_mask = _load_matrix(base / manifest["view_mask"])
    else:
        view_mask = np.ones((n, len(views)))
    if "label_mask" in manifest:
        label_mask = _load_matrix(base / manifest["label_mask"])
    else:
        label_mask = np.ones_like(labels)

    # Enforce the zero-filling convention up front, loudly if it changes data.
    _check_binary(view_mask, "view_mask")
    _check_binary(label_mask, "label_mask")
    if view_mask.shape == (n, len(views)):
        for v in range(len(views)):
            masked = view_mask[:, v] == 0
            if views[v].shape[0] == n and np.any(views[v][masked] != 0.0):
                warnings.warn(f"view {v}: zero-filling features of masked rows")
                views[v] = views[v] * view_mask[:, v : v + 1]
    if label_mask.shape == labels.shape and np.any(labels[label_mask == 0.0] != 0.0):
        warnings.warn("zero-filling labels at masked entries")
        labels = labels * label_mask

    return MultiViewDataset(views=views, labels=labels, view_mask=view_mask, label_mask=label_mask)


def save_dataset(ds: MultiViewDataset, out_dir) -> Path:
    """Write a dataset directory (CSVs + manifest); returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "views": [f"view_{v}.csv" for v in range(ds.m)],
        "labels": "labels.csv",
        "view_mask": "view_mask.csv",
        "label_mask": "label_mask.csv",
    }
    for v, x in enumerate(ds.views):
        np.savetxt(out / manifest["views"][v], x, delimiter=",", fmt="%.17g")
    np.savetxt(out / manifest["labels"], ds.labels, delimiter=",", fmt="%d")
    np.savetxt(out / manifest["view_mask"], ds.view_mask, delimiter=",", fmt="%d")
    np.savetxt(out / manifest["label_mask"], ds.label_mask, delimiter=",", fmt="%d")
    manifest_path = out / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# corruption simulators
# ---------------------------------------------------------------------------


def simulate_missing_views(n: int, m: int, ratio: float, seed: int) -> np.ndarray:
    """Binary availability matrix with exactly round(ratio*n) zeros per view.

    Zeros are drawn uniformly per column; rows left with no view are repaired
    by re-enabling one uniformly chosen view and, to preserve that column's
    count, disabling it in a row that currently has the most views available
    (skipped when no such donor row exists).
    """
    if not 0.0 <= ratio < 1.0:
        raise InfeasibleRatio(f"ratio must be in [0, 1), got {ratio}")
    zeros_per_view = round(ratio * n)
    if zeros_per_view * m > n * (m - 1):
        raise InfeasibleRatio(
            f"ratio {ratio} needs {zeros_per_view * m} missing entries but only "
            f"{n * (m - 1)} are compatible with one view per sample"
        )
    rng = np.random.default_rng(seed)
    w = np.ones((n, m))
    for v in range(m):
        drop = rng.choice(n, size=zeros_per_view, replace=False)
        w[drop, v] = 0.0

    for i in np.flatnonzero(w.sum(axis=1) == 0):
        v = int(rng.integers(m))
        w[i, v] = 1.0
        available = w[:, v] == 1.0
        available[i] = False
        row_sums = w.sum(axis=1)
        donors = np.flatnonzero(available & (row_sums >= 2))
        if donors.size:
            best = donors[row_sums[donors] == row_sums[donors].max()]
            w[rng.choice(best), v] = 0.0
    return w


def simulate_missing_labels(labels: np.ndarray, ratio: float, seed: int) -> np.ndarray:
    """Known-label mask hiding floor(ratio * count) positives and negatives per category."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio must be in [0, 1), got {ratio}")
    y = np.asarray(labels, dtype=np.float64)
    _check_binary(y, "labels")
    rng = np.random.default_rng(seed)
    g = np.ones_like(y)
    for j in range(y.shape[1]):
        for value in (1.0, 0.0):
            pool = np.flatnonzero(y[:, j] == value)
            hide = int(math.floor(ratio * pool.size))
            if hide:
                g[rng.choice(pool, size=hide, replace=False), j] = 0.0
    return g


# ---------------------------------------------------------------------------
# synthesis and splitting
# ---------------------------------------------------------------------------


def make_synthetic(
    n: int,
    m: int,
    c: int,
    d_latent: int,
    view_dims: list[int],
    noise: float = 0.1,
    seed: int = 0,
) -> MultiViewDataset:
    """Latent-factor synthetic dataset with correlated labels and full masks.

    Each view is a random linear map of shared latent factors plus isotropic
    noise. Label directions are drawn around a small set of shared latent
    axes so that categories co-occur, and thresholds are placed at a random
    per-category quantile so prevalences land in [0.2, 0.5].
    """
    if min(n, m, c, d_latent) < 1:
        raise ValueError("n, m, c, d_latent must all be >= 1")
    if len(view_dims) != m:
        raise DimensionMismatch(f"view_dims has {len(view_dims)} entries for m={m}")
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal((n, d_latent))

    views = []
    scale = 1.0 / math.sqrt(d_latent)
    for d_v in view_dims:
        mixing = rng.standard_normal((d_latent, d_v)) * scale
        x = latent @ mixing
        if noise:
            x = x + noise * rng.standard_normal((n, d_v))
        views.append(x)

    n_directions = max(1, c // 3)
    directions = rng.standard_normal((d_latent, n_directions))
    directions /= np.linalg.norm(directions, axis=0, keepdims=True)
    label_map = np.empty((d_latent, c))
    for j in range(c):
        label_map[:, j] = directions[:, j % n_directions] + 0.5 * rng.standard_normal(d_latent)
    scores = latent @ label_map
    prevalence = rng.uniform(0.2, 0.5, size=c)
    thresholds = np.array(
        [np.quantile(scores[:, j], 1.0 - prevalence[j]) for j in range(c)]
    )
    labels = (scores > thresholds[None, :]).astype(np.float64)

    return MultiViewDataset(
        views=views,
        labels=labels,
        view_mask=np.ones((n, m)),
        label_mask=np.ones((n, c)),
    )


def split(ds: MultiViewDataset, train_ratio: float, seed: int):
    """Seeded random row partition into (train, test); train side rounds down."""
    if not 0.0 < train_ratio < 1.0:
        raise DegenerateSplit(f"train_ratio must be in (0, 1), got {train_ratio}")
    # epsilon guards against 0.7 * 10 -> 6.999... style float artifacts
    n_train = int(math.floor(train_ratio * ds.n + 1e-9))
    if n_train < 1 or n_train >= ds.n:
        raise DegenerateSplit(f"split of {ds.n} rows at ratio {train_ratio} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(ds.n)
    return ds.take(perm[:n_train]), ds.take(perm[n_train:])
