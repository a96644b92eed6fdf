"""Principal-component projection of embeddings, fit on originals only."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff import ContractError, Tensor
from ..data import ORIGINAL, SYNTHETIC, AugmentedDataset, LabeledDataset
from ..models import Model


class ExportError(RuntimeError):
    pass


@dataclass
class PCAFit:
    mean: np.ndarray
    components: np.ndarray  # (k, D), rows orthonormal
    explained_variance: np.ndarray  # (k,), non-increasing
    explained_variance_ratio: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T


def fit_pca(x: np.ndarray, k: int) -> PCAFit:
    """Top-``k`` components of ``x`` via SVD of the centred data (covariance divisor N-1)."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if not 1 <= k <= d:
        raise ContractError(f"k={k} must lie in [1, {d}]")
    if n < 2:
        raise ExportError("PCA needs at least two samples")
    mean = x.mean(axis=0)
    # full V keeps an orthonormal basis even when n < k
    _, s, vt = np.linalg.svd(x - mean, full_matrices=True)
    var = s**2 / (n - 1)
    total = var.sum()
    comps = vt[:k]
    ev = np.zeros(k)
    ev[: min(k, var.size)] = var[:k]
    ratio = ev / total if total > 0 else np.zeros(k)
    return PCAFit(mean, comps, ev, ratio)


def _embed(model: Model, features: np.ndarray) -> np.ndarray:
    return model.embed(Tensor(features)).data


def export_pca(
    model: Model,
    dataset: LabeledDataset | AugmentedDataset,
    class_subset,
    k: int = 2,
    include_synthetic: bool = True,
) -> tuple[list[dict], PCAFit]:
    """Project embeddings of the ``class_subset`` onto their top-``k`` components.

    Synthetic samples are kept when both of their sources belong to the subset;
    they are projected with the fit computed on originals only.
    """
    classes = sorted(set(int(c) for c in class_subset))
    if not classes:
        raise ContractError("class_subset must be non-empty")
    if isinstance(dataset, AugmentedDataset):
        originals, dsd = dataset.originals, dataset
    else:
        originals, dsd = dataset, None
    keep = np.flatnonzero(np.isin(originals.labels, classes))
    if keep.size == 0:
        raise ExportError(f"no original samples in classes {classes}")
    emb = _embed(model, originals.features[keep])
    if k > emb.shape[1]:
        raise ContractError(f"k={k} exceeds embedding dimension {emb.shape[1]}")
    fit = fit_pca(emb, k)

    rows = []
    for idx, coords in zip(keep, fit.transform(emb)):
        rows.append(_row(f"o{idx}", ORIGINAL, int(originals.labels[idx]), coords))
    if include_synthetic and dsd is not None and dsd.n_synthetic:
        known = (dsd.source_ids >= 0).all(axis=1)
        src_labels = originals.labels[np.maximum(dsd.source_ids, 0)]
        mask = known & np.isin(src_labels, classes).all(axis=1)
        syn_idx = np.flatnonzero(mask)
        if syn_idx.size:
            coords = fit.transform(_embed(model, dsd.synthetic_features[syn_idx]))
            for j, c in zip(syn_idx, coords):
                label = None
                if dsd.synthetic_labels is not None and dsd.synthetic_labels[j] >= 0:
                    label = int(dsd.synthetic_labels[j])
                rows.append(_row(f"s{j}", SYNTHETIC, label, c))
    return rows, fit


def _row(sample_id: str, provenance: str, label, coords) -> dict:
    return {
        "sample_id": sample_id,
        "provenance": provenance,
        "label": label,
        "coords": [float(c) for c in coords],
    }


def write_projection(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k = len(rows[0]["coords"]) if rows else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "provenance", "label"] + [f"pc{i + 1}" for i in range(k)])
        for r in rows:
            w.writerow([r["sample_id"], r["provenance"], "" if r["label"] is None else r["label"]] + [repr(c) for c in r["coords"]])
    return path
