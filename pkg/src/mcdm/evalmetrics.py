"""Quantitative evaluation: Fréchet distance between feature sets,
rank-based AUC, and the outside-mask preservation check.

The Fréchet distance uses an eigendecomposition of the symmetrized
product for the matrix square root; it never calls an iterative solver,
so failures surface as explicit numeric errors instead of convergence
warnings.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
from scipy.stats import rankdata

EIGENVALUE_FLOOR = -1e-8  # more negative than this means the input was not PSD


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. single-class AUC)."""


@dataclass
class FeatureSet:
    """N x dim feature matrix with its fitted Gaussian moments."""

    vectors: np.ndarray
    mean: np.ndarray = field(init=False)
    cov: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be (N, dim), got shape {self.vectors.shape}")
        if self.vectors.shape[0] < 2:
            raise ValueError("need at least 2 vectors for a covariance")
        self.mean = self.vectors.mean(axis=0)
        self.cov = np.atleast_2d(np.cov(self.vectors, rowvar=False))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _psd_sqrt(matrix: np.ndarray, what: str) -> np.ndarray:
    w, v = np.linalg.eigh(matrix)
    if w.min() < EIGENVALUE_FLOOR:
        raise FloatingPointError(f"{what} has eigenvalue {w.min():.3e} below {EIGENVALUE_FLOOR}")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a: FeatureSet, b: FeatureSet, eps_reg: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    eps_reg * I is added to both covariances first, which keeps the square
    root defined when N <= dim makes the fitted covariances singular.
    """
    if a.dim != b.dim:
        raise ValueError(f"feature dims differ: {a.dim} vs {b.dim}")
    if eps_reg < 0:
        raise ValueError("eps_reg must be >= 0")
    eye = np.eye(a.dim)
    cov_a = a.cov + eps_reg * eye
    cov_b = b.cov + eps_reg * eye
    root_a = _psd_sqrt(cov_a, "regularized covariance")
    inner = root_a @ cov_b @ root_a
    inner = (inner + inner.T) / 2.0
    w = np.linalg.eigvalsh(inner)
    if w.min() < EIGENVALUE_FLOOR:
        raise FloatingPointError(f"cross term has eigenvalue {w.min():.3e} below {EIGENVALUE_FLOOR}")
    trace_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    mean_term = float(np.sum((a.mean - b.mean) ** 2))
    value = mean_term + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * trace_sqrt
    if value < -1e-6:
        raise FloatingPointError(f"Fréchet distance came out {value:.3e}; matrix square root unreliable")
    return max(value, 0.0)


@dataclass
class ScoredLabels:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be equal-length 1-D arrays")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        self.labels = self.labels.astype(np.int64)
        if self.labels.min() == self.labels.max():
            raise UndefinedMetricError("AUC needs at least one positive and one negative label")


def auc(data: ScoredLabels) -> float:
    """Probability a positive outscores a negative, ties counted as 1/2.

    Computed from average ranks (Mann-Whitney), which agrees exactly with
    pairwise counting.
    """
    ranks = rankdata(data.scores)
    n_pos = int(data.labels.sum())
    n_neg = data.labels.size - n_pos
    rank_sum = float(ranks[data.labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _to_array(x) -> np.ndarray:
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def outside_mask_error(x0, gen, mask) -> float:
    """Max abs difference over outside-mask cells; 0.0 when no cell is outside."""
    a = _to_array(x0)
    b = _to_array(gen)
    m = _to_array(mask.grid if hasattr(mask, "grid") else mask)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if m.shape != a.shape[-2:]:
        raise ValueError(f"mask shape {m.shape} != image spatial shape {a.shape[-2:]}")
    outside = np.broadcast_to(m == 0, a.shape)
    if not outside.any():
        return 0.0
    return float(np.abs(a - b)[outside].max())


def format_report(metrics: Mapping[str, object]) -> str:
    """Deterministic JSON report (sorted keys, newline-terminated)."""
    return json.dumps(dict(metrics), sort_keys=True) + "\n"


def format_report_csv(metrics: Mapping[str, object]) -> str:
    """Header + one CSV row, keys sorted for stable aggregation."""
    keys = sorted(metrics)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(keys)
    writer.writerow([metrics[k] for k in keys])
    return buf.getvalue()
