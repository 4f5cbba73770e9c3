"""Embedding-space diagnostics: 2D projection and compactness comparison."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.spatial.distance


class AnalysisError(Exception):
    pass


@dataclass(frozen=True)
class ProjectionResult:
    coords: np.ndarray        # n x 2
    method: str               # "pca" | "tsne"
    labels: tuple = ()        # per-point (source, age_group) or anything hashable
    kl_trace: tuple = ()      # t-SNE objective at recorded iterations


def _pca_2d(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    if len(s) < 2 or s[1] < 1e-12 * max(s[0], 1.0):
        if s[0] < 1e-12:
            raise AnalysisError("degenerate rank-0 data")
    comps = vt[:2]
    # fix sign: largest-magnitude loading positive
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


def _tsne_p_matrix(x: np.ndarray, perplexity: float) -> np.ndarray:
    d2 = scipy.spatial.distance.squareform(
        scipy.spatial.distance.pdist(x, "sqeuclidean"))
    n = len(x)
    p = np.zeros((n, n))
    target = np.log(perplexity)
    for i in range(n):
        lo, hi = 0.0, np.inf
        beta = 1.0
        di = np.delete(d2[i], i)
        for _ in range(64):
            w = np.exp(-(di - di.min()) * beta)
            sw = w.sum()
            h = np.log(sw) + beta * (((di - di.min()) * w).sum() / sw)
            if abs(h - target) < 1e-7:
                break
            if h > target:  # entropy too high -> sharpen
                lo = beta
                beta = beta * 2 if np.isinf(hi) else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        w = np.exp(-(di - di.min()) * beta)
        row = np.insert(w / w.sum(), i, 0.0)
        p[i] = row
    p = (p + p.T) / (2 * n)
    return np.maximum(p, 1e-12)


def _tsne_2d(x: np.ndarray, seed: int, perplexity: float, n_iter: int = 1000,
             record_every: int = 100):
    """Exact O(n^2) t-SNE with momentum gradient descent and early
    exaggeration; returns (coords, kl_trace)."""
    n = len(x)
    p = _tsne_p_matrix(x, perplexity)
    rng = np.random.default_rng(seed)
    y = 1e-4 * rng.standard_normal((n, 2))
    update = np.zeros_like(y)
    lr = 200.0
    trace = []
    for it in range(n_iter):
        exaggeration = 12.0 if it < 250 else 1.0
        momentum = 0.5 if it < 250 else 0.8
        d2 = scipy.spatial.distance.squareform(
            scipy.spatial.distance.pdist(y, "sqeuclidean"))
        w = 1.0 / (1.0 + d2)
        np.fill_diagonal(w, 0.0)
        q = np.maximum(w / w.sum(), 1e-12)
        m = (exaggeration * p - q) * w
        # dKL/dy_i = 4 sum_j m_ij (y_i - y_j)
        grad = 4.0 * y * m.sum(axis=1, keepdims=True) - 4.0 * m @ y
        update = momentum * update - lr * grad
        y = y + update
        y = y - y.mean(axis=0)
        if (it + 1) % record_every == 0 or it == n_iter - 1:
            kl = float((p * np.log(p / q)).sum())
            trace.append(kl)
    return y, trace


def project_2d(embeddings: np.ndarray, method: str = "pca", seed: int = 0,
               perplexity: float = 30.0, labels=(),
               n_iter: int = 1000) -> ProjectionResult:
    x = np.asarray(embeddings, dtype=np.float64)
    if len(x) < 5:
        raise AnalysisError("need at least 5 points")
    if method == "pca":
        coords = _pca_2d(x)
        trace = ()
    elif method == "tsne":
        if perplexity >= (len(x) - 1) / 3:
            raise AnalysisError("perplexity too large for this point count")
        coords, trace = _tsne_2d(x, seed, perplexity, n_iter=n_iter)
        trace = tuple(trace)
    else:
        raise AnalysisError(f"unknown projection method {method!r}")
    return ProjectionResult(coords, method, tuple(labels), trace)


def mean_pairwise_distance(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise AnalysisError("need at least 2 points")
    return float(scipy.spatial.distance.pdist(points).mean())


def compactness_report(embeddings_original: np.ndarray,
                       embeddings_generated: np.ndarray) -> dict:
    """Mean pairwise distance per set and their generated/original ratio."""
    orig = np.asarray(embeddings_original)
    gen = np.asarray(embeddings_generated)
    if orig.ndim != 2 or gen.ndim != 2 or orig.shape[1] != gen.shape[1]:
        raise AnalysisError("embedding sets must share dimensionality")
    mean_orig = mean_pairwise_distance(orig)
    mean_gen = mean_pairwise_distance(gen)
    return {"mean_pairwise_orig": mean_orig, "mean_pairwise_gen": mean_gen,
            "ratio": mean_gen / mean_orig}


def write_projection_csv(result: ProjectionResult, ids: list[str],
                         path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "x", "y", "source", "age_group"])
        for i, cid in enumerate(ids):
            label = result.labels[i] if i < len(result.labels) else ("", "")
            writer.writerow([cid, f"{result.coords[i, 0]:.6g}",
                             f"{result.coords[i, 1]:.6g}", label[0], label[1]])
