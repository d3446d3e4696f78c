"""Evaluation metrics: keypoint errors, accuracy, and clustering quality."""

from __future__ import annotations

import numpy as np

__all__ = [
    "mpjpe",
    "procrustes_align",
    "keypoint_metrics",
    "accuracy",
    "silhouette_score",
    "calinski_harabasz_score",
    "classification_metrics",
]


def _as_joints(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected (J, 3) or (B, J, 3) keypoints, got {arr.shape}")
    return arr


def mpjpe(pred, gt) -> float:
    """Mean Euclidean distance between predicted and true joints."""
    pred, gt = _as_joints(pred), _as_joints(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"keypoint shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.sqrt(((pred - gt) ** 2).sum(axis=-1)).mean())


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Optimal similarity (rotation + uniform scale + translation) alignment.

    Aligns one (J, 3) prediction to its ground truth. The orthogonal factor
    comes from the SVD of the cross-covariance with a determinant sign fix so
    reflections are disallowed; the scale is the corrected singular-value sum
    over the prediction's centered sum of squares.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"procrustes_align expects matching (J, 3) arrays, got {pred.shape} and {gt.shape}")
    if pred.shape[0] < 3:
        raise ValueError("procrustes alignment needs at least 3 joints")
    mu_pred = pred.mean(axis=0)
    mu_gt = gt.mean(axis=0)
    p0 = pred - mu_pred
    g0 = gt - mu_gt
    denom = (p0**2).sum()
    if denom == 0.0:
        raise ValueError("alignment degenerate: all predicted joints are identical")
    cov = p0.T @ g0
    u, s, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u @ vt))
    d = np.ones(3)
    d[-1] = sign
    rot = u @ np.diag(d) @ vt
    scale = (s * d).sum() / denom
    return scale * (p0 @ rot) + mu_gt


def keypoint_metrics(pred, gt) -> tuple[float, float]:
    """(MPJPE, PA-MPJPE) over a sample or batch of keypoint sets."""
    pred, gt = _as_joints(pred), _as_joints(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"keypoint shapes differ: {pred.shape} vs {gt.shape}")
    raw = mpjpe(pred, gt)
    aligned = np.stack([procrustes_align(p, g) for p, g in zip(pred, gt)])
    return raw, mpjpe(aligned, gt)


def accuracy(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} incompatible with labels {labels.shape}")
    return float((logits.argmax(axis=1) == labels).mean())


def _pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def silhouette_score(points, labels) -> float:
    """Mean silhouette over samples; singleton clusters contribute 0."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("silhouette requires at least 2 distinct labels")
    dists = _pairwise_distances(points)
    scores = np.zeros(len(points))
    for i in range(len(points)):
        same = labels == labels[i]
        same[i] = False
        if not same.any():
            continue  # singleton convention: contribution 0
        a = dists[i][same].mean()
        b = min(dists[i][labels == c].mean() for c in classes if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def calinski_harabasz_score(points, labels) -> float:
    """Between/within dispersion ratio; higher means tighter clusters."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    n, k = len(points), len(classes)
    if k < 2:
        raise ValueError("calinski-harabasz requires at least 2 distinct labels")
    if n <= k:
        raise ValueError(f"calinski-harabasz requires more samples ({n}) than clusters ({k})")
    global_mean = points.mean(axis=0)
    between = 0.0
    within = 0.0
    for c in classes:
        cluster = points[labels == c]
        centroid = cluster.mean(axis=0)
        between += len(cluster) * ((centroid - global_mean) ** 2).sum()
        within += ((cluster - centroid) ** 2).sum()
    if within == 0.0:
        return float("inf")
    return float((between / (k - 1)) / (within / (n - k)))


def classification_metrics(logits, labels, embeddings) -> tuple[float, float, float]:
    """(accuracy, silhouette, calinski-harabasz) for one evaluation pass.

    Clustering quality is measured on per-sample embeddings grouped by the
    true labels.
    """
    return (
        accuracy(logits, labels),
        silhouette_score(embeddings, labels),
        calinski_harabasz_score(embeddings, labels),
    )
