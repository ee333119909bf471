"""Gradient-based explanation of detections: per-feature input gradients of
the variational objective, attack fingerprints, fingerprint-distance matching,
and k-means clustering of gradients.

Gradients are taken on the deterministic path (latent noise fixed at 0) so
explanations and fingerprints are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .features import WindowKey, feature_list_hash
from .models import KindMismatch, VaeModel, vae_objective
from .nn import LATENT_WIDTH_ERR if False else None  # placeholder, removed below


class EmptyInput(ValueError):
    pass


class AllZeroGradients(ValueError):
    pass


class ZeroGradient(ValueError):
    pass


class TooFewPoints(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass
class GradientExplanation:
    """Per-feature gradient of the objective at one data point."""

    key: Optional[WindowKey]
    grad: np.ndarray
    loss_at_point: float


@dataclass
class Fingerprint:
    """Unit-norm average of normalized gradients for one attack class."""

    attack_class: str
    mean_normalized_grad: np.ndarray
    support_count: int
    stderr: np.ndarray
    skipped_zero_grads: int = 0
    feature_names: tuple = ()


@dataclass
class Clustering:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    seed: int
    inertia_history: list
    n_iter: int


def input_gradients(model: VaeModel, X: np.ndarray,
                    keys: Optional[Sequence[WindowKey]] = None) -> list:
    """Gradient of the deterministic objective w.r.t. each input row.

    Parameters are held fixed; only the input leaf's gradient is consumed.
    """
    if not isinstance(model, VaeModel):
        raise KindMismatch(f"input gradients require a VAE model, got {model.kind!r}")
    X2 = np.atleast_2d(np.asarray(X, dtype=model.params()[0].dtype))
    noise = np.zeros((X2.shape[0], model.head.mu_layer.out_width), dtype=X2.dtype)
    model.zero_grad()
    x_leaf, loss, per_row, tape = vae_objective(model, X2, noise)
    tape.backward(loss)
    model.zero_grad()
    grads = x_leaf.grad
    out = []
    for i in range(X2.shape[0]):
        key = keys[i] if keys is not None else None
        out.append(GradientExplanation(key, grads[i].copy(), float(per_row[i])))
    return out


def input_gradient(model: VaeModel, x: np.ndarray,
                   key: Optional[WindowKey] = None) -> GradientExplanation:
    expl = input_gradients(model, np.atleast_2d(x), [key])[0]
    return expl


def _normalize_rows(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(mat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return mat / safe[:, None], norms


def build_fingerprint(explanations: Sequence[GradientExplanation],
                      attack_class: str,
                      feature_names: Sequence[str] = ()) -> Fingerprint:
    """Average the unit-normalized gradients and renormalize to unit length.

    Zero-norm gradients carry no direction; they are skipped and counted.
    The per-feature standard error of the normalized gradients is kept so a
    fingerprint's significant features can be judged against noise.
    """
    if not explanations:
        raise EmptyInput(f"no explanations for class {attack_class!r}")
    mat = np.asarray([e.grad for e in explanations], dtype=np.float64)
    unit, norms = _normalize_rows(mat)
    keep = norms > 0
    skipped = int((~keep).sum())
    unit = unit[keep]
    if unit.shape[0] == 0:
        raise AllZeroGradients(f"all gradients for class {attack_class!r} are zero")
    mean = unit.mean(axis=0)
    mean_norm = np.linalg.norm(mean)
    if mean_norm == 0:
        raise AllZeroGradients(
            f"normalized gradients for class {attack_class!r} cancel exactly")
    n = unit.shape[0]
    stderr = unit.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(mat.shape[1])
    return Fingerprint(attack_class, mean / mean_norm, n, stderr, skipped,
                       tuple(feature_names))


def fingerprint_distance(fp: Fingerprint, expl: GradientExplanation,
                         mode: str = "l2n") -> float:
    """Distance between a fingerprint and one gradient; smaller = more attack-like."""
    grad = np.asarray(expl.grad, dtype=np.float64)
    if grad.shape != fp.mean_normalized_grad.shape:
        raise LengthMismatch("gradient and fingerprint widths differ")
    if mode == "l2":
        return float(np.linalg.norm(fp.mean_normalized_grad - grad))
    if mode == "l2n":
        norm = np.linalg.norm(grad)
        if norm == 0:
            raise ZeroGradient("cannot normalize a zero gradient")
        return float(np.linalg.norm(fp.mean_normalized_grad - grad / norm))
    raise ValueError(f"unknown distance mode {mode!r}")


def fingerprint_distances(fp: Fingerprint, grads: np.ndarray,
                          mode: str = "l2n") -> np.ndarray:
    """Vectorized distances for a matrix of gradients; zero rows yield NaN in l2n."""
    mat = np.asarray(grads, dtype=np.float64)
    if mode == "l2":
        return np.linalg.norm(mat - fp.mean_normalized_grad, axis=1)
    if mode == "l2n":
        unit, norms = _normalize_rows(mat)
        out = np.linalg.norm(unit - fp.mean_normalized_grad, axis=1)
        out[norms == 0] = np.nan
        return out
    raise ValueError(f"unknown distance mode {mode!r}")


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> Clustering:
    """Lloyd's algorithm with seeded initialization (k points drawn without
    replacement). Empty clusters are reseeded from the farthest point; the
    recorded inertia never increases across iterations."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-D matrix")
    n = pts.shape[0]
    if n < k:
        raise TooFewPoints(f"{n} points cannot form {k} clusters")
    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = pts[rng.choice(n, size=k, replace=False)].copy()
    sq_pts = (pts ** 2).sum(axis=1)
    assignments = np.full(n, -1, dtype=np.int64)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = (sq_pts[:, None] - 2.0 * (pts @ centroids.T)
              + (centroids ** 2).sum(axis=1)[None, :])
        new_assign = np.argmin(d2, axis=1)
        history.append(float(np.take_along_axis(
            d2, new_assign[:, None], axis=1).sum()))
        if np.array_equal(new_assign, assignments):
            assignments = new_assign
            break
        assignments = new_assign
        mindist = np.take_along_axis(d2, assignments[:, None], axis=1)[:, 0]
        for c in range(k):
            members = pts[assignments == c]
            if members.shape[0] == 0:
                far = int(np.argmax(mindist))
                centroids[c] = pts[far]
                mindist[far] = 0.0
            else:
                centroids[c] = members.mean(axis=0)
    diff = pts - centroids[assignments]
    inertia = float((diff * diff).sum())
    return Clustering(k, centroids, assignments, inertia, seed, history, n_iter)


def cluster_report(clustering: Clustering, labels: Sequence[str]) -> dict:
    """Per-label distribution over clusters: {label: [(cluster, share), ...]}.

    Shares are sorted descending and cover 100% of each label's points.
    """
    if len(labels) != clustering.assignments.shape[0]:
        raise LengthMismatch(
            f"{len(labels)} labels for {clustering.assignments.shape[0]} points")
    report: dict = {}
    for label in sorted(set(labels)):
        idx = [i for i, l in enumerate(labels) if l == label]
        counts: dict = {}
        for i in idx:
            c = int(clustering.assignments[i])
            counts[c] = counts.get(c, 0) + 1
        total = len(idx)
        entries = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        report[label] = [(c, cnt / total) for c, cnt in entries]
    return report


# --- Fingerprint text format --------------------------------------------------

FINGERPRINT_HEADER = "flowsleuth-fingerprint v1"


def write_fingerprint(fp: Fingerprint, path: str, config: Optional[dict] = None) -> None:
    """Versioned, diffable text file: header fields then name/value/stderr rows."""
    import json as _json
    lines = [
        FINGERPRINT_HEADER,
        f"attack_class: {fp.attack_class}",
        f"support_count: {fp.support_count}",
        f"skipped_zero_grads: {fp.skipped_zero_grads}",
        f"feature_list_hash: {feature_list_hash(fp.feature_names)}",
        "config: " + _json.dumps(config or {}, sort_keys=True, separators=(",", ":")),
        f"features: {fp.mean_normalized_grad.shape[0]}",
    ]
    names = fp.feature_names or tuple(
        f"f{i}" for i in range(fp.mean_normalized_grad.shape[0]))
    for name, v, se in zip(names, fp.mean_normalized_grad, fp.stderr):
        lines.append(f"{name} {float(v)!r} {float(se)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_fingerprint(path: str) -> Fingerprint:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != FINGERPRINT_HEADER:
        raise ValueError(f"{path}: not a fingerprint file")
    fields = {}
    i = 1
    while i < len(lines) and ": " in lines[i]:
        k, v = lines[i].split(": ", 1)
        fields[k] = v
        i += 1
    n = int(fields["features"])
    rows = [l.split() for l in lines[i:i + n]]
    if len(rows) != n:
        raise ValueError(f"{path}: expected {n} feature rows, found {len(rows)}")
    names = tuple(r[0] for r in rows)
    values = np.asarray([float(r[1]) for r in rows])
    stderr = np.asarray([float(r[2]) for r in rows])
    stored_hash = fields.get("feature_list_hash", "")
    if stored_hash and feature_list_hash(names) != stored_hash:
        raise ValueError(f"{path}: feature names do not match the stored hash")
    return Fingerprint(fields["attack_class"], values, int(fields["support_count"]),
                       stderr, int(fields.get("skipped_zero_grads", 0)), names)
