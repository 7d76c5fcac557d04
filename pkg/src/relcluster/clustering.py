"""Cluster-friendly representation learning and pseudo-label generation.

A bottleneck autoencoder maps entity-pair vectors to low-dimensional
representations.  The training objective combines a reconstruction term,
which keeps the representation space from collapsing, with a center loss
that pulls labeled representations toward their per-class batch centroids.
Pseudo labels for the unlabeled set come from k-means on the bottleneck
representations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteLossError, ValidationError
from .nn import AdamState, Mlp
from .seeding import child_sequence


@dataclass
class AutoencoderPair:
    """Bottleneck encoder/decoder pair plus the center-loss weight."""

    encoder: Mlp
    decoder: Mlp
    center_weight: float

    def __post_init__(self):
        if self.encoder.in_dim != self.decoder.out_dim:
            raise ValidationError(
                f"encoder input dim {self.encoder.in_dim} != decoder output dim {self.decoder.out_dim}")
        if self.encoder.out_dim != self.decoder.in_dim:
            raise ValidationError(
                f"bottleneck mismatch: encoder out {self.encoder.out_dim}, decoder in {self.decoder.in_dim}")
        if self.center_weight < 0:
            raise ValidationError("center_weight must be non-negative")

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, *, bottleneck: int = 256,
               hidden: tuple[int, ...] = (512, 512), center_weight: float = 0.005) -> "AutoencoderPair":
        encoder = Mlp.create([dim, *hidden, bottleneck], rng)
        decoder = Mlp.create([bottleneck, *reversed(hidden), dim], rng)
        return cls(encoder=encoder, decoder=decoder, center_weight=center_weight)

    @property
    def bottleneck(self) -> int:
        return self.encoder.out_dim

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.decoder.params()

    def transform(self, vectors: np.ndarray) -> np.ndarray:
        """Bottleneck representations (no tape)."""
        reps, _ = self.encoder.forward(vectors)
        return reps


def compute_centroids(reps: np.ndarray, labels, num_classes: int):
    """Arithmetic mean of each class's representations within the batch.

    Returns (centroids, counts); a class absent from the batch has count 0 and
    a zero row, and contributes nothing to the center loss (it has no members).
    """
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValidationError(f"labels outside [0, {num_classes})")
    centroids = np.zeros((num_classes, reps.shape[1]))
    np.add.at(centroids, labels, reps)
    counts = np.bincount(labels, minlength=num_classes)
    present = counts > 0
    centroids[present] /= counts[present, None]
    return centroids, counts


def center_loss(reps: np.ndarray, labels, centroids: np.ndarray, counts=None) -> float:
    """Half the mean squared distance of each representation to its centroid."""
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    if counts is not None and np.any(np.asarray(counts)[labels] == 0):
        raise ValidationError("a batch label has no centroid (class absent)")
    diff = reps - centroids[labels]
    return float(0.5 * np.mean(np.sum(diff * diff, axis=1)))


def clustering_loss(ae: AutoencoderPair, vectors: np.ndarray, labels, *,
                    no_center: bool = False, no_reconstruction: bool = False):
    """Combined objective value: reconstruction + center_weight * center loss.

    Centroids are recomputed from this batch's current representations and
    treated as constants; the reconstruction term is half the mean squared
    error of decode(encode(x)) against x.  Returns (total, reconstruction,
    center) so ablations can be reported separately.
    """
    value, parts, _, _ = clustering_loss_grads(
        ae, vectors, labels, no_center=no_center, no_reconstruction=no_reconstruction)
    return value, parts["reconstruction"], parts["center"]


def clustering_loss_grads(ae: AutoencoderPair, vectors: np.ndarray, labels, *,
                          no_center: bool = False, no_reconstruction: bool = False):
    """Clustering objective with exact gradients for the autoencoder parameters.

    Gradients flow only into the encoder/decoder; the upstream encoding is a
    constant here by design.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ValidationError("need a non-empty 2-D batch")
    n = vectors.shape[0]
    labels = np.asarray(labels)
    num_classes = int(labels.max()) + 1 if labels.size else 0

    reps, enc_tape = ae.encoder.forward(vectors)
    recon, dec_tape = ae.decoder.forward(reps)

    lam = 0.0 if no_center else ae.center_weight
    centroids, counts = compute_centroids(reps, labels, num_classes)
    center = center_loss(reps, labels, centroids, counts)

    if no_reconstruction:
        recon_term = 0.0
        dec_grads = ae.decoder.zero_grads()
        d_reps = np.zeros_like(reps)
    else:
        residual = recon - vectors
        recon_term = float(0.5 * np.mean(np.sum(residual * residual, axis=1)))
        dec_grads, d_reps = ae.decoder.backward(dec_tape, residual / n)

    if lam > 0.0:
        d_reps = d_reps + (lam / n) * (reps - centroids[labels])
    enc_grads, _ = ae.encoder.backward(enc_tape, d_reps)

    total = recon_term + lam * center
    if not np.isfinite(total):
        raise NonFiniteLossError(
            f"clustering loss non-finite (reconstruction={recon_term!r}, center={center!r})")
    parts = {"reconstruction": recon_term, "center": center, "center_weight": lam}
    return total, parts, enc_grads, dec_grads


def pretrain_autoencoder(ae: AutoencoderPair, vectors: np.ndarray, *, epochs: int,
                         batch_size: int, learning_rate: float,
                         rng: np.random.Generator,
                         optimizer: AdamState | None = None) -> list[float]:
    """Minimize the reconstruction term alone for ``epochs`` passes.

    Returns the mean reconstruction loss per epoch; with ``epochs`` 0 the
    parameters are untouched and the list is empty.
    """
    if epochs < 0:
        raise ValidationError("epochs must be non-negative")
    vectors = np.asarray(vectors, dtype=np.float64)
    if optimizer is None:
        optimizer = AdamState(ae.params(), learning_rate)
    history: list[float] = []
    n = vectors.shape[0]
    dummy_labels = np.zeros(1, dtype=np.int64)
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            batch = vectors[order[start:start + batch_size]]
            value, parts, enc_grads, dec_grads = clustering_loss_grads(
                ae, batch, dummy_labels.repeat(batch.shape[0]), no_center=True)
            optimizer.step(ae.params(), enc_grads + dec_grads)
            losses.append(parts["reconstruction"])
        history.append(float(np.mean(losses)))
    return history


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class ClusterAssignment:
    """k-means result: one pseudo label per point plus centroids and inertia."""

    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int = 0
    restart: int = 0
    inertia_history: list[float] = field(default_factory=list)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (np.sum(points ** 2, axis=1)[:, None]
         - 2.0 * points @ centroids.T
         + np.sum(centroids ** 2, axis=1)[None, :])
    return np.maximum(d, 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; falls back to the first unused point when all
    remaining distances are zero (duplicate-heavy inputs)."""
    n = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(0, n)
    closest = _sq_distances(points, points[chosen[:1]])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            unused = np.setdiff1d(np.arange(n), chosen[:i])
            chosen[i] = unused[0]
        else:
            r = rng.random() * total
            chosen[i] = min(np.searchsorted(np.cumsum(closest), r, side="right"), n - 1)
        closest = np.minimum(closest, _sq_distances(points, points[chosen[i:i + 1]])[:, 0])
    return points[chosen].copy()


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int, tol: float):
    centroids = _kmeans_pp_init(points, k, rng)
    labels = np.zeros(points.shape[0], dtype=np.int64)
    inertia = np.inf
    history: list[float] = []
    iteration = 0
    for iteration in range(1, max_iter + 1):
        dists = _sq_distances(points, centroids)
        labels = np.argmin(dists, axis=1)
        new_inertia = float(dists[np.arange(points.shape[0]), labels].sum())
        # Lloyd's objective cannot increase; allow only rounding headroom.
        if new_inertia > inertia * (1.0 + 1e-10) + 1e-12:
            raise RuntimeError(
                f"k-means inertia increased: {inertia!r} -> {new_inertia!r}")
        inertia = new_inertia
        history.append(inertia)

        new_centroids = np.zeros_like(centroids)
        np.add.at(new_centroids, labels, points)
        counts = np.bincount(labels, minlength=k)
        nonempty = counts > 0
        new_centroids[nonempty] /= counts[nonempty, None]

        if not np.all(nonempty):
            point_dists = dists[np.arange(points.shape[0]), labels].copy()
            for j in np.flatnonzero(~nonempty):
                far = int(np.argmax(point_dists))
                new_centroids[j] = points[far]
                point_dists[far] = -1.0  # each reinit takes a distinct point

        shift = float(np.sqrt(np.sum((new_centroids - centroids) ** 2, axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break
    # Final assignment against the converged centroids.
    dists = _sq_distances(points, centroids)
    labels = np.argmin(dists, axis=1)
    final_inertia = float(dists[np.arange(points.shape[0]), labels].sum())
    if final_inertia > inertia * (1.0 + 1e-10) + 1e-12:
        raise RuntimeError(f"k-means inertia increased: {inertia!r} -> {final_inertia!r}")
    history.append(final_inertia)
    return labels, centroids, final_inertia, iteration, history


def kmeans(points: np.ndarray, k: int, seed: int, *, n_restarts: int = 10,
           max_iter: int = 300, tol: float = 1e-6, order_keys=None) -> ClusterAssignment:
    """Lloyd's algorithm with D^2 seeding, restarted ``n_restarts`` times.

    The restart with the lowest inertia wins (ties broken by restart index).
    When ``order_keys`` is given, seeding and iteration run over the points
    sorted by those keys, which makes the result independent of the caller's
    input order (labels are still returned in input order).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError("points must be 2-D")
    n = points.shape[0]
    if k < 1:
        raise ValidationError("k must be at least 1")
    if n < k:
        raise ValidationError(f"cannot form {k} clusters from {n} points")

    if order_keys is not None:
        keys = np.asarray(order_keys)
        if keys.shape[0] != n:
            raise ValidationError("order_keys length must match points")
        order = np.argsort(keys, kind="stable")
    else:
        order = np.arange(n)
    canonical = points[order]

    streams = child_sequence(seed, "kmeans").spawn(n_restarts)
    best = None
    for restart, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        labels, centroids, inertia, iters, history = _lloyd(canonical, k, rng, max_iter, tol)
        if best is None or inertia < best[2]:
            best = (labels, centroids, inertia, iters, restart, history)
    labels_sorted, centroids, inertia, iters, restart, history = best
    labels = np.empty(n, dtype=np.int64)
    labels[order] = labels_sorted
    return ClusterAssignment(labels=labels, centroids=centroids, inertia=inertia,
                             iterations=iters, restart=restart, inertia_history=history)
