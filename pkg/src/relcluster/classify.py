"""Relation classifiers and their losses.

Two classifiers share the entity-pair vector space: one for the pre-defined
relations (trained with cross-entropy, or with an extended label space in
incremental mode) and one for the novel relations (trained with a pairwise
contrastive loss over pseudo-label constraints, since cluster ids are not
stable across clustering runs).

The pairwise loss compares output distributions with KL divergence in which
the first argument is treated as a constant: gradients flow only into the
second argument.  Both orderings of a pair are summed, so the loss is
symmetric and both instances receive gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .nn import Mlp

# Probabilities are clamped to this floor before any logarithm.
PROB_FLOOR = 1e-12

# Incremented whenever a pairwise loss sees an empty pair set.
EMPTY_PAIR_BATCHES = 0


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the gradient w.r.t. softmax outputs."""
    inner = np.sum(dprobs * probs, axis=-1, keepdims=True)
    return probs * (dprobs - inner)


@dataclass
class RelationClassifier:
    """Probability head over entity-pair vectors."""

    mlp: Mlp
    num_classes: int

    def __post_init__(self):
        if self.mlp.out_dim != self.num_classes:
            raise ValidationError(
                f"classifier body outputs {self.mlp.out_dim} logits for {self.num_classes} classes")

    @classmethod
    def create(cls, in_dim: int, num_classes: int, rng: np.random.Generator,
               hidden: tuple[int, ...] = (), init_scale: float = 0.05) -> "RelationClassifier":
        # Default body is a single linear layer: the representation, not the
        # head, is what the method is supposed to improve.  Head weights start
        # near zero (scaled-down uniform init) so the output distributions
        # begin close to uniform: a full-scale init produces confident wrong
        # logits that eat most of the step budget before any structure forms.
        # Exactly zero would be a fixed point of the pairwise loss, so a small
        # random component stays in to break symmetry.
        mlp = Mlp.create([in_dim, *hidden, num_classes], rng)
        for w in mlp.weights:
            w *= init_scale
        return cls(mlp=mlp, num_classes=num_classes)

    def params(self) -> list[np.ndarray]:
        return self.mlp.params()


def classify(classifier: RelationClassifier, vectors: np.ndarray) -> np.ndarray:
    """Softmax distribution(s) over classes for one vector or a batch."""
    logits, _ = classifier.mlp.forward(vectors)
    return softmax(logits)


def predict(classifier: RelationClassifier, vectors: np.ndarray) -> np.ndarray:
    """Most probable class id(s); ties break toward the lowest index."""
    probs = classify(classifier, vectors)
    return np.argmax(probs, axis=-1)


def kl_divergence(p, q) -> float:
    """KL(P||Q) with natural log; both distributions clamped to PROB_FLOOR."""
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    q = np.maximum(np.asarray(q, dtype=np.float64), PROB_FLOOR)
    if p.shape != q.shape:
        raise ValidationError(f"distribution length mismatch: {p.shape} vs {q.shape}")
    return float(np.sum(p * (np.log(p) - np.log(q))))


def kl_divergence_grads(p, q):
    """Gradients of KL(P*||Q): the starred side is a constant by definition.

    Returns (dP, dQ) where dP is exactly zero; dQ is -p/q with the clamp
    zeroing the gradient of any coordinate it flattened.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pc = np.maximum(p, PROB_FLOOR)
    qc = np.maximum(q, PROB_FLOOR)
    dq = np.where(q > PROB_FLOOR, -pc / qc, 0.0)
    return np.zeros_like(p), dq


def pair_loss_same(p, q) -> float:
    """Cost for a same-cluster pair: both one-sided constant-target KLs."""
    return kl_divergence(p, q) + kl_divergence(q, p)


def hinge(value: float, margin: float) -> float:
    return max(0.0, margin - value)


def pair_loss_diff(p, q, margin: float) -> float:
    """Cost for a different-cluster pair: hinge on each one-sided KL.

    Zero exactly when both directions already exceed the margin.
    """
    if margin <= 0:
        raise ValidationError("hinge margin must be positive")
    return hinge(kl_divergence(p, q), margin) + hinge(kl_divergence(q, p), margin)


@dataclass
class PairBatch:
    """Unordered index pairs (i < j) with same-cluster indicators."""

    pairs: np.ndarray  # (P, 2) int
    same: np.ndarray   # (P,) 0/1

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.same = np.asarray(self.same, dtype=np.int64).reshape(-1)
        if self.pairs.shape[0] != self.same.shape[0]:
            raise ValidationError("pairs and indicators disagree in length")
        if self.pairs.size and np.any(self.pairs[:, 0] >= self.pairs[:, 1]):
            raise ValidationError("pairs must satisfy i < j")

    def __len__(self) -> int:
        return self.pairs.shape[0]


def build_pairs(pseudo_labels, cap: int | None = None,
                rng: np.random.Generator | None = None) -> PairBatch:
    """All unordered pairs within a minibatch, q=1 iff pseudo labels match.

    ``cap`` subsamples pairs without replacement (seeded); the kept pairs are
    re-sorted so downstream summation order stays deterministic.
    """
    labels = np.asarray(pseudo_labels)
    n = labels.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    pairs = np.stack([iu, ju], axis=1)
    if cap is not None and pairs.shape[0] > cap:
        if rng is None:
            raise ValidationError("pair cap requires a generator for seeded sampling")
        keep = np.sort(rng.choice(pairs.shape[0], size=cap, replace=False))
        pairs = pairs[keep]
    same = (labels[pairs[:, 0]] == labels[pairs[:, 1]]).astype(np.int64)
    return PairBatch(pairs=pairs, same=same)


def pairwise_kl_matrix(probs: np.ndarray) -> np.ndarray:
    """K[i, j] = KL(row_i || row_j) for all ordered pairs, with the clamp."""
    pc = np.maximum(probs, PROB_FLOOR)
    logp = np.log(pc)
    row_self = np.sum(pc * logp, axis=1)
    return row_self[:, None] - pc @ logp.T


def bce_loss(classifier: RelationClassifier, vectors: np.ndarray,
             pair_batch: PairBatch, margin: float):
    """Mean contrastive pair loss over a minibatch, with logit gradients.

    Same-cluster pairs pay the symmetric KL; different-cluster pairs pay a
    hinge that is satisfied once both one-sided KLs reach ``margin``.
    Returns (value, dlogits); an empty pair set costs 0 and bumps the
    module's EMPTY_PAIR_BATCHES counter.
    """
    global EMPTY_PAIR_BATCHES
    logits, tape = classifier.mlp.forward(vectors)
    probs = softmax(logits)
    if len(pair_batch) == 0:
        EMPTY_PAIR_BATCHES += 1
        return 0.0, np.zeros_like(probs), tape

    kl = pairwise_kl_matrix(probs)
    a = pair_batch.pairs[:, 0]
    b = pair_batch.pairs[:, 1]
    same = pair_batch.same.astype(np.float64)
    forward_kl = kl[a, b]   # starred a, live b
    backward_kl = kl[b, a]  # starred b, live a

    per_pair = (same * (forward_kl + backward_kl)
                + (1.0 - same) * (np.maximum(0.0, margin - forward_kl)
                                  + np.maximum(0.0, margin - backward_kl)))
    n_pairs = float(len(pair_batch))
    value = float(per_pair.sum() / n_pairs)

    # Ordered weight on dK[i, j]: +1 for same pairs, -1 for different pairs
    # whose hinge is still active, all scaled by the mean.
    weights = np.zeros_like(kl)
    w_fwd = np.where(same == 1.0, 1.0, -(forward_kl < margin).astype(np.float64)) / n_pairs
    w_bwd = np.where(same == 1.0, 1.0, -(backward_kl < margin).astype(np.float64)) / n_pairs
    np.add.at(weights, (a, b), w_fwd)
    np.add.at(weights, (b, a), w_bwd)

    pc = np.maximum(probs, PROB_FLOOR)
    dprobs = np.where(probs > PROB_FLOOR, -(weights.T @ pc) / pc, 0.0)
    dlogits = softmax_backward(probs, dprobs)
    return value, dlogits, tape


def cross_entropy(classifier: RelationClassifier, vectors: np.ndarray, labels):
    """Mean negative log-probability of the gold class, with logit gradients."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= classifier.num_classes:
        raise ValidationError(
            f"label outside [0, {classifier.num_classes})")
    logits, tape = classifier.mlp.forward(vectors)
    probs = softmax(logits)
    n = probs.shape[0]
    rows = np.arange(n)
    gold = probs[rows, labels]
    value = float(-np.mean(np.log(np.maximum(gold, PROB_FLOOR))))
    dprobs = np.zeros_like(probs)
    dprobs[rows, labels] = np.where(gold > PROB_FLOOR, -1.0 / (n * np.maximum(gold, PROB_FLOOR)), 0.0)
    dlogits = softmax_backward(probs, dprobs)
    return value, dlogits, tape


def ramp_up(epoch: float, max_weight: float, length: int) -> float:
    """Schedule exp(-5 (1 - t/T)^2) * max, clamped at max once t reaches T."""
    if epoch < 0:
        raise ValidationError("epoch must be non-negative")
    if max_weight <= 0 or length < 1:
        raise ValidationError("ramp needs positive max weight and length >= 1")
    if epoch >= length:
        return float(max_weight)
    frac = 1.0 - epoch / length
    return float(max_weight * math.exp(-5.0 * frac * frac))


def incremental_ce(classifier: RelationClassifier, labeled_vectors: np.ndarray,
                   labels, unlabeled_vectors: np.ndarray | None, pseudo_labels,
                   epoch: float, max_weight: float, length: int):
    """Cross-entropy over the extended label space plus ramped pseudo-label CE.

    The pseudo labels are targets only (no gradient through their source);
    with no unlabeled batch this reduces to the labeled cross-entropy.
    Returns (value, dlogits_labeled, tape_labeled, dlogits_unlabeled, tape_unlabeled, weight).
    """
    ce_l, dlogits_l, tape_l = cross_entropy(classifier, labeled_vectors, labels)
    weight = ramp_up(epoch, max_weight, length)
    if unlabeled_vectors is None or len(unlabeled_vectors) == 0:
        return ce_l, dlogits_l, tape_l, None, None, weight
    ce_u, dlogits_u, tape_u = cross_entropy(classifier, unlabeled_vectors, pseudo_labels)
    value = ce_l + weight * ce_u
    return value, dlogits_l, tape_l, weight * dlogits_u, tape_u, weight


def cls_loss(eta_l: RelationClassifier, labeled_vectors: np.ndarray, labels,
             eta_u: RelationClassifier, unlabeled_vectors: np.ndarray,
             pair_batch: PairBatch, margin: float, *, no_ce: bool = False):
    """Joint classification objective: cross-entropy plus the pairwise loss.

    Returns (total, ce, bce) along with the per-classifier logit gradients
    and tapes needed to push gradient into the entity-pair encoder.
    """
    if no_ce:
        ce, dlogits_l, tape_l = 0.0, None, None
    else:
        ce, dlogits_l, tape_l = cross_entropy(eta_l, labeled_vectors, labels)
    bce, dlogits_u, tape_u = bce_loss(eta_u, unlabeled_vectors, pair_batch, margin)
    return ce + bce, ce, bce, (dlogits_l, tape_l), (dlogits_u, tape_u)
