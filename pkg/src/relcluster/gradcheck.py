"""Finite-difference verification harness for every training loss.

Each check builds a small random configuration (instances, adapter, nets),
evaluates the implementation's analytic gradients, and compares them against
central differences of the same objective.  Losses whose pairwise terms treat
one side as a constant are checked against a surrogate with those target
distributions frozen at the evaluation point, which is exactly the
detached-gradient semantics the training step uses.
"""

from __future__ import annotations

import numpy as np

from . import classify as cls
from .clustering import AutoencoderPair, clustering_loss_grads
from .data import LinearAdapter, RelationInstance, encode_backward, encode_batch
from .nn import finite_diff_check
from .seeding import stream

LOSS_NAMES = ("clustering", "cross_entropy", "bce", "cls", "incremental_ce")


def _random_instances(rng: np.random.Generator, n: int, k: int, num_classes: int):
    instances = []
    for i in range(n):
        n_tokens = int(rng.integers(3, 7))
        s_h = int(rng.integers(0, n_tokens - 1))
        e_h = int(rng.integers(s_h + 1, n_tokens + 1))
        s_t = int(rng.integers(0, n_tokens - 1))
        e_t = int(rng.integers(s_t + 1, n_tokens + 1))
        instances.append(RelationInstance(
            id=f"gc-{i}",
            tokens=tuple(f"t{j}" for j in range(n_tokens)),
            token_vecs=rng.standard_normal((n_tokens, k)).astype(np.float32),
            head=(s_h, e_h),
            tail=(s_t, e_t),
            label=int(i % num_classes),
        ))
    labels = np.asarray([inst.label for inst in instances], dtype=np.int64)
    return instances, labels


def _roughen(net, rng: np.random.Generator, scale: float = 0.3) -> None:
    """Move a net to a generic parameter point before checking gradients.

    Freshly initialized nets are degenerate in two ways: biases are all zero,
    so a batch row that turns off every unit of a small hidden layer lands
    downstream preactivations exactly on the relu kink (where the subgradient
    convention and a central difference legitimately disagree), and classifier
    heads start near zero, so every instance gets an almost identical output
    distribution and whole gradient directions vanish structurally.  The
    checks need a generic, differentiable point with distinct distributions.
    """
    for i, b in enumerate(net.biases):
        net.biases[i] = b + scale * rng.standard_normal(b.shape)
    for i, w in enumerate(net.weights):
        net.weights[i] = w + scale * rng.standard_normal(w.shape)


def _mixed_pseudo_labels(rng: np.random.Generator, n: int, num_classes: int) -> np.ndarray:
    """Pseudo labels covering at least two clusters.

    A single-cluster draw would leave only same-pair terms, whose gradients
    all vanish at the evaluation point (every KL sits at its minimum), and
    the relative-error formula turns that rounding noise into a false alarm.
    Callers always have num_classes >= 2 and n > num_classes.
    """
    return rng.permutation(np.arange(n) % num_classes)


def check_clustering_loss(seed: int) -> float:
    """Gradient fidelity of the reconstruction+center objective w.r.t. the autoencoder."""
    rng = stream(seed, "gradcheck", "clustering")
    d = int(rng.integers(3, 7))
    m = int(rng.integers(2, 4))
    hidden = (int(rng.integers(3, 6)),)
    ae = AutoencoderPair.create(d, rng, bottleneck=m, hidden=hidden,
                                center_weight=float(rng.uniform(0.1, 1.0)))
    _roughen(ae.encoder, rng)
    _roughen(ae.decoder, rng)
    n = int(rng.integers(4, 8))
    batch = rng.standard_normal((n, d))
    labels = rng.integers(0, 2, size=n)
    params = ae.params()

    def loss_fn(_):
        value, _, enc_grads, dec_grads = clustering_loss_grads(ae, batch, labels)
        return value, enc_grads + dec_grads

    return finite_diff_check(loss_fn, params)


def _encoder_setup(rng: np.random.Generator, num_classes: int):
    k = int(rng.integers(2, 5))
    n = int(rng.integers(4, 7))
    instances, labels = _random_instances(rng, n, k, num_classes)
    adapter = LinearAdapter.create(k, rng, noise=0.3)
    return k, instances, labels, adapter


def check_cross_entropy(seed: int) -> float:
    """Gradient fidelity of labeled cross-entropy through classifier and adapter."""
    rng = stream(seed, "gradcheck", "ce")
    num_classes = int(rng.integers(2, 5))
    k, instances, labels, adapter = _encoder_setup(rng, num_classes)
    clf = cls.RelationClassifier.create(2 * k, num_classes, rng)
    params = adapter.params() + clf.params()

    def loss_fn(_):
        h, tape = encode_batch(instances, adapter)
        value, dlogits, ctape = cls.cross_entropy(clf, h, labels)
        clf_grads, dh = clf.mlp.backward(ctape, dlogits)
        return value, encode_backward(tape, dh) + clf_grads

    return finite_diff_check(loss_fn, params)


def _frozen_bce_value(clf, vectors, pairs: cls.PairBatch, margin, frozen_probs):
    """Pairwise loss with the starred distributions held constant."""
    probs = cls.classify(clf, vectors)
    total = 0.0
    for (a, b), same in zip(pairs.pairs, pairs.same):
        fwd = cls.kl_divergence(frozen_probs[a], probs[b])
        bwd = cls.kl_divergence(frozen_probs[b], probs[a])
        if same:
            total += fwd + bwd
        else:
            total += cls.hinge(fwd, margin) + cls.hinge(bwd, margin)
    return total / len(pairs)


def _generic_margin(frozen_probs, pairs: cls.PairBatch) -> float | None:
    """A hinge margin that makes the configuration fully generic, or None.

    When both directions of every different-cluster pair share the same hinge
    activity, the pair loss is first-order invariant along every bias
    direction (the per-pair gradients cancel in the batch sum), and the
    relative-error formula then compares rounding noise against an exact
    zero.  Splitting one pair's two one-sided KLs with the margin breaks the
    symmetry; the margin also stays clear of every KL value so no hinge sits
    on its kink.
    """
    kl = cls.pairwise_kl_matrix(frozen_probs)
    diff = [(a, b) for (a, b), q in zip(pairs.pairs, pairs.same) if q == 0]
    all_values = sorted({float(kl[a, b]) for a, b in diff} | {float(kl[b, a]) for a, b in diff})
    for a, b in sorted(diff, key=lambda p: -abs(kl[p[0], p[1]] - kl[p[1], p[0]])):
        candidate = float((kl[a, b] + kl[b, a]) / 2.0)
        if candidate > 1e-3 and all(abs(candidate - v) >= 1e-3 for v in all_values):
            return candidate
    return None


def _roughen_until_splittable(clf, rng, instances, adapter, pairs):
    """Re-roughen the classifier until some pair's KLs can bracket the margin.

    A head whose distributions happen to coincide has no usable margin; keep
    perturbing (deterministically) until the configuration is generic.
    """
    for _ in range(50):
        _roughen(clf.mlp, rng)
        h0, _ = encode_batch(instances, adapter)
        frozen = cls.classify(clf, h0)
        margin = _generic_margin(frozen, pairs)
        if margin is not None:
            return frozen, margin
    raise RuntimeError("could not reach a generic configuration for the pair loss")


def check_bce(seed: int) -> float:
    """Gradient fidelity of the pairwise loss under detached-target semantics."""
    rng = stream(seed, "gradcheck", "bce")
    num_novel = int(rng.integers(2, 5))
    k, instances, _, adapter = _encoder_setup(rng, num_novel)
    clf = cls.RelationClassifier.create(2 * k, num_novel, rng)
    pseudo = _mixed_pseudo_labels(rng, len(instances), num_novel)
    pairs = cls.build_pairs(pseudo)
    frozen, margin = _roughen_until_splittable(clf, rng, instances, adapter, pairs)
    params = adapter.params() + clf.params()

    def loss_fn(_):
        h, tape = encode_batch(instances, adapter)
        value = _frozen_bce_value(clf, h, pairs, margin, frozen)
        _, dlogits, ctape = cls.bce_loss(clf, h, pairs, margin)
        clf_grads, dh = clf.mlp.backward(ctape, dlogits)
        return value, encode_backward(tape, dh) + clf_grads

    return finite_diff_check(loss_fn, params)


def check_cls(seed: int) -> float:
    """Gradient fidelity of the joint objective over adapter plus both classifiers."""
    rng = stream(seed, "gradcheck", "cls")
    num_pre = int(rng.integers(2, 4))
    num_novel = int(rng.integers(2, 4))
    k, lab_instances, labels, adapter = _encoder_setup(rng, num_pre)
    unl_instances, _ = _random_instances(rng, int(rng.integers(4, 7)), k, num_novel)
    eta_l = cls.RelationClassifier.create(2 * k, num_pre, rng)
    eta_u = cls.RelationClassifier.create(2 * k, num_novel, rng)
    _roughen(eta_l.mlp, rng)
    pseudo = _mixed_pseudo_labels(rng, len(unl_instances), num_novel)
    pairs = cls.build_pairs(pseudo)
    frozen, margin = _roughen_until_splittable(eta_u, rng, unl_instances, adapter, pairs)
    params = adapter.params() + eta_l.params() + eta_u.params()

    def loss_fn(_):
        h_l, tape_l = encode_batch(lab_instances, adapter)
        h_u, tape_u = encode_batch(unl_instances, adapter)
        ce, dlogits_l, ctape_l = cls.cross_entropy(eta_l, h_l, labels)
        value = ce + _frozen_bce_value(eta_u, h_u, pairs, margin, frozen)
        _, dlogits_u, ctape_u = cls.bce_loss(eta_u, h_u, pairs, margin)
        eta_l_grads, dh_l = eta_l.mlp.backward(ctape_l, dlogits_l)
        eta_u_grads, dh_u = eta_u.mlp.backward(ctape_u, dlogits_u)
        theta = [a + b for a, b in zip(encode_backward(tape_l, dh_l),
                                       encode_backward(tape_u, dh_u))]
        return value, theta + eta_l_grads + eta_u_grads

    return finite_diff_check(loss_fn, params)


def check_incremental_ce(seed: int) -> float:
    """Gradient fidelity of the extended-classifier objective with fixed pseudo labels."""
    rng = stream(seed, "gradcheck", "incremental")
    num_pre = int(rng.integers(2, 4))
    num_novel = int(rng.integers(2, 4))
    k, lab_instances, labels, adapter = _encoder_setup(rng, num_pre)
    unl_instances, _ = _random_instances(rng, int(rng.integers(3, 6)), k, num_novel)
    clf = cls.RelationClassifier.create(2 * k, num_pre + num_novel, rng)
    _roughen(clf.mlp, rng)
    pseudo = _mixed_pseudo_labels(rng, len(unl_instances), num_novel) + num_pre
    epoch = int(rng.integers(0, 13))
    params = adapter.params() + clf.params()

    def loss_fn(_):
        h_l, tape_l = encode_batch(lab_instances, adapter)
        h_u, tape_u = encode_batch(unl_instances, adapter)
        value, dlogits_l, ctape_l, dlogits_u, ctape_u, _ = cls.incremental_ce(
            clf, h_l, labels, h_u, pseudo, epoch, 1.0, 10)
        clf_grads, dh_l = clf.mlp.backward(ctape_l, dlogits_l)
        extra, dh_u = clf.mlp.backward(ctape_u, dlogits_u)
        clf_grads = [a + b for a, b in zip(clf_grads, extra)]
        theta = [a + b for a, b in zip(encode_backward(tape_l, dh_l),
                                       encode_backward(tape_u, dh_u))]
        return value, theta + clf_grads

    return finite_diff_check(loss_fn, params)


_CHECKS = {
    "clustering": check_clustering_loss,
    "cross_entropy": check_cross_entropy,
    "bce": check_bce,
    "cls": check_cls,
    "incremental_ce": check_incremental_ce,
}


def run_all(seed: int = 0, n_configs: int = 20) -> dict[str, float]:
    """Worst relative gradient error per loss over ``n_configs`` random setups."""
    worst = {name: 0.0 for name in LOSS_NAMES}
    for i in range(n_configs):
        for name in LOSS_NAMES:
            worst[name] = max(worst[name], _CHECKS[name](seed * 100003 + i))
    return worst
