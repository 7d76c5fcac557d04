"""Iterative joint training.

Each outer epoch (1) regenerates pseudo labels by clustering the unlabeled
bottleneck representations, (2) refines the encoder adapter and both
classifiers against the joint classification objective, and (3) optimizes the
autoencoder against the clustering objective.  The three parameter groups
(adapter, autoencoder, classifiers) are strictly isolated: each phase
computes gradients only for its own group.

Training runs after a reconstruction-only pretraining phase and stops when
the fraction of unlabeled instances whose pseudo label changed since the
previous epoch (after matching cluster ids across epochs) drops below the
configured threshold, or when the epoch budget runs out.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import classify as cls
from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import (
    AutoencoderPair,
    ClusterAssignment,
    clustering_loss_grads,
    kmeans,
    pretrain_autoencoder,
)
from .data import Dataset, LinearAdapter, RelationInstance, encode_all, encode_backward, encode_batch
from .errors import NonFiniteLossError, TrainingAborted, ValidationError
from .metrics import MetricsReport
from .nn import AdamState, Mlp
from .seeding import child_sequence, stream

MODES = ("standard", "incremental")
PHASE_ORDERS = ("sequential", "interleaved")
PRETRAIN_SETS = ("both", "labeled")


@dataclass
class TrainConfig:
    """Hyperparameters and switches; mirrors the JSON config file field-for-field."""

    learning_rate: float = 1e-4
    batch_size: int = 100
    pretrain_epochs: int = 10
    hinge_margin: float = 2.0
    center_weight: float = 0.005
    ramp_max: float = 1.0
    ramp_epochs: int = 10
    max_outer_epochs: int = 100
    convergence_threshold: float = 0.005
    seed: int = 0
    mode: str = "standard"
    no_center: bool = False
    no_reconstruction: bool = False
    no_ce: bool = False
    pair_cap: int | None = None
    use_adapter: bool = True
    adapter_noise: float = 0.01
    pretrain_on: str = "both"
    phase_order: str = "sequential"
    test_fraction: float = 0.2
    hidden: tuple[int, ...] = (512, 512)
    bottleneck: int = 256

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        min_batch = 2 if self.mode == "standard" else 1
        if self.batch_size < min_batch:
            raise ValidationError(f"batch_size must be at least {min_batch} in {self.mode} mode")
        if self.pretrain_epochs < 0 or self.max_outer_epochs < 0:
            raise ValidationError("epoch counts must be non-negative")
        if self.hinge_margin <= 0 or self.ramp_max <= 0 or self.ramp_epochs < 1:
            raise ValidationError("hinge_margin, ramp_max must be positive and ramp_epochs >= 1")
        if self.center_weight < 0 or self.convergence_threshold < 0:
            raise ValidationError("center_weight and convergence_threshold must be non-negative")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.phase_order not in PHASE_ORDERS:
            raise ValidationError(f"phase_order must be one of {PHASE_ORDERS}")
        if self.pretrain_on not in PRETRAIN_SETS:
            raise ValidationError(f"pretrain_on must be one of {PRETRAIN_SETS}")
        if not (0.0 <= self.test_fraction < 1.0):
            raise ValidationError("test_fraction must be in [0, 1)")
        if self.pair_cap is not None and self.pair_cap < 1:
            raise ValidationError("pair_cap must be positive when set")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(obj)
        if "hidden" in kwargs:
            kwargs["hidden"] = tuple(kwargs["hidden"])
        return cls(**kwargs)

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


@dataclass
class DataSplit:
    """Training data with held-out test slices of both subsets."""

    labeled_train: list[RelationInstance]
    predefined_test: list[RelationInstance]
    unlabeled_train: list[RelationInstance]
    novel_test: list[RelationInstance]


def split_dataset(dataset: Dataset, test_fraction: float, seed: int) -> DataSplit:
    """Hold out a seeded fraction of each subset for evaluation."""

    def holdout(instances, tag):
        n = len(instances)
        n_test = int(math.floor(n * test_fraction))
        if n - n_test < 1:
            raise ValidationError(f"test_fraction {test_fraction} leaves no {tag} training data")
        order = stream(seed, "split", tag).permutation(n)
        test_idx = set(order[:n_test].tolist())
        train = [inst for i, inst in enumerate(instances) if i not in test_idx]
        test = [inst for i, inst in enumerate(instances) if i in test_idx]
        return train, test

    labeled_train, predefined_test = holdout(dataset.labeled, "labeled")
    unlabeled_train, novel_test = holdout(dataset.unlabeled, "unlabeled")
    return DataSplit(labeled_train, predefined_test, unlabeled_train, novel_test)


@dataclass
class ModelState:
    """All trainable parameter groups plus their optimizer states."""

    adapter: LinearAdapter | None
    ae: AutoencoderPair
    eta_l: cls.RelationClassifier
    eta_u: cls.RelationClassifier
    opt_theta: AdamState | None
    opt_phi: AdamState
    opt_psi: AdamState
    num_predefined: int
    num_novel: int
    embedding_dim: int
    mode: str
    seed: int
    pretrained: bool = False
    epochs_trained: int = 0

    def psi_params(self) -> list[np.ndarray]:
        return self.eta_l.params() + self.eta_u.params()


def init_state(dataset: Dataset, config: TrainConfig) -> ModelState:
    pair_dim = dataset.pair_dim
    adapter = None
    opt_theta = None
    if config.use_adapter:
        adapter = LinearAdapter.create(
            dataset.embedding_dim, stream(config.seed, "init", "adapter"), config.adapter_noise)
        opt_theta = AdamState(adapter.params(), config.learning_rate)
    ae = AutoencoderPair.create(
        pair_dim, stream(config.seed, "init", "autoencoder"),
        bottleneck=config.bottleneck, hidden=config.hidden, center_weight=config.center_weight)
    eta_l_classes = dataset.num_predefined
    if config.mode == "incremental":
        eta_l_classes += dataset.num_novel
    eta_l = cls.RelationClassifier.create(pair_dim, eta_l_classes, stream(config.seed, "init", "eta_l"))
    eta_u = cls.RelationClassifier.create(pair_dim, dataset.num_novel, stream(config.seed, "init", "eta_u"))
    return ModelState(
        adapter=adapter,
        ae=ae,
        eta_l=eta_l,
        eta_u=eta_u,
        opt_theta=opt_theta,
        opt_phi=AdamState(ae.params(), config.learning_rate),
        opt_psi=AdamState(eta_l.params() + eta_u.params(), config.learning_rate),
        num_predefined=dataset.num_predefined,
        num_novel=dataset.num_novel,
        embedding_dim=dataset.embedding_dim,
        mode=config.mode,
        seed=config.seed,
    )


def _batch_cycler(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def derive_kmeans_seed(seed: int, epoch: int) -> int:
    return int(child_sequence(seed, "kmeans-epoch", epoch).generate_state(1)[0])


def aligned_change_rate(prev: np.ndarray | None, current: np.ndarray, k: int) -> float:
    """Fraction of points whose pseudo label changed since last epoch.

    Cluster ids are arbitrary per clustering run, so the current ids are first
    matched to the previous ones by maximum overlap before comparing.
    """
    if prev is None:
        return 1.0
    overlap = np.zeros((k, k), dtype=np.int64)
    np.add.at(overlap, (prev, current), 1)
    rows, cols = linear_sum_assignment(-overlap)
    mapping = np.empty(k, dtype=np.int64)
    mapping[cols] = rows
    return float(np.mean(prev != mapping[current]))


@dataclass
class EpochStats:
    epoch: int
    pseudo_change_rate: float
    ce: float = 0.0
    bce: float = 0.0
    cls_total: float = 0.0
    reconstruction: float = 0.0
    center: float = 0.0
    clustering_total: float = 0.0
    empty_pair_batches: int = 0
    ramp_weight: float | None = None
    metrics: MetricsReport | None = None
    predefined_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "pseudo_change_rate": self.pseudo_change_rate,
            "ce": self.ce,
            "bce": self.bce,
            "cls": self.cls_total,
            "reconstruction": self.reconstruction,
            "center": self.center,
            "clustering": self.clustering_total,
            "empty_pair_batches": self.empty_pair_batches,
            "ramp_weight": self.ramp_weight,
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
            "predefined_accuracy": self.predefined_accuracy,
        }


def _zero_like_params(net: Mlp) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in net.params()]


def _check_finite(**values) -> None:
    bad = {name: value for name, value in values.items() if not np.isfinite(value)}
    if bad:
        raise NonFiniteLossError(f"non-finite loss components: {bad}")


def _cls_step(state: ModelState, config: TrainConfig, labeled_batch, labels,
              unlabeled_batch, pseudo_batch, epoch: int,
              pair_rng: np.random.Generator):
    """One joint-objective update of the adapter and classifier groups."""
    h_l, tape_l = encode_batch(labeled_batch, state.adapter)
    h_u, tape_u = encode_batch(unlabeled_batch, state.adapter)
    pairs = cls.build_pairs(pseudo_batch, config.pair_cap, pair_rng)
    empty_pairs = 1 if len(pairs) == 0 else 0

    bce, dlogits_bce, tape_bce = cls.bce_loss(state.eta_u, h_u, pairs, config.hinge_margin)
    eta_u_grads, dh_u = state.eta_u.mlp.backward(tape_bce, dlogits_bce)

    ramp_weight = None
    if config.no_ce:
        ce = 0.0
        eta_l_grads = _zero_like_params(state.eta_l.mlp)
        dh_l = np.zeros_like(h_l)
    elif config.mode == "incremental":
        pseudo_pred = cls.predict(state.eta_u, h_u) + state.num_predefined
        ce, dlogits_l, ctape_l, dlogits_u_ce, ctape_u_ce, ramp_weight = cls.incremental_ce(
            state.eta_l, h_l, labels, h_u, pseudo_pred,
            epoch, config.ramp_max, config.ramp_epochs)
        eta_l_grads, dh_l = state.eta_l.mlp.backward(ctape_l, dlogits_l)
        if dlogits_u_ce is not None:
            extra_grads, dh_u_ce = state.eta_l.mlp.backward(ctape_u_ce, dlogits_u_ce)
            eta_l_grads = [a + b for a, b in zip(eta_l_grads, extra_grads)]
            dh_u = dh_u + dh_u_ce
    else:
        ce, dlogits_l, ctape_l = cls.cross_entropy(state.eta_l, h_l, labels)
        eta_l_grads, dh_l = state.eta_l.mlp.backward(ctape_l, dlogits_l)

    _check_finite(ce=ce, bce=bce)

    if state.adapter is not None:
        theta_grads = encode_backward(tape_l, dh_l)
        theta_grads_u = encode_backward(tape_u, dh_u)
        theta_grads = [a + b for a, b in zip(theta_grads, theta_grads_u)]
        state.opt_theta.step(state.adapter.params(), theta_grads)
    state.opt_psi.step(state.psi_params(), eta_l_grads + eta_u_grads)
    return ce, bce, empty_pairs, ramp_weight


def _clustering_step(state: ModelState, config: TrainConfig, labeled_batch, labels):
    """One clustering-objective update of the autoencoder group only."""
    h_l = encode_all(labeled_batch, state.adapter)
    total, parts, enc_grads, dec_grads = clustering_loss_grads(
        state.ae, h_l, labels,
        no_center=config.no_center, no_reconstruction=config.no_reconstruction)
    state.opt_phi.step(state.ae.params(), enc_grads + dec_grads)
    return total, parts


def generate_pseudo_labels(state: ModelState, instances, seed: int) -> ClusterAssignment:
    """Cluster the unlabeled bottleneck representations into novel-class bins."""
    vectors = encode_all(instances, state.adapter)
    reps = state.ae.transform(vectors)
    return kmeans(reps, state.num_novel, seed, order_keys=[inst.id for inst in instances])


def train_epoch(state: ModelState, split: DataSplit, config: TrainConfig, epoch: int,
                prev_pseudo: np.ndarray | None):
    """One outer epoch: pseudo labels first, then the two update phases."""
    assignment = generate_pseudo_labels(
        state, split.unlabeled_train, derive_kmeans_seed(config.seed, epoch))
    change_rate = aligned_change_rate(prev_pseudo, assignment.labels, state.num_novel)

    n_lab = len(split.labeled_train)
    n_unl = len(split.unlabeled_train)
    steps = math.ceil(max(n_lab, n_unl) / config.batch_size)
    lab_iter = _batch_cycler(n_lab, config.batch_size, stream(config.seed, "batch", "labeled", epoch))
    unl_iter = _batch_cycler(n_unl, config.batch_size, stream(config.seed, "batch", "unlabeled", epoch))
    center_iter = _batch_cycler(n_lab, config.batch_size, stream(config.seed, "batch", "center", epoch))
    pair_rng = stream(config.seed, "pairs", epoch)

    labels_lab = np.asarray([inst.label for inst in split.labeled_train], dtype=np.int64)
    stats = EpochStats(epoch=epoch, pseudo_change_rate=change_rate)

    ce_vals, bce_vals, lc_vals, recon_vals, center_vals = [], [], [], [], []

    def run_cls_step():
        lab_idx = next(lab_iter)
        unl_idx = next(unl_iter)
        batch_l = [split.labeled_train[i] for i in lab_idx]
        batch_u = [split.unlabeled_train[i] for i in unl_idx]
        ce, bce, empty, ramp_weight = _cls_step(
            state, config, batch_l, labels_lab[lab_idx], batch_u,
            assignment.labels[unl_idx], epoch, pair_rng)
        ce_vals.append(ce)
        bce_vals.append(bce)
        stats.empty_pair_batches += empty
        if ramp_weight is not None:
            stats.ramp_weight = ramp_weight

    def run_clustering_step():
        idx = next(center_iter)
        batch = [split.labeled_train[i] for i in idx]
        total, parts = _clustering_step(state, config, batch, labels_lab[idx])
        lc_vals.append(total)
        recon_vals.append(parts["reconstruction"])
        center_vals.append(parts["center"])

    if config.phase_order == "sequential":
        for _ in range(steps):
            run_cls_step()
        for _ in range(steps):
            run_clustering_step()
    else:
        for _ in range(steps):
            run_cls_step()
            run_clustering_step()

    stats.ce = float(np.mean(ce_vals))
    stats.bce = float(np.mean(bce_vals))
    stats.cls_total = stats.ce + stats.bce
    stats.clustering_total = float(np.mean(lc_vals))
    stats.reconstruction = float(np.mean(recon_vals))
    stats.center = float(np.mean(center_vals))
    state.epochs_trained = epoch
    return stats, assignment.labels


def predict_instances(state: ModelState, instances) -> np.ndarray:
    """Novel-relation predictions for a list of instances."""
    vectors = encode_all(instances, state.adapter)
    return cls.predict(state.eta_u, vectors)


def evaluate(state: ModelState, instances) -> MetricsReport:
    """Score novel-relation predictions against the hidden gold labels."""
    if not instances:
        raise ValidationError("cannot evaluate on an empty test split")
    gold = []
    for inst in instances:
        if inst.label is None:
            raise ValidationError(f"test instance {inst.id!r} has no hidden gold label")
        gold.append(inst.label)
    preds = predict_instances(state, instances)
    return MetricsReport.compute(preds, np.asarray(gold))


def predefined_accuracy(state: ModelState, instances) -> float:
    """Accuracy of the (possibly extended) pre-defined classifier on gold ids."""
    if not instances:
        raise ValidationError("cannot evaluate on an empty test split")
    vectors = encode_all(instances, state.adapter)
    preds = cls.predict(state.eta_l, vectors)
    gold = np.asarray([inst.label for inst in instances])
    return float(np.mean(preds == gold))


@dataclass
class TrainReport:
    """Everything a run produced, minus the parameters themselves."""

    config: dict
    dataset_summary: dict
    pretrain_losses: list[float]
    epochs: list[dict]
    converged: bool
    epochs_run: int
    final_metrics: dict | None
    final_predefined_accuracy: float | None
    checkpoint_path: str | None
    wall_clock_sec: float = 0.0

    def to_dict(self) -> dict:
        # wall_clock_sec is intentionally left out: report files must be
        # byte-identical across reruns of the same config and seed.
        return {
            "config": self.config,
            "dataset": self.dataset_summary,
            "pretrain_losses": self.pretrain_losses,
            "epochs": self.epochs,
            "converged": self.converged,
            "epochs_run": self.epochs_run,
            "final_metrics": self.final_metrics,
            "final_predefined_accuracy": self.final_predefined_accuracy,
            "checkpoint": self.checkpoint_path,
        }

    def loss_trajectory(self) -> list[tuple]:
        return [(e["ce"], e["bce"], e["clustering"]) for e in self.epochs]


# ---------------------------------------------------------------------------
# Checkpoint glue
# ---------------------------------------------------------------------------

def _net_arrays(prefix: str, net: Mlp) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}/w{i}"] = w
        out[f"{prefix}/b{i}"] = b
    return out


def _opt_arrays(prefix: str, opt: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        out[f"{prefix}/m{i}"] = m
        out[f"{prefix}/v{i}"] = v
    return out


def state_arrays(state: ModelState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    if state.adapter is not None:
        arrays["adapter/weight"] = state.adapter.weight
        arrays["adapter/bias"] = state.adapter.bias
        arrays.update(_opt_arrays("opt_theta", state.opt_theta))
    arrays.update(_net_arrays("encoder", state.ae.encoder))
    arrays.update(_net_arrays("decoder", state.ae.decoder))
    arrays.update(_net_arrays("eta_l", state.eta_l.mlp))
    arrays.update(_net_arrays("eta_u", state.eta_u.mlp))
    arrays.update(_opt_arrays("opt_phi", state.opt_phi))
    arrays.update(_opt_arrays("opt_psi", state.opt_psi))
    return arrays


def save_state(path, state: ModelState, config: TrainConfig) -> None:
    meta = {
        "kind": "model-state",
        "seed": state.seed,
        "mode": state.mode,
        "embedding_dim": state.embedding_dim,
        "num_predefined": state.num_predefined,
        "num_novel": state.num_novel,
        "pretrained": state.pretrained,
        "epochs_trained": state.epochs_trained,
        "has_adapter": state.adapter is not None,
        "opt_t": {
            "theta": state.opt_theta.t if state.opt_theta is not None else None,
            "phi": state.opt_phi.t,
            "psi": state.opt_psi.t,
        },
        "config": config.to_dict(),
    }
    save_checkpoint(path, meta, state_arrays(state))


def _net_from_arrays(prefix: str, arrays: dict[str, np.ndarray]) -> Mlp:
    weights, biases = [], []
    i = 0
    while f"{prefix}/w{i}" in arrays:
        weights.append(arrays[f"{prefix}/w{i}"])
        biases.append(arrays[f"{prefix}/b{i}"])
        i += 1
    return Mlp(weights, biases)


def _opt_from_arrays(prefix: str, arrays: dict[str, np.ndarray], params,
                     learning_rate: float, t: int) -> AdamState:
    opt = AdamState(params, learning_rate)
    opt.t = t
    i = 0
    while f"{prefix}/m{i}" in arrays:
        opt.m[i] = arrays[f"{prefix}/m{i}"]
        opt.v[i] = arrays[f"{prefix}/v{i}"]
        i += 1
    return opt


def load_state(path) -> tuple[ModelState, TrainConfig]:
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "model-state":
        raise ValidationError(f"{path} is not a model-state checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    adapter = None
    opt_theta = None
    if meta["has_adapter"]:
        adapter = LinearAdapter(arrays["adapter/weight"], arrays["adapter/bias"])
        opt_theta = _opt_from_arrays("opt_theta", arrays, adapter.params(),
                                     config.learning_rate, meta["opt_t"]["theta"])
    ae = AutoencoderPair(
        encoder=_net_from_arrays("encoder", arrays),
        decoder=_net_from_arrays("decoder", arrays),
        center_weight=config.center_weight,
    )
    eta_l_net = _net_from_arrays("eta_l", arrays)
    eta_u_net = _net_from_arrays("eta_u", arrays)
    eta_l = cls.RelationClassifier(eta_l_net, eta_l_net.out_dim)
    eta_u = cls.RelationClassifier(eta_u_net, eta_u_net.out_dim)
    state = ModelState(
        adapter=adapter,
        ae=ae,
        eta_l=eta_l,
        eta_u=eta_u,
        opt_theta=opt_theta,
        opt_phi=_opt_from_arrays("opt_phi", arrays, ae.params(), config.learning_rate, meta["opt_t"]["phi"]),
        opt_psi=_opt_from_arrays("opt_psi", arrays, eta_l.params() + eta_u.params(),
                                 config.learning_rate, meta["opt_t"]["psi"]),
        num_predefined=meta["num_predefined"],
        num_novel=meta["num_novel"],
        embedding_dim=meta["embedding_dim"],
        mode=meta["mode"],
        seed=meta["seed"],
        pretrained=meta["pretrained"],
        epochs_trained=meta["epochs_trained"],
    )
    return state, config


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------

def _dataset_summary(dataset: Dataset, split: DataSplit) -> dict:
    return {
        "num_labeled_train": len(split.labeled_train),
        "num_predefined_test": len(split.predefined_test),
        "num_unlabeled_train": len(split.unlabeled_train),
        "num_novel_test": len(split.novel_test),
        "num_predefined": dataset.num_predefined,
        "num_novel": dataset.num_novel,
        "embedding_dim": dataset.embedding_dim,
    }


def train(dataset: Dataset, config: TrainConfig, checkpoint_path=None,
          state: ModelState | None = None) -> tuple[TrainReport, ModelState]:
    """Run pretraining plus iterative joint training to convergence.

    Deterministic given (dataset, config): identical runs produce identical
    loss trajectories and checkpoints.  Returns the report and final state;
    ``checkpoint_path``, when given, also receives the final state (or the
    last good state if a non-finite loss aborts the run).
    """
    start = time.perf_counter()
    split = split_dataset(dataset, config.test_fraction, config.seed)
    if state is None:
        state = init_state(dataset, config)

    pretrain_losses: list[float] = []
    if not state.pretrained:
        if config.pretrain_epochs > 0 and not config.no_reconstruction:
            pool = list(split.labeled_train)
            if config.pretrain_on == "both":
                pool += split.unlabeled_train
            vectors = encode_all(pool, state.adapter)
            pretrain_losses = pretrain_autoencoder(
                state.ae, vectors, epochs=config.pretrain_epochs,
                batch_size=config.batch_size, learning_rate=config.learning_rate,
                rng=stream(config.seed, "pretrain", "shuffle"),
                optimizer=state.opt_phi)
        state.pretrained = True

    can_score_novel = bool(split.novel_test) and all(
        inst.label is not None for inst in split.novel_test)
    can_score_predefined = bool(split.predefined_test)

    epochs: list[dict] = []
    converged = False
    prev_pseudo: np.ndarray | None = None
    last_good = {name: arr.copy() for name, arr in state_arrays(state).items()}

    for epoch in range(1, config.max_outer_epochs + 1):
        try:
            stats, prev_pseudo = train_epoch(state, split, config, epoch, prev_pseudo)
        except NonFiniteLossError as exc:
            rescue = None
            if checkpoint_path is not None:
                rescue = str(checkpoint_path) + ".last-good"
                save_checkpoint(rescue, {"kind": "model-state-rescue", "epoch": epoch - 1}, last_good)
            raise TrainingAborted(
                f"aborted at epoch {epoch}: {exc}"
                + (f" (last good checkpoint: {rescue})" if rescue else "")) from exc
        if can_score_novel:
            stats.metrics = evaluate(state, split.novel_test)
        if can_score_predefined and config.mode == "incremental":
            stats.predefined_accuracy = predefined_accuracy(state, split.predefined_test)
        epochs.append(stats.to_dict())
        last_good = {name: arr.copy() for name, arr in state_arrays(state).items()}
        if stats.pseudo_change_rate < config.convergence_threshold:
            converged = True
            break

    final_metrics = evaluate(state, split.novel_test).to_dict() if can_score_novel else None
    final_accuracy = (predefined_accuracy(state, split.predefined_test)
                      if can_score_predefined and config.mode == "incremental" else None)
    if checkpoint_path is not None:
        save_state(checkpoint_path, state, config)

    report = TrainReport(
        config=config.to_dict(),
        dataset_summary=_dataset_summary(dataset, split),
        pretrain_losses=pretrain_losses,
        epochs=epochs,
        converged=converged,
        epochs_run=len(epochs),
        final_metrics=final_metrics,
        final_predefined_accuracy=final_accuracy,
        checkpoint_path=str(checkpoint_path) if checkpoint_path is not None else None,
        wall_clock_sec=time.perf_counter() - start,
    )
    return report, state
