"""Relation instances and datasets: entity-pair encoding, the JSONL
interchange format, and a synthetic dataset generator.

An instance is a tokenized sentence with precomputed per-token embedding
vectors and two half-open entity spans.  Its fixed-length representation is
the concatenation of the component-wise max over the head-span vectors and
over the tail-span vectors (head first), optionally after a shared trainable
linear adapter standing in for a tuned encoder output layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .seeding import stream


@dataclass(frozen=True, eq=False)
class RelationInstance:
    """One tokenized sentence with head/tail entity spans.

    ``token_vecs`` is float32 with shape (n_tokens, k); spans are half-open
    [start, end).  ``label`` is the gold relation id, kept on unlabeled-set
    instances only for evaluation.
    """

    id: str
    tokens: tuple[str, ...]
    token_vecs: np.ndarray
    head: tuple[int, int]
    tail: tuple[int, int]
    label: int | None = None

    def __post_init__(self):
        vecs = np.asarray(self.token_vecs, dtype=np.float32)
        if vecs.ndim != 2:
            raise ValidationError(f"instance {self.id!r}: token_vecs must be 2-D, got shape {vecs.shape}")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "head", (int(self.head[0]), int(self.head[1])))
        object.__setattr__(self, "tail", (int(self.tail[0]), int(self.tail[1])))
        vecs.setflags(write=False)
        object.__setattr__(self, "token_vecs", vecs)
        n = len(self.tokens)
        if vecs.shape[0] != n:
            raise ValidationError(
                f"instance {self.id!r}: {vecs.shape[0]} token vectors for {n} tokens")
        for name, (s, e) in (("head", self.head), ("tail", self.tail)):
            if not (0 <= s < e <= n):
                raise ValidationError(
                    f"instance {self.id!r}: {name} span [{s}, {e}) invalid for {n} tokens")
        if self.label is not None and self.label < 0:
            raise ValidationError(f"instance {self.id!r}: negative label {self.label}")

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.token_vecs.shape[1]

    def __eq__(self, other):
        if not isinstance(other, RelationInstance):
            return NotImplemented
        return (self.id == other.id and self.tokens == other.tokens
                and self.head == other.head and self.tail == other.tail
                and self.label == other.label
                and np.array_equal(self.token_vecs, other.token_vecs))

    __hash__ = None  # mutable-array field; identity hashing would mislead


@dataclass
class Dataset:
    """Labeled (pre-defined relations) and unlabeled (novel relations) splits."""

    labeled: list[RelationInstance]
    unlabeled: list[RelationInstance]
    num_predefined: int
    num_novel: int
    embedding_dim: int

    def __post_init__(self):
        if not self.unlabeled:
            raise ValidationError("unlabeled set is empty")
        if not self.labeled:
            raise ValidationError("labeled set is empty")
        if self.num_novel < 2:
            raise ValidationError(f"need at least 2 novel classes, got {self.num_novel}")
        for inst in self.labeled:
            if inst.label is None:
                raise ValidationError(f"labeled instance {inst.id!r} is missing its label")
            if not (0 <= inst.label < self.num_predefined):
                raise ValidationError(
                    f"labeled instance {inst.id!r} has label {inst.label}, "
                    f"expected [0, {self.num_predefined})")
        for inst in self.labeled + self.unlabeled:
            if inst.dim != self.embedding_dim:
                raise ValidationError(
                    f"instance {inst.id!r} has embedding dim {inst.dim}, "
                    f"expected {self.embedding_dim}")

    @property
    def pair_dim(self) -> int:
        """Dimension of the entity-pair vector (twice the token dim)."""
        return 2 * self.embedding_dim


class LinearAdapter:
    """Shared trainable linear map applied to token vectors before pooling.

    Stands in for fine-tuning only the output layer of a frozen encoder.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or weight.shape[0] != weight.shape[1] or bias.shape != (weight.shape[0],):
            raise ValidationError(f"adapter needs square weight and matching bias, got {weight.shape}, {bias.shape}")
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, dim: int, rng: np.random.Generator, noise: float = 0.01) -> "LinearAdapter":
        """Identity plus small seeded noise, so initial encodings stay near raw."""
        weight = np.eye(dim) + noise * rng.standard_normal((dim, dim))
        bias = noise * rng.standard_normal(dim)
        return cls(weight, bias)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def set_params(self, arrays) -> None:
        np.copyto(self.weight, arrays[0])
        np.copyto(self.bias, arrays[1])

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(self.weight), np.zeros_like(self.bias)]

    def apply(self, vecs: np.ndarray) -> np.ndarray:
        return np.asarray(vecs, dtype=np.float64) @ self.weight.T + self.bias


class EncodeTape:
    """Per-instance pooling record needed to backpropagate into the adapter."""

    __slots__ = ("entries", "dim")

    def __init__(self, entries, dim):
        self.entries = entries  # (head_raw_rows, head_argmax, tail_raw_rows, tail_argmax) per instance
        self.dim = dim


def _pool_span(adapted: np.ndarray, raw: np.ndarray, span: tuple[int, int]):
    rows = adapted[span[0]:span[1]]
    idx = np.argmax(rows, axis=0)  # first max wins on ties
    pooled = rows[idx, np.arange(rows.shape[1])]
    return pooled, raw[span[0]:span[1]], idx


def encode_batch(instances, adapter: LinearAdapter | None = None):
    """Encode instances into entity-pair vectors, keeping a tape for backward.

    Returns (H, tape) where H is float64          with shape (n, 2k).
    """
    if not instances:
        raise ValidationError("cannot encode an empty batch")
    k = instances[0].dim
    if adapter is not None and adapter.dim != k:
        raise ValidationError(f"adapter dim {adapter.dim} does not match token dim {k}")
    out = np.empty((len(instances), 2 * k))
    entries = []
    for i, inst in enumerate(instances):
        if inst.dim != k:
            raise ValidationError(f"instance {inst.id!r}: dim {inst.dim} != batch dim {k}")
        raw = np.asarray(inst.token_vecs, dtype=np.float64)
        adapted = adapter.apply(raw) if adapter is not None else raw
        head_pooled, head_raw, head_idx = _pool_span(adapted, raw, inst.head)
        tail_pooled, tail_raw, tail_idx = _pool_span(adapted, raw, inst.tail)
        out[i, :k] = head_pooled
        out[i, k:] = tail_pooled
        entries.append((head_raw, head_idx, tail_raw, tail_idx))
    return out, EncodeTape(entries, k)


def encode_backward(tape: EncodeTape, d_out: np.ndarray) -> list[np.ndarray]:
    """Gradients of <d_out, H> w.r.t. the adapter's weight and bias.

    Max-pool routes each output component's gradient to the argmax token of
    its span; with no adapter there is nothing trainable upstream.
    """
    k = tape.dim
    d_weight = np.zeros((k, k))
    d_bias = np.zeros(k)
    cols = np.arange(k)
    for (head_raw, head_idx, tail_raw, tail_idx), grad in zip(tape.entries, d_out):
        for raw, idx, g in ((head_raw, head_idx, grad[:k]), (tail_raw, tail_idx, grad[k:])):
            selected = raw[idx, :]  # row j: the raw token vector that won component j
            d_weight += g[:, None] * selected
            d_bias += g
    return [d_weight, d_bias]


def encode_entity_pair(instance: RelationInstance, adapter: LinearAdapter | None = None) -> np.ndarray:
    """Entity-pair vector: maxpool over head span ++ maxpool over tail span."""
    h, _ = encode_batch([instance], adapter)
    return h[0]


def encode_all(instances, adapter: LinearAdapter | None = None) -> np.ndarray:
    """Encode without keeping a tape (evaluation / clustering path)."""
    h, _ = encode_batch(instances, adapter)
    return h


# ---------------------------------------------------------------------------
# JSONL interchange format
# ---------------------------------------------------------------------------

_REQUIRED_KEYS = ("id", "tokens", "token_vecs", "head", "tail", "label")


def _parse_record(obj, where: str) -> RelationInstance:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: record is not an object")
    missing = [key for key in _REQUIRED_KEYS if key not in obj]
    if missing:
        raise ParseError(f"{where}: missing keys {missing}")
    try:
        return RelationInstance(
            id=str(obj["id"]),
            tokens=tuple(str(t) for t in obj["tokens"]),
            token_vecs=np.asarray(obj["token_vecs"], dtype=np.float32),
            head=tuple(obj["head"]),
            tail=tuple(obj["tail"]),
            label=None if obj["label"] is None else int(obj["label"]),
        )
    except ValidationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: {exc}") from exc


def read_instances(path) -> list[RelationInstance]:
    instances = []
    with open(path, "r", encoding="utf8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{where}: invalid JSON ({exc.msg})") from exc
            instances.append(_parse_record(obj, where))
    return instances


def save_instances(path, instances) -> None:
    """Write instances as JSONL; token vectors round-trip exactly at float32."""
    with open(path, "w", encoding="utf8") as fh:
        for inst in instances:
            record = {
                "id": inst.id,
                "tokens": list(inst.tokens),
                "token_vecs": [[float(v) for v in row] for row in inst.token_vecs],
                "head": list(inst.head),
                "tail": list(inst.tail),
                "label": inst.label,
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_dataset(labeled_path, unlabeled_path, num_novel: int) -> Dataset:
    """Load a dataset from two JSONL files, in file order.

    The number of novel classes is not derivable from the files (unlabeled
    gold labels are optional) and must be supplied by the caller's config.
    """
    labeled = read_instances(labeled_path)
    unlabeled = read_instances(unlabeled_path)
    if not labeled:
        raise ValidationError(f"labeled set is empty: {labeled_path}")
    if not unlabeled:
        raise ValidationError("unlabeled set is empty")
    for inst in labeled:
        if inst.label is None:
            raise ValidationError(f"labeled instance {inst.id!r} is missing its label")
    num_predefined = max(inst.label for inst in labeled) + 1
    dims = {inst.dim for inst in labeled + unlabeled}
    if len(dims) != 1:
        raise ValidationError(f"embedding dimension differs across instances: {sorted(dims)}")
    return Dataset(
        labeled=labeled,
        unlabeled=unlabeled,
        num_predefined=num_predefined,
        num_novel=int(num_novel),
        embedding_dim=dims.pop(),
    )


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale Gaussian stand-in for a real relation extraction corpus."""

    num_predefined: int
    num_novel: int
    instances_per_class: int
    embedding_dim: int
    cluster_separation: float
    noise_std: float

    def __post_init__(self):
        for name in ("num_predefined", "num_novel", "instances_per_class", "embedding_dim"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.num_novel < 2:
            raise ValidationError("need at least 2 novel classes")
        if self.cluster_separation <= 0:
            raise ValidationError("cluster_separation must be positive")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Generate a dataset of Gaussian relation clusters, deterministic in ``seed``.

    Each relation gets a (head, tail) pair of mean vectors scaled so the
    expected squared distance between any two relations' means equals
    ``cluster_separation`` squared; span tokens are Gaussian around the means
    with ``noise_std``, context tokens are standard normal.  The first
    ``num_predefined`` relations form the labeled set; the rest go to the
    unlabeled set with their gold labels retained for evaluation only.
    """
    k = spec.embedding_dim
    total = spec.num_predefined + spec.num_novel
    mean_scale = spec.cluster_separation / math.sqrt(2.0 * k)
    mean_rng = stream(seed, "synthetic", "means")
    head_means = mean_rng.normal(0.0, mean_scale, size=(total, k))
    tail_means = mean_rng.normal(0.0, mean_scale, size=(total, k))

    draw = stream(seed, "synthetic", "draw")
    labeled: list[RelationInstance] = []
    unlabeled: list[RelationInstance] = []
    for rel in range(total):
        for i in range(spec.instances_per_class):
            pre, mid, post = draw.integers(0, 3, size=3)
            head_len = int(draw.integers(1, 3))
            tail_len = int(draw.integers(1, 3))
            n = pre + head_len + mid + tail_len + post
            vecs = draw.standard_normal((n, k))
            head = (pre, pre + head_len)
            tail = (pre + head_len + mid, pre + head_len + mid + tail_len)
            vecs[head[0]:head[1]] = head_means[rel] + spec.noise_std * draw.standard_normal((head_len, k))
            vecs[tail[0]:tail[1]] = tail_means[rel] + spec.noise_std * draw.standard_normal((tail_len, k))
            inst = RelationInstance(
                id=f"synth-{rel:02d}-{i:04d}",
                tokens=tuple(f"t{j}" for j in range(n)),
                token_vecs=vecs.astype(np.float32),
                head=head,
                tail=tail,
                label=rel,
            )
            (labeled if rel < spec.num_predefined else unlabeled).append(inst)

    shuffle = stream(seed, "synthetic", "shuffle")
    shuffle.shuffle(labeled)
    shuffle.shuffle(unlabeled)
    return Dataset(
        labeled=labeled,
        unlabeled=unlabeled,
        num_predefined=spec.num_predefined,
        num_novel=spec.num_novel,
        embedding_dim=k,
    )
