"""Corpus-to-dataset exporter.

Input corpus: JSONL records {"id", "tokens", "head", "tail", "label"} with
half-open word-level spans.  The exporter runs a pretrained encoder, takes
the hidden states of one chosen layer, pools subword vectors back to word
level (max per component by default, first-subword optional), and writes the
downstream JSONL dataset format: the same record plus "token_vecs".

Records whose words cannot be aligned to encoder subwords (empty tokens,
truncation, over-long sentences) are skipped and logged; a skip rate above
1% fails the export.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

logger = logging.getLogger(__name__)

POOLING_MODES = ("max", "first")


class ExportError(RuntimeError):
    """Export could not produce a usable dataset."""


class CorpusError(ValueError):
    """The input corpus file or a CLI argument is invalid."""


@dataclass
class ExportSpec:
    input_path: str
    encoder: str
    layer: int
    output_path: str
    pooling: str = "max"
    precision: int | None = None
    batch_size: int = 16
    max_skip_rate: float = 0.01

    def __post_init__(self):
        if self.pooling not in POOLING_MODES:
            raise CorpusError(f"pooling must be one of {POOLING_MODES}")
        if self.layer < 0:
            raise CorpusError("layer index must be non-negative")
        if self.batch_size < 1:
            raise CorpusError("batch_size must be positive")
        if self.precision is not None and self.precision < 1:
            raise CorpusError("precision must be a positive number of decimals")


@dataclass
class ExportStats:
    exported: int = 0
    skipped: list = field(default_factory=list)  # (record id, reason)

    @property
    def skip_rate(self) -> float:
        total = self.exported + len(self.skipped)
        return 0.0 if total == 0 else len(self.skipped) / total


def read_corpus(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("id", "tokens", "head", "tail"):
                if key not in obj:
                    raise CorpusError(f"{path}:{lineno}: missing key {key!r}")
            obj.setdefault("label", None)
            records.append(obj)
    if not records:
        raise CorpusError(f"corpus is empty: {path}")
    return records


def _span_ok(span, n) -> bool:
    return len(span) == 2 and 0 <= span[0] < span[1] <= n


def _group_subwords(word_ids) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for position, word in enumerate(word_ids):
        if word is not None:
            groups.setdefault(word, []).append(position)
    return groups


def load_encoder(name_or_path: str):
    from transformers import AutoModel, AutoTokenizer
    from transformers.utils import logging as hf_logging

    hf_logging.disable_progress_bar()
    tokenizer = AutoTokenizer.from_pretrained(name_or_path)
    model = AutoModel.from_pretrained(name_or_path)
    model.eval()
    return tokenizer, model


def export(spec: ExportSpec) -> ExportStats:
    """Run the encoder over the corpus and write the dataset JSONL.

    Returns the export statistics; raises ExportError when the skip rate
    exceeds the configured bound.
    """
    tokenizer, model = load_encoder(spec.encoder)
    depth = model.config.num_hidden_layers
    if spec.layer > depth:
        raise CorpusError(
            f"layer {spec.layer} out of range for a {depth}-layer encoder")

    records = read_corpus(spec.input_path)
    stats = ExportStats()
    with open(spec.output_path, "w", encoding="utf8") as out:
        for start in range(0, len(records), spec.batch_size):
            batch = records[start:start + spec.batch_size]
            _export_batch(batch, tokenizer, model, spec, out, stats)

    if stats.skip_rate > spec.max_skip_rate:
        raise ExportError(
            f"skipped {len(stats.skipped)} of {stats.exported + len(stats.skipped)} "
            f"records ({stats.skip_rate:.1%} > {spec.max_skip_rate:.1%}); "
            f"first skips: {stats.skipped[:5]}")
    return stats


def _export_batch(batch, tokenizer, model, spec, out, stats) -> None:
    usable = []
    for record in batch:
        n = len(record["tokens"])
        if n == 0 or any(not isinstance(t, str) or not t for t in record["tokens"]):
            stats.skipped.append((record["id"], "empty or non-string tokens"))
        elif not (_span_ok(record["head"], n) and _span_ok(record["tail"], n)):
            stats.skipped.append((record["id"], "span out of bounds"))
        else:
            usable.append(record)
    if not usable:
        return

    encoding = tokenizer([r["tokens"] for r in usable], is_split_into_words=True,
                         padding=True, return_tensors="pt")
    with torch.no_grad():
        output = model(**encoding, output_hidden_states=True)
    hidden = output.hidden_states[spec.layer]  # (batch, positions, k)

    for i, record in enumerate(usable):
        groups = _group_subwords(encoding.word_ids(i))
        n = len(record["tokens"])
        if sorted(groups) != list(range(n)):
            stats.skipped.append((record["id"], "subword alignment failed"))
            logger.warning("skipping %s: subword alignment failed", record["id"])
            continue
        vectors = np.empty((n, hidden.shape[-1]), dtype=np.float32)
        for word in range(n):
            sub = hidden[i, groups[word]].numpy()
            vectors[word] = sub.max(axis=0) if spec.pooling == "max" else sub[0]
        if spec.precision is None:
            rows = [[float(v) for v in row] for row in vectors]
        else:
            rows = [[round(float(v), spec.precision) for v in row] for row in vectors]
        out.write(json.dumps({
            "id": record["id"],
            "tokens": list(record["tokens"]),
            "token_vecs": rows,
            "head": list(record["head"]),
            "tail": list(record["tail"]),
            "label": record["label"],
        }, separators=(",", ":")) + "\n")
        stats.exported += 1
