import json
import os

import pytest
import torch

os.environ.setdefault("OMP_NUM_THREADS", "1")

VOCAB = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "the", "a", "cat", "dog", "bird", "fox", "mat", "tree", "sky", "river",
    "sat", "ran", "flew", "swam", "jumped", "on", "under", "over", "near",
    "big", "small", "red", "blue", "un", "##happy", "##ness", "##ly",
    "quick", "lazy", "old", "new",
]


@pytest.fixture(scope="session")
def tiny_encoder_dir(tmp_path_factory):
    """A small randomly initialized wordpiece encoder saved as a local model."""
    from tokenizers import Tokenizer, models, normalizers, pre_tokenizers, processors
    from transformers import BertConfig, BertModel, BertTokenizerFast

    path = tmp_path_factory.mktemp("tiny-encoder")
    backend = Tokenizer(models.WordPiece({t: i for i, t in enumerate(VOCAB)},
                                         unk_token="[UNK]"))
    backend.normalizer = normalizers.BertNormalizer(lowercase=True)
    backend.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
    backend.post_processor = processors.BertProcessing(
        ("[SEP]", VOCAB.index("[SEP]")), ("[CLS]", VOCAB.index("[CLS]")))
    tokenizer = BertTokenizerFast(tokenizer_object=backend, unk_token="[UNK]",
                                  pad_token="[PAD]", cls_token="[CLS]",
                                  sep_token="[SEP]", mask_token="[MASK]")
    config = BertConfig(vocab_size=len(VOCAB), hidden_size=32, num_hidden_layers=4,
                        num_attention_heads=2, intermediate_size=64,
                        max_position_embeddings=64)
    torch.manual_seed(12345)
    model = BertModel(config)
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    return str(path)


def make_corpus_records(n, label_of, start_relation=0, num_relations=3, offset=0):
    """Deterministic sentences over the tiny vocab, one span pair each."""
    nouns = ["cat", "dog", "bird", "fox", "river"]
    verbs = ["sat", "ran", "flew", "swam", "jumped"]
    places = ["mat", "tree", "sky", "unhappyness"]  # multi-subword word included
    records = []
    for i in range(n):
        rel = start_relation + (i % num_relations)
        noun = nouns[(i + rel) % len(nouns)]
        verb = verbs[(i * 3 + rel) % len(verbs)]
        place = places[(i * 7 + rel) % len(places)]
        tokens = ["the", noun, verb, "on", "the", place]
        records.append({
            "id": f"sent-{offset + i:04d}",
            "tokens": tokens,
            "head": [1, 2],
            "tail": [4, 6],
            "label": rel if label_of else None,
        })
    return records


def write_jsonl(path, records):
    with open(path, "w", encoding="utf8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
