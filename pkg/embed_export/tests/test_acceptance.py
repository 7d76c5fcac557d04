"""Acceptance: a 100-sentence corpus exports cleanly, loads through the
downstream dataset loader with zero validation errors, and supports one
training epoch without dimension faults."""

from conftest import make_corpus_records, write_jsonl
from embed_export.exporter import ExportSpec, export


class TestA8ExportRoundTrip:
    def test_export_load_train_one_epoch(self, tiny_encoder_dir, tmp_path):
        labeled = make_corpus_records(60, label_of=True, start_relation=0,
                                      num_relations=3)
        novel = make_corpus_records(40, label_of=True, start_relation=3,
                                    num_relations=2, offset=60)
        write_jsonl(tmp_path / "labeled-corpus.jsonl", labeled)
        write_jsonl(tmp_path / "novel-corpus.jsonl", novel)

        stats_l = export(ExportSpec(input_path=str(tmp_path / "labeled-corpus.jsonl"),
                                    encoder=tiny_encoder_dir, layer=2,
                                    output_path=str(tmp_path / "labeled.jsonl")))
        stats_u = export(ExportSpec(input_path=str(tmp_path / "novel-corpus.jsonl"),
                                    encoder=tiny_encoder_dir, layer=2,
                                    output_path=str(tmp_path / "unlabeled.jsonl")))
        assert stats_l.exported == 60 and not stats_l.skipped
        assert stats_u.exported == 40 and not stats_u.skipped

        from relcluster import TrainConfig, load_dataset, train

        dataset = load_dataset(tmp_path / "labeled.jsonl", tmp_path / "unlabeled.jsonl",
                               num_novel=2)
        assert dataset.embedding_dim == 32
        assert len(dataset.labeled) == 60 and len(dataset.unlabeled) == 40

        config = TrainConfig(batch_size=16, pretrain_epochs=1, max_outer_epochs=1,
                             hidden=(32, 32), bottleneck=16, seed=0,
                             convergence_threshold=0.0)
        report, _ = train(dataset, config)
        assert report.epochs_run == 1
        assert report.final_metrics is not None
        print("\nA8 PASS: 100-sentence corpus exported, loaded with zero validation "
              "errors, and trained one epoch")
