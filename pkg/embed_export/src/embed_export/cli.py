"""CLI: `embed-export export --input corpus.jsonl --layer 8 --out dataset.jsonl`.

Exit codes: 0 success, 1 invalid input, 2 export failure (including a skip
rate above the threshold).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .exporter import CorpusError, ExportError, ExportSpec, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Dump per-token encoder embeddings into the JSONL dataset format.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="run the encoder over a corpus")
    p.add_argument("--input", required=True, help="corpus JSONL (tokens + spans + optional labels)")
    p.add_argument("--encoder", default="bert-base-uncased",
                   help="model name or local path (default: bert-base-uncased)")
    p.add_argument("--layer", type=int, default=8,
                   help="hidden layer to dump; 0 is the embedding layer (default: 8)")
    p.add_argument("--out", required=True, help="output dataset JSONL")
    p.add_argument("--pooling", choices=("max", "first"), default="max",
                   help="subword-to-word pooling (default: max)")
    p.add_argument("--precision", type=int, default=None,
                   help="round vector entries to this many decimals")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-skip-rate", type=float, default=0.01)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        spec = ExportSpec(
            input_path=args.input,
            encoder=args.encoder,
            layer=args.layer,
            output_path=args.out,
            pooling=args.pooling,
            precision=args.precision,
            batch_size=args.batch_size,
            max_skip_rate=args.max_skip_rate,
        )
        stats = export(spec)
    except (CorpusError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except ExportError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(f"exported {stats.exported} records to {args.out}"
          + (f" ({len(stats.skipped)} skipped)" if stats.skipped else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
