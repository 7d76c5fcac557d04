"""Command-line surface: data generation, training, evaluation, gradient
checking, and 2-D projection.

Every command writes a manifest listing its inputs and the SHA-256 of each
produced file; rerunning with the same inputs reproduces the outputs
byte-for-byte.  Exit codes: 0 success, 1 validation failure, 2 runtime abort.
Errors go to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import SyntheticSpec, encode_all, generate_synthetic, load_dataset, save_instances
from .errors import ValidationError
from .gradcheck import LOSS_NAMES, run_all
from .clustering import kmeans
from .train import TrainConfig, evaluate, load_state, predict_instances, train

METRIC_KEYS = (
    ("b3", "precision"), ("b3", "recall"), ("b3", "f1"),
    ("v", "homogeneity"), ("v", "completeness"), ("v", "f1"),
    ("ari", None),
)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf8")


def write_manifest(outdir: Path, command: str, config_snapshot, seeds, outputs,
                   timing_sec: float) -> Path:
    canonical = json.dumps(
        {"command": command, "config": config_snapshot, "seeds": seeds, "version": __version__},
        sort_keys=True, separators=(",", ":"))
    manifest = {
        "command": command,
        "config": config_snapshot,
        "seeds": seeds,
        "artifact_version": hashlib.sha256(canonical.encode("utf8")).hexdigest()[:12],
        "outputs": [{"path": p.name, "sha256": _sha256(p)} for p in outputs],
        "timing_sec": timing_sec,
    }
    path = outdir / "manifest.json"
    _dump_json(path, manifest)
    return path


def parse_seeds(text: str) -> list[int]:
    """Accept "7", "1,2,3", or "1..10" (inclusive range)."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ValidationError(f"empty seed range: {text}")
        return list(range(lo, hi + 1))
    return [int(part) for part in text.split(",") if part.strip()]


def pca_2d(points) -> np.ndarray:
    """Top-2 principal components, deterministic sign convention."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValidationError("projection needs at least 3 instances")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    _, vecs = np.linalg.eigh(cov)
    components = vecs[:, ::-1][:, :2]
    for j in range(2):
        lead = np.argmax(np.abs(components[:, j]))
        if components[lead, j] < 0:
            components[:, j] = -components[:, j]
    return centered @ components


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    start = time.perf_counter()
    spec = SyntheticSpec(
        num_predefined=args.num_predefined,
        num_novel=args.num_novel,
        instances_per_class=args.per_class,
        embedding_dim=args.dim,
        cluster_separation=args.separation,
        noise_std=args.noise,
    )
    dataset = generate_synthetic(spec, args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    labeled_path = outdir / "labeled.jsonl"
    unlabeled_path = outdir / "unlabeled.jsonl"
    save_instances(labeled_path, dataset.labeled)
    save_instances(unlabeled_path, dataset.unlabeled)
    config_path = outdir / "config.json"
    _dump_json(config_path, {
        "labeled": "labeled.jsonl",
        "unlabeled": "unlabeled.jsonl",
        "num_novel": spec.num_novel,
        "train": {},
    })
    snapshot = {"spec": spec.__dict__, "seed": args.seed}
    write_manifest(outdir, "gen-data", snapshot, [args.seed],
                   [labeled_path, unlabeled_path, config_path],
                   time.perf_counter() - start)
    print(f"wrote {len(dataset.labeled)} labeled / {len(dataset.unlabeled)} unlabeled "
          f"instances to {outdir}")
    return 0


def _load_run_config(path: Path):
    try:
        obj = json.loads(path.read_text(encoding="utf8"))
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg})")
    for key in ("labeled", "unlabeled", "num_novel"):
        if key not in obj:
            raise ValidationError(f"{path}: missing config key {key!r}")
    base = path.parent
    dataset = load_dataset(base / obj["labeled"], base / obj["unlabeled"], obj["num_novel"])
    config = TrainConfig.from_dict(obj.get("train", {}))
    return dataset, config


def _apply_overrides(config: TrainConfig, args) -> TrainConfig:
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    for flag in args.ablate or ():
        if flag not in ("no_center", "no_reconstruction", "no_ce"):
            raise ValidationError(f"unknown ablation flag: {flag}")
        overrides[flag] = True
    for item in args.set or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    if not overrides:
        return config
    return TrainConfig.from_dict({**config.to_dict(), **{k: v for k, v in overrides.items()}})


def _aggregate(reports: list[dict]) -> dict:
    out = {}
    for family, key in METRIC_KEYS:
        name = family if key is None else f"{family}_{key}"
        values = []
        for report in reports:
            final = report["final_metrics"]
            if final is None:
                continue
            values.append(final[family] if key is None else final[family][key])
        if not values:
            continue
        mean = float(np.mean(values))
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        out[name] = {"mean": mean, "std": std, "formatted": f"{mean:.3f} ± {std:.3f}"}
    return out


def cmd_train(args) -> int:
    start = time.perf_counter()
    dataset, config = _load_run_config(Path(args.config))
    config = _apply_overrides(config, args)
    if args.seeds:
        seeds = parse_seeds(args.seeds)
    elif args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = [config.seed]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    outputs = []
    reports = []
    multi = len(seeds) > 1
    for seed in seeds:
        run_config = config.with_overrides(seed=seed)
        suffix = f"-seed{seed}" if multi else ""
        ckpt_path = outdir / f"checkpoint{suffix}.bin"
        report, _ = train(dataset, run_config, checkpoint_path=ckpt_path)
        report.checkpoint_path = ckpt_path.name  # keep report bytes path-independent
        report_path = outdir / f"report{suffix}.json"
        _dump_json(report_path, report.to_dict())
        outputs += [report_path, ckpt_path]
        reports.append(report.to_dict())
        novel = report.final_metrics
        summary = "no novel test metrics (missing gold labels)" if novel is None else (
            f"B3 F1 {novel['b3']['f1']:.3f}  V F1 {novel['v']['f1']:.3f}  ARI {novel['ari']:.3f}")
        print(f"seed {seed}: {report.epochs_run} epochs"
              f"{' (converged)' if report.converged else ''}  {summary}")

    if multi:
        aggregate = _aggregate(reports)
        agg_path = outdir / "aggregate.json"
        _dump_json(agg_path, aggregate)
        outputs.append(agg_path)
        for name, entry in aggregate.items():
            print(f"{name}: {entry['formatted']}")

    write_manifest(outdir, "train", config.to_dict(), seeds, outputs,
                   time.perf_counter() - start)
    return 0


def cmd_eval(args) -> int:
    start = time.perf_counter()
    state, _ = load_state(Path(args.checkpoint))
    dataset = load_dataset(Path(args.labeled), Path(args.unlabeled), state.num_novel)
    instances = dataset.unlabeled
    report = evaluate(state, instances)
    preds = predict_instances(state, instances)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    metrics_path = outdir / "metrics.json"
    _dump_json(metrics_path, report.to_dict())
    predictions_path = outdir / "predictions.json"
    _dump_json(predictions_path, [
        {"id": inst.id, "gold": inst.label, "pred": int(pred)}
        for inst, pred in zip(instances, preds)
    ])
    write_manifest(outdir, "eval", {"checkpoint": str(args.checkpoint)}, [],
                   [metrics_path, predictions_path], time.perf_counter() - start)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    results = run_all(args.seed, args.configs)
    failed = False
    for name in LOSS_NAMES:
        status = "ok" if results[name] < args.tolerance else "FAIL"
        failed = failed or status == "FAIL"
        print(f"{name:15s} max relative error {results[name]:.3e}  {status}")
    return 1 if failed else 0


def cmd_project(args) -> int:
    start = time.perf_counter()
    state, _ = load_state(Path(args.checkpoint))
    dataset = load_dataset(Path(args.labeled), Path(args.unlabeled), state.num_novel)
    instances = dataset.unlabeled
    vectors = encode_all(instances, state.adapter)
    reps = state.ae.transform(vectors)
    coords = pca_2d(reps)
    assignment = kmeans(reps, state.num_novel, args.seed,
                        order_keys=[inst.id for inst in instances])
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y", "gold_label", "pseudo_label"])
        for inst, (x, y), pseudo in zip(instances, coords, assignment.labels):
            writer.writerow([inst.id, repr(float(x)), repr(float(y)),
                             "" if inst.label is None else inst.label, int(pseudo)])
    write_manifest(out_path.parent, "project",
                   {"checkpoint": str(args.checkpoint), "seed": args.seed}, [args.seed],
                   [out_path], time.perf_counter() - start)
    print(f"wrote {coords.shape[0]} projected points to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relcluster",
        description="Discover novel relation clusters from entity-pair embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--num-predefined", type=int, required=True)
    p.add_argument("--num-novel", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the full training loop")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", default=None, help='e.g. "1..5" or "1,2,3"')
    p.add_argument("--mode", choices=("standard", "incremental"), default=None)
    p.add_argument("--ablate", action="append", default=None,
                   help="no_center | no_reconstruction | no_ce (repeatable)")
    p.add_argument("--set", action="append", default=None, metavar="KEY=VALUE",
                   help="override any train config field")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's unlabeled split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of all training losses")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("project", help="write 2-D principal-component coordinates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, default=0, help="seed for the pseudo-label clustering")
    p.set_defaults(func=cmd_project)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
