"""Command-line entry point wiring all modules together.

Subcommands: prepare, synth, featurize, train, eval, eval-varlen,
eval-crossdomain, export-embeddings, version.  Every run echoes its full
effective configuration plus SHA-256 hashes of the produced artifacts into a
``run.json`` for reproducibility.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 configuration
error.  Failures print a single machine-parsable ``error: <category>: ...``
line on stderr.

Heavy imports happen inside the handlers so ``--threads`` can cap the BLAS
pool before numpy loads; ``UATR_THREADS`` provides the default.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

__version__ = "0.1.0"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_record(out_dir: Path, command: str, config: dict,
                      artifacts: list[Path], argv: list[str],
                      threads: int) -> None:
    from .kernels import backend
    record = {
        "command": command,
        "version": __version__,
        "argv": argv,
        "threads": threads,
        "kernel_backend": backend(),
        "config": config,
        "artifacts": {p.name: _sha256(p) for p in artifacts if p.exists()},
    }
    (out_dir / "run.json").write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n")


def _load_json_config(path: str | None) -> dict:
    if path is None:
        return {}
    from .errors import ConfigError
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        from .errors import ConfigError
        raise ConfigError(f"need three comma-separated ratios, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _category_map(args):
    from .ingest import CategoryMap
    if args.category_map:
        return CategoryMap.from_file(args.category_map)
    if args.dataset in ("deepship", "shipsear"):
        return CategoryMap.builtin(args.dataset)
    from .errors import ConfigError
    raise ConfigError("--dataset custom requires --category-map")


def cmd_prepare(args, argv) -> int:
    from . import ingest
    if args.dataset == "custom" and args.category_map is None:
        # fall back to identity mapping over discovered labels
        root = Path(args.root)
        labels = sorted({raw for _, raw in ingest._discover_files(root)})
        cmap = ingest.CategoryMap.identity(labels)
    else:
        cmap = _category_map(args)
    manifest = ingest.build_manifest(
        args.root, cmap, clip_seconds=args.clip_seconds,
        ratios=_parse_ratios(args.ratios), seed=args.seed,
        sample_rate=args.rate, dataset=args.dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ingest.save_manifest(manifest, out)
    artifacts = [out]
    if args.csv:
        ingest.save_manifest_csv(manifest, args.csv)
        artifacts.append(Path(args.csv))
    counts = manifest.counts()
    for name, row in counts.items():
        print(f"{name}: train {row['train']}  validation {row['validation']}  "
              f"test {row['test']}  total {row['total']}")
    print(f"wrote {out} ({len(manifest.records)} clips, "
          f"{len(manifest.files)} files)")
    _write_run_record(out.parent, "prepare", {
        "root": str(args.root), "dataset": args.dataset,
        "clip_seconds": args.clip_seconds, "rate": args.rate,
        "ratios": _parse_ratios(args.ratios), "seed": args.seed,
        "category_map": args.category_map,
    }, artifacts, argv, args.threads)
    return 0


def cmd_synth(args, argv) -> int:
    from . import synth
    if args.spec:
        spec = synth.SynthSpec.from_json(_load_json_config(args.spec))
    elif args.preset:
        spec = synth.desk_spec(args.preset, seed=args.seed)
    else:
        from .errors import ConfigError
        raise ConfigError("synth needs --spec or --preset")
    if args.domain and args.domain != spec.domain:
        from .errors import ConfigError
        raise ConfigError(
            f"--domain {args.domain} contradicts spec domain {spec.domain}")
    out = Path(args.out)
    summary = synth.generate_corpus(spec, out)
    print(f"wrote {summary['files']} clips of {summary['clip_seconds']} s "
          f"to {out} ({', '.join(summary['categories'])})")
    _write_run_record(out, "synth", spec.to_json(),
                      [out / "labels.json", out / "synth_spec.json"],
                      argv, args.threads)
    return 0


def cmd_featurize(args, argv) -> int:
    from .dsp import FeatureCache, MelConfig
    from .ingest import ClipLoader, load_manifest
    from .pipeline import clip_features
    manifest = load_manifest(args.manifest)
    config = MelConfig.from_json(_load_json_config(args.config)) \
        if args.config else MelConfig()
    cache = FeatureCache(args.cache_dir, config)
    loader = ClipLoader(manifest, args.root)
    feats = clip_features(manifest.records, loader, config, cache,
                          args.threads)
    print(f"cached {len(feats)} feature files under {args.cache_dir} "
          f"(config hash {config.hash()})")
    _write_run_record(Path(args.cache_dir), "featurize", {
        "manifest": str(args.manifest), "feature_config": config.to_json(),
        "config_hash": config.hash(),
    }, [], argv, args.threads)
    return 0


def _effective_train_config(args):
    from .errors import ConfigError
    from .optim import TRAIN_PROFILES, TrainConfig
    base: dict = {}
    if args.train_profile:
        if args.train_profile not in TRAIN_PROFILES:
            raise ConfigError(f"unknown train profile {args.train_profile!r}")
        base.update(TRAIN_PROFILES[args.train_profile])
    base.update(_load_json_config(args.train_config))
    overrides = {
        "seed": args.seed, "mode": args.mode, "init_checkpoint": args.init,
        "epochs": args.epochs, "batch_size": args.batch_size,
        "base_lr": args.lr, "warmup_steps": args.warmup_steps,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**base)


def cmd_train(args, argv) -> int:
    from .checkpoint import save_checkpoint
    from .dsp import FeatureCache, MelConfig
    from .ingest import load_manifest
    from .nn import EncoderConfig
    from .optim import save_optimizer_state, train
    manifest = load_manifest(args.manifest)
    mel_config = MelConfig.from_json(_load_json_config(args.features)) \
        if args.features else MelConfig()
    encoder_json = _load_json_config(args.encoder)
    encoder_json["input_dim"] = mel_config.stacked_dim
    encoder_json["num_categories"] = len(manifest.categories)
    encoder_config = EncoderConfig.from_json(encoder_json)
    train_config = _effective_train_config(args)

    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    cache = FeatureCache(args.cache_dir, mel_config) if args.cache_dir else None
    ckpt, log, state = train(manifest, mel_config, encoder_config,
                             train_config, cache=cache, threads=args.threads,
                             root=args.root, return_state=True)
    ckpt_path = run_dir / "checkpoint.bin"
    log_path = run_dir / "train_log.jsonl"
    state_path = run_dir / "optimizer_state.bin"
    save_checkpoint(ckpt, ckpt_path)
    log.write_jsonl(log_path)
    save_optimizer_state(state, state_path)
    print(f"best epoch {log.best_epoch}: validation accuracy "
          f"{log.best_val_accuracy:.2f}")
    print(f"wrote {ckpt_path}")
    _write_run_record(run_dir, "train", {
        "manifest": str(args.manifest),
        "feature_config": mel_config.to_json(),
        "encoder_config": encoder_config.to_json(),
        "train_config": train_config.to_json(),
    }, [ckpt_path, log_path, state_path], argv, args.threads)
    return 0


def cmd_eval(args, argv) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import eval_split
    from .ingest import load_manifest
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    report = eval_split(ckpt, manifest, split=args.split,
                        threads=args.threads, root=args.root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    _write_run_record(out, "eval", {
        "checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
        "split": args.split,
    }, [out / "report.json", out / "report.txt"], argv, args.threads)
    return 0


def cmd_eval_varlen(args, argv) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import eval_varlen
    from .ingest import load_manifest
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    lengths = [float(x) for x in args.lengths.split(",")]
    result = eval_varlen(ckpt, manifest, lengths, split=args.split,
                         threads=args.threads, root=args.root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "varlen.json").write_text(
        json.dumps(result, indent=2, sort_keys=True) + "\n")
    with open(out / "varlen.csv", "w") as fh:
        fh.write("length,accuracy\n")
        for row in result["rows"]:
            acc = "" if row["accuracy"] is None else f"{row['accuracy']:.4f}"
            fh.write(f"{row['length']},{acc}\n")
    for row in result["rows"]:
        acc = "absent" if row["accuracy"] is None else f"{row['accuracy']:.2f}"
        print(f"{row['length']} s: {acc} ({row['clips']} clips)")
    for warning in result["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    _write_run_record(out, "eval-varlen", {
        "checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
        "split": args.split, "lengths": lengths,
    }, [out / "varlen.json", out / "varlen.csv"], argv, args.threads)
    return 0


_AGGREGATES = {"mean_prob": "per_file_mean_prob",
               "majority": "per_file_majority",
               "none": "per_clip"}


def cmd_eval_crossdomain(args, argv) -> int:
    from .checkpoint import load_checkpoint
    from .errors import ConfigError
    from .evaluation import DomainMapping, eval_crossdomain
    from .ingest import load_manifest
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    pairs = {}
    for item in args.map.split(","):
        if "=" not in item:
            raise ConfigError(f"--map entries look like TARGET=SOURCE, got {item!r}")
        target, source = item.split("=", 1)
        pairs[target.strip()] = source.strip()
    clip_report, file_report = eval_crossdomain(
        ckpt, manifest, DomainMapping(pairs),
        aggregation=_AGGREGATES[args.aggregate], split=args.split,
        threads=args.threads, root=args.root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"clip_level": clip_report.to_json(),
           "file_level": file_report.to_json() if file_report else None}
    (out / "crossdomain.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"clip-level accuracy {clip_report.accuracy:.2f} "
          f"({clip_report.metadata['clips']} clips)")
    if file_report:
        print(f"file-level accuracy {file_report.accuracy:.2f} "
              f"({file_report.metadata['files']} files, {args.aggregate})")
    _write_run_record(out, "eval-crossdomain", {
        "checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
        "split": args.split, "map": pairs, "aggregate": args.aggregate,
    }, [out / "crossdomain.json"], argv, args.threads)
    return 0


def cmd_export_embeddings(args, argv) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import export_embeddings
    from .ingest import load_manifest
    ckpt = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = export_embeddings(ckpt, manifest, args.split, out,
                             threads=args.threads, root=args.root)
    print(f"wrote {rows} embeddings to {out}")
    _write_run_record(out.parent, "export-embeddings", {
        "checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
        "split": args.split,
    }, [out], argv, args.threads)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uatr",
        description="Ship-noise classification: data preparation, training, "
                    "and evaluation protocols.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("UATR_THREADS", "1")),
                       help="worker cap; 1 means fully serial execution")
        p.add_argument("--root", default=None,
                       help="override the audio root recorded in the manifest")

    p = sub.add_parser("prepare", help="scan an audio tree into a split manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--dataset", choices=["deepship", "shipsear", "custom"],
                   default="custom")
    p.add_argument("--category-map", default=None,
                   help="JSON category map overriding the built-in one")
    p.add_argument("--clip-seconds", type=float, default=5.0)
    p.add_argument("--rate", type=int, default=16000)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None, help="optional CSV mirror")
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("UATR_THREADS", "1")))
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--domain", choices=["source", "target"], default=None)
    p.add_argument("--spec", default=None, help="SynthSpec JSON file")
    p.add_argument("--preset", choices=["source", "target_train", "target_test"],
                   default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("UATR_THREADS", "1")))
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("featurize", help="precompute a feature cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="MelConfig JSON file")
    p.add_argument("--cache-dir", required=True)
    common(p)
    p.set_defaults(fn=cmd_featurize)

    p = sub.add_parser("train", help="fit a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", default=None, help="MelConfig JSON file")
    p.add_argument("--encoder", default=None, help="EncoderConfig JSON file")
    p.add_argument("--train-profile", default=None,
                   help="named profile: deepship, shipsear, desk")
    p.add_argument("--train-config", default=None, help="TrainConfig JSON file")
    p.add_argument("--mode", choices=["full_finetune", "head_only", "from_scratch"],
                   default=None)
    p.add_argument("--init", default=None, help="initial checkpoint")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--out", required=True, help="run directory")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="in-domain metrics on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("eval-varlen", help="zero-shot variable-length sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--lengths", default="1,2,3,4,5,10,20")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_eval_varlen)

    p = sub.add_parser("eval-crossdomain", help="zero-shot cross-dataset scoring")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="target-dataset manifest")
    p.add_argument("--map", required=True,
                   help="comma-separated TARGET=SOURCE category pairs")
    p.add_argument("--aggregate", choices=sorted(_AGGREGATES), default="mean_prob")
    p.add_argument("--split", default="all")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_eval_crossdomain)

    p = sub.add_parser("export-embeddings", help="dump pooled embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="output CSV path")
    common(p)
    p.set_defaults(fn=cmd_export_embeddings)

    p = sub.add_parser("version", help="print the package version")
    p.set_defaults(fn=None)

    return parser


def dispatch(argv: list[str]) -> int:
    """Run one CLI invocation; returns the process exit code."""
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    if args.command == "version":
        print(f"uatr {__version__}")
        return 0

    if args.threads == 1:
        # cap BLAS pools before numpy loads so execution is fully serial
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, "1")

    from .errors import ConfigError, UatrError
    try:
        return args.fn(args, argv)
    except ConfigError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 3
    except UatrError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
