"""Batch entry points: synth, pretrain, finetune, ablate, inspect.

Every run writes a manifest.json into its output directory first; the
manifest hash (over the identity fields: config hash, seed, preset,
version, threads) is embedded in or recorded for every file the run
produces. Exit codes: 0 success, 1 usage error, 2 runtime/numerical abort.

Heavy imports happen inside main() so that --threads can pin the BLAS
thread pool before numpy loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

_THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad arguments, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _pin_threads(argv: list[str]) -> int:
    threads = 1
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            threads = int(argv[i + 1])
        elif a.startswith("--threads="):
            threads = int(a.split("=", 1)[1])
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    for var in _THREAD_ENV:
        os.environ.setdefault(var, str(threads))
    return threads


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, *, config_hash: str, seed: int, preset: str,
                   threads: int, command: str) -> str:
    """Atomically write the run manifest; returns its identity hash."""
    from . import __version__

    identity = {
        "config_hash": config_hash,
        "seed": seed,
        "preset": preset,
        "version": __version__,
        "threads": threads,
        "command": command,
    }
    h = hashlib.sha256(json.dumps(identity, sort_keys=True).encode()).hexdigest()[:16]
    manifest = {**identity, "manifest_hash": h, "rng": "philox",
                "started_at": _utc_now(), "ended_at": None}
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, out_dir / "manifest.json")
    return h


def finalize_manifest(out_dir: Path) -> None:
    path = out_dir / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["ended_at"] = _utc_now()
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _write_grid(path: Path, grid, manifest_hash: str, header: str) -> None:
    with open(path, "w") as fh:
        fh.write(f"# manifest {manifest_hash}\n# {header}\n")
        for row in grid:
            fh.write(",".join(f"{v:.10g}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from . import data

    if args.n_docs < 1:
        raise UsageError("--n-docs must be >= 1")
    out_dir = Path(args.out)
    h = write_manifest(out_dir, config_hash="-", seed=args.seed, preset=args.kind,
                       threads=args.threads, command="synth")
    train, eval_docs = data.generate_synthetic_corpus(args.kind, args.n_docs, args.seed)
    train_path = out_dir / "train.jsonl"
    eval_path = out_dir / "eval.jsonl"
    data.write_documents(train_path, train)
    data.write_documents(eval_path, eval_docs)
    listing = {
        "manifest": h,
        "files": {
            p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in (train_path, eval_path)
        },
    }
    (out_dir / "outputs.json").write_text(json.dumps(listing, indent=1, sort_keys=True) + "\n")
    finalize_manifest(out_dir)
    print(f"wrote {len(train)} train / {len(eval_docs)} eval documents to {out_dir}")
    return EXIT_OK


def _model_config(args, vocab_size: int):
    from . import model as M

    if args.config:
        cfg = M.config_from_text(Path(args.config).read_text())
        if cfg.vocab_size != vocab_size:
            import dataclasses

            cfg = dataclasses.replace(cfg, vocab_size=vocab_size)
        return cfg
    if args.preset == "desk":
        return M.desk_config(vocab_size)
    if args.preset == "paper":
        return M.paper_config(vocab_size)
    raise UsageError(f"unknown preset {args.preset!r}")


def cmd_pretrain(args) -> int:
    from . import data, model as M, training

    corpus_path = _require_file(args.corpus, "corpus")
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    corpus = data.parse_documents(corpus_path)
    if not corpus:
        raise UsageError(f"corpus {corpus_path} is empty")
    vocab = data.build_vocab(corpus)
    cfg = _model_config(args, vocab.size)
    run_cfg = training.PretrainConfig(
        seed=args.seed, total_steps=args.steps, batch_size=args.batch_size,
        target_lr=args.lr, preset=args.preset,
    )
    out_dir = Path(args.out)
    resume = None
    if args.resume:
        candidates = sorted(out_dir.glob("checkpoint_*.zip"))
        if not candidates:
            raise UsageError(f"--resume given but no checkpoint in {out_dir}")
        resume = candidates[-1]
    h = write_manifest(out_dir, config_hash=M.config_hash(cfg), seed=args.seed,
                       preset=args.preset, threads=args.threads, command="pretrain")
    (out_dir / "model_config.txt").write_text(f"# manifest {h}\n" + M.config_to_text(cfg))
    result = training.run_pretraining(
        corpus, cfg, run_cfg, out_dir=out_dir, vocab=vocab,
        resume_from=resume, manifest_hash=h,
    )
    finalize_manifest(out_dir)
    last = result.metrics[-1] if result.metrics else {}
    print(f"pretraining done: {len(result.metrics)} steps, final loss {last.get('loss', float('nan')):.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    from . import data, training

    train_path = _require_file(args.train, "train corpus")
    eval_path = _require_file(args.eval, "eval corpus")
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    train_docs = data.parse_documents(train_path)
    eval_docs = data.parse_documents(eval_path)
    bundle = training.load_training_checkpoint(ckpt_path)
    run_cfg = training.FinetuneConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr)
    out_dir = Path(args.out)
    h = write_manifest(out_dir, config_hash=bundle.manifest.get("config_hash", "-"),
                       seed=args.seed, preset=args.preset, threads=args.threads,
                       command="finetune")
    import dataclasses

    import numpy as np

    rows = []
    for k in range(args.seeds):
        seed = args.seed + k
        result = training.run_finetuning(
            (train_docs, eval_docs), bundle, dataclasses.replace(run_cfg, seed=seed)
        )
        rows.append((seed, result.final))
        training.save_training_checkpoint(
            out_dir / f"checkpoint_seed{seed}.zip", result.store, bundle.cfg,
            seed, 0, vocab=bundle.vocab,
            extra={"run_manifest": h, "labels": result.labels},
        )
    f1s = [f1 for _, (_, _, f1) in rows]
    report = {
        "manifest": h,
        "per_seed": [
            {"seed": s, "precision": p, "recall": r, "f1": f} for s, (p, r, f) in rows
        ],
        "mean_f1": float(np.mean(f1s)),
    }
    if len(f1s) > 1:
        report["stdev_f1"] = float(np.std(f1s, ddof=1))
    (out_dir / "f1_report.json").write_text(json.dumps(report, indent=1) + "\n")
    with open(out_dir / "f1_report.txt", "w") as fh:
        fh.write(f"# manifest {h}\n")
        for s, (p, r, f) in rows:
            fh.write(f"seed={s} precision={p:.4f} recall={r:.4f} f1={f:.4f}\n")
        if len(f1s) > 1:
            fh.write(f"mean={report['mean_f1']:.4f} stdev={report['stdev_f1']:.4f}\n")
        else:
            fh.write(f"mean={report['mean_f1']:.4f}\n")
    finalize_manifest(out_dir)
    print((out_dir / "f1_report.txt").read_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import data, training

    train_path = _require_file(args.train, "train corpus")
    eval_path = _require_file(args.eval, "eval corpus")
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    train_docs = data.parse_documents(train_path)
    eval_docs = data.parse_documents(eval_path)
    bundle = training.load_training_checkpoint(ckpt_path)
    out_dir = Path(args.out)
    h = write_manifest(out_dir, config_hash=bundle.manifest.get("config_hash", "-"),
                       seed=args.seed, preset=args.preset, threads=args.threads,
                       command="ablate")
    variants = training.VARIANTS_BIAS if args.sweep_bias else training.VARIANTS_2D
    run_cfg = training.FinetuneConfig(epochs=args.epochs, batch_size=args.batch_size,
                                      lr=args.lr, seed=args.seed)
    seeds = tuple(args.seed + k for k in range(args.seeds))
    table = training.run_ablation(
        {args.name: (train_docs, eval_docs)}, bundle, run_cfg,
        variants=variants, seeds=seeds,
    )
    text = table.to_text()
    (out_dir / "ablation.txt").write_text(f"# manifest {h}\n{text}\n")
    (out_dir / "ablation.json").write_text(
        json.dumps({"manifest": h, **table.to_dict()}, indent=1) + "\n"
    )
    finalize_manifest(out_dir)
    print(text)
    return EXIT_OK


def cmd_inspect(args) -> int:
    import numpy as np

    from . import data, geometry, model as M, training

    doc_path = _require_file(args.doc, "document file")
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    docs = data.parse_documents(doc_path)
    if not docs:
        raise UsageError(f"{doc_path} contains no documents")
    if not 0 <= args.index < len(docs):
        raise UsageError(f"--index {args.index} out of range for {len(docs)} documents")
    bundle = training.load_training_checkpoint(ckpt_path)
    cfg = bundle.cfg
    if not 0 <= args.layer < cfg.n_layers:
        raise UsageError(f"--layer {args.layer} out of range for {cfg.n_layers} layers")
    if not 0 <= args.head < cfg.n_heads:
        raise UsageError(f"--head {args.head} out of range for {cfg.n_heads} heads")
    if bundle.vocab is None:
        raise UsageError("checkpoint carries no vocabulary")
    out_dir = Path(args.out)
    h = write_manifest(out_dir, config_hash=bundle.manifest.get("config_hash", "-"),
                       seed=args.seed, preset=args.preset, threads=args.threads,
                       command="inspect")
    enc = data.encode(docs[args.index], bundle.vocab, cfg)
    batch = data.collate([enc])
    collect: dict = {}
    M.encoder_forward(batch, cfg, bundle.store, collect=collect)
    # bin grids come straight from geometry so they exist for every bias mode
    bins = geometry.relative_bins(geometry.centers_of(enc.bboxes), cfg.binning)
    layer = collect[args.layer]
    hd = args.head
    _write_grid(out_dir / "dist_bins.csv", bins.dist, h, "pairwise distance bins")
    _write_grid(out_dir / "angle_bins.csv", bins.angle, h, "pairwise angle bins")
    _write_grid(out_dir / "bias_dist.csv", layer["bias_dist"][0, hd], h,
                f"distance bias, layer {args.layer} head {hd}")
    _write_grid(out_dir / "bias_angle.csv", layer["bias_angle"][0, hd], h,
                f"angle bias, layer {args.layer} head {hd}")
    _write_grid(out_dir / "attention.csv", layer["weights"][0, hd], h,
                f"post-softmax attention, layer {args.layer} head {hd}")
    finalize_manifest(out_dir)
    sums = layer["weights"][0, hd].sum(axis=-1)
    print(f"wrote grids for a {enc.n}x{enc.n} sequence to {out_dir} "
          f"(attention row sums in [{sums.min():.6f}, {sums.max():.6f}])")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="polarenc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--config", default=None, help="model config key=value file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--preset", default="desk", choices=("desk", "paper"))

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--kind", required=True, choices=("forms", "tables"))
    p.add_argument("--n-docs", type=int, required=True)
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="masked-reconstruction pre-training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--resume", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="NER fine-tuning over several seeds")
    p.add_argument("--train", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=5e-5)
    common(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("ablate", help="compare configurations on one dataset")
    p.add_argument("--train", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--sweep-bias", action="store_true",
                   help="compare polar/cartesian/none bias modes instead of 2D-pos")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=5e-5)
    common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("inspect", help="dump bin, bias and attention grids")
    p.add_argument("--doc", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    common(p)
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _pin_threads(argv)
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime/numerical abort
        print(f"abort: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
