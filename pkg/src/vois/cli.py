"""Command-line front end: generate | train | infer | eval | bench |
significance.

Thread pinning happens here: VOIS_THREADS is applied to the BLAS thread
environment variables before numpy gets imported, which is why all
heavy imports live inside main() rather than at module scope. Exit
codes: 0 success, 2 configuration or validation problem, 1 runtime
failure; error details go to stderr as one JSON line.
"""

import argparse
import dataclasses
import json
import os
import sys


def _pin_threads():
    n = os.environ.get("VOIS_THREADS")
    if n is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, n)


def build_parser():
    parser = argparse.ArgumentParser(prog="vois",
                                     description="video object-of-interest segmentation")
    parser.add_argument("--device", default="cpu", help="compute device (only cpu exists)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="build a synthetic dataset")
    p.add_argument("--spec", required=True, help="TOML file with a [generate] table")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--count", type=int, default=None, help="override the sample count")

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="run directory for logs and checkpoints")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--max-steps", type=int, default=None)

    p = sub.add_parser("infer", help="run a checkpoint over a dataset")
    p.add_argument("--checkpoint", required=True, help="epoch checkpoint directory")
    p.add_argument("--data", required=True, help="input dataset directory")
    p.add_argument("--out", required=True, help="hypothesis output directory")
    p.add_argument("--threshold", type=float, default=None,
                   help="confidence cutoff (default from the checkpoint config)")
    p.add_argument("--overlays", action="store_true", help="write color overlay renders")

    p = sub.add_parser("eval", help="score hypotheses against ground truth")
    p.add_argument("--hypotheses", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--k", type=int, nargs="+", default=None, help="recall budgets (default 1 10)")
    p.add_argument("--out", default=None, help="also write the report JSON here")

    p = sub.add_parser("bench", help="measure throughput and parameter count")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", default=None, help="optional weights to load")
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--out", default=None)

    p = sub.add_parser("significance", help="Welch t-test across seed runs")
    p.add_argument("--a", nargs="+", required=True, help="result JSON files, side A")
    p.add_argument("--b", nargs="+", required=True, help="result JSON files, side B")
    p.add_argument("--metric", default="ap")
    p.add_argument("--out", default=None)

    return parser


def _emit(report, out_path):
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text + "\n")


def cmd_generate(args):
    from .config import load_scene_spec
    from .data import generate_dataset, write_dataset
    spec, count = load_scene_spec(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    if args.count is not None:
        count = args.count
    samples = generate_dataset(spec, count)
    write_dataset(samples, args.out)
    print(json.dumps({"samples": len(samples), "out": args.out}))


def cmd_train(args):
    from .config import load_config
    from .train import train
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.optim.seed = args.seed
    summary = train(cfg, args.out, resume=args.resume, max_steps=args.max_steps)
    print(json.dumps(summary))


def _load_checkpoint_model(checkpoint_dir):
    from .config import load_config
    from .train import build_model, load_checkpoint_into
    cfg = load_config(os.path.join(checkpoint_dir, "config.toml"))
    model = build_model(cfg)
    load_checkpoint_into(checkpoint_dir, model)
    return cfg, model


def cmd_infer(args):
    from .data import read_dataset
    from .train import infer
    cfg, model = _load_checkpoint_model(args.checkpoint)
    samples = read_dataset(args.data)
    threshold = cfg.eval.threshold if args.threshold is None else args.threshold
    results = infer(model, samples, threshold, args.out, overlays=args.overlays)
    print(json.dumps({"videos": len(results),
                      "hypotheses": sum(len(r) for r in results),
                      "out": args.out}))


def cmd_eval(args):
    from .train import evaluate_dirs
    k_values = tuple(args.k) if args.k else (1, 10)
    report = evaluate_dirs(args.hypotheses, args.gt, k_values=k_values)
    _emit(report, args.out)


def cmd_bench(args):
    from .config import load_config
    from .train import bench, build_model, load_checkpoint_into
    cfg = load_config(args.config)
    model = build_model(cfg)
    if args.checkpoint:
        load_checkpoint_into(args.checkpoint, model)
    report = bench(model, warmup=args.warmup, iters=args.iters)
    _emit(report, args.out)


def cmd_significance(args):
    from .metrics import MetricsError, significance_test

    def collect(paths):
        values = []
        for path in paths:
            with open(path) as f:
                doc = json.load(f)
            if args.metric not in doc:
                raise MetricsError(f"{path}: no metric {args.metric!r}")
            values.append(float(doc[args.metric]))
        return values

    report = significance_test(collect(args.a), collect(args.b))
    report["metric"] = args.metric
    _emit(report, args.out)


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "significance": cmd_significance,
}


def main(argv=None):
    _pin_threads()
    args = build_parser().parse_args(argv)

    from .backbone import ConfigError
    from .checkpoint import CheckpointError
    from .data import DataError
    from .metrics import MetricsError

    if args.device != "cpu":
        print(json.dumps({"error": "ConfigError",
                          "message": f"unknown device {args.device!r}; only cpu exists"}),
              file=sys.stderr)
        return 2
    try:
        _COMMANDS[args.command](args)
    except (ConfigError, DataError, MetricsError, CheckpointError, FileNotFoundError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 1
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
