"""Command-line entry point: ``gdanet <command> [flags]``.

Exit codes: 0 success, 1 check failed, 2 I/O or parse error, 3 bad
configuration or arguments, 4 numeric failure, 5 training divergence.
Every command writes a ``run.json`` manifest next to its outputs.
"""

import argparse
import json
import os
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import scipy
import sklearn
from threadpoolctl import threadpool_limits

from . import __version__
from . import tensor as T
from .errors import ConfigError, GDAError
from .gdm import disentangle_cloud, spectral_check, SPECTRAL_LIMIT
from .graph import GraphConfig, build_adjacency
from .model import (
    ModelConfig,
    classify_logits,
    count_params,
    init_model,
    load_checkpoint,
    save_checkpoint,
    segment_logits,
)
from .pointcloud import (
    SHAPE_FAMILIES,
    PointCloud,
    SyntheticSpec,
    export_ply,
    generate_synthetic,
    load_cloud,
    normalize_unit_sphere,
)
from .sgcam import export_attention
from .training import (
    AblationToggles,
    Dataset,
    TrainConfig,
    evaluate,
    make_cylinder_segmentation,
    make_toy_classification,
    run_ablation,
    run_robustness,
    train,
)

REFERENCE_PARAMS = 0.93e6
SPECTRAL_TOL = 1e-8
ABLATION_ROWS = {
    "mlp": AblationToggles(False, False, False, False),
    "knn": AblationToggles(True, False, False, False),
    "knn+sharp": AblationToggles(True, False, True, False),
    "knn+gentle": AblationToggles(True, False, False, True),
    "full": AblationToggles(True, False, True, True),
    "knn+self-attention": AblationToggles(True, True, False, False),
    "full+voting": AblationToggles(True, False, True, True, use_voting=True),
}

EXIT_IO = 2
EXIT_CONFIG = 3


class _Parser(argparse.ArgumentParser):
    """Argument errors exit with the configuration code instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(args, out, **extra):
    manifest = {
        "command": args.command,
        "argv": list(args.argv),
        "args": {k: v for k, v in vars(args).items() if k not in ("func", "argv")},
        "seed": args.seed,
        "versions": {"gdanet": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "scikit-learn": sklearn.__version__},
    }
    manifest.update(extra)
    Path(out, "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _model_config(args, **overrides):
    fields = dict(
        task=args.task, k_local=args.k_local, k_graph=args.k_graph, m=args.m, use_knn_local=not args.no_knn,
        use_sharp=not (args.no_sharp or args.self_attention), use_gentle=not (args.no_gentle or args.self_attention),
        use_self_attention=args.self_attention, dynamic_adjacency=not args.static_graph,
        batch_norm=args.batch_norm, seed=args.seed, dtype=args.dtype,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def _train_config(args):
    return TrainConfig(optimizer=args.optimizer, lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       lr_schedule=args.schedule, seed=args.seed, deterministic=args.deterministic,
                       augment=not args.no_augment)


def _load_split(data_dir, name):
    path = Path(data_dir, f"{name}.npz")
    return Dataset.load(path)


def _datasets(args):
    if args.data:
        return _load_split(args.data, "train"), _load_split(args.data, "test")
    if args.task == "segmentation":
        return make_cylinder_segmentation(seed=args.seed)
    return make_toy_classification(seed=args.seed)


def _out_features(train_set):
    labels = np.asarray(train_set.labels)
    return int(labels.max()) + 1


def _with_outputs(cfg, n_out):
    if cfg.task == "classification":
        return replace(cfg, n_classes=n_out)
    return replace(cfg, part_counts=(n_out,))


# ----------------------------------------------------------------- commands


def cmd_disentangle(args):
    out = _out_dir(args)
    cloud = load_cloud(args.input, args.format, n_samples=args.n_samples, seed=args.seed)
    m = args.m if args.m is not None else cloud.n_points // 4
    cfg = GraphConfig(k_graph=args.k_graph)
    split = disentangle_cloud(cloud.xyz, m, cfg)
    prefix = args.out_prefix if args.out_prefix is not None else str(out) + os.sep
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    export_ply(cloud.subset(split.sharp_idx), f"{prefix}sharp.ply", scalars=split.scores[split.sharp_idx])
    export_ply(cloud.subset(split.gentle_idx), f"{prefix}gentle.ply", scalars=split.scores[split.gentle_idx])
    export_ply(cloud, f"{prefix}scores.ply", scalars=split.scores)
    split.write_json(f"{prefix}split.json")
    write_manifest(args, out, graph_config=asdict(cfg), m=m)
    print(f"N={cloud.n_points} m={m} sharp mean={split.scores[split.sharp_idx].mean():.6g} "
          f"gentle mean={split.scores[split.gentle_idx].mean():.6g}")
    return 0


def cmd_spectral_check(args):
    if args.n > SPECTRAL_LIMIT:
        raise ConfigError(f"spectral check limited to N <= {SPECTRAL_LIMIT}, got {args.n}")
    out = _out_dir(args)
    seeds = np.random.SeedSequence(args.seed).generate_state(args.trials)
    ok = True
    results = []
    for i, s in enumerate(seeds):
        pts = np.random.default_rng(int(s)).normal(size=(args.n, 3))
        k = min(args.k_graph, args.n - 1)
        report = spectral_check(build_adjacency(pts, GraphConfig(k_graph=k)))
        passed = report.max_response_error <= SPECTRAL_TOL and report.within_unit_interval(SPECTRAL_TOL)
        ok &= passed
        results.append({"trial": i, "max_response_error": report.max_response_error, "pass": passed})
        print(f"trial {i}: max_response_error={report.max_response_error:.3e} {'PASS' if passed else 'FAIL'}")
    write_manifest(args, out, results=results)
    return 0 if ok else 1


def cmd_gen_data(args):
    out = _out_dir(args)
    if args.kind == "cloud":
        cloud = generate_synthetic(SyntheticSpec(args.shape, args.n_points, args.seed, part_labels=True))
        extra = {k: v.astype(float) for k, v in cloud.metadata.items() if np.ndim(v) == 1}
        extra["label"] = cloud.point_labels.astype(float)
        export_ply(cloud, out / f"{args.shape}.ply", extra=extra)
        print(f"wrote {out / f'{args.shape}.ply'}")
    else:
        maker = make_toy_classification if args.kind == "classification" else make_cylinder_segmentation
        tr, te = maker(n_train=args.n_train, n_test=args.n_test, n_points=args.n_points, seed=args.seed)
        tr.save(out / "train.npz")
        te.save(out / "test.npz")
        print(f"wrote {len(tr)} train and {len(te)} test clouds to {out}")
    write_manifest(args, out)
    return 0


def cmd_train(args):
    out = _out_dir(args)
    train_set, test_set = _datasets(args)
    cfg = _with_outputs(_model_config(args), _out_features(train_set))
    tcfg = _train_config(args)
    params = init_model(cfg)
    write_manifest(args, out, model_config=asdict(cfg), train_config=asdict(tcfg), status="running")
    result = train(params, cfg, train_set, tcfg, log_path=out / "log.csv",
                   eval_set=test_set if args.target_accuracy is not None else None,
                   target_accuracy=args.target_accuracy,
                   epoch_callback=lambda row: print("epoch " + " ".join(f"{v:.4f}" for v in row[1:])))
    save_checkpoint(params, cfg, out / "checkpoint.gdan")
    report = evaluate(params, cfg, test_set)
    Path(out, "eval.json").write_text(json.dumps(report.summary(), indent=2) + "\n")
    write_manifest(args, out, model_config=asdict(cfg), train_config=asdict(tcfg), status="done",
                   epochs_run=result.stopped_epoch, test=report.summary())
    print(f"test accuracy {report.overall_accuracy:.4f}")
    return 0


def cmd_eval(args):
    out = _out_dir(args)
    params, cfg = load_checkpoint(args.checkpoint)
    data = Dataset.load(args.data)
    report = evaluate(params, cfg, data, votes=args.votes, scale_range=tuple(args.scale), seed=args.seed)
    Path(out, "eval.json").write_text(json.dumps(report.summary(), indent=2) + "\n")
    write_manifest(args, out, model_config=asdict(cfg), result=report.summary())
    print(f"accuracy {report.overall_accuracy:.6f}")
    if report.instance_miou is not None:
        print(f"instance mIoU {report.instance_miou:.6f} class mIoU {report.class_miou:.6f}")
    return 0


def cmd_ablate(args):
    out = _out_dir(args)
    train_set, test_set = _datasets(args)
    unknown = [r for r in args.rows if r not in ABLATION_ROWS]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}; choose from {sorted(ABLATION_ROWS)}")
    base = _with_outputs(_model_config(args), _out_features(train_set))
    tcfg = _train_config(args)
    rows = run_ablation(train_set, test_set, [ABLATION_ROWS[r] for r in args.rows], base, tcfg, seeds=args.seeds,
                        csv_path=out / "ablation.csv", votes=args.votes)
    for name, row in zip(args.rows, rows):
        print(f"{name:20s} mean accuracy {row.mean_accuracy:.4f}")
    write_manifest(args, out, model_config=asdict(base), train_config=asdict(tcfg))
    return 0


def cmd_robustness(args):
    out = _out_dir(args)
    params, cfg = load_checkpoint(args.checkpoint)
    data = Dataset.load(args.data)
    curve = run_robustness(params, cfg, data, args.mode, args.grid, seed=args.seed,
                           csv_path=out / "robustness.csv", rotation=args.rotation, noise=args.noise)
    for g, acc in curve:
        print(f"{g:g}\t{acc:.4f}")
    write_manifest(args, out, model_config=asdict(cfg))
    return 0


def cmd_attention_export(args):
    out = _out_dir(args)
    params, cfg = load_checkpoint(args.checkpoint)
    cloud = load_cloud(args.input, args.format, n_samples=args.n_samples, seed=args.seed)
    cloud = normalize_unit_sphere(cloud)
    x = cloud.points[None, :, : cfg.in_channels]
    trace = []
    with T.no_grad():
        if cfg.task == "classification":
            classify_logits(params, cfg, x, trace=trace)
        else:
            segment_logits(params, cfg, x, 0, trace=trace)
    if not trace:
        raise ConfigError("this model has no attention blocks")
    if not 1 <= args.block <= len(trace):
        raise ConfigError(f"block must lie in 1..{len(trace)}")
    entry = trace[args.block - 1]
    split, record = entry["split"], entry["attention"]
    rec = type(record)(*(None if w is None else T.Tensor(w.data[0]) for w in (record.w_sharp, record.w_gentle)))
    w_sharp, w_gentle = export_attention(rec, args.anchor)
    payload = {"anchor": args.anchor, "block": args.block}
    for name, w, idx in (("sharp", w_sharp, None if split is None else split.sharp_idx[0]),
                         ("gentle", w_gentle, None if split is None else split.gentle_idx[0])):
        if w is None:
            continue
        idx = np.arange(cloud.n_points) if idx is None else idx
        payload[name] = {"index": idx.tolist(), "weight": w.tolist()}
        export_ply(PointCloud(cloud.xyz[idx]), out / f"attention_{name}.ply", scalars=w)
    Path(out, "attention.json").write_text(json.dumps(payload) + "\n")
    write_manifest(args, out, model_config=asdict(cfg))
    print(f"wrote attention rows for anchor {args.anchor} to {out}")
    return 0


def cmd_params(args):
    out = _out_dir(args)
    cfg = _model_config(args, n_classes=args.n_classes)
    n = count_params(init_model(cfg))
    print(n)
    print(f"reference: {REFERENCE_PARAMS / 1e6:.2f} M")
    write_manifest(args, out, model_config=asdict(cfg), n_params=n)
    return 0


# ------------------------------------------------------------------- parser


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap (env GDA_THREADS)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, ordered execution")


def _model_flags(p):
    p.add_argument("--task", choices=("classification", "segmentation"), default="classification")
    p.add_argument("--k-local", type=int, default=20)
    p.add_argument("--k-graph", type=int, default=20)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--no-knn", action="store_true")
    p.add_argument("--no-sharp", action="store_true")
    p.add_argument("--no-gentle", action="store_true")
    p.add_argument("--self-attention", action="store_true")
    p.add_argument("--static-graph", action="store_true", help="build block graphs on xyz instead of features")
    p.add_argument("--batch-norm", action="store_true")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")


def _train_flags(p):
    p.add_argument("--data", default=None, help="directory with train.npz and test.npz (default: toy set)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd_momentum"), default="adam")
    p.add_argument("--schedule", choices=("constant", "cosine"), default="cosine")
    p.add_argument("--no-augment", action="store_true")


def _cloud_flags(p):
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("xyz", "ply", "off"), default=None)
    p.add_argument("--n-samples", type=int, default=1024, help="surface samples for OFF meshes")


def build_parser():
    parser = _Parser(prog="gdanet", description="Geometry-disentangled point cloud analysis.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("disentangle", help="split a cloud into sharp and gentle components")
    _cloud_flags(p)
    p.add_argument("--k-graph", type=int, default=20)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--space", choices=("coords",), default="coords")
    p.add_argument("--out-prefix", default=None)
    p.set_defaults(func=cmd_disentangle)

    p = sub.add_parser("spectral-check", help="check the high-pass frequency response on random graphs")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--k-graph", type=int, default=8)
    p.add_argument("--trials", type=int, default=10)
    p.set_defaults(func=cmd_spectral_check)

    p = sub.add_parser("gen-data", help="write synthetic datasets or a single synthetic cloud")
    p.add_argument("--kind", choices=("classification", "segmentation", "cloud"), default="classification")
    p.add_argument("--shape", choices=SHAPE_FAMILIES, default="plane-with-crease")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--n-points", type=int, default=512)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--target-accuracy", type=float, default=None, help="stop once test accuracy reaches this")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint, optionally with scale voting")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset .npz")
    p.add_argument("--votes", type=int, default=1)
    p.add_argument("--scale", type=float, nargs=2, default=(1.0, 1.0), metavar=("LO", "HI"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train one model per toggle row and tabulate accuracy")
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--rows", nargs="+", default=["knn", "full"])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--votes", type=int, default=10)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("robustness", help="accuracy under point dropout, rotation or noise")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset .npz")
    p.add_argument("--mode", choices=("dropout", "rotate", "noise"), required=True)
    p.add_argument("--grid", type=float, nargs="+", required=True)
    p.add_argument("--rotation", choices=("z", "so3"), default="z")
    p.add_argument("--noise", choices=("jitter", "clutter"), default="jitter")
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("attention-export", help="dump one anchor's attention rows over both components")
    p.add_argument("--checkpoint", required=True)
    _cloud_flags(p)
    p.add_argument("--anchor", type=int, default=0)
    p.add_argument("--block", type=int, default=1)
    p.set_defaults(func=cmd_attention_export)

    p = sub.add_parser("params", help="count trainable parameters of a configuration")
    _model_flags(p)
    p.add_argument("--n-classes", type=int, default=40)
    p.set_defaults(func=cmd_params)

    for action in sub.choices.values():
        _common(action)
    return parser


def _thread_cap(args):
    if args.deterministic:
        return 1
    if args.threads is not None:
        return args.threads
    env = os.environ.get("GDA_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"GDA_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        cap = _thread_cap(args)
        if cap is not None and cap < 1:
            raise ConfigError(f"--threads must be >= 1, got {cap}")
        with threadpool_limits(limits=cap):
            return args.func(args)
    except GDAError as exc:
        print(f"gdanet {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"gdanet {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
