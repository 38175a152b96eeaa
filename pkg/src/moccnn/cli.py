"""Command-line entry point.

Subcommands: generate, train, train-baseline, eval, inspect-gating, gradcheck.
Exit codes: 0 success, 1 gradient-check failure, 2 usage/validation error,
3 training divergence. Every run freezes its merged configuration to
<out>/config.txt so the run is reproducible from that file plus the seed.
"""

import argparse
import os
import sys

from .errors import (
    CheckpointError,
    ConfigurationError,
    MoccnnError,
    ParseError,
    TrainingDivergedError,
    ValidationError,
)

TOOL_VERSION = "0.1.0"
CHECKPOINT_VERSION = 1

_USAGE_ERRORS = (ConfigurationError, ValidationError, ParseError, CheckpointError)


def _freeze_config(out_dir, settings):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.txt")
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(settings):
            fh.write(f"{key}={settings[key]}\n")
    return path


def _read_kv_file(path):
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key=value")
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def _parse_size(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ConfigurationError(f"--size must look like 144x144, got {text!r}")


def _build_arch(overrides):
    """Merge key=value overrides over the built-in architecture defaults."""
    from . import models
    from .trainer import OptimizerConfig

    def tup(key, conv, default):
        if key in overrides:
            return tuple(conv(v) for v in overrides[key].split(","))
        return default

    expert = models.ExpertNetConfig(
        input_size=tup("expert.input_size", int, (72, 72)),
        in_channels=int(overrides.get("expert.in_channels", 1)),
        conv_channels=tup("expert.conv_channels", int, (16, 32)),
        kernel_sizes=tup("expert.kernel_sizes", int, (5, 5)),
        strides=tup("expert.strides", int, (1, 1)),
        pool_sizes=tup("expert.pool_sizes", int, (2, 3)),
    )
    gate = models.GatingNetConfig(
        conv_channels=tup("gate.conv_channels", int, (32, 64)),
        kernel_sizes=tup("gate.kernel_sizes", int, (5, 5)),
        strides=tup("gate.strides", int, (1, 1)),
        pool_sizes=tup("gate.pool_sizes", int, (2, 3)),
        hidden=int(overrides.get("gate.hidden", 128)),
        dropout_rate=float(overrides.get("gate.dropout_rate", 0.5)),
    )
    optimizer = OptimizerConfig(
        eta_expert=float(overrides.get("adam.eta_expert", 1e-3)),
        eta_gate=float(overrides.get("adam.eta_gate", 1e-3)),
        beta1=float(overrides.get("adam.beta1", 0.9)),
        beta2=float(overrides.get("adam.beta2", 0.999)),
        eps=float(overrides.get("adam.eps", 1e-8)),
    )
    sigma = float(overrides.get("sigma", 4.0))
    precision = overrides.get("precision", "standard")
    return expert, gate, optimizer, sigma, precision


def _arch_settings(expert, gate, optimizer, sigma, precision):
    s = {
        "expert.input_size": ",".join(map(str, expert.input_size)),
        "expert.in_channels": expert.in_channels,
        "expert.conv_channels": ",".join(map(str, expert.conv_channels)),
        "expert.kernel_sizes": ",".join(map(str, expert.kernel_sizes)),
        "expert.strides": ",".join(map(str, expert.strides)),
        "expert.pool_sizes": ",".join(map(str, expert.pool_sizes)),
        "gate.conv_channels": ",".join(map(str, gate.conv_channels)),
        "gate.kernel_sizes": ",".join(map(str, gate.kernel_sizes)),
        "gate.strides": ",".join(map(str, gate.strides)),
        "gate.pool_sizes": ",".join(map(str, gate.pool_sizes)),
        "gate.hidden": gate.hidden,
        "gate.dropout_rate": repr(gate.dropout_rate),
        "adam.eta_expert": repr(optimizer.eta_expert),
        "adam.eta_gate": repr(optimizer.eta_gate),
        "adam.beta1": repr(optimizer.beta1),
        "adam.beta2": repr(optimizer.beta2),
        "adam.eps": repr(optimizer.eps),
        "sigma": repr(sigma),
        "precision": precision,
    }
    return s


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    from . import data

    if args.scenes < 1:
        raise ConfigurationError("--scenes must be >= 1")
    if args.modes in data.SYNTH_PRESETS:
        config = data.SYNTH_PRESETS[args.modes]()
    elif os.path.exists(args.modes):
        config = data.load_synth_modes(args.modes)
    else:
        raise ConfigurationError(f"--modes {args.modes!r} is neither a preset nor a file")
    if args.size:
        import dataclasses
        config = dataclasses.replace(config, size=_parse_size(args.size))
    scenes = data.synth_generate(config, args.scenes, args.seed)
    manifest = data.save_dataset(scenes, args.out)
    _freeze_config(args.out, {
        "command": "generate", "modes": args.modes, "scenes": args.scenes,
        "size": f"{config.size[0]}x{config.size[1]}", "seed": args.seed,
        "margin": repr(config.margin),
    })
    print(f"wrote {len(scenes)} scenes and {os.path.basename(manifest)} to {args.out}")
    return 0


def _load_patches(args, sigma):
    from . import data

    scenes = data.load_manifest(args.data)
    if not scenes:
        raise ConfigurationError(f"manifest {args.data} lists no scenes")
    patches = data.build_training_patches(scenes, args.crops, sigma, args.seed)
    return scenes, patches


def _run_training(args, variant):
    from . import data, trainer

    overrides = _read_kv_file(args.arch) if args.arch else {}
    expert, gate, optimizer, sigma, precision = _build_arch(overrides)
    config = trainer.TrainingConfig(
        batch_size=args.batch, epochs=args.epochs, lam=getattr(args, "lam", 0.0),
        num_experts=args.k, seed=args.seed, precision=precision, variant=variant,
        expert_config=expert, gate_config=gate, optimizer=optimizer,
    )
    config.validate()
    scenes, patches = _load_patches(args, sigma)
    settings = _arch_settings(expert, gate, optimizer, sigma, precision)
    settings.update({
        "command": "train" if variant == "moc" else f"train-baseline:{variant}",
        "data": os.path.abspath(args.data), "k": args.k, "lambda": repr(config.lam),
        "epochs": args.epochs, "batch": args.batch, "crops": args.crops,
        "seed": args.seed, "variant": variant, "tool_version": TOOL_VERSION,
        "checkpoint_version": CHECKPOINT_VERSION,
    })
    _freeze_config(args.out, settings)
    model, logs = trainer.train(config, patches)
    trainer.write_log(os.path.join(args.out, "train_log.csv"), logs,
                      model.num_experts if model.kind != "ordinary" else 1)
    ckpt = os.path.join(args.out, "model.ckpt")
    trainer.save_checkpoint(model, ckpt)
    last = logs[-1]
    print(f"trained {variant} for {args.epochs} epochs on {len(patches)} patches "
          f"from {len(scenes)} scenes; final expert loss {last.expert_loss:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_train(args):
    return _run_training(args, "moc")


def cmd_train_baseline(args):
    variant = {"ordinary": "ordinary", "fc-gating": "fc_gating"}[args.variant]
    return _run_training(args, variant)


def _load_model_for_data(path):
    from . import data, trainer

    model, cfg = trainer.load_checkpoint(path)
    if tuple(model.expert_config.input_size) != (data.PATCH_SIZE, data.PATCH_SIZE):
        raise ConfigurationError(
            f"checkpoint input size {model.expert_config.input_size} does not match "
            f"the {data.PATCH_SIZE}x{data.PATCH_SIZE} patch pipeline")
    return model, cfg


def cmd_eval(args):
    from . import data, metrics
    from .errors import MetricUndefinedError

    model, _ = _load_model_for_data(args.model)
    scenes = data.load_manifest(args.data)
    os.makedirs(args.out, exist_ok=True)

    def run(subset):
        try:
            return metrics.evaluate_model(model, subset, clamp_negative=args.clamp_negative)
        except MetricUndefinedError as exc:
            print(f"warning: {exc}; writing metrics without MDE", file=sys.stderr)
            return exc.report

    settings = {"command": "eval", "model": os.path.abspath(args.model),
                "data": os.path.abspath(args.data), "clamp_negative": args.clamp_negative,
                "folds": args.folds or "", "seed": args.seed}
    _freeze_config(args.out, settings)
    if args.folds:
        folds = data.kfold_split([s.id for s in scenes], args.folds, args.seed)
        by_id = {s.id: s for s in scenes}
        all_rows = []
        for i, fold in enumerate(folds, start=1):
            report = run([by_id[sid] for sid in fold])
            metrics.write_metrics_csv(os.path.join(args.out, f"metrics_fold{i}.csv"), report)
            all_rows.extend(report.rows)
        ids = [r[0] for r in all_rows]
        truths = [r[1] for r in all_rows]
        preds = [r[2] for r in all_rows]
        try:
            aggregate = metrics.score(truths, preds, scene_ids=ids)
        except MetricUndefinedError as exc:
            aggregate = exc.report
        metrics.write_metrics_csv(os.path.join(args.out, "metrics.csv"), aggregate)
        print(f"wrote {len(folds)} fold reports + aggregate over {len(all_rows)} scenes")
    else:
        report = run(scenes)
        metrics.write_metrics_csv(os.path.join(args.out, "metrics.csv"), report)
        print(f"evaluated {report.n_test} scenes: mae={report.mae:.4f} msd={report.msd:.4f}")
    return 0


def cmd_inspect_gating(args):
    from . import data, metrics

    model, _ = _load_model_for_data(args.model)
    scenes = data.load_manifest(args.data)
    rows, aggregates = metrics.gating_report(model, scenes)
    os.makedirs(args.out, exist_ok=True)
    _freeze_config(args.out, {"command": "inspect-gating",
                              "model": os.path.abspath(args.model),
                              "data": os.path.abspath(args.data)})
    k = model.num_experts if model.kind == "moc" else 1
    metrics.write_gating_csv(os.path.join(args.out, "gating.csv"), rows, aggregates, k)
    print(f"wrote gating report for {len(rows)} scenes"
          + (f" with {len(aggregates)} mode aggregates" if aggregates else ""))
    return 0


def cmd_gradcheck(args):
    from . import gradaudit

    results = gradaudit.run_audit(n_seeds=args.seeds, base_seed=args.seed, full=args.full)
    failed = 0
    for res in results:
        if res.expected_fail:
            status = "FLAGGED (expected)" if res.ok else "NOT FLAGGED (broken oracle)"
        else:
            status = "PASS" if res.ok else "FAIL"
        print(f"{res.name:45s} max_rel_err={res.max_err:.3e} threshold={res.threshold:.0e} {status}")
        if not res.ok:
            failed += 1
    if failed:
        print(f"{failed} check(s) failed")
        return 1
    print("all gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--k", type=int, default=10, help="number of experts")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--crops", type=int, default=80, help="random crops per training scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--arch", help="key=value architecture/optimizer override file")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="moccnn",
        description="Train and evaluate gated mixtures of counting networks on dot-annotated scenes.",
    )
    parser.add_argument("--version", action="version",
                        version=f"moccnn {TOOL_VERSION} (checkpoint format v{CHECKPOINT_VERSION})")
    parser.add_argument("--threads", type=int, default=0,
                        help="cap BLAS worker threads (default: machine parallelism)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--modes", default="modes3", help="preset name or mode file")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--size", default="", help="scene size HxW (default from preset)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the gated mixture")
    _add_train_flags(p)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="variance regularization trade-off")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-baseline", help="train a comparison baseline")
    p.add_argument("--variant", choices=["ordinary", "fc-gating"], required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clamp-negative", action="store_true",
                   help="clamp negative patch predictions to zero before summing")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-gating", help="per-image gate responses as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_gating)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all backwards")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20, help="random repetitions per check")
    p.add_argument("--full", action="store_true",
                   help="also audit the loss-gradient formulas and composed networks")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads and args.threads > 0:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=args.threads)
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)  # propagate to any child process
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MoccnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
