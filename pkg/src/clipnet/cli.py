"""Command-line entry point: synth-gen, train, eval, gradcheck, inspect.

Exit codes: 0 success, 1 usage error, 2 data/format/configuration error,
3 numeric failure (gradient check over tolerance, non-finite loss).
Every run writes a config snapshot to its --out directory so it can be
reproduced bit-exactly.
"""

import argparse
import dataclasses
import os
import sys

from .data import ClipDataset, Manifest, SynthConfig, read_fseq, synth_generate
from .errors import ClipnetError, FormatError, NumericError, UsageError
from .gradcheck import (
    DEFAULT_EPSILON,
    DEFAULT_SEEDS,
    TOLERANCE,
    run_op_check,
    suite_ops,
)
from .model import EngagementModel, config_from_text, config_to_text, preset_config
from .tensor import read_tensor
from .train import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    resolve_class_weights,
    train,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_ints(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _csv_pair(text):
    values = _csv_ints(text)
    if len(values) != 2:
        raise UsageError(f"expected lo,hi pair, got {text!r}")
    return values


def build_parser():
    parser = _Parser(prog="clipnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth-gen", parents=[], help="generate a synthetic motion-order dataset")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--counts", type=_csv_ints, required=True, help="train clips per class")
    p.add_argument("--val-counts", type=_csv_ints, default=None)
    p.add_argument("--test-counts", type=_csv_ints, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--object-size", type=_csv_pair, default=None)
    p.add_argument("--speed", type=_csv_pair, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--intensity", type=_csv_pair, default=None)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train a model on a manifest's train split")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--config", default=None, help="model config file overriding the preset")
    p.add_argument("--head", choices=("tcn", "meanpool"), default="tcn")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--class-weights", choices=("none", "train", "train+val"), default="none")
    p.add_argument("--sampler", choices=("uniform", "stratified"), default="uniform")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of the op set")
    p.add_argument("--all", action="store_true")
    p.add_argument("--op", action="append", default=None, help="op family; repeatable")
    p.add_argument("--seeds", type=int, default=DEFAULT_SEEDS)
    p.add_argument("--eps", type=float, default=DEFAULT_EPSILON)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="describe a clip, tensor, or checkpoint file")
    p.add_argument("--file", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


# -- helpers --------------------------------------------------------------------


def _write_snapshot(out_dir, sections):
    """Flat key=value snapshot; sections is a list of (comment, text) pairs."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.txt")
    with open(path, "w") as fh:
        for comment, text in sections:
            fh.write(f"# {comment}\n")
            fh.write(text)
    return path


def _train_config_text(args, train_config, preset, head):
    lines = [
        f"preset={preset}",
        f"head={head}",
        f"manifest={os.path.abspath(args.manifest)}",
        f"lr={train_config.lr!r}",
        f"momentum={train_config.momentum!r}",
        f"batch_size={train_config.batch_size}",
        f"epochs={train_config.epochs}",
        f"class_weights={args.class_weights}",
        f"sampler={args.sampler}",
        f"seed={train_config.seed}",
        f"deterministic={'1' if train_config.deterministic else '0'}",
    ]
    return "".join(line + "\n" for line in lines)


# -- subcommands ------------------------------------------------------------------


def cmd_synth_gen(args):
    model_cfg = preset_config(args.preset)
    knobs = {}
    if args.object_size is not None:
        knobs["object_size"] = args.object_size
    if args.speed is not None:
        knobs["speed"] = args.speed
    if args.noise is not None:
        knobs["noise"] = args.noise
    if args.intensity is not None:
        knobs["intensity"] = args.intensity
    splits = [("train", args.counts, args.seed)]
    if args.val_counts is not None:
        splits.append(("validation", args.val_counts, args.seed + 1))
    if args.test_counts is not None:
        splits.append(("test", args.test_counts, args.seed + 2))
    os.makedirs(args.out, exist_ok=True)
    manifest_path = os.path.join(args.out, "manifest.csv")
    snapshot = []
    for i, (split, counts, seed) in enumerate(splits):
        cfg = SynthConfig(
            counts=counts,
            frame_size=model_cfg.frame_size,
            clip_len=model_cfg.clip_len,
            seed=seed,
            split=split,
            **knobs,
        )
        manifest = synth_generate(cfg, args.out, manifest_path=manifest_path, append=i > 0)
        lines = [
            f"{split}.counts={','.join(str(c) for c in counts)}",
            f"{split}.seed={seed}",
        ]
        snapshot.append((f"synthetic {split} split", "".join(l + "\n" for l in lines)))
    common = [
        f"frame_size={model_cfg.frame_size[0]},{model_cfg.frame_size[1]}",
        f"clip_len={model_cfg.clip_len}",
        f"preset={args.preset}",
    ]
    for key, default in (("object_size", None), ("speed", None), ("noise", None), ("intensity", None)):
        if key in knobs:
            v = knobs[key]
            common.append(f"{key}={v if not isinstance(v, tuple) else ','.join(map(str, v))}")
    snapshot.append(("synthetic dataset shape", "".join(l + "\n" for l in common)))
    _write_snapshot(args.out, snapshot)
    print(f"wrote {len(manifest.entries)} clips and {manifest_path}")
    return 0


def cmd_train(args):
    if args.config is not None:
        with open(args.config) as fh:
            model_cfg = config_from_text(fh.read())
        preset_name = f"file:{args.config}"
    else:
        model_cfg = preset_config(args.preset, head=args.head)
        preset_name = args.preset
    defaults = {"desk": (0.02, 8), "paper": (0.001, 5)}
    lr_default, batch_default = defaults.get(args.preset, (0.001, 5))
    train_cfg = TrainConfig(
        lr=args.lr if args.lr is not None else lr_default,
        momentum=args.momentum,
        batch_size=args.batch_size if args.batch_size is not None else batch_default,
        epochs=args.epochs,
        use_class_weights=args.class_weights != "none",
        use_stratified_sampler=args.sampler == "stratified",
        seed=args.seed,
        deterministic=args.deterministic,
        weight_split="train+val" if args.class_weights == "train+val" else "train",
    )
    manifest = Manifest.read(args.manifest, num_classes=model_cfg.num_classes)
    dataset = ClipDataset(manifest, "train", model_cfg.clip_len, model_cfg.frame_size)
    weights = None
    if train_cfg.use_class_weights:
        weights = resolve_class_weights(manifest, model_cfg.num_classes, train_cfg.weight_split)
    if args.resume is not None:
        state = load_checkpoint(args.resume, expected_config=model_cfg)
        model, velocity, start_epoch = state.model, state.velocity, state.epoch
        train_cfg = dataclasses.replace(train_cfg, seed=state.seed)
    else:
        model = EngagementModel(model_cfg, seed=args.seed)
        velocity, start_epoch = None, 0
    _write_snapshot(
        args.out,
        [
            ("training run", _train_config_text(args, train_cfg, preset_name, model_cfg.head)),
            ("model configuration", config_to_text(model_cfg)),
        ],
    )
    logs, _ = train(
        model,
        dataset,
        train_cfg,
        out_dir=args.out,
        weights=weights,
        start_epoch=start_epoch,
        velocity=velocity,
        log_stream=sys.stdout,
    )
    if train_cfg.deterministic:
        test_paths = {
            manifest.resolve(e) for e in manifest.entries if e.split == "test"
        }
        touched = set(dataset.access_log)
        leaked = sorted(touched & test_paths)
        with open(os.path.join(args.out, "access_log.txt"), "w") as fh:
            for path in dataset.access_log:
                fh.write(path + "\n")
        if leaked:
            raise ClipnetError(f"training read test-split clips: {leaked[:3]}")
    print(f"trained {len(logs)} epochs; checkpoint at {os.path.join(args.out, 'checkpoint.bin')}")
    return 0


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    model = state.model.eval()
    manifest = Manifest.read(args.manifest, num_classes=model.config.num_classes)
    dataset = ClipDataset(manifest, args.split, model.config.clip_len, model.config.frame_size)
    result = evaluate(model, dataset)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "confusion.csv"), "w") as fh:
        fh.write(result.confusion.to_csv_text())
    with open(os.path.join(args.out, "confusion.txt"), "w") as fh:
        fh.write(result.confusion.to_text())
    metric_lines = [f"split={args.split}", f"clips={result.confusion.total}", f"accuracy={result.accuracy:.6f}"]
    for c, (r, z) in enumerate(zip(result.per_class_recall, result.zero_support)):
        suffix = " (no support)" if z else ""
        metric_lines.append(f"recall_{c}={r:.6f}{suffix}")
    with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
        fh.write("".join(line + "\n" for line in metric_lines))
    _write_snapshot(
        args.out,
        [
            (
                "evaluation run",
                f"checkpoint={os.path.abspath(args.checkpoint)}\n"
                f"manifest={os.path.abspath(args.manifest)}\nsplit={args.split}\n",
            ),
            ("model configuration", config_to_text(model.config)),
        ],
    )
    print("\n".join(metric_lines))
    print(result.confusion.to_text(), end="")
    return 0


def cmd_gradcheck(args):
    if args.all or not args.op:
        ops = suite_ops()
    else:
        ops = args.op
    worst = 0.0
    failed = []
    for name in ops:
        if name not in suite_ops():
            raise UsageError(f"unknown gradcheck op {name!r}; known: {', '.join(suite_ops())}")
        err = run_op_check(name, seeds=args.seeds, epsilon=args.eps)
        worst = max(worst, err)
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name}: max_rel_err={err:.3e} {status}")
        if err >= TOLERANCE:
            failed.append(name)
    if failed:
        raise NumericError(
            f"gradient check failed for {', '.join(failed)} (tolerance {TOLERANCE})"
        )
    print(f"all ops within tolerance {TOLERANCE}")
    return 0


def cmd_inspect(args):
    with open(args.file, "rb") as fh:
        magic = fh.read(4)
    if magic == b"FSEQ":
        clip = read_fseq(args.file)
        l, c, h, w = clip.shape
        print(f"FSEQ clip: {l} frames x {c} channels x {h}x{w}, dtype {clip.dtype.name}")
    elif magic == b"TNSR":
        t = read_tensor(args.file)
        print(f"tensor: shape {tuple(t.shape)}, dtype {t.dtype.name}")
    elif magic == b"CKPT":
        state = load_checkpoint(args.file)
        n_params = state.model.params.num_scalars()
        print(f"checkpoint: epoch {state.epoch}, seed {state.seed}, {n_params} trainable scalars")
        print(config_to_text(state.model.config), end="")
    else:
        raise FormatError(f"unrecognized file magic {magic!r} at byte 0")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_help(sys.stderr)
            return 1
        return args.func(args)
    except SystemExit as exc:  # argparse -h/--help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("run 'clipnet --help' for usage", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ClipnetError, OSError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
