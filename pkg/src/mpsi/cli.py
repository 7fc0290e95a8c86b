"""Command-line entry point: ``mpsi {train,infer,eval,gradcheck,ablate}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .tensor import ConfigError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--override expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _spec(args):
    from .training import load_spec

    items = _overrides(args.override)
    if args.seed is not None:
        items["seed"] = str(args.seed)
    if args.scale is not None:
        items["scale"] = str(args.scale)
    return load_spec(args.config, items)


# -------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from .training import train_loop

    spec = _spec(args)
    spec.validate()
    if not Path(spec.manifest).is_file():
        raise ConfigError(f"manifest: file not found: {spec.manifest}")
    out = Path(args.out)
    result = train_loop(spec, out, resume=args.resume, log=print)
    print(f"# done: iteration={result.state.iteration} checkpoint={out / 'model.ckpt'}")
    return EXIT_OK


def _checkpoint_cfg(path, scale):
    from .model import config_path_for
    from .config import load_config

    if not Path(path).is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    cfg = load_config(config_path_for(path))
    if scale is not None and scale != cfg.scale:
        raise ConfigError(f"--scale {scale} does not match the checkpoint's scale {cfg.scale}")
    return cfg


def cmd_infer(args) -> int:
    from .data import load_image, save_image
    from .model import load_model, super_resolve

    cfg = _checkpoint_cfg(args.checkpoint, args.scale)
    model = load_model(args.checkpoint, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for src in args.inputs:
        src = Path(src)
        sr = super_resolve(model, load_image(src))
        dst = out / f"{src.stem}.x{cfg.scale}.png"
        save_image(sr, dst)
        print(f"{src}\t{dst}\t{sr.shape[1]}x{sr.shape[2]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import list_images
    from .evaluation import bicubic_predictor, evaluate_images, model_predictor
    from .metrics import EvalProtocol, write_report

    if args.identity and args.bicubic:
        raise UsageError("--identity and --bicubic are mutually exclusive")
    if args.identity or args.bicubic:
        if args.scale is None:
            raise UsageError("--scale is required with --identity or --bicubic")
        scale = args.scale
        predictor = None if args.identity else bicubic_predictor(scale)
    else:
        if args.checkpoint is None:
            raise UsageError("eval needs --checkpoint (or --identity / --bicubic)")
        from .model import load_model

        cfg = _checkpoint_cfg(args.checkpoint, args.scale)
        scale = cfg.scale
        predictor = model_predictor(load_model(args.checkpoint, cfg))
    images = list_images(args.hr_dir)
    if not images:
        raise IOError(f"{args.hr_dir}: no .png or .ppm images")
    proto = EvalProtocol(convert_to_luma=not args.rgb, border_crop=scale if args.crop is None else args.crop)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = evaluate_images(images, scale, predictor, proto, diff_dir=out if args.diff_maps else None)
    for line in write_report(out / "report.tsv", rows, proto):
        print(line)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    scopes = ["ops", "blocks", "model"] if args.scope == "all" else [args.scope]
    failed = 0
    for scope in scopes:
        print(f"# scope={scope}")
        results = run_suite(scope, seed=args.seed or 0, log=print)
        failed += sum(not r.ok for r in results)
    print(f"# {'FAIL' if failed else 'ok'}: {failed} unit(s) over tolerance")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_ablate(args) -> int:
    from .data import list_images, write_manifest, write_synthetic_set
    from .training import format_ablation_table, run_ablation

    out = Path(args.out)
    items = _overrides(args.override)
    if args.synthetic:
        syn = out / "synthetic"
        train_paths = write_synthetic_set(syn / "train", args.synthetic, args.image_size, args.image_size, seed=101)
        write_manifest(syn / "train.txt", [p.resolve() for p in train_paths])
        items.setdefault("manifest", str(syn / "train.txt"))
        set_a = write_synthetic_set(syn / "eval_a", 2, args.image_size, args.image_size, seed=202)
        set_b = write_synthetic_set(syn / "eval_b", 2, args.image_size, args.image_size, seed=303)
        eval_sets = {"setA": set_a, "setB": set_b}
    else:
        if not args.eval_a or not args.eval_b:
            raise UsageError("ablate needs --eval-a and --eval-b directories (or --synthetic N)")
        eval_sets = {Path(args.eval_a).name or "setA": list_images(args.eval_a),
                     Path(args.eval_b).name or "setB": list_images(args.eval_b)}
        if len(set(eval_sets)) != 2:
            eval_sets = dict(zip(("setA", "setB"), eval_sets.values()))
    args.override = [f"{k}={v}" for k, v in items.items()]
    spec = _spec(args)
    spec.validate()
    rows = run_ablation(spec, eval_sets, out, log=print)
    for line in format_ablation_table(rows, list(eval_sets)):
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpsi", description="Desk-scale MPSI super-resolution: train, infer, evaluate, verify.")
    sub = parser.add_subparsers(dest="command", metavar="{train,infer,eval,gradcheck,ablate}", parser_class=_Parser)
    sub.required = True

    def common(p, config=True):
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
        p.add_argument("--seed", type=int, default=None, help="seed for init and sampling")
        p.add_argument("--scale", type=int, choices=(2, 3, 4), default=None, help="upscaling factor")
        if config:
            p.add_argument("--config", default=None, help="key=value run config file")
            p.add_argument("--override", action="append", default=[], metavar="K=V",
                           help="override one config key (repeatable)")

    p = sub.add_parser("train", help="train a model from a manifest of HR images")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the state saved under --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve images with a checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (with its .cfg sidecar)")
    p.add_argument("inputs", nargs="+", help="LR images (.png or .ppm)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="degrade, super-resolve and score a directory of HR images")
    common(p, config=False)
    p.add_argument("--checkpoint", default=None, help="model checkpoint")
    p.add_argument("--hr-dir", required=True, help="directory of HR images")
    p.add_argument("--identity", action="store_true", help="score each HR image against itself")
    p.add_argument("--bicubic", action="store_true", help="score plain bicubic upscaling")
    p.add_argument("--diff-maps", action="store_true", help="write <name>.diff.png error maps")
    p.add_argument("--rgb", action="store_true", help="score RGB instead of the luma channel")
    p.add_argument("--crop", type=int, default=None, help="border crop per side (default: scale)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scope", choices=("ops", "blocks", "model", "all"), default="all")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score the ablation wirings")
    common(p)
    p.add_argument("--eval-a", default=None, help="first eval directory")
    p.add_argument("--eval-b", default=None, help="second eval directory")
    p.add_argument("--synthetic", type=int, default=0, metavar="N",
                   help="generate N synthetic training images plus two 2-image eval sets under --out")
    p.add_argument("--image-size", type=int, default=48, help="synthetic image extent (default 48)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"mpsi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"mpsi: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"mpsi: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
