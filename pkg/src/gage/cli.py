"""Command-line entry point: ``gage <command> [flags]``.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attention import DEFAULT_COVERAGE, DEFAULT_TAU, extract_roi
from .backbone import PROFILES
from .branches import BRANCH_MODES, MULTIVIEW_MODES
from .dataset import DEFAULT_FRACTIONS, Manifest, generate_dataset
from .errors import GageError
from .pgm import read_pgm, write_pgm
from .phantom import VIEWS
from .tensor import Tensor
from .training import (BENCH_TAUS, STAGES, TrainConfig, checkpoint_path, evaluate, load_view_model, run_benchmark,
                       threshold_sweep, train_stage)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
TAU_HELP = "attention threshold in (0, 1); default 0.3 for resnet18, 0.4 for resnet50"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="key=value file supplying defaults for any flag of this command; explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk", help="size profile")
    p.add_argument("--variant", choices=sorted(DEFAULT_TAU), default="resnet18", help="backbone variant")
    p.add_argument("--tau", type=float, default=None, help=TAU_HELP)
    p.add_argument("--kappa", type=float, default=DEFAULT_COVERAGE, help="box coverage fraction in (0, 1]")
    p.add_argument("--shared-local", action="store_true",
                   help="local branch reuses the frozen global backbone and trains only its head")
    p.add_argument("--epochs", type=int, default=20, help="training epochs")
    p.add_argument("--batch-size", type=int, default=16, help="minibatch size (>= 2)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--seed", type=int, default=0, help="training seed (init and shuffling)")
    p.add_argument("--data", type=Path, default=Path("data"), help="dataset directory (holds manifest.csv)")


def build_parser() -> Parser:
    parser = Parser(prog="gage", description="Attention-guided age regression on synthetic multi-view phantoms.",
                    formatter_class=_formatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-data", help="render a phantom dataset", formatter_class=_formatter)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--subjects", type=int, default=300, help="number of subjects (3 views each)")
    p.add_argument("--seed", type=int, default=7, help="dataset seed")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk", help="size profile")
    p.add_argument("--fractions", type=float, nargs=3, default=list(DEFAULT_FRACTIONS),
                   metavar=("TRAIN", "VAL", "TEST"), help="subject-level split fractions")
    _common(p)

    p = sub.add_parser("train", help="run one training stage", formatter_class=_formatter)
    p.add_argument("--stage", choices=STAGES, default="global", help="training stage")
    p.add_argument("--view", choices=VIEWS, default="axial", help="imaging plane")
    p.add_argument("--branch", choices=BRANCH_MODES, default="global",
                   help="feature row fed to the multi-view fusion head (multiview stage)")
    p.add_argument("--out", type=Path, default=Path("checkpoints"),
                   help="checkpoint directory; stages read and write <out>/<view>/<stage>.gagb")
    p.add_argument("--base", type=Path, default=None,
                   help="upstream checkpoint (or view-checkpoint directory for multiview); default under --out")
    _training_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=_formatter)
    p.add_argument("--model", type=Path, required=True,
                   help="checkpoint file, or a checkpoint directory together with --view")
    p.add_argument("--view", choices=VIEWS, default=None, help="view to pick when --model is a directory")
    p.add_argument("--data", type=Path, default=Path("data"), help="dataset directory")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="split to score")
    p.add_argument("--branch", choices=BRANCH_MODES, default=None,
                   help="branch mode; default is the mode the checkpoint was trained for")
    p.add_argument("--multiview", choices=MULTIVIEW_MODES, default="average",
                   help="combination for multi-view checkpoints")
    p.add_argument("--out", type=Path, default=None, help="directory for the per-sample CSV (age_true,age_pred)")
    _common(p)

    p = sub.add_parser("attend", help="export heatmap, crop and box for one image", formatter_class=_formatter)
    p.add_argument("--model", type=Path, required=True, help="single-view checkpoint")
    p.add_argument("--image", type=Path, required=True, help="input PGM")
    p.add_argument("--out-prefix", required=True,
                   help="prefix of the outputs <prefix>heatmap.pgm, <prefix>crop.pgm, <prefix>box.txt")
    p.add_argument("--tau", type=float, default=None, help=TAU_HELP + "; default: the checkpoint's value")
    p.add_argument("--kappa", type=float, default=None, help="box coverage; default: the checkpoint's value")
    _common(p)

    p = sub.add_parser("sweep", help="retrain the local branch per threshold and score it",
                       formatter_class=_formatter)
    p.add_argument("--model", type=Path, required=True, help="global-stage checkpoint")
    p.add_argument("--taus", type=float, nargs="+", default=list(BENCH_TAUS), help="thresholds to sweep")
    p.add_argument("--out", type=Path, required=True, help="output directory for sweep.csv and checkpoints")
    _training_flags(p)
    _common(p)

    p = sub.add_parser("benchmark", help="one seed of the desk benchmark", formatter_class=_formatter)
    p.add_argument("--data", type=Path, required=True, help="dataset directory (300 subjects, seed 7)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--epochs", type=int, default=20, help="epochs per stage")
    _common(p)
    return parser


def _read_config(path: Path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _config_path(argv: list[str]) -> Path | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--config="):
            return Path(tok.split("=", 1)[1])
    return None


def _apply_config(parser: Parser, command: str, path: Path) -> None:
    """Install config-file values as subcommand defaults, so explicit flags still win."""
    sub = parser._subparsers._group_actions[0].choices.get(command)
    if sub is None:
        return  # the real parse reports the bad command
    try:
        values = _read_config(path)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in actions or key in ("config", "help"):
            raise UsageError(f"{path}: unknown key {key!r} for command {command!r}")
        action = actions[key]
        conv = action.type or str
        try:
            if isinstance(action, argparse._StoreTrueAction):
                value = raw.lower() in ("1", "true", "yes", "on")
            elif action.nargs in ("+", 3):
                value = [conv(v) for v in raw.split()]
            else:
                value = conv(raw)
        except ValueError:
            raise UsageError(f"{path}: invalid value {raw!r} for {key!r}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{path}: {key}={raw!r} is not one of {list(action.choices)}")
        defaults[key] = value
        action.required = False
    sub.set_defaults(**defaults)


def _train_config(args, **extra) -> TrainConfig:
    return TrainConfig(profile=args.profile, variant=args.variant, tau=args.tau, kappa=args.kappa,
                       shared_local=args.shared_local, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       data_dir=args.data, **extra)


def cmd_gen_data(args) -> None:
    manifest = generate_dataset(args.subjects, args.seed, args.out, args.profile, tuple(args.fractions))
    counts = {s: len({x.sample_id for x in manifest.select(split=s)}) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest)} images for {args.subjects} subjects to {args.out} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']} subjects)")


def cmd_train(args) -> None:
    cfg = _train_config(args, view=args.view, branch=args.branch, out=args.out)
    res = train_stage(cfg, args.stage, base=args.base)
    print(f"stage {res.stage}: best epoch {res.best_epoch}, val R2={res.best_val_r2:.4f}, "
          f"{res.seconds:.1f}s -> {res.path}")


def _resolve_model(model: Path, view: str | None) -> Path:
    if model.is_dir():
        if (model / "multiview.gagb").exists() and view is None:
            return model / "multiview.gagb"
        if view is None:
            raise UsageError("--model is a directory; pass --view to pick a view")
        for stage in ("combine", "local", "global"):
            p = checkpoint_path(model, stage, view)
            if p.exists():
                return p
        raise GageError(f"no checkpoint for view {view!r} under {model}")
    return model


def cmd_eval(args) -> None:
    path = _resolve_model(args.model, args.view)
    report = evaluate(path, Manifest.read(args.data), args.split, args.branch, args.multiview)
    print(report.summary())
    print(f"mean IoU={report.mean_iou:.4f} mean crop area={report.mean_crop_area:.1f} px "
          f"fallback rate={report.fallback_rate:.3f}")
    if args.out is not None:
        out = report.write_csv(Path(args.out) / f"eval_{args.split}.csv")
        print(f"wrote {out}")


def heatmap_image(values: np.ndarray, stride: int) -> np.ndarray:
    """[0, 1] heatmap to uint8 by rounding, each cell replicated over its stride block."""
    cells = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.kron(cells, np.ones((stride, stride), np.uint8))


def cmd_attend(args) -> None:
    vm, _ = load_view_model(args.model)
    tau = vm.tau if args.tau is None else args.tau
    kappa = vm.kappa if args.kappa is None else args.kappa
    image = read_pgm(args.image)
    if image.shape != (vm.input_size, vm.input_size):
        raise GageError(f"image is {image.shape[0]}x{image.shape[1]}, model expects {vm.input_size}x{vm.input_size}")
    x = vm.norm.images(image[None, None])
    fmap, _ = vm.global_backbone.forward_features(Tensor(x))
    roi = extract_roi(fmap.data[0], image.astype(np.float64), tau, kappa, vm.stride, vm.input_size, vm.min_side)
    prefix = args.out_prefix
    if prefix.endswith(("/", "\\")):
        Path(prefix).mkdir(parents=True, exist_ok=True)
    else:
        Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    write_pgm(heatmap_image(roi.attention.values, vm.stride), f"{prefix}heatmap.pgm")
    write_pgm(np.clip(np.rint(roi.crop), 0, 255).astype(np.uint8), f"{prefix}crop.pgm")
    Path(f"{prefix}box.txt").write_text(roi.box.to_line() + "\n")
    print(roi.box.to_line() + ("  (fallback: full image)" if roi.fallback else ""))


def cmd_sweep(args) -> None:
    cfg = _train_config(args, view=load_view_model(args.model)[0].view, out=args.out)
    points = threshold_sweep(cfg, args.taus, args.out, base=args.model)
    for p in points:
        print(f"tau={p.tau:g} r2_test={p.r2_test:.4f} mean_crop_area={p.mean_crop_area:.1f}")
    print(f"wrote {Path(args.out) / 'sweep.csv'}")


def cmd_benchmark(args) -> None:
    res = run_benchmark(args.data, args.out, args.seed, args.epochs)
    print(json.dumps({k: v for k, v in res.items() if k != "sweep"}, indent=2, sort_keys=True))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "attend": cmd_attend,
            "sweep": cmd_sweep, "benchmark": cmd_benchmark}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        config = _config_path(argv)
        if config is not None and argv and not argv[0].startswith("-"):
            _apply_config(parser, argv[0], config)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"gage {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GageError, OSError, ValueError, KeyError) as exc:
        print(f"gage {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
