"""Command-line interface: ``edgeseg <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 input/output error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .imaging import DEFAULT_HIGH, DEFAULT_LOW, canny, load_png, save_mask, save_png
from .kmeans import DEFAULT_K, kmeans_features, label_image
from .numerics import ShapeError, no_grad

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (sections model/train/synth); every key has a default")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable, applied after --config")
    p.add_argument("--seed", type=int, help="root seed (sets train.seed and synth.seed)")


def _effective_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"synth.seed={args.seed}"]
    return load_config(args.config, overrides)


def _config_text(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def _echo(cfg: RunConfig) -> None:
    print("# effective config", file=sys.stderr)
    for line in _config_text(cfg).splitlines():
        print(f"# {line}", file=sys.stderr)


def _read_rgb(path) -> np.ndarray:
    img = load_png(path)
    return np.repeat(img[..., None], 3, axis=2) if img.ndim == 2 else img


def _checkpoint_path(path) -> Path:
    p = Path(path)
    return p / "final.ckpt" if p.is_dir() else p


# -- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import write_dataset

    cfg = _effective_config(args)
    _echo(cfg)
    root = write_dataset(cfg.synth, args.out, args.count, args.start)
    (root / "config.json").write_text(_config_text(cfg) + "\n")
    print(f"wrote {args.count} samples to {root}")
    return 0


def cmd_train(args) -> int:
    from .synth import load_dataset
    from .trainer import train

    cfg = _effective_config(args)
    _echo(cfg)
    data = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(_config_text(cfg) + "\n")
    with open(out / "train.log", "w", encoding="utf-8") as log:
        for line in _config_text(cfg).splitlines():
            log.write(f"# {line}\n")
        log.write("# step seg det total\n")

        def emit(line: str) -> None:
            log.write(line + "\n")
            if not args.quiet:
                print(line)

        res = train(data, cfg, log=emit, out_dir=out)
        summary = res.summary()
        summary.pop("seconds")
        log.write("# summary " + json.dumps(summary, sort_keys=True) + "\n")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"trained {res.optimizer.t} steps in {res.seconds:.1f}s; checkpoint {out / 'final.ckpt'}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    from .synth import load_dataset
    from .trainer import evaluate, load_checkpoint

    cfg, model, _ = load_checkpoint(_checkpoint_path(args.checkpoint))
    _echo(cfg)
    report = evaluate(model, load_dataset(args.data), args.band_radius)
    sys.stdout.write(report.to_text())
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    return 0


def cmd_segment(args) -> int:
    from .decoder_loss import predict_mask
    from .model import images_to_tensor, raw_edges
    from .trainer import load_checkpoint

    cfg, model, _ = load_checkpoint(_checkpoint_path(args.checkpoint))
    img = _read_rgb(args.image)
    edges = raw_edges(img, cfg.model)
    with no_grad():
        out = model(images_to_tensor(img), edges if model.uses_edges else None)
    save_mask(args.out, predict_mask(out["seg_logits"])[0])
    if args.intermediates:
        d = Path(args.intermediates)
        d.mkdir(parents=True, exist_ok=True)
        save_mask(d / "canny.png", edges[0])
        if "edge_soft" in out:
            save_mask(d / "edge_soft.png", out["edge_soft"].data[0, 0])
        if "area_fg" in out:
            save_mask(d / "area_mask.png", out["area_fg"].data[0, 0])
        if "edges" in out:
            save_mask(d / "text_edges.png", out["edges"].data[0, 0])
    return 0


def cmd_edges(args) -> int:
    img = load_png(args.image)
    save_mask(args.out, canny(img, args.low, args.high))
    return 0


def cmd_cluster(args) -> int:
    from .model import images_to_tensor, raw_edges
    from .trainer import load_checkpoint

    cfg, model, _ = load_checkpoint(_checkpoint_path(args.checkpoint))
    if not 1 <= args.stage <= 4:
        raise ConfigError(f"--stage must be 1..4, got {args.stage}")
    img = _read_rgb(args.image)
    with no_grad():
        out = model(images_to_tensor(img), raw_edges(img, cfg.model) if model.uses_edges else None)
    feats = out["encoder"].stages[args.stage - 1].data[0]
    res = kmeans_features(feats, args.k, args.cluster_seed)
    save_png(args.out, label_image(res.labels, args.k))
    print(f"stage {args.stage}: {feats.shape[1]}x{feats.shape[2]} grid, k={args.k}, "
          f"{res.iterations} iterations, inertia {res.inertia[-1]:.6g}")
    return 0


def _harness_data(args):
    from .synth import load_dataset

    return load_dataset(args.data), load_dataset(args.test_data)


def cmd_ablate(args) -> int:
    from .trainer import ablation_run, format_table, rows_to_json

    cfg = _effective_config(args)
    _echo(cfg)
    train_data, test_data = _harness_data(args)
    rows = ablation_run(train_data, test_data, cfg, args.seeds, log=lambda s: print(s, file=sys.stderr))
    return _write_table(args.out, format_table(rows, "EF/EG"), rows_to_json(rows))


def cmd_sweep(args) -> int:
    from .trainer import format_table, lambda_sweep, rows_to_json

    cfg = _effective_config(args)
    _echo(cfg)
    train_data, test_data = _harness_data(args)
    rows = lambda_sweep(train_data, test_data, cfg, args.lambdas, log=lambda s: print(s, file=sys.stderr))
    return _write_table(args.out, format_table(rows, "lambda"), rows_to_json(rows))


def _write_table(out, text: str, js: str) -> int:
    sys.stdout.write(text)
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(text)
        (out / "table.json").write_text(js + "\n")
    return 0


# -- parser -------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeseg", description="Edge-aware text segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--start", type=int, default=0, help="index of the first sample")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--out", required=True, help="run directory (log, checkpoints)")
    p.add_argument("--quiet", action="store_true", help="do not print per-step losses")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="global and edge-band metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--band-radius", type=int, default=None, help="edge band radius (default: 2 px per 64 px)")
    p.add_argument("--json", help="also write the report as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="segment one image")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--out", required=True, help="output mask PNG")
    p.add_argument("--intermediates", metavar="DIR",
                   help="also write canny, soft edge, area mask and filtered edge maps to DIR")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("edges", help="Canny edge map of one image")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--out", required=True, help="output edge PNG")
    p.add_argument("--low", type=float, default=DEFAULT_LOW, help=f"low threshold (default {DEFAULT_LOW:g})")
    p.add_argument("--high", type=float, default=DEFAULT_HIGH, help=f"high threshold (default {DEFAULT_HIGH:g})")
    p.set_defaults(func=cmd_edges)

    p = sub.add_parser("cluster", help="K-means label map of one encoder stage's features")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--stage", type=int, default=1, help="encoder stage 1..4 (default 1)")
    p.add_argument("--k", type=int, default=DEFAULT_K, help=f"number of clusters (default {DEFAULT_K})")
    p.add_argument("--cluster-seed", type=int, default=0, help="seed for centre initialisation")
    p.add_argument("--out", required=True, help="output label PNG")
    p.set_defaults(func=cmd_cluster)

    for name, func, helptext in (("ablate", cmd_ablate, "edge filtering / guidance ablation table"),
                                 ("sweep", cmd_sweep, "lambda sweep table")):
        p = sub.add_parser(name, help=helptext)
        _add_config_args(p)
        p.add_argument("--data", required=True, help="training dataset directory")
        p.add_argument("--test-data", required=True, help="held-out dataset directory")
        p.add_argument("--out", help="directory for table.txt / table.json")
        if name == "ablate":
            p.add_argument("--seeds", type=_ints, default=[0, 1, 2], help="comma-separated seeds (default 0,1,2)")
        else:
            p.add_argument("--lambdas", type=_floats, default=[0.1, 0.5, 1.0, 5.0, 10.0],
                           help="comma-separated lambda values (default 0.1,0.5,1,5,10)")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    from .trainer import NumericError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ShapeError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
