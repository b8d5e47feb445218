"""Command-line entry points ``e4elab`` and ``toygen``.

Exit codes: 0 success, 2 configuration error, 3 training error.
"""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys

import numpy as np

from ..errors import ConfigError, E4EError, TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING = 0, 2, 3


def _load(args):
    from .config import TrainConfig, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _artifacts(args) -> str:
    return args.artifacts or args.out


def cmd_datagen(args) -> None:
    from .. import scenes

    cfg = _load(args)
    n = args.n if args.n is not None else cfg.data.eval_size
    items = scenes.sample_dataset(n, cfg.seed, cfg.model.resolution)
    path = scenes.export_dataset(items, args.out, cfg.seed)
    print(f"wrote {n} images and {path}")


def cmd_pretrain_gan(args) -> None:
    from . import experiment as X
    from .training import SceneData, embedder_stage, load_embedder, pretrain_gan

    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    data = SceneData.build(cfg)
    emb_path = X.embedder_path(args.out)
    emb = load_embedder(emb_path) if os.path.exists(emb_path) else embedder_stage(cfg, data, emb_path)
    pretrain_gan(cfg, data, emb, X.gan_path(args.out), resume=args.resume)
    print(f"wrote {X.gan_path(args.out)}")


def cmd_train_encoder(args) -> None:
    from . import experiment as X
    from .training import SceneData, load_embedder, load_generator, train_encoder

    cfg = _load(args)
    if args.configuration is not None:
        cfg = cfg.with_overrides(configuration=args.configuration)
    root = _artifacts(args)
    for p in (X.embedder_path(root), X.gan_path(root)):
        if not os.path.exists(p):
            raise ConfigError(f"missing checkpoint: {p} (run pretrain-gan first)")
    os.makedirs(args.out, exist_ok=True)
    out = X.encoder_path(args.out, cfg.configuration, cfg.seed)
    train_encoder(cfg, load_generator(X.gan_path(root)), load_embedder(X.embedder_path(root)),
                  SceneData.build(cfg), out)
    print(f"wrote {out}")


def _read_images(image_dir: str) -> tuple[list[str], np.ndarray]:
    from PIL import Image

    files = sorted(glob.glob(os.path.join(image_dir, "*.png")))
    if not files:
        raise ConfigError(f"no PNG images in {image_dir}")
    imgs = [np.asarray(Image.open(f).convert("RGB"), dtype=np.float64) / 127.5 - 1.0 for f in files]
    return files, np.stack(imgs)


def cmd_invert(args) -> None:
    from ..encoder import encode_images
    from ..latent_geometry import stack_to_bytes
    from .training import load_encoder

    if not os.path.exists(args.encoder):
        raise ConfigError(f"missing checkpoint: {args.encoder}")
    files, images = _read_images(args.images)
    stacks = encode_images(load_encoder(args.encoder), images)
    os.makedirs(args.out, exist_ok=True)
    for f, s in zip(files, stacks):
        name = os.path.splitext(os.path.basename(f))[0] + ".stack"
        with open(os.path.join(args.out, name), "wb") as fh:
            fh.write(stack_to_bytes(s))
    print(f"wrote {len(files)} stacks to {args.out}")


def cmd_edit(args) -> None:
    from .. import scenes
    from ..editing import EditDirection, apply_edit
    from ..latent_geometry import stack_from_bytes
    from . import experiment as X
    from .training import load_generator

    cfg = _load(args)
    gen = load_generator(X.gan_path(_artifacts(args)))
    if args.direction:
        with open(args.direction) as fh:
            direction = EditDirection.from_json(fh.read())
        alpha = args.alpha if args.alpha is not None else 1.0
    else:
        cal = X.calibrate_edit(gen, args.attribute, args.amount, cfg.experiment.calibration_samples, cfg.seed)
        direction, alpha = cal.direction, cal.alpha if args.alpha is None else args.alpha
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, f"direction_{args.attribute}.json"), "w") as fh:
            fh.write(direction.to_json(gen.config.num_layers))
    files = sorted(glob.glob(os.path.join(args.stacks, "*.stack")))
    if not files:
        raise ConfigError(f"no .stack files in {args.stacks}")
    os.makedirs(args.out, exist_ok=True)
    syn = X.synthesize_fn(gen)
    for f in files:
        with open(f, "rb") as fh:
            s = stack_from_bytes(fh.read())
        img = syn(apply_edit(s, direction, alpha)[None])[0]
        scenes.save_png(img, os.path.join(args.out, os.path.splitext(os.path.basename(f))[0] + ".png"))
    print(f"wrote {len(files)} edited images (alpha={alpha:.4g}) to {args.out}")


def cmd_evaluate(args) -> None:
    from .experiment import run_experiment

    cfg = _load(args)
    result = run_experiment(cfg, _artifacts(args), args.out)
    for c in result.checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name} ({c.detail})")
    print(f"wrote {result.files['csv']}")


def cmd_report(args) -> None:
    from .experiment import build_artifacts, run_experiment

    cfg = _load(args)
    root = _artifacts(args)
    build_artifacts(cfg, root)
    result = run_experiment(cfg, root, args.out)
    with open(result.files["markdown"]) as fh:
        sys.stdout.write(fh.read())


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="e4elab", description="Toy e4e encoder training and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="render and export a labeled scene dataset")
    _common(p)
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("pretrain-gan", help="train the embedder (if missing) and the toy GAN")
    _common(p)
    p.add_argument("--resume", default=None, help="GAN checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain_gan)

    p = sub.add_parser("train-encoder", help="train one encoder configuration")
    _common(p)
    p.add_argument("--configuration", choices=("A", "B", "C", "D"), default=None)
    p.add_argument("--artifacts", default=None, help="directory with embedder.ckpt and gan.ckpt (default: --out)")
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("invert", help="encode a directory of PNGs into style-code stacks")
    _common(p)
    p.add_argument("--encoder", required=True)
    p.add_argument("--images", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("edit", help="apply a latent edit to stacks and render the results")
    _common(p)
    p.add_argument("--artifacts", default=None)
    p.add_argument("--stacks", required=True)
    p.add_argument("--direction", default=None, help="direction JSON; otherwise one is calibrated")
    p.add_argument("--attribute", default="radius")
    p.add_argument("--amount", type=float, default=0.03)
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("evaluate", help="compute metrics for all trained encoders")
    _common(p)
    p.add_argument("--artifacts", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="train anything missing, evaluate and print the markdown report")
    _common(p)
    p.add_argument("--artifacts", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def _run(func, args) -> int:
    try:
        func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except E4EError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return _run(args.func, args)


def cmd_sample(args) -> None:
    import torch

    from .. import scenes
    from ..toygen import ToyGenerator, sample_w, synthesize
    from ..latent_geometry import replicate
    from .training import load_generator

    if args.n < 1:
        raise ConfigError("--n: must be >= 1")
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise ConfigError(f"missing checkpoint: {args.checkpoint}")
        gen = load_generator(args.checkpoint)
    else:
        torch.manual_seed(args.seed)
        gen = ToyGenerator().eval()
    os.makedirs(args.out, exist_ok=True)
    w = sample_w(args.n, gen, args.seed)
    for i, v in enumerate(w):
        scenes.save_png(synthesize(replicate(v, gen.config.num_layers), gen), os.path.join(args.out, f"{i:05d}.png"))
    print(f"wrote {args.n} samples to {args.out}")


def toygen_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="toygen", description="Toy style generator debug tools.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("sample", help="write generator samples as PNGs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None, help="GAN checkpoint (random init when omitted)")
    p.set_defaults(func=cmd_sample)
    args = parser.parse_args(argv)
    return _run(args.func, args)


if __name__ == "__main__":
    sys.exit(main())
